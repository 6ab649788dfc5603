//! Open-boundary matrix product states with an optional orthogonality center.
//!
//! Site tensors have extents `(D_left, d, D_right)` and are stored row-major, so
//! entry `(a, s, b)` lives at `(a * d + s) * D_right + b`. Sites are indexed
//! from zero. When a center `c` is recorded, every tensor left of `c` is a left
//! isometry, every tensor right of `c` is a right isometry, and the squared
//! norm of the whole state equals the squared norm of tensor `c`.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::feature_map::EmbeddedSample;
use crate::linalg::{contract, dot, qr_split, DenseTensor};

/// Local dimension of the qubit feature map.
pub const LOCAL_DIM: usize = 2;

/// Largest chain for which the full `2^N` table is materialized.
pub const MAX_EXHAUSTIVE_SITES: usize = 14;

/// `<X|psi>` as sign and natural-log magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogAmplitude {
    /// -1, 0 or +1. Zero means the amplitude is exactly zero.
    pub sign: i8,
    pub log_magnitude: f64,
}

impl LogAmplitude {
    pub const ZERO: LogAmplitude = LogAmplitude {
        sign: 0,
        log_magnitude: f64::NEG_INFINITY,
    };

    pub fn from_value(v: f64) -> Self {
        if v == 0.0 {
            Self::ZERO
        } else {
            Self {
                sign: if v > 0.0 { 1 } else { -1 },
                log_magnitude: v.abs().ln(),
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sign == 0
    }

    /// Plain value; underflows to zero for very long chains.
    pub fn value(&self) -> f64 {
        if self.sign == 0 {
            0.0
        } else {
            f64::from(self.sign) * self.log_magnitude.exp()
        }
    }
}

/// A vector stored as `values * exp(log_scale)`, renormalized after every
/// contraction step so long chains neither underflow nor overflow.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ScaledVec {
    pub values: Vec<f64>,
    pub log_scale: f64,
}

impl ScaledVec {
    pub fn unit() -> Self {
        Self {
            values: vec![1.0],
            log_scale: 0.0,
        }
    }

    pub fn rescaled(mut values: Vec<f64>, log_scale: f64) -> Self {
        let m = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if m == 0.0 || !m.is_finite() {
            return Self { values, log_scale };
        }
        values.iter_mut().for_each(|v| *v /= m);
        Self {
            values,
            log_scale: log_scale + m.ln(),
        }
    }
}

/// `w[b] = sum_{a,s} v[a] T[a,s,b] x[s]`
pub(crate) fn apply_left(v: &[f64], t: &DenseTensor, x: [f64; 2]) -> Vec<f64> {
    let (dl, d, dr) = dims(t);
    debug_assert_eq!(v.len(), dl);
    let data = t.data();
    let mut w = vec![0.0; dr];
    for (a, &va) in v.iter().enumerate() {
        if va == 0.0 {
            continue;
        }
        for (s, &xs) in x.iter().enumerate().take(d) {
            let c = va * xs;
            if c == 0.0 {
                continue;
            }
            let row = &data[(a * d + s) * dr..(a * d + s + 1) * dr];
            for (wb, tb) in w.iter_mut().zip(row) {
                *wb += c * tb;
            }
        }
    }
    w
}

/// `w[a] = sum_{s,b} T[a,s,b] x[s] v[b]`
pub(crate) fn apply_right(t: &DenseTensor, x: [f64; 2], v: &[f64]) -> Vec<f64> {
    let (dl, d, dr) = dims(t);
    debug_assert_eq!(v.len(), dr);
    let data = t.data();
    (0..dl)
        .map(|a| {
            (0..d)
                .map(|s| {
                    if x[s] == 0.0 {
                        0.0
                    } else {
                        x[s] * dot(&data[(a * d + s) * dr..(a * d + s + 1) * dr], v)
                    }
                })
                .sum()
        })
        .collect()
}

pub(crate) fn dims(t: &DenseTensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

/// Moves the center from `left` to its right neighbour. Returns the new
/// left isometry and the new center tensor.
pub(crate) fn shift_right(
    left: &DenseTensor,
    right: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor)> {
    let (q, r) = qr_split(left, 2)?;
    let next = contract(&r, right, &[1], &[0])?;
    Ok((q, next))
}

/// Moves the center from `right` to its left neighbour. Returns the new
/// center tensor and the new right isometry.
pub(crate) fn shift_left(
    left: &DenseTensor,
    right: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor)> {
    // right = L * Q with Q row-orthonormal, via QR of the transpose
    let (q, r) = qr_split(&right.permute(&[1, 2, 0])?, 2)?;
    let iso = q.permute(&[2, 0, 1])?;
    let prev = contract(left, &r, &[2], &[1])?;
    Ok((prev, iso))
}

/// Frobenius norm of `sum_{a,s} T[a,s,b] T[a,s,b'] - delta`.
pub fn left_residual(t: &DenseTensor) -> f64 {
    let g = contract(t, t, &[0, 1], &[0, 1]).expect("rank-3 site tensor");
    identity_defect(&g)
}

/// Frobenius norm of `sum_{s,b} T[a,s,b] T[a',s,b] - delta`.
pub fn right_residual(t: &DenseTensor) -> f64 {
    let g = contract(t, t, &[1, 2], &[1, 2]).expect("rank-3 site tensor");
    identity_defect(&g)
}

fn identity_defect(g: &DenseTensor) -> f64 {
    let k = g.shape()[0];
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            let delta = if i == j { 1.0 } else { 0.0 };
            let e = g.get(&[i, j]) - delta;
            sum += e * e;
        }
    }
    sum.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mps {
    tensors: Vec<DenseTensor>,
    center: Option<usize>,
    max_bond: usize,
}

impl Mps {
    /// Validates the chain structure. `center` is trusted as given; use
    /// [`Mps::canonical_residuals`] to verify it.
    pub fn from_tensors(
        tensors: Vec<DenseTensor>,
        center: Option<usize>,
        max_bond: usize,
    ) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::InvalidArgument(
                "an MPS needs at least one site".into(),
            ));
        }
        if max_bond == 0 {
            return Err(Error::InvalidArgument("max_bond must be positive".into()));
        }
        let d = tensors[0].shape().get(1).copied().unwrap_or(0);
        for (n, t) in tensors.iter().enumerate() {
            if t.rank() != 3 {
                return Err(Error::Shape(format!("site {n} has rank {}", t.rank())));
            }
            if t.shape()[1] != d {
                return Err(Error::Shape(format!(
                    "site {n} has local dimension {} but site 0 has {d}",
                    t.shape()[1]
                )));
            }
            let left = t.shape()[0];
            let expected_left = if n == 0 { 1 } else { tensors[n - 1].shape()[2] };
            if left != expected_left {
                return Err(Error::Shape(format!(
                    "site {n} left bond {left} does not match {expected_left}"
                )));
            }
            if t.shape()[0] > max_bond || t.shape()[2] > max_bond {
                return Err(Error::Shape(format!(
                    "site {n} extents {:?} exceed max_bond {max_bond}",
                    t.shape()
                )));
            }
        }
        if tensors.last().unwrap().shape()[2] != 1 {
            return Err(Error::Shape("right boundary bond must be 1".into()));
        }
        if matches!(center, Some(c) if c >= tensors.len()) {
            return Err(Error::InvalidArgument(format!(
                "center {center:?} out of range for {} sites",
                tensors.len()
            )));
        }
        Ok(Self {
            tensors,
            center,
            max_bond,
        })
    }

    /// Bond extents `D_0..=D_N` for a chain of `n_sites` with local
    /// dimension `d`: `min(d^n, d^(N-n), max_bond)`.
    pub fn bond_profile(n_sites: usize, d: usize, max_bond: usize) -> Vec<usize> {
        let cap = |k: usize| -> usize {
            let mut v = 1usize;
            for _ in 0..k {
                v = v.saturating_mul(d);
                if v >= max_bond {
                    return max_bond;
                }
            }
            v
        };
        (0..=n_sites)
            .map(|n| cap(n).min(cap(n_sites - n)).min(max_bond))
            .collect()
    }

    /// Gaussian entries from a seeded generator, canonicalized to site 0 and
    /// normalized.
    pub fn random(n_sites: usize, d: usize, max_bond: usize, seed: u64) -> Result<Self> {
        if n_sites < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 sites, got {n_sites}"
            )));
        }
        if max_bond == 0 || d == 0 {
            return Err(Error::InvalidArgument(
                "max_bond and local dimension must be positive".into(),
            ));
        }
        let bonds = Self::bond_profile(n_sites, d, max_bond);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = (0..n_sites)
            .map(|n| {
                let shape = vec![bonds[n], d, bonds[n + 1]];
                let len = shape.iter().product();
                let data: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
                DenseTensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(tensors, None, max_bond)?.canonicalize(0)
    }

    /// Bond-dimension-1 state `prod_n |v_n>`. Local vectors are used as given.
    pub fn product_state(locals: &[[f64; 2]]) -> Result<Self> {
        let tensors = locals
            .iter()
            .map(|v| DenseTensor::new(vec![1, 2, 1], v.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(tensors, Some(0), 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn local_dim(&self) -> usize {
        self.tensors[0].shape()[1]
    }

    pub fn max_bond(&self) -> usize {
        self.max_bond
    }

    pub fn center(&self) -> Option<usize> {
        self.center
    }

    pub fn tensors(&self) -> &[DenseTensor] {
        &self.tensors
    }

    pub fn tensor(&self, site: usize) -> &DenseTensor {
        &self.tensors[site]
    }

    /// `D_0..=D_N`
    pub fn bond_dims(&self) -> Vec<usize> {
        std::iter::once(1)
            .chain(self.tensors.iter().map(|t| t.shape()[2]))
            .collect()
    }

    /// Replaces one site tensor with another of identical extents. Replacing
    /// any tensor other than the center clears the center marker.
    pub fn replace_tensor(&mut self, site: usize, t: DenseTensor) -> Result<()> {
        if site >= self.len() {
            return Err(Error::InvalidArgument(format!("site {site} out of range")));
        }
        if t.shape() != self.tensors[site].shape() {
            return Err(Error::Shape(format!(
                "replacement for site {site} has extents {:?}, expected {:?}",
                t.shape(),
                self.tensors[site].shape()
            )));
        }
        if self.center != Some(site) {
            self.center = None;
        }
        self.tensors[site] = t;
        Ok(())
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.tensors
    }

    pub(crate) fn set_center(&mut self, center: Option<usize>) {
        self.center = center;
    }

    /// Sweeps QR from both ends towards `center`, then normalizes the center
    /// tensor so that `<psi|psi> = 1`.
    pub fn canonicalize(&self, center: usize) -> Result<Mps> {
        self.check_site(center)?;
        let mut out = self.clone();
        for n in 0..center {
            let (q, next) = shift_right(&out.tensors[n], &out.tensors[n + 1])?;
            out.tensors[n] = q;
            out.tensors[n + 1] = unit_scaled(next)?;
        }
        for n in (center + 1..self.len()).rev() {
            let (prev, iso) = shift_left(&out.tensors[n - 1], &out.tensors[n])?;
            out.tensors[n - 1] = unit_scaled(prev)?;
            out.tensors[n] = iso;
        }
        let norm = out.tensors[center].norm();
        if norm == 0.0 {
            return Err(Error::Degenerate("state has zero norm".into()));
        }
        out.tensors[center].scale_in_place(1.0 / norm);
        out.center = Some(center);
        Ok(out)
    }

    /// Relocates the center with single-site QR steps. The state is unchanged.
    pub fn move_center(&self, to: usize) -> Result<Mps> {
        self.check_site(to)?;
        let from = self
            .center
            .ok_or_else(|| Error::InvalidArgument("move_center needs a canonical MPS".into()))?;
        let mut out = self.clone();
        out.move_center_in_place(from, to)?;
        Ok(out)
    }

    pub(crate) fn move_center_in_place(&mut self, from: usize, to: usize) -> Result<()> {
        for n in from..to {
            let (q, next) = shift_right(&self.tensors[n], &self.tensors[n + 1])?;
            self.tensors[n] = q;
            self.tensors[n + 1] = next;
        }
        for n in (to + 1..=from).rev() {
            let (prev, iso) = shift_left(&self.tensors[n - 1], &self.tensors[n])?;
            self.tensors[n - 1] = prev;
            self.tensors[n] = iso;
        }
        self.center = Some(to);
        Ok(())
    }

    /// Per-site orthogonality residuals relative to the recorded center (the
    /// center itself reports 0). `None` when no center is recorded.
    pub fn canonical_residuals(&self) -> Option<Vec<f64>> {
        let c = self.center?;
        Some(
            self.tensors
                .iter()
                .enumerate()
                .map(|(n, t)| match n.cmp(&c) {
                    std::cmp::Ordering::Less => left_residual(t),
                    std::cmp::Ordering::Equal => 0.0,
                    std::cmp::Ordering::Greater => right_residual(t),
                })
                .collect(),
        )
    }

    pub fn max_canonical_residual(&self) -> Option<f64> {
        self.canonical_residuals()
            .map(|r| r.into_iter().fold(0.0, f64::max))
    }

    fn check_site(&self, site: usize) -> Result<()> {
        if site >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "site {site} out of range for {} sites",
                self.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_sample(&self, x: &EmbeddedSample) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::Shape(format!(
                "sample has {} features but the MPS has {} sites",
                x.len(),
                self.len()
            )));
        }
        if self.local_dim() != LOCAL_DIM {
            return Err(Error::Shape(format!(
                "local dimension {} is incompatible with qubit samples",
                self.local_dim()
            )));
        }
        Ok(())
    }

    /// Left-to-right contraction of `<X|psi>` with per-site rescaling.
    pub fn log_amplitude(&self, x: &EmbeddedSample) -> Result<LogAmplitude> {
        self.check_sample(x)?;
        let v = self.left_vector(x, self.len());
        Ok(scalar_log_amplitude(&v))
    }

    /// Rescaled `sum over sites < upto` of the sample contraction (a vector on
    /// bond `upto`).
    pub(crate) fn left_vector(&self, x: &EmbeddedSample, upto: usize) -> ScaledVec {
        let mut v = ScaledVec::unit();
        for n in 0..upto {
            let w = apply_left(&v.values, &self.tensors[n], x.site(n));
            v = ScaledVec::rescaled(w, v.log_scale);
        }
        v
    }

    /// Rescaled contraction of sites `from..N` (a vector on bond `from`).
    pub(crate) fn right_vector(&self, x: &EmbeddedSample, from: usize) -> ScaledVec {
        let mut v = ScaledVec::unit();
        for n in (from..self.len()).rev() {
            let w = apply_right(&self.tensors[n], x.site(n), &v.values);
            v = ScaledVec::rescaled(w, v.log_scale);
        }
        v
    }

    /// `ln <psi|psi>`. Uses the center tensor when a center is recorded,
    /// otherwise contracts the transfer matrices along the chain.
    pub fn log_norm_sq(&self) -> f64 {
        match self.center {
            Some(c) => {
                let n2 = self.tensors[c].inner(&self.tensors[c]).unwrap();
                n2.ln()
            }
            None => self.log_norm_sq_by_transfer(),
        }
    }

    /// `ln <psi|psi>` from the full transfer-matrix contraction, ignoring the
    /// center marker.
    pub fn log_norm_sq_by_transfer(&self) -> f64 {
        let env = self.left_norm_env(self.len());
        env.values[0].ln() + env.log_scale
    }

    /// Rescaled left norm environment on bond `upto`: a `D x D` matrix in
    /// row-major order.
    pub(crate) fn left_norm_env(&self, upto: usize) -> ScaledVec {
        let mut env = ScaledVec::unit();
        for n in 0..upto {
            let next = transfer_left(&env.values, &self.tensors[n]);
            env = ScaledVec::rescaled(next, env.log_scale);
        }
        env
    }

    /// Rescaled right norm environment on bond `from`.
    pub(crate) fn right_norm_env(&self, from: usize) -> ScaledVec {
        let mut env = ScaledVec::unit();
        for n in (from..self.len()).rev() {
            let next = transfer_right(&self.tensors[n], &env.values);
            env = ScaledVec::rescaled(next, env.log_scale);
        }
        env
    }

    /// Born probability `<X|psi>^2 / <psi|psi>`.
    pub fn probability(&self, x: &EmbeddedSample) -> Result<f64> {
        let amp = self.log_amplitude(x)?;
        if amp.is_zero() {
            return Ok(0.0);
        }
        Ok((2.0 * amp.log_magnitude - self.log_norm_sq()).exp())
    }

    /// Prepares exact site-by-site sampling. Needs a recorded center.
    pub fn sampler(&self) -> Result<Sampler> {
        let c = self
            .center
            .ok_or_else(|| Error::InvalidArgument("sampling needs a canonical MPS".into()))?;
        if self.local_dim() != LOCAL_DIM {
            return Err(Error::Shape("sampling assumes a binary local basis".into()));
        }
        let mps = if c == 0 {
            self.clone()
        } else {
            self.move_center(0)?
        };
        Ok(Sampler { mps })
    }

    pub fn draw_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<u8>> {
        Ok(self.sampler()?.draw(rng))
    }

    /// Probability of every binary configuration. Configuration `k` assigns
    /// site `n` the bit `(k >> (N - 1 - n)) & 1`, so the table is in
    /// lexicographic order with site 0 most significant.
    pub fn brute_force_distribution(&self) -> Result<Vec<f64>> {
        let n = self.len();
        if n > MAX_EXHAUSTIVE_SITES {
            return Err(Error::InvalidArgument(format!(
                "exhaustive table limited to {MAX_EXHAUSTIVE_SITES} sites, got {n}"
            )));
        }
        if self.local_dim() != LOCAL_DIM {
            return Err(Error::Shape(
                "exhaustive table assumes a binary basis".into(),
            ));
        }
        let mut squares = Vec::with_capacity(1 << n);
        self.collect_squares(0, vec![1.0], &mut squares);
        let norm = self.log_norm_sq().exp();
        Ok(squares.into_iter().map(|a| a / norm).collect())
    }

    /// Raw `<X|psi>^2` over every binary configuration, without dividing by
    /// the norm.
    pub fn squared_amplitude_table(&self) -> Result<Vec<f64>> {
        let table = self.brute_force_distribution()?;
        let norm = self.log_norm_sq().exp();
        Ok(table.into_iter().map(|p| p * norm).collect())
    }

    fn collect_squares(&self, site: usize, prefix: Vec<f64>, out: &mut Vec<f64>) {
        if site == self.len() {
            out.push(prefix[0] * prefix[0]);
            return;
        }
        for x in [[1.0, 0.0], [0.0, 1.0]] {
            let w = apply_left(&prefix, &self.tensors[site], x);
            self.collect_squares(site + 1, w, out);
        }
    }
}

// Global scale is irrelevant during canonicalization; dropping it keeps
// long random chains from overflowing.
fn unit_scaled(t: DenseTensor) -> Result<DenseTensor> {
    let norm = t.norm();
    if norm == 0.0 {
        return Err(Error::Degenerate("state has zero norm".into()));
    }
    Ok(t.scaled(1.0 / norm))
}

/// `E'[b,b'] = sum_{a,a',s} E[a,a'] T[a,s,b] T[a',s,b']`
pub(crate) fn transfer_left(env: &[f64], t: &DenseTensor) -> Vec<f64> {
    let (dl, d, dr) = dims(t);
    let data = t.data();
    // tmp[a', s, b] = sum_a E[a,a'] T[a,s,b]
    let mut tmp = vec![0.0; dl * d * dr];
    for a in 0..dl {
        for ap in 0..dl {
            let e = env[a * dl + ap];
            if e == 0.0 {
                continue;
            }
            let src = &data[a * d * dr..(a + 1) * d * dr];
            let dst = &mut tmp[ap * d * dr..(ap + 1) * d * dr];
            for (o, v) in dst.iter_mut().zip(src) {
                *o += e * v;
            }
        }
    }
    let mut out = vec![0.0; dr * dr];
    for ap in 0..dl {
        for s in 0..d {
            let trow = &tmp[(ap * d + s) * dr..(ap * d + s + 1) * dr];
            let arow = &data[(ap * d + s) * dr..(ap * d + s + 1) * dr];
            for (b, &tv) in trow.iter().enumerate() {
                if tv == 0.0 {
                    continue;
                }
                for (o, av) in out[b * dr..(b + 1) * dr].iter_mut().zip(arow) {
                    *o += tv * av;
                }
            }
        }
    }
    out
}

/// `E'[a,a'] = sum_{s,b,b'} T[a,s,b] E[b,b'] T[a',s,b']`
pub(crate) fn transfer_right(t: &DenseTensor, env: &[f64]) -> Vec<f64> {
    let (dl, d, dr) = dims(t);
    let data = t.data();
    // tmp[a', s, b] = sum_b' T[a',s,b'] E[b,b']
    let mut tmp = vec![0.0; dl * d * dr];
    for ap in 0..dl {
        for s in 0..d {
            let trow = &data[(ap * d + s) * dr..(ap * d + s + 1) * dr];
            for b in 0..dr {
                tmp[(ap * d + s) * dr + b] = dot(trow, &env[b * dr..(b + 1) * dr]);
            }
        }
    }
    let mut out = vec![0.0; dl * dl];
    for a in 0..dl {
        for ap in 0..dl {
            out[a * dl + ap] = dot(
                &data[a * d * dr..(a + 1) * d * dr],
                &tmp[ap * d * dr..(ap + 1) * d * dr],
            );
        }
    }
    out
}

fn scalar_log_amplitude(v: &ScaledVec) -> LogAmplitude {
    let value = v.values[0];
    if value == 0.0 {
        LogAmplitude::ZERO
    } else {
        LogAmplitude {
            sign: if value > 0.0 { 1 } else { -1 },
            log_magnitude: value.abs().ln() + v.log_scale,
        }
    }
}

/// Exact autoregressive sampler over a copy of the state canonicalized at
/// site 0, where the marginal of a prefix is the squared norm of its partial
/// contraction.
#[derive(Debug, Clone)]
pub struct Sampler {
    mps: Mps,
}

impl Sampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        let mut prefix = vec![1.0];
        let mut bits = Vec::with_capacity(self.mps.len());
        for t in &self.mps.tensors {
            let w0 = apply_left(&prefix, t, [1.0, 0.0]);
            let w1 = apply_left(&prefix, t, [0.0, 1.0]);
            let p0 = dot(&w0, &w0);
            let p1 = dot(&w1, &w1);
            let total = p0 + p1;
            let pick_one = if total > 0.0 {
                rng.random::<f64>() * total >= p0
            } else {
                false
            };
            let (bit, mut w, p) = if pick_one { (1, w1, p1) } else { (0, w0, p0) };
            let scale = p.sqrt();
            if scale > 0.0 {
                w.iter_mut().for_each(|v| *v /= scale);
            }
            prefix = w;
            bits.push(bit);
        }
        bits
    }
}

const MAGIC: &[u8; 4] = b"MPS1";
const FORMAT_VERSION: u32 = 1;

impl Mps {
    /// Binary container, all integers and doubles little-endian:
    ///
    /// ```text
    /// 0   4  magic "MPS1"
    /// 4   4  u32 version (1)
    /// 8   4  u32 N (site count)
    /// 12  4  u32 d (local dimension)
    /// then for each site n = 0..N:
    ///        3 x u64 extents (D_left, d, D_right)
    ///        D_left * d * D_right x f64, row-major
    /// trailer:
    ///        i64 center (-1 when no center is recorded)
    ///        u64 max_bond
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.local_dim() as u32).to_le_bytes());
        for t in &self.tensors {
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let center = self.center.map_or(-1i64, |c| c as i64);
        out.extend_from_slice(&center.to_le_bytes());
        out.extend_from_slice(&(self.max_bond as u64).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(cur.error(0, format!("bad magic {magic:?}")));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(cur.error(4, format!("unsupported version {version}")));
        }
        let n = cur.u32()? as usize;
        let d = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for site in 0..n {
            let at = cur.pos as u64;
            let shape = vec![
                cur.u64()? as usize,
                cur.u64()? as usize,
                cur.u64()? as usize,
            ];
            if shape[1] != d {
                return Err(cur.error(at, format!("site {site} local dimension {}", shape[1])));
            }
            let len = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
            let len = len.ok_or_else(|| cur.error(at, "extent overflow".into()))?;
            let mut data = Vec::with_capacity(len.min(bytes.len() / 8));
            for _ in 0..len {
                data.push(cur.f64()?);
            }
            let t = DenseTensor::new(shape, data).map_err(|e| cur.error(at, e.to_string()))?;
            tensors.push(t);
        }
        let center = cur.i64()?;
        let max_bond = cur.u64()? as usize;
        if cur.pos != bytes.len() {
            return Err(cur.error(cur.pos as u64, "trailing bytes".into()));
        }
        let center = if center < 0 {
            None
        } else {
            Some(center as usize)
        };
        Self::from_tensors(tensors, center, max_bond)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn error(&self, offset: u64, reason: String) -> Error {
        Error::Format {
            what: "binary container",
            offset,
            reason,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos as u64, format!("truncated, wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_map::embed_sample;

    fn bits_of(k: usize, n: usize) -> Vec<u8> {
        (0..n).map(|i| ((k >> (n - 1 - i)) & 1) as u8).collect()
    }

    /// Dense coefficient table by contracting the whole chain with the
    /// generic tensor contraction; independent of the site-vector path.
    fn dense_coefficients(mps: &Mps) -> Vec<f64> {
        let mut acc = mps.tensor(0).clone();
        for t in &mps.tensors()[1..] {
            let last = acc.rank() - 1;
            acc = contract(&acc, t, &[last], &[0]).unwrap();
        }
        acc.into_data()
    }

    fn unsealed(mps: &Mps, seed: u64) -> Mps {
        // random gauge noise: scale each tensor so the chain is not canonical
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = mps
            .tensors()
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v *= 1.0 + 0.5 * rng.random::<f64>());
                t
            })
            .collect();
        Mps::from_tensors(tensors, None, mps.max_bond()).unwrap()
    }

    #[test]
    fn product_init_with_unit_bond() {
        let m = Mps::random(4, 2, 1, 7).unwrap();
        assert_eq!(m.bond_dims(), vec![1; 5]);
        assert!((m.log_norm_sq_by_transfer()).abs() < 1e-12);
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(
            Mps::random(6, 2, 4, 7).unwrap(),
            Mps::random(6, 2, 4, 7).unwrap()
        );
        assert_ne!(
            Mps::random(6, 2, 4, 7).unwrap(),
            Mps::random(6, 2, 4, 8).unwrap()
        );
    }

    #[test]
    fn bond_growth_rule() {
        let m = Mps::random(8, 2, 30, 1).unwrap();
        let expected: Vec<usize> = (0..=8u32)
            .map(|n| 2usize.pow(n).min(2usize.pow(8 - n)).min(30))
            .collect();
        assert_eq!(m.bond_dims(), expected);
        assert_eq!(expected, vec![1, 2, 4, 8, 16, 8, 4, 2, 1]);
        assert_eq!(Mps::bond_profile(12, 2, 30)[6], 30);
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(Mps::random(1, 2, 4, 0).is_err());
        assert!(Mps::random(4, 2, 0, 0).is_err());
    }

    #[test]
    fn from_tensors_validates_bonds() {
        let a = DenseTensor::zeros(vec![1, 2, 2]);
        let b = DenseTensor::zeros(vec![3, 2, 1]);
        assert!(Mps::from_tensors(vec![a.clone(), b], None, 4).is_err());
        let c = DenseTensor::zeros(vec![2, 2, 1]);
        assert!(Mps::from_tensors(vec![a.clone(), c.clone()], None, 1).is_err());
        assert!(Mps::from_tensors(vec![a, c], Some(2), 4).is_err());
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let m = Mps::random(6, 2, 4, 3).unwrap();
        let again = m.canonicalize(0).unwrap();
        for (a, b) in m.tensors().iter().zip(again.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x.abs() - y.abs()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn canonicalize_preserves_state_up_to_scale() {
        let raw = unsealed(&Mps::random(6, 2, 8, 5).unwrap(), 6);
        let before = dense_coefficients(&raw);
        for center in [0, 2, 5] {
            let c = raw.canonicalize(center).unwrap();
            assert!(c.max_canonical_residual().unwrap() < 1e-10);
            let center_sq = c.tensor(center).inner(c.tensor(center)).unwrap();
            assert!((center_sq - 1.0).abs() < 1e-12);
            let after = dense_coefficients(&c);
            let ratios: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a / b).collect();
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            for r in &ratios {
                assert!(((r - mean) / mean).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn move_center_roundtrip_keeps_amplitudes() {
        let m = Mps::random(6, 2, 8, 9).unwrap();
        let original = dense_coefficients(&m);
        let same = m.move_center(0).unwrap();
        assert_eq!(same, m);
        let right = m.move_center(5).unwrap();
        let back = right.move_center(0).unwrap();
        for stage in [&right, &back] {
            assert!(stage.max_canonical_residual().unwrap() < 1e-10);
            let c = stage.center().unwrap();
            assert!((stage.tensor(c).norm() - 1.0).abs() < 1e-10);
            for (a, b) in dense_coefficients(stage).iter().zip(&original) {
                assert!(((a - b) / b).abs() < 1e-10);
            }
        }
        assert!(m.move_center(6).is_err());
        let no_center = Mps::from_tensors(m.tensors().to_vec(), None, 8).unwrap();
        assert!(no_center.move_center(1).is_err());
    }

    #[test]
    fn amplitude_of_basis_product_state() {
        let m = Mps::product_state(&[[1.0, 0.0]; 5]).unwrap();
        let zeros = EmbeddedSample::from_bits(&[0; 5]);
        let a = m.log_amplitude(&zeros).unwrap();
        assert_eq!(a.sign, 1);
        assert_eq!(a.log_magnitude, 0.0);
        let one = EmbeddedSample::from_bits(&[0, 0, 1, 0, 0]);
        assert_eq!(m.log_amplitude(&one).unwrap(), LogAmplitude::ZERO);
        assert_eq!(m.probability(&one).unwrap(), 0.0);
    }

    #[test]
    fn amplitude_matches_dense_table() {
        let m = unsealed(&Mps::random(6, 2, 8, 11).unwrap(), 12);
        let table = dense_coefficients(&m);
        for (k, &coef) in table.iter().enumerate() {
            let x = EmbeddedSample::from_bits(&bits_of(k, 6));
            let a = m.log_amplitude(&x).unwrap();
            assert_eq!(a.sign as f64, coef.signum());
            assert!(((a.value() - coef) / coef).abs() < 1e-10);
        }
    }

    #[test]
    fn amplitude_rejects_wrong_length() {
        let m = Mps::random(4, 2, 2, 0).unwrap();
        assert!(m
            .log_amplitude(&EmbeddedSample::from_bits(&[0; 3]))
            .is_err());
    }

    #[test]
    fn long_chain_amplitude_stays_finite() {
        let m = Mps::random(784, 2, 4, 2).unwrap();
        let x = embed_sample(&vec![0.3; 784]).unwrap();
        let a = m.log_amplitude(&x).unwrap();
        assert!(a.log_magnitude.is_finite() && a.log_magnitude < -100.0);
        assert!(m.log_norm_sq_by_transfer().abs() < 1e-8);
    }

    #[test]
    fn probability_of_exact_state_is_one() {
        let x = embed_sample(&[0.2, 0.9, 0.4, 0.0]).unwrap();
        let m = Mps::product_state(x.vectors()).unwrap();
        assert!((m.probability(&x).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn probability_invariant_under_center_scaling() {
        let m = Mps::random(6, 2, 4, 13).unwrap();
        let x = EmbeddedSample::from_bits(&[1, 0, 1, 1, 0, 0]);
        let p = m.probability(&x).unwrap();
        for alpha in [1e-3, 0.5, 2.0, -3.0, 1e3, -1.0] {
            let mut scaled = m.clone();
            scaled.replace_tensor(0, m.tensor(0).scaled(alpha)).unwrap();
            assert_eq!(scaled.center(), Some(0));
            let q = scaled.probability(&x).unwrap();
            assert!(((q - p) / p).abs() < 1e-10, "alpha {alpha}");
        }
    }

    #[test]
    fn probability_matches_dense_oracle() {
        let m = Mps::random(10, 2, 6, 14).unwrap().move_center(4).unwrap();
        let table = dense_coefficients(&m);
        let norm: f64 = table.iter().map(|c| c * c).sum();
        for k in (0..1024).step_by(37) {
            let x = EmbeddedSample::from_bits(&bits_of(k, 10));
            let expected = table[k] * table[k] / norm;
            assert!((m.probability(&x).unwrap() - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn exhaustive_table_properties() {
        let m = Mps::random(8, 2, 6, 15).unwrap();
        let p = m.brute_force_distribution().unwrap();
        assert_eq!(p.len(), 256);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-8);

        let point = Mps::product_state(&[[1.0, 0.0]; 4]).unwrap();
        let p = point.brute_force_distribution().unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1..].iter().all(|&v| v == 0.0));

        let big = Mps::random(15, 2, 2, 0).unwrap();
        assert!(big.brute_force_distribution().is_err());
    }

    #[test]
    fn exhaustive_table_order_matches_probability() {
        let m = Mps::random(5, 2, 4, 16).unwrap();
        let table = m.brute_force_distribution().unwrap();
        for (k, &p) in table.iter().enumerate() {
            let x = EmbeddedSample::from_bits(&bits_of(k, 5));
            assert!((m.probability(&x).unwrap() - p).abs() < 1e-14);
        }
    }

    #[test]
    fn sampling_a_basis_state_is_deterministic() {
        let bits = [1u8, 0, 0, 1, 1, 0];
        let m = Mps::product_state(EmbeddedSample::from_bits(&bits).vectors()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(m.draw_sample(&mut rng).unwrap(), bits);
        }
    }

    #[test]
    fn uniform_marginals() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let m = Mps::product_state(&[[h, h]; 5]).unwrap();
        let sampler = m.sampler().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 10_000;
        let mut ones = [0usize; 5];
        for _ in 0..draws {
            for (c, b) in ones.iter_mut().zip(sampler.draw(&mut rng)) {
                *c += b as usize;
            }
        }
        let sigma = (draws as f64 * 0.25).sqrt();
        for c in ones {
            assert!((c as f64 - draws as f64 / 2.0).abs() < 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn sampling_matches_exhaustive_distribution() {
        let m = Mps::random(6, 2, 4, 17).unwrap().move_center(3).unwrap();
        let p = m.brute_force_distribution().unwrap();
        let sampler = m.sampler().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let mut counts = vec![0usize; 64];
        for _ in 0..draws {
            let bits = sampler.draw(&mut rng);
            let k = bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
            counts[k] += 1;
        }
        // Pearson chi-square over cells with expected count >= 5
        let mut chi2 = 0.0;
        let mut cells = 0;
        for (c, &pk) in counts.iter().zip(&p) {
            let e = pk * draws as f64;
            if e >= 5.0 {
                chi2 += (*c as f64 - e).powi(2) / e;
                cells += 1;
            }
        }
        // 99.9% quantile of chi-square with <= 63 dof is about 103.4
        assert!(cells > 10);
        assert!(chi2 < 103.4, "chi2 {chi2} over {cells} cells");
    }

    #[test]
    fn container_roundtrip_and_layout() {
        let m = Mps::random(5, 2, 3, 18).unwrap().move_center(2).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[0..4], b"MPS1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1);
        let back = Mps::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Mps::from_bytes(&bad).is_err());
        assert!(matches!(
            Mps::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }
}
