//! Negative log-likelihood and its analytic gradients.
//!
//! With `f = ln<psi|psi> - (2/A) sum_X ln|<X|psi>|`, the derivative with respect
//! to one site tensor is
//!
//! ```text
//! df/dT = (d<psi|psi>/dT) / <psi|psi>  -  (2/A) sum_X E_X / <X|psi>
//! ```
//!
//! where `E_X` (the environment) is the contraction of every other tensor
//! with the sample's product state. At a normalized orthogonality center the
//! norm term collapses to `2T`.
//!
//! Per-sample work is spread over the rayon pool in fixed-size chunks, and
//! chunk results are combined by a pairwise tree whose shape depends only on
//! the number of samples, so results do not depend on the thread count.

use std::borrow::Borrow;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_map::EmbeddedSample;
use crate::linalg::{dot, DenseTensor};
use crate::mps::{apply_left, apply_right, dims, LogAmplitude, Mps, ScaledVec};

/// Samples handled sequentially inside one reduction leaf.
pub(crate) const CHUNK: usize = 32;

/// Log-magnitudes more than this many nats below the batch median are
/// floored when assembling gradients.
pub const CLAMP_DEPTH: f64 = 30.0 * std::f64::consts::LN_10;

/// An environment tensor stored as `tensor * exp(log_scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub tensor: DenseTensor,
    pub log_scale: f64,
}

impl Environment {
    /// `<E, T>`, which equals `<X|psi>` when `T` is the tensor at this site.
    pub fn contract_with(&self, t: &DenseTensor) -> Result<LogAmplitude> {
        let v = self.tensor.inner(t)?;
        let mut a = LogAmplitude::from_value(v);
        a.log_magnitude += self.log_scale;
        Ok(a)
    }

    /// Plain tensor; may underflow on long chains.
    pub fn to_tensor(&self) -> DenseTensor {
        self.tensor.scaled(self.log_scale.exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientTensor {
    pub values: DenseTensor,
    pub site: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradientDiagnostics {
    /// Samples whose amplitude was floored (including exact zeros).
    pub clamped: usize,
    /// `|<g, T/|T|>|` removed by the tangent re-projection.
    pub removed_component: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub gradient: GradientTensor,
    pub diagnostics: GradientDiagnostics,
}

fn check_dataset(mps: &Mps, data: &[EmbeddedSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    data.iter().try_for_each(|x| mps.check_sample(x))
}

pub(crate) fn log_amplitudes(mps: &Mps, data: &[EmbeddedSample]) -> Result<Vec<LogAmplitude>> {
    check_dataset(mps, data)?;
    data.par_iter().map(|x| mps.log_amplitude(x)).collect()
}

/// Mean negative log-likelihood in nats.
pub fn nll(mps: &Mps, data: &[EmbeddedSample]) -> Result<f64> {
    let amps = log_amplitudes(mps, data)?;
    nll_from_amplitudes(&amps, mps.log_norm_sq())
}

pub(crate) fn nll_from_amplitudes(amps: &[LogAmplitude], log_norm_sq: f64) -> Result<f64> {
    let mut sum = 0.0;
    for (index, a) in amps.iter().enumerate() {
        if a.is_zero() {
            return Err(Error::ZeroAmplitude { index });
        }
        sum += a.log_magnitude;
    }
    Ok(log_norm_sq - 2.0 * sum / amps.len() as f64)
}

/// Per-sample amplitudes with the relative floor applied: `(sign, ln|amp|)`
/// pairs plus the number of floored samples.
pub(crate) fn clamp_amplitudes(amps: &[LogAmplitude]) -> (Vec<(f64, f64)>, usize) {
    let mut finite: Vec<f64> = amps
        .iter()
        .filter(|a| !a.is_zero())
        .map(|a| a.log_magnitude)
        .collect();
    let floor = if finite.is_empty() {
        0.0
    } else {
        let mid = finite.len() / 2;
        finite.select_nth_unstable_by(mid, f64::total_cmp);
        finite[mid] - CLAMP_DEPTH
    };
    let mut clamped = 0;
    let out = amps
        .iter()
        .map(|a| {
            if a.is_zero() || a.log_magnitude < floor {
                clamped += 1;
                let sign = if a.sign < 0 { -1.0 } else { 1.0 };
                (sign, floor)
            } else {
                (f64::from(a.sign), a.log_magnitude)
            }
        })
        .collect();
    (out, clamped)
}

/// Contraction of every tensor except `site` with the sample.
pub fn environment(mps: &Mps, x: &EmbeddedSample, site: usize) -> Result<Environment> {
    mps.check_sample(x)?;
    if site >= mps.len() {
        return Err(Error::InvalidArgument(format!("site {site} out of range")));
    }
    let left = mps.left_vector(x, site);
    let right = mps.right_vector(x, site + 1);
    Ok(outer_environment(&left, x.site(site), &right))
}

pub(crate) fn outer_environment(left: &ScaledVec, x: [f64; 2], right: &ScaledVec) -> Environment {
    let (dl, dr) = (left.values.len(), right.values.len());
    let mut data = Vec::with_capacity(dl * 2 * dr);
    for &l in &left.values {
        for &xs in &x {
            let c = l * xs;
            data.extend(right.values.iter().map(|&r| c * r));
        }
    }
    Environment {
        tensor: DenseTensor::new(vec![dl, 2, dr], data).expect("finite environment"),
        log_scale: left.log_scale + right.log_scale,
    }
}

/// Adds `coef * exp(log_scale) * (left ⊗ x ⊗ right)` into `acc`.
pub(crate) fn accumulate_outer(
    acc: &mut [f64],
    coef: f64,
    left: &[f64],
    x: [f64; 2],
    right: &[f64],
) {
    let dr = right.len();
    for (a, &l) in left.iter().enumerate() {
        for (s, &xs) in x.iter().enumerate() {
            let c = coef * l * xs;
            if c == 0.0 {
                continue;
            }
            let row = &mut acc[(a * 2 + s) * dr..(a * 2 + s + 1) * dr];
            for (o, &r) in row.iter_mut().zip(right) {
                *o += c * r;
            }
        }
    }
}

/// Pairwise summation whose tree depends only on `parts.len()`.
pub(crate) fn tree_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    assert!(!parts.is_empty());
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

/// `sum_X E_X / <X|psi>` at `site`, with environments supplied by `env_of`.
pub(crate) fn sample_term<F, L, R>(
    len: usize,
    shape: &[usize],
    amps: &[(f64, f64)],
    env_of: F,
) -> Vec<f64>
where
    F: Fn(usize) -> (L, [f64; 2], R) + Sync,
    L: Borrow<ScaledVec>,
    R: Borrow<ScaledVec>,
{
    let size: usize = shape.iter().product();
    let chunks: Vec<Vec<f64>> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; size];
            let end = ((c + 1) * CHUNK).min(len);
            for (i, &(sign, log_mag)) in amps.iter().enumerate().take(end).skip(c * CHUNK) {
                let (left, x, right) = env_of(i);
                let (left, right) = (left.borrow(), right.borrow());
                let coef = sign * (left.log_scale + right.log_scale - log_mag).exp();
                accumulate_outer(&mut acc, coef, &left.values, x, &right.values);
            }
            acc
        })
        .collect();
    tree_sum(chunks)
}

/// Gradient of the NLL with respect to the center tensor, re-projected onto
/// the tangent space of the center tensor.
pub fn center_gradient(mps: &Mps, data: &[EmbeddedSample]) -> Result<GradientReport> {
    let c = mps
        .center()
        .ok_or_else(|| Error::InvalidArgument("center_gradient needs a canonical MPS".into()))?;
    let amps = log_amplitudes(mps, data)?;
    let (amps, clamped) = clamp_amplitudes(&amps);
    let t = mps.tensor(c);
    let term = sample_term(data.len(), t.shape(), &amps, |i| {
        let x = &data[i];
        (mps.left_vector(x, c), x.site(c), mps.right_vector(x, c + 1))
    });
    let (values, removed) = assemble_center_gradient(t, &term, data.len());
    Ok(GradientReport {
        gradient: GradientTensor { values, site: c },
        diagnostics: GradientDiagnostics {
            clamped,
            removed_component: removed,
        },
    })
}

/// `2T/<T,T> - (2/A) term`, then `g <- g - <g, T^> T^` with `T^ = T/|T|`.
pub(crate) fn assemble_center_gradient(
    t: &DenseTensor,
    term: &[f64],
    count: usize,
) -> (DenseTensor, f64) {
    let norm_sq = t.inner(t).unwrap();
    let a = count as f64;
    let mut g: Vec<f64> = t
        .data()
        .iter()
        .zip(term)
        .map(|(tv, sv)| 2.0 * tv / norm_sq - 2.0 * sv / a)
        .collect();
    let overlap = dot(&g, t.data()) / norm_sq.sqrt();
    let inv = 1.0 / norm_sq.sqrt();
    g.iter_mut()
        .zip(t.data())
        .for_each(|(gv, tv)| *gv -= overlap * tv * inv);
    (
        DenseTensor::new(t.shape().to_vec(), g).expect("finite gradient"),
        overlap.abs(),
    )
}

/// `(d<psi|psi>/dT) / <psi|psi>` at one site from rescaled norm environments.
pub(crate) fn norm_term(left_env: &[f64], t: &DenseTensor, right_env: &[f64]) -> Vec<f64> {
    let (dl, d, dr) = dims(t);
    let data = t.data();
    // m[a,s,b] = sum_{a',b'} EL[a,a'] T[a',s,b'] ER[b,b']
    let mut tr = vec![0.0; dl * d * dr];
    for ap in 0..dl {
        for s in 0..d {
            let row = &data[(ap * d + s) * dr..(ap * d + s + 1) * dr];
            for b in 0..dr {
                tr[(ap * d + s) * dr + b] = dot(row, &right_env[b * dr..(b + 1) * dr]);
            }
        }
    }
    let mut m = vec![0.0; dl * d * dr];
    for a in 0..dl {
        for ap in 0..dl {
            let e = left_env[a * dl + ap];
            if e == 0.0 {
                continue;
            }
            let src = &tr[ap * d * dr..(ap + 1) * d * dr];
            for (o, v) in m[a * d * dr..(a + 1) * d * dr].iter_mut().zip(src) {
                *o += e * v;
            }
        }
    }
    let norm = dot(data, &m);
    m.iter_mut().for_each(|v| *v *= 2.0 / norm);
    m
}

/// NLL gradient at any site of any well-formed MPS, canonical or not.
pub fn full_gradient(mps: &Mps, data: &[EmbeddedSample], site: usize) -> Result<GradientReport> {
    if site >= mps.len() {
        return Err(Error::InvalidArgument(format!("site {site} out of range")));
    }
    let amps = log_amplitudes(mps, data)?;
    let (amps, clamped) = clamp_amplitudes(&amps);
    let t = mps.tensor(site);
    let term = sample_term(data.len(), t.shape(), &amps, |i| {
        let x = &data[i];
        (
            mps.left_vector(x, site),
            x.site(site),
            mps.right_vector(x, site + 1),
        )
    });
    let left_env = mps.left_norm_env(site);
    let right_env = mps.right_norm_env(site + 1);
    let nt = norm_term(&left_env.values, t, &right_env.values);
    let a = data.len() as f64;
    let g = nt.iter().zip(&term).map(|(n, s)| n - 2.0 * s / a).collect();
    Ok(GradientReport {
        gradient: GradientTensor {
            values: DenseTensor::new(t.shape().to_vec(), g)?,
            site,
        },
        diagnostics: GradientDiagnostics {
            clamped,
            removed_component: 0.0,
        },
    })
}

/// `full_gradient` at every site in one pass over the data, plus the loss
/// at the current parameters.
pub fn all_site_gradients(
    mps: &Mps,
    data: &[EmbeddedSample],
) -> Result<(Vec<GradientTensor>, GradientDiagnostics)> {
    let amps = log_amplitudes(mps, data)?;
    let (amps, clamped) = clamp_amplitudes(&amps);
    let n = mps.len();
    let sizes: Vec<usize> = mps.tensors().iter().map(|t| t.len()).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let total: usize = sizes.iter().sum();

    let len = data.len();
    let chunks: Vec<Vec<f64>> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; total];
            for i in c * CHUNK..((c + 1) * CHUNK).min(len) {
                let x = &data[i];
                let (sign, log_mag) = amps[i];
                // rights[k] is the contraction of sites k..N
                let mut rights = Vec::with_capacity(n + 1);
                rights.push(ScaledVec::unit());
                for k in (0..n).rev() {
                    let prev = rights.last().unwrap();
                    let w = apply_right(mps.tensor(k), x.site(k), &prev.values);
                    let next = ScaledVec::rescaled(w, prev.log_scale);
                    rights.push(next);
                }
                rights.reverse();
                let mut left = ScaledVec::unit();
                for k in 0..n {
                    let right = &rights[k + 1];
                    let coef = sign * (left.log_scale + right.log_scale - log_mag).exp();
                    accumulate_outer(
                        &mut acc[offsets[k]..offsets[k] + sizes[k]],
                        coef,
                        &left.values,
                        x.site(k),
                        &right.values,
                    );
                    let w = apply_left(&left.values, mps.tensor(k), x.site(k));
                    left = ScaledVec::rescaled(w, left.log_scale);
                }
            }
            acc
        })
        .collect();
    let term = tree_sum(chunks);

    let mut right_envs = Vec::with_capacity(n + 1);
    right_envs.push(ScaledVec::unit());
    for k in (0..n).rev() {
        let prev = right_envs.last().unwrap();
        let e = crate::mps::transfer_right(mps.tensor(k), &prev.values);
        let next = ScaledVec::rescaled(e, prev.log_scale);
        right_envs.push(next);
    }
    right_envs.reverse();

    let a = len as f64;
    let mut grads = Vec::with_capacity(n);
    let mut left_env = ScaledVec::unit();
    for k in 0..n {
        let t = mps.tensor(k);
        let nt = norm_term(&left_env.values, t, &right_envs[k + 1].values);
        let g = nt
            .iter()
            .zip(&term[offsets[k]..offsets[k] + sizes[k]])
            .map(|(nv, s)| nv - 2.0 * s / a)
            .collect();
        grads.push(GradientTensor {
            values: DenseTensor::new(t.shape().to_vec(), g)?,
            site: k,
        });
        let e = crate::mps::transfer_left(&left_env.values, t);
        left_env = ScaledVec::rescaled(e, left_env.log_scale);
    }
    Ok((
        grads,
        GradientDiagnostics {
            clamped,
            removed_component: 0.0,
        },
    ))
}
