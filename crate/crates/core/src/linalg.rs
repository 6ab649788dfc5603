//! Dense real tensors and the handful of factorizations the MPS code needs.
//!
//! Storage is row-major: the last axis varies fastest. QR and SVD are backed
//! by `nalgebra` and post-processed into a deterministic sign convention (the
//! largest-magnitude entry of every `Q`/`U` column is positive).

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} scalars, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseTensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut index = vec![0; t.shape.len()];
        for slot in t.data.iter_mut() {
            *slot = f(&index);
            for axis in (0..index.len()).rev() {
                index[axis] += 1;
                if index[axis] < t.shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        t
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw scalars. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let offset: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[offset]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!(
                "{perm:?} is not a permutation of {rank} axes"
            )));
        }
        let strides = self.strides();
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[offset]);
            for axis in (0..rank).rev() {
                index[axis] += 1;
                offset += src_strides[axis];
                if index[axis] < new_shape[axis] {
                    break;
                }
                offset -= src_strides[axis] * new_shape[axis];
                index[axis] = 0;
            }
        }
        Ok(Self {
            shape: new_shape,
            data,
        })
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_scaled: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Full inner product, summing over every index.
    pub fn inner(&self, other: &DenseTensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "inner: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn matrix_dims(&self, split_point: usize) -> Result<(usize, usize)> {
        if split_point == 0 || split_point >= self.rank() {
            return Err(Error::Shape(format!(
                "split point {split_point} must lie strictly inside rank {}",
                self.rank()
            )));
        }
        let rows = self.shape[..split_point].iter().product();
        let cols = self.shape[split_point..].iter().product();
        Ok((rows, cols))
    }

    fn to_matrix(&self, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, &self.data)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matrix_to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Row-major `(m x k) * (k x n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Sum over the paired axes. Result axes are the free axes of `a` in order,
/// followed by the free axes of `b`.
pub fn contract(
    a: &DenseTensor,
    b: &DenseTensor,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<DenseTensor> {
    if axes_a.len() != axes_b.len() {
        return Err(Error::Shape(format!(
            "contract: {} axes of a paired with {} axes of b",
            axes_a.len(),
            axes_b.len()
        )));
    }
    for (&i, &j) in axes_a.iter().zip(axes_b) {
        if i >= a.rank() || j >= b.rank() {
            return Err(Error::Shape(format!(
                "contract: axis pair ({i}, {j}) out of range for ranks ({}, {})",
                a.rank(),
                b.rank()
            )));
        }
        if a.shape[i] != b.shape[j] {
            return Err(Error::Shape(format!(
                "contract: axis {i} of a has extent {} but axis {j} of b has extent {}",
                a.shape[i], b.shape[j]
            )));
        }
    }
    let free_a: Vec<usize> = (0..a.rank()).filter(|x| !axes_a.contains(x)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|x| !axes_b.contains(x)).collect();

    let perm_a: Vec<usize> = free_a.iter().chain(axes_a).copied().collect();
    let perm_b: Vec<usize> = axes_b.iter().chain(&free_b).copied().collect();
    let pa = a.permute(&perm_a)?;
    let pb = b.permute(&perm_b)?;

    let m: usize = free_a.iter().map(|&x| a.shape[x]).product();
    let k: usize = axes_a.iter().map(|&x| a.shape[x]).product();
    let n: usize = free_b.iter().map(|&x| b.shape[x]).product();
    let data = matmul(&pa.data, &pb.data, m, k, n);

    let mut shape: Vec<usize> = free_a.iter().map(|&x| a.shape[x]).collect();
    shape.extend(free_b.iter().map(|&x| b.shape[x]));
    if shape.is_empty() {
        shape.push(1);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("contract"));
    }
    Ok(DenseTensor { shape, data })
}

/// Economy QR of `t` viewed as a matrix whose rows are the first
/// `split_point` axes. `Q` keeps those axes plus a new trailing bond, `R`
/// gets the new bond as its leading axis.
pub fn qr_split(t: &DenseTensor, split_point: usize) -> Result<(DenseTensor, DenseTensor)> {
    let (rows, cols) = t.matrix_dims(split_point)?;
    if t.max_abs() == 0.0 {
        return Err(Error::Degenerate("QR of an all-zero tensor".into()));
    }
    let k = rows.min(cols);
    let qr = t.to_matrix(rows, cols).qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..k {
        if largest_entry_is_negative(q.column(j).iter()) {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    let mut q_shape = t.shape[..split_point].to_vec();
    q_shape.push(k);
    let mut r_shape = vec![k];
    r_shape.extend_from_slice(&t.shape[split_point..]);
    Ok((
        DenseTensor::new(q_shape, matrix_to_row_major(&q))?,
        DenseTensor::new(r_shape, matrix_to_row_major(&r))?,
    ))
}

fn largest_entry_is_negative<'a>(column: impl Iterator<Item = &'a f64>) -> bool {
    let mut best = 0.0f64;
    for &v in column {
        if v.abs() > best.abs() {
            best = v;
        }
    }
    best < 0.0
}

#[derive(Debug, Clone)]
pub struct SvdSplit {
    /// Left factor: the row axes of the split plus a trailing bond of size `r`.
    pub u: DenseTensor,
    /// Singular values, non-negative and descending.
    pub s: Vec<f64>,
    /// Right factor with orthonormal rows: a leading bond of size `r`, then
    /// the column axes of the split.
    pub vt: DenseTensor,
}

impl SvdSplit {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U * diag(S) * Vt` with the split axes restored.
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let mut us = self.u.clone();
        let r = self.rank();
        for (i, v) in us.data.iter_mut().enumerate() {
            *v *= self.s[i % r];
        }
        let last = us.rank() - 1;
        contract(&us, &self.vt, &[last], &[0])
    }
}

pub fn svd_split(t: &DenseTensor, split_point: usize, max_rank: usize) -> Result<SvdSplit> {
    if max_rank == 0 {
        return Err(Error::InvalidArgument("max_rank must be at least 1".into()));
    }
    let (rows, cols) = t.matrix_dims(split_point)?;
    let svd = t.to_matrix(rows, cols).svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    order.truncate(max_rank);
    let r = order.len();

    let mut u_data = vec![0.0; rows * r];
    let mut vt_data = vec![0.0; r * cols];
    let mut s = Vec::with_capacity(r);
    for (new_j, &j) in order.iter().enumerate() {
        let flip = if largest_entry_is_negative(u.column(j).iter()) {
            -1.0
        } else {
            1.0
        };
        for i in 0..rows {
            u_data[i * r + new_j] = flip * u[(i, j)];
        }
        for c in 0..cols {
            vt_data[new_j * cols + c] = flip * vt[(j, c)];
        }
        s.push(svd.singular_values[j].max(0.0));
    }
    let mut u_shape = t.shape[..split_point].to_vec();
    u_shape.push(r);
    let mut vt_shape = vec![r];
    vt_shape.extend_from_slice(&t.shape[split_point..]);
    Ok(SvdSplit {
        u: DenseTensor::new(u_shape, u_data)?,
        s,
        vt: DenseTensor::new(vt_shape, vt_data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn gram_defect(q: &DenseTensor) -> f64 {
        // Q^T Q - I over the trailing axis
        let lead: Vec<usize> = (0..q.rank() - 1).collect();
        let g = contract(q, q, &lead, &lead).unwrap();
        let k = g.shape()[0];
        let mut defect: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((g.get(&[i, j]) - target).abs());
            }
        }
        defect
    }

    fn rel_diff(a: &DenseTensor, b: &DenseTensor) -> f64 {
        let mut d = a.clone();
        d.add_scaled(-1.0, b).unwrap();
        d.norm() / b.norm()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseTensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(DenseTensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn contract_identity_with_vector() {
        let v = DenseTensor::new(vec![2], vec![3.0, -4.0]).unwrap();
        let out = contract(&DenseTensor::identity(2), &v, &[1], &[0]).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn contract_vectors_is_dot() {
        let u = DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let v = DenseTensor::new(vec![3], vec![4.0, -5.0, 6.0]).unwrap();
        let out = contract(&u, &v, &[0], &[0]).unwrap();
        assert_eq!(out.data(), &[12.0]);
    }

    #[test]
    fn contract_matches_loop_oracle() {
        let a = random(vec![4, 3, 2], 1);
        let b = random(vec![2, 5], 2);
        let out = contract(&a, &b, &[2], &[0]).unwrap();
        assert_eq!(out.shape(), &[4, 3, 5]);
        for i in 0..4 {
            for j in 0..3 {
                for l in 0..5 {
                    let mut expected = 0.0;
                    for k in 0..2 {
                        expected += a.get(&[i, j, k]) * b.get(&[k, l]);
                    }
                    assert!((out.get(&[i, j, l]) - expected).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn contract_middle_axes_matches_loop_oracle() {
        let a = random(vec![3, 4, 2], 3);
        let b = random(vec![5, 4, 3], 4);
        let out = contract(&a, &b, &[1, 0], &[1, 2]).unwrap();
        assert_eq!(out.shape(), &[2, 5]);
        for k in 0..2 {
            for l in 0..5 {
                let mut expected = 0.0;
                for i in 0..3 {
                    for j in 0..4 {
                        expected += a.get(&[i, j, k]) * b.get(&[l, j, i]);
                    }
                }
                assert!((out.get(&[k, l]) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn contract_rejects_extent_mismatch() {
        let a = random(vec![2, 3], 5);
        let b = random(vec![2, 3], 6);
        let err = contract(&a, &b, &[1], &[0]).unwrap_err();
        assert!(err.to_string().contains("extent"), "{err}");
    }

    #[test]
    fn permute_roundtrip() {
        let a = random(vec![2, 3, 4], 7);
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), a.get(&[1, 2, 3]));
        assert_eq!(p.permute(&[1, 2, 0]).unwrap(), a);
        assert!(a.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn qr_of_orthogonal_matrix_is_trivial() {
        let c = 0.6f64;
        let s = 0.8f64;
        let m = DenseTensor::new(vec![2, 2], vec![c, -s, s, c]).unwrap();
        let (q, r) = qr_split(&m, 1).unwrap();
        for j in 0..2 {
            let sign = (q.get(&[0, j]) / m.get(&[0, j])).signum();
            for i in 0..2 {
                assert!((q.get(&[i, j]) - sign * m.get(&[i, j])).abs() < 1e-14);
            }
            assert!((r.get(&[j, j]).abs() - 1.0).abs() < 1e-14);
        }
        assert!(r.get(&[0, 1]).abs() < 1e-14);
    }

    #[test]
    fn qr_columns_orthonormal() {
        let t = random(vec![6, 4], 8);
        let (q, r) = qr_split(&t, 1).unwrap();
        assert_eq!(q.shape(), &[6, 4]);
        assert_eq!(r.shape(), &[4, 4]);
        assert!(gram_defect(&q) < 1e-12);
    }

    #[test]
    fn qr_reconstructs_rank3() {
        let t = random(vec![2, 3, 4], 9);
        let (q, r) = qr_split(&t, 2).unwrap();
        assert_eq!(q.shape(), &[2, 3, 4]);
        assert_eq!(r.shape(), &[4, 4]);
        let back = contract(&q, &r, &[2], &[0]).unwrap();
        assert!(rel_diff(&back, &t) < 1e-12);
    }

    #[test]
    fn qr_sign_convention() {
        let t = random(vec![5, 3], 10);
        let (q, _) = qr_split(&t, 1).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..5).map(|i| q.get(&[i, j])).collect();
            assert!(!largest_entry_is_negative(col.iter()));
        }
    }

    #[test]
    fn qr_rejects_zero() {
        let t = DenseTensor::zeros(vec![3, 3]);
        assert!(matches!(qr_split(&t, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn svd_rank_one() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0, -1.0, 2.0];
        let t = DenseTensor::from_fn(vec![3, 4], |i| u[i[0]] * v[i[1]]);
        let split = svd_split(&t, 1, 3).unwrap();
        assert!(split.s[0] > 1.0);
        assert!(split.s[1..].iter().all(|&s| s < 1e-12));
    }

    #[test]
    fn svd_identity() {
        let split = svd_split(&DenseTensor::identity(3), 1, 3).unwrap();
        for s in &split.s {
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_truncation_error_matches_discarded_weight() {
        let t = random(vec![5, 5], 11);
        let full = svd_split(&t, 1, 5).unwrap();
        let trunc = svd_split(&t, 1, 2).unwrap();
        assert_eq!(trunc.rank(), 2);
        assert!(full.s.windows(2).all(|w| w[0] >= w[1]));
        let discarded: f64 = full.s[2..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let mut err = trunc.reconstruct().unwrap();
        err.add_scaled(-1.0, &t).unwrap();
        assert!((err.norm() - discarded).abs() < 1e-12);
        assert!(gram_defect(&trunc.u) < 1e-12);
        let v = trunc.vt.permute(&[1, 0]).unwrap();
        assert!(gram_defect(&v) < 1e-12);
    }

    #[test]
    fn svd_singular_values_match_gram_eigenvalues() {
        // independent route: eigenvalues of A^T A
        let t = random(vec![6, 4], 12);
        let split = svd_split(&t, 1, 4).unwrap();
        let gram = contract(&t, &t, &[0], &[0]).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(4, 4, gram.data());
        let mut eig: Vec<f64> = m
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|e| e.max(0.0).sqrt())
            .collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (s, e) in split.s.iter().zip(&eig) {
            assert!((s - e).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_rejects_zero_rank() {
        assert!(svd_split(&DenseTensor::identity(2), 1, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tensor_strategy() -> impl Strategy<Value = (Vec<usize>, u64)> {
            (prop::collection::vec(1usize..8, 2..4), any::<u64>())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn contraction_is_bilinear((shape, seed) in tensor_strategy(), alpha in -5.0f64..5.0) {
                let a = random(shape.clone(), seed);
                let b = random(vec![*shape.last().unwrap(), 3], seed ^ 1);
                let last = shape.len() - 1;
                let lhs = contract(&a.scaled(alpha), &b, &[last], &[0]).unwrap();
                let rhs = contract(&a, &b, &[last], &[0]).unwrap().scaled(alpha);
                for (x, y) in lhs.data().iter().zip(rhs.data()) {
                    prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
            }

            #[test]
            fn qr_reconstructs((shape, seed) in tensor_strategy(), split in 1usize..3) {
                let t = random(shape.clone(), seed);
                let split = split.min(shape.len() - 1);
                let (q, r) = qr_split(&t, split).unwrap();
                let back = contract(&q, &r, &[split], &[0]).unwrap();
                prop_assert!(rel_diff(&back, &t) < 1e-12);
                prop_assert!(gram_defect(&q) < 1e-12);
            }

            #[test]
            fn full_rank_svd_reconstructs((shape, seed) in tensor_strategy()) {
                let t = random(shape.clone(), seed);
                let split = svd_split(&t, 1, usize::MAX).unwrap();
                prop_assert!(rel_diff(&split.reconstruct().unwrap(), &t) < 1e-11);
            }
        }
    }
}
