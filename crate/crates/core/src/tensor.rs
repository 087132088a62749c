//! Dense row-major `f64` tensors.
//!
//! Most of the crate only needs rank-2 matrices and rank-1 vectors, so the
//! helpers here are written for those two cases. Values are immutable once
//! built; every operation returns a fresh tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix. Rank-1 tensors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, &self.shape, &[0, 0]));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        gemm(self, false, other, false)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            t.require_matrix("concat_rows")?;
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", &parts[0].shape, &t.shape));
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.require_matrix("slice_rows")?;
        if start + len > r {
            return Err(Error::Index { index: start + len, len: r });
        }
        Ok(Tensor {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        })
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |t| t.rows());
        let mut cols = 0;
        for t in parts {
            t.require_matrix("concat_cols")?;
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", &parts[0].shape, &t.shape));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for t in parts {
                data.extend_from_slice(t.row(r));
            }
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.require_matrix("slice_cols")?;
        if start + len > c {
            return Err(Error::Index { index: start + len, len: c });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(Tensor {
            shape: vec![r, len],
            data,
        })
    }
}

/// `op(a) * op(b)` where `op` optionally transposes a rank-2 operand.
pub(crate) fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = a.require_matrix("matmul")?;
    let (br, bc) = b.require_matrix("matmul")?;
    let (m, k, rsa, csa) = if trans_a { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (k2, n, rsb, csb) = if trans_b { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the strides describe exactly the row-major buffers above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa as isize,
                csa as isize,
                b.data.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::matrix(m, n, out)
}

/// Max-subtracted softmax over one row, restricted to `allow` when given.
///
/// Disallowed entries come out as exactly 0. Returns `None` if every entry
/// is disallowed.
pub(crate) fn softmax_row_into(logits: &[f64], allow: Option<&[bool]>, out: &mut [f64]) -> Option<()> {
    let allowed = |j: usize| allow.map_or(true, |a| a[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in logits.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for (j, &v) in logits.iter().enumerate() {
        if allowed(j) {
            let e = (v - max).exp();
            out[j] = e;
            total += e;
        } else {
            out[j] = 0.0;
        }
    }
    let inv = 1.0 / total;
    for v in out.iter_mut() {
        *v *= inv;
    }
    Some(())
}

/// Log-sum-exp of one row over the allowed entries; `-inf` when none are.
pub(crate) fn logsumexp_row(logits: &[f64], allow: Option<&[bool]>) -> f64 {
    let allowed = |j: usize| allow.map_or(true, |a| a[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in logits.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut total = 0.0;
    for (j, &v) in logits.iter().enumerate() {
        if allowed(j) {
            total += (v - max).exp();
        }
    }
    max + total.ln()
}

/// Row-wise softmax, optionally masked by a row-major `[rows x cols]` allow matrix.
pub fn softmax_rows(m: &Tensor, allow: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = m.require_matrix("softmax_rows")?;
    if let Some(a) = allow {
        if a.len() != r * c {
            return Err(Error::shape("softmax_rows", &m.shape, &[a.len()]));
        }
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row_allow = allow.map(|a| &a[i * c..(i + 1) * c]);
        softmax_row_into(m.row(i), row_allow, &mut out[i * c..(i + 1) * c])
            .ok_or(Error::DegenerateRow { row: i })?;
    }
    Tensor::matrix(r, c, out)
}

/// Per-row normalization followed by the `gamma`/`beta` affine map.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape("layer_norm", &x.shape, &gamma.shape));
    }
    let mut out = vec![0.0; x.len()];
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * rstd * gamma.data[j] + beta.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(i, p) * b.get(p, j);
                }
            }
        }
        Tensor::matrix(m, n, out).unwrap()
    }

    fn pseudo_random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::SplitMix64::new(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn selector_row() {
        let sel = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![3.5], vec![-7.25]]).unwrap();
        assert_eq!(sel.matmul(&col).unwrap().data(), &[3.5]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = pseudo_random(3, 4, 1);
        let b = pseudo_random(4, 2, 2);
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn transposed_gemm_variants() {
        let a = pseudo_random(5, 3, 3);
        let b = pseudo_random(5, 4, 4);
        let at_b = gemm(&a, true, &b, false).unwrap();
        assert!(at_b.max_abs_diff(&naive_matmul(&a.transpose().unwrap(), &b)) < 1e-12);
        let c = pseudo_random(4, 3, 5);
        let a_ct = gemm(&a, false, &c, true).unwrap();
        assert!(a_ct.max_abs_diff(&naive_matmul(&a, &c.transpose().unwrap())) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0f64.ln(), 2.0f64.ln()], vec![1000.0, 1001.0]]).unwrap();
        let s = softmax_rows(&t, None).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(1, 1) - 2.0 / 3.0).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((s.get(2, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s.get(2, 1) - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_and_renormalizes() {
        let t = Tensor::from_rows(&[vec![3.0, 1.0, 2.0]]).unwrap();
        let s = softmax_rows(&t, Some(&[true, false, true])).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(
            softmax_rows(&t, Some(&[false, false, false])),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::filled(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let constant = Tensor::from_rows(&[vec![4.0, 4.0]]).unwrap();
        assert_eq!(layer_norm(&constant, &ones, &zeros, 1e-5).unwrap().data(), &[0.0, 0.0]);
        let unit = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let out = layer_norm(&unit, &ones, &zeros, 1e-300).unwrap();
        assert!(out.max_abs_diff(&unit) < 1e-12);
        assert!(layer_norm(&unit, &ones, &zeros, 0.0).is_err());
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let x = pseudo_random(1, 6, 9);
        let gamma = pseudo_random(1, 6, 10).reshape(vec![6]).unwrap();
        let beta = pseudo_random(1, 6, 11).reshape(vec![6]).unwrap();
        let out = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let v = x.data();
        let mean = v.iter().sum::<f64>() / 6.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 6.0;
        for j in 0..6 {
            let expect = (v[j] - mean) / (var + 1e-5).sqrt() * gamma.data()[j] + beta.data()[j];
            assert!((out.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice() {
        let a = pseudo_random(2, 3, 1);
        let b = pseudo_random(4, 3, 2);
        let cat = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(cat.slice_rows(2, 4).unwrap(), b);
        let c = pseudo_random(2, 5, 3);
        let catc = Tensor::concat_cols(&[&a, &c]).unwrap();
        assert_eq!(catc.slice_cols(3, 5).unwrap(), c);
        assert_eq!(catc.slice_cols(0, 3).unwrap(), a);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..200.0) {
                let t = pseudo_random(rows, cols, seed).scale(scale);
                let s = softmax_rows(&t, None).unwrap();
                for i in 0..rows {
                    let total: f64 = s.row(i).iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                    prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
                }
            }

            #[test]
            fn matmul_is_associative(m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5, seed in any::<u64>()) {
                let a = pseudo_random(m, k, seed);
                let b = pseudo_random(k, n, seed ^ 1);
                let c = pseudo_random(n, p, seed ^ 2);
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                prop_assert!(left.max_abs_diff(&right) < 1e-9);
            }
        }
    }
}
