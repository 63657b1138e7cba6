//! Dense row-major matrices, log-space reductions, a reproducible random
//! stream, and central-difference gradient checking.

use std::ops::{Index, IndexMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Standard product; each output entry sums over `k` in increasing order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self[(i, k)] * other[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        Ok(out)
    }

    /// `y = self · x`, written into `out`.
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.iter_rows()) {
            *o = dot(row, x);
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "vector of length {} against {} columns",
                x.len(),
                self.cols
            )));
        }
        let mut out = vec![0.0; self.rows];
        self.mul_vec_into(x, &mut out);
        Ok(out)
    }

    /// `y = selfᵀ · x`, written into `out`.
    pub fn mul_vec_transposed_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (xi, row) in x.iter().zip(self.iter_rows()) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += xi * r;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// LU factorization with partial pivoting.
    pub fn lu(&self) -> Result<Lu> {
        Lu::new(self)
    }

    /// Random rotation: Q factor of a Gaussian matrix with the sign of each
    /// column fixed by the diagonal of R.
    pub fn random_rotation(n: usize, rng: &mut RngStream) -> Matrix {
        loop {
            let mut a = Matrix::zeros(n, n);
            a.data.iter_mut().for_each(|v| *v = rng.normal());
            if let Some(q) = gram_schmidt_q(&a) {
                return q;
            }
        }
    }
}

/// Modified Gram-Schmidt on the columns of `a`; `None` if rank-deficient.
fn gram_schmidt_q(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a[(i, j)]).collect()).collect();
    for j in 0..n {
        for k in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let proj = dot(&done[k], &rest[0]);
            for (v, q) in rest[0].iter_mut().zip(&done[k]) {
                *v -= proj * q;
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt();
        if norm < 1e-10 {
            return None;
        }
        // r_jj > 0 after normalization; fixes the sign ambiguity of QR
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut q = Matrix::zeros(n, n);
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            q[(i, j)] = *v;
        }
    }
    Some(q)
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Packed LU factors `P·A = L·U` (unit lower `L`).
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    fn new(a: &Matrix) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::shape(format!(
                "LU of non-square {}x{} matrix",
                a.rows(),
                a.cols()
            )));
        }
        let n = a.rows();
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            if pivot == 0.0 {
                continue;
            }
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    lu[i * n + j] -= f * lu[k * n + j];
                }
            }
        }
        Ok(Self { n, lu, perm, sign })
    }

    pub fn det(&self) -> f64 {
        (0..self.n).fold(self.sign, |acc, i| acc * self.lu[i * self.n + i])
    }

    /// `ln |det A|`, summed over the diagonal of `U` to avoid overflow.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.n)
            .map(|i| self.lu[i * self.n + i].abs().ln())
            .sum()
    }

    pub fn is_singular(&self) -> bool {
        (0..self.n).any(|i| self.lu[i * self.n + i] == 0.0)
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n {
            return Err(Error::shape(format!("rhs length {} for n={n}", b.len())));
        }
        if self.is_singular() {
            return Err(Error::Singular("zero pivot in LU solve".into()));
        }
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                y[i] -= self.lu[i * n + j] * y[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                y[i] -= self.lu[i * n + j] * y[j];
            }
            y[i] /= self.lu[i * n + i];
        }
        Ok(y)
    }

    pub fn inverse(&self) -> Result<Matrix> {
        let n = self.n;
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e)?;
            for (i, v) in col.into_iter().enumerate() {
                inv[(i, j)] = v;
            }
        }
        Ok(inv)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln Σ exp(v_i)` via max-shift. All `-inf` yields `-inf`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("log_sum_exp of an empty vector"));
    }
    Ok(log_sum_exp_unchecked(v))
}

/// [`log_sum_exp`] without the emptiness check; returns `-inf` on empty input.
pub fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `ln(e^a + e^b)`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Normalizes a vector of log-weights in place so that `Σ exp(v) = 1`.
pub fn log_normalize(v: &mut [f64]) {
    let lse = log_sum_exp_unchecked(v);
    v.iter_mut().for_each(|x| *x -= lse);
}

/// Log density of the standard isotropic Gaussian.
pub fn std_normal_log_pdf(z: &[f64]) -> f64 {
    -0.5 * (z.len() as f64 * LN_2PI + dot(z, z))
}

/// Central-difference gradient check.
///
/// Returns `max_i |fd_i - analytic_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(mut f: F, p: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    if p.len() != analytic.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradient entries",
            p.len(),
            analytic.len()
        )));
    }
    let mut probe = p.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        probe[i] = p[i] + eps;
        let plus = f(&probe);
        probe[i] = p[i] - eps;
        let minus = f(&probe);
        probe[i] = p[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at probe of parameter {i}")));
        }
        let fd = (plus - minus) / (2.0 * eps);
        let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Serializable position of an [`RngStream`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// Keystream position in 32-bit words, as a decimal string (u128).
    pub word_pos: String,
}

/// Seeded ChaCha20 stream. Identical seeds give identical draws everywhere.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha20";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; depends only on this stream's seed and `index`.
    pub fn split(&self, index: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(index.wrapping_add(0x5EED))))
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| Error::format(format!("bad rng word position {:?}", state.word_pos)))?;
        let mut rng = RngStream::new(state.seed);
        rng.inner.set_word_pos(pos);
        Ok(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Index drawn with probability proportional to `exp(log_weights[i])`.
    pub fn categorical_log(&mut self, log_weights: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        let lse = log_sum_exp_unchecked(log_weights);
        let mut last = 0;
        for (i, &lw) in log_weights.iter().enumerate() {
            let p = (lw - lse).exp();
            if p > 0.0 {
                last = i;
            }
            acc += p;
            if u < acc {
                return i;
            }
        }
        last
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_sum_exp_basic_cases() {
        assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(log_sum_exp(&[]).is_err());
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn matmul_small_cases() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
        let m = Matrix::from_rows(&[vec![1.5, -2.0, 0.5], vec![0.0, 3.0, 1.0], vec![7.0, 8.0, 9.0]]).unwrap();
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
        assert!(a.matmul(&m).is_err());
    }

    #[test]
    fn lu_determinant_and_inverse() {
        let a = Matrix::from_rows(&[vec![0.0, 2.0, 1.0], vec![1.0, 1.0, 0.0], vec![3.0, 0.0, 1.0]]).unwrap();
        let lu = a.lu().unwrap();
        // cofactor expansion: 0*(1) - 2*(1-0) + 1*(0-3) = -5
        assert!((lu.det() + 5.0).abs() < 1e-12);
        assert!((lu.log_abs_det() - 5f64.ln()).abs() < 1e-12);
        let inv = lu.inverse().unwrap();
        let prod = a.matmul(&inv).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-12);
            }
        }
        let sing = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(sing.lu().unwrap().solve(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn random_rotation_is_orthogonal() {
        let mut rng = RngStream::new(3);
        let q = Matrix::random_rotation(6, &mut rng);
        let qtq = q.transpose().matmul(&q).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[(i, j)] - want).abs() < 1e-12);
            }
        }
        assert!((q.lu().unwrap().log_abs_det()).abs() < 1e-12);
    }

    #[test]
    fn grad_check_detects_faults() {
        let f = |p: &[f64]| dot(p, p);
        let ok = grad_check(f, &[1.0, 2.0], &[2.0, 4.0], 1e-5).unwrap();
        assert!(ok < 1e-8);
        let bad = grad_check(f, &[1.0, 2.0], &[2.0, 5.0], 1e-5).unwrap();
        // |4 - 5| / max(1, 5)
        assert!((bad - 0.2).abs() < 1e-6, "{bad}");
        let err = grad_check(|p: &[f64]| if p[1] > 2.0 { f64::NAN } else { 0.0 }, &[1.0, 2.0], &[0.0, 0.0], 1e-3);
        assert!(matches!(err, Err(Error::NonFinite(msg)) if msg.contains("parameter 1")));
    }

    #[test]
    fn rng_state_round_trip() {
        let mut a = RngStream::new(99);
        for _ in 0..17 {
            a.normal();
        }
        let saved = a.state();
        let tail: Vec<f64> = (0..50).map(|_| a.normal()).collect();
        let mut b = RngStream::from_state(&saved).unwrap();
        let again: Vec<f64> = (0..50).map(|_| b.normal()).collect();
        assert_eq!(tail, again);
    }

    #[test]
    fn rng_split_streams_differ() {
        let root = RngStream::new(5);
        let mut a = root.split(0);
        let mut b = root.split(1);
        assert_ne!(a.next_u64(), b.next_u64());
        assert_eq!(root.split(7).next_u64(), root.split(7).next_u64());
    }

    proptest! {
        #[test]
        fn log_sum_exp_shift(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let base = log_sum_exp(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((log_sum_exp(&shifted).unwrap() - (base + c)).abs() < 1e-10);
        }

        #[test]
        fn log_sum_exp_permutation(mut v in prop::collection::vec(-50.0f64..50.0, 1..20), seed in 0u64..1000) {
            let base = log_sum_exp(&v).unwrap();
            RngStream::new(seed).shuffle(&mut v);
            prop_assert!((log_sum_exp(&v).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn matmul_associative(seed in 0u64..500) {
            let mut rng = RngStream::new(seed);
            let mut rand_mat = |r, c| {
                let data = (0..r * c).map(|_| rng.uniform_range(-1e3, 1e3) / 1e3 * 10.0).collect();
                Matrix::from_vec(r, c, data).unwrap()
            };
            let a = rand_mat(3, 4);
            let b = rand_mat(4, 2);
            let c = rand_mat(2, 5);
            let left = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let right = a.matmul(&b).unwrap().matmul(&c).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn rng_reproducible(seed in any::<u64>()) {
            let mut a = RngStream::new(seed);
            let mut b = RngStream::new(seed);
            for _ in 0..32 {
                prop_assert_eq!(a.next_u64().to_le_bytes(), b.next_u64().to_le_bytes());
            }
        }
    }
}
