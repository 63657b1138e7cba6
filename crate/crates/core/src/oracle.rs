//! Reference computations for verification.
//!
//! Everything here is deliberately naive: exhaustive enumeration instead of
//! dynamic programming, compensated summation instead of plain sums, finite
//! differences instead of analytic derivatives. These routines back the test
//! suites and the `selftest` command; nothing in the training or inference
//! paths calls them.

use crate::hmm::{Emission, FeatureSequence, MarkovChain};
use crate::numerics::{Matrix, Lu};

/// Double-double accumulator (Knuth two-sum with a running error term).
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactSum {
    hi: f64,
    lo: f64,
}

impl ExactSum {
    pub fn add(&mut self, x: f64) {
        let s = self.hi + x;
        let bp = s - self.hi;
        let err = (self.hi - (s - bp)) + (x - bp);
        self.hi = s;
        self.lo += err;
    }

    /// Adds the exact product `a·b` (split via FMA).
    pub fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        let e = a.mul_add(b, -p);
        self.add(p);
        self.lo += e;
    }

    pub fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

/// `ln Σ exp(v_i)` with compensated summation of the shifted exponentials.
pub fn log_sum_exp_extended(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut acc = ExactSum::default();
    for &x in v {
        acc.add((x - m).exp());
    }
    m + acc.value().ln()
}

/// Matrix product with compensated dot products.
pub fn matmul_extended(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = ExactSum::default();
            for k in 0..a.cols() {
                acc.add_product(a[(i, k)], b[(k, j)]);
            }
            out[(i, j)] = acc.value();
        }
    }
    out
}

fn for_each_path(len: usize, base: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; len];
    loop {
        f(&path);
        let mut i = 0;
        loop {
            if i == len {
                return;
            }
            path[i] += 1;
            if path[i] < base {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// `log p(x̲)` by summing the joint over every state path.
pub fn brute_force_log_likelihood(chain: &MarkovChain, emis: &Matrix) -> f64 {
    let s = chain.num_states();
    let mut terms = Vec::new();
    for_each_path(emis.rows(), s, |path| {
        let mut lp = chain.log_q()[path[0]] + emis[(0, path[0])];
        for t in 1..path.len() {
            lp += chain.log_a(path[t - 1], path[t]) + emis[(t, path[t])];
        }
        terms.push(lp);
    });
    log_sum_exp_extended(&terms)
}

/// Posterior quantities from exhaustive enumeration (probability domain).
#[derive(Debug, Clone)]
pub struct EnumeratedPosteriors {
    pub log_likelihood: f64,
    /// `[t][s]`
    pub gamma: Vec<Vec<f64>>,
    /// `[t][s][k]`
    pub comp_gamma: Vec<Vec<Vec<f64>>>,
    /// `[i][j]`, summed over t.
    pub xi_sum: Vec<Vec<f64>>,
}

/// Enumerates every joint (state path, component path) of a sequence.
pub fn brute_force_posteriors<E: Emission + ?Sized>(
    chain: &MarkovChain,
    em: &E,
    seq: &FeatureSequence,
) -> EnumeratedPosteriors {
    let s = chain.num_states();
    let n = em.num_components();
    let t_len = seq.rows();
    // comp[t][state][k]
    let comp: Vec<Vec<Vec<f64>>> = (0..t_len)
        .map(|t| {
            (0..s)
                .map(|state| {
                    let mut out = vec![0.0; n];
                    em.component_log_joint(state, seq.row(t), &mut out).expect("emission");
                    out
                })
                .collect()
        })
        .collect();

    let mut joints: Vec<(Vec<usize>, f64)> = Vec::new();
    for_each_path(t_len, s * n, |path| {
        let st = |t: usize| path[t] / n;
        let k = |t: usize| path[t] % n;
        let mut lp = chain.log_q()[st(0)] + comp[0][st(0)][k(0)];
        for t in 1..t_len {
            lp += chain.log_a(st(t - 1), st(t)) + comp[t][st(t)][k(t)];
        }
        joints.push((path.to_vec(), lp));
    });
    let logs: Vec<f64> = joints.iter().map(|(_, l)| *l).collect();
    let ll = log_sum_exp_extended(&logs);

    let mut gamma = vec![vec![ExactSum::default(); s]; t_len];
    let mut comp_gamma = vec![vec![vec![ExactSum::default(); n]; s]; t_len];
    let mut xi = vec![vec![ExactSum::default(); s]; s];
    for (path, lp) in &joints {
        let p = (lp - ll).exp();
        for t in 0..t_len {
            let (st, k) = (path[t] / n, path[t] % n);
            gamma[t][st].add(p);
            comp_gamma[t][st][k].add(p);
            if t + 1 < t_len {
                xi[st][path[t + 1] / n].add(p);
            }
        }
    }
    let val = |v: &Vec<ExactSum>| v.iter().map(ExactSum::value).collect::<Vec<f64>>();
    EnumeratedPosteriors {
        log_likelihood: ll,
        gamma: gamma.iter().map(val).collect(),
        comp_gamma: comp_gamma.iter().map(|r| r.iter().map(val).collect()).collect(),
        xi_sum: xi.iter().map(val).collect(),
    }
}

/// Central-difference Jacobian `∂f_i/∂x_j`.
pub fn numerical_jacobian<F>(f: F, x: &[f64], h: f64) -> Matrix
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let m = f(x).len();
    let mut jac = Matrix::zeros(m, x.len());
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = f(&probe);
        probe[j] = x[j] - h;
        let minus = f(&probe);
        probe[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac
}

/// `ln |det J|` of the central-difference Jacobian of `f` at `x`.
pub fn numerical_log_abs_det<F>(f: F, x: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let jac = numerical_jacobian(f, x, h);
    Lu::log_abs_det(&jac.lu().expect("square Jacobian"))
}

/// Midpoint-rule integral of `exp(log_density)` over `[lo, hi]²`.
pub fn grid_mass_2d<F>(log_density: F, lo: f64, hi: f64, cells: usize) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let h = (hi - lo) / cells as f64;
    let mut acc = ExactSum::default();
    for i in 0..cells {
        for j in 0..cells {
            let p = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
            acc.add(log_density(&p).exp());
        }
    }
    acc.value() * h * h
}

/// Straight-from-the-definition classification metrics, for cross-checking.
pub mod metrics {
    /// Returns `(precision, recall, f1)` for class `c`; 0 when undefined.
    pub fn per_class(pred: &[usize], truth: &[usize], c: usize) -> (f64, f64, f64) {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let pp = pred.iter().filter(|p| **p == c).count() as f64;
        let ap = truth.iter().filter(|t| **t == c).count() as f64;
        let precision = if pp > 0.0 { tp / pp } else { 0.0 };
        let recall = if ap > 0.0 { tp / ap } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (precision, recall, f1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_recovers_cancellation() {
        let mut acc = ExactSum::default();
        for x in [1e16, 1.0, -1e16, 1.0] {
            acc.add(x);
        }
        assert_eq!(acc.value(), 2.0);
    }

    #[test]
    fn path_enumeration_count() {
        let mut n = 0;
        for_each_path(3, 4, |_| n += 1);
        assert_eq!(n, 64);
    }
}
