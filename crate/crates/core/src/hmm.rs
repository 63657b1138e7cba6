//! Markov-chain machinery shared by every emission family: log-space
//! forward-backward, posterior statistics and the closed-form updates of the
//! initial distribution and the transition matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_add_exp, log_sum_exp_unchecked, Matrix};
use crate::par;

/// A `T × D` matrix of per-frame feature vectors.
pub type FeatureSequence = Matrix;

/// `T × S` matrix of `log p(x_t | s)`.
pub type EmissionLogLik = Matrix;

/// A state-conditional mixture density.
pub trait Emission: Sync {
    fn num_states(&self) -> usize;

    fn num_components(&self) -> usize;

    fn dim(&self) -> usize;

    /// Writes `log π_{s,k} + log p_k(x | s)` for every component `k`.
    fn component_log_joint(&self, state: usize, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// `log p(x | s)`.
    fn log_pdf(&self, state: usize, x: &[f64]) -> Result<f64> {
        let mut buf = vec![0.0; self.num_components()];
        self.component_log_joint(state, x, &mut buf)?;
        Ok(log_sum_exp_unchecked(&buf))
    }
}

/// Initial distribution and transition matrix, both in log domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    log_q: Vec<f64>,
    /// Row-major `S × S`, row = from-state.
    log_a: Vec<f64>,
}

const SIMPLEX_TOL: f64 = 1e-12;

impl MarkovChain {
    pub fn from_log(log_q: Vec<f64>, log_a: Matrix) -> Result<Self> {
        let s = log_q.len();
        if s == 0 {
            return Err(Error::Empty("Markov chain with zero states"));
        }
        if log_a.shape() != (s, s) {
            return Err(Error::shape(format!(
                "transition matrix {:?} for {s} states",
                log_a.shape()
            )));
        }
        let chain = Self {
            log_q,
            log_a: log_a.into_data(),
        };
        chain.validate()?;
        Ok(chain)
    }

    pub fn from_probs(q: &[f64], a: &Matrix) -> Result<Self> {
        let log_q = q.iter().map(|p| p.ln()).collect();
        let log_a = Matrix::from_vec(a.rows(), a.cols(), a.data().iter().map(|p| p.ln()).collect())?;
        Self::from_log(log_q, log_a)
    }

    /// Start in state 0 with probability one; upper-triangular transitions,
    /// uniform over the reachable states `j ≥ i`.
    pub fn left_to_right(num_states: usize) -> Result<Self> {
        if num_states == 0 {
            return Err(Error::Empty("Markov chain with zero states"));
        }
        let mut q = vec![0.0; num_states];
        q[0] = 1.0;
        let mut a = Matrix::zeros(num_states, num_states);
        for i in 0..num_states {
            let p = 1.0 / (num_states - i) as f64;
            for j in i..num_states {
                a[(i, j)] = p;
            }
        }
        Self::from_probs(&q, &a)
    }

    fn validate(&self) -> Result<()> {
        let s = self.num_states();
        let check = |name: String, row: &[f64]| -> Result<()> {
            if row.iter().any(|v| v.is_nan() || *v > 0.0) {
                return Err(Error::invalid(format!("{name} has entries outside [-inf, 0]")));
            }
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid(format!("{name} sums to {total}")));
            }
            Ok(())
        };
        check("initial distribution".into(), &self.log_q)?;
        for i in 0..s {
            check(format!("transition row {i}"), &self.log_a[i * s..(i + 1) * s])?;
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.log_q.len()
    }

    pub fn log_q(&self) -> &[f64] {
        &self.log_q
    }

    pub fn log_a(&self, from: usize, to: usize) -> f64 {
        self.log_a[from * self.num_states() + to]
    }

    pub fn log_a_matrix(&self) -> Matrix {
        let s = self.num_states();
        Matrix::from_vec(s, s, self.log_a.clone()).expect("square by construction")
    }

    pub fn q(&self) -> Vec<f64> {
        self.log_q.iter().map(|v| v.exp()).collect()
    }

    pub fn a(&self) -> Matrix {
        let s = self.num_states();
        Matrix::from_vec(s, s, self.log_a.iter().map(|v| v.exp()).collect()).expect("square")
    }
}

fn forward(chain: &MarkovChain, emis: &EmissionLogLik) -> Result<Matrix> {
    let s = chain.num_states();
    let t_len = emis.rows();
    if t_len == 0 {
        return Err(Error::Empty("sequence with zero frames"));
    }
    if emis.cols() != s {
        return Err(Error::shape(format!(
            "emission matrix has {} columns for {s} states",
            emis.cols()
        )));
    }
    let mut alpha = Matrix::zeros(t_len, s);
    for j in 0..s {
        alpha[(0, j)] = chain.log_q[j] + emis[(0, j)];
    }
    let mut buf = vec![0.0; s];
    for t in 1..t_len {
        for j in 0..s {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = alpha[(t - 1, i)] + chain.log_a(i, j);
            }
            alpha[(t, j)] = log_sum_exp_unchecked(&buf) + emis[(t, j)];
        }
    }
    Ok(alpha)
}

fn backward(chain: &MarkovChain, emis: &EmissionLogLik) -> Matrix {
    let s = chain.num_states();
    let t_len = emis.rows();
    let mut beta = Matrix::zeros(t_len, s);
    let mut buf = vec![0.0; s];
    for t in (0..t_len.saturating_sub(1)).rev() {
        for i in 0..s {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = chain.log_a(i, j) + emis[(t + 1, j)] + beta[(t + 1, j)];
            }
            beta[(t, i)] = log_sum_exp_unchecked(&buf);
        }
    }
    beta
}

/// `log p(x̲)` by the log-space forward recursion.
pub fn forward_log_likelihood(chain: &MarkovChain, emis: &EmissionLogLik) -> Result<f64> {
    let alpha = forward(chain, emis)?;
    Ok(log_sum_exp_unchecked(alpha.row(alpha.rows() - 1)))
}

/// Per-frame, per-state, per-component `log π_{s,k} + log p_k(x_t|s)`
/// alongside the per-state emission log-likelihoods.
#[derive(Debug, Clone)]
pub struct FrameScores {
    pub emission: EmissionLogLik,
    /// Flat `T × S × N_mix`.
    pub components: Vec<f64>,
    pub num_components: usize,
}

pub fn score_frames<E: Emission + ?Sized>(em: &E, seq: &FeatureSequence) -> Result<FrameScores> {
    if seq.cols() != em.dim() {
        return Err(Error::shape(format!(
            "sequence dimension {} but emission dimension {}",
            seq.cols(),
            em.dim()
        )));
    }
    let s = em.num_states();
    let n = em.num_components();
    let rows: Vec<Vec<f64>> = par::try_map_indexed(seq.rows(), |t| {
        let x = seq.row(t);
        let mut row = vec![0.0; s * n];
        for (state, chunk) in row.chunks_exact_mut(n).enumerate() {
            em.component_log_joint(state, x, chunk)?;
        }
        Ok(row)
    })?;
    let mut emission = Matrix::zeros(seq.rows(), s);
    let mut components = Vec::with_capacity(seq.rows() * s * n);
    for (t, row) in rows.into_iter().enumerate() {
        for (state, chunk) in row.chunks_exact(n).enumerate() {
            let v = log_sum_exp_unchecked(chunk);
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::NonFinite(format!("emission at frame {t}, state {state}")));
            }
            emission[(t, state)] = v;
        }
        components.extend(row);
    }
    Ok(FrameScores {
        emission,
        components,
        num_components: n,
    })
}

/// Sequence log-likelihood under a chain and an emission model.
pub fn sequence_log_likelihood<E: Emission + ?Sized>(
    chain: &MarkovChain,
    em: &E,
    seq: &FeatureSequence,
) -> Result<f64> {
    let scores = score_frames(em, seq)?;
    forward_log_likelihood(chain, &scores.emission)
}

/// E-step output for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    /// `T × S`.
    pub log_gamma: Matrix,
    /// `S × S`, `log Σ_t ξ_t(i, j)`.
    pub log_xi_sum: Matrix,
    pub log_likelihood: f64,
    /// Flat `T × S × N_mix`.
    pub comp_gamma: Vec<f64>,
    pub num_components: usize,
}

impl PosteriorStats {
    pub fn num_frames(&self) -> usize {
        self.log_gamma.rows()
    }

    pub fn num_states(&self) -> usize {
        self.log_gamma.cols()
    }

    pub fn comp(&self, t: usize, s: usize, k: usize) -> f64 {
        let n = self.num_components;
        self.comp_gamma[(t * self.num_states() + s) * n + k]
    }

    pub fn comp_slice(&self, t: usize, s: usize) -> &[f64] {
        let n = self.num_components;
        let start = (t * self.num_states() + s) * n;
        &self.comp_gamma[start..start + n]
    }
}

/// Posterior statistics from precomputed frame scores.
pub fn posteriors(chain: &MarkovChain, scores: &FrameScores) -> Result<PosteriorStats> {
    let emis = &scores.emission;
    let s = chain.num_states();
    for t in 0..emis.rows() {
        if emis.row(t).iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::ImpossibleFrame { frame: t });
        }
    }
    let alpha = forward(chain, emis)?;
    for t in 0..alpha.rows() {
        if alpha.row(t).iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::ImpossibleFrame { frame: t });
        }
    }
    let beta = backward(chain, emis);
    let t_len = emis.rows();
    let ll = log_sum_exp_unchecked(alpha.row(t_len - 1));

    let mut log_gamma = Matrix::zeros(t_len, s);
    for t in 0..t_len {
        for j in 0..s {
            log_gamma[(t, j)] = alpha[(t, j)] + beta[(t, j)] - ll;
        }
    }

    let mut log_xi_sum = Matrix::filled(s, s, f64::NEG_INFINITY);
    for t in 0..t_len.saturating_sub(1) {
        for i in 0..s {
            for j in 0..s {
                let v = alpha[(t, i)] + chain.log_a(i, j) + emis[(t + 1, j)] + beta[(t + 1, j)] - ll;
                log_xi_sum[(i, j)] = log_add_exp(log_xi_sum[(i, j)], v);
            }
        }
    }

    let n = scores.num_components;
    let mut comp_gamma = vec![0.0; t_len * s * n];
    for t in 0..t_len {
        for j in 0..s {
            let base = (t * s + j) * n;
            let e = emis[(t, j)];
            for k in 0..n {
                comp_gamma[base + k] = if e == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else if n == 1 {
                    log_gamma[(t, j)]
                } else {
                    log_gamma[(t, j)] + scores.components[base + k] - e
                };
            }
        }
    }

    Ok(PosteriorStats {
        log_gamma,
        log_xi_sum,
        log_likelihood: ll,
        comp_gamma,
        num_components: n,
    })
}

/// Forward-backward posteriors of states and mixture components.
pub fn e_step<E: Emission + ?Sized>(
    chain: &MarkovChain,
    em: &E,
    seq: &FeatureSequence,
) -> Result<PosteriorStats> {
    if em.num_states() != chain.num_states() {
        return Err(Error::shape(format!(
            "emission has {} states, chain has {}",
            em.num_states(),
            chain.num_states()
        )));
    }
    let scores = score_frames(em, seq)?;
    posteriors(chain, &scores)
}

/// Closed-form update of the initial distribution; returns `log q`.
pub fn update_q(stats: &[PosteriorStats]) -> Result<Vec<f64>> {
    let first = stats.first().ok_or(Error::Empty("no posterior statistics"))?;
    let s = first.num_states();
    let mut acc = vec![f64::NEG_INFINITY; s];
    for st in stats {
        if st.num_states() != s {
            return Err(Error::shape("posterior statistics disagree on state count"));
        }
        for (a, g) in acc.iter_mut().zip(st.log_gamma.row(0)) {
            *a = log_add_exp(*a, *g);
        }
    }
    crate::numerics::log_normalize(&mut acc);
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionUpdate {
    pub log_a: Matrix,
    /// From-states with no expected transitions; their rows were kept.
    pub zero_mass_rows: Vec<usize>,
}

/// Closed-form update of the transition matrix (log domain).
pub fn update_a(stats: &[PosteriorStats], previous_log_a: &Matrix) -> Result<TransitionUpdate> {
    let s = previous_log_a.rows();
    if stats.iter().all(|st| st.num_frames() < 2) {
        return Err(Error::invalid(
            "transition update needs at least one sequence with two or more frames",
        ));
    }
    let mut acc = Matrix::filled(s, s, f64::NEG_INFINITY);
    for st in stats {
        if st.log_xi_sum.shape() != (s, s) {
            return Err(Error::shape("posterior statistics disagree on state count"));
        }
        for (a, x) in acc.data_mut().iter_mut().zip(st.log_xi_sum.data()) {
            *a = log_add_exp(*a, *x);
        }
    }
    let mut zero_mass_rows = Vec::new();
    for i in 0..s {
        let row = acc.row_mut(i);
        let total = log_sum_exp_unchecked(row);
        if total == f64::NEG_INFINITY {
            row.copy_from_slice(previous_log_a.row(i));
            zero_mass_rows.push(i);
        } else {
            row.iter_mut().for_each(|v| *v -= total);
        }
    }
    Ok(TransitionUpdate {
        log_a: acc,
        zero_mass_rows,
    })
}

impl MarkovChain {
    /// Replaces `q` and `A` with their closed-form EM updates.
    pub fn m_step(&mut self, stats: &[PosteriorStats]) -> Result<Vec<usize>> {
        let log_q = update_q(stats)?;
        let (log_a, zero_rows) = if stats.iter().any(|st| st.num_frames() >= 2) {
            let upd = update_a(stats, &self.log_a_matrix())?;
            (upd.log_a.into_data(), upd.zero_mass_rows)
        } else {
            (self.log_a.clone(), Vec::new())
        };
        self.log_q = log_q;
        self.log_a = log_a;
        Ok(zero_rows)
    }
}
