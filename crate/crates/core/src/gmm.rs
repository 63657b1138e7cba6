//! Diagonal-covariance Gaussian mixture emissions with a closed-form M-step.

use crate::error::{Error, Result};
use crate::hmm::{Emission, FeatureSequence, PosteriorStats};
use crate::numerics::{log_normalize, log_sum_exp_unchecked, RngStream, LN_2PI};
use crate::par;

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Responsibility mass below which a component keeps its parameters.
pub const STARVED_MASS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmEmission {
    num_states: usize,
    num_components: usize,
    dim: usize,
    /// `S × N`
    log_weights: Vec<f64>,
    /// `S × N × D`
    means: Vec<f64>,
    /// `S × N × D`
    log_vars: Vec<f64>,
}

impl GmmEmission {
    pub fn new(
        num_states: usize,
        num_components: usize,
        dim: usize,
        log_weights: Vec<f64>,
        means: Vec<f64>,
        log_vars: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_components == 0 || dim == 0 {
            return Err(Error::invalid("GMM needs at least one state, component and dimension"));
        }
        let sn = num_states * num_components;
        if log_weights.len() != sn || means.len() != sn * dim || log_vars.len() != sn * dim {
            return Err(Error::shape("GMM parameter lengths do not match S, N_mix, D"));
        }
        for s in 0..num_states {
            let w = &log_weights[s * num_components..(s + 1) * num_components];
            let total: f64 = w.iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("state {s} mixture weights sum to {total}")));
            }
        }
        if means.iter().chain(&log_vars).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GMM means or variances".into()));
        }
        let floor = VARIANCE_FLOOR.ln();
        let log_vars = log_vars.into_iter().map(|v| v.max(floor)).collect();
        Ok(Self {
            num_states,
            num_components,
            dim,
            log_weights,
            means,
            log_vars,
        })
    }

    /// Zero means, unit variances, uniform weights.
    pub fn standard(num_states: usize, num_components: usize, dim: usize) -> Result<Self> {
        let sn = num_states * num_components;
        let lw = -(num_components as f64).ln();
        Self::new(
            num_states,
            num_components,
            dim,
            vec![lw; sn],
            vec![0.0; sn * dim],
            vec![0.0; sn * dim],
        )
    }

    /// Means from randomly chosen training frames, variances from the global
    /// per-dimension variance, uniform weights.
    pub fn init_from_data(
        num_states: usize,
        num_components: usize,
        data: &[FeatureSequence],
        rng: &mut RngStream,
    ) -> Result<Self> {
        let frames: Vec<&[f64]> = data.iter().flat_map(|s| s.iter_rows()).collect();
        if frames.is_empty() {
            return Err(Error::Empty("GMM initialization without frames"));
        }
        let dim = frames[0].len();
        let n = frames.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in &frames {
            for (m, x) in mean.iter_mut().zip(*f) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for f in &frames {
            for ((v, x), m) in var.iter_mut().zip(*f).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let log_var: Vec<f64> = var.iter().map(|v| v.max(VARIANCE_FLOOR).ln()).collect();
        let sn = num_states * num_components;
        let mut means = Vec::with_capacity(sn * dim);
        let mut log_vars = Vec::with_capacity(sn * dim);
        for _ in 0..sn {
            means.extend_from_slice(frames[rng.below(frames.len())]);
            log_vars.extend_from_slice(&log_var);
        }
        let lw = -(num_components as f64).ln();
        Self::new(num_states, num_components, dim, vec![lw; sn], means, log_vars)
    }

    fn idx(&self, state: usize, k: usize) -> usize {
        state * self.num_components + k
    }

    pub fn log_weights(&self, state: usize) -> &[f64] {
        let n = self.num_components;
        &self.log_weights[state * n..(state + 1) * n]
    }

    pub fn mean(&self, state: usize, k: usize) -> &[f64] {
        let i = self.idx(state, k) * self.dim;
        &self.means[i..i + self.dim]
    }

    pub fn log_var(&self, state: usize, k: usize) -> &[f64] {
        let i = self.idx(state, k) * self.dim;
        &self.log_vars[i..i + self.dim]
    }

    pub fn all_log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn all_means(&self) -> &[f64] {
        &self.means
    }

    pub fn all_log_vars(&self) -> &[f64] {
        &self.log_vars
    }

    fn component_log_pdf(&self, state: usize, k: usize, x: &[f64]) -> f64 {
        let mean = self.mean(state, k);
        let log_var = self.log_var(state, k);
        let mut acc = 0.0;
        for ((xi, m), lv) in x.iter().zip(mean).zip(log_var) {
            let d = xi - m;
            acc += LN_2PI + lv + d * d * (-lv).exp();
        }
        -0.5 * acc
    }

    /// Closed-form weighted mean/variance/weight updates from the posterior
    /// statistics of `data`.
    pub fn m_step(&self, stats: &[PosteriorStats], data: &[FeatureSequence]) -> Result<GmmUpdate> {
        if stats.len() != data.len() {
            return Err(Error::shape("one posterior per sequence is required"));
        }
        let (s_n, n, d) = (self.num_states, self.num_components, self.dim);
        let sn = s_n * n;
        for (st, seq) in stats.iter().zip(data) {
            if st.num_frames() != seq.rows() || st.num_states() != s_n || st.num_components != n {
                return Err(Error::shape("posterior statistics do not match the data/model"));
            }
        }

        // First pass: responsibility mass and weighted sums.
        let first: Vec<(Vec<f64>, Vec<f64>)> = par::map_indexed(data.len(), |m| {
            let (st, seq) = (&stats[m], &data[m]);
            let mut mass = vec![0.0; sn];
            let mut sum = vec![0.0; sn * d];
            for t in 0..seq.rows() {
                let x = seq.row(t);
                for (c, lg) in st.comp_gamma[t * sn..(t + 1) * sn].iter().enumerate() {
                    let w = lg.exp();
                    if w == 0.0 {
                        continue;
                    }
                    mass[c] += w;
                    for (acc, xi) in sum[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *acc += w * xi;
                    }
                }
            }
            (mass, sum)
        });
        let mut mass = vec![0.0; sn];
        let mut sum = vec![0.0; sn * d];
        for (ms, ss) in &first {
            mass.iter_mut().zip(ms).for_each(|(a, b)| *a += b);
            sum.iter_mut().zip(ss).for_each(|(a, b)| *a += b);
        }
        let mut means = self.means.clone();
        let mut starved = Vec::new();
        for c in 0..sn {
            if mass[c] < STARVED_MASS {
                starved.push((c / n, c % n));
                continue;
            }
            for j in 0..d {
                means[c * d + j] = sum[c * d + j] / mass[c];
            }
        }

        // Second pass: centered second moments.
        let second: Vec<Vec<f64>> = par::map_indexed(data.len(), |m| {
            let (st, seq) = (&stats[m], &data[m]);
            let mut sq = vec![0.0; sn * d];
            for t in 0..seq.rows() {
                let x = seq.row(t);
                for (c, lg) in st.comp_gamma[t * sn..(t + 1) * sn].iter().enumerate() {
                    let w = lg.exp();
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        let diff = x[j] - means[c * d + j];
                        sq[c * d + j] += w * diff * diff;
                    }
                }
            }
            sq
        });
        let mut sq = vec![0.0; sn * d];
        for part in &second {
            sq.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        let mut log_vars = self.log_vars.clone();
        for c in 0..sn {
            if mass[c] < STARVED_MASS {
                continue;
            }
            for j in 0..d {
                log_vars[c * d + j] = (sq[c * d + j] / mass[c]).max(VARIANCE_FLOOR).ln();
            }
        }

        let mut log_weights = self.log_weights.clone();
        for s in 0..s_n {
            let m = &mass[s * n..(s + 1) * n];
            let total: f64 = m.iter().sum();
            if total <= 0.0 {
                continue;
            }
            let w = &mut log_weights[s * n..(s + 1) * n];
            for (lw, mk) in w.iter_mut().zip(m) {
                *lw = mk.ln();
            }
            log_normalize(w);
        }

        Ok(GmmUpdate {
            emission: Self::new(s_n, n, d, log_weights, means, log_vars)?,
            starved,
        })
    }

    /// Draws a component from the state's weights, then a Gaussian frame.
    pub fn sample(&self, state: usize, rng: &mut RngStream) -> Vec<f64> {
        let k = rng.categorical_log(self.log_weights(state));
        self.mean(state, k)
            .iter()
            .zip(self.log_var(state, k))
            .map(|(m, lv)| m + (0.5 * lv).exp() * rng.normal())
            .collect()
    }
}

/// Result of [`GmmEmission::m_step`].
#[derive(Debug, Clone)]
pub struct GmmUpdate {
    pub emission: GmmEmission,
    /// `(state, component)` pairs that kept their previous parameters.
    pub starved: Vec<(usize, usize)>,
}

impl Emission for GmmEmission {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_components(&self) -> usize {
        self.num_components
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn component_log_joint(&self, state: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape(format!(
                "frame of dimension {} for a {}-dimensional GMM",
                x.len(),
                self.dim
            )));
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.log_weights[self.idx(state, k)] + self.component_log_pdf(state, k, x);
        }
        Ok(())
    }
}

/// `log Σ_k π_{s,k} N(x; μ_{s,k}, diag σ²_{s,k})`.
pub fn gmm_log_pdf(emis: &GmmEmission, state: usize, x: &[f64]) -> Result<f64> {
    let mut buf = vec![0.0; emis.num_components];
    emis.component_log_joint(state, x, &mut buf)?;
    Ok(log_sum_exp_unchecked(&buf))
}
