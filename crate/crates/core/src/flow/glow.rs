//! Glow flow steps on feature vectors (D channels, one spatial position).
//!
//! Normalizing direction of one step:
//!
//! ```text
//! a = (x − μ) ⊙ exp(σ*)              log-det Σ σ*
//! b = W a                            log-det ln|det W|
//! (log σ, m) = N(b_b)
//! z_a = (b_a + m) ⊙ exp(log σ)       log-det Σ log σ
//! z_b = b_b
//! ```
//!
//! `b_a` is the first `⌈D/2⌉` coordinates. `N` is a one-hidden-layer tanh
//! network with weight-normalized linear maps whose hidden activations are
//! divided by their Euclidean norm.

use serde::{Deserialize, Serialize};

use super::net::{Mlp, MlpCache, OutputActivation};
use crate::error::{Error, Result};
use crate::numerics::{std_normal_log_pdf, Matrix, RngStream};

/// Smallest `|det W|` accepted before the convolution counts as singular.
pub const MIN_ABS_DET: f64 = 1e-12;

const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlowConfig {
    pub flow_steps: usize,
    /// Hidden width of the coupling network; `None` means `2·D`.
    pub hidden_width: Option<usize>,
}

impl Default for GlowConfig {
    fn default() -> Self {
        Self {
            flow_steps: 12,
            hidden_width: None,
        }
    }
}

/// Per-channel affine normalization with data-dependent initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    pub bias: Vec<f64>,
    pub log_scale: Vec<f64>,
    initialized: bool,
}

impl ActNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            bias: vec![0.0; dim],
            log_scale: vec![0.0; dim],
            initialized: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Sets the bias to the batch mean and the log-scale to minus the log of
    /// the (population) batch standard deviation, floored at `1e-6`.
    pub fn init(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if self.initialized {
            return Err(Error::AlreadyInitialized);
        }
        if batch.is_empty() {
            return Err(Error::Empty("actnorm initialization batch"));
        }
        let n = batch.len() as f64;
        let d = self.bias.len();
        let mut mean = vec![0.0; d];
        for x in batch {
            if x.len() != d {
                return Err(Error::shape("actnorm batch dimension"));
            }
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for x in batch {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        self.log_scale = var.iter().map(|v| -(v / n).sqrt().max(STD_FLOOR).ln()).collect();
        self.bias = mean;
        self.initialized = true;
        Ok(())
    }

    /// Marks the layer as initialized at its current (identity) values.
    pub fn assume_initialized(&mut self) {
        self.initialized = true;
    }

    pub(crate) fn set_initialized(&mut self, flag: bool) {
        self.initialized = flag;
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.bias)
            .zip(&self.log_scale)
            .map(|((v, m), s)| (v - m) * s.exp())
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.bias)
            .zip(&self.log_scale)
            .map(|((v, m), s)| v * (-s).exp() + m)
            .collect()
    }

    pub fn log_det(&self) -> f64 {
        self.log_scale.iter().sum()
    }
}

/// Invertible 1×1 convolution: a dense `D × D` mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct InvConv {
    weight: Matrix,
    inverse: Option<Matrix>,
    log_abs_det: f64,
}

impl InvConv {
    pub fn new(weight: Matrix) -> Result<Self> {
        let mut conv = Self {
            weight,
            inverse: None,
            log_abs_det: f64::NEG_INFINITY,
        };
        conv.refresh()?;
        Ok(conv)
    }

    fn refresh(&mut self) -> Result<()> {
        let lu = self.weight.lu()?;
        self.log_abs_det = lu.log_abs_det();
        self.inverse = if self.is_singular() {
            None
        } else {
            Some(lu.inverse()?)
        };
        Ok(())
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_abs_det
    }

    pub fn is_singular(&self) -> bool {
        !(self.log_abs_det >= MIN_ABS_DET.ln())
    }

    fn inverse_matrix(&self, step: usize) -> Result<&Matrix> {
        self.inverse
            .as_ref()
            .ok_or_else(|| Error::Singular(format!("1x1 convolution of flow step {step}")))
    }
}

/// One flow step: actnorm, 1×1 convolution, affine coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct GlowStep {
    pub actnorm: ActNorm,
    pub invconv: InvConv,
    coupling: Mlp,
    dim: usize,
    split: usize,
}

struct StepCache {
    input: Vec<f64>,
    normed: Vec<f64>,
    mixed: Vec<f64>,
    net: MlpCache,
    output: Vec<f64>,
}

impl GlowStep {
    fn new(dim: usize, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        let split = dim.div_ceil(2);
        let coupling = Mlp::new(dim - split, hidden, 2 * split, OutputActivation::Identity, true, true, rng);
        Ok(Self {
            actnorm: ActNorm::new(dim),
            invconv: InvConv::new(Matrix::random_rotation(dim, rng))?,
            coupling,
            dim,
            split,
        })
    }

    pub fn coupling_net(&self) -> &Mlp {
        &self.coupling
    }

    fn num_params(&self) -> usize {
        2 * self.dim + self.dim * self.dim + self.coupling.num_params()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.actnorm.bias);
        out.extend_from_slice(&self.actnorm.log_scale);
        out.extend_from_slice(self.invconv.weight.data());
        self.coupling.write_params(out);
    }

    fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let d = self.dim;
        self.actnorm.bias.copy_from_slice(&src[..d]);
        self.actnorm.log_scale.copy_from_slice(&src[d..2 * d]);
        self.invconv
            .weight
            .data_mut()
            .copy_from_slice(&src[2 * d..2 * d + d * d]);
        self.invconv.refresh()?;
        let at = 2 * d + d * d;
        Ok(at + self.coupling.read_params(&src[at..]))
    }

    fn forward(&self, index: usize, x: &[f64]) -> Result<(f64, StepCache)> {
        if !self.actnorm.initialized {
            return Err(Error::NotInitialized { step: index });
        }
        if self.invconv.is_singular() {
            return Err(Error::Singular(format!("1x1 convolution of flow step {index}")));
        }
        let normed = self.actnorm.forward(x);
        let mut mixed = vec![0.0; self.dim];
        self.invconv.weight.mul_vec_into(&normed, &mut mixed);
        let net = self.coupling.forward(&mixed[self.split..]);
        let (log_sigma, shift) = net.output().split_at(self.split);
        let mut output = mixed.clone();
        let mut coupling_log_det = 0.0;
        for i in 0..self.split {
            output[i] = (mixed[i] + shift[i]) * log_sigma[i].exp();
            coupling_log_det += log_sigma[i];
        }
        if !output.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("Glow flow step {index} output")));
        }
        let log_det = self.actnorm.log_det() + self.invconv.log_abs_det + coupling_log_det;
        Ok((
            log_det,
            StepCache {
                input: x.to_vec(),
                normed,
                mixed,
                net,
                output,
            },
        ))
    }

    fn inverse(&self, index: usize, z: &[f64]) -> Result<Vec<f64>> {
        let inv = self.invconv.inverse_matrix(index)?;
        let net = self.coupling.forward(&z[self.split..]);
        let (log_sigma, shift) = net.output().split_at(self.split);
        let mut mixed = z.to_vec();
        for i in 0..self.split {
            mixed[i] = z[i] * (-log_sigma[i]).exp() - shift[i];
        }
        let mut normed = vec![0.0; self.dim];
        inv.mul_vec_into(&mixed, &mut normed);
        Ok(self.actnorm.inverse(&normed))
    }

    /// `g`: `∂L/∂output` in, `∂L/∂input` out.
    fn backward(&self, index: usize, cache: &StepCache, w: f64, g: &mut Vec<f64>, grad: &mut [f64]) -> Result<()> {
        let d = self.dim;
        let split = self.split;
        // coupling
        let log_sigma = &cache.net.output()[..split];
        let mut g_net = vec![0.0; 2 * split];
        let mut g_mixed = g.clone();
        for i in 0..split {
            let sigma = log_sigma[i].exp();
            g_mixed[i] = g[i] * sigma;
            g_net[split + i] = g[i] * sigma;
            g_net[i] = g[i] * cache.output[i] + w;
        }
        let net_off = 2 * d + d * d;
        let g_cond = self
            .coupling
            .backward(&cache.mixed[split..], &cache.net, &g_net, &mut grad[net_off..]);
        for (i, v) in g_cond.into_iter().enumerate() {
            g_mixed[split + i] += v;
        }
        // 1x1 convolution: ∂W = g aᵀ + w W⁻ᵀ
        let inv = self.invconv.inverse_matrix(index)?;
        let w_grad = &mut grad[2 * d..2 * d + d * d];
        for r in 0..d {
            for c in 0..d {
                w_grad[r * d + c] += g_mixed[r] * cache.normed[c] + w * inv[(c, r)];
            }
        }
        let mut g_normed = vec![0.0; d];
        self.invconv
            .weight
            .mul_vec_transposed_into(&g_mixed, &mut g_normed);
        // actnorm
        for i in 0..d {
            let e = self.actnorm.log_scale[i].exp();
            grad[i] += -g_normed[i] * e;
            grad[d + i] += g_normed[i] * cache.normed[i] + w;
            g[i] = g_normed[i] * e;
        }
        debug_assert_eq!(cache.input.len(), d);
        Ok(())
    }
}

/// Single-scale Glow with `K` flow steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GlowStack {
    dim: usize,
    config: GlowConfig,
    steps: Vec<GlowStep>,
}

impl GlowStack {
    /// Random-rotation convolutions, zero-output coupling nets, and
    /// uninitialized actnorms (identity parameters).
    pub fn new(dim: usize, config: &GlowConfig, rng: &mut RngStream) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("flow dimension must be positive"));
        }
        if config.flow_steps == 0 {
            return Err(Error::invalid("Glow needs at least one flow step"));
        }
        let hidden = config.hidden_width.unwrap_or(2 * dim).max(1);
        let steps = (0..config.flow_steps)
            .map(|_| GlowStep::new(dim, hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            dim,
            config: *config,
            steps,
        })
    }

    /// Like [`new`](Self::new) but with identity convolutions and actnorms
    /// marked initialized: the whole stack is the identity map.
    pub fn identity(dim: usize, config: &GlowConfig, rng: &mut RngStream) -> Result<Self> {
        let mut s = Self::new(dim, config, rng)?;
        for step in &mut s.steps {
            step.invconv = InvConv::new(Matrix::identity(dim))?;
            step.actnorm.assume_initialized();
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &GlowConfig {
        &self.config
    }

    pub fn steps(&self) -> &[GlowStep] {
        &self.steps
    }

    pub fn steps_mut(&mut self) -> &mut [GlowStep] {
        &mut self.steps
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.steps.iter().all(|s| s.actnorm.initialized)
    }

    pub(crate) fn set_actnorm_flags(&mut self, flag: bool) {
        self.steps.iter_mut().for_each(|s| s.actnorm.set_initialized(flag));
    }

    /// Data-dependent initialization: each step's actnorm is fitted to the
    /// batch as transformed by the steps before it.
    pub fn init_actnorm(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if self.steps.iter().any(|s| s.actnorm.initialized) {
            return Err(Error::AlreadyInitialized);
        }
        let mut h: Vec<Vec<f64>> = batch.to_vec();
        for i in 0..self.steps.len() {
            self.steps[i].actnorm.init(&h)?;
            h = h
                .iter()
                .map(|x| self.steps[i].forward(i, x).map(|(_, c)| c.output))
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.steps.iter().map(GlowStep::num_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for s in &self.steps {
            s.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} parameters for a stack with {}",
                p.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for s in &mut self.steps {
            at += s.read_params(&p[at..])?;
        }
        Ok(())
    }

    pub fn jitter_hidden(&mut self, std: f64, rng: &mut RngStream) {
        for s in &mut self.steps {
            s.coupling.jitter_hidden(std, rng);
        }
    }

    /// Smallest `|det W|` over all steps.
    pub fn min_abs_det(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.invconv.log_abs_det.exp())
            .fold(f64::INFINITY, f64::min)
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape(format!(
                "vector of length {} for a {}-dimensional flow",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let mut h = x.to_vec();
        let mut log_det = 0.0;
        for (i, s) in self.steps.iter().enumerate() {
            let (ld, cache) = s.forward(i, &h)?;
            log_det += ld;
            h = cache.output;
        }
        Ok((h, log_det))
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let mut h = z.to_vec();
        for (i, s) in self.steps.iter().enumerate().rev() {
            h = s.inverse(i, &h)?;
            if !h.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("Glow flow step {i} inverse")));
            }
        }
        Ok(h)
    }

    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let (z, log_det) = self.forward(x)?;
        Ok(std_normal_log_pdf(&z) + log_det)
    }

    /// Gradient of `weight · log_likelihood(x)` with respect to [`params`](Self::params).
    pub fn backward(&self, x: &[f64], weight: f64) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.num_params()];
        self.accumulate_gradient(x, weight, &mut grad)?;
        Ok(grad)
    }

    pub fn accumulate_gradient(&self, x: &[f64], weight: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_dim(x)?;
        if grad.len() != self.num_params() {
            return Err(Error::shape("gradient buffer length"));
        }
        let mut caches = Vec::with_capacity(self.steps.len());
        let mut h = x.to_vec();
        let mut log_det = 0.0;
        for (i, s) in self.steps.iter().enumerate() {
            let (ld, cache) = s.forward(i, &h)?;
            log_det += ld;
            h = cache.output.clone();
            caches.push(cache);
        }
        let ll = std_normal_log_pdf(&h) + log_det;
        if weight == 0.0 {
            return Ok(ll);
        }
        let mut g: Vec<f64> = h.iter().map(|z| -weight * z).collect();
        let mut end = grad.len();
        for i in (0..self.steps.len()).rev() {
            let n = self.steps[i].num_params();
            self.steps[i].backward(i, &caches[i], weight, &mut g, &mut grad[end - n..end])?;
            end -= n;
        }
        Ok(ll)
    }
}
