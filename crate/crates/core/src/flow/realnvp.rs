//! RealNVP: a stack of affine coupling layers with alternating halves.
//!
//! The stack is stored in normalizing order (data `x` to latent `z`). Each
//! layer keeps one block of coordinates (the conditioner) fixed and maps the
//! other block as `(y − t(c)) ⊙ exp(−s(c))`, contributing `−Σ s(c)` to the
//! log-determinant. `s` ends in `tanh`, so every log-scale lies in `(−1, 1)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::net::{Mlp, MlpCache, OutputActivation};
use crate::error::{Error, Result};
use crate::numerics::{std_normal_log_pdf, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NvpConfig {
    pub coupling_layers: usize,
    /// Hidden width of the `s`/`t` networks; `None` means `2·D`.
    pub hidden_width: Option<usize>,
}

impl Default for NvpConfig {
    fn default() -> Self {
        Self {
            coupling_layers: 4,
            hidden_width: None,
        }
    }
}

/// One affine coupling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    dim: usize,
    split: usize,
    /// Parity 0 conditions on `[0, d)`; parity 1 on `[d, D)`.
    parity: usize,
    s_net: Mlp,
    t_net: Mlp,
}

struct LayerCache {
    s: MlpCache,
    t: MlpCache,
}

impl CouplingLayer {
    pub fn new(dim: usize, parity: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let split = dim / 2;
        let mut layer = Self {
            dim,
            split,
            parity: parity % 2,
            // placeholders, sized below
            s_net: Mlp::new(0, 0, 0, OutputActivation::Tanh, false, false, rng),
            t_net: Mlp::new(0, 0, 0, OutputActivation::Identity, false, false, rng),
        };
        let (nc, nt) = (layer.cond().len(), layer.trans().len());
        layer.s_net = Mlp::new(nc, hidden, nt, OutputActivation::Tanh, false, false, rng);
        layer.t_net = Mlp::new(nc, hidden, nt, OutputActivation::Identity, false, false, rng);
        layer
    }

    pub fn parity(&self) -> usize {
        self.parity
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn s_net(&self) -> &Mlp {
        &self.s_net
    }

    pub fn t_net(&self) -> &Mlp {
        &self.t_net
    }

    fn cond(&self) -> Range<usize> {
        if self.parity == 0 {
            0..self.split
        } else {
            self.split..self.dim
        }
    }

    fn trans(&self) -> Range<usize> {
        if self.parity == 0 {
            self.split..self.dim
        } else {
            0..self.split
        }
    }

    fn num_params(&self) -> usize {
        self.s_net.num_params() + self.t_net.num_params()
    }

    /// Normalizing direction in place; returns the log-determinant.
    fn forward_in_place(&self, h: &mut [f64]) -> (f64, LayerCache) {
        let c = &h[self.cond()];
        let s = self.s_net.forward(c);
        let t = self.t_net.forward(c);
        let mut log_det = 0.0;
        for ((y, sv), tv) in h[self.trans()].iter_mut().zip(s.output()).zip(t.output()) {
            *y = (*y - tv) * (-sv).exp();
            log_det -= sv;
        }
        (log_det, LayerCache { s, t })
    }

    fn inverse_in_place(&self, h: &mut [f64]) {
        let c = &h[self.cond()];
        let s = self.s_net.forward(c);
        let t = self.t_net.forward(c);
        for ((y, sv), tv) in h[self.trans()].iter_mut().zip(s.output()).zip(t.output()) {
            *y = *y * sv.exp() + tv;
        }
    }

    /// `g` holds `∂L/∂output` on entry and `∂L/∂input` on exit. `output` is
    /// the layer's output (the conditioner block equals the input's).
    fn backward(
        &self,
        output: &[f64],
        cache: &LayerCache,
        log_det_weight: f64,
        g: &mut [f64],
        grad: &mut [f64],
    ) {
        let c = &output[self.cond()];
        let s = cache.s.output();
        let mut g_s = vec![0.0; s.len()];
        let mut g_t = vec![0.0; s.len()];
        for (i, j) in self.trans().enumerate() {
            let e = (-s[i]).exp();
            let gz = g[j];
            g_s[i] = -gz * output[j] - log_det_weight;
            g_t[i] = -gz * e;
            g[j] = gz * e;
        }
        let ns = self.s_net.num_params();
        let (gs_params, gt_params) = grad.split_at_mut(ns);
        let gc_s = self.s_net.backward(c, &cache.s, &g_s, gs_params);
        let gc_t = self.t_net.backward(c, &cache.t, &g_t, gt_params);
        for ((j, a), b) in self.cond().zip(gc_s).zip(gc_t) {
            g[j] += a + b;
        }
    }
}

/// RealNVP stack with alternating parity.
#[derive(Debug, Clone, PartialEq)]
pub struct NvpStack {
    dim: usize,
    config: NvpConfig,
    layers: Vec<CouplingLayer>,
}

impl NvpStack {
    /// Identity-initialized stack (zero output layers in every `s`/`t` net).
    pub fn new(dim: usize, config: &NvpConfig, rng: &mut RngStream) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("flow dimension must be positive"));
        }
        if config.coupling_layers == 0 || config.coupling_layers % 2 != 0 {
            return Err(Error::invalid(format!(
                "coupling layer count must be a positive even number (got {})",
                config.coupling_layers
            )));
        }
        let hidden = config.hidden_width.unwrap_or(2 * dim).max(1);
        let layers = (0..config.coupling_layers)
            .map(|l| CouplingLayer::new(dim, l % 2, hidden, rng))
            .collect();
        Ok(Self {
            dim,
            config: *config,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &NvpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(CouplingLayer::num_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            l.s_net.write_params(&mut out);
            l.t_net.write_params(&mut out);
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
        for l in &mut self.layers {
            at += l.s_net.read_params(&p[at..]);
            at += l.t_net.read_params(&p[at..]);
        }
        Ok(())
    }

    pub fn jitter_hidden(&mut self, std: f64, rng: &mut RngStream) {
        for l in &mut self.layers {
            l.s_net.jitter_hidden(std, rng);
            l.t_net.jitter_hidden(std, rng);
        }
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

    /// `z = f(x)` and `log |det ∂f/∂x|`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let mut h = x.to_vec();
        let mut log_det = 0.0;
        for (l, layer) in self.layers.iter().enumerate() {
            log_det += layer.forward_in_place(&mut h).0;
            if !h.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("RealNVP coupling layer {l} output")));
            }
        }
        Ok((h, log_det))
    }

    /// `x = g(z)`, the exact inverse of [`forward`](Self::forward).
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let mut h = z.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            layer.inverse_in_place(&mut h);
            if !h.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("RealNVP coupling layer {l} inverse")));
            }
        }
        Ok(h)
    }

    /// `log N(f(x); 0, I) + log |det ∂f/∂x|`.
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

    /// Adds the gradient of `weight · log_likelihood(x)` into `grad`; returns
    /// the (unweighted) log-likelihood.
    pub fn accumulate_gradient(&self, x: &[f64], weight: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_dim(x)?;
        if grad.len() != self.num_params() {
            return Err(Error::shape("gradient buffer length"));
        }
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let mut log_det = 0.0;
        for (l, layer) in self.layers.iter().enumerate() {
            let (ld, cache) = layer.forward_in_place(&mut h);
            if !h.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("RealNVP coupling layer {l} output")));
            }
            log_det += ld;
            outputs.push(h.clone());
            caches.push(cache);
        }
        let ll = std_normal_log_pdf(&h) + log_det;
        if weight == 0.0 {
            return Ok(ll);
        }
        let mut g: Vec<f64> = h.iter().map(|z| -weight * z).collect();
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.num_params();
                Some(start)
            })
            .collect();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let slice = &mut grad[offsets[l]..offsets[l] + layer.num_params()];
            layer.backward(&outputs[l], &caches[l], weight, &mut g, slice);
        }
        Ok(ll)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::oracle;

    fn random_stack(dim: usize, layers: usize, seed: u64, scale: f64) -> NvpStack {
        let mut rng = RngStream::new(seed);
        let cfg = NvpConfig {
            coupling_layers: layers,
            hidden_width: None,
        };
        let mut s = NvpStack::new(dim, &cfg, &mut rng).unwrap();
        let p: Vec<f64> = s.params().iter().map(|v| v + scale * rng.normal()).collect();
        s.set_params(&p).unwrap();
        s
    }

    #[test]
    fn identity_initialization() {
        let mut rng = RngStream::new(1);
        let s = NvpStack::new(5, &NvpConfig::default(), &mut rng).unwrap();
        let x = [0.3, -1.0, 2.0, 0.0, 4.5];
        let (z, ld) = s.forward(&x).unwrap();
        assert_eq!(z, x);
        assert_eq!(ld, 0.0);
        assert_eq!(s.inverse(&x).unwrap(), x);
        let s1 = NvpStack::new(1, &NvpConfig::default(), &mut rng).unwrap();
        assert!((s1.log_likelihood(&[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn rejects_odd_layer_count() {
        let mut rng = RngStream::new(1);
        let cfg = NvpConfig {
            coupling_layers: 3,
            hidden_width: None,
        };
        assert!(NvpStack::new(4, &cfg, &mut rng).is_err());
    }

    #[test]
    fn hand_evaluated_single_pair() {
        // D=2, two layers; set every net output via biases only.
        let mut rng = RngStream::new(2);
        let cfg = NvpConfig {
            coupling_layers: 2,
            hidden_width: Some(1),
        };
        let mut s = NvpStack::new(2, &cfg, &mut rng).unwrap();
        // each net: hidden (1x1 w, 1 b) then output (1x1 w, 1 b); zero all weights
        // and set output biases: layer0 s=a0 (pre-tanh), t=b0; layer1 s=a1, t=b1
        let (a0, b0, a1, b1) = (0.4f64, -0.7, -0.2, 1.1);
        let p = vec![0.0, 0.0, 0.0, a0, 0.0, 0.0, 0.0, b0, 0.0, 0.0, 0.0, a1, 0.0, 0.0, 0.0, b1];
        s.set_params(&p).unwrap();
        let x = [1.5, -0.5];
        let (z, ld) = s.forward(&x).unwrap();
        let z1 = (x[1] - b0) * (-a0.tanh()).exp();
        let z0 = (x[0] - b1) * (-a1.tanh()).exp();
        assert!((z[0] - z0).abs() < 1e-15 && (z[1] - z1).abs() < 1e-15);
        assert!((ld - (-a0.tanh() - a1.tanh())).abs() < 1e-15);
    }

    #[test]
    fn log_det_matches_numerical_jacobian() {
        for seed in 0..5 {
            let s = random_stack(6, 4, seed, 0.5);
            let mut rng = RngStream::new(100 + seed);
            let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let (_, ld) = s.forward(&x).unwrap();
            let num = oracle::numerical_log_abs_det(|v| s.forward(v).unwrap().0, &x, 1e-5);
            assert!(((ld - num) / ld.abs().max(1e-3)).abs() < 1e-4, "{ld} vs {num}");
            let inv = oracle::numerical_log_abs_det(|v| s.inverse(v).unwrap(), &s.forward(&x).unwrap().0, 1e-5);
            assert!((ld + inv).abs() < 1e-4 * ld.abs().max(1.0));
        }
    }

    #[test]
    fn round_trips() {
        let s = random_stack(39, 4, 9, 0.3);
        let mut rng = RngStream::new(10);
        for _ in 0..20 {
            let x: Vec<f64> = (0..39).map(|_| rng.normal()).collect();
            let back = s.inverse(&s.forward(&x).unwrap().0).unwrap();
            assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-9));
            let z: Vec<f64> = (0..39).map(|_| rng.normal()).collect();
            let again = s.forward(&s.inverse(&z).unwrap()).unwrap().0;
            assert!(z.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..3 {
            let s = random_stack(4, 4, 40 + seed, 0.5);
            let x = [0.5, -1.0, 0.25, 1.5];
            let grad = s.backward(&x, 1.0).unwrap();
            let err = grad_check(
                |p: &[f64]| {
                    let mut t = s.clone();
                    t.set_params(p).unwrap();
                    t.log_likelihood(&x).unwrap()
                },
                &s.params(),
                &grad,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn zero_weight_and_mode_stationarity() {
        let s = random_stack(4, 4, 3, 0.5);
        assert!(s.backward(&[0.1, 0.2, 0.3, 0.4], 0.0).unwrap().iter().all(|g| *g == 0.0));
        // identity stack at x = 0: every t-net output bias gradient vanishes
        let mut rng = RngStream::new(5);
        let id = NvpStack::new(4, &NvpConfig::default(), &mut rng).unwrap();
        let g = id.backward(&[0.0; 4], 1.0).unwrap();
        let mut at = 0;
        for l in id.layers() {
            at += l.s_net().num_params();
            let nt = l.t_net().num_params();
            let nb = l.t_net().outputs();
            assert!(g[at + nt - nb..at + nt].iter().all(|v| *v == 0.0));
            at += nt;
        }
    }
}
