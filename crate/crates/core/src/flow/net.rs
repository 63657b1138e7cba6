//! Shallow feed-forward networks used inside coupling layers, with
//! hand-written reverse-mode gradients.

use crate::numerics::RngStream;

/// Small constant inside the hidden-activation norm, keeps the map smooth
/// near the origin.
const NORM_EPS: f64 = 1e-6;

/// Dense affine map, optionally weight-normalized (`W_i = g_i · v_i / ‖v_i‖`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`; the direction `v` when weight-normalized.
    weight: Vec<f64>,
    gain: Option<Vec<f64>>,
    bias: Vec<f64>,
}

impl Linear {
    /// Uniform fan-in initialization in `±1/√fan_in`, zero bias.
    pub fn uniform(inputs: usize, outputs: usize, weight_norm: bool, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight: Vec<f64> = (0..inputs * outputs)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let bias = (0..outputs).map(|_| rng.uniform_range(-bound, bound)).collect();
        let mut layer = Self {
            inputs,
            outputs,
            weight,
            gain: None,
            bias,
        };
        if weight_norm {
            let norms = layer.row_norms();
            layer.gain = Some(norms);
        }
        layer
    }

    /// Output exactly zero. With weight normalization the direction stays
    /// random and the gain is zero, so gradients still reach the gain.
    pub fn zeros(inputs: usize, outputs: usize, weight_norm: bool, rng: &mut RngStream) -> Self {
        if weight_norm {
            let mut layer = Self::uniform(inputs, outputs, true, rng);
            layer.gain = Some(vec![0.0; outputs]);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
            layer
        } else {
            Self {
                inputs,
                outputs,
                weight: vec![0.0; inputs * outputs],
                gain: None,
                bias: vec![0.0; outputs],
            }
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn is_weight_normalized(&self) -> bool {
        self.gain.is_some()
    }

    fn row_norms(&self) -> Vec<f64> {
        (0..self.outputs)
            .map(|i| {
                let row = &self.weight[i * self.inputs..(i + 1) * self.inputs];
                row.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect()
    }

    /// The matrix actually applied to inputs.
    pub fn effective_weight(&self) -> Vec<f64> {
        match &self.gain {
            None => self.weight.clone(),
            Some(gain) => {
                let norms = self.row_norms();
                let mut w = self.weight.clone();
                for i in 0..self.outputs {
                    let scale = if norms[i] > 0.0 { gain[i] / norms[i] } else { 0.0 };
                    w[i * self.inputs..(i + 1) * self.inputs]
                        .iter_mut()
                        .for_each(|v| *v *= scale);
                }
                w
            }
        }
    }

    pub fn gain(&self) -> Option<&[f64]> {
        self.gain.as_deref()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.gain.as_ref().map_or(0, Vec::len) + self.bias.len()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        if let Some(g) = &self.gain {
            out.extend_from_slice(g);
        }
        out.extend_from_slice(&self.bias);
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        let n = self.weight.len();
        self.weight.copy_from_slice(&src[at..at + n]);
        at += n;
        if let Some(g) = &mut self.gain {
            let n = g.len();
            g.copy_from_slice(&src[at..at + n]);
            at += n;
        }
        let n = self.bias.len();
        self.bias.copy_from_slice(&src[at..at + n]);
        at + n
    }

    /// Adds Gaussian noise of standard deviation `std` to the weights.
    pub fn jitter(&mut self, std: f64, rng: &mut RngStream) {
        self.weight.iter_mut().for_each(|w| *w += std * rng.normal());
    }

    fn apply(&self, w_eff: &[f64], x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &w_eff[i * self.inputs..(i + 1) * self.inputs];
            *o = self.bias[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grad` (laid out as
    /// [`write_params`](Self::write_params)) and writes `∂L/∂x` into `gx`.
    fn backward(&self, w_eff: &[f64], x: &[f64], gy: &[f64], grad: &mut [f64], gx: &mut [f64]) {
        let (ni, no) = (self.inputs, self.outputs);
        gx.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..no {
            let row = &w_eff[i * ni..(i + 1) * ni];
            for j in 0..ni {
                gx[j] += row[j] * gy[i];
            }
        }
        let nw = self.weight.len();
        match &self.gain {
            None => {
                for i in 0..no {
                    for j in 0..ni {
                        grad[i * ni + j] += gy[i] * x[j];
                    }
                }
            }
            Some(gain) => {
                // G = gy xᵀ; ∂g_i = G_i·v̂_i; ∂v_i = (g_i/‖v_i‖)(G_i − (G_i·v̂_i) v̂_i)
                for i in 0..no {
                    let v = &self.weight[i * ni..(i + 1) * ni];
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let proj: f64 = v.iter().zip(x).map(|(a, b)| a / norm * gy[i] * b).sum();
                    grad[nw + i] += proj;
                    let scale = gain[i] / norm;
                    for j in 0..ni {
                        let gij = gy[i] * x[j];
                        grad[i * ni + j] += scale * (gij - proj * v[j] / norm);
                    }
                }
            }
        }
        let off = nw + self.gain.as_ref().map_or(0, Vec::len);
        for i in 0..no {
            grad[off + i] += gy[i];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Tanh,
    Identity,
}

/// `out = act(W₂ · h + b₂)`, `h = tanh(W₁ x + b₁)`, with `h` optionally
/// divided by its Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    hidden: Linear,
    output: Linear,
    activation: OutputActivation,
    normalize_hidden: bool,
}

/// Intermediate values kept by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    w1: Vec<f64>,
    w2: Vec<f64>,
    h: Vec<f64>,
    h_norm: f64,
    hn: Vec<f64>,
    out: Vec<f64>,
}

impl Mlp {
    /// Hidden layer uniformly initialized, output layer zero (the net starts
    /// by emitting exactly zero).
    pub fn new(
        inputs: usize,
        hidden: usize,
        outputs: usize,
        activation: OutputActivation,
        weight_norm: bool,
        normalize_hidden: bool,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            hidden: Linear::uniform(inputs, hidden, weight_norm, rng),
            output: Linear::zeros(hidden, outputs, weight_norm, rng),
            activation,
            normalize_hidden,
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.output.outputs()
    }

    pub fn hidden_layer(&self) -> &Linear {
        &self.hidden
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }

    pub fn num_params(&self) -> usize {
        self.hidden.num_params() + self.output.num_params()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        self.hidden.write_params(out);
        self.output.write_params(out);
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let n = self.hidden.read_params(src);
        n + self.output.read_params(&src[n..])
    }

    pub fn jitter_hidden(&mut self, std: f64, rng: &mut RngStream) {
        self.hidden.jitter(std, rng);
    }

    pub fn forward(&self, x: &[f64]) -> MlpCache {
        let w1 = self.hidden.effective_weight();
        let w2 = self.output.effective_weight();
        let mut h = vec![0.0; self.hidden.outputs()];
        self.hidden.apply(&w1, x, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let (hn, h_norm) = if self.normalize_hidden {
            let r = (h.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            (h.iter().map(|v| v / r).collect(), r)
        } else {
            (h.clone(), 1.0)
        };
        let mut out = vec![0.0; self.output.outputs()];
        self.output.apply(&w2, &hn, &mut out);
        if self.activation == OutputActivation::Tanh {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        MlpCache {
            w1,
            w2,
            h,
            h_norm,
            hn,
            out,
        }
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], cache: &MlpCache, g_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut g_pre2: Vec<f64> = g_out.to_vec();
        if self.activation == OutputActivation::Tanh {
            for (g, o) in g_pre2.iter_mut().zip(&cache.out) {
                *g *= 1.0 - o * o;
            }
        }
        let n1 = self.hidden.num_params();
        let (g_hidden_params, g_out_params) = grad.split_at_mut(n1);
        let mut g_hn = vec![0.0; cache.hn.len()];
        self.output
            .backward(&cache.w2, &cache.hn, &g_pre2, g_out_params, &mut g_hn);
        let mut g_h = if self.normalize_hidden {
            let r = cache.h_norm;
            let hg: f64 = cache.h.iter().zip(&g_hn).map(|(a, b)| a * b).sum();
            cache
                .h
                .iter()
                .zip(&g_hn)
                .map(|(h, g)| g / r - h * hg / (r * r * r))
                .collect()
        } else {
            g_hn
        };
        for (g, h) in g_h.iter_mut().zip(&cache.h) {
            *g *= 1.0 - h * h;
        }
        let mut gx = vec![0.0; x.len()];
        self.hidden
            .backward(&cache.w1, x, &g_h, g_hidden_params, &mut gx);
        gx
    }
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn perturbed(net: &Mlp, rng: &mut RngStream) -> Mlp {
        let mut p = Vec::new();
        net.write_params(&mut p);
        p.iter_mut().for_each(|v| *v += 0.5 * rng.normal());
        let mut out = net.clone();
        out.read_params(&p);
        out
    }

    fn check_net(weight_norm: bool, normalize_hidden: bool, act: OutputActivation) {
        let mut rng = RngStream::new(4);
        let base = Mlp::new(3, 5, 2, act, weight_norm, normalize_hidden, &mut rng);
        let net = perturbed(&base, &mut rng);
        let x = [0.3, -1.2, 0.8];
        let coeff = [0.7, -1.3];
        let loss = |n: &Mlp, x: &[f64]| -> f64 {
            n.forward(x).output().iter().zip(&coeff).map(|(a, b)| a * b).sum()
        };
        let mut p = Vec::new();
        net.write_params(&mut p);
        let cache = net.forward(&x);
        let mut grad = vec![0.0; net.num_params()];
        let gx = net.backward(&x, &cache, &coeff, &mut grad);
        let err = grad_check(
            |q: &[f64]| {
                let mut n = net.clone();
                n.read_params(q);
                loss(&n, &x)
            },
            &p,
            &grad,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "param grad err {err}");
        let err_x = grad_check(|q: &[f64]| loss(&net, q), &x, &gx, 1e-6).unwrap();
        assert!(err_x < 1e-7, "input grad err {err_x}");
    }

    #[test]
    fn gradients_plain() {
        check_net(false, false, OutputActivation::Tanh);
        check_net(false, false, OutputActivation::Identity);
    }

    #[test]
    fn gradients_weight_norm_and_hidden_norm() {
        check_net(true, true, OutputActivation::Identity);
        check_net(true, false, OutputActivation::Tanh);
    }

    #[test]
    fn zero_output_layer_emits_zero() {
        let mut rng = RngStream::new(8);
        for wn in [false, true] {
            let net = Mlp::new(4, 8, 3, OutputActivation::Identity, wn, wn, &mut rng);
            assert!(net.forward(&[1.0, 2.0, -3.0, 0.5]).output().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn weight_norm_rows_have_gain_norm() {
        let mut rng = RngStream::new(12);
        let mut lin = Linear::uniform(6, 4, true, &mut rng);
        let mut p = Vec::new();
        lin.write_params(&mut p);
        p.iter_mut().for_each(|v| *v = rng.normal());
        lin.read_params(&p);
        let w = lin.effective_weight();
        for (i, g) in lin.gain().unwrap().iter().enumerate() {
            let norm: f64 = w[i * 6..(i + 1) * 6].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - g.abs()).abs() < 1e-12);
        }
    }
}
