//! Emissions whose mixture components are normalizing-flow densities.

use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig, FlowKind, GlowStack, NvpStack};
use crate::hmm::{Emission, PosteriorStats};
use crate::numerics::{log_add_exp, log_normalize, log_sum_exp_unchecked, RngStream};

/// Standard deviation of the Gaussian jitter added to hidden-layer weights
/// so that identically initialized components can separate.
pub const SYMMETRY_JITTER: f64 = 1e-2;

pub fn default_components(kind: FlowKind) -> usize {
    match kind {
        FlowKind::Nvp => 3,
        FlowKind::Glow => 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmmEmission {
    num_states: usize,
    num_components: usize,
    dim: usize,
    /// `S × N`
    log_weights: Vec<f64>,
    /// `S × N`, index `s·N + k`.
    flows: Vec<Flow>,
}

/// Result of [`NmmEmission::update_pi`].
#[derive(Debug, Clone, PartialEq)]
pub struct PiUpdate {
    pub log_weights: Vec<f64>,
    /// States without responsibility mass; their weights were kept.
    pub zero_mass_states: Vec<usize>,
}

impl NmmEmission {
    pub fn from_parts(num_states: usize, num_components: usize, log_weights: Vec<f64>, flows: Vec<Flow>) -> Result<Self> {
        if num_states == 0 || num_components == 0 {
            return Err(Error::invalid("NMM needs at least one state and component"));
        }
        let sn = num_states * num_components;
        if log_weights.len() != sn || flows.len() != sn {
            return Err(Error::shape("NMM weights/flows do not match S × N_mix"));
        }
        let dim = flows[0].dim();
        let kind = flows[0].kind();
        if flows.iter().any(|f| f.dim() != dim || f.kind() != kind) {
            return Err(Error::invalid("all component flows must share dimension and kind"));
        }
        check_simplex(&log_weights, num_components)?;
        Ok(Self {
            num_states,
            num_components,
            dim,
            log_weights,
            flows,
        })
    }

    /// Uniform weights and freshly initialized flows (identity couplings,
    /// jittered hidden weights). Glow actnorms still await data.
    pub fn new(
        num_states: usize,
        num_components: usize,
        dim: usize,
        config: &FlowConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let sn = num_states * num_components;
        let mut flows = Vec::with_capacity(sn);
        for _ in 0..sn {
            let mut f = config.build(dim, rng)?;
            f.jitter_hidden(SYMMETRY_JITTER, rng);
            flows.push(f);
        }
        let lw = -(num_components as f64).ln();
        Self::from_parts(num_states, num_components, vec![lw; sn], flows)
    }

    /// Every component is exactly the identity map, so each state density
    /// is the standard normal.
    pub fn identity(
        num_states: usize,
        num_components: usize,
        dim: usize,
        config: &FlowConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let sn = num_states * num_components;
        let mut flows = Vec::with_capacity(sn);
        for _ in 0..sn {
            let mut f = match config {
                FlowConfig::Nvp(c) => Flow::Nvp(NvpStack::new(dim, c, rng)?),
                FlowConfig::Glow(c) => Flow::Glow(GlowStack::identity(dim, c, rng)?),
            };
            f.jitter_hidden(SYMMETRY_JITTER, rng);
            flows.push(f);
        }
        let lw = -(num_components as f64).ln();
        Self::from_parts(num_states, num_components, vec![lw; sn], flows)
    }

    pub fn kind(&self) -> FlowKind {
        self.flows[0].kind()
    }

    pub fn log_weights(&self, state: usize) -> &[f64] {
        let n = self.num_components;
        &self.log_weights[state * n..(state + 1) * n]
    }

    pub fn all_log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn set_log_weights(&mut self, log_weights: Vec<f64>) -> Result<()> {
        if log_weights.len() != self.log_weights.len() {
            return Err(Error::shape("NMM weights do not match S × N_mix"));
        }
        check_simplex(&log_weights, self.num_components)?;
        self.log_weights = log_weights;
        Ok(())
    }

    pub fn flow(&self, state: usize, k: usize) -> &Flow {
        &self.flows[state * self.num_components + k]
    }

    pub fn flow_mut(&mut self, state: usize, k: usize) -> &mut Flow {
        &mut self.flows[state * self.num_components + k]
    }

    /// All flows, index `s·N + k`.
    pub fn flows(&self) -> &[Flow] {
        &self.flows
    }

    pub fn flows_mut(&mut self) -> &mut [Flow] {
        &mut self.flows
    }

    pub fn needs_data_init(&self) -> bool {
        self.flows.iter().any(Flow::needs_data_init)
    }

    /// Data-dependent actnorm initialization; `frames[s]` seeds every
    /// component of state `s`. No-op for RealNVP.
    pub fn init_actnorm(&mut self, frames: &[Vec<Vec<f64>>]) -> Result<()> {
        if frames.len() != self.num_states {
            return Err(Error::shape("one frame batch per state is required"));
        }
        let n = self.num_components;
        for (i, f) in self.flows.iter_mut().enumerate() {
            if let Flow::Glow(g) = f {
                g.init_actnorm(&frames[i / n])?;
            }
        }
        Ok(())
    }

    /// `log p(k | x, s)` for every component.
    pub fn component_resp(&self, state: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_components];
        self.component_log_joint(state, x, &mut out)?;
        let total = log_sum_exp_unchecked(&out);
        out.iter_mut().for_each(|v| *v -= total);
        Ok(out)
    }

    /// Closed-form mixture-weight update from component posteriors.
    pub fn update_pi(&self, stats: &[PosteriorStats]) -> Result<PiUpdate> {
        let (s_n, n) = (self.num_states, self.num_components);
        let mut acc = vec![f64::NEG_INFINITY; s_n * n];
        for st in stats {
            if st.num_states() != s_n || st.num_components != n {
                return Err(Error::shape("posterior statistics do not match the emission"));
            }
            for t in 0..st.num_frames() {
                for (a, g) in acc.iter_mut().zip(&st.comp_gamma[t * s_n * n..(t + 1) * s_n * n]) {
                    *a = log_add_exp(*a, *g);
                }
            }
        }
        let mut log_weights = self.log_weights.clone();
        let mut zero_mass_states = Vec::new();
        for s in 0..s_n {
            let row = &acc[s * n..(s + 1) * n];
            if log_sum_exp_unchecked(row) == f64::NEG_INFINITY {
                zero_mass_states.push(s);
                continue;
            }
            let w = &mut log_weights[s * n..(s + 1) * n];
            w.copy_from_slice(row);
            log_normalize(w);
        }
        Ok(PiUpdate {
            log_weights,
            zero_mass_states,
        })
    }

    /// `k ~ π_s`, `z ~ N(0, I)`, then the generative map of component `k`.
    pub fn sample(&self, state: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        let k = rng.categorical_log(self.log_weights(state));
        let z: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
        self.flow(state, k).inverse(&z)
    }
}

impl Emission for NmmEmission {
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
        for (k, o) in out.iter_mut().enumerate() {
            let ll = self.flow(state, k).log_likelihood(x).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("state {state}, component {k}: {what}")),
                other => other,
            })?;
            *o = self.log_weights[state * self.num_components + k] + ll;
        }
        Ok(())
    }
}

fn check_simplex(log_weights: &[f64], n: usize) -> Result<()> {
    for (s, w) in log_weights.chunks(n).enumerate() {
        let total: f64 = w.iter().map(|v| v.exp()).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("state {s} mixture weights sum to {total}")));
        }
    }
    Ok(())
}

/// `log Σ_k π_{s,k} p_{s,k}(x)`.
pub fn nmm_log_pdf(emis: &NmmEmission, state: usize, x: &[f64]) -> Result<f64> {
    emis.log_pdf(state, x)
}
