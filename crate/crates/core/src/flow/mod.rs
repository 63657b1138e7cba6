//! Normalizing flows mapping feature vectors to a standard normal latent.

pub mod glow;
pub mod net;
pub mod realnvp;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::RngStream;
pub use glow::{GlowConfig, GlowStack};
pub use realnvp::{NvpConfig, NvpStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FlowKind {
    Nvp,
    Glow,
}

impl FlowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowKind::Nvp => "NVP",
            FlowKind::Glow => "GLOW",
        }
    }
}

/// Architecture hyperparameters for either flow family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "UPPERCASE", deny_unknown_fields)]
pub enum FlowConfig {
    Nvp(NvpConfig),
    Glow(GlowConfig),
}

impl FlowConfig {
    pub fn kind(&self) -> FlowKind {
        match self {
            FlowConfig::Nvp(_) => FlowKind::Nvp,
            FlowConfig::Glow(_) => FlowKind::Glow,
        }
    }

    pub fn default_for(kind: FlowKind) -> Self {
        match kind {
            FlowKind::Nvp => FlowConfig::Nvp(NvpConfig::default()),
            FlowKind::Glow => FlowConfig::Glow(GlowConfig::default()),
        }
    }

    pub fn build(&self, dim: usize, rng: &mut RngStream) -> Result<Flow> {
        Ok(match self {
            FlowConfig::Nvp(c) => Flow::Nvp(NvpStack::new(dim, c, rng)?),
            FlowConfig::Glow(c) => Flow::Glow(GlowStack::new(dim, c, rng)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Flow {
    Nvp(NvpStack),
    Glow(GlowStack),
}

macro_rules! dispatch {
    ($self:expr, $f:ident => $body:expr) => {
        match $self {
            Flow::Nvp($f) => $body,
            Flow::Glow($f) => $body,
        }
    };
}

impl Flow {
    pub fn kind(&self) -> FlowKind {
        match self {
            Flow::Nvp(_) => FlowKind::Nvp,
            Flow::Glow(_) => FlowKind::Glow,
        }
    }

    pub fn dim(&self) -> usize {
        dispatch!(self, f => f.dim())
    }

    pub fn config(&self) -> FlowConfig {
        match self {
            Flow::Nvp(f) => FlowConfig::Nvp(*f.config()),
            Flow::Glow(f) => FlowConfig::Glow(*f.config()),
        }
    }

    pub fn num_params(&self) -> usize {
        dispatch!(self, f => f.num_params())
    }

    pub fn params(&self) -> Vec<f64> {
        dispatch!(self, f => f.params())
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        dispatch!(self, f => f.set_params(p))
    }

    pub fn jitter_hidden(&mut self, std: f64, rng: &mut RngStream) {
        dispatch!(self, f => f.jitter_hidden(std, rng))
    }

    /// Normalizing direction: returns the latent and `ln |det J|`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        dispatch!(self, f => f.forward(x))
    }

    /// Generative direction.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        dispatch!(self, f => f.inverse(z))
    }

    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        dispatch!(self, f => f.log_likelihood(x))
    }

    /// Adds `weight · ∇ log p(x)` into `grad`; returns `log p(x)`.
    pub fn accumulate_gradient(&self, x: &[f64], weight: f64, grad: &mut [f64]) -> Result<f64> {
        dispatch!(self, f => f.accumulate_gradient(x, weight, grad))
    }

    /// Whether data-dependent initialization is still pending.
    pub fn needs_data_init(&self) -> bool {
        match self {
            Flow::Nvp(_) => false,
            Flow::Glow(g) => !g.actnorm_initialized(),
        }
    }

    pub(crate) fn set_data_initialized(&mut self, flag: bool) {
        if let Flow::Glow(g) = self {
            g.set_actnorm_flags(flag);
        }
    }
}
