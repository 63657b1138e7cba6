//! A complete HMM: Markov chain plus one of the emission families.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowKind};
use crate::gmm::{GmmEmission, VARIANCE_FLOOR};
use crate::hmm::{self, Emission, FeatureSequence, MarkovChain, PosteriorStats};
use crate::nmm::NmmEmission;
use crate::numerics::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModelKind {
    Gmm,
    Nvp,
    Glow,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gmm => "GMM",
            ModelKind::Nvp => "NVP",
            ModelKind::Glow => "GLOW",
        }
    }

    pub fn flow_kind(self) -> Option<FlowKind> {
        match self {
            ModelKind::Gmm => None,
            ModelKind::Nvp => Some(FlowKind::Nvp),
            ModelKind::Glow => Some(FlowKind::Glow),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gmm" => Ok(ModelKind::Gmm),
            "nvp" => Ok(ModelKind::Nvp),
            "glow" => Ok(ModelKind::Glow),
            other => Err(Error::invalid(format!("unknown model kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture of a model before it has seen data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub states: usize,
    pub components: usize,
    /// Required for flow models, ignored for GMMs.
    pub flow: Option<FlowConfig>,
}

impl ModelSpec {
    pub fn gmm(states: usize, components: usize) -> Self {
        Self {
            kind: ModelKind::Gmm,
            states,
            components,
            flow: None,
        }
    }

    pub fn flow(states: usize, components: usize, flow: FlowConfig) -> Self {
        let kind = match flow.kind() {
            FlowKind::Nvp => ModelKind::Nvp,
            FlowKind::Glow => ModelKind::Glow,
        };
        Self {
            kind,
            states,
            components,
            flow: Some(flow),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmissionModel {
    Gmm(GmmEmission),
    Nmm(NmmEmission),
}

macro_rules! dispatch {
    ($self:expr, $e:ident => $body:expr) => {
        match $self {
            EmissionModel::Gmm($e) => $body,
            EmissionModel::Nmm($e) => $body,
        }
    };
}

impl Emission for EmissionModel {
    fn num_states(&self) -> usize {
        dispatch!(self, e => e.num_states())
    }

    fn num_components(&self) -> usize {
        dispatch!(self, e => e.num_components())
    }

    fn dim(&self) -> usize {
        dispatch!(self, e => e.dim())
    }

    fn component_log_joint(&self, state: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        dispatch!(self, e => e.component_log_joint(state, x, out))
    }
}

impl EmissionModel {
    pub fn sample(&self, state: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        match self {
            EmissionModel::Gmm(g) => Ok(g.sample(state, rng)),
            EmissionModel::Nmm(n) => n.sample(state, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    pub chain: MarkovChain,
    pub emission: EmissionModel,
}

impl HmmModel {
    pub fn new(chain: MarkovChain, emission: EmissionModel) -> Result<Self> {
        if chain.num_states() != emission.num_states() {
            return Err(Error::shape(format!(
                "chain has {} states, emission has {}",
                chain.num_states(),
                emission.num_states()
            )));
        }
        Ok(Self { chain, emission })
    }

    /// Left-to-right chain plus data-driven emissions. GMM components start
    /// at random frames of their state's uniform segment with the segment's
    /// variance; flow components start at the identity map.
    pub fn initialize(spec: &ModelSpec, data: &[FeatureSequence], rng: &mut RngStream) -> Result<Self> {
        if spec.states == 0 || spec.components == 0 {
            return Err(Error::invalid("states and components must be positive"));
        }
        let dim = data
            .first()
            .map(|s| s.cols())
            .ok_or(Error::Empty("training data"))?;
        let chain = MarkovChain::left_to_right(spec.states)?;
        let emission = match spec.kind {
            ModelKind::Gmm => EmissionModel::Gmm(init_gmm(spec.states, spec.components, data, rng)?),
            kind => {
                let flow = spec
                    .flow
                    .ok_or_else(|| Error::invalid("flow model without flow configuration"))?;
                if Some(flow.kind()) != kind.flow_kind() {
                    return Err(Error::invalid("flow configuration does not match model kind"));
                }
                EmissionModel::Nmm(NmmEmission::new(spec.states, spec.components, dim, &flow, rng)?)
            }
        };
        Self::new(chain, emission)
    }

    pub fn kind(&self) -> ModelKind {
        match &self.emission {
            EmissionModel::Gmm(_) => ModelKind::Gmm,
            EmissionModel::Nmm(n) => match n.kind() {
                FlowKind::Nvp => ModelKind::Nvp,
                FlowKind::Glow => ModelKind::Glow,
            },
        }
    }

    pub fn spec(&self) -> ModelSpec {
        let flow = match &self.emission {
            EmissionModel::Gmm(_) => None,
            EmissionModel::Nmm(n) => Some(n.flows()[0].config()),
        };
        ModelSpec {
            kind: self.kind(),
            states: self.num_states(),
            components: self.num_components(),
            flow,
        }
    }

    pub fn num_states(&self) -> usize {
        self.chain.num_states()
    }

    pub fn num_components(&self) -> usize {
        self.emission.num_components()
    }

    pub fn dim(&self) -> usize {
        self.emission.dim()
    }

    /// Raw (not length-normalized) `log p(x̲)`.
    pub fn log_likelihood(&self, seq: &FeatureSequence) -> Result<f64> {
        hmm::sequence_log_likelihood(&self.chain, &self.emission, seq)
    }

    pub fn e_step(&self, seq: &FeatureSequence) -> Result<PosteriorStats> {
        hmm::e_step(&self.chain, &self.emission, seq)
    }
}

/// State index of frame `t` when a length-`len` sequence is cut into
/// `states` equal consecutive pieces.
pub fn uniform_segment(t: usize, len: usize, states: usize) -> usize {
    (t * states / len).min(states - 1)
}

/// Frames grouped by their uniform-segmentation state.
pub fn segment_frames(data: &[FeatureSequence], states: usize) -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); states];
    for seq in data {
        for t in 0..seq.rows() {
            out[uniform_segment(t, seq.rows(), states)].push(seq.row(t).to_vec());
        }
    }
    out
}

fn init_gmm(states: usize, components: usize, data: &[FeatureSequence], rng: &mut RngStream) -> Result<GmmEmission> {
    let all: Vec<Vec<f64>> = data.iter().flat_map(|s| s.iter_rows().map(<[f64]>::to_vec)).collect();
    if all.is_empty() {
        return Err(Error::Empty("GMM initialization without frames"));
    }
    let dim = all[0].len();
    let segments = segment_frames(data, states);
    let mut means = Vec::with_capacity(states * components * dim);
    let mut log_vars = Vec::with_capacity(states * components * dim);
    for seg in &segments {
        let pool = if seg.is_empty() { &all } else { seg };
        let n = pool.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in pool {
            mean.iter_mut().zip(f).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; dim];
        for f in pool {
            for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        for k in 0..components {
            if k == 0 {
                means.extend_from_slice(&mean);
            } else {
                means.extend_from_slice(&pool[rng.below(pool.len())]);
            }
            log_vars.extend(var.iter().map(|v| v.max(VARIANCE_FLOOR).ln()));
        }
    }
    let lw = -(components as f64).ln();
    GmmEmission::new(states, components, dim, vec![lw; states * components], means, log_vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::NvpConfig;
    use crate::numerics::Matrix;

    #[test]
    fn segmentation_covers_all_states() {
        assert_eq!((0..6).map(|t| uniform_segment(t, 6, 3)).collect::<Vec<_>>(), [0, 0, 1, 1, 2, 2]);
        assert_eq!((0..2).map(|t| uniform_segment(t, 2, 3)).collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn initialize_each_kind() {
        let mut rng = RngStream::new(1);
        let data: Vec<Matrix> = (0..4)
            .map(|_| Matrix::from_vec(9, 2, (0..18).map(|_| rng.normal()).collect()).unwrap())
            .collect();
        let g = HmmModel::initialize(&ModelSpec::gmm(3, 2), &data, &mut rng).unwrap();
        assert_eq!(g.kind(), ModelKind::Gmm);
        assert_eq!(g.chain.q(), vec![1.0, 0.0, 0.0]);
        assert!(g.log_likelihood(&data[0]).unwrap().is_finite());
        let spec = ModelSpec::flow(3, 2, FlowConfig::Nvp(NvpConfig::default()));
        let n = HmmModel::initialize(&spec, &data, &mut rng).unwrap();
        assert_eq!((n.kind(), n.num_components(), n.dim()), (ModelKind::Nvp, 2, 2));
        let bad = ModelSpec {
            kind: ModelKind::Glow,
            ..spec
        };
        assert!(HmmModel::initialize(&bad, &data, &mut rng).is_err());
        assert_eq!("glow".parse::<ModelKind>().unwrap(), ModelKind::Glow);
    }
}
