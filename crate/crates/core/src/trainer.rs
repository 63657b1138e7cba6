//! Hybrid EM training.
//!
//! Each outer iteration computes posteriors under the current model, then
//! (flow models only) runs an inner loop of Adam steps on the flow
//! parameters against the frozen-posterior cost, and finally replaces the
//! chain parameters and mixture weights with their closed-form updates from
//! the same posteriors. GMM models take exact M-steps and have no inner loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowKind;
use crate::hmm::{Emission, FeatureSequence, PosteriorStats};
use crate::model::{segment_frames, uniform_segment, EmissionModel, HmmModel, ModelSpec};
use crate::nmm::NmmEmission;
use crate::numerics::{Matrix, RngState, RngStream};
use crate::par;

/// Component responsibilities below this probability are left out of the
/// flow cost and its gradient.
pub const RESPONSIBILITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActnormInit {
    FirstMinibatch,
    FullDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Sequences per minibatch.
    pub batch_size: usize,
    /// Inner epochs per outer iteration.
    pub max_inner_iters: usize,
    pub convergence_threshold: f64,
    pub convergence_streak: usize,
    pub outer_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Stop the outer loop once the total negative log-likelihood meets the
    /// convergence criterion `convergence_streak` times in a row.
    pub stop_on_convergence: bool,
    /// Use uniform-segmentation responsibilities instead of posteriors for
    /// the first flow update (flat start).
    pub flat_start: bool,
    pub actnorm_init: ActnormInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-3,
            batch_size: 16,
            max_inner_iters: 50,
            convergence_threshold: 1e-4,
            convergence_streak: 3,
            outer_iters: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_decay_factor: 0.5,
            lr_decay_every: 10,
            seed: 0,
            stop_on_convergence: true,
            flat_start: true,
            actnorm_init: ActnormInit::FirstMinibatch,
        }
    }
}

impl TrainConfig {
    /// Defaults with the flow family's learning rate.
    pub fn for_flow(kind: Option<FlowKind>) -> Self {
        let learning_rate = match kind {
            Some(FlowKind::Glow) => 1e-4,
            _ => 4e-3,
        };
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("training configuration: {what}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.convergence_threshold > 0.0 && self.convergence_threshold < 1.0) {
            return bad("convergence threshold must lie in (0, 1)");
        }
        if self.convergence_streak == 0 {
            return bad("convergence streak must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return bad("learning-rate decay factor and period must be positive");
        }
        Ok(())
    }
}

/// Adam moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One bias-corrected Adam step descending along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "Adam state for {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.step += 1;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Relative-change convergence test with a success streak.
///
/// Returns `(converged, new_streak)`.
pub fn check_convergence(prev: f64, current: f64, threshold: f64, streak: usize, required: usize) -> Result<(bool, usize)> {
    if prev == 0.0 {
        return Err(Error::invalid("relative change undefined for a zero previous cost"));
    }
    let streak = if ((current - prev) / prev).abs() < threshold {
        streak + 1
    } else {
        0
    };
    Ok((streak >= required, streak))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterRecord {
    /// 1-based outer iteration.
    pub iteration: usize,
    /// `−Σ log p(x̲)` under the model at the start of the iteration.
    pub neg_log_likelihood: f64,
    pub inner_iters: usize,
    /// Frame-averaged flow cost after each inner epoch.
    pub inner_costs: Vec<f64>,
    pub inner_converged: bool,
    pub learning_rate: f64,
    /// Not persisted, so saved logs stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
    /// Components or rows that kept their previous values.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainLog {
    pub records: Vec<OuterRecord>,
    /// `−Σ log p(x̲)` under the final model.
    pub final_neg_log_likelihood: Option<f64>,
}

impl TrainLog {
    /// Equality ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        let strip = |l: &TrainLog| {
            let mut l = l.clone();
            l.records.iter_mut().for_each(|r| r.wall_time_secs = 0.0);
            l
        };
        strip(self) == strip(other)
    }

    /// Total negative log-likelihood sequence: one value per outer iteration
    /// plus the final value when present.
    pub fn neg_log_likelihoods(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.records.iter().map(|r| r.neg_log_likelihood).collect();
        v.extend(self.final_neg_log_likelihood);
        v
    }
}

/// Everything needed to continue a run bitwise-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: HmmModel,
    pub config: TrainConfig,
    pub adam: Vec<AdamState>,
    pub rng: RngState,
    pub outer_done: usize,
    pub learning_rate: f64,
    pub outer_streak: usize,
    pub converged: bool,
    pub log: TrainLog,
}

/// Outcome of one inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub costs: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: HmmModel,
    adam: Vec<AdamState>,
    rng: RngStream,
    outer_done: usize,
    learning_rate: f64,
    outer_streak: usize,
    converged: bool,
    log: TrainLog,
}

impl Trainer {
    /// Trainer drawing minibatch orders from a stream seeded with `config.seed`.
    pub fn new(model: HmmModel, config: TrainConfig) -> Result<Self> {
        let rng = RngStream::new(config.seed);
        Self::with_rng(model, config, rng)
    }

    pub fn with_rng(model: HmmModel, config: TrainConfig, rng: RngStream) -> Result<Self> {
        config.validate()?;
        let adam = match &model.emission {
            EmissionModel::Gmm(_) => Vec::new(),
            EmissionModel::Nmm(n) => n.flows().iter().map(|f| AdamState::new(f.num_params())).collect(),
        };
        Ok(Self {
            learning_rate: config.learning_rate,
            config,
            model,
            adam,
            rng,
            outer_done: 0,
            outer_streak: 0,
            converged: false,
            log: TrainLog::default(),
        })
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        cp.config.validate()?;
        let expected: Vec<usize> = match &cp.model.emission {
            EmissionModel::Gmm(_) => Vec::new(),
            EmissionModel::Nmm(n) => n.flows().iter().map(|f| f.num_params()).collect(),
        };
        if cp.adam.iter().map(|a| a.m.len()).collect::<Vec<_>>() != expected {
            return Err(Error::shape("checkpoint optimizer state does not match the model"));
        }
        Ok(Self {
            rng: RngStream::from_state(&cp.rng)?,
            config: cp.config,
            model: cp.model,
            adam: cp.adam,
            outer_done: cp.outer_done,
            learning_rate: cp.learning_rate,
            outer_streak: cp.outer_streak,
            converged: cp.converged,
            log: cp.log,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            config: self.config.clone(),
            adam: self.adam.clone(),
            rng: self.rng.state(),
            outer_done: self.outer_done,
            learning_rate: self.learning_rate,
            outer_streak: self.outer_streak,
            converged: self.converged,
            log: self.log.clone(),
        }
    }

    pub fn model(&self) -> &HmmModel {
        &self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn outer_done(&self) -> usize {
        self.outer_done
    }

    pub fn is_finished(&self) -> bool {
        self.converged || self.outer_done >= self.config.outer_iters
    }

    /// Runs the remaining outer iterations, calling `on_checkpoint` after each.
    pub fn run<F>(&mut self, data: &[FeatureSequence], mut on_checkpoint: F) -> Result<()>
    where
        F: FnMut(&Checkpoint) -> Result<()>,
    {
        check_data(&self.model, data)?;
        while !self.is_finished() {
            self.outer_step(data)?;
            on_checkpoint(&self.checkpoint())?;
        }
        self.log.final_neg_log_likelihood = Some(total_nll(&self.model, data)?);
        Ok(())
    }

    pub fn finish(self) -> (HmmModel, TrainLog) {
        (self.model, self.log)
    }

    /// One outer iteration.
    pub fn outer_step(&mut self, data: &[FeatureSequence]) -> Result<()> {
        let start = Instant::now();
        check_data(&self.model, data)?;
        if let EmissionModel::Nmm(n) = &mut self.model.emission {
            if n.needs_data_init() {
                init_actnorm(n, data, &self.config, &mut self.rng)?;
            }
        }
        let stats = all_posteriors(&self.model, data)?;
        let nll = -stats.iter().map(|s| s.log_likelihood).sum::<f64>();
        if !nll.is_finite() {
            return Err(Error::NonFinite("total log-likelihood".into()));
        }
        let mut notes = Vec::new();
        let mut inner = InnerOutcome {
            costs: Vec::new(),
            converged: false,
        };
        let num_states = self.model.num_states();
        match &mut self.model.emission {
            EmissionModel::Gmm(g) => {
                let upd = g.m_step(&stats, data)?;
                *g = upd.emission;
                notes.extend(upd.starved.iter().map(|(s, k)| format!("starved component {s}/{k}")));
            }
            EmissionModel::Nmm(n) => {
                let flat;
                let fit_stats = if self.config.flat_start && self.outer_done == 0 {
                    flat = data
                        .iter()
                        .map(|x| segmentation_stats(x.rows(), num_states, n.num_components()))
                        .collect::<Vec<_>>();
                    &flat
                } else {
                    &stats
                };
                inner = train_inner(
                    n,
                    data,
                    fit_stats,
                    &self.config,
                    self.learning_rate,
                    &mut self.adam,
                    &mut self.rng,
                )?;
                let upd = n.update_pi(&stats)?;
                n.set_log_weights(upd.log_weights)?;
                notes.extend(upd.zero_mass_states.iter().map(|s| format!("state {s} kept mixture weights")));
            }
        }
        let zero_rows = self.model.chain.m_step(&stats)?;
        notes.extend(zero_rows.iter().map(|r| format!("transition row {r} kept")));

        if let Some(prev) = self.log.records.last() {
            let (conv, streak) = check_convergence(
                prev.neg_log_likelihood,
                nll,
                self.config.convergence_threshold,
                self.outer_streak,
                self.config.convergence_streak,
            )?;
            self.outer_streak = streak;
            self.converged = conv && self.config.stop_on_convergence;
        }
        self.log.records.push(OuterRecord {
            iteration: self.outer_done + 1,
            neg_log_likelihood: nll,
            inner_iters: inner.costs.len(),
            inner_costs: inner.costs,
            inner_converged: inner.converged,
            learning_rate: self.learning_rate,
            wall_time_secs: start.elapsed().as_secs_f64(),
            notes,
        });
        self.outer_done += 1;
        if self.outer_done % self.config.lr_decay_every == 0 {
            self.learning_rate *= self.config.lr_decay_factor;
        }
        Ok(())
    }
}

fn check_data(model: &HmmModel, data: &[FeatureSequence]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if let Some(m) = data.iter().position(|s| s.cols() != model.dim() || s.rows() == 0) {
        return Err(Error::shape(format!(
            "sequence {m} has shape {:?}, model dimension is {}",
            data[m].shape(),
            model.dim()
        )));
    }
    Ok(())
}

fn all_posteriors(model: &HmmModel, data: &[FeatureSequence]) -> Result<Vec<PosteriorStats>> {
    let stats = par::map_indexed(data.len(), |m| model.e_step(&data[m]));
    stats
        .into_iter()
        .enumerate()
        .map(|(m, r)| r.map_err(|e| annotate(e, &format!("sequence {m}"))))
        .collect()
}

fn total_nll(model: &HmmModel, data: &[FeatureSequence]) -> Result<f64> {
    let lls = par::try_map(data, |x| model.log_likelihood(x))?;
    Ok(-lls.iter().sum::<f64>())
}

fn annotate(e: Error, context: &str) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{context}: {what}")),
        Error::ImpossibleFrame { frame } => Error::NonFinite(format!("{context}: no state explains frame {frame}")),
        other => other,
    }
}

/// Hard uniform-segmentation responsibilities with components equally weighted.
fn segmentation_stats(len: usize, states: usize, components: usize) -> PosteriorStats {
    let mut log_gamma = Matrix::filled(len, states, f64::NEG_INFINITY);
    let mut comp_gamma = vec![f64::NEG_INFINITY; len * states * components];
    let lw = -(components as f64).ln();
    for t in 0..len {
        let s = uniform_segment(t, len, states);
        log_gamma[(t, s)] = 0.0;
        let base = (t * states + s) * components;
        comp_gamma[base..base + components].fill(lw);
    }
    PosteriorStats {
        log_gamma,
        log_xi_sum: Matrix::filled(states, states, f64::NEG_INFINITY),
        log_likelihood: 0.0,
        comp_gamma,
        num_components: components,
    }
}

/// Sequence indices sorted by length (ties by index) and cut into batches.
pub fn length_sorted_batches(data: &[FeatureSequence], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&m| (data[m].rows(), m));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn init_actnorm(n: &mut NmmEmission, data: &[FeatureSequence], cfg: &TrainConfig, rng: &mut RngStream) -> Result<()> {
    let states = n.num_states();
    let frames = match cfg.actnorm_init {
        ActnormInit::FullDataset => segment_frames(data, states),
        ActnormInit::FirstMinibatch => {
            let mut batches = length_sorted_batches(data, cfg.batch_size);
            rng.shuffle(&mut batches);
            let first: Vec<FeatureSequence> = batches[0].iter().map(|&m| data[m].clone()).collect();
            segment_frames(&first, states)
        }
    };
    let all: Vec<Vec<f64>> = frames.iter().flatten().cloned().collect();
    let frames: Vec<Vec<Vec<f64>>> = frames
        .into_iter()
        .map(|f| if f.is_empty() { all.clone() } else { f })
        .collect();
    n.init_actnorm(&frames)
}

/// A `(sequence, frame, weight)` entry of one flow's workload.
type WorkItem = (usize, usize, f64);

/// Per-flow, per-batch work lists from frozen responsibilities.
fn work_lists(stats: &[PosteriorStats], batches: &[Vec<usize>], flows: usize) -> Vec<Vec<Vec<WorkItem>>> {
    let mut out = vec![vec![Vec::new(); batches.len()]; flows];
    for (b, batch) in batches.iter().enumerate() {
        for &m in batch {
            let st = &stats[m];
            for t in 0..st.num_frames() {
                let row = &st.comp_gamma[t * flows..(t + 1) * flows];
                for (f, lg) in row.iter().enumerate() {
                    let w = lg.exp();
                    if w >= RESPONSIBILITY_FLOOR {
                        out[f][b].push((m, t, w));
                    }
                }
            }
        }
    }
    out
}

fn flow_cost(n: &NmmEmission, data: &[FeatureSequence], work: &[Vec<Vec<WorkItem>>], frames: f64) -> Result<f64> {
    let comps = n.num_components();
    let parts = par::try_map_indexed(work.len(), |f| {
        let flow = &n.flows()[f];
        let mut acc = 0.0;
        for batch in &work[f] {
            for &(m, t, w) in batch {
                let ll = flow.log_likelihood(data[m].row(t));
                match ll {
                    Ok(v) if v.is_finite() => acc -= w * v,
                    _ => {
                        return Err(Error::NonFinite(format!(
                            "flow cost at state {}, component {}, sequence {m}, frame {t}",
                            f / comps,
                            f % comps
                        )))
                    }
                }
            }
        }
        Ok(acc)
    })?;
    Ok(parts.iter().sum::<f64>() / frames)
}

/// Inner loop: epochs of Adam steps over length-sorted minibatches (batch
/// order shuffled each epoch) against the frozen-responsibility flow cost.
pub fn train_inner(
    n: &mut NmmEmission,
    data: &[FeatureSequence],
    stats: &[PosteriorStats],
    cfg: &TrainConfig,
    learning_rate: f64,
    adam: &mut [AdamState],
    rng: &mut RngStream,
) -> Result<InnerOutcome> {
    let flows = n.flows().len();
    if adam.len() != flows {
        return Err(Error::shape("one optimizer state per flow is required"));
    }
    if stats.len() != data.len() {
        return Err(Error::shape("one posterior per sequence is required"));
    }
    let mut out = InnerOutcome {
        costs: Vec::new(),
        converged: false,
    };
    if cfg.max_inner_iters == 0 {
        return Ok(out);
    }
    let batches = length_sorted_batches(data, cfg.batch_size);
    let batch_frames: Vec<f64> = batches
        .iter()
        .map(|b| b.iter().map(|&m| data[m].rows() as f64).sum())
        .collect();
    let total_frames: f64 = batch_frames.iter().sum();
    let work = work_lists(stats, &batches, flows);
    let comps = n.num_components();

    let mut prev = flow_cost(n, data, &work, total_frames)?;
    let mut streak = 0;
    for _ in 0..cfg.max_inner_iters {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        rng.shuffle(&mut order);
        for &b in &order {
            let grads: Vec<Option<Vec<f64>>> = par::try_map_indexed(flows, |f| {
                let items = &work[f][b];
                if items.is_empty() {
                    return Ok(None);
                }
                let flow = &n.flows()[f];
                let mut g = vec![0.0; flow.num_params()];
                for &(m, t, w) in items {
                    flow.accumulate_gradient(data[m].row(t), w, &mut g).map_err(|e| {
                        annotate(e, &format!("state {}, component {}, sequence {m}, frame {t}", f / comps, f % comps))
                    })?;
                }
                Ok(Some(g))
            })?;
            let scale = -1.0 / batch_frames[b];
            for (f, g) in grads.into_iter().enumerate() {
                let Some(mut g) = g else { continue };
                g.iter_mut().for_each(|v| *v *= scale);
                let flow = &mut n.flows_mut()[f];
                let mut p = flow.params();
                adam[f]
                    .step(&mut p, &g, learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
                    .map_err(|e| annotate(e, &format!("state {}, component {}", f / comps, f % comps)))?;
                flow.set_params(&p)?;
            }
        }
        let cost = flow_cost(n, data, &work, total_frames)?;
        out.costs.push(cost);
        let (conv, s) = check_convergence(prev, cost, cfg.convergence_threshold, streak, cfg.convergence_streak)?;
        streak = s;
        prev = cost;
        if conv {
            out.converged = true;
            break;
        }
    }
    Ok(out)
}

/// Trains `model` for `config.outer_iters` outer iterations.
pub fn train_outer(model: HmmModel, data: &[FeatureSequence], config: &TrainConfig) -> Result<(HmmModel, TrainLog)> {
    let mut t = Trainer::new(model, config.clone())?;
    t.run(data, |_| Ok(()))?;
    Ok(t.finish())
}

/// Initializes and trains one model from the stream `seed.split(index)`.
pub fn fit(spec: &ModelSpec, data: &[FeatureSequence], config: &TrainConfig, index: u64) -> Result<(HmmModel, TrainLog)> {
    let mut rng = RngStream::new(config.seed).split(index);
    let model = HmmModel::initialize(spec, data, &mut rng)?;
    let mut t = Trainer::with_rng(model, config.clone(), rng)?;
    t.run(data, |_| Ok(()))?;
    Ok(t.finish())
}

/// One independently trained model per class; class `c` uses
/// `fit(spec, data_c, config, c)`, so results do not depend on scheduling.
pub fn train_class_set(
    classes: &[(String, Vec<FeatureSequence>)],
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<Vec<(HmmModel, TrainLog)>> {
    if let Some((name, _)) = classes.iter().find(|(_, d)| d.is_empty()) {
        return Err(Error::EmptyClass(name.clone()));
    }
    par::try_map_indexed(classes.len(), |c| {
        fit(spec, &classes[c].1, config, c as u64).map_err(|e| match e {
            Error::NonFinite(w) => Error::NonFinite(format!("class {}: {w}", classes[c].0)),
            other => other,
        })
    })
}
