//! Built-in invariant checks, runnable from the command line.

use std::time::Instant;

use crate::classify::{evaluate, vote};
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig, FlowKind, GlowConfig, NvpConfig};
use crate::gmm::GmmEmission;
use crate::hmm::{self, MarkovChain};
use crate::io;
use crate::model::{EmissionModel, HmmModel, ModelSpec};
use crate::nmm::NmmEmission;
use crate::numerics::{grad_check, Matrix, RngStream};
use crate::oracle;
use crate::synth::{make_corpus, DeskPreset};
use crate::trainer::{train_outer, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Random chain with every transition allowed.
pub fn random_chain(states: usize, rng: &mut RngStream) -> Result<MarkovChain> {
    let mut row = |n: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.05, 1.0)).collect();
        let total: f64 = v.iter().sum();
        v.into_iter().map(|p| p / total).collect()
    };
    let q = row(states);
    let a = Matrix::from_rows(&(0..states).map(|_| row(states)).collect::<Vec<_>>())?;
    MarkovChain::from_probs(&q, &a)
}

/// Random diagonal GMM emission.
pub fn random_gmm(states: usize, components: usize, dim: usize, rng: &mut RngStream) -> Result<GmmEmission> {
    let sn = states * components;
    let mut log_weights = Vec::with_capacity(sn);
    for _ in 0..states {
        let w: Vec<f64> = (0..components).map(|_| rng.uniform_range(0.1, 1.0)).collect();
        let total: f64 = w.iter().sum();
        log_weights.extend(w.iter().map(|v| (v / total).ln()));
    }
    let means = (0..sn * dim).map(|_| rng.normal()).collect();
    let log_vars = (0..sn * dim).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
    GmmEmission::new(states, components, dim, log_weights, means, log_vars)
}

/// A flow with every parameter moved off its initial value by Gaussian
/// noise of size `scale`. Glow actnorms are fitted to random data first.
pub fn random_flow(config: &FlowConfig, dim: usize, scale: f64, rng: &mut RngStream) -> Result<Flow> {
    let mut f = config.build(dim, rng)?;
    if let Flow::Glow(g) = &mut f {
        let batch: Vec<Vec<f64>> = (0..32).map(|_| (0..dim).map(|_| 2.0 * rng.normal()).collect()).collect();
        g.init_actnorm(&batch)?;
    }
    let p: Vec<f64> = f.params().iter().map(|v| v + scale * rng.normal()).collect();
    f.set_params(&p)?;
    Ok(f)
}

fn flow_config(kind: FlowKind, depth: usize) -> FlowConfig {
    match kind {
        FlowKind::Nvp => FlowConfig::Nvp(NvpConfig {
            coupling_layers: depth,
            hidden_width: None,
        }),
        FlowKind::Glow => FlowConfig::Glow(GlowConfig {
            flow_steps: depth,
            hidden_width: None,
        }),
    }
}

fn fail(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

fn check_enumeration(instances: usize) -> Result<String> {
    let mut rng = RngStream::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let s = 1 + rng.below(3);
        let n = 1 + rng.below(2);
        let t = 1 + rng.below(5);
        let chain = random_chain(s, &mut rng)?;
        let em = random_gmm(s, n, 2, &mut rng)?;
        let seq = Matrix::from_vec(t, 2, (0..2 * t).map(|_| 1.5 * rng.normal()).collect())?;
        let st = hmm::e_step(&chain, &em, &seq)?;
        let brute = oracle::brute_force_posteriors(&chain, &em, &seq);
        worst = worst.max((st.log_likelihood - brute.log_likelihood).abs());
        for tt in 0..t {
            for i in 0..s {
                worst = worst.max((st.log_gamma[(tt, i)].exp() - brute.gamma[tt][i]).abs());
                for k in 0..n {
                    worst = worst.max((st.comp(tt, i, k).exp() - brute.comp_gamma[tt][i][k]).abs());
                }
            }
        }
        for i in 0..s {
            for j in 0..s {
                worst = worst.max((st.log_xi_sum[(i, j)].exp() - brute.xi_sum[i][j]).abs());
            }
        }
    }
    if worst > 1e-9 {
        return Err(fail(format!("max deviation {worst:e}")));
    }
    Ok(format!("{instances} instances, max deviation {worst:.1e}"))
}

fn check_round_trips(per_dim: usize) -> Result<String> {
    let mut rng = RngStream::new(202);
    let mut report = Vec::new();
    for (kind, tol) in [(FlowKind::Nvp, 1e-9), (FlowKind::Glow, 1e-8)] {
        let mut worst: f64 = 0.0;
        for dim in [2, 8, 39] {
            let f = random_flow(&flow_config(kind, 4), dim, 0.1, &mut rng)?;
            for _ in 0..per_dim {
                let x: Vec<f64> = (0..dim).map(|_| 2.0 * rng.normal()).collect();
                let back = f.inverse(&f.forward(&x)?.0)?;
                worst = x.iter().zip(&back).fold(worst, |w, (a, b)| w.max((a - b).abs()));
            }
        }
        if worst > tol {
            return Err(fail(format!("{} round-trip error {worst:e}", kind.as_str())));
        }
        report.push(format!("{} {worst:.1e}", kind.as_str()));
    }
    Ok(report.join(", "))
}

fn check_log_det(stacks: usize) -> Result<String> {
    let mut rng = RngStream::new(303);
    let mut worst: f64 = 0.0;
    for kind in [FlowKind::Nvp, FlowKind::Glow] {
        for i in 0..stacks {
            let dim = 2 + i % 7;
            let f = random_flow(&flow_config(kind, 4), dim, 0.2, &mut rng)?;
            let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let analytic = f.forward(&x)?.1;
            let numeric = oracle::numerical_log_abs_det(|p| f.forward(p).expect("forward").0, &x, 1e-5);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
        }
    }
    if worst > 1e-4 {
        return Err(fail(format!("relative log-det error {worst:e}")));
    }
    Ok(format!("{stacks} stacks per kind, max relative error {worst:.1e}"))
}

fn check_gradients(points: usize) -> Result<String> {
    let mut rng = RngStream::new(404);
    let mut worst: f64 = 0.0;
    for kind in [FlowKind::Nvp, FlowKind::Glow] {
        for _ in 0..points {
            let f = random_flow(&flow_config(kind, 2), 4, 0.2, &mut rng)?;
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let mut grad = vec![0.0; f.num_params()];
            f.accumulate_gradient(&x, 1.0, &mut grad)?;
            let err = grad_check(
                |p| {
                    let mut g = f.clone();
                    g.set_params(p).expect("parameter count");
                    g.log_likelihood(&x).expect("finite density")
                },
                &f.params(),
                &grad,
                1e-5,
            )?;
            worst = worst.max(err);
        }
    }
    if worst >= 1e-5 {
        return Err(fail(format!("gradient relative error {worst:e}")));
    }
    Ok(format!("{points} points per kind, max relative error {worst:.1e}"))
}

fn check_identity_anchor(sequences: usize) -> Result<String> {
    let mut rng = RngStream::new(505);
    let (s, n, d) = (3, 2, 4);
    let chain = random_chain(s, &mut rng)?;
    let gmm = HmmModel::new(chain.clone(), EmissionModel::Gmm(GmmEmission::standard(s, n, d)?))?;
    let mut worst: f64 = 0.0;
    for kind in [FlowKind::Nvp, FlowKind::Glow] {
        let em = NmmEmission::identity(s, n, d, &flow_config(kind, 4), &mut rng)?;
        let flow = HmmModel::new(chain.clone(), EmissionModel::Nmm(em))?;
        for _ in 0..sequences {
            let t = 1 + rng.below(20);
            let seq = Matrix::from_vec(t, d, (0..t * d).map(|_| 2.0 * rng.normal()).collect())?;
            worst = worst.max((flow.log_likelihood(&seq)? - gmm.log_likelihood(&seq)?).abs());
        }
    }
    if worst > 1e-10 {
        return Err(fail(format!("deviation {worst:e}")));
    }
    Ok(format!("{sequences} sequences per kind, max deviation {worst:.1e}"))
}

fn check_voting(trials: usize) -> Result<String> {
    let mut rng = RngStream::new(606);
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                let votes = [a, b, c];
                let expected = if a == b || a == c {
                    Some(a)
                } else if b == c {
                    Some(b)
                } else {
                    None
                };
                let got = vote(&votes, &mut rng)?;
                match expected {
                    Some(e) if got != e => return Err(fail(format!("{votes:?} voted {got}, expected {e}"))),
                    None if !votes.contains(&got) => return Err(fail(format!("{votes:?} voted {got}"))),
                    _ => {}
                }
            }
        }
    }
    let mut freq = [0usize; 3];
    for _ in 0..trials {
        freq[vote(&[0, 1, 2], &mut rng)?] += 1;
    }
    let worst = freq
        .iter()
        .map(|&f| (f as f64 / trials as f64 - 1.0 / 3.0).abs())
        .fold(0.0, f64::max);
    if worst > 0.02 {
        return Err(fail(format!("disagreement frequencies {freq:?}")));
    }
    Ok(format!("27-row truth table, {trials} random draws {freq:?}"))
}

fn check_metrics() -> Result<String> {
    let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut rng = RngStream::new(707);
    let truth: Vec<usize> = (0..500).map(|_| rng.below(3)).collect();
    let pred: Vec<usize> = truth
        .iter()
        .map(|&t| if rng.uniform() < 0.7 { t } else { rng.below(3) })
        .collect();
    let r = evaluate(&pred, &truth, &labels)?;
    let gap = (r.weighted_recall - r.accuracy).abs();
    if gap > 1e-12 {
        return Err(fail(format!("weighted recall differs from accuracy by {gap:e}")));
    }
    let hand = evaluate(&[0, 0, 1], &[0, 1, 1], &labels)?;
    let m0 = &hand.per_class[0];
    let m1 = &hand.per_class[1];
    if (m0.precision, m0.recall, m1.precision, m1.recall) != (0.5, 1.0, 1.0, 0.5) {
        return Err(fail("hand-computed precision/recall mismatch"));
    }
    Ok(format!("accuracy {:.3} equals weighted recall", r.accuracy))
}

fn check_persistence() -> Result<String> {
    let mut rng = RngStream::new(808);
    let dir = std::env::temp_dir().join(format!("flowhmm-selftest-{}", std::process::id()));
    let result = (|| -> Result<String> {
        for (i, kind) in [FlowKind::Nvp, FlowKind::Glow].into_iter().enumerate() {
            let flows = (0..2)
                .map(|_| random_flow(&flow_config(kind, 2), 3, 0.1, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let em = NmmEmission::from_parts(2, 1, vec![0.0; 2], flows)?;
            let model = HmmModel::new(random_chain(2, &mut rng)?, EmissionModel::Nmm(em))?;
            let path = dir.join(format!("m{i}"));
            io::save_model(&path, &model, &io::ModelInfo::default())?;
            let bytes = std::fs::read(path.join(io::PARAMS_FILE))?;
            let (back, _) = io::load_model(&path)?;
            if back != model {
                return Err(fail(format!("{} model changed in a save/load cycle", kind.as_str())));
            }
            io::save_model(&path, &back, &io::ModelInfo::default())?;
            if std::fs::read(path.join(io::PARAMS_FILE))? != bytes {
                return Err(fail("second save produced different bytes"));
            }
        }
        let recs: Vec<io::FeatureRecord> = (0..10)
            .map(|i| io::FeatureRecord {
                id: format!("u{i}"),
                features: Matrix::from_vec(5, 3, (0..15).map(|_| rng.normal() as f32 as f64).collect()).expect("shape"),
            })
            .collect();
        if io::decode_features(&io::encode_features(&recs)?)? != recs {
            return Err(fail("feature archive round trip changed values"));
        }
        Ok("model containers and feature archives round-trip exactly".into())
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn check_em_monotonicity(fast: bool) -> Result<String> {
    let preset = DeskPreset {
        classes: 1,
        train_per_class: if fast { 20 } else { 100 },
        test_per_class: 1,
        ..DeskPreset::default()
    };
    let corpus = make_corpus(&preset, 909)?;
    let data: Vec<_> = corpus.train.iter().map(|u| u.features.clone()).collect();
    let mut rng = RngStream::new(909);
    let model = HmmModel::initialize(&ModelSpec::gmm(3, 2), &data, &mut rng)?;
    let cfg = TrainConfig {
        outer_iters: 10,
        stop_on_convergence: false,
        ..TrainConfig::default()
    };
    let (_, log) = train_outer(model, &data, &cfg)?;
    let nll = log.neg_log_likelihoods();
    if let Some(w) = nll.windows(2).find(|w| w[1] > w[0] + 1e-8) {
        return Err(fail(format!("negative log-likelihood rose from {} to {}", w[0], w[1])));
    }
    Ok(format!("{} iterations, {:.1} -> {:.1}", nll.len() - 1, nll[0], nll[nll.len() - 1]))
}

/// Runs every check; `fast` shrinks the instance counts.
pub fn run(fast: bool) -> Vec<CheckOutcome> {
    let scale = |full: usize, quick: usize| if fast { quick } else { full };
    let checks: Vec<(&'static str, Box<dyn Fn() -> Result<String>>)> = vec![
        ("forward-backward vs enumeration", Box::new(move || check_enumeration(scale(50, 10)))),
        ("flow round trips", Box::new(move || check_round_trips(scale(1000, 50)))),
        ("log-det vs finite differences", Box::new(move || check_log_det(scale(20, 4)))),
        ("gradients vs finite differences", Box::new(move || check_gradients(scale(10, 2)))),
        ("identity flows match unit Gaussians", Box::new(move || check_identity_anchor(scale(100, 10)))),
        ("majority voting", Box::new(move || check_voting(10_000))),
        ("metric identities", Box::new(check_metrics)),
        ("persistence round trips", Box::new(check_persistence)),
        ("GMM-HMM EM monotonicity", Box::new(move || check_em_monotonicity(fast))),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(e) => (false, e.to_string()),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
