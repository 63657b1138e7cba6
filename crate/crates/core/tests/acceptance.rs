//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails the test if any criterion fails.

use std::io::Write;
use std::time::Instant;

use flowhmm::classify::{classify_all, evaluate, vote, ClassifierBank};
use flowhmm::features::{extract_features, gen_noise, mix_noise, FeatureConfig, NoiseKind, Waveform};
use flowhmm::flow::{FlowConfig, FlowKind, GlowConfig, NvpConfig};
use flowhmm::gmm::GmmEmission;
use flowhmm::hmm::{self, FeatureSequence};
use flowhmm::io::{self, FeatureRecord, Manifest, ManifestEntry, ModelInfo, PredictionFile, PredictionRow};
use flowhmm::model::{EmissionModel, HmmModel, ModelSpec};
use flowhmm::nmm::{nmm_log_pdf, NmmEmission};
use flowhmm::numerics::{grad_check, Matrix, RngStream};
use flowhmm::oracle;
use flowhmm::selftest::{random_chain, random_flow, random_gmm};
use flowhmm::synth::{make_audio_corpus, make_corpus, make_warped_corpus, AudioPreset, DeskPreset, Warp};
use flowhmm::trainer::{fit, train_class_set, train_outer, TrainConfig, Trainer};

type Outcome = Result<String, String>;

fn nvp(layers: usize) -> FlowConfig {
    FlowConfig::Nvp(NvpConfig {
        coupling_layers: layers,
        hidden_width: None,
    })
}

fn glow(steps: usize) -> FlowConfig {
    FlowConfig::Glow(GlowConfig {
        flow_steps: steps,
        hidden_width: None,
    })
}

fn e<T: std::fmt::Display>(err: T) -> String {
    err.to_string()
}

fn normal_seq(t: usize, d: usize, scale: f64, rng: &mut RngStream) -> FeatureSequence {
    Matrix::from_vec(t, d, (0..t * d).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn accuracy(models: &[HmmModel], labels: &[String], xs: &[FeatureSequence], ys: &[usize]) -> Result<f64, String> {
    let bank = ClassifierBank::new(labels.to_vec(), models.to_vec()).map_err(e)?;
    let preds = classify_all(&bank, xs).map_err(e)?;
    let hits = preds.iter().zip(ys).filter(|(p, y)| p.label == **y).count();
    Ok(hits as f64 / xs.len() as f64)
}

fn enumeration() -> Outcome {
    let mut rng = RngStream::new(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let s = 1 + rng.below(3);
        let n = 1 + rng.below(2);
        let t = 1 + rng.below(5);
        let chain = random_chain(s, &mut rng).map_err(e)?;
        let em = random_gmm(s, n, 3, &mut rng).map_err(e)?;
        let seq = normal_seq(t, 3, 1.5, &mut rng);
        let st = hmm::e_step(&chain, &em, &seq).map_err(e)?;
        let brute = oracle::brute_force_posteriors(&chain, &em, &seq);
        let mut dev = |a: f64, b: f64| worst = worst.max((a - b).abs());
        dev(st.log_likelihood, brute.log_likelihood);
        for tt in 0..t {
            for i in 0..s {
                dev(st.log_gamma[(tt, i)].exp(), brute.gamma[tt][i]);
                for k in 0..n {
                    dev(st.comp(tt, i, k).exp(), brute.comp_gamma[tt][i][k]);
                }
            }
        }
        for i in 0..s {
            for j in 0..s {
                dev(st.log_xi_sum[(i, j)].exp(), brute.xi_sum[i][j]);
            }
        }
    }
    if worst > 1e-9 {
        return Err(format!("max deviation {worst:e} > 1e-9"));
    }
    Ok(format!("50 instances, max abs deviation {worst:.1e}"))
}

fn bijectivity() -> Outcome {
    let mut rng = RngStream::new(2);
    let mut notes = Vec::new();
    for (cfg, tol) in [(nvp(4), 1e-9), (glow(12), 1e-8)] {
        let mut worst: f64 = 0.0;
        for dim in [2, 8, 39] {
            let f = random_flow(&cfg, dim, 0.1, &mut rng).map_err(e)?;
            for _ in 0..1000 {
                let x: Vec<f64> = (0..dim).map(|_| 2.0 * rng.normal()).collect();
                let back = f.inverse(&f.forward(&x).map_err(e)?.0).map_err(e)?;
                worst = x.iter().zip(&back).fold(worst, |w, (a, b)| w.max((a - b).abs()));
            }
        }
        let name = cfg.kind().as_str();
        if worst > tol {
            return Err(format!("{name} round-trip error {worst:e} > {tol:e}"));
        }
        notes.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!("3000 round trips per kind, {}", notes.join(", ")))
}

fn jacobian() -> Outcome {
    let mut rng = RngStream::new(3);
    let mut worst: f64 = 0.0;
    for cfg in [nvp(4), glow(4)] {
        for i in 0..20 {
            let dim = 2 + i % 7;
            let f = random_flow(&cfg, dim, 0.2, &mut rng).map_err(e)?;
            let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let analytic = f.forward(&x).map_err(e)?.1;
            let numeric = oracle::numerical_log_abs_det(|p| f.forward(p).unwrap().0, &x, 1e-5);
            worst = worst.max((analytic - numeric).abs() / numeric.abs());
        }
    }
    if worst > 1e-4 {
        return Err(format!("relative log-det error {worst:e} > 1e-4"));
    }
    Ok(format!("20 stacks per kind, max relative error {worst:.1e}"))
}

fn gradients() -> Outcome {
    let mut rng = RngStream::new(4);
    let mut worst: f64 = 0.0;
    for cfg in [nvp(4), glow(4)] {
        for _ in 0..10 {
            let f = random_flow(&cfg, 4, 0.2, &mut rng).map_err(e)?;
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let mut grad = vec![0.0; f.num_params()];
            f.accumulate_gradient(&x, 1.0, &mut grad).map_err(e)?;
            let objective = |p: &[f64]| {
                let mut g = f.clone();
                g.set_params(p).unwrap();
                g.log_likelihood(&x).unwrap()
            };
            worst = worst.max(grad_check(objective, &f.params(), &grad, 1e-5).map_err(e)?);
        }
    }
    if worst >= 1e-5 {
        return Err(format!("gradient relative error {worst:e} >= 1e-5"));
    }
    Ok(format!("10 points per kind, max relative error {worst:.1e}"))
}

fn normalization() -> Outcome {
    let mut rng = RngStream::new(5);
    // Curved two-dimensional data.
    let data: Vec<FeatureSequence> = (0..40)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..20)
                .map(|_| {
                    let x = 0.8 * rng.normal();
                    vec![x, 0.6 * x * x - 0.6 + 0.3 * rng.normal()]
                })
                .collect();
            Matrix::from_rows(&rows).unwrap()
        })
        .collect();
    let mut notes = Vec::new();
    for cfg in [nvp(4), glow(4)] {
        let spec = ModelSpec::flow(1, 1, cfg);
        let tc = TrainConfig {
            outer_iters: 3,
            max_inner_iters: 20,
            ..TrainConfig::for_flow(Some(cfg.kind()))
        };
        let (model, log) = fit(&spec, &data, &tc, 0).map_err(e)?;
        let nll = log.neg_log_likelihoods();
        if nll.last() >= nll.first() {
            return Err(format!("{} did not train: {nll:?}", cfg.kind().as_str()));
        }
        let EmissionModel::Nmm(em) = &model.emission else {
            return Err("flow model without flow emission".into());
        };
        let mass = oracle::grid_mass_2d(|p| nmm_log_pdf(em, 0, p).unwrap(), -6.0, 6.0, 400);
        if (mass - 1.0).abs() > 1e-2 {
            return Err(format!("{} density integrates to {mass}", cfg.kind().as_str()));
        }
        notes.push(format!("{} {mass:.5}", cfg.kind().as_str()));
    }
    Ok(format!("grid mass on [-6, 6]^2: {}", notes.join(", ")))
}

fn em_monotone() -> Outcome {
    let corpus = make_corpus(&DeskPreset::default(), 6).map_err(e)?;
    let cfg = TrainConfig {
        outer_iters: 10,
        stop_on_convergence: false,
        ..TrainConfig::default()
    };
    let mut rises = 0;
    let mut total = 0.0;
    for (c, (_, data)) in corpus.train_sets().iter().enumerate() {
        let mut rng = RngStream::new(6).split(c as u64);
        let model = HmmModel::initialize(&ModelSpec::gmm(3, 3), data, &mut rng).map_err(e)?;
        let (_, log) = train_outer(model, data, &cfg).map_err(e)?;
        let ll: Vec<f64> = log.neg_log_likelihoods().iter().map(|v| -v).collect();
        if ll.len() != 11 {
            return Err(format!("class {c}: {} outer iterations", ll.len() - 1));
        }
        rises += ll.windows(2).filter(|w| w[1] - w[0] < -1e-8).count();
        total += ll[10];
    }
    if rises > 0 {
        return Err(format!("GMM-HMM log-likelihood fell {rises} times"));
    }

    // Flows frozen: only q, A and the mixture weights move.
    let (_, data) = &corpus.train_sets()[0];
    let mut rng = RngStream::new(66);
    let flows = (0..6).map(|_| random_flow(&nvp(2), 4, 0.1, &mut rng)).collect::<Result<Vec<_>, _>>().map_err(e)?;
    let em = NmmEmission::from_parts(3, 2, vec![-(2f64.ln()); 6], flows).map_err(e)?;
    let mut model = HmmModel::new(random_chain(3, &mut rng).map_err(e)?, EmissionModel::Nmm(em)).map_err(e)?;
    let mut trace = Vec::new();
    for _ in 0..=10 {
        let stats: Vec<_> = data.iter().map(|s| model.e_step(s)).collect::<Result<_, _>>().map_err(e)?;
        trace.push(stats.iter().map(|s| s.log_likelihood).sum::<f64>());
        model.chain.m_step(&stats).map_err(e)?;
        let EmissionModel::Nmm(n) = &mut model.emission else { unreachable!() };
        let upd = n.update_pi(&stats).map_err(e)?;
        n.set_log_weights(upd.log_weights).map_err(e)?;
    }
    if let Some(w) = trace.windows(2).find(|w| w[1] - w[0] < -1e-8) {
        return Err(format!("frozen-flow NMM-HMM fell from {} to {}", w[0], w[1]));
    }
    Ok(format!(
        "GMM-HMM 5 classes x 10 iterations (final total {total:.1}); NMM chain/weights {:.1} -> {:.1}",
        trace[0], trace[10]
    ))
}

fn identity_anchor() -> Outcome {
    let mut rng = RngStream::new(7);
    let (s, n, d) = (3, 2, 5);
    let chain = random_chain(s, &mut rng).map_err(e)?;
    let gmm = HmmModel::new(chain.clone(), EmissionModel::Gmm(GmmEmission::standard(s, n, d).map_err(e)?)).map_err(e)?;
    let mut worst: f64 = 0.0;
    for cfg in [nvp(4), glow(12)] {
        let em = NmmEmission::identity(s, n, d, &cfg, &mut rng).map_err(e)?;
        let flow = HmmModel::new(chain.clone(), EmissionModel::Nmm(em)).map_err(e)?;
        for _ in 0..100 {
            let t = 1 + rng.below(30);
            let seq = normal_seq(t, d, 2.0, &mut rng);
            let a = flow.log_likelihood(&seq).map_err(e)?;
            let b = gmm.log_likelihood(&seq).map_err(e)?;
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-10 {
        return Err(format!("deviation {worst:e} > 1e-10"));
    }
    Ok(format!("100 sequences per kind, max deviation {worst:.1e}"))
}

fn warped_ordering() -> Outcome {
    let seed = 1;
    let base = make_corpus(&DeskPreset::default(), seed).map_err(e)?;
    let corpus = make_warped_corpus(&base, &Warp::default()).map_err(e)?;
    let sets = corpus.train_sets();
    let xs: Vec<FeatureSequence> = corpus.test.iter().map(|u| u.features.clone()).collect();
    let ys: Vec<usize> = corpus.test.iter().map(|u| u.label).collect();
    let gcfg = TrainConfig {
        outer_iters: 20,
        seed,
        ..TrainConfig::default()
    };
    let ncfg = TrainConfig {
        outer_iters: 10,
        max_inner_iters: 10,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    };
    let models = |spec: ModelSpec, cfg: &TrainConfig| -> Result<Vec<HmmModel>, String> {
        Ok(train_class_set(&sets, &spec, cfg).map_err(e)?.into_iter().map(|m| m.0).collect())
    };
    let g = accuracy(&models(ModelSpec::gmm(3, 3), &gcfg)?, &corpus.labels, &xs, &ys)?;
    let n = accuracy(&models(ModelSpec::flow(3, 3, nvp(4)), &ncfg)?, &corpus.labels, &xs, &ys)?;
    let gap = 100.0 * (n - g);
    let msg = format!("N_mix 3: GMM-HMM {:.1}%, NVP-HMM {:.1}%, gap {gap:+.1} points", 100.0 * g, 100.0 * n);
    if gap < 3.0 {
        return Err(msg);
    }
    Ok(msg)
}

fn voting() -> Outcome {
    let mut rng = RngStream::new(9);
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                let votes = [a, b, c];
                let majority = [a, b, c].into_iter().find(|&l| votes.iter().filter(|&&v| v == l).count() >= 2);
                for _ in 0..20 {
                    let got = vote(&votes, &mut rng).map_err(e)?;
                    let fine = match majority {
                        Some(m) => got == m,
                        None => votes.contains(&got),
                    };
                    if !fine {
                        return Err(format!("{votes:?} voted {got}"));
                    }
                }
            }
        }
    }
    let trials = 10_000;
    let mut freq = [0usize; 3];
    for _ in 0..trials {
        freq[vote(&[2, 0, 1], &mut rng).map_err(e)?] += 1;
    }
    let worst = freq.iter().map(|&f| (f as f64 / trials as f64 - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    if worst > 0.02 {
        return Err(format!("disagreement frequencies {freq:?}"));
    }
    Ok(format!("27-row truth table exact, 10^4 ties split {freq:?}"))
}

fn robustness() -> Outcome {
    let seed = 1;
    let corpus = make_audio_corpus(&AudioPreset::default(), seed).map_err(e)?;
    let fc = FeatureConfig {
        deltas: false,
        ..FeatureConfig::default()
    };
    let feats = |ws: &[&Waveform]| -> Result<Vec<FeatureSequence>, String> {
        ws.iter().map(|w| extract_features(w, &fc).map_err(e)).collect()
    };
    let train = corpus
        .labels
        .iter()
        .enumerate()
        .map(|(c, l)| {
            let ws: Vec<&Waveform> = corpus.train.iter().filter(|u| u.label == c).map(|u| &u.waveform).collect();
            Ok((l.clone(), feats(&ws)?))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let ys: Vec<usize> = corpus.test.iter().map(|u| u.label).collect();
    let snrs = [25.0, 20.0, 15.0, 10.0];
    let mut conditions = vec![feats(&corpus.test.iter().map(|u| &u.waveform).collect::<Vec<_>>())?];
    for snr in snrs {
        let noisy = corpus
            .test
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let mut rng = RngStream::new(seed).split(1000 + i as u64);
                let n = gen_noise(NoiseKind::White, u.waveform.len(), u.waveform.sample_rate, &mut rng).map_err(e)?;
                Ok(mix_noise(&u.waveform, &n, snr, &mut rng).map_err(e)?.waveform)
            })
            .collect::<Result<Vec<_>, String>>()?;
        conditions.push(feats(&noisy.iter().collect::<Vec<_>>())?);
    }
    let gcfg = TrainConfig {
        outer_iters: 20,
        seed,
        ..TrainConfig::default()
    };
    let ncfg = TrainConfig {
        outer_iters: 5,
        max_inner_iters: 5,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    };
    let mut curves = Vec::new();
    for (name, spec, cfg) in [("GMM-HMM", ModelSpec::gmm(3, 2), &gcfg), ("NVP-HMM", ModelSpec::flow(3, 2, nvp(4)), &ncfg)] {
        let models: Vec<HmmModel> = train_class_set(&train, &spec, cfg).map_err(e)?.into_iter().map(|m| m.0).collect();
        let accs = conditions
            .iter()
            .map(|xs| accuracy(&models, &corpus.labels, xs, &ys))
            .collect::<Result<Vec<_>, String>>()?;
        curves.push((name, accs));
    }
    let show = |a: &[f64]| a.iter().map(|v| format!("{:.1}", 100.0 * v)).collect::<Vec<_>>().join("/");
    let msg = format!(
        "clean/25/20/15/10 dB: {} {}, {} {}",
        curves[0].0,
        show(&curves[0].1),
        curves[1].0,
        show(&curves[1].1)
    );
    for (name, accs) in &curves {
        if accs.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("{name} accuracy rose as SNR fell; {msg}"));
        }
    }
    let drop = |a: &[f64]| 100.0 * (a[0] - a[4]);
    if drop(&curves[1].1) > drop(&curves[0].1) + 2.0 {
        return Err(format!("flow model degrades faster; {msg}"));
    }
    Ok(msg)
}

fn determinism() -> Outcome {
    let preset = DeskPreset {
        classes: 1,
        train_per_class: 30,
        test_per_class: 1,
        ..DeskPreset::default()
    };
    let corpus = make_corpus(&preset, 11).map_err(e)?;
    let data: Vec<FeatureSequence> = corpus.train.iter().map(|u| u.features.clone()).collect();
    let dir = tempfile::tempdir().map_err(e)?;
    let bytes = |m: &HmmModel, name: &str| -> Result<Vec<u8>, String> {
        let p = dir.path().join(name);
        io::save_model(&p, m, &ModelInfo::default()).map_err(e)?;
        std::fs::read(p.join(io::PARAMS_FILE)).map_err(e)
    };
    for (spec, cfg) in [
        (ModelSpec::gmm(3, 2), TrainConfig::default()),
        (ModelSpec::flow(3, 2, nvp(2)), TrainConfig::for_flow(Some(FlowKind::Nvp))),
        (ModelSpec::flow(3, 1, glow(2)), TrainConfig::for_flow(Some(FlowKind::Glow))),
    ] {
        let cfg = TrainConfig {
            outer_iters: 4,
            max_inner_iters: 3,
            stop_on_convergence: false,
            seed: 5,
            ..cfg
        };
        let name = spec.kind.as_str();
        let (m1, l1) = fit(&spec, &data, &cfg, 0).map_err(e)?;
        let (m2, l2) = fit(&spec, &data, &cfg, 0).map_err(e)?;
        if bytes(&m1, "a")? != bytes(&m2, "b")? || !l1.same_trajectory(&l2) {
            return Err(format!("{name} retrain differs"));
        }

        let mut rng = RngStream::new(cfg.seed).split(0);
        let init = HmmModel::initialize(&spec, &data, &mut rng).map_err(e)?;
        let mut t = Trainer::with_rng(init, cfg.clone(), rng).map_err(e)?;
        t.outer_step(&data).map_err(e)?;
        t.outer_step(&data).map_err(e)?;
        let ck = dir.path().join(format!("ck-{name}"));
        io::save_checkpoint(&ck, &t.checkpoint(), Some("x")).map_err(e)?;
        drop(t);
        let restored = io::load_checkpoint(&ck).map_err(e)?;
        let mut resumed = Trainer::from_checkpoint(restored).map_err(e)?;
        resumed.run(&data, |_| Ok(())).map_err(e)?;
        let (m3, l3) = resumed.finish();
        if bytes(&m1, "a")? != bytes(&m3, "c")? || !l1.same_trajectory(&l3) {
            return Err(format!("{name} checkpoint resume differs"));
        }

        let p = dir.path().join(format!("rt-{name}"));
        io::save_model(&p, &m1, &ModelInfo::default()).map_err(e)?;
        if io::load_model(&p).map_err(e)?.0 != m1 {
            return Err(format!("{name} container round trip lossy"));
        }
        let log_path = dir.path().join(format!("{name}.jsonl"));
        io::write_train_log(&log_path, &l1).map_err(e)?;
        if !io::read_train_log(&log_path).map_err(e)?.same_trajectory(&l1) {
            return Err(format!("{name} training log round trip lossy"));
        }
    }

    let records: Vec<FeatureRecord> = corpus
        .train
        .iter()
        .map(|u| FeatureRecord {
            id: u.id.clone(),
            features: Matrix::from_vec(
                u.features.rows(),
                u.features.cols(),
                u.features.data().iter().map(|v| *v as f32 as f64).collect(),
            )
            .unwrap(),
        })
        .collect();
    let arc = dir.path().join("f.arc");
    io::write_features(&arc, &records).map_err(e)?;
    if io::read_features(&arc).map_err(e)? != records {
        return Err("feature archive round trip lossy".into());
    }
    let labels = vec!["a".to_string(), "b".to_string()];
    let manifest = Manifest::new(
        labels.clone(),
        (0..5)
            .map(|i| ManifestEntry {
                id: format!("u{i}"),
                path: "f.arc".into(),
                label: labels[i % 2].clone(),
            })
            .collect(),
    )
    .map_err(e)?;
    if Manifest::parse(&manifest.to_text()).map_err(e)? != manifest {
        return Err("manifest round trip lossy".into());
    }
    let mut rng = RngStream::new(12);
    let preds = PredictionFile {
        labels: labels.clone(),
        rows: (0..5)
            .map(|i| PredictionRow {
                id: format!("u{i}"),
                label: labels[i % 2].clone(),
                scores: vec![-1e3 * rng.uniform(), rng.normal()],
            })
            .collect(),
    };
    if PredictionFile::parse(&preds.to_text()).map_err(e)? != preds {
        return Err("prediction file round trip lossy".into());
    }
    Ok("GMM/NVP/Glow retrain and resume bitwise; containers, logs, archives, manifests, predictions lossless".into())
}

fn metrics() -> Outcome {
    let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut rng = RngStream::new(13);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 1 + rng.below(300);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let pred: Vec<usize> = truth.iter().map(|&t| if rng.uniform() < 0.6 { t } else { rng.below(3) }).collect();
        let r = evaluate(&pred, &truth, &labels).map_err(e)?;
        worst = worst.max((r.weighted_recall - r.accuracy).abs());
    }
    if worst > 1e-12 {
        return Err(format!("weighted recall differs from accuracy by {worst:e}"));
    }
    // truth a a b b c, predicted a b b c c:
    // a: P 1/1 R 1/2; b: P 1/2 R 1/2; c: P 1/2 R 1/1.
    let r = evaluate(&[0, 1, 1, 2, 2], &[0, 0, 1, 1, 2], &labels).map_err(e)?;
    let expected = [(1.0, 0.5, 2.0 / 3.0), (0.5, 0.5, 0.5), (0.5, 1.0, 2.0 / 3.0)];
    for (m, (p, rc, f)) in r.per_class.iter().zip(expected) {
        if (m.precision, m.recall, m.f1) != (p, rc, f) {
            return Err(format!("class {}: got {:?}", m.label, (m.precision, m.recall, m.f1)));
        }
    }
    if r.accuracy != 0.6 || r.confusion != vec![vec![1, 1, 0], vec![0, 1, 1], vec![0, 0, 1]] {
        return Err("accuracy or confusion mismatch".into());
    }
    let none = evaluate(&[1, 1], &[0, 0], &labels[..2].to_vec()).map_err(e)?;
    if (none.per_class[0].precision, none.per_class[0].f1, none.accuracy) != (0.0, 0.0, 0.0) {
        return Err("undefined ratios not reported as 0".into());
    }
    Ok(format!("max |weighted recall - accuracy| {worst:.1e}; hand cases exact"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, f64, fn() -> Outcome); 12] = [
        ("1 forward-backward vs enumeration", 10.0, enumeration),
        ("2 flow bijectivity", 10.0, bijectivity),
        ("3 log-det vs finite-difference Jacobian", 30.0, jacobian),
        ("4 gradient check", 60.0, gradients),
        ("5 density normalization", 60.0, normalization),
        ("6 EM monotonicity", 120.0, em_monotone),
        ("7 identity-flow anchor", 10.0, identity_anchor),
        ("8 NVP-HMM beats GMM-HMM on warped corpus", 900.0, warped_ordering),
        ("9 voting mechanics", 5.0, voting),
        ("10 graceful degradation under noise", 1200.0, robustness),
        ("11 determinism and persistence", 300.0, determinism),
        ("12 metric identities", f64::INFINITY, metrics),
    ];
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = Vec::new();
    for (name, budget, check) in criteria {
        let id = name.split(' ').next().unwrap();
        if only.as_deref().is_some_and(|o| !o.split(',').any(|x| x == id)) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        let result = match result {
            Ok(msg) if secs > budget => Err(format!("{msg}; took {secs:.1}s, budget {budget}s")),
            other => other,
        };
        // Written to the real stdout so the lines survive libtest capture.
        let line = match result {
            Ok(msg) => format!("PASS [{name}] {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed.push(name);
                format!("FAIL [{name}] {msg} ({secs:.1}s)")
            }
        };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
