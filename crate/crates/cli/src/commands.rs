use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowhmm::classify::{classify_all, evaluate, vote, ClassifierBank};
use flowhmm::features::{self, FeatureConfig, NoiseKind, Waveform};
use flowhmm::flow::{FlowConfig, GlowConfig, NvpConfig};
use flowhmm::hmm::FeatureSequence;
use flowhmm::io::{
    self, FeatureRecord, Manifest, ManifestEntry, ModelInfo, PredictionFile, PredictionRow,
};
use flowhmm::model::{HmmModel, ModelKind, ModelSpec};
use flowhmm::nmm::default_components;
use flowhmm::numerics::RngStream;
use flowhmm::synth::{self, AudioPreset, DeskPreset, Warp};
use flowhmm::trainer::{TrainConfig, Trainer};
use flowhmm::{par, selftest, Error};

use crate::settings::Settings;
use crate::{
    ClassifyArgs, CliError, EvalArgs, ExtractArgs, FuseArgs, MakeArgs, NoiseArgs, SelftestArgs, TrainArgs, WarpArgs,
};

const DEFAULT_STATES: usize = 3;
const DEFAULT_GMM_COMPONENTS: usize = 3;
const MODEL_SET_INDEX: &str = "models.tsv";
const TRAIN_LOG_FILE: &str = "train_log.jsonl";
const CHECKPOINT_DIR: &str = "checkpoint";

fn header(command: &str, seed: Option<u64>, settings: &Settings) {
    println!("# flowhmm {}", env!("CARGO_PKG_VERSION"));
    println!("# command: {command}");
    println!(
        "# formats: model v{}, features v{}",
        io::MODEL_FORMAT_VERSION,
        io::FEATURE_FORMAT_VERSION
    );
    match seed {
        Some(s) => println!("# seed: {s}"),
        None => println!("# seed: none"),
    }
    println!("# config: {}", settings.snapshot());
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Run(e.into()))
}

/// `*.wav` files of a directory, sorted by name.
fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::Run(Error::Empty("directory without .wav files")));
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Path of `target` as written into a manifest stored at `manifest`.
fn manifest_relative(manifest: &Path, target: &Path) -> Result<String, CliError> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    let rel = if let Ok(r) = target.strip_prefix(base) {
        r.to_path_buf()
    } else {
        std::fs::canonicalize(target)?
    };
    Ok(rel.to_string_lossy().into_owned())
}

fn load_data(path: &Path) -> Result<(Manifest, Vec<FeatureSequence>), CliError> {
    let m = Manifest::read(path)?;
    let data = io::load_manifest_features(path, &m)?;
    Ok((m, data))
}

pub fn extract(a: ExtractArgs, s: &mut Settings) -> Result<(), CliError> {
    let wav_dir: Option<PathBuf> = s.opt("wav-dir", a.wav_dir)?;
    let manifest: Option<PathBuf> = s.opt("manifest", a.manifest)?;
    let out: PathBuf = s.required("out", a.out)?;
    let manifest_out: Option<PathBuf> = s.opt("manifest-out", a.manifest_out)?;
    let cfg_path: Option<PathBuf> = s.opt("mfcc-config", a.mfcc_config)?;
    let no_deltas = s.switch("no-deltas", a.no_deltas)?;
    let no_cmvn = s.switch("no-cmvn", a.no_cmvn)?;
    let mut cfg: FeatureConfig = match &cfg_path {
        Some(p) => read_json(p)?,
        None => FeatureConfig::default(),
    };
    cfg.deltas &= !no_deltas;
    cfg.cmvn &= !no_cmvn;
    cfg.mfcc.validate()?;
    let items: Vec<(String, PathBuf, Option<String>)> = match (&wav_dir, &manifest) {
        (Some(d), None) => wav_files(d)?.into_iter().map(|p| (stem(&p), p, None)).collect(),
        (None, Some(m)) => {
            let man = Manifest::read(m)?;
            man.entries
                .iter()
                .map(|e| (e.id.clone(), io::resolve_path(m, e), Some(e.label.clone())))
                .collect()
        }
        _ => return Err(usage("give exactly one of --wav-dir and --manifest")),
    };
    if manifest_out.is_some() && manifest.is_none() {
        return Err(usage("--manifest-out needs --manifest for the labels"));
    }
    header("features extract", None, s);
    let records = par::try_map(&items, |(id, path, _)| {
        let w = features::read_wav(path)?;
        Ok(FeatureRecord {
            id: id.clone(),
            features: features::extract_features(&w, &cfg)?,
        })
    })?;
    io::write_features(&out, &records)?;
    let frames: usize = records.iter().map(|r| r.features.rows()).sum();
    println!("wrote {} utterances, {frames} frames of dimension {}", records.len(), cfg.dim());
    if let (Some(mo), Some(m)) = (&manifest_out, &manifest) {
        let labels = Manifest::read(m)?.labels;
        let path = manifest_relative(mo, &out)?;
        let entries = items
            .iter()
            .map(|(id, _, label)| ManifestEntry {
                id: id.clone(),
                path: path.clone(),
                label: label.clone().unwrap_or_default(),
            })
            .collect();
        Manifest::new(labels, entries)?.write(mo)?;
    }
    Ok(())
}

pub fn noise(a: NoiseArgs, s: &mut Settings) -> Result<(), CliError> {
    let input: PathBuf = s.required("in", a.input)?;
    let out: PathBuf = s.required("out", a.out)?;
    let snr: f64 = s.required("snr", a.snr)?;
    let kind: String = s.get("kind", a.kind, "white".into())?;
    let noise_file: Option<PathBuf> = s.opt("noise-file", a.noise_file)?;
    let seed: u64 = s.get("seed", a.seed, 0)?;
    let recording = match (kind.as_str(), &noise_file) {
        ("file", Some(p)) => Some(features::read_wav(p)?),
        ("file", None) => return Err(usage("--kind file needs --noise-file")),
        (_, Some(_)) => return Err(usage("--noise-file only applies to --kind file")),
        _ => None,
    };
    let generated: Option<NoiseKind> = match kind.as_str() {
        "file" => None,
        k => Some(k.parse().map_err(|e: Error| usage(e.to_string()))?),
    };
    let manifest = if input.is_dir() { None } else { Some(Manifest::read(&input)?) };
    let items: Vec<(String, PathBuf)> = match &manifest {
        None => wav_files(&input)?.into_iter().map(|p| (stem(&p), p)).collect(),
        Some(m) => m.entries.iter().map(|e| (e.id.clone(), io::resolve_path(&input, e))).collect(),
    };
    header("features noise", Some(seed), s);
    std::fs::create_dir_all(&out)?;
    let root = RngStream::new(seed);
    let clipped = par::try_map_indexed(items.len(), |i| {
        let (id, path) = &items[i];
        let speech = features::read_wav(path)?;
        let mut rng = root.split(i as u64);
        let noise: Waveform = match (&generated, &recording) {
            (Some(k), _) => features::gen_noise(*k, speech.len(), speech.sample_rate, &mut rng)?,
            (None, Some(r)) => r.clone(),
            (None, None) => unreachable!("noise source checked above"),
        };
        let mixed = features::mix_noise(&speech, &noise, snr, &mut rng)?;
        features::write_wav(&out.join(format!("{id}.wav")), &mixed.waveform)?;
        Ok(mixed.clipped)
    })?;
    let total: usize = clipped.iter().sum();
    println!("wrote {} noisy utterances at {snr} dB ({total} samples clipped)", items.len());
    if let Some(m) = manifest {
        let entries = m
            .entries
            .iter()
            .map(|e| ManifestEntry {
                path: format!("{}.wav", e.id),
                ..e.clone()
            })
            .collect();
        Manifest::new(m.labels.clone(), entries)?.write(&out.join("manifest.tsv"))?;
    }
    Ok(())
}

fn write_split(out: &Path, split: &str, labels: &[String], utts: &[synth::Utterance]) -> Result<(), CliError> {
    let archive = format!("{split}.arc");
    let records: Vec<FeatureRecord> = utts
        .iter()
        .map(|u| FeatureRecord {
            id: u.id.clone(),
            features: u.features.clone(),
        })
        .collect();
    io::write_features(&out.join(&archive), &records)?;
    let entries = utts
        .iter()
        .map(|u| ManifestEntry {
            id: u.id.clone(),
            path: archive.clone(),
            label: labels[u.label].clone(),
        })
        .collect();
    Manifest::new(labels.to_vec(), entries)?.write(&out.join(format!("{split}.tsv")))?;
    Ok(())
}

pub fn synth_make(a: MakeArgs, s: &mut Settings) -> Result<(), CliError> {
    let preset: String = s.get("preset", a.preset, "desk".into())?;
    let out: PathBuf = s.required("out", a.out)?;
    let seed: u64 = s.get("seed", a.seed, 0)?;
    let overrides: Option<PathBuf> = s.opt("preset-config", a.preset_config)?;
    std::fs::create_dir_all(&out)?;
    match preset.as_str() {
        "desk" => {
            let p: DeskPreset = match &overrides {
                Some(f) => read_json(f)?,
                None => DeskPreset::default(),
            };
            header("synth make", Some(seed), s);
            let corpus = synth::make_corpus(&p, seed)?;
            write_split(&out, "train", &corpus.labels, &corpus.train)?;
            write_split(&out, "test", &corpus.labels, &corpus.test)?;
            io::write_atomic(&out.join("preset.json"), serde_json::to_string_pretty(&p).unwrap_or_default().as_bytes())?;
            println!(
                "desk corpus: {} classes, {} train / {} test sequences",
                corpus.labels.len(),
                corpus.train.len(),
                corpus.test.len()
            );
        }
        "audio" => {
            let p: AudioPreset = match &overrides {
                Some(f) => read_json(f)?,
                None => AudioPreset::default(),
            };
            header("synth make", Some(seed), s);
            let corpus = synth::make_audio_corpus(&p, seed)?;
            let wav_dir = out.join("wav");
            std::fs::create_dir_all(&wav_dir)?;
            for (split, utts) in [("train", &corpus.train), ("test", &corpus.test)] {
                par::try_map(utts, |u| features::write_wav(&wav_dir.join(format!("{}.wav", u.id)), &u.waveform))?;
                let entries = utts
                    .iter()
                    .map(|u| ManifestEntry {
                        id: u.id.clone(),
                        path: format!("wav/{}.wav", u.id),
                        label: corpus.labels[u.label].clone(),
                    })
                    .collect();
                Manifest::new(corpus.labels.clone(), entries)?.write(&out.join(format!("{split}.tsv")))?;
            }
            io::write_atomic(&out.join("preset.json"), serde_json::to_string_pretty(&p).unwrap_or_default().as_bytes())?;
            println!(
                "audio corpus: {} classes, {} train / {} test utterances",
                corpus.labels.len(),
                corpus.train.len(),
                corpus.test.len()
            );
        }
        other => return Err(usage(format!("unknown preset '{other}' (desk or audio)"))),
    }
    Ok(())
}

pub fn synth_warp(a: WarpArgs, s: &mut Settings) -> Result<(), CliError> {
    let input: PathBuf = s.required("in", a.input)?;
    let out: PathBuf = s.required("out", a.out)?;
    let d = Warp::default();
    let warp = Warp {
        bend: s.get("bend", a.bend, d.bend)?,
        cubic: s.get("cubic", a.cubic, d.cubic)?,
    };
    warp.validate()?;
    header("synth warp", None, s);
    std::fs::create_dir_all(&out)?;
    for split in ["train", "test"] {
        let mpath = input.join(format!("{split}.tsv"));
        let (m, data) = load_data(&mpath)?;
        let utts: Vec<synth::Utterance> = m
            .entries
            .iter()
            .zip(data)
            .map(|(e, f)| synth::Utterance {
                id: e.id.clone(),
                label: m.label_index(&e.label).expect("validated manifest"),
                features: warp.apply_sequence(&f),
                states: None,
            })
            .collect();
        write_split(&out, split, &m.labels, &utts)?;
        println!("{split}: warped {} sequences", utts.len());
    }
    Ok(())
}

fn class_dir(c: usize) -> String {
    format!("class-{c:03}")
}

pub fn train(a: TrainArgs, s: &mut Settings) -> Result<(), CliError> {
    let kind: ModelKind = s
        .required::<String>("model", a.model)?
        .parse()
        .map_err(|e: Error| usage(e.to_string()))?;
    let data_path: PathBuf = s.required("data", a.data)?;
    let out: PathBuf = s.required("out", a.out)?;
    let states: usize = s.get("states", a.states, DEFAULT_STATES)?;
    let default_n = kind.flow_kind().map_or(DEFAULT_GMM_COMPONENTS, default_components);
    let components: usize = s.get("nmix", a.nmix, default_n)?;
    let base = TrainConfig::for_flow(kind.flow_kind());
    let config = TrainConfig {
        learning_rate: s.get("lr", a.lr, base.learning_rate)?,
        batch_size: s.get("batch", a.batch, base.batch_size)?,
        convergence_threshold: s.get("delta", a.delta, base.convergence_threshold)?,
        convergence_streak: s.get("streak", a.streak, base.convergence_streak)?,
        max_inner_iters: s.get("inner-max", a.inner_max, base.max_inner_iters)?,
        outer_iters: s.get("outer-iters", a.outer_iters, base.outer_iters)?,
        lr_decay_factor: s.get("lr-decay-factor", a.lr_decay_factor, base.lr_decay_factor)?,
        lr_decay_every: s.get("lr-decay-every", a.lr_decay_every, base.lr_decay_every)?,
        seed: s.get("seed", a.seed, base.seed)?,
        ..base
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let hidden_width: Option<usize> = s.opt("hidden-width", a.hidden_width)?;
    let flow = match kind {
        ModelKind::Gmm => None,
        ModelKind::Nvp => Some(FlowConfig::Nvp(NvpConfig {
            coupling_layers: s.get("coupling-layers", a.coupling_layers, NvpConfig::default().coupling_layers)?,
            hidden_width,
        })),
        ModelKind::Glow => Some(FlowConfig::Glow(GlowConfig {
            flow_steps: s.get("flow-steps", a.flow_steps, GlowConfig::default().flow_steps)?,
            hidden_width,
        })),
    };
    let spec = ModelSpec {
        kind,
        states,
        components,
        flow,
    };
    let checkpoint = s.switch("checkpoint", a.checkpoint)?;
    let resume = s.switch("resume", a.resume)?;
    let (manifest, data) = load_data(&data_path)?;
    header("train", Some(config.seed), s);

    let mut classes: Vec<Vec<FeatureSequence>> = vec![Vec::new(); manifest.labels.len()];
    for (e, seq) in manifest.entries.iter().zip(data) {
        classes[manifest.label_index(&e.label).expect("validated manifest")].push(seq);
    }
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(CliError::Run(Error::EmptyClass(manifest.labels[c].clone())));
    }
    std::fs::create_dir_all(&out)?;
    let start = Instant::now();
    let results = par::try_map_indexed(classes.len(), |c| {
        let dir = out.join(class_dir(c));
        let ckpt = dir.join(CHECKPOINT_DIR);
        let label = manifest.labels[c].as_str();
        let mut trainer = if resume && ckpt.join(io::METADATA_FILE).exists() {
            let mut cp = io::load_checkpoint(&ckpt)?;
            // Only the iteration budget may change between runs.
            let same = TrainConfig {
                outer_iters: config.outer_iters,
                ..cp.config.clone()
            } == config;
            if cp.model.spec() != spec || !same {
                return Err(Error::Invalid(format!(
                    "checkpoint for class '{label}' was made with different settings"
                )));
            }
            cp.config.outer_iters = config.outer_iters;
            Trainer::from_checkpoint(cp)?
        } else {
            let mut rng = RngStream::new(config.seed).split(c as u64);
            let model = HmmModel::initialize(&spec, &classes[c], &mut rng)?;
            Trainer::with_rng(model, config.clone(), rng)?
        };
        trainer.run(&classes[c], |cp| {
            if checkpoint {
                io::save_checkpoint(&ckpt, cp, Some(label))?;
            }
            Ok(())
        })?;
        let (model, log) = trainer.finish();
        let info = ModelInfo {
            label: Some(label.to_owned()),
            train_config: Some(config.clone()),
            seed: Some(config.seed),
        };
        io::save_model(&dir, &model, &info)?;
        io::write_train_log(&dir.join(TRAIN_LOG_FILE), &log)?;
        Ok(log)
    })?;
    let mut index = String::new();
    for (c, label) in manifest.labels.iter().enumerate() {
        index.push_str(&format!("{}\t{label}\n", class_dir(c)));
    }
    io::write_atomic(&out.join(MODEL_SET_INDEX), index.as_bytes())?;
    for (label, log) in manifest.labels.iter().zip(&results) {
        println!(
            "{label}\touter iterations {}\tfinal -log p {}",
            log.records.len(),
            log.final_neg_log_likelihood.map_or("n/a".into(), |v| format!("{v:.6}"))
        );
    }
    eprintln!("trained {} {} models in {:.1}s", results.len(), kind, start.elapsed().as_secs_f64());
    Ok(())
}

/// Expands model-set directories and single containers into (label, model).
fn load_models(dirs: &[PathBuf]) -> Result<(Vec<String>, Vec<HmmModel>), CliError> {
    let mut labels = Vec::new();
    let mut models = Vec::new();
    for d in dirs {
        let index = d.join(MODEL_SET_INDEX);
        let members: Vec<PathBuf> = if index.exists() {
            std::fs::read_to_string(&index)?
                .lines()
                .filter(|l| !l.is_empty())
                .map(|l| d.join(l.split('\t').next().unwrap_or_default()))
                .collect()
        } else {
            vec![d.clone()]
        };
        for m in members {
            let (model, info) = io::load_model(&m)?;
            let label = info
                .label
                .ok_or_else(|| usage(format!("model {} carries no class label", m.display())))?;
            labels.push(label);
            models.push(model);
        }
    }
    Ok((labels, models))
}

pub fn classify(a: ClassifyArgs, s: &mut Settings) -> Result<(), CliError> {
    let dirs: Vec<PathBuf> = s.required("models", (!a.models.is_empty()).then_some(a.models))?;
    let data_path: PathBuf = s.required("data", a.data)?;
    let out: PathBuf = s.required("out", a.out)?;
    header("classify", None, s);
    let (labels, models) = load_models(&dirs)?;
    let bank = ClassifierBank::new(labels.clone(), models)?;
    let (manifest, data) = load_data(&data_path)?;
    let preds = classify_all(&bank, &data)?;
    let rows = manifest
        .entries
        .iter()
        .zip(preds)
        .map(|(e, p)| PredictionRow {
            id: e.id.clone(),
            label: labels[p.label].clone(),
            scores: p.scores,
        })
        .collect::<Vec<_>>();
    let file = PredictionFile {
        labels: labels.clone(),
        rows,
    };
    file.write(&out)?;
    println!("classified {} utterances with {} class models", file.rows.len(), labels.len());
    Ok(())
}

pub fn fuse(a: FuseArgs, s: &mut Settings) -> Result<(), CliError> {
    let paths: Vec<PathBuf> = s.required("preds", (!a.preds.is_empty()).then_some(a.preds))?;
    let seed: u64 = s.get("seed", a.seed, 0)?;
    let out: PathBuf = s.required("out", a.out)?;
    if paths.len() < 2 {
        return Err(usage("fuse needs at least two prediction files"));
    }
    header("fuse", Some(seed), s);
    let files = paths.iter().map(|p| PredictionFile::read(p)).collect::<Result<Vec<_>, _>>()?;
    let labels = files[0].labels.clone();
    let mut lookups: Vec<HashMap<&str, usize>> = Vec::new();
    for (p, f) in paths.iter().zip(&files) {
        if f.labels != labels {
            return Err(CliError::Run(Error::Format(format!("{} uses a different label set", p.display()))));
        }
        if f.rows.len() != files[0].rows.len() {
            return Err(CliError::Run(Error::Format(format!("{} covers different utterances", p.display()))));
        }
        let idx = |l: &str| labels.iter().position(|x| x == l).expect("validated label");
        lookups.push(f.rows.iter().map(|r| (r.id.as_str(), idx(&r.label))).collect());
    }
    let root = RngStream::new(seed);
    let mut rows = Vec::with_capacity(files[0].rows.len());
    let mut agreed = 0;
    for (i, r) in files[0].rows.iter().enumerate() {
        let votes = lookups
            .iter()
            .zip(&paths)
            .map(|(l, p)| {
                l.get(r.id.as_str())
                    .copied()
                    .ok_or_else(|| CliError::Run(Error::Format(format!("{} lacks '{}'", p.display(), r.id))))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut rng = root.split(i as u64);
        let winner = vote(&votes, &mut rng)?;
        if votes.iter().filter(|v| **v == winner).count() >= 2 {
            agreed += 1;
        }
        rows.push(PredictionRow {
            id: r.id.clone(),
            label: labels[winner].clone(),
            scores: Vec::new(),
        });
    }
    let n = rows.len();
    PredictionFile { labels, rows }.write(&out)?;
    println!("fused {n} utterances from {} systems ({agreed} by majority)", paths.len());
    Ok(())
}

pub fn eval(a: EvalArgs, s: &mut Settings) -> Result<(), CliError> {
    let pred_path: PathBuf = s.required("pred", a.pred)?;
    let truth_path: PathBuf = s.required("truth", a.truth)?;
    let report: Option<PathBuf> = s.opt("report", a.report)?;
    let by_class = s.switch("by-class", a.by_class)?;
    header("eval", None, s);
    let preds = PredictionFile::read(&pred_path)?;
    let truth = Manifest::read(&truth_path)?;
    let by_id: HashMap<&str, &str> = preds.rows.iter().map(|r| (r.id.as_str(), r.label.as_str())).collect();
    let mut p = Vec::with_capacity(truth.entries.len());
    let mut t = Vec::with_capacity(truth.entries.len());
    for e in &truth.entries {
        let label = by_id
            .get(e.id.as_str())
            .ok_or_else(|| CliError::Run(Error::Format(format!("no prediction for '{}'", e.id))))?;
        let idx = truth
            .label_index(label)
            .ok_or_else(|| CliError::Run(Error::Format(format!("predicted label '{label}' is not in the truth label set"))))?;
        p.push(idx);
        t.push(truth.label_index(&e.label).expect("validated manifest"));
    }
    let r = evaluate(&p, &t, &truth.labels)?;
    let table = r.to_table(by_class);
    if let Some(path) = report {
        io::write_atomic(&path, table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

pub fn selftest(a: SelftestArgs, s: &mut Settings) -> Result<(), CliError> {
    let fast = s.switch("fast", a.fast)?;
    header("selftest", None, s);
    let outcomes = selftest::run(fast);
    let mut failed = 0;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        eprintln!("  {:.2}s", o.seconds);
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        return Err(CliError::Run(Error::Invalid(format!("{failed} self-test check(s) failed"))));
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}
