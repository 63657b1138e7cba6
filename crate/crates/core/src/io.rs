//! On-disk formats: model containers, feature archives, manifests,
//! prediction files and training logs.
//!
//! Model container: a directory holding `model.json` (metadata) and
//! `params.bin`:
//!
//! ```text
//! "NMMH" | u32 version | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 rank | rank × u64 dims | f64 LE payload
//! ```
//!
//! Feature archive:
//!
//! ```text
//! "NMMF" | u32 version | u32 record count
//! per record: u32 id length | id (UTF-8) | u32 T | u32 D | T·D × f32 LE, row-major
//! ```
//!
//! All integers are little-endian. Every file is written to a temporary
//! sibling and renamed into place.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowKind};
use crate::gmm::GmmEmission;
use crate::hmm::{FeatureSequence, MarkovChain};
use crate::model::{EmissionModel, HmmModel, ModelKind};
use crate::nmm::NmmEmission;
use crate::numerics::{Matrix, RngState, RngStream};
use crate::trainer::{AdamState, Checkpoint, OuterRecord, TrainConfig, TrainLog};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const FEATURE_FORMAT_VERSION: u32 = 1;
pub const PARAMS_MAGIC: [u8; 4] = *b"NMMH";
pub const FEATURES_MAGIC: [u8; 4] = *b"NMMF";
pub const METADATA_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "params.bin";

const MAX_RANK: usize = 8;

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Little-endian reader over a byte slice that reports truncation.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(format!(
                "{} truncated: needed {n} bytes at offset {}, {} left",
                self.what,
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(format!("{}: name is not UTF-8", self.what)))
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(format!("{}: bad magic", self.what)));
        }
        let found = self.u32()?;
        if found != version {
            return Err(Error::Version { found, expected: version });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(format!("{}: {} trailing bytes", self.what, self.remaining())));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len(), "string length")?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

// ---------------------------------------------------------------------------
// tensors

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("tensor '{name}': shape {shape:?} holds {} values", data.len())));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn encode_tensors(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&PARAMS_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, tensors.len(), "tensor count")?;
    for t in tensors {
        if t.shape.len() > MAX_RANK {
            return Err(Error::invalid(format!("tensor '{}' has rank {}", t.name, t.shape.len())));
        }
        put_str(&mut out, &t.name)?;
        put_u32(&mut out, t.shape.len(), "rank")?;
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut c = Cursor::new(bytes, "parameter file");
    c.header(PARAMS_MAGIC, MODEL_FORMAT_VERSION)?;
    let count = c.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        if rank > MAX_RANK {
            return Err(Error::format(format!("tensor '{name}' claims rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(c.u64()?).map_err(|_| Error::format("tensor dimension overflows"))?;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::format(format!("tensor '{name}' size overflows")))?;
            shape.push(d);
        }
        let bytes_needed = len
            .checked_mul(8)
            .ok_or_else(|| Error::format(format!("tensor '{name}' size overflows")))?;
        let payload = c.take(bytes_needed)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        // -inf is a legal log-probability; NaN and +inf never are.
        if data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::format(format!("tensor '{name}' holds NaN or +inf")));
        }
        out.push(Tensor { name, shape, data });
    }
    c.finish()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// model containers

/// Optional descriptive fields stored with a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelInfo {
    /// Class label the model was trained for.
    pub label: Option<String>,
    pub train_config: Option<TrainConfig>,
    pub seed: Option<u64>,
}

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    pub format_version: u32,
    pub kind: ModelKind,
    pub states: usize,
    pub dim: usize,
    pub components: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowConfig>,
    /// Per-flow actnorm initialization flags (Glow only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actnorm_initialized: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub tensors: Vec<TensorInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<CheckpointMetadata>,
}

/// Training state that is not a tensor. Adam moments live in `params.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetadata {
    pub adam_steps: Vec<u64>,
    pub rng: RngState,
    pub outer_done: usize,
    pub learning_rate: f64,
    pub outer_streak: usize,
    pub converged: bool,
    pub log: TrainLog,
}

fn flow_name(i: usize) -> String {
    format!("flow.{i}")
}

fn model_tensors(model: &HmmModel) -> Result<Vec<Tensor>> {
    let (s, d, n) = (model.num_states(), model.dim(), model.num_components());
    let mut t = vec![
        Tensor::new("chain.log_q", vec![s], model.chain.log_q().to_vec())?,
        Tensor::new("chain.log_a", vec![s, s], model.chain.log_a_matrix().into_data())?,
    ];
    match &model.emission {
        EmissionModel::Gmm(g) => {
            t.push(Tensor::new("gmm.log_weights", vec![s, n], g.all_log_weights().to_vec())?);
            t.push(Tensor::new("gmm.means", vec![s, n, d], g.all_means().to_vec())?);
            t.push(Tensor::new("gmm.log_vars", vec![s, n, d], g.all_log_vars().to_vec())?);
        }
        EmissionModel::Nmm(e) => {
            t.push(Tensor::new("nmm.log_weights", vec![s, n], e.all_log_weights().to_vec())?);
            for (i, f) in e.flows().iter().enumerate() {
                t.push(Tensor::new(flow_name(i), vec![f.num_params()], f.params())?);
            }
        }
    }
    Ok(t)
}

fn metadata_for(model: &HmmModel, info: &ModelInfo, tensors: &[Tensor]) -> ModelMetadata {
    let (flow, actnorm_initialized) = match &model.emission {
        EmissionModel::Gmm(_) => (None, None),
        EmissionModel::Nmm(e) => {
            let flags = (e.kind() == FlowKind::Glow).then(|| e.flows().iter().map(|f| !f.needs_data_init()).collect());
            (Some(e.flows()[0].config()), flags)
        }
    };
    ModelMetadata {
        format_version: MODEL_FORMAT_VERSION,
        kind: model.kind(),
        states: model.num_states(),
        dim: model.dim(),
        components: model.num_components(),
        flow,
        actnorm_initialized,
        label: info.label.clone(),
        train_config: info.train_config.clone(),
        seed: info.seed,
        tensors: tensors
            .iter()
            .map(|t| TensorInfo {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        checkpoint: None,
    }
}

fn write_container(dir: &Path, meta: &ModelMetadata, tensors: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = encode_tensors(tensors)?;
    let mut json = serde_json::to_string_pretty(meta)?;
    json.push('\n');
    write_atomic(&dir.join(PARAMS_FILE), &params)?;
    write_atomic(&dir.join(METADATA_FILE), json.as_bytes())
}

pub fn save_model(dir: &Path, model: &HmmModel, info: &ModelInfo) -> Result<()> {
    let tensors = model_tensors(model)?;
    let meta = metadata_for(model, info, &tensors);
    write_container(dir, &meta, &tensors)
}

/// Model container plus the optimizer and RNG state needed to resume.
pub fn save_checkpoint(dir: &Path, cp: &Checkpoint, label: Option<&str>) -> Result<()> {
    let mut tensors = model_tensors(&cp.model)?;
    for (i, a) in cp.adam.iter().enumerate() {
        tensors.push(Tensor::new(format!("adam.{i}.m"), vec![a.m.len()], a.m.clone())?);
        tensors.push(Tensor::new(format!("adam.{i}.v"), vec![a.v.len()], a.v.clone())?);
    }
    let info = ModelInfo {
        label: label.map(str::to_owned),
        train_config: Some(cp.config.clone()),
        seed: Some(cp.config.seed),
    };
    let mut meta = metadata_for(&cp.model, &info, &tensors);
    meta.checkpoint = Some(CheckpointMetadata {
        adam_steps: cp.adam.iter().map(|a| a.step).collect(),
        rng: cp.rng.clone(),
        outer_done: cp.outer_done,
        learning_rate: cp.learning_rate,
        outer_streak: cp.outer_streak,
        converged: cp.converged,
        log: cp.log.clone(),
    });
    write_container(dir, &meta, &tensors)
}

/// Parsed container: metadata and tensors, cross-checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: ModelMetadata,
    tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn read(dir: &Path) -> Result<Self> {
        let json = fs::read_to_string(dir.join(METADATA_FILE))?;
        let metadata: ModelMetadata = serde_json::from_str(&json)?;
        if metadata.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: metadata.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let list = decode_tensors(&fs::read(dir.join(PARAMS_FILE))?)?;
        let mut tensors = BTreeMap::new();
        for t in list {
            let name = t.name.clone();
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(format!("duplicate tensor '{name}'")));
            }
        }
        if tensors.len() != metadata.tensors.len() {
            return Err(Error::format(format!(
                "metadata lists {} tensors, parameter file holds {}",
                metadata.tensors.len(),
                tensors.len()
            )));
        }
        for info in &metadata.tensors {
            match tensors.get(&info.name) {
                None => return Err(Error::format(format!("tensor '{}' missing from parameter file", info.name))),
                Some(t) if t.shape != info.shape => {
                    return Err(Error::shape(format!(
                        "tensor '{}' is {:?} on disk, {:?} in metadata",
                        info.name, t.shape, info.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { metadata, tensors })
    }

    fn tensor(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::format(format!("tensor '{name}' missing")))?;
        if t.shape != shape {
            return Err(Error::shape(format!("tensor '{name}' is {:?}, expected {shape:?}", t.shape)));
        }
        Ok(&t.data)
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            label: self.metadata.label.clone(),
            train_config: self.metadata.train_config.clone(),
            seed: self.metadata.seed,
        }
    }

    pub fn model(&self) -> Result<HmmModel> {
        let m = &self.metadata;
        let (s, d, n) = (m.states, m.dim, m.components);
        let chain = MarkovChain::from_log(
            self.tensor("chain.log_q", &[s])?.to_vec(),
            Matrix::from_vec(s, s, self.tensor("chain.log_a", &[s, s])?.to_vec())?,
        )?;
        let emission = match m.kind {
            ModelKind::Gmm => {
                if m.flow.is_some() {
                    return Err(Error::format("GMM metadata carries a flow configuration"));
                }
                EmissionModel::Gmm(GmmEmission::new(
                    s,
                    n,
                    d,
                    self.tensor("gmm.log_weights", &[s, n])?.to_vec(),
                    self.tensor("gmm.means", &[s, n, d])?.to_vec(),
                    self.tensor("gmm.log_vars", &[s, n, d])?.to_vec(),
                )?)
            }
            kind => {
                let cfg = m.flow.ok_or_else(|| Error::format("flow model without flow configuration"))?;
                if Some(cfg.kind()) != kind.flow_kind() {
                    return Err(Error::format("flow configuration does not match model kind"));
                }
                let flags = match (&m.actnorm_initialized, cfg.kind()) {
                    (Some(f), FlowKind::Glow) if f.len() == s * n => Some(f),
                    (None, FlowKind::Nvp) => None,
                    _ => return Err(Error::format("actnorm flags missing or misplaced")),
                };
                // construction randomness is irrelevant: every parameter is overwritten
                let mut rng = RngStream::new(0);
                let mut flows = Vec::with_capacity(s * n);
                for i in 0..s * n {
                    let mut f = cfg.build(d, &mut rng)?;
                    f.set_params(self.tensor(&flow_name(i), &[f.num_params()])?)?;
                    if let Some(flags) = flags {
                        f.set_data_initialized(flags[i]);
                    }
                    flows.push(f);
                }
                let lw = self.tensor("nmm.log_weights", &[s, n])?.to_vec();
                EmissionModel::Nmm(NmmEmission::from_parts(s, n, lw, flows)?)
            }
        };
        HmmModel::new(chain, emission)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let cm = self
            .metadata
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::format("container holds no checkpoint"))?;
        let config = self
            .metadata
            .train_config
            .clone()
            .ok_or_else(|| Error::format("checkpoint without training configuration"))?;
        let model = self.model()?;
        let mut adam = Vec::with_capacity(cm.adam_steps.len());
        for (i, &step) in cm.adam_steps.iter().enumerate() {
            let m = self.tensor_any(&format!("adam.{i}.m"))?;
            let v = self.tensor(&format!("adam.{i}.v"), &[m.len()])?.to_vec();
            adam.push(AdamState { m, v, step });
        }
        Ok(Checkpoint {
            model,
            config,
            adam,
            rng: cm.rng.clone(),
            outer_done: cm.outer_done,
            learning_rate: cm.learning_rate,
            outer_streak: cm.outer_streak,
            converged: cm.converged,
            log: cm.log.clone(),
        })
    }

    fn tensor_any(&self, name: &str) -> Result<Vec<f64>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::format(format!("tensor '{name}' missing")))?;
        if t.shape.len() != 1 {
            return Err(Error::shape(format!("tensor '{name}' should be a vector")));
        }
        Ok(t.data.clone())
    }
}

pub fn load_model(dir: &Path) -> Result<(HmmModel, ModelInfo)> {
    let c = Container::read(dir)?;
    Ok((c.model()?, c.info()))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    Container::read(dir)?.checkpoint()
}

// ---------------------------------------------------------------------------
// feature archives

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub features: FeatureSequence,
}

pub fn encode_features(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&FEATURES_MAGIC);
    out.extend_from_slice(&FEATURE_FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, records.len(), "record count")?;
    for r in records {
        put_str(&mut out, &r.id)?;
        put_u32(&mut out, r.features.rows(), "frame count")?;
        put_u32(&mut out, r.features.cols(), "dimension")?;
        for (i, &v) in r.features.data().iter().enumerate() {
            if !v.is_finite() || v.abs() > f32::MAX as f64 {
                return Err(Error::NonFinite(format!(
                    "record '{}' value {v} at index {i} is not a finite 32-bit float",
                    r.id
                )));
            }
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut c = Cursor::new(bytes, "feature archive");
    c.header(FEATURES_MAGIC, FEATURE_FORMAT_VERSION)?;
    let count = c.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let id = c.string()?;
        let t = c.u32()? as usize;
        let d = c.u32()? as usize;
        let n = t
            .checked_mul(d)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::format(format!("record '{id}' size overflows")))?;
        let payload = c.take(n)?;
        let mut data = Vec::with_capacity(t * d);
        for b in payload.chunks_exact(4) {
            let v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::format(format!("record '{id}' holds a non-finite value")));
            }
            data.push(v as f64);
        }
        out.push(FeatureRecord {
            id,
            features: Matrix::from_vec(t, d, data)?,
        });
    }
    c.finish()?;
    Ok(out)
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    write_atomic(path, &encode_features(records)?)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    decode_features(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub label: String,
}

/// Tab-separated `id, path, label` lines under a `#labels:` header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub labels: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

const LABELS_HEADER: &str = "#labels:";

fn check_field(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        return Err(Error::invalid(format!("{what} {s:?} is empty or contains tabs/newlines")));
    }
    Ok(())
}

impl Manifest {
    pub fn new(labels: Vec<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { labels, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Empty("manifest label set"));
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            check_field(l, "label")?;
            if !seen.insert(l.as_str()) {
                return Err(Error::invalid(format!("label '{l}' declared twice")));
            }
        }
        let mut ids = HashSet::new();
        for e in &self.entries {
            check_field(&e.id, "utterance id")?;
            check_field(&e.path, "path")?;
            check_field(&e.label, "label")?;
            if !ids.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate utterance id '{}'", e.id)));
            }
            if !seen.contains(e.label.as_str()) {
                return Err(Error::invalid(format!("utterance '{}' has undeclared label '{}'", e.id, e.label)));
            }
        }
        Ok(())
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut labels = None;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix(LABELS_HEADER) {
                if labels.is_some() {
                    return Err(Error::format(format!("line {}: second #labels: header", no + 1)));
                }
                labels = Some(rest.split('\t').filter(|s| !s.is_empty()).map(str::to_owned).collect());
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::format(format!("line {}: expected 3 tab-separated fields", no + 1)));
            }
            entries.push(ManifestEntry {
                id: fields[0].to_owned(),
                path: fields[1].to_owned(),
                label: fields[2].to_owned(),
            });
        }
        let labels = labels.ok_or_else(|| Error::format("manifest lacks a #labels: header"))?;
        Self::new(labels, entries)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{LABELS_HEADER}\t{}\n", self.labels.join("\t"));
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.id, e.path, e.label));
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Resolves `entry.path` against the directory of `manifest_path`.
pub fn resolve_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    manifest_path.parent().unwrap_or(Path::new("")).join(p)
}

/// Features of every manifest entry, looked up by id in the archive its
/// path names. Each archive is read once.
pub fn load_manifest_features(manifest_path: &Path, manifest: &Manifest) -> Result<Vec<FeatureSequence>> {
    let mut archives: HashMap<PathBuf, HashMap<String, FeatureSequence>> = HashMap::new();
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let path = resolve_path(manifest_path, e);
        if !archives.contains_key(&path) {
            let recs = read_features(&path)?;
            archives.insert(path.clone(), recs.into_iter().map(|r| (r.id, r.features)).collect());
        }
        let f = archives[&path]
            .get(&e.id)
            .ok_or_else(|| Error::format(format!("utterance '{}' not found in {}", e.id, path.display())))?;
        out.push(f.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// predictions

/// One classified utterance; `scores` is empty for fused predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub label: String,
    pub scores: Vec<f64>,
}

/// `#labels:` header, then `id, predicted label, per-class scores…` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub labels: Vec<String>,
    pub rows: Vec<PredictionRow>,
}

impl PredictionFile {
    pub fn to_text(&self) -> String {
        let mut s = format!("{LABELS_HEADER}\t{}\n", self.labels.join("\t"));
        for r in &self.rows {
            s.push_str(&r.id);
            s.push('\t');
            s.push_str(&r.label);
            for v in &r.scores {
                s.push_str(&format!("\t{v:e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut labels: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix(LABELS_HEADER) {
                labels = Some(rest.split('\t').filter(|s| !s.is_empty()).map(str::to_owned).collect());
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 {
                return Err(Error::format(format!("line {}: expected id and label", no + 1)));
            }
            let scores = fields[2..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::format(format!("line {}: bad score {f:?}", no + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(PredictionRow {
                id: fields[0].to_owned(),
                label: fields[1].to_owned(),
                scores,
            });
        }
        let labels = labels.ok_or_else(|| Error::format("prediction file lacks a #labels: header"))?;
        let known: HashSet<&str> = labels.iter().map(String::as_str).collect();
        let mut ids = HashSet::new();
        for r in &rows {
            if !known.contains(r.label.as_str()) {
                return Err(Error::format(format!("prediction for '{}' has unknown label '{}'", r.id, r.label)));
            }
            if !r.scores.is_empty() && r.scores.len() != labels.len() {
                return Err(Error::format(format!("prediction for '{}' has {} scores", r.id, r.scores.len())));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::format(format!("duplicate prediction for '{}'", r.id)));
            }
        }
        Ok(Self { labels, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

// ---------------------------------------------------------------------------
// training logs

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FinalLine {
    final_neg_log_likelihood: f64,
}

/// One JSON object per outer iteration, then the final value if known.
pub fn train_log_to_jsonl(log: &TrainLog) -> Result<String> {
    let mut s = String::new();
    for r in &log.records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    if let Some(v) = log.final_neg_log_likelihood {
        s.push_str(&serde_json::to_string(&FinalLine {
            final_neg_log_likelihood: v,
        })?);
        s.push('\n');
    }
    Ok(s)
}

pub fn train_log_from_jsonl(text: &str) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    for (no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        if log.final_neg_log_likelihood.is_some() {
            return Err(Error::format(format!("line {}: record after the final value", no + 1)));
        }
        if let Ok(f) = serde_json::from_str::<FinalLine>(line) {
            log.final_neg_log_likelihood = Some(f.final_neg_log_likelihood);
        } else {
            log.records.push(serde_json::from_str::<OuterRecord>(line)?);
        }
    }
    Ok(log)
}

pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    write_atomic(path, train_log_to_jsonl(log)?.as_bytes())
}

pub fn read_train_log(path: &Path) -> Result<TrainLog> {
    train_log_from_jsonl(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, t: usize, d: usize, rng: &mut RngStream) -> FeatureRecord {
        FeatureRecord {
            id: id.into(),
            features: Matrix::from_vec(t, d, (0..t * d).map(|_| rng.normal()).collect()).unwrap(),
        }
    }

    #[test]
    fn tensor_codec_round_trip_and_truncation() {
        let t = vec![
            Tensor::new("a", vec![2, 2], vec![1.0, f64::NEG_INFINITY, -0.0, 1e-300]).unwrap(),
            Tensor::new("scalar", vec![], vec![3.5]).unwrap(),
        ];
        let bytes = encode_tensors(&t).unwrap();
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(encode_tensors(&back).unwrap(), bytes);
        for cut in [0, 3, 8, 11, bytes.len() - 1] {
            assert!(decode_tensors(&bytes[..cut]).is_err());
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_tensors(&long).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(decode_tensors(&v2), Err(Error::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn feature_archive_edge_cases() {
        assert_eq!(decode_features(&encode_features(&[]).unwrap()).unwrap(), vec![]);
        let mut rng = RngStream::new(4);
        let r = record("u", 5, 39, &mut rng);
        let back = decode_features(&encode_features(std::slice::from_ref(&r)).unwrap()).unwrap();
        for (a, b) in back[0].features.data().iter().zip(r.features.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bad = FeatureRecord {
            id: "big".into(),
            features: Matrix::from_vec(1, 1, vec![1e39]).unwrap(),
        };
        assert!(encode_features(&[bad]).is_err());
        let mut bytes = encode_features(&[r]).unwrap();
        bytes[0] = b'X';
        assert!(decode_features(&bytes).is_err());
    }

    #[test]
    fn manifest_parse_and_validate() {
        let text = "#labels:\ta\tb\nu1\tx.arc\ta\n# comment\nu2\tx.arc\tb\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.labels, ["a", "b"]);
        assert_eq!(m.to_text(), text.replace("# comment\n", ""));
        assert!(Manifest::parse("u1\tx\ta\n").is_err());
        assert!(Manifest::parse("#labels:\ta\nu1\tx\tz\n").is_err());
        assert!(Manifest::parse("#labels:\ta\nu1\tx\ta\nu1\ty\ta\n").is_err());
        assert!(Manifest::parse("#labels:\ta\nu1\tx\n").is_err());
    }

    #[test]
    fn prediction_file_round_trip() {
        let p = PredictionFile {
            labels: vec!["a".into(), "b".into()],
            rows: vec![
                PredictionRow {
                    id: "u1".into(),
                    label: "b".into(),
                    scores: vec![-12.25, -0.1 + 0.2],
                },
                PredictionRow {
                    id: "u2".into(),
                    label: "a".into(),
                    scores: vec![],
                },
            ],
        };
        assert_eq!(PredictionFile::parse(&p.to_text()).unwrap(), p);
    }
}
