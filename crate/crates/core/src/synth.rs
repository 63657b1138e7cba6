//! Synthetic corpora: sequences sampled from known HMMs, warped variants
//! that bend Gaussian state densities, and tone-segment audio for the noise
//! robustness protocol.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Waveform;
use crate::gmm::GmmEmission;
use crate::hmm::{FeatureSequence, MarkovChain};
use crate::model::{EmissionModel, HmmModel};
use crate::numerics::{Matrix, RngStream};
use crate::par;

/// Draws a state path from `q` and `A`, and one frame per state.
pub fn sample_hmm(model: &HmmModel, len: usize, rng: &mut RngStream) -> Result<(FeatureSequence, Vec<usize>)> {
    if len == 0 {
        return Err(Error::invalid("sequence length must be at least 1"));
    }
    let chain = &model.chain;
    let mut path = Vec::with_capacity(len);
    let mut data = Vec::with_capacity(len * model.dim());
    let mut s = rng.categorical_log(chain.log_q());
    for t in 0..len {
        if t > 0 {
            let row: Vec<f64> = (0..chain.num_states()).map(|j| chain.log_a(s, j)).collect();
            s = rng.categorical_log(&row);
        }
        path.push(s);
        data.extend(model.emission.sample(s, rng)?);
    }
    Ok((Matrix::from_vec(len, model.dim(), data)?, path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub label: usize,
    pub features: FeatureSequence,
    /// Generating state path, when known.
    pub states: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub labels: Vec<String>,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Groups utterances by label, in label order.
pub fn class_sets(labels: &[String], utts: &[Utterance]) -> Vec<(String, Vec<FeatureSequence>)> {
    labels
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let seqs = utts.iter().filter(|u| u.label == c).map(|u| u.features.clone()).collect();
            (name.clone(), seqs)
        })
        .collect()
}

impl Corpus {
    pub fn train_sets(&self) -> Vec<(String, Vec<FeatureSequence>)> {
        class_sets(&self.labels, &self.train)
    }
}

/// Generator layout for the desk-scale benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskPreset {
    pub classes: usize,
    pub states: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Standard deviation of the random state means.
    pub separation: f64,
    /// Self-transition probability of every non-final state.
    pub self_loop: f64,
}

impl Default for DeskPreset {
    fn default() -> Self {
        Self {
            classes: 5,
            states: 3,
            dim: 4,
            train_per_class: 200,
            test_per_class: 100,
            min_len: 20,
            max_len: 60,
            separation: 0.3,
            self_loop: 0.9,
        }
    }
}

impl DeskPreset {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.states == 0 || self.dim == 0 {
            return Err(Error::invalid("preset needs classes, states and dimensions"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("preset needs 1 ≤ min_len ≤ max_len"));
        }
        if !(0.0..1.0).contains(&self.self_loop) {
            return Err(Error::invalid("self-loop probability must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Left-to-right chain whose non-final states stay with `self_loop` and
/// otherwise advance by one.
pub fn banded_chain(states: usize, self_loop: f64) -> Result<MarkovChain> {
    let mut a = Matrix::zeros(states, states);
    for i in 0..states {
        if i + 1 < states {
            a[(i, i)] = self_loop;
            a[(i, i + 1)] = 1.0 - self_loop;
        } else {
            a[(i, i)] = 1.0;
        }
    }
    let mut q = vec![0.0; states];
    q[0] = 1.0;
    MarkovChain::from_probs(&q, &a)
}

/// One single-Gaussian-per-state HMM per class with random means
/// (`N(0, separation²)`) and variances (uniform in `[0.3, 1]`).
pub fn desk_generators(preset: &DeskPreset, seed: u64) -> Result<Vec<HmmModel>> {
    preset.validate()?;
    let root = RngStream::new(seed);
    (0..preset.classes)
        .map(|c| {
            let mut rng = root.split(c as u64);
            let (s, d) = (preset.states, preset.dim);
            let means: Vec<f64> = (0..s * d).map(|_| preset.separation * rng.normal()).collect();
            let log_vars: Vec<f64> = (0..s * d).map(|_| rng.uniform_range(0.3, 1.0).ln()).collect();
            let em = GmmEmission::new(s, 1, d, vec![0.0; s], means, log_vars)?;
            HmmModel::new(banded_chain(s, preset.self_loop)?, EmissionModel::Gmm(em))
        })
        .collect()
}

fn sample_split(
    gen: &HmmModel,
    label: usize,
    count: usize,
    preset: &DeskPreset,
    prefix: &str,
    rng: &mut RngStream,
) -> Result<Vec<Utterance>> {
    (0..count)
        .map(|i| {
            let len = preset.min_len + rng.below(preset.max_len - preset.min_len + 1);
            let (features, path) = sample_hmm(gen, len, rng)?;
            Ok(Utterance {
                id: format!("{prefix}-c{label}-{i:05}"),
                label,
                features,
                states: Some(path),
            })
        })
        .collect()
}

/// Samples train and test sequences from the given per-class generators.
pub fn sample_corpus(generators: &[HmmModel], preset: &DeskPreset, seed: u64) -> Result<Corpus> {
    let root = RngStream::new(seed).split(0xC0);
    let parts = par::try_map_indexed(generators.len(), |c| {
        let mut rng = root.split(c as u64);
        let train = sample_split(&generators[c], c, preset.train_per_class, preset, "train", &mut rng)?;
        let test = sample_split(&generators[c], c, preset.test_per_class, preset, "test", &mut rng)?;
        Ok((train, test))
    })?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (a, b) in parts {
        train.extend(a);
        test.extend(b);
    }
    Ok(Corpus {
        labels: (0..generators.len()).map(|c| format!("c{c}")).collect(),
        train,
        test,
    })
}

/// The desk benchmark: generators and samples from one seed.
pub fn make_corpus(preset: &DeskPreset, seed: u64) -> Result<Corpus> {
    let gens = desk_generators(preset, seed)?;
    sample_corpus(&gens, preset, seed)
}

/// Invertible frame warp. Coordinates are taken in pairs `(a, b)`:
///
/// ```text
/// a' = c(a)
/// b' = c(b + bend · a²)
/// c(u) = u + cubic · u³
/// ```
///
/// An unpaired last coordinate only gets `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Warp {
    pub cubic: f64,
    pub bend: f64,
}

impl Default for Warp {
    fn default() -> Self {
        Self { cubic: 0.0, bend: 2.0 }
    }
}

fn cubic(u: f64, a: f64) -> f64 {
    u + a * u * u * u
}

/// Real root of `u + a·u³ = y` for `a ≥ 0` (Cardano).
fn cubic_inverse(y: f64, a: f64) -> f64 {
    if a == 0.0 {
        return y;
    }
    let p = 1.0 / a;
    let q = -y / a;
    let disc = (q * q / 4.0 + p * p * p / 27.0).sqrt();
    let u = (-q / 2.0 + disc).cbrt() + (-q / 2.0 - disc).cbrt();
    // one Newton polish step
    u - (cubic(u, a) - y) / (1.0 + 3.0 * a * u * u)
}

impl Warp {
    pub fn identity() -> Self {
        Self { cubic: 0.0, bend: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cubic >= 0.0 && self.cubic.is_finite() && self.bend.is_finite()) {
            return Err(Error::invalid("warp needs a finite non-negative cubic term"));
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for pair in y.chunks_mut(2) {
            let a = pair[0];
            pair[0] = cubic(a, self.cubic);
            if pair.len() == 2 {
                pair[1] = cubic(pair[1] + self.bend * a * a, self.cubic);
            }
        }
        y
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let mut x = y.to_vec();
        for pair in x.chunks_mut(2) {
            let a = cubic_inverse(pair[0], self.cubic);
            pair[0] = a;
            if pair.len() == 2 {
                pair[1] = cubic_inverse(pair[1], self.cubic) - self.bend * a * a;
            }
        }
        x
    }

    pub fn apply_sequence(&self, seq: &FeatureSequence) -> FeatureSequence {
        let data: Vec<f64> = seq.iter_rows().flat_map(|r| self.apply(r)).collect();
        Matrix::from_vec(seq.rows(), seq.cols(), data).expect("shape preserved")
    }
}

/// Passes every frame through `warp`; ids, labels and paths are kept.
pub fn make_warped_corpus(base: &Corpus, warp: &Warp) -> Result<Corpus> {
    warp.validate()?;
    let map = |utts: &[Utterance]| -> Vec<Utterance> {
        par::map(utts, |u| Utterance {
            features: warp.apply_sequence(&u.features),
            ..u.clone()
        })
    };
    Ok(Corpus {
        labels: base.labels.clone(),
        train: map(&base.train),
        test: map(&base.test),
    })
}

/// Layout of the tone-segment audio corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioPreset {
    pub classes: usize,
    pub segments: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sample_rate: u32,
    pub min_segment_ms: f64,
    pub max_segment_ms: f64,
    /// Relative frequency jitter per utterance.
    pub jitter: f64,
}

impl Default for AudioPreset {
    fn default() -> Self {
        Self {
            classes: 10,
            segments: 3,
            train_per_class: 60,
            test_per_class: 40,
            sample_rate: 8000,
            min_segment_ms: 60.0,
            max_segment_ms: 140.0,
            jitter: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioUtterance {
    pub id: String,
    pub label: usize,
    pub waveform: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioCorpus {
    pub labels: Vec<String>,
    pub train: Vec<AudioUtterance>,
    pub test: Vec<AudioUtterance>,
}

/// Per class and segment: two "formant" frequencies and their amplitudes.
type SegmentRecipe = [(f64, f64); 2];

fn audio_recipes(preset: &AudioPreset, rng: &mut RngStream) -> Vec<Vec<SegmentRecipe>> {
    let nyq = preset.sample_rate as f64 / 2.0;
    (0..preset.classes)
        .map(|_| {
            (0..preset.segments)
                .map(|_| {
                    let f1 = rng.uniform_range(200.0, 0.3 * nyq);
                    let f2 = rng.uniform_range(0.3 * nyq, 0.85 * nyq);
                    [(f1, rng.uniform_range(0.2, 0.4)), (f2, rng.uniform_range(0.05, 0.2))]
                })
                .collect()
        })
        .collect()
}

fn render(recipe: &[SegmentRecipe], preset: &AudioPreset, rng: &mut RngStream) -> Result<Waveform> {
    let sr = preset.sample_rate as f64;
    let mut samples = Vec::new();
    let scale = 1.0 + preset.jitter * rng.normal();
    for seg in recipe {
        let ms = rng.uniform_range(preset.min_segment_ms, preset.max_segment_ms);
        let n = (ms * sr / 1000.0) as usize;
        let parts: Vec<(f64, f64, f64)> = seg
            .iter()
            .map(|&(f, a)| (f * scale * (1.0 + 0.5 * preset.jitter * rng.normal()), a, rng.uniform_range(0.0, 2.0 * PI)))
            .collect();
        for i in 0..n {
            // raised-cosine fade over the segment keeps boundaries smooth
            let env = 0.6 - 0.4 * (2.0 * PI * i as f64 / n as f64).cos();
            let t = i as f64 / sr;
            let v: f64 = parts.iter().map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum();
            samples.push(env * v + 0.003 * rng.normal());
        }
    }
    Waveform::new(samples, preset.sample_rate)
}

/// Class-specific sequences of two-tone segments with random durations,
/// pitch jitter and a faint noise floor.
pub fn make_audio_corpus(preset: &AudioPreset, seed: u64) -> Result<AudioCorpus> {
    if preset.classes == 0 || preset.segments == 0 || preset.min_segment_ms > preset.max_segment_ms {
        return Err(Error::invalid("audio preset needs classes, segments and a valid duration range"));
    }
    let root = RngStream::new(seed);
    let recipes = audio_recipes(preset, &mut root.split(u64::MAX));
    let parts = par::try_map_indexed(preset.classes, |c| {
        let mut rng = root.split(c as u64);
        let mut make = |split: &str, count: usize| -> Result<Vec<AudioUtterance>> {
            (0..count)
                .map(|i| {
                    Ok(AudioUtterance {
                        id: format!("{split}-c{c}-{i:05}"),
                        label: c,
                        waveform: render(&recipes[c], preset, &mut rng)?,
                    })
                })
                .collect()
        };
        let train = make("train", preset.train_per_class)?;
        let test = make("test", preset.test_per_class)?;
        Ok((train, test))
    })?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (a, b) in parts {
        train.extend(a);
        test.extend(b);
    }
    Ok(AudioCorpus {
        labels: (0..preset.classes).map(|c| format!("c{c}")).collect(),
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DeskPreset {
        DeskPreset {
            classes: 2,
            train_per_class: 5,
            test_per_class: 3,
            ..DeskPreset::default()
        }
    }

    #[test]
    fn single_state_and_absorbing_paths() {
        let em = GmmEmission::standard(1, 1, 2).unwrap();
        let m = HmmModel::new(MarkovChain::left_to_right(1).unwrap(), EmissionModel::Gmm(em)).unwrap();
        let mut rng = RngStream::new(1);
        let (x, path) = sample_hmm(&m, 30, &mut rng).unwrap();
        assert_eq!(x.shape(), (30, 2));
        assert!(path.iter().all(|s| *s == 0));
        let chain = banded_chain(3, 0.5).unwrap();
        let m = HmmModel::new(chain, EmissionModel::Gmm(GmmEmission::standard(3, 1, 1).unwrap())).unwrap();
        let (_, path) = sample_hmm(&m, 200, &mut rng).unwrap();
        let first = path.iter().position(|s| *s == 2).unwrap();
        assert!(path[first..].iter().all(|s| *s == 2));
        assert!(path.windows(2).all(|w| w[1] >= w[0]));
        assert!(sample_hmm(&m, 0, &mut rng).is_err());
    }

    #[test]
    fn transition_counts_match_matrix() {
        let a = Matrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.3, 0.3, 0.4], vec![0.25, 0.25, 0.5]]).unwrap();
        let chain = MarkovChain::from_probs(&[1.0, 0.0, 0.0], &a).unwrap();
        let m = HmmModel::new(chain, EmissionModel::Gmm(GmmEmission::standard(3, 1, 1).unwrap())).unwrap();
        let mut rng = RngStream::new(2);
        let (_, path) = sample_hmm(&m, 100_000, &mut rng).unwrap();
        let mut counts = [[0.0f64; 3]; 3];
        for w in path.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
        for i in 0..3 {
            let n: f64 = counts[i].iter().sum();
            for j in 0..3 {
                let p = a[(i, j)];
                let se = (p * (1.0 - p) / n).sqrt();
                assert!((counts[i][j] / n - p).abs() < 3.0 * se, "{i}{j}");
            }
        }
    }

    #[test]
    fn corpus_is_reproducible() {
        let a = make_corpus(&tiny(), 3).unwrap();
        let b = make_corpus(&tiny(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 10);
        assert!(a.train.iter().all(|u| (20..=60).contains(&u.features.rows())));
        assert_ne!(make_corpus(&tiny(), 4).unwrap(), a);
    }

    #[test]
    fn warps_are_invertible() {
        let base = make_corpus(&tiny(), 5).unwrap();
        assert_eq!(make_warped_corpus(&base, &Warp::identity()).unwrap(), base);
        let warp = Warp { cubic: 0.3, bend: -0.8 };
        let warped = make_warped_corpus(&base, &warp).unwrap();
        for (u, w) in base.train.iter().zip(&warped.train) {
            assert_eq!((u.label, &u.states), (w.label, &w.states));
            for t in 0..u.features.rows() {
                let back = warp.invert(w.features.row(t));
                for (a, b) in back.iter().zip(u.features.row(t)) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
        let odd = Warp::default();
        let x = [0.3, -2.0, 1.7];
        let back = odd.invert(&odd.apply(&x));
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn audio_corpus_shapes() {
        let p = AudioPreset {
            classes: 2,
            train_per_class: 2,
            test_per_class: 1,
            ..AudioPreset::default()
        };
        let c = make_audio_corpus(&p, 1).unwrap();
        assert_eq!((c.train.len(), c.test.len()), (4, 2));
        assert!(c.train.iter().all(|u| u.waveform.samples.iter().all(|v| v.abs() < 1.0)));
        assert_eq!(c, make_audio_corpus(&p, 1).unwrap());
    }
}
