//! MFCC front end, dynamic features, per-utterance normalization and
//! additive noise at a controlled SNR.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::FeatureSequence;
use crate::numerics::{Matrix, RngStream};

/// Mono audio with samples nominally in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("waveform"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfccConfig {
    pub num_ceps: usize,
    pub window_ms: f64,
    pub shift_ms: f64,
    pub num_mel_filters: usize,
    pub fft_size: usize,
    pub preemphasis: f64,
    pub low_hz: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub high_hz: Option<f64>,
    /// Filterbank energies are floored here before the logarithm.
    pub energy_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            num_ceps: 13,
            window_ms: 25.0,
            shift_ms: 10.0,
            num_mel_filters: 26,
            fft_size: 512,
            preemphasis: 0.97,
            low_hz: 0.0,
            high_hz: None,
            energy_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_ms > self.shift_ms && self.shift_ms > 0.0) {
            return Err(Error::invalid("MFCC window must be longer than the (positive) shift"));
        }
        if self.num_ceps == 0 || self.num_ceps > self.num_mel_filters {
            return Err(Error::invalid("need 1 ≤ cepstra ≤ mel filters"));
        }
        if !(self.energy_floor > 0.0) {
            return Err(Error::invalid("energy floor must be positive"));
        }
        Ok(())
    }

    /// `(window, shift)` in samples.
    pub fn frame_geometry(&self, sample_rate: u32) -> (usize, usize) {
        let sr = sample_rate as f64;
        let win = (self.window_ms * sr / 1000.0).round() as usize;
        let shift = (self.shift_ms * sr / 1000.0).round() as usize;
        (win.max(1), shift.max(1))
    }
}

/// `1 + ⌊(len − window)/shift⌋`, or `None` when `len < window`.
pub fn frame_count(len: usize, window: usize, shift: usize) -> Option<usize> {
    (len >= window).then(|| 1 + (len - window) / shift)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over the `fft/2 + 1` power-spectrum bins.
fn mel_filterbank(cfg: &MfccConfig, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    let nyquist = sample_rate as f64 / 2.0;
    let high = cfg.high_hz.unwrap_or(nyquist).min(nyquist);
    if !(cfg.low_hz >= 0.0 && cfg.low_hz < high) {
        return Err(Error::invalid("filterbank cutoffs must satisfy 0 ≤ low < high ≤ Nyquist"));
    }
    let (lo, hi) = (hz_to_mel(cfg.low_hz), hz_to_mel(high));
    let m = cfg.num_mel_filters;
    let edges: Vec<f64> = (0..m + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (m + 1) as f64))
        .collect();
    let bins = cfg.fft_size / 2 + 1;
    let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
    Ok((0..m)
        .map(|j| {
            let (l, c, r) = (edges[j], edges[j + 1], edges[j + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect())
}

/// `T × num_ceps` MFCCs, `c0` first.
pub fn extract_mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    let (win, shift) = cfg.frame_geometry(w.sample_rate);
    if win > cfg.fft_size {
        return Err(Error::invalid(format!(
            "window of {win} samples exceeds FFT size {}",
            cfg.fft_size
        )));
    }
    let frames = frame_count(w.len(), win, shift).ok_or_else(|| {
        Error::invalid(format!("waveform of {} samples is shorter than one {win}-sample window", w.len()))
    })?;
    let mut emph = w.samples.clone();
    for i in (1..emph.len()).rev() {
        emph[i] -= cfg.preemphasis * w.samples[i - 1];
    }
    let hamming: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (win as f64 - 1.0).max(1.0)).cos())
        .collect();
    let bank = mel_filterbank(cfg, w.sample_rate)?;
    let m = cfg.num_mel_filters;
    let dct: Vec<Vec<f64>> = (0..cfg.num_ceps)
        .map(|i| {
            let scale = if i == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            (0..m)
                .map(|j| scale * (PI * i as f64 * (j as f64 + 0.5) / m as f64).cos())
                .collect()
        })
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut out = Matrix::zeros(frames, cfg.num_ceps);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut log_mel = vec![0.0; m];
    for t in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (n, h) in hamming.iter().enumerate() {
            buf[n].re = emph[t * shift + n] * h;
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..cfg.fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for (lm, filt) in log_mel.iter_mut().zip(&bank) {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            *lm = e.max(cfg.energy_floor).ln();
        }
        for (c, basis) in out.row_mut(t).iter_mut().zip(&dct) {
            *c = basis.iter().zip(&log_mel).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

/// Regression deltas over `±2` frames with edge frames replicated.
pub fn deltas(feat: &FeatureSequence) -> FeatureSequence {
    let (t_len, d) = feat.shape();
    let mut out = Matrix::zeros(t_len, d);
    let at = |t: isize| feat.row(t.clamp(0, t_len as isize - 1) as usize);
    for t in 0..t_len as isize {
        let row = out.row_mut(t as usize);
        for n in 1..=2isize {
            let (plus, minus) = (at(t + n), at(t - n));
            for j in 0..d {
                row[j] += n as f64 * (plus[j] - minus[j]);
            }
        }
        row.iter_mut().for_each(|v| *v /= 10.0);
    }
    out
}

/// `[static, Δ, ΔΔ]` columns.
pub fn append_deltas(feat: &FeatureSequence) -> FeatureSequence {
    let d1 = deltas(feat);
    let d2 = deltas(&d1);
    let (t_len, d) = feat.shape();
    let mut out = Matrix::zeros(t_len, 3 * d);
    for t in 0..t_len {
        let row = out.row_mut(t);
        row[..d].copy_from_slice(feat.row(t));
        row[d..2 * d].copy_from_slice(d1.row(t));
        row[2 * d..].copy_from_slice(d2.row(t));
    }
    out
}

/// Variances at or below this count as zero in [`cmvn`].
pub const ZERO_VARIANCE: f64 = 1e-20;

/// Output of [`cmvn`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub features: FeatureSequence,
    /// Dimensions with zero variance: centered but not scaled.
    pub constant_dims: Vec<usize>,
}

/// Per-utterance, per-dimension zero mean and unit (population) variance.
pub fn cmvn(feat: &FeatureSequence) -> Result<Normalized> {
    let (t_len, d) = feat.shape();
    if t_len < 2 {
        return Err(Error::invalid("mean/variance normalization needs at least two frames"));
    }
    let n = t_len as f64;
    let mut mean = vec![0.0; d];
    for row in feat.iter_rows() {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in feat.iter_rows() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let constant_dims: Vec<usize> = (0..d).filter(|&j| var[j] <= ZERO_VARIANCE).collect();
    let mut out = feat.clone();
    for t in 0..t_len {
        for (j, x) in out.row_mut(t).iter_mut().enumerate() {
            *x -= mean[j];
            if var[j] > ZERO_VARIANCE {
                *x /= var[j].sqrt();
            }
        }
    }
    Ok(Normalized {
        features: out,
        constant_dims,
    })
}

/// How raw audio becomes model features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub mfcc: MfccConfig,
    pub deltas: bool,
    pub cmvn: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            mfcc: MfccConfig::default(),
            deltas: true,
            cmvn: true,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        self.mfcc.num_ceps * if self.deltas { 3 } else { 1 }
    }
}

/// MFCC, optional deltas, optional CMVN.
pub fn extract_features(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    let mut f = extract_mfcc(w, &cfg.mfcc)?;
    if cfg.deltas {
        f = append_deltas(&f);
    }
    if cfg.cmvn {
        f = cmvn(&f)?.features;
    }
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            other => Err(Error::invalid(format!("unknown noise kind '{other}'"))),
        }
    }
}

const NOISE_RMS: f64 = 0.1;

/// White Gaussian noise, or pink noise made by shaping a white spectrum by
/// `1/√f`. Both have RMS 0.1.
pub fn gen_noise(kind: NoiseKind, len: usize, sample_rate: u32, rng: &mut RngStream) -> Result<Waveform> {
    if len == 0 {
        return Err(Error::Empty("noise length"));
    }
    let white: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
    let mut samples = match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => {
            let mut planner = FftPlanner::<f64>::new();
            let mut buf: Vec<Complex<f64>> = white.iter().map(|&v| Complex::new(v, 0.0)).collect();
            planner.plan_fft_forward(len).process(&mut buf);
            for (k, c) in buf.iter_mut().enumerate() {
                let f = k.min(len - k);
                *c = if f == 0 { Complex::new(0.0, 0.0) } else { *c / (f as f64).sqrt() };
            }
            planner.plan_fft_inverse(len).process(&mut buf);
            buf.iter().map(|c| c.re).collect()
        }
    };
    let rms = mean_power(&samples).sqrt();
    if rms > 0.0 {
        samples.iter_mut().for_each(|v| *v *= NOISE_RMS / rms);
    }
    Waveform::new(samples, sample_rate)
}

/// Output of [`mix_noise`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub waveform: Waveform,
    /// The scaled noise actually added (before clipping).
    pub noise: Vec<f64>,
    /// Samples clipped to `±1`.
    pub clipped: usize,
}

/// Adds `noise`, scaled so that speech power over noise power is `snr_db`.
/// A noise recording at least as long as the speech contributes a
/// contiguous excerpt from a random offset; a shorter one is tiled from a
/// random offset.
pub fn mix_noise(speech: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut RngStream) -> Result<Mixed> {
    if speech.sample_rate != noise.sample_rate {
        return Err(Error::invalid(format!(
            "speech at {} Hz, noise at {} Hz",
            speech.sample_rate, noise.sample_rate
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("SNR must be finite"));
    }
    let ps = speech.power();
    if ps == 0.0 {
        return Err(Error::invalid("speech signal is silent (zero power)"));
    }
    let (n, m) = (speech.len(), noise.len());
    let segment: Vec<f64> = if m >= n {
        let off = rng.below(m - n + 1);
        noise.samples[off..off + n].to_vec()
    } else {
        let off = rng.below(m);
        (0..n).map(|i| noise.samples[(off + i) % m]).collect()
    };
    let pn = mean_power(&segment);
    if pn == 0.0 {
        return Err(Error::invalid("noise signal is silent (zero power)"));
    }
    let scale = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = segment.iter().map(|v| v * scale).collect();
    let mut clipped = 0;
    let samples = speech
        .samples
        .iter()
        .zip(&scaled)
        .map(|(s, v)| {
            let y = s + v;
            if y.abs() > 1.0 {
                clipped += 1;
                y.clamp(-1.0, 1.0)
            } else {
                y
            }
        })
        .collect();
    Ok(Mixed {
        waveform: Waveform::new(samples, speech.sample_rate)?,
        noise: scaled,
        clipped,
    })
}

/// Reads mono 16-bit PCM or 32-bit float WAV.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::format(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bits",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono 32-bit float WAV.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, sr: u32) -> Waveform {
        let n = (secs * sr as f64) as usize;
        Waveform::new(
            (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin()).collect(),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn frame_arithmetic() {
        let cfg = MfccConfig::default();
        assert_eq!(cfg.frame_geometry(16_000), (400, 160));
        let f = extract_mfcc(&sine(440.0, 1.0, 16_000), &cfg).unwrap();
        assert_eq!(f.shape(), (98, 13));
        for len in 400..1200 {
            for shift in [1, 7, 160] {
                assert_eq!(frame_count(len, 400, shift), Some(1 + (len - 400) / shift));
            }
        }
        assert_eq!(frame_count(399, 400, 160), None);
        let short = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(extract_mfcc(&short, &cfg).is_err());
    }

    #[test]
    fn tone_concentrates_cepstral_energy() {
        // the preemphasis tilt alone gives white noise a large c1
        let cfg = MfccConfig {
            preemphasis: 0.0,
            ..MfccConfig::default()
        };
        let tone = extract_mfcc(&sine(1000.0, 0.5, 16_000), &cfg).unwrap();
        let mut rng = RngStream::new(1);
        let noise = gen_noise(NoiseKind::White, 8000, 16_000, &mut rng).unwrap();
        let white = extract_mfcc(&noise, &cfg).unwrap();
        let energy = |f: &Matrix| -> f64 { f.iter_rows().map(|r| r[1..].iter().map(|c| c * c).sum::<f64>()).sum::<f64>() / f.rows() as f64 };
        assert!(energy(&tone) > 5.0 * energy(&white), "{} {}", energy(&tone), energy(&white));
    }

    #[test]
    fn silence_gives_identical_frames() {
        let w = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
        let f = extract_mfcc(&w, &MfccConfig::default()).unwrap();
        assert!(f.iter_rows().all(|r| r == f.row(0)));
        assert!(f.row(0).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn delta_cases() {
        let constant = Matrix::filled(7, 3, 2.5);
        let d = append_deltas(&constant);
        assert!(d.iter_rows().all(|r| r[3..].iter().all(|v| *v == 0.0)));
        let v = [0.5, -1.0];
        let ramp = Matrix::from_vec(8, 2, (0..8).flat_map(|t| v.map(|x| x * t as f64)).collect()).unwrap();
        let d = deltas(&ramp);
        for t in 2..6 {
            assert!((d[(t, 0)] - 0.5).abs() < 1e-15 && (d[(t, 1)] + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn deltas_match_regression_formula() {
        let mut rng = RngStream::new(2);
        let x = Matrix::from_vec(10, 2, (0..20).map(|_| rng.normal()).collect()).unwrap();
        let full = append_deltas(&x);
        let clamp = |t: i64| t.clamp(0, 9) as usize;
        let delta = |f: &dyn Fn(usize, usize) -> f64, t: usize, j: usize| {
            let mut num = 0.0;
            for n in 1..=2i64 {
                num += n as f64 * (f(clamp(t as i64 + n), j) - f(clamp(t as i64 - n), j));
            }
            num / (2.0 * (1.0 + 4.0))
        };
        let base = |t: usize, j: usize| x[(t, j)];
        let d1 = |t: usize, j: usize| delta(&base, t, j);
        for t in 0..10 {
            for j in 0..2 {
                assert!((full[(t, 2 + j)] - d1(t, j)).abs() < 1e-12);
                assert!((full[(t, 4 + j)] - delta(&d1, t, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cmvn_properties() {
        let mut rng = RngStream::new(3);
        let mut x = Matrix::from_vec(50, 3, (0..150).map(|_| 3.0 + 2.0 * rng.normal()).collect()).unwrap();
        for t in 0..50 {
            x[(t, 2)] = 7.0;
        }
        let n = cmvn(&x).unwrap();
        assert_eq!(n.constant_dims, vec![2]);
        for j in 0..2 {
            let m: f64 = n.features.iter_rows().map(|r| r[j]).sum::<f64>() / 50.0;
            let v: f64 = n.features.iter_rows().map(|r| (r[j] - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-10 && (v - 1.0).abs() < 1e-10);
        }
        assert!(n.features.iter_rows().all(|r| r[2] == 0.0));
        let again = cmvn(&n.features).unwrap();
        for (a, b) in again.features.data().iter().zip(n.features.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(cmvn(&Matrix::zeros(1, 3)).is_err());
        // utterance-global: normalizing halves separately differs
        let top = Matrix::from_rows(&(0..25).map(|t| x.row(t).to_vec()).collect::<Vec<_>>()).unwrap();
        assert_ne!(cmvn(&top).unwrap().features.row(0), n.features.row(0));
    }

    #[test]
    fn mixing_hits_requested_snr() {
        let mut rng = RngStream::new(4);
        let speech = sine(300.0, 0.25, 16_000);
        let noise = gen_noise(NoiseKind::White, 1000, 16_000, &mut rng).unwrap();
        for snr in [-5.0, 0.0, 10.0, 25.0] {
            let m = mix_noise(&speech, &noise, snr, &mut rng).unwrap();
            let measured = 10.0 * (speech.power() / mean_power(&m.noise)).log10();
            assert!((measured - snr).abs() < 0.1);
        }
        let quiet = mix_noise(&speech, &noise, 120.0, &mut rng).unwrap();
        let rms: f64 = quiet
            .waveform
            .samples
            .iter()
            .zip(&speech.samples)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / speech.len() as f64;
        assert!(rms.sqrt() < 1e-5);
        let silent = Waveform::new(vec![0.0; 100], 16_000).unwrap();
        assert!(mix_noise(&silent, &noise, 10.0, &mut rng).is_err());
        let loud = Waveform::new(vec![0.99; 4000], 16_000).unwrap();
        assert!(mix_noise(&loud, &noise, 0.0, &mut rng).unwrap().clipped > 0);
    }

    #[test]
    fn white_noise_is_uncorrelated() {
        let mut rng = RngStream::new(5);
        let w = gen_noise(NoiseKind::White, 1_000_000, 16_000, &mut rng).unwrap();
        let p = w.power();
        for lag in 1..4 {
            let c: f64 = w.samples.windows(lag + 1).map(|s| s[0] * s[lag]).sum::<f64>() / (w.len() - lag) as f64;
            assert!((c / p).abs() < 0.02);
        }
        let (mut r1, mut r2) = (RngStream::new(7), RngStream::new(7));
        for kind in [NoiseKind::White, NoiseKind::Pink] {
            assert_eq!(gen_noise(kind, 500, 16_000, &mut r1).unwrap(), gen_noise(kind, 500, 16_000, &mut r2).unwrap());
        }
    }

    #[test]
    fn pink_noise_slope() {
        let sr = 16_000;
        let mut rng = RngStream::new(6);
        let w = gen_noise(NoiseKind::Pink, 1 << 18, sr, &mut rng).unwrap();
        // averaged periodogram
        let seg = 4096;
        let mut psd = vec![0.0; seg / 2];
        let fft = FftPlanner::<f64>::new().plan_fft_forward(seg);
        for chunk in w.samples.chunks_exact(seg) {
            let mut buf: Vec<Complex<f64>> = chunk.iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft.process(&mut buf);
            for k in 0..seg / 2 {
                psd[k] += buf[k].norm_sqr();
            }
        }
        let band = |lo: f64| -> f64 {
            let hz = sr as f64 / seg as f64;
            let (a, b) = ((lo / hz) as usize, (2.0 * lo / hz) as usize);
            psd[a..b].iter().sum::<f64>() / (b - a) as f64
        };
        let mut f = 125.0;
        while f * 2.0 <= 4000.0 {
            let db = 10.0 * (band(f) / band(2.0 * f)).log10();
            assert!((db - 3.0103).abs() < 0.5, "{f} Hz: {db} dB");
            f *= 2.0;
        }
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = sine(200.0, 0.1, 8000);
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert!(back.samples.iter().zip(&w.samples).all(|(a, b)| *a == (*b as f32) as f64));
    }
}
