//! Audio frontend: band-limited resampling, centre trimming, log-amplitude
//! mel-spectrograms and WAV I/O.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub source_rate: u32,
    pub target_rate: u32,
    pub clip_seconds: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Amplitude floor; power is floored at its square.
    pub log_floor: f64,
    /// Time-axis length after padding or truncation.
    pub n_frames: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            source_rate: 22_050,
            target_rate: 12_000,
            clip_seconds: 29,
            n_fft: 512,
            hop: 256,
            n_mels: 96,
            f_min: 0.0,
            f_max: 6_000.0,
            log_floor: 1e-5,
            n_frames: 1366,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hop == 0 || self.hop > self.n_fft {
            return bad(format!("hop {} must be in 1..={}", self.hop, self.n_fft));
        }
        if self.n_fft < 2 {
            return bad("n_fft must be at least 2".into());
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= self.target_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= f_min < f_max <= {} (got {}..{})",
                self.target_rate as f64 / 2.0,
                self.f_min,
                self.f_max
            ));
        }
        if self.n_mels == 0 || self.n_frames == 0 || self.clip_seconds == 0 {
            return bad("n_mels, n_frames and clip_seconds must be positive".into());
        }
        if self.source_rate == 0 || self.target_rate == 0 {
            return bad("sample rates must be positive".into());
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    pub fn clip_samples(&self) -> usize {
        self.clip_seconds as usize * self.target_rate as usize
    }

    /// Lowest representable value, `20·log10(log_floor)`.
    pub fn floor_db(&self) -> f64 {
        20.0 * self.log_floor.log10()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `n_mels × n_frames` log-amplitude (dB) mel-spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Tensor,
    pub fingerprint: String,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term, q) = (1.0, 1.0, x * x / 4.0);
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

const HALF_TAPS: usize = 64;
const KAISER_BETA: f64 = 7.857;

/// Polyphase windowed-sinc resampling by the rational factor `to / from`.
/// Output sample `n` sits at input time `n · from / to`; edges replicate the
/// first and last sample. Each phase of the filter sums to one, so constant
/// signals pass unchanged.
pub fn resample(x: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Contract("cannot resample an empty signal".into()));
    }
    if from == 0 || to == 0 {
        return Err(Error::Config("sample rates must be positive".into()));
    }
    if from == to {
        return Ok(x.to_vec());
    }
    let g = gcd(from as u64, to as u64);
    let (up, down) = ((to as u64 / g) as usize, (from as u64 / g) as usize);
    // Cutoff below the lower Nyquist, in cycles per input sample.
    let cutoff = 0.92 * 0.5 * (to.min(from) as f64) / from as f64;
    let taps = 2 * HALF_TAPS;
    let norm = bessel_i0(KAISER_BETA);
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut w: Vec<f64> = (0..taps)
                .map(|j| {
                    let tau = frac - (j as f64 - HALF_TAPS as f64 + 1.0);
                    let r = tau / HALF_TAPS as f64;
                    if r.abs() >= 1.0 {
                        return 0.0;
                    }
                    let arg = 2.0 * cutoff * tau;
                    let sinc = if arg == 0.0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                    2.0 * cutoff * sinc * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
                })
                .collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            w
        })
        .collect();
    let n_out = ((x.len() as f64 * up as f64 / down as f64).round() as usize).max(1);
    let last = x.len() as isize - 1;
    let out = (0..n_out)
        .map(|n| {
            let pos = n * down;
            let (i0, p) = ((pos / up) as isize, pos % up);
            let base = i0 - HALF_TAPS as isize + 1;
            let w = &phases[p];
            if base >= 0 && base + taps as isize - 1 <= last {
                let seg = &x[base as usize..base as usize + taps];
                seg.iter().zip(w).map(|(a, b)| a * b).sum()
            } else {
                w.iter()
                    .enumerate()
                    .map(|(j, c)| c * x[(base + j as isize).clamp(0, last) as usize])
                    .sum()
            }
        })
        .collect();
    Ok(out)
}

/// Centred window of exactly `n` samples; shorter inputs are zero-padded
/// symmetrically (the extra sample, if any, goes after).
pub fn trim_center(x: &[f64], n: usize) -> Vec<f64> {
    if x.len() >= n {
        let start = (x.len() - n) / 2;
        return x[start..start + n].to_vec();
    }
    let left = (n - x.len()) / 2;
    let mut out = vec![0.0; n];
    out[left..left + x.len()].copy_from_slice(x);
    out
}

/// Power spectrogram `[frames][n_fft/2 + 1]` from a centred STFT with
/// reflection padding and a periodic Hann window.
pub fn power_spectrogram(x: &[f64], n_fft: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    let pad = n_fft / 2;
    if x.len() <= pad {
        return Err(Error::Contract(format!(
            "signal of {} samples is too short for reflection padding of {pad}",
            x.len()
        )));
    }
    let mut padded = Vec::with_capacity(x.len() + 2 * pad);
    padded.extend((1..=pad).rev().map(|i| x[i]));
    padded.extend_from_slice(x);
    padded.extend((0..pad).map(|i| x[x.len() - 2 - i]));
    let window: Vec<f64> = (0..n_fft).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos()).collect();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let frames = 1 + x.len() / hop;
    let bins = n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let seg = &padded[f * hop..f * hop + n_fft];
        for ((b, s), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.push(buf[..bins].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Filter centre frequencies in Hz.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// `n_mels × (n_fft/2 + 1)` bank of unit-peak triangular filters with centres
/// equally spaced on the HTK mel scale.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Tensor> {
    cfg.validate()?;
    let bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.target_rate as f64 / cfg.n_fft as f64;
    let mut data = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut data[m * bins..(m + 1) * bins];
        for (k, v) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *v = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
        }
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({l:.1}-{r:.1} Hz) covers no FFT bin; reduce n_mels or raise n_fft"
            )));
        }
    }
    Tensor::new([cfg.n_mels, bins], data)
}

/// Log-amplitude mel-spectrogram of one clip already at the target rate and
/// of exactly [`MelConfig::clip_samples`] samples.
pub fn mel_spectrogram(x: &[f64], cfg: &MelConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if x.len() != cfg.clip_samples() {
        return Err(Error::Dimension {
            op: "mel_spectrogram input",
            lhs: vec![x.len()],
            rhs: vec![cfg.clip_samples()],
        });
    }
    let fb = mel_filterbank(cfg)?;
    let power = power_spectrogram(x, cfg.n_fft, cfg.hop)?;
    let bins = cfg.n_fft / 2 + 1;
    let floor_p = cfg.log_floor * cfg.log_floor;
    let floor_db = cfg.floor_db();
    let frames = power.len();
    let (skip, left) = if frames >= cfg.n_frames {
        ((frames - cfg.n_frames) / 2, 0)
    } else {
        (0, (cfg.n_frames - frames) / 2)
    };
    let mut data = vec![floor_db; cfg.n_mels * cfg.n_frames];
    for (m, filt) in fb.data().chunks(bins).enumerate() {
        let support: Vec<(usize, f64)> = filt.iter().copied().enumerate().filter(|&(_, w)| w > 0.0).collect();
        for t in 0..cfg.n_frames.min(frames) {
            let p: f64 = support.iter().map(|&(k, w)| w * power[skip + t][k]).sum();
            data[m * cfg.n_frames + left + t] = 10.0 * p.max(floor_p).log10();
        }
    }
    Ok(Spectrogram {
        data: Tensor::new([cfg.n_mels, cfg.n_frames], data)?,
        fingerprint: cfg.fingerprint(),
    })
}

/// Resample from `rate`, trim to the clip length and compute the spectrogram.
pub fn featurize_samples(x: &[f64], rate: u32, cfg: &MelConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let y = resample(x, rate, cfg.target_rate)?;
    mel_spectrogram(&trim_center(&y, cfg.clip_samples()), cfg)
}

/// Mono samples in `[-1, 1]` and the sample rate; multi-channel audio is
/// averaged.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(|e| wav_error(path, e))?;
    let mono = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::file(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Writes mono 16-bit PCM, clipping to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

/// Cache sidecar stored next to each spectrogram file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStamp {
    pub config_fingerprint: String,
    pub source_sha256: String,
    pub shape: Vec<usize>,
}

pub fn stamp_path(out: &Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Featurizes one WAV file into a tensor file unless an up-to-date output
/// already exists. Returns whether work was done.
pub fn featurize_file(wav: &Path, out: &Path, cfg: &MelConfig) -> Result<bool> {
    let bytes = fs::read(wav).map_err(|e| Error::file(wav, e))?;
    let source_sha256 = hex(&Sha256::digest(&bytes));
    let config_fingerprint = cfg.fingerprint();
    let stamp_file = stamp_path(out);
    if out.exists() {
        if let Ok(text) = fs::read_to_string(&stamp_file) {
            if let Ok(old) = serde_json::from_str::<FeatureStamp>(&text) {
                if old.config_fingerprint == config_fingerprint && old.source_sha256 == source_sha256 {
                    return Ok(false);
                }
            }
        }
    }
    let (samples, rate) = read_wav(wav)?;
    let spec = featurize_samples(&samples, rate, cfg)?;
    spec.data.save(out)?;
    let stamp = FeatureStamp {
        config_fingerprint,
        source_sha256,
        shape: spec.data.shape().to_vec(),
    };
    fs::write(&stamp_file, serde_json::to_vec_pretty(&stamp)?).map_err(|e| Error::file(&stamp_file, e))?;
    Ok(true)
}
