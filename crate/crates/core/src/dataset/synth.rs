//! Synthetic tagged audio. Every tag owns an acoustic signature tied to its
//! category, so tags are learnable from mel-spectrograms by construction:
//!
//! - instrument: a harmonic chord on the tag's home frequency
//! - mood: a tone on the home frequency, amplitude-modulated at a tag rate
//! - genre: noise band-passed around the home frequency
//! - era: broadband noise with a tag-specific spectral tilt

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{write_table, Category, Example, TagVocabulary, TaggedDataset, REFERENCE_CLIPS};
use crate::audio::write_wav;
use crate::error::{Error, Result};
use crate::SeededRng;

pub const AUDIO_COLUMN: &str = "audio_path";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub seconds: f64,
    /// Lower bound on positives per tag.
    pub min_positives: usize,
    /// RMS of the white background noise.
    pub background: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 512,
            seed: 0,
            sample_rate: 22_050,
            seconds: 29.0,
            min_positives: 8,
            background: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic corpus needs n >= 1".into()));
        }
        if !(self.seconds > 0.0) || self.sample_rate < 2_000 {
            return Err(Error::Config("clip length and sample rate must be positive".into()));
        }
        Ok(())
    }
}

const HOME_LO: f64 = 200.0;
const HOME_HI: f64 = 4_500.0;
const SLOT_STRIDE: usize = 17;

/// Home frequency of tag `k`: one of `n_tags` mel-spaced slots, assigned by a
/// fixed permutation so neighbouring popularity ranks sit apart.
pub fn home_frequency(k: usize, n_tags: usize) -> f64 {
    let slot = (k * SLOT_STRIDE) % n_tags;
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let (lo, hi) = (mel(HOME_LO), mel(HOME_HI));
    let m = lo + (hi - lo) * slot as f64 / (n_tags - 1) as f64;
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Positives per tag: the vocabulary's counts scaled to `n`, floored at
/// `min_positives` and capped at `n`.
pub fn popularity_targets(vocab: &TagVocabulary, n: usize, min_positives: usize) -> Vec<usize> {
    vocab
        .tags()
        .iter()
        .map(|t| {
            let scaled = (n as f64 * t.count as f64 / REFERENCE_CLIPS as f64).round() as usize;
            scaled.max(min_positives).min(n)
        })
        .collect()
}

/// Label matrix with exactly the target count of positives per tag and at
/// least one positive per example.
pub fn generate_labels(cfg: &SynthConfig, vocab: &TagVocabulary) -> Result<Vec<Vec<u8>>> {
    cfg.validate()?;
    let targets = popularity_targets(vocab, cfg.n, cfg.min_positives);
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let mut labels = vec![vec![0u8; vocab.len()]; cfg.n];
    for (k, &t) in targets.iter().enumerate() {
        for i in sample(&mut rng, cfg.n, t) {
            labels[i][k] = 1;
        }
    }
    let mut tags: Vec<usize> = (0..vocab.len()).collect();
    for i in 0..cfg.n {
        if labels[i].contains(&1) {
            continue;
        }
        tags.shuffle(&mut rng);
        let moved = tags.iter().find_map(|&k| {
            let donors: Vec<usize> = (0..cfg.n)
                .filter(|&j| labels[j][k] == 1 && labels[j].iter().filter(|&&l| l == 1).count() >= 2)
                .collect();
            donors.choose(&mut rng).map(|&j| (j, k))
        });
        let Some((j, k)) = moved else {
            return Err(Error::Config(format!(
                "{} examples need more positives than the popularity profile provides",
                cfg.n
            )));
        };
        labels[j][k] = 0;
        labels[i][k] = 1;
    }
    Ok(labels)
}

/// Rank of `k` among the tags of its category, and the category size.
fn category_rank(vocab: &TagVocabulary, k: usize) -> (usize, usize) {
    let cat = vocab.tags()[k].category;
    let members: Vec<usize> = (0..vocab.len()).filter(|&j| vocab.tags()[j].category == cat).collect();
    (members.iter().position(|&j| j == k).expect("member"), members.len())
}

fn spread(rank: usize, count: usize, lo: f64, hi: f64) -> f64 {
    if count <= 1 {
        return 0.5 * (lo + hi);
    }
    lo + (hi - lo) * rank as f64 / (count - 1) as f64
}

const TONE_RMS: f64 = 0.1;
const BAND_RMS: f64 = 0.1;
const TILT_RMS: f64 = 0.08;
const BAND_OCTAVES: f64 = 0.25;

/// Audio of example `index` with the given label row. Deterministic in
/// `(cfg.seed, index, labels)`.
pub fn synthesize_clip(index: usize, labels: &[u8], vocab: &TagVocabulary, cfg: &SynthConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let sr = cfg.sample_rate as f64;
    let len = (cfg.seconds * sr).round() as usize;
    let mut tonal = vec![0.0; len];
    let bins = len;
    let bin_hz = sr / len as f64;
    let freq_of = |b: usize| (b.min(len - b)) as f64 * bin_hz;
    let mut response = vec![0.0; bins];
    let unit_rms = |h: &mut [f64]| {
        let ms = h.iter().map(|v| v * v).sum::<f64>() / h.len() as f64;
        if ms > 0.0 {
            let s = ms.sqrt();
            h.iter_mut().for_each(|v| *v /= s);
        }
    };
    let mut white = vec![1.0; bins];
    unit_rms(&mut white);
    for (r, w) in response.iter_mut().zip(&white) {
        *r += cfg.background * w;
    }
    for (k, &on) in labels.iter().enumerate() {
        if on == 0 {
            continue;
        }
        let gain = rng.random_range(0.6..1.0);
        let f0 = home_frequency(k, vocab.len());
        let (rank, count) = category_rank(vocab, k);
        match vocab.tags()[k].category {
            Category::Instrument => {
                let amps = [1.0, 0.5, 1.0 / 3.0];
                let norm = (amps.iter().map(|a| a * a).sum::<f64>() / 2.0).sqrt();
                for (h, a) in amps.iter().enumerate() {
                    let f = f0 * (h + 1) as f64;
                    if f >= sr / 2.0 {
                        continue;
                    }
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let amp = TONE_RMS * gain * a / norm;
                    for (i, v) in tonal.iter_mut().enumerate() {
                        *v += amp * (2.0 * PI * f * i as f64 / sr + phase).sin();
                    }
                }
            }
            Category::Mood => {
                let rate = spread(rank, count, 1.0, 8.0);
                let (phase, mphase) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
                // RMS of sin · (1 + sin)/2 is sqrt(3/16).
                let amp = TONE_RMS * gain / (3.0f64 / 16.0).sqrt();
                for (i, v) in tonal.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    let env = 0.5 + 0.5 * (2.0 * PI * rate * t + mphase).sin();
                    *v += amp * env * (2.0 * PI * f0 * t + phase).sin();
                }
            }
            Category::Genre => {
                let mut h: Vec<f64> = (0..bins)
                    .map(|b| {
                        let f = freq_of(b);
                        if f <= 0.0 {
                            return 0.0;
                        }
                        let z = (f / f0).log2() / BAND_OCTAVES;
                        (-0.5 * z * z).exp()
                    })
                    .collect();
                unit_rms(&mut h);
                for (r, v) in response.iter_mut().zip(&h) {
                    *r += BAND_RMS * gain * v;
                }
            }
            Category::Era => {
                let alpha = spread(rank, count, -1.5, 1.5);
                let mut h: Vec<f64> = (0..bins)
                    .map(|b| {
                        let f = freq_of(b);
                        if f < 50.0 {
                            0.0
                        } else {
                            (f / 1000.0).powf(alpha)
                        }
                    })
                    .collect();
                unit_rms(&mut h);
                for (r, v) in response.iter_mut().zip(&h) {
                    *r += TILT_RMS * gain * v;
                }
            }
        }
    }
    // Shape one white-noise draw by the summed magnitude response.
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (c, r) in buf.iter_mut().zip(&response) {
        *c *= *r;
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let mut out: Vec<f64> = tonal.iter().zip(&buf).map(|(t, c)| t + c.re / len as f64).collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        out.iter_mut().for_each(|v| *v *= 0.99 / peak);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    /// Labels keyed by audio file.
    pub labels: TaggedDataset,
    /// Vocabulary with counts replaced by generated positives.
    pub vocab: TagVocabulary,
}

/// Writes `audio/clip_NNNNN.wav`, `labels.csv` and `vocab.json` under `out`.
pub fn generate_synthetic(cfg: &SynthConfig, vocab: &TagVocabulary, out: &Path) -> Result<SyntheticCorpus> {
    let labels = generate_labels(cfg, vocab)?;
    let audio_dir = out.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::file(&audio_dir, e))?;
    let paths: Vec<PathBuf> = (0..cfg.n).map(|i| audio_dir.join(format!("clip_{i:05}.wav"))).collect();
    labels
        .par_iter()
        .zip(&paths)
        .enumerate()
        .try_for_each(|(i, (row, path))| {
            let x = synthesize_clip(i, row, vocab, cfg)?;
            write_wav(path, &x, cfg.sample_rate)
        })?;
    let examples = paths
        .into_iter()
        .zip(labels)
        .map(|(path, labels)| Example { path, labels })
        .collect();
    let ds = TaggedDataset::new(vocab.names(), examples)?;
    write_table(&ds, &out.join("labels.csv"), AUDIO_COLUMN)?;
    let vocab = vocab.with_counts_from(&ds);
    vocab.save(out.join("vocab.json"))?;
    Ok(SyntheticCorpus { labels: ds, vocab })
}
