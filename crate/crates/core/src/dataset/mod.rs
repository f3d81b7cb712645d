//! Tag vocabulary, manifest-backed datasets, stratified splitting and the
//! synthetic corpus generator.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::audio::{featurize_file, MelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

mod synth;

pub use synth::{
    generate_labels, generate_synthetic, home_frequency, popularity_targets, synthesize_clip, SynthConfig, SyntheticCorpus,
    AUDIO_COLUMN,
};

pub const N_TAGS: usize = 50;
/// Clips in the reference corpus, the denominator of the popularity profile.
pub const REFERENCE_CLIPS: u64 = 214_284;
pub const MOST_POPULAR: u64 = 52_944;
pub const LEAST_POPULAR: u64 = 1_257;
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.84, 0.05, 0.11];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Genre,
    Mood,
    Instrument,
    Era,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Genre, Category::Mood, Category::Instrument, Category::Era];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Genre => "genre",
            Category::Mood => "mood",
            Category::Instrument => "instrument",
            Category::Era => "era",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tag {
    pub name: String,
    pub category: Category,
    /// Occurrence count used for popularity ranking.
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Tag>", into = "Vec<Tag>")]
pub struct TagVocabulary {
    tags: Vec<Tag>,
}

impl TryFrom<Vec<Tag>> for TagVocabulary {
    type Error = Error;

    fn try_from(tags: Vec<Tag>) -> Result<Self> {
        TagVocabulary::new(tags)
    }
}

impl From<TagVocabulary> for Vec<Tag> {
    fn from(v: TagVocabulary) -> Self {
        v.tags
    }
}

const TOP50: [(&str, Category); N_TAGS] = {
    use Category::*;
    [
        ("rock", Genre),
        ("pop", Genre),
        ("alternative", Genre),
        ("indie", Genre),
        ("electronic", Genre),
        ("female vocalists", Instrument),
        ("dance", Genre),
        ("00s", Era),
        ("alternative rock", Genre),
        ("jazz", Genre),
        ("beautiful", Mood),
        ("metal", Genre),
        ("chillout", Mood),
        ("male vocalists", Instrument),
        ("classic rock", Genre),
        ("soul", Genre),
        ("indie rock", Genre),
        ("mellow", Mood),
        ("electronica", Genre),
        ("80s", Era),
        ("folk", Genre),
        ("90s", Era),
        ("chill", Mood),
        ("instrumental", Instrument),
        ("punk", Genre),
        ("oldies", Era),
        ("blues", Genre),
        ("hard rock", Genre),
        ("ambient", Genre),
        ("acoustic", Instrument),
        ("experimental", Genre),
        ("female vocalist", Instrument),
        ("guitar", Instrument),
        ("hip-hop", Genre),
        ("70s", Era),
        ("party", Mood),
        ("country", Genre),
        ("easy listening", Mood),
        ("sexy", Mood),
        ("catchy", Mood),
        ("funk", Genre),
        ("electro", Genre),
        ("heavy metal", Genre),
        ("progressive rock", Genre),
        ("60s", Era),
        ("rnb", Genre),
        ("indie pop", Genre),
        ("sad", Mood),
        ("house", Genre),
        ("happy", Mood),
    ]
};

/// Geometric long-tail occurrence count of popularity rank `rank` (0-based),
/// from the most to the least popular tag.
pub fn reference_count(rank: usize) -> u64 {
    let ratio = LEAST_POPULAR as f64 / MOST_POPULAR as f64;
    (MOST_POPULAR as f64 * ratio.powf(rank as f64 / (N_TAGS - 1) as f64)).round() as u64
}

impl TagVocabulary {
    pub fn new(tags: Vec<Tag>) -> Result<Self> {
        if tags.len() != N_TAGS {
            return Err(Error::Config(format!("vocabulary must have {N_TAGS} tags, got {}", tags.len())));
        }
        let mut seen = HashSet::new();
        for t in &tags {
            if t.name.is_empty() || !seen.insert(t.name.as_str()) {
                return Err(Error::Config(format!("duplicate or empty tag name `{}`", t.name)));
            }
        }
        Ok(TagVocabulary { tags })
    }

    /// The 50 most frequent last.fm tags in popularity order with their
    /// categories and a long-tail count profile.
    pub fn top50() -> Self {
        let tags = TOP50
            .iter()
            .enumerate()
            .map(|(rank, &(name, category))| Tag {
                name: name.to_string(),
                category,
                count: reference_count(rank),
            })
            .collect();
        TagVocabulary { tags }
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.tags.iter().map(|t| t.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tags.iter().position(|t| t.name == name)
    }

    /// Copy with counts replaced by positive counts in `ds`.
    pub fn with_counts_from(&self, ds: &TaggedDataset) -> Self {
        let counts = ds.positive_counts();
        let mut v = self.clone();
        for (t, c) in v.tags.iter_mut().zip(counts) {
            t.count = c as u64;
        }
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub path: PathBuf,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedDataset {
    pub tags: Vec<String>,
    pub examples: Vec<Example>,
    pub split: Option<Split>,
}

impl TaggedDataset {
    pub fn new(tags: Vec<String>, examples: Vec<Example>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.labels.len() != tags.len() {
                return Err(Error::Config(format!(
                    "example {i} has {} labels, expected {}",
                    ex.labels.len(),
                    tags.len()
                )));
            }
            if !ex.labels.contains(&1) || ex.labels.iter().any(|&l| l > 1) {
                return Err(Error::Config(format!("example {i} needs binary labels with at least one positive")));
            }
        }
        Ok(TaggedDataset {
            tags,
            examples,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn positive_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.tags.len()];
        for ex in &self.examples {
            for (c, &l) in counts.iter_mut().zip(&ex.labels) {
                *c += l as usize;
            }
        }
        counts
    }

    /// Label matrix row-major `[examples, tags]` as floats.
    pub fn label_matrix(&self) -> Vec<f64> {
        self.examples.iter().flat_map(|e| e.labels.iter().map(|&l| f64::from(l))).collect()
    }

    /// Loads every spectrogram as a `[1, freq, time]` network input.
    pub fn load_inputs(&self) -> Result<Vec<Tensor>> {
        self.examples
            .iter()
            .map(|ex| {
                let t = Tensor::load(&ex.path)?;
                let shape: Vec<usize> = std::iter::once(1).chain(t.shape().iter().copied()).collect();
                t.reshape(shape)
            })
            .collect()
    }

    fn subset(&self, idx: &[usize], split: Split) -> TaggedDataset {
        TaggedDataset {
            tags: self.tags.clone(),
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
            split: Some(split),
        }
    }
}

const PATH_COLUMN: &str = "spectrogram_path";

fn manifest_err(path: &Path, row: usize, msg: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        row,
        msg: msg.into(),
    }
}

/// Reads a `spectrogram_path,<tag>...` CSV. Relative paths resolve against the
/// manifest's directory. Rows are numbered from 1 after the header.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<TaggedDataset> {
    load_table(path.as_ref(), PATH_COLUMN, true)
}

/// Like [`load_manifest`] for any first column, optionally skipping the
/// existence check of the referenced files.
pub fn load_table(path: &Path, first_column: &str, check_files: bool) -> Result<TaggedDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    if text.trim().is_empty() {
        return Ok(TaggedDataset {
            tags: vec![],
            examples: vec![],
            split: None,
        });
    }
    let header = rdr.headers().map_err(|e| manifest_err(path, 0, e.to_string()))?.clone();
    if header.get(0) != Some(first_column) {
        return Err(manifest_err(path, 0, format!("first column must be `{first_column}`")));
    }
    let tags: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut examples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| manifest_err(path, row, e.to_string()))?;
        if rec.len() != tags.len() + 1 {
            return Err(manifest_err(
                path,
                row,
                format!("expected {} label columns, found {}", tags.len(), rec.len().saturating_sub(1)),
            ));
        }
        let labels = rec
            .iter()
            .skip(1)
            .map(|v| match v.trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(manifest_err(path, row, format!("label `{other}` is not 0 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if !labels.contains(&1) {
            return Err(manifest_err(path, row, "example has no positive tag"));
        }
        let p = PathBuf::from(&rec[0]);
        let p = if p.is_absolute() { p } else { base.join(p) };
        if check_files && !p.is_file() {
            return Err(manifest_err(path, row, format!("missing file {}", p.display())));
        }
        examples.push(Example { path: p, labels });
    }
    Ok(TaggedDataset {
        tags,
        examples,
        split: None,
    })
}

/// Writes `ds` as CSV; paths under the manifest's directory are stored
/// relative to it.
pub fn write_table(ds: &TaggedDataset, path: &Path, first_column: &str) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::file(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    w.write_record(std::iter::once(first_column.to_string()).chain(ds.tags.iter().cloned()))?;
    for ex in &ds.examples {
        let p = ex.path.strip_prefix(base).unwrap_or(&ex.path);
        let mut rec = vec![p.to_string_lossy().into_owned()];
        rec.extend(ex.labels.iter().map(u8::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn write_manifest(ds: &TaggedDataset, path: impl AsRef<Path>) -> Result<()> {
    write_table(ds, path.as_ref(), PATH_COLUMN)
}

/// Desired positives of every tag in every active split.
const SPLIT_QUOTA: usize = 2;

/// Deterministic stratified split into (train, valid, test). Tags are seeded
/// into the splits rarest first, aiming for [`SPLIT_QUOTA`] positives in every
/// split with a nonzero fraction; the rest is filled at random. Fails when
/// some tag ends up absent from an active split.
pub fn split(ds: &TaggedDataset, fractions: [f64; 3], seed: u64) -> Result<(TaggedDataset, TaggedDataset, TaggedDataset)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let n = ds.len();
    let mut sizes = [0usize; 3];
    sizes[1] = (n as f64 * fractions[1]).round() as usize;
    sizes[2] = ((n as f64 * fractions[2]).round() as usize).min(n - sizes[1]);
    sizes[0] = n - sizes[1] - sizes[2];
    let active: Vec<usize> = (0..3).filter(|&s| fractions[s] > 0.0 && sizes[s] > 0).collect();

    let mut rng = SeededRng::seed_from_u64(seed);
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut fill = [0usize; 3];
    let n_tags = ds.tags.len();
    let counts = ds.positive_counts();
    let mut order: Vec<usize> = (0..n_tags).collect();
    order.sort_by_key(|&k| (counts[k], k));
    let mut shuffled: Vec<usize> = (0..n).collect();
    shuffled.shuffle(&mut rng);
    // have[s][k]: positives of tag k placed in split s.
    let mut have = vec![vec![0usize; n_tags]; 3];
    for round in 1..=SPLIT_QUOTA {
        for &k in &order {
            for &s in &active {
                if have[s][k] >= round || fill[s] >= sizes[s] {
                    continue;
                }
                // Among unassigned positives of k, take the one that helps the
                // most tags still short in this split.
                let gain = |i: usize| {
                    ds.examples[i]
                        .labels
                        .iter()
                        .zip(&have[s])
                        .filter(|&(&l, &h)| l == 1 && h < round)
                        .count()
                };
                let best = shuffled
                    .iter()
                    .copied()
                    .filter(|&i| assigned[i].is_none() && ds.examples[i].labels[k] == 1)
                    .fold(None, |best: Option<(usize, usize)>, i| {
                        let g = gain(i);
                        match best {
                            Some((_, bg)) if bg >= g => best,
                            _ => Some((i, g)),
                        }
                    });
                if let Some((i, _)) = best {
                    assigned[i] = Some(s);
                    fill[s] += 1;
                    for (h, &l) in have[s].iter_mut().zip(&ds.examples[i].labels) {
                        *h += l as usize;
                    }
                }
            }
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| assigned[i].is_none()).collect();
    rest.shuffle(&mut rng);
    let mut rest = rest.into_iter();
    for s in 0..3 {
        while fill[s] < sizes[s] {
            let i = rest.next().expect("sizes sum to n");
            assigned[i] = Some(s);
            fill[s] += 1;
        }
    }
    let mut idx: [Vec<usize>; 3] = Default::default();
    for (i, s) in assigned.iter().enumerate() {
        idx[s.expect("every example assigned")].push(i);
    }
    let starving: Vec<String> = ds
        .tags
        .iter()
        .enumerate()
        .filter(|&(k, _)| {
            active
                .iter()
                .any(|&s| !idx[s].iter().any(|&i| ds.examples[i].labels[k] == 1))
        })
        .map(|(_, name)| name.clone())
        .collect();
    if !starving.is_empty() {
        return Err(Error::Stratification(starving));
    }
    Ok((
        ds.subset(&idx[0], Split::Train),
        ds.subset(&idx[1], Split::Valid),
        ds.subset(&idx[2], Split::Test),
    ))
}


/// Outcome of featurizing a batch of audio files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeSummary {
    pub computed: usize,
    pub cached: usize,
    pub failed: Vec<(PathBuf, String)>,
}

/// Output tensor path for each audio file under `out_dir`: the file stem,
/// suffixed with the input index when stems collide.
pub fn spectrogram_paths(audio: &[PathBuf], out_dir: &Path) -> Vec<PathBuf> {
    let stems: Vec<String> = audio
        .iter()
        .map(|p| p.file_stem().map_or_else(|| "clip".into(), |s| s.to_string_lossy().into_owned()))
        .collect();
    let unique = stems.iter().collect::<HashSet<_>>().len() == stems.len();
    stems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if unique {
                out_dir.join(format!("{s}.tensor"))
            } else {
                out_dir.join(format!("{s}_{i}.tensor"))
            }
        })
        .collect()
}

/// Featurizes each file, skipping outputs whose cache stamp is current.
/// Per-file failures are collected rather than aborting the batch.
pub fn featurize_paths(audio: &[PathBuf], out_dir: &Path, cfg: &MelConfig) -> Result<(Vec<Option<PathBuf>>, FeaturizeSummary)> {
    use rayon::prelude::*;
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let outs = spectrogram_paths(audio, out_dir);
    let results: Vec<Result<bool>> = audio
        .par_iter()
        .zip(&outs)
        .map(|(wav, out)| featurize_file(wav, out, cfg))
        .collect();
    let mut summary = FeaturizeSummary::default();
    let mut written = Vec::with_capacity(audio.len());
    for ((wav, out), r) in audio.iter().zip(outs).zip(results) {
        match r {
            Ok(true) => summary.computed += 1,
            Ok(false) => summary.cached += 1,
            Err(e) => {
                summary.failed.push((wav.clone(), e.to_string()));
                written.push(None);
                continue;
            }
        }
        written.push(Some(out));
    }
    Ok((written, summary))
}

/// Featurizes the audio referenced by `ds` and returns the dataset keyed by
/// spectrogram files. Examples whose audio failed are dropped.
pub fn featurize_dataset(ds: &TaggedDataset, out_dir: &Path, cfg: &MelConfig) -> Result<(TaggedDataset, FeaturizeSummary)> {
    let audio: Vec<PathBuf> = ds.examples.iter().map(|e| e.path.clone()).collect();
    let (outs, summary) = featurize_paths(&audio, out_dir, cfg)?;
    let examples = ds
        .examples
        .iter()
        .zip(outs)
        .filter_map(|(e, out)| {
            out.map(|path| Example {
                path,
                labels: e.labels.clone(),
            })
        })
        .collect();
    Ok((
        TaggedDataset {
            tags: ds.tags.clone(),
            examples,
            split: ds.split,
        },
        summary,
    ))
}
