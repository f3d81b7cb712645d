//! Training-throughput measurement and the params/time versus AUC grids.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchId, ArchitectureTemplate, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{batch_ranges, LabeledInputs, Trainer, TrainingConfig};

/// Samples per timing unit in the reported figures.
pub const REFERENCE_SAMPLES: usize = 2500;

/// Where and how a measurement was taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvFingerprint {
    pub threads: usize,
    pub hardware: String,
    pub os: String,
    pub crate_version: String,
}

impl EnvFingerprint {
    pub fn current(threads: usize) -> Self {
        let hardware = fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|m| m.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        EnvFingerprint {
            threads,
            hardware: format!("{hardware} ({} logical cores)", std::thread::available_parallelism().map_or(1, |n| n.get())),
            os: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
            crate_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    /// Training samples per repetition.
    pub sample_budget: usize,
    pub reps: usize,
    pub threads: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            sample_budget: REFERENCE_SAMPLES,
            reps: 3,
            threads: 1,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::Config("timing needs at least 3 repetitions".into()));
        }
        if self.sample_budget < 2 || self.threads == 0 {
            return Err(Error::Config("sample_budget must be at least 2 and threads at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub samples: usize,
    /// Wall-clock seconds of each repetition, in run order.
    pub reps: Vec<f64>,
    pub median: f64,
    /// Largest minus smallest repetition.
    pub spread: f64,
}

impl Timing {
    pub fn from_reps(samples: usize, reps: Vec<f64>) -> Self {
        let mut sorted = reps.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Timing {
            samples,
            spread: sorted[n - 1] - sorted[0],
            reps,
            median,
        }
    }

    /// Median scaled linearly to [`REFERENCE_SAMPLES`].
    pub fn seconds_per_2500(&self) -> f64 {
        self.median * REFERENCE_SAMPLES as f64 / self.samples as f64
    }
}

/// Runs `f` on a dedicated pool of exactly `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

struct Batch {
    x: Tensor,
    labels: Vec<Vec<u8>>,
}

/// Times full training steps (forward, backward, ADAM) over exactly
/// `cfg.sample_budget` samples, cycling `data`, after one untimed warm-up
/// batch. Batches are stacked before the clock starts.
pub fn time_training(spec: &NetworkSpec, data: LabeledInputs, cfg: &TimingConfig, train: &TrainingConfig) -> Result<Timing> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Contract("timing needs at least two examples".into()));
    }
    let n = data.len();
    let schedule = batch_ranges(cfg.sample_budget, train.batch_size);
    let mut cache: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut batches = Vec::new();
    let mut plan = Vec::with_capacity(schedule.len());
    for r in &schedule {
        let key = (r.start % n, r.len());
        let idx = *cache.entry(key).or_insert_with(|| {
            let ids: Vec<usize> = r.clone().map(|i| i % n).collect();
            let xs: Vec<&Tensor> = ids.iter().map(|&i| &data.inputs[i]).collect();
            batches.push(Tensor::stack(&xs).map(|x| Batch {
                x,
                labels: ids.iter().map(|&i| data.labels[i].clone()).collect(),
            }));
            batches.len() - 1
        });
        plan.push(idx);
    }
    let batches: Vec<Batch> = batches.into_iter().collect::<Result<_>>()?;
    with_threads(cfg.threads, || {
        let mut trainer = Trainer::from_spec(spec, train.clone())?;
        let warm = &batches[plan[0]];
        trainer.train_batch(&warm.x, &warm.labels, 0)?;
        let mut reps = Vec::with_capacity(cfg.reps);
        for _ in 0..cfg.reps {
            let start = Instant::now();
            for (step, &b) in plan.iter().enumerate() {
                trainer.train_batch(&batches[b].x, &batches[b].labels, step + 1)?;
            }
            reps.push(start.elapsed().as_secs_f64());
        }
        Ok(Timing::from_reps(cfg.sample_budget, reps))
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub arch: ArchId,
    pub budget: u64,
    pub params: Option<u64>,
    pub seconds_per_2500: Option<f64>,
    pub mean_auc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMeta {
    pub fingerprint: EnvFingerprint,
    pub timing: TimingConfig,
    pub batch_size: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub meta: BenchMeta,
    pub rows: Vec<GridRow>,
}

pub const PARAMS_CSV: &str = "grid_params_auc.csv";
pub const TIME_CSV: &str = "grid_time_auc.csv";
pub const FINGERPRINT_JSON: &str = "fingerprint.json";

/// Times every (architecture, budget) cell. `auc` supplies the optional
/// quality column per spec. A failing cell is recorded and the grid goes on.
pub fn run_grid(
    archs: &[ArchId],
    budgets: &[u64],
    tolerance: f64,
    data: LabeledInputs,
    cfg: &TimingConfig,
    train: &TrainingConfig,
    mut auc: impl FnMut(&NetworkSpec) -> Result<Option<f64>>,
    mut on_row: impl FnMut(&GridRow),
) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &arch in archs {
        for &budget in budgets {
            let mut row = GridRow {
                arch,
                budget,
                params: None,
                seconds_per_2500: None,
                mean_auc: None,
                error: None,
            };
            let outcome = (|| -> Result<()> {
                let spec = ArchitectureTemplate::standard(arch).scale_to_target(budget, tolerance)?;
                row.params = Some(spec.param_count);
                row.seconds_per_2500 = Some(time_training(&spec, data, cfg, train)?.seconds_per_2500());
                row.mean_auc = auc(&spec)?;
                Ok(())
            })();
            if let Err(e) = outcome {
                row.error = Some(e.to_string());
            }
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(BenchReport {
        meta: BenchMeta {
            fingerprint: EnvFingerprint::current(cfg.threads),
            timing: cfg.clone(),
            batch_size: train.batch_size,
            notes: Vec::new(),
        },
        rows,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    arch: ArchId,
    budget: u64,
    params: Option<u64>,
    seconds_per_2500: Option<f64>,
    mean_auc: Option<f64>,
    error: Option<String>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::file(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

impl BenchReport {
    /// Writes both grid CSVs and the fingerprint JSON into `dir`. The params
    /// table keeps grid order; the time table is sorted by seconds within
    /// each architecture.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let mut by_time: Vec<&GridRow> = self.rows.iter().collect();
        by_time.sort_by(|a, b| {
            a.arch
                .cmp(&b.arch)
                .then(a.seconds_per_2500.unwrap_or(f64::INFINITY).total_cmp(&b.seconds_per_2500.unwrap_or(f64::INFINITY)))
        });
        for (name, rows) in [(PARAMS_CSV, self.rows.iter().collect::<Vec<_>>()), (TIME_CSV, by_time)] {
            let path = dir.join(name);
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
            for r in rows {
                w.serialize(CsvRow {
                    arch: r.arch,
                    budget: r.budget,
                    params: r.params,
                    seconds_per_2500: r.seconds_per_2500,
                    mean_auc: r.mean_auc,
                    error: r.error.clone(),
                })
                .map_err(|e| csv_err(&path, e))?;
            }
            w.flush().map_err(|e| Error::file(&path, e))?;
        }
        let fp = dir.join(FINGERPRINT_JSON);
        fs::write(&fp, serde_json::to_vec_pretty(&self.meta)?).map_err(|e| Error::file(&fp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let fp = dir.join(FINGERPRINT_JSON);
        let meta: BenchMeta = serde_json::from_str(&fs::read_to_string(&fp).map_err(|e| Error::file(&fp, e))?)?;
        let path = dir.join(PARAMS_CSV);
        let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let rows = r
            .deserialize::<CsvRow>()
            .map(|row| {
                let row = row.map_err(|e| csv_err(&path, e))?;
                Ok(GridRow {
                    arch: row.arch,
                    budget: row.budget,
                    params: row.params,
                    seconds_per_2500: row.seconds_per_2500,
                    mean_auc: row.mean_auc,
                    error: row.error,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BenchReport { meta, rows })
    }

    /// Appends `other`'s rows. Reports from a different environment are
    /// merged with a note naming both fingerprints.
    pub fn merge(mut self, other: BenchReport) -> Self {
        if other.meta.fingerprint != self.meta.fingerprint {
            self.meta.notes.push(format!(
                "rows from a different environment merged: {:?} vs {:?}",
                self.meta.fingerprint, other.meta.fingerprint
            ));
        }
        if other.meta.timing != self.meta.timing || other.meta.batch_size != self.meta.batch_size {
            self.meta.notes.push("rows measured with a different timing configuration merged".into());
        }
        self.meta.notes.extend(other.meta.notes);
        self.rows.extend(other.rows);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::random_tensor;

    fn tiny_data(n: usize) -> (Vec<Tensor>, Vec<Vec<u8>>) {
        let x = (0..n).map(|i| random_tensor(&[1, 8, 12], i as u64)).collect();
        let y = (0..n).map(|i| (0..50).map(|k| u8::from((i + k) % 3 == 0)).collect()).collect();
        (x, y)
    }

    #[test]
    fn median_and_spread() {
        let t = Timing::from_reps(100, vec![3.0, 1.0, 2.0]);
        assert_eq!((t.median, t.spread), (2.0, 2.0));
        assert_eq!(t.seconds_per_2500(), 50.0);
        let shuffled = Timing::from_reps(100, vec![2.0, 3.0, 1.0]);
        assert_eq!(shuffled.median, t.median);
        assert_eq!(Timing::from_reps(10, vec![1.0, 4.0, 2.0, 3.0]).median, 2.5);
    }

    #[test]
    fn three_positive_repetitions_on_a_tiny_spec() {
        let (x, y) = tiny_data(20);
        let spec = ArchitectureTemplate::compact(ArchId::K2c2).at_multiplier(0.5).unwrap();
        let cfg = TimingConfig {
            sample_budget: 50,
            ..TimingConfig::default()
        };
        let t = time_training(&spec, LabeledInputs::new(&x, &y).unwrap(), &cfg, &TrainingConfig::default()).unwrap();
        assert_eq!(t.reps.len(), 3);
        assert!(t.reps.iter().all(|&s| s > 0.0));
        assert_eq!(t.samples, 50);
        assert!(TimingConfig {
            reps: 2,
            ..TimingConfig::default()
        }
        .validate()
        .is_err());
    }

    fn sample_report() -> BenchReport {
        BenchReport {
            meta: BenchMeta {
                fingerprint: EnvFingerprint::current(1),
                timing: TimingConfig::default(),
                batch_size: 16,
                notes: vec![],
            },
            rows: vec![
                GridRow {
                    arch: ArchId::K2c1,
                    budget: 100_000,
                    params: Some(99_123),
                    seconds_per_2500: Some(12.345678901234),
                    mean_auc: Some(0.812_345_678_9),
                    error: None,
                },
                GridRow {
                    arch: ArchId::Crnn,
                    budget: 250_000,
                    params: None,
                    seconds_per_2500: None,
                    mean_auc: None,
                    error: Some("budget, \"quoted\"".into()),
                },
            ],
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report();
        r.save(dir.path()).unwrap();
        assert_eq!(BenchReport::load(dir.path()).unwrap(), r);
        let header = fs::read_to_string(dir.path().join(TIME_CSV)).unwrap();
        assert!(header.starts_with("arch,budget,params,seconds_per_2500,mean_auc,error\n"));
    }

    #[test]
    fn foreign_rows_are_flagged() {
        let a = sample_report();
        let mut b = sample_report();
        b.meta.fingerprint.hardware = "elsewhere".into();
        let merged = a.clone().merge(b);
        assert_eq!(merged.rows.len(), 4);
        assert_eq!(merged.meta.notes.len(), 1);
        assert!(a.clone().merge(a).meta.notes.is_empty());
    }

    #[test]
    fn grid_records_failed_cells() {
        let (x, y) = tiny_data(4);
        let cfg = TimingConfig {
            sample_budget: 4,
            ..TimingConfig::default()
        };
        // Full-size specs cannot consume 8x12 inputs, so timing fails per cell.
        let mut seen = 0;
        let r = run_grid(
            &[ArchId::K2c1],
            &[100_000, 10],
            0.02,
            LabeledInputs::new(&x, &y).unwrap(),
            &cfg,
            &TrainingConfig::default(),
            |_| Ok(None),
            |_| seen += 1,
        )
        .unwrap();
        assert_eq!((r.rows.len(), seen), (2, 2));
        assert!(r.rows[0].params.is_some() && r.rows[0].error.is_some());
        assert!(r.rows[1].params.is_none() && r.rows[1].error.is_some());
    }
}
