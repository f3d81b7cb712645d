//! `tagnet` command-line driver.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use tagnet::arch::{ArchId, ArchitectureTemplate, NetworkSpec, BUDGETS};
use tagnet::bench::{run_grid, EnvFingerprint, TimingConfig};
use tagnet::dataset::{
    featurize_dataset, featurize_paths, generate_labels, generate_synthetic, load_manifest, load_table, split, write_manifest,
    SynthConfig, TagVocabulary, TaggedDataset, AUDIO_COLUMN,
};
use tagnet::eval::{evaluate, write_tag_table, EvalReport};
use tagnet::train::{fit, write_history, LabeledInputs, Trainer};
use tagnet::{checkpoint, Error, Result, SeededRng, Tensor};

use config::{FileConfig, RunConfig};

#[global_allocator]
static ALLOC: tagnet::alloc::TensorAlloc = tagnet::alloc::TensorAlloc;

#[derive(Debug, Parser)]
#[command(name = "tagnet", version, about = "Music auto-tagging networks under parameter and time budgets")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "TAGNET_OUT", default_value = "tagnet-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for featurization, inference and timing.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file with configuration overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic tagged audio corpus.
    Generate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Convert audio into log-mel spectrograms plus a manifest.
    Featurize {
        /// Directory of WAV files, or a labels CSV with an `audio_path` column.
        input: PathBuf,
    },
    /// Print width, shape and parameter tables.
    Describe {
        #[arg(long, value_delimiter = ',')]
        arch: Vec<ArchId>,
        #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u64).range(1..))]
        params: Vec<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Split a manifest, train one network and save its checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        arch: ArchId,
        #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
        params: u64,
        /// Tag vocabulary; defaults to `vocab.json` beside the manifest.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Score a checkpoint on every example of a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Vocabulary whose counts define popularity.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Time training steps over an architecture by budget grid.
    Benchmark {
        #[arg(long, value_delimiter = ',')]
        arch: Vec<ArchId>,
        #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u64).range(1..))]
        params: Vec<u64>,
        /// Spectrogram manifest to time on; random inputs otherwise.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Number of random examples when no manifest is given.
        #[arg(long, default_value_t = 64)]
        synthetic: usize,
        /// Training samples per timed repetition.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        /// Evaluation reports supplying the AUC column.
        #[arg(long, value_delimiter = ',')]
        reports: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Featurize { .. } => "featurize",
            Command::Describe { .. } => "describe",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Benchmark { .. } => "benchmark",
        }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    args: Vec<String>,
    config: &'a RunConfig,
    environment: EnvFingerprint,
    seconds: f64,
    status: String,
    outputs: Vec<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InfeasibleBudget { .. }
        | Error::Manifest { .. }
        | Error::Stratification(_)
        | Error::File { .. }
        | Error::Json(_)
        | Error::Csv(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let file = match cli.config.as_deref().map(FileConfig::load).transpose() {
        Ok(f) => f.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cfg = match RunConfig::resolve(file, cli.out.clone(), cli.seed, cli.threads) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    let start = Instant::now();
    let mut outputs = Vec::new();
    let result = fs::create_dir_all(&cfg.out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", cfg.out.display())))
        .and_then(|_| run(&cli.command, &cfg, &mut outputs));
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    let record = RunRecord {
        command: cli.command.name(),
        args: std::env::args().collect(),
        config: &cfg,
        environment: EnvFingerprint::current(cfg.threads),
        seconds: start.elapsed().as_secs_f64(),
        status,
        outputs,
    };
    if cfg.out.is_dir() {
        let path = cfg.out.join("run_record.json");
        if let Err(e) = serde_json::to_vec_pretty(&record).map(|b| fs::write(&path, b)) {
            eprintln!("warning: could not write {}: {e}", path.display());
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: &Command, cfg: &RunConfig, outputs: &mut Vec<PathBuf>) -> Result<()> {
    match cmd {
        Command::Generate { n, seconds } => {
            let synth = SynthConfig {
                n: n.unwrap_or(cfg.synth.n),
                seconds: seconds.unwrap_or(cfg.synth.seconds),
                ..cfg.synth.clone()
            };
            let corpus = generate_synthetic(&synth, &TagVocabulary::top50(), &cfg.out)?;
            eprintln!("generated {} clips", corpus.labels.len());
            outputs.extend([cfg.out.join("audio"), cfg.out.join("labels.csv"), cfg.out.join("vocab.json")]);
            println!("{}", cfg.out.join("labels.csv").display());
            Ok(())
        }
        Command::Featurize { input } => featurize(input, cfg, outputs),
        Command::Describe { arch, params, json } => describe(arch, params, *json, cfg),
        Command::Train {
            manifest,
            arch,
            params,
            vocab,
            max_epochs,
            batch_size,
            learning_rate,
            patience,
        } => {
            let mut training = cfg.training.clone();
            training.max_epochs = max_epochs.unwrap_or(training.max_epochs);
            training.batch_size = batch_size.unwrap_or(training.batch_size);
            training.learning_rate = learning_rate.unwrap_or(training.learning_rate);
            training.patience = patience.unwrap_or(training.patience);
            train(manifest, *arch, *params, vocab.as_deref(), training, cfg, outputs)
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            vocab,
        } => {
            let (net, _) = checkpoint::load(checkpoint)?;
            let test = load_manifest(manifest)?;
            let vocab = resolve_vocab(vocab.as_deref(), &[checkpoint, manifest], &test)?;
            let inputs = test.load_inputs()?;
            let report = evaluate(&net, &test, &inputs, &vocab, cfg.training.batch_size)?;
            for note in &report.notes {
                eprintln!("note: {note}");
            }
            let (json, csv) = (cfg.out.join("report.json"), cfg.out.join("tags.csv"));
            report.save_json(&json)?;
            write_tag_table(std::slice::from_ref(&report), &csv)?;
            outputs.extend([json, csv]);
            println!("mean AUC {:.4}", report.mean_auc);
            Ok(())
        }
        Command::Benchmark {
            arch,
            params,
            manifest,
            synthetic,
            samples,
            reps,
            reports,
        } => {
            let timing = TimingConfig {
                sample_budget: samples.unwrap_or(cfg.timing.sample_budget),
                reps: reps.unwrap_or(cfg.timing.reps),
                threads: cfg.threads,
            };
            benchmark(arch, params, manifest.as_deref(), *synthetic, timing, reports, cfg, outputs)
        }
    }
}

fn featurize(input: &Path, cfg: &RunConfig, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let spec_dir = cfg.out.join("spectrograms");
    let manifest = cfg.out.join("manifest.csv");
    let vocab = TagVocabulary::top50();
    let summary = if input.is_dir() {
        let mut wavs: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::file(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        wavs.sort();
        if wavs.is_empty() {
            eprintln!("warning: no WAV files in {}", input.display());
        }
        let (written, summary) = featurize_paths(&wavs, &spec_dir, &cfg.mel)?;
        // Without labels the manifest is a stub: every tag column is 0 until
        // filled in.
        let mut text = std::iter::once("spectrogram_path".to_string()).chain(vocab.names()).collect::<Vec<_>>().join(",");
        text.push('\n');
        for p in written.into_iter().flatten() {
            let rel = p.strip_prefix(&cfg.out).unwrap_or(&p);
            text.push_str(&rel.display().to_string());
            text.push_str(&",0".repeat(vocab.len()));
            text.push('\n');
        }
        fs::write(&manifest, text).map_err(|e| Error::file(&manifest, e))?;
        summary
    } else {
        let labels = load_table(input, AUDIO_COLUMN, false)?;
        let (ds, summary) = featurize_dataset(&labels, &spec_dir, &cfg.mel)?;
        write_manifest(&ds, &manifest)?;
        if let Some(v) = input.parent().map(|d| d.join("vocab.json")).filter(|v| v.exists()) {
            let dst = cfg.out.join("vocab.json");
            if v != dst {
                fs::copy(&v, &dst).map_err(|e| Error::file(&dst, e))?;
            }
            outputs.push(dst);
        }
        summary
    };
    for (path, msg) in &summary.failed {
        eprintln!("error: {}: {msg}", path.display());
    }
    eprintln!(
        "featurized {} computed, {} cached, {} failed",
        summary.computed,
        summary.cached,
        summary.failed.len()
    );
    outputs.extend([spec_dir, manifest.clone()]);
    if !summary.failed.is_empty() && summary.computed + summary.cached == 0 {
        return Err(Error::Format("every input file failed to featurize".into()));
    }
    println!("{}", manifest.display());
    Ok(())
}

fn describe(arch: &[ArchId], params: &[u64], json: bool, cfg: &RunConfig) -> Result<()> {
    let archs = if arch.is_empty() { ArchId::ALL.to_vec() } else { arch.to_vec() };
    let budgets = if params.is_empty() { BUDGETS.to_vec() } else { params.to_vec() };
    let mut specs: Vec<NetworkSpec> = Vec::new();
    for &a in &archs {
        for &b in &budgets {
            specs.push(ArchitectureTemplate::standard(a).scale_to_target(b, cfg.tolerance)?);
        }
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&specs)?);
    } else {
        for (s, b) in specs.iter().zip(budgets.iter().cycle()) {
            let dev = 100.0 * (s.param_count as f64 - *b as f64) / *b as f64;
            println!("budget {b} ({dev:+.2}%)");
            println!("{s}");
        }
    }
    Ok(())
}

/// Explicit vocabulary, else `vocab.json` beside one of `near`, else the
/// default vocabulary with counts from `ds`.
fn resolve_vocab(explicit: Option<&Path>, near: &[&PathBuf], ds: &TaggedDataset) -> Result<TagVocabulary> {
    let found = explicit.map(Path::to_path_buf).or_else(|| {
        near.iter()
            .filter_map(|p| p.parent().map(|d| d.join("vocab.json")))
            .find(|v| v.exists())
    });
    let vocab = match found {
        Some(p) => TagVocabulary::load(p)?,
        None => TagVocabulary::top50().with_counts_from(ds),
    };
    if vocab.names() != ds.tags {
        return Err(Error::Config("manifest tag columns do not match the vocabulary".into()));
    }
    Ok(vocab)
}

fn rows(ds: &TaggedDataset) -> Vec<Vec<u8>> {
    ds.examples.iter().map(|e| e.labels.clone()).collect()
}

fn train(
    manifest: &Path,
    arch: ArchId,
    params: u64,
    vocab: Option<&Path>,
    training: tagnet::train::TrainingConfig,
    cfg: &RunConfig,
    outputs: &mut Vec<PathBuf>,
) -> Result<()> {
    let ds = load_manifest(manifest)?;
    let vocab = resolve_vocab(vocab, &[&manifest.to_path_buf()], &ds)?;
    let spec = ArchitectureTemplate::standard(arch).scale_to_target(params, cfg.tolerance)?;
    let (tr, va, te) = split(&ds, cfg.split, cfg.seed)?;
    let split_dir = cfg.out.join("splits");
    fs::create_dir_all(&split_dir).map_err(|e| Error::file(&split_dir, e))?;
    for (name, part) in [("train", &tr), ("valid", &va), ("test", &te)] {
        let p = split_dir.join(format!("{name}.csv"));
        write_manifest(part, &p)?;
        outputs.push(p);
    }
    let vocab_path = split_dir.join("vocab.json");
    vocab.with_counts_from(&tr).save(&vocab_path)?;
    outputs.push(vocab_path);
    eprintln!(
        "{arch}: {} parameters, widths {:?}; {} train / {} valid / {} test",
        spec.param_count,
        spec.widths,
        tr.len(),
        va.len(),
        te.len()
    );
    let (xt, yt) = (tr.load_inputs()?, rows(&tr));
    let (xv, yv) = (va.load_inputs()?, rows(&va));
    let seed = training.seed;
    let trainer = Trainer::from_spec(&spec, training)?;
    let result = fit(trainer, LabeledInputs::new(&xt, &yt)?, LabeledInputs::new(&xv, &yv)?, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  valid AUC {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.valid_auc, r.seconds
        );
    })?;
    let ck = cfg.out.join("checkpoint.tgck");
    checkpoint::save(&result.net, seed, &ck)?;
    let hist = cfg.out.join("history.csv");
    write_history(&result.history, &hist)?;
    outputs.extend([ck.clone(), hist]);
    if let Some(auc) = result.best_valid_auc {
        eprintln!("best epoch {} (valid AUC {auc:.4})", result.best_epoch);
    }
    println!("{}", ck.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn benchmark(
    arch: &[ArchId],
    params: &[u64],
    manifest: Option<&Path>,
    synthetic: usize,
    timing: TimingConfig,
    reports: &[PathBuf],
    cfg: &RunConfig,
    outputs: &mut Vec<PathBuf>,
) -> Result<()> {
    let archs = if arch.is_empty() { ArchId::ALL.to_vec() } else { arch.to_vec() };
    let budgets = if params.is_empty() { BUDGETS.to_vec() } else { params.to_vec() };
    let (inputs, labels) = match manifest {
        Some(m) => {
            let ds = load_manifest(m)?;
            (ds.load_inputs()?, rows(&ds))
        }
        None => random_inputs(synthetic, cfg)?,
    };
    let reports: Vec<EvalReport> = reports.iter().map(EvalReport::load_json).collect::<Result<_>>()?;
    let data = LabeledInputs::new(&inputs, &labels)?;
    let report = run_grid(
        &archs,
        &budgets,
        cfg.tolerance,
        data,
        &timing,
        &cfg.training,
        |spec| {
            Ok(reports
                .iter()
                .find(|r| r.model.arch == spec.id() && r.model.params == spec.param_count)
                .map(|r| r.mean_auc))
        },
        |row| match (&row.seconds_per_2500, &row.error) {
            (Some(s), _) => eprintln!("{} @{}: {s:.2} s per 2500 samples", row.arch, row.budget),
            (_, Some(e)) => eprintln!("{} @{}: failed: {e}", row.arch, row.budget),
            _ => {}
        },
    )?;
    report.save(&cfg.out)?;
    outputs.extend(
        [tagnet::bench::PARAMS_CSV, tagnet::bench::TIME_CSV, tagnet::bench::FINGERPRINT_JSON].map(|f| cfg.out.join(f)),
    );
    if report.rows.iter().all(|r| r.error.is_some()) {
        return Err(Error::Contract("every benchmark cell failed".into()));
    }
    Ok(())
}

/// Gaussian pseudo-spectrograms with generated label rows.
fn random_inputs(n: usize, cfg: &RunConfig) -> Result<(Vec<Tensor>, Vec<Vec<u8>>)> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let shape = tagnet::arch::INPUT_SHAPE;
    let labels = generate_labels(
        &SynthConfig {
            n,
            ..cfg.synth.clone()
        },
        &TagVocabulary::top50(),
    )?;
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let dist = Normal::new(-40.0, 10.0).expect("valid normal");
    let inputs = (0..n)
        .map(|_| Tensor::new(shape, (0..shape.iter().product()).map(|_| dist.sample(&mut rng)).collect()))
        .collect::<Result<_>>()?;
    Ok((inputs, labels))
}
