//! `tckd` command line.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O or malformed input,
//! 4 training divergence, 5 checkpoint/artifact mismatch, 1 anything else.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::baselines::{run_baseline_suite, SuiteArtifacts, SuiteRow};
use crate::checkpoint;
use crate::data::{self, split_samples, DataFormat, DatasetSplit, KeystrokeSample, SynthConfig, TimeStats, TokenizedSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::federated::run_rounds;
use crate::model::{Mode, ModelConfig, TempCharModel};
use crate::train::{fit, TrainConfig};

pub use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "tckd", version, about = "Keystroke-dynamics identification and authentication")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true, env = "TCKD_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "TCKD_SEED")]
    pub seed: Option<u64>,
    /// char_only or temp_char.
    #[arg(long, global = true, env = "TCKD_MODE")]
    pub mode: Option<Mode>,
    /// Output directory.
    #[arg(long, global = true, env = "TCKD_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train a model and write a checkpoint plus evaluation report.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Train the main model variants and baselines on one split and compare them.
    Compare,
    /// Federated-averaging simulation.
    Fedsim,
    /// Write pooled embeddings of every sample to CSV.
    ExportEmbeddings,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Compare => "compare",
            Command::Fedsim => "fedsim",
            Command::ExportEmbeddings => "export_embeddings",
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::TooFewSamples(_) | Error::MissingUser(_) | Error::Empty(_) => 2,
        Error::Io(_) | Error::Csv(_) | Error::Parse { .. } | Error::UnknownSchema(_) | Error::MalformedEvent { .. } => 3,
        Error::Divergence(_) => 4,
        Error::Checkpoint(_) => 5,
        _ => 1,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode,
        out: cli.out.clone(),
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let seed = cfg.seed()?;
    std::fs::create_dir_all(&cfg.out)?;
    cfg.write_resolved(cli.command.name())?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, seed),
        Command::Train => cmd_train(&cfg, seed),
        Command::Eval => cmd_eval(&cfg),
        Command::Compare => cmd_compare(&cfg, seed),
        Command::Fedsim => cmd_fedsim(&cfg, seed),
        Command::ExportEmbeddings => cmd_export(&cfg),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn cmd_synth(cfg: &RunConfig, seed: u64) -> Result<()> {
    let synth = SynthConfig {
        num_users: cfg.synth.num_users,
        samples_per_user: cfg.synth.samples_per_user,
        phrase_pool: cfg.synth.phrase_pool.clone(),
        seed,
    };
    let samples = data::synth_generate(&synth)?;
    let pre = cfg.out.join("dataset.csv");
    let ts = cfg.out.join("dataset_timestamps.csv");
    data::write_dataset(&pre, &samples, DataFormat::Precomputed)?;
    data::write_dataset(&ts, &samples, DataFormat::Timestamps)?;
    let manifest = json!({
        "seed": seed,
        "num_users": synth.num_users,
        "samples_per_user": synth.samples_per_user,
        "num_samples": samples.len(),
        "files": {
            "dataset.csv": { "format": "precomputed", "sha256": sha256_file(&pre)? },
            "dataset_timestamps.csv": { "format": "timestamps", "sha256": sha256_file(&ts)? },
        },
    });
    write_json(&cfg.out.join("manifest.json"), &manifest)?;
    println!("synth: {} samples from {} users -> {}", samples.len(), synth.num_users, cfg.out.display());
    Ok(())
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<KeystrokeSample>> {
    data::parse_dataset(&cfg.data.path, cfg.data.format, cfg.data.flight_mode)
}

/// Everything a checkpoint needs to rebuild the model and its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub stats: TimeStats,
    pub roster: Vec<String>,
    pub seed: u64,
    pub test_ratio: f64,
}

pub fn save_model(path: &Path, model: &TempCharModel<f64>, split: &DatasetSplit, seed: u64, test_ratio: f64) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config,
        vocab: split.vocab.clone(),
        stats: split.stats,
        roster: split.roster.clone(),
        seed,
        test_ratio,
    };
    checkpoint::save(path, &model.params, &serde_json::to_value(meta)?)
}

pub fn load_model(path: &Path) -> Result<(TempCharModel<f64>, CheckpointMeta)> {
    let (params, meta) = checkpoint::load::<f64>(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
    let model = TempCharModel::from_params(meta.model, params)?;
    Ok((model, meta))
}

/// Trains one model variant on a prepared split.
pub fn train_model(split: &DatasetSplit, model: &ModelConfig, mode: Mode, train: &TrainConfig, seed: u64) -> Result<(TempCharModel<f64>, Vec<f64>)> {
    let config = ModelConfig { mode, ..model.fitted_to(split) };
    let mut m = TempCharModel::new(config, seed)?;
    let xs: Vec<&TokenizedSequence> = split.train.iter().collect();
    let log = fit(&mut m, &xs, &split.train_labels(), train, seed)?;
    Ok((m, log.epoch_losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub seed: u64,
    pub split_hash: String,
    pub num_train: usize,
    pub num_test: usize,
    pub epoch_losses: Vec<f64>,
    pub truncated_test_samples: usize,
    pub eval: EvalReport,
}

fn count_truncated(split: &DatasetSplit, max_len: usize) -> usize {
    split.test.iter().filter(|s| s.len() > max_len).count()
}

fn summary(prefix: &str, r: &EvalReport) {
    println!("{prefix}: accuracy={:.4} eer={:.4} (genuine={}, impostor={})", r.accuracy, r.eer, r.num_genuine, r.num_impostor);
}

pub fn cmd_train(cfg: &RunConfig, seed: u64) -> Result<()> {
    let samples = load_samples(cfg)?;
    let split = DatasetSplit::prepare(&samples, &cfg.split, seed)?;
    let (model, losses) = train_model(&split, &cfg.model, cfg.mode, &cfg.train, seed)?;
    let report = eval::evaluate(&model, &split)?;
    save_model(&cfg.out.join("model.ckpt"), &model, &split, seed, cfg.split.test_ratio)?;
    let out = TrainReport {
        mode: cfg.mode,
        seed,
        split_hash: split.split_hash(),
        num_train: split.train.len(),
        num_test: split.test.len(),
        epoch_losses: losses,
        truncated_test_samples: count_truncated(&split, model.config.max_seq_len),
        eval: report,
    };
    write_json(&cfg.out.join("train_report.json"), &out)?;
    summary(&format!("train[{}]", cfg.mode.as_str()), &out.eval);
    Ok(())
}

/// Rebuilds the split a checkpoint was trained on, with its vocabulary and statistics.
fn split_for_checkpoint(cfg: &RunConfig, meta: &CheckpointMeta) -> Result<DatasetSplit> {
    let samples = load_samples(cfg)?;
    let (train, test) = split_samples(&samples, meta.test_ratio, meta.seed)?;
    let split = DatasetSplit::from_parts(train, test, meta.vocab.clone(), meta.stats)?;
    if split.roster != meta.roster {
        return Err(Error::Checkpoint("dataset users differ from the checkpoint's user roster".into()));
    }
    Ok(split)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let (model, meta) = load_model(&cfg.checkpoint_path())?;
    let split = split_for_checkpoint(cfg, &meta)?;
    let report = eval::evaluate(&model, &split)?;
    write_json(&cfg.out.join("eval_report.json"), &report)?;
    summary("eval", &report);
    Ok(())
}

pub fn cmd_compare(cfg: &RunConfig, seed: u64) -> Result<()> {
    let samples = load_samples(cfg)?;
    let split = DatasetSplit::prepare(&samples, &cfg.split, seed)?;
    let rows = &cfg.compare.rows;
    let needs = |a: SuiteRow, b: SuiteRow| rows.contains(&a) || rows.contains(&b);
    let char_only = if needs(SuiteRow::CharOnly, SuiteRow::LstmCharbert) {
        Some(train_model(&split, &cfg.model, Mode::CharOnly, &cfg.train, seed)?.0)
    } else {
        None
    };
    let temp_char = if needs(SuiteRow::TempChar, SuiteRow::LstmTempchar) {
        Some(train_model(&split, &cfg.model, Mode::TempChar, &cfg.train, seed)?.0)
    } else {
        None
    };
    let artifacts = SuiteArtifacts {
        char_only: char_only.as_ref(),
        temp_char: temp_char.as_ref(),
    };
    let report = run_baseline_suite(&split, rows, artifacts, &cfg.lstm, seed)?;
    write_json(&cfg.out.join("compare_report.json"), &report)?;
    for (name, r) in &report.rows {
        println!("{name:>14}: accuracy={:.4} eer={:.4}", r.accuracy, r.eer);
    }
    Ok(())
}

pub fn cmd_fedsim(cfg: &RunConfig, seed: u64) -> Result<()> {
    let samples = load_samples(cfg)?;
    let split = DatasetSplit::prepare(&samples, &cfg.split, seed)?;
    let config = ModelConfig {
        mode: cfg.mode,
        ..cfg.model.fitted_to(&split)
    };
    let global = TempCharModel::new(config, seed)?;
    let (model, reports) = run_rounds(&cfg.fed, global, &split, &cfg.train)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out.join("rounds.jsonl"))?);
    for r in &reports {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    save_model(&cfg.out.join("fed_model.ckpt"), &model, &split, seed, cfg.split.test_ratio)?;
    match reports.last() {
        Some(r) => println!("fedsim: {} rounds, final accuracy={:.4}", reports.len(), r.test_accuracy),
        None => println!("fedsim: 0 rounds"),
    }
    Ok(())
}

pub fn cmd_export(cfg: &RunConfig) -> Result<()> {
    let (model, meta) = load_model(&cfg.checkpoint_path())?;
    let split = split_for_checkpoint(cfg, &meta)?;
    let all: Vec<&TokenizedSequence> = split.train.iter().chain(&split.test).collect();
    let n = eval::export_embeddings(&model, &all, &cfg.out.join("embeddings.csv"))?;
    println!("export-embeddings: {n} rows");
    Ok(())
}
