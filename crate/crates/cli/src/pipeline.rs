//! `ialab gen`, `ialab train` and `ialab eval`.

use crate::config;
use crate::output::OutputDir;
use crate::{CliError, Report, Target};
use clap::Args;
use ialab::models::{
    build_model, evaluate, load_checkpoint, save_checkpoint, train, Metrics, Model, ModelSpec, Optimizer, TaskData,
    TrainConfig, TrainLog, Variant,
};
use ialab::noise::fmt_real;
use ialab::tasks::{generate, load, serialize, Dataset, DatasetSpec, Split, TaskKind};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "split,accuracy,consistency_accuracy,n_instances";

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, CliError> {
    s.parse().map_err(CliError::Usage)
}

fn required(v: &Option<String>, what: &str) -> Result<String, CliError> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

/// Dataset size and seed, shared by all three commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSettings {
    pub task: Option<String>,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for GenSettings {
    fn default() -> Self {
        Self {
            task: None,
            seed: 0,
            n_train: 1000,
            n_test: 200,
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct GenFlags {
    /// sorting or retrieval.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
}

fn dataset_spec(task: TaskKind, seed: u64, n_train: usize, n_test: usize) -> DatasetSpec {
    DatasetSpec {
        n_train,
        n_test,
        ..DatasetSpec::new(task, seed)
    }
}

fn split_files(ds: &Dataset) -> (String, String) {
    match ds {
        Dataset::Sorting(s) => (serialize(&s.train), serialize(&s.test)),
        Dataset::Retrieval(s) => (serialize(&s.train), serialize(&s.test)),
    }
}

/// Reads `train.txt` and `test.txt` from a `gen` output directory.
pub fn load_dataset(dir: &Path, task: TaskKind) -> Result<Dataset, CliError> {
    let (tr, te) = (dir.join(TRAIN_FILE), dir.join(TEST_FILE));
    let with_path = |p: &Path, e: ialab::tasks::TaskError| CliError::Usage(format!("{}: {e}", p.display()));
    Ok(match task {
        TaskKind::Sorting => Dataset::Sorting(Split {
            train: load(&tr).map_err(|e| with_path(&tr, e))?,
            test: load(&te).map_err(|e| with_path(&te, e))?,
        }),
        TaskKind::Retrieval => Dataset::Retrieval(Split {
            train: load(&tr).map_err(|e| with_path(&tr, e))?,
            test: load(&te).map_err(|e| with_path(&te, e))?,
        }),
    })
}

pub fn gen(target: &Target, flags: &GenFlags) -> Result<Report, CliError> {
    let s: GenSettings = config::resolve(target.config.as_deref(), "gen", flags)?;
    let task: TaskKind = parse(&required(&s.task, "task (sorting or retrieval)")?)?;
    let ds = generate(&dataset_spec(task, s.seed, s.n_train, s.n_test));
    let mut out = OutputDir::create(&target.dir(&format!("gen-{task}")), target.overwrite)?;
    let (train, test) = split_files(&ds);
    out.write(TRAIN_FILE, train.as_bytes())?;
    out.write(TEST_FILE, test.as_bytes())?;
    out.write("config.toml", config::record("gen", &s)?.as_bytes())?;
    let path = out.path().to_path_buf();
    out.finish()?;
    Ok(Report {
        command: format!("gen {task}"),
        seed: s.seed,
        out: path,
        checks: Vec::new(),
        facts: vec![("instances".into(), format!("{}+{}", s.n_train, s.n_test))],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub variant: Option<String>,
    pub task: Option<String>,
    /// `fast` (2 layers, width 64) or `full` (6 layers, width 128).
    pub profile: String,
    /// Defaults to 100 for the fast profile and 200 for the full one.
    pub epochs: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: String,
    pub weight_decay: f64,
    /// Model initialization and batch order.
    pub seed: u64,
    /// Directory written by `gen`; when absent the dataset is generated
    /// from `data_seed`.
    pub data: Option<PathBuf>,
    /// Defaults to `seed`.
    pub data_seed: Option<u64>,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let cfg = TrainConfig::default();
        Self {
            variant: None,
            task: None,
            profile: "fast".into(),
            epochs: None,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            optimizer: cfg.optimizer.to_string(),
            weight_decay: cfg.weight_decay,
            seed: 0,
            data: None,
            data_seed: None,
            n_train: 1000,
            n_test: 200,
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct TrainFlags {
    /// indirect, naive_misaligned or cross.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// sorting or retrieval.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

/// Model shape for a named profile.
pub fn profile_spec(profile: &str, variant: Variant, task: TaskKind) -> Result<(ModelSpec, usize), CliError> {
    match profile {
        "fast" => Ok((ModelSpec::fast(variant, task), 100)),
        "full" => Ok((ModelSpec::full(variant, task), TrainConfig::default().epochs)),
        other => Err(CliError::Usage(format!(
            "unknown profile `{other}` (expected fast, full)"
        ))),
    }
}

/// A fully resolved training run.
#[derive(Clone, Debug)]
pub struct TrainPlan {
    pub settings: TrainSettings,
    pub spec: ModelSpec,
    pub cfg: TrainConfig,
}

impl TrainPlan {
    pub fn new(mut s: TrainSettings) -> Result<Self, CliError> {
        let variant: Variant = parse(&required(&s.variant, "variant (indirect, naive_misaligned, cross)")?)?;
        let task: TaskKind = parse(&required(&s.task, "task (sorting or retrieval)")?)?;
        let (spec, default_epochs) = profile_spec(&s.profile, variant, task)?;
        let epochs = *s.epochs.get_or_insert(default_epochs);
        s.data_seed.get_or_insert(s.seed);
        let cfg = TrainConfig {
            optimizer: parse::<Optimizer>(&s.optimizer)?,
            lr: s.lr,
            epochs,
            batch_size: s.batch_size,
            seed: s.seed,
            weight_decay: s.weight_decay,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(Self { settings: s, spec, cfg })
    }

    pub fn data(&self) -> Result<TaskData, CliError> {
        let s = &self.settings;
        let ds = match &s.data {
            Some(dir) => load_dataset(dir, self.spec.task)?,
            None => generate(&dataset_spec(
                self.spec.task,
                s.data_seed.unwrap_or(s.seed),
                s.n_train,
                s.n_test,
            )),
        };
        Ok(TaskData::from(&ds))
    }

    /// Builds, trains and returns the model with its log.
    pub fn run(&self, on_epoch: impl FnMut(&ialab::models::EpochRow)) -> Result<(Model, TrainLog), CliError> {
        let data = self.data()?;
        let mut model = build_model(&self.spec, self.cfg.seed)?;
        let log = train(&mut model, &data, &self.cfg, on_epoch)?;
        Ok((model, log))
    }
}

pub fn run_train(target: &Target, flags: &TrainFlags, verbose: bool) -> Result<Report, CliError> {
    let s: TrainSettings = config::resolve(target.config.as_deref(), "train", flags)?;
    let plan = TrainPlan::new(s)?;
    let name = format!("train-{}-{}", plan.spec.variant, plan.spec.task);
    let mut out = OutputDir::create(&target.dir(&name), target.overwrite)?;
    let (model, log) = plan.run(|r| {
        if verbose {
            eprintln!(
                "epoch {:>4} loss {:.4} test_acc {:.4} ({} ms)",
                r.epoch, r.train_loss, r.test_accuracy, r.wall_ms
            );
        }
    })?;
    let mut ckpt = Vec::new();
    save_checkpoint(&model, &mut ckpt)?;
    out.write(LOG_FILE, log.to_csv().as_bytes())?;
    out.write(CHECKPOINT_FILE, &ckpt)?;
    out.write("config.toml", config::record("train", &plan.settings)?.as_bytes())?;
    let path = out.path().to_path_buf();
    out.finish()?;
    let acc = log.final_accuracy().unwrap_or(f64::NAN);
    Ok(Report {
        command: format!("train {} {}", plan.spec.variant, plan.spec.task),
        seed: plan.cfg.seed,
        out: path,
        checks: Vec::new(),
        facts: vec![("test_accuracy".into(), fmt_real(acc))],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Used when `data` is absent.
    pub data_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// `test` or `train`.
    pub split: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data: None,
            data_seed: 0,
            n_train: 1000,
            n_test: 200,
            split: "test".into(),
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct EvalFlags {
    /// Checkpoint written by `train`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

pub fn metrics_csv(split: &str, m: &Metrics) -> String {
    format!(
        "{METRICS_HEADER}\n{split},{},{},{}\n",
        fmt_real(m.accuracy),
        fmt_real(m.consistency_accuracy),
        m.n_instances
    )
}

pub fn run_eval(target: &Target, flags: &EvalFlags) -> Result<Report, CliError> {
    let s: EvalSettings = config::resolve(target.config.as_deref(), "eval", flags)?;
    let ckpt = s
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Usage("missing checkpoint".into()))?;
    let file = std::fs::File::open(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
    let model = load_checkpoint(std::io::BufReader::new(file))?;
    let task = model.spec.task;
    let ds = match &s.data {
        Some(dir) => load_dataset(dir, task)?,
        None => generate(&dataset_spec(task, s.data_seed, s.n_train, s.n_test)),
    };
    let data = TaskData::from(&ds);
    let split = match s.split.as_str() {
        "test" => &data.test,
        "train" => &data.train,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split `{other}` (expected test, train)"
            )))
        }
    };
    let m = evaluate(&model, split)?;
    let mut out = OutputDir::create(&target.dir("eval"), target.overwrite)?;
    out.write(METRICS_FILE, metrics_csv(&s.split, &m).as_bytes())?;
    out.write("config.toml", config::record("eval", &s)?.as_bytes())?;
    let path = out.path().to_path_buf();
    out.finish()?;
    Ok(Report {
        command: format!("eval {} {}", model.spec.variant, task),
        seed: s.data_seed,
        out: path,
        checks: Vec::new(),
        facts: vec![
            ("accuracy".into(), fmt_real(m.accuracy)),
            ("consistency_accuracy".into(), fmt_real(m.consistency_accuracy)),
        ],
    })
}
