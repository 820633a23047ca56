//! `ialab repro fig1|fig2`: pinned-seed pipelines with a hashed manifest.

use crate::checks::{self, RunResult};
use crate::config;
use crate::output::OutputDir;
use crate::pipeline::{TrainPlan, TrainSettings};
use crate::{Check, CliError, Report, Target};
use clap::{Args, ValueEnum};
use ialab::models::Variant;
use ialab::noise::{figure1, fmt_real, Figure1Config, WeightsMode};
use ialab::tasks::TaskKind;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    Fig1,
    Fig2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig1Settings {
    pub seed: u64,
    pub n: usize,
    pub trials: usize,
    pub snr_d: Vec<usize>,
    pub sigma: Vec<f64>,
    pub snr_weights: String,
    pub misaligned_d: Vec<usize>,
    pub signal_mean_sq: f64,
    pub shift: Vec<f64>,
    pub gamma_weights: String,
    pub tolerance: f64,
    pub slope_tolerance: f64,
}

impl Default for Fig1Settings {
    fn default() -> Self {
        let c = Figure1Config::default();
        Self {
            seed: c.seed,
            n: c.n,
            trials: c.n_trials,
            snr_d: c.snr_d,
            sigma: c.sigmas,
            snr_weights: c.snr_weights.to_string(),
            misaligned_d: c.misaligned_d,
            signal_mean_sq: c.signal_mean_sq,
            shift: c.shifts,
            gamma_weights: c.gamma_weights.to_string(),
            tolerance: 0.05,
            slope_tolerance: 0.1,
        }
    }
}

impl Fig1Settings {
    pub fn to_config(&self) -> Result<Figure1Config, CliError> {
        let mode = |s: &str| s.parse::<WeightsMode>().map_err(CliError::Usage);
        if self.trials == 0 || self.n == 0 {
            return Err(CliError::Usage("trials and n must be >= 1".into()));
        }
        if self.snr_d.is_empty()
            || self.misaligned_d.is_empty()
            || self.snr_d.contains(&0)
            || self.misaligned_d.contains(&0)
        {
            return Err(CliError::Usage("dimension lists need positive entries".into()));
        }
        if self
            .sigma
            .iter()
            .chain(&self.shift)
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(CliError::Usage(
                "sigma and shift entries must be finite and >= 0".into(),
            ));
        }
        Ok(Figure1Config {
            seed: self.seed,
            n: self.n,
            n_trials: self.trials,
            snr_d: self.snr_d.clone(),
            sigmas: self.sigma.clone(),
            snr_weights: mode(&self.snr_weights)?,
            misaligned_d: self.misaligned_d.clone(),
            signal_mean_sq: self.signal_mean_sq,
            shifts: self.shift.clone(),
            gamma_weights: mode(&self.gamma_weights)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig2Settings {
    pub seeds: Vec<u64>,
    pub tasks: Vec<String>,
    pub variants: Vec<String>,
    pub profile: String,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Required lead of indirect over naive_misaligned, in accuracy.
    pub margin: f64,
    /// Wall-clock budget per task.
    pub budget_s: f64,
}

impl Default for Fig2Settings {
    fn default() -> Self {
        let t = TrainSettings::default();
        Self {
            seeds: vec![0, 1, 2],
            tasks: vec!["sorting".into(), "retrieval".into()],
            variants: Variant::ALL.iter().map(|v| v.to_string()).collect(),
            profile: "fast".into(),
            epochs: 100,
            lr: t.lr,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            margin: 0.20,
            budget_s: 900.0,
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct ReproFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Trials per Monte Carlo cell (fig1).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    /// Training seeds (fig2).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<crate::config::List<u64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
}

pub fn run(figure: Figure, target: &Target, flags: &ReproFlags, verbose: bool) -> Result<Report, CliError> {
    match figure {
        Figure::Fig1 => {
            if flags.seeds.is_some() || flags.epochs.is_some() || flags.profile.is_some() {
                return Err(CliError::Usage("fig1 takes --seed and --trials only".into()));
            }
            let s: Fig1Settings = config::resolve(target.config.as_deref(), "repro.fig1", flags)?;
            fig1(&s, target)
        }
        Figure::Fig2 => {
            if flags.seed.is_some() || flags.trials.is_some() {
                return Err(CliError::Usage("fig2 takes --seeds, --epochs and --profile".into()));
            }
            let s: Fig2Settings = config::resolve(target.config.as_deref(), "repro.fig2", flags)?;
            fig2(&s, target, verbose)
        }
    }
}

pub fn fig1(s: &Fig1Settings, target: &Target) -> Result<Report, CliError> {
    let cfg = s.to_config()?;
    let mut out = OutputDir::create(&target.dir("repro-fig1"), target.overwrite)?;
    let data = figure1(&cfg);
    for (name, text) in data.files() {
        out.write(name, text.as_bytes())?;
    }
    out.write("config.toml", config::record("repro.fig1", s)?.as_bytes())?;
    let mut checks = checks::snr_crossings(&data.snr_vs_sigma, &cfg.snr_d, s.tolerance);
    checks.push(checks::snr_coincidence(&data.snr_vs_sigma, s.tolerance));
    checks.extend(checks::gamma(&data.gamma_vs_d, s.tolerance, s.slope_tolerance));
    checks.extend(checks::misaligned_snr(&data.snr_vs_d_misaligned));
    let path = out.path().to_path_buf();
    out.finish()?;
    Ok(Report {
        command: "repro fig1".into(),
        seed: s.seed,
        out: path,
        checks,
        facts: Vec::new(),
    })
}

pub const FINAL_HEADER: &str = "task,variant,seed,test_accuracy";

/// Final accuracies of every `(task, variant, seed)` run, plus one
/// runtime check per task. `on_run` sees each run as it finishes.
pub fn fig2_runs(
    s: &Fig2Settings,
    mut on_run: impl FnMut(&RunResult, &ialab::models::TrainLog, f64),
) -> Result<(Vec<RunResult>, Vec<Check>), CliError> {
    let mut runs = Vec::new();
    let mut checks = Vec::new();
    for task in &s.tasks {
        let task: TaskKind = task.parse().map_err(CliError::Usage)?;
        let start = Instant::now();
        for &seed in &s.seeds {
            for variant in &s.variants {
                let settings = TrainSettings {
                    variant: Some(variant.clone()),
                    task: Some(task.to_string()),
                    profile: s.profile.clone(),
                    epochs: Some(s.epochs),
                    lr: s.lr,
                    batch_size: s.batch_size,
                    weight_decay: s.weight_decay,
                    seed,
                    data_seed: Some(seed),
                    ..TrainSettings::default()
                };
                let plan = TrainPlan::new(settings)?;
                let t = Instant::now();
                let (_, log) = plan.run(|_| {})?;
                let r = RunResult {
                    task,
                    variant: plan.spec.variant,
                    seed,
                    test_accuracy: log.final_accuracy().unwrap_or(f64::NAN),
                };
                on_run(&r, &log, t.elapsed().as_secs_f64());
                runs.push(r);
            }
        }
        let secs = start.elapsed().as_secs_f64();
        checks.push(Check::new(
            format!("{task} runtime"),
            secs < s.budget_s,
            format!(
                "{secs:.0} s for {} runs (budget {} s)",
                s.seeds.len() * s.variants.len(),
                s.budget_s
            ),
        ));
    }
    Ok((runs, checks))
}

pub fn fig2(s: &Fig2Settings, target: &Target, verbose: bool) -> Result<Report, CliError> {
    let mut out = OutputDir::create(&target.dir("repro-fig2"), target.overwrite)?;
    let mut logs = Vec::new();
    let (runs, mut checks) = fig2_runs(s, |r, log, secs| {
        if verbose {
            eprintln!(
                "{} {} seed {}: test accuracy {:.3} ({secs:.0} s)",
                r.task, r.variant, r.seed, r.test_accuracy
            );
        }
        logs.push((format!("{}_{}_seed{}.csv", r.task, r.variant, r.seed), log.to_csv()));
    })?;
    for (name, text) in &logs {
        out.write(name, text.as_bytes())?;
    }
    let mut table = format!("{FINAL_HEADER}\n");
    for r in &runs {
        table += &format!("{},{},{},{}\n", r.task, r.variant, r.seed, fmt_real(r.test_accuracy));
    }
    out.write("final_accuracy.csv", table.as_bytes())?;
    out.write("config.toml", config::record("repro.fig2", s)?.as_bytes())?;
    let mut ordering = checks::method_ordering(&runs, s.margin);
    ordering.append(&mut checks);
    let path = out.path().to_path_buf();
    out.finish()?;
    Ok(Report {
        command: "repro fig2".into(),
        seed: s.seeds.first().copied().unwrap_or(0),
        out: path,
        checks: ordering,
        facts: vec![(
            "seeds".into(),
            s.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        )],
    })
}
