//! `ialab analyze <kind>`: Monte Carlo checks of the noise closed forms.

use crate::checks;
use crate::config::{self, List, Reals};
use crate::output::OutputDir;
use crate::{Check, CliError, Report, Target};
use clap::{Args, ValueEnum};
use ialab::noise::{
    crossing_sigma, fmt_real, gamma_estimate, lemma1_check, noise_error, snr_sweep, Figure1Data, GammaRow,
    MisalignedSnrRow, MisalignmentSpec, NoiseSpec, TrialConfig, WeightsMode,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Lemma1,
    Lemma2,
    Snr,
    Gamma,
    Mha,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Lemma1 => "lemma1",
            Kind::Lemma2 => "lemma2",
            Kind::Snr => "snr",
            Kind::Gamma => "gamma",
            Kind::Mha => "mha",
        }
    }
}

/// Flags shared by every kind; unset flags leave the config/defaults alone.
/// Not every kind reads every flag.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct AnalyzeFlags {
    /// Embedding dimensions, e.g. `32,64,128`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<List<usize>>,
    /// Sequence lengths (lemma1 grid) or the single length of other kinds.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<List<usize>>,
    /// Noise levels: `0.5,1,2` or `start:stop:step`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Reals>,
    /// Monte Carlo trials per cell.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Attention weight modes: uniform, peaked, random_softmax.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<List<String>>,
    /// Squared mean shifts `|mu_y - mu_x|^2`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<Reals>,
    /// Head counts (mha).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<List<usize>>,
    /// Relative tolerance of the closed-form comparisons.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

/// Resolved settings of one analysis. One struct serves every kind; each
/// kind starts from its own defaults and ignores fields it does not use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSettings {
    pub d: Vec<usize>,
    pub n: Vec<usize>,
    pub sigma: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub weights: Vec<String>,
    pub shift: Vec<f64>,
    pub heads: Vec<usize>,
    pub tolerance: f64,
    /// Squared norm of the key mean in the misaligned-SNR table.
    pub signal_mean_sq: f64,
    /// Slope tolerance of the gamma-vs-d fit.
    pub slope_tolerance: f64,
}

impl AnalyzeSettings {
    pub fn defaults(kind: Kind) -> Self {
        let base = Self {
            d: vec![64],
            n: vec![16],
            sigma: vec![1.0],
            trials: 100_000,
            seed: 7,
            weights: vec!["peaked".into()],
            shift: vec![0.0],
            heads: vec![1],
            tolerance: 0.05,
            signal_mean_sq: 64.0,
            slope_tolerance: 0.1,
        };
        match kind {
            Kind::Lemma1 => Self {
                d: vec![16, 64, 128],
                n: vec![4, 16],
                sigma: vec![0.5, 1.0, 2.0],
                trials: 60_000,
                weights: vec!["random_softmax".into()],
                ..base
            },
            Kind::Lemma2 => Self {
                weights: vec!["uniform".into(), "peaked".into(), "random_softmax".into()],
                tolerance: 0.03,
                ..base
            },
            Kind::Snr => Self {
                d: vec![32, 64, 128],
                sigma: (1..=20).map(|i| i as f64 / 10.0).collect(),
                weights: vec!["random_softmax".into()],
                ..base
            },
            Kind::Gamma => Self {
                d: vec![16, 32, 64, 128],
                shift: vec![0.0, 16.0, 64.0],
                ..base
            },
            Kind::Mha => Self {
                heads: vec![1, 2, 4],
                shift: vec![0.0, 4.0],
                ..base
            },
        }
    }

    fn modes(&self) -> Result<Vec<WeightsMode>, CliError> {
        self.weights
            .iter()
            .map(|w| w.parse().map_err(CliError::Usage))
            .collect()
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.trials == 0 {
            return bad("--trials must be >= 1");
        }
        if self.d.is_empty() || self.d.contains(&0) || self.n.is_empty() || self.n.contains(&0) {
            return bad("--d and --n need positive entries");
        }
        if self.sigma.is_empty() || self.sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("--sigma entries must be finite and >= 0");
        }
        if self.shift.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || !(self.signal_mean_sq >= 0.0) {
            return bad("--shift entries must be finite and >= 0");
        }
        if self.heads.is_empty() || self.heads.contains(&0) {
            return bad("--heads needs positive entries");
        }
        if !(self.tolerance > 0.0) || !(self.slope_tolerance > 0.0) {
            return bad("tolerances must be > 0");
        }
        self.modes()?;
        Ok(())
    }
}

/// Lets `resolve` start from the kind's defaults rather than a single
/// shared default.
#[derive(Serialize, Deserialize, Default)]
#[serde(transparent)]
struct Layered(toml::Table);

pub fn resolve(kind: Kind, target: &Target, flags: &AnalyzeFlags) -> Result<AnalyzeSettings, CliError> {
    let section = format!("analyze.{}", kind.name());
    let mut table =
        toml::Table::try_from(AnalyzeSettings::defaults(kind)).map_err(|e| CliError::Internal(e.to_string()))?;
    let overlay: Layered = config::resolve(target.config.as_deref(), &section, flags)?;
    table.extend(overlay.0);
    let s: AnalyzeSettings = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Usage(format!("[{section}]: {e}")))?;
    s.validate()?;
    Ok(s)
}

pub fn run(kind: Kind, target: &Target, flags: &AnalyzeFlags) -> Result<Report, CliError> {
    let s = resolve(kind, target, flags)?;
    let mut out = OutputDir::create(&target.dir(&format!("analyze-{}", kind.name())), target.overwrite)?;
    let checks = match kind {
        Kind::Lemma1 => lemma1(&s, &mut out)?,
        Kind::Lemma2 => lemma2(&s, &mut out)?,
        Kind::Snr => snr(&s, &mut out)?,
        Kind::Gamma => gamma(&s, &mut out)?,
        Kind::Mha => mha(&s, &mut out)?,
    };
    out.write(
        "config.toml",
        config::record(&format!("analyze.{}", kind.name()), &s)?.as_bytes(),
    )?;
    let path = out.path().to_path_buf();
    out.finish()?;
    Ok(Report {
        command: format!("analyze {}", kind.name()),
        seed: s.seed,
        out: path,
        checks,
        facts: Vec::new(),
    })
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s += &r;
        s.push('\n');
    }
    s
}

pub const LEMMA1_HEADER: &str = "d,n,sigma,weights,n_trials,violations,min_slack,max_slack";
pub const LEMMA2_HEADER: &str = "d,n,sigma,weights,empirical,theoretical,rel_error,std_error,n_trials";
pub const MHA_HEADER: &str = "heads,quantity,mean_shift_sq,empirical,theoretical,rel_error,n_trials";
pub const CROSSING_HEADER: &str = "d,crossing_sigma";

fn lemma1(s: &AnalyzeSettings, out: &mut OutputDir) -> Result<Vec<Check>, CliError> {
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for mode in s.modes()? {
        for &d in &s.d {
            for &n in &s.n {
                for &sigma in &s.sigma {
                    let r = lemma1_check(&TrialConfig::new(d, n, s.trials, s.seed, mode), &NoiseSpec::new(sigma));
                    rows.push(format!(
                        "{d},{n},{},{mode},{},{},{},{}",
                        fmt_real(sigma),
                        r.n_trials,
                        r.violations,
                        fmt_real(r.gap_range.0),
                        fmt_real(r.gap_range.1)
                    ));
                    reports.push(r);
                }
            }
        }
    }
    out.write("lemma1.csv", csv(LEMMA1_HEADER, rows).as_bytes())?;
    Ok(vec![checks::lemma1(&reports)])
}

fn lemma2(s: &AnalyzeSettings, out: &mut OutputDir) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for mode in s.modes()? {
        for &d in &s.d {
            for &n in &s.n {
                for &sigma in &s.sigma {
                    let e =
                        noise_error(&TrialConfig::new(d, n, s.trials, s.seed, mode), &NoiseSpec::new(sigma)).aggregated;
                    rows.push(format!(
                        "{d},{n},{},{mode},{},{},{},{},{}",
                        fmt_real(sigma),
                        fmt_real(e.empirical),
                        fmt_real(e.theoretical),
                        fmt_real(e.rel_error),
                        fmt_real(e.std_error),
                        e.n_trials
                    ));
                    if sigma == 0.0 {
                        continue;
                    }
                    let cell = format!("d={d} n={n} sigma={sigma}");
                    // The two analytic endpoints are checked against their
                    // literal closed forms.
                    let expected = match mode {
                        WeightsMode::Peaked => sigma * sigma * d as f64,
                        WeightsMode::Uniform => sigma * sigma * d as f64 / n as f64,
                        WeightsMode::RandomSoftmax => e.theoretical,
                    };
                    checks.push(checks::relative(
                        format!("lemma2 {mode} {cell}"),
                        e.empirical,
                        expected,
                        s.tolerance,
                    ));
                }
            }
        }
    }
    out.write("lemma2.csv", csv(LEMMA2_HEADER, rows).as_bytes())?;
    Ok(checks)
}

fn single(v: &[usize], what: &str) -> Result<usize, CliError> {
    match v {
        [x] => Ok(*x),
        _ => Err(CliError::Usage(format!("this analysis takes a single --{what}"))),
    }
}

fn snr(s: &AnalyzeSettings, out: &mut OutputDir) -> Result<Vec<Check>, CliError> {
    let [mode] = s.modes()?[..] else {
        return Err(CliError::Usage("snr takes a single --weights mode".into()));
    };
    let n = single(&s.n, "n")?;
    let base = TrialConfig::new(s.d[0], n, s.trials, s.seed, mode);
    let rows = snr_sweep(&s.d, &s.sigma, &base);
    let data = Figure1Data {
        snr_vs_sigma: rows,
        snr_vs_d_misaligned: Vec::new(),
        gamma_vs_d: Vec::new(),
    };
    out.write("snr_vs_sigma.csv", data.snr_vs_sigma_csv().as_bytes())?;
    let crossings = s.d.iter().map(|&d| {
        let c = crossing_sigma(&data.snr_vs_sigma, d).map_or("nan".to_string(), fmt_real);
        format!("{d},{c}")
    });
    out.write("crossings.csv", csv(CROSSING_HEADER, crossings).as_bytes())?;
    let mut checks = checks::snr_crossings(&data.snr_vs_sigma, &s.d, s.tolerance);
    checks.push(checks::snr_coincidence(&data.snr_vs_sigma, s.tolerance));
    Ok(checks)
}

/// Gamma and misaligned-SNR tables over `d x shift`.
pub fn gamma_tables(
    d_list: &[usize],
    shifts: &[f64],
    n: usize,
    trials: usize,
    seed: u64,
    mode: WeightsMode,
    signal_mean_sq: f64,
) -> (Vec<GammaRow>, Vec<MisalignedSnrRow>) {
    let mut gammas = Vec::new();
    let mut snrs = Vec::new();
    for &shift in shifts {
        for &d in d_list {
            let g = gamma_estimate(
                &TrialConfig::new(d, n, trials, seed, mode),
                &MisalignmentSpec::with_norms(d, signal_mean_sq, shift),
            );
            gammas.push(GammaRow {
                d,
                mean_shift_sq: shift,
                gamma_empirical: g.empirical,
                gamma_theoretical: g.theoretical,
                n_trials: trials,
            });
            snrs.push(MisalignedSnrRow {
                d,
                mean_shift_sq: shift,
                snr_empirical: g.snr(),
                n_trials: trials,
            });
        }
    }
    (gammas, snrs)
}

fn gamma(s: &AnalyzeSettings, out: &mut OutputDir) -> Result<Vec<Check>, CliError> {
    let [mode] = s.modes()?[..] else {
        return Err(CliError::Usage("gamma takes a single --weights mode".into()));
    };
    let n = single(&s.n, "n")?;
    let (gammas, snrs) = gamma_tables(&s.d, &s.shift, n, s.trials, s.seed, mode, s.signal_mean_sq);
    let mut checks = checks::gamma(&gammas, s.tolerance, s.slope_tolerance);
    checks.extend(checks::misaligned_snr(&snrs));
    let data = Figure1Data {
        snr_vs_sigma: Vec::new(),
        snr_vs_d_misaligned: snrs,
        gamma_vs_d: gammas,
    };
    out.write("gamma_vs_d.csv", data.gamma_vs_d_csv().as_bytes())?;
    out.write("snr_vs_d_misaligned.csv", data.snr_vs_d_misaligned_csv().as_bytes())?;
    Ok(checks)
}

fn mha(s: &AnalyzeSettings, out: &mut OutputDir) -> Result<Vec<Check>, CliError> {
    let [mode] = s.modes()?[..] else {
        return Err(CliError::Usage("mha takes a single --weights mode".into()));
    };
    let (d, n) = (single(&s.d, "d")?, single(&s.n, "n")?);
    let sigma = match s.sigma[..] {
        [x] => x,
        _ => return Err(CliError::Usage("mha takes a single --sigma".into())),
    };
    if let Some(h) = s.heads.iter().find(|&&h| d % h != 0) {
        return Err(CliError::Usage(format!("{h} heads do not divide d = {d}")));
    }
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    let row = |h: usize, q: &str, shift: f64, emp: f64, th: f64, t: usize| {
        format!(
            "{h},{q},{},{},{},{},{t}",
            fmt_real(shift),
            fmt_real(emp),
            fmt_real(th),
            fmt_real(((emp - th) / th).abs())
        )
    };
    for &h in &s.heads {
        let cfg = TrialConfig::new(d, n, s.trials, s.seed, mode).with_heads(h);
        let e = noise_error(&cfg, &NoiseSpec::new(sigma)).aggregated;
        rows.push(row(h, "noise_error", 0.0, e.empirical, e.theoretical, e.n_trials));
        checks.push(checks::relative(
            format!("mha noise error H={h}"),
            e.empirical,
            e.theoretical,
            s.tolerance,
        ));
        for &shift in &s.shift {
            let g = gamma_estimate(&cfg, &MisalignmentSpec::with_norms(d, s.signal_mean_sq, shift));
            rows.push(row(
                h,
                "gamma_head_average",
                shift,
                g.empirical,
                g.theoretical_multi_head,
                g.n_trials,
            ));
            rows.push(row(
                h,
                "gamma_exact",
                shift,
                g.empirical,
                g.theoretical_general,
                g.n_trials,
            ));
            checks.push(checks::relative(
                format!("mha gamma H={h} shift={shift}"),
                g.empirical,
                g.theoretical_multi_head,
                s.tolerance,
            ));
        }
    }
    out.write("mha.csv", csv(MHA_HEADER, rows).as_bytes())?;
    Ok(checks)
}
