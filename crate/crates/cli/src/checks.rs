//! Tolerance checks shared by `analyze`, `repro` and the acceptance suite.

use crate::Check;
use ialab::models::Variant;
use ialab::noise::{crossing_sigma, fit_line, GammaRow, Lemma1Report, MisalignedSnrRow, SnrRow};
use ialab::tasks::TaskKind;

/// Zero violations of the norm bound over all cells.
pub fn lemma1(reports: &[Lemma1Report]) -> Check {
    let trials: usize = reports.iter().map(|r| r.n_trials).sum();
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    let min_gap = reports.iter().map(|r| r.gap_range.0).fold(f64::INFINITY, f64::min);
    Check::new(
        "lemma1 bound",
        violations == 0,
        format!(
            "{violations} violations in {trials} trials over {} cells, min slack {min_gap:.3e}",
            reports.len()
        ),
    )
}

/// Empirical value within `tol` (relative) of a closed form.
pub fn relative(name: impl Into<String>, empirical: f64, expected: f64, tol: f64) -> Check {
    let rel = ((empirical - expected) / expected).abs();
    Check::new(
        name,
        rel < tol,
        format!("empirical {empirical:.6} vs {expected:.6}, rel error {rel:.4} (tol {tol})"),
    )
}

/// Each d's curve crosses SNR = 1 within `tol` of sigma = 1.
pub fn snr_crossings(rows: &[SnrRow], d_list: &[usize], tol: f64) -> Vec<Check> {
    d_list
        .iter()
        .map(|&d| match crossing_sigma(rows, d) {
            Some(s) => Check::new(
                format!("snr crossing d={d}"),
                (s - 1.0).abs() < tol,
                format!("sigma* = {s:.5} (tol {tol})"),
            ),
            None => Check::new(format!("snr crossing d={d}"), false, "curve never crosses SNR = 1"),
        })
        .collect()
}

/// Largest pointwise spread `(max - min) / min` across d, over all sigma.
pub fn snr_coincidence(rows: &[SnrRow], tol: f64) -> Check {
    let mut sigmas: Vec<f64> = rows.iter().map(|r| r.sigma).filter(|s| *s > 0.0).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    let mut worst = (0.0, f64::NAN);
    for s in sigmas {
        let vals: Vec<f64> = rows.iter().filter(|r| r.sigma == s).map(|r| r.snr_empirical).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let spread = (hi - lo) / lo;
        if spread > worst.0 || worst.1.is_nan() {
            worst = (spread, s);
        }
    }
    Check::new(
        "snr curves coincide across d",
        worst.0 < tol,
        format!("max spread {:.4} at sigma {} (tol {tol})", worst.0, worst.1),
    )
}

/// Per-row gamma accuracy, then an affine fit in d for every shift: slope
/// 2 and, for non-zero shifts, intercept equal to the shift.
pub fn gamma(rows: &[GammaRow], tol: f64, slope_tol: f64) -> Vec<Check> {
    let mut checks = Vec::new();
    let worst = rows
        .iter()
        .map(|r| {
            (
                ((r.gamma_empirical - r.gamma_theoretical) / r.gamma_theoretical).abs(),
                r,
            )
        })
        .max_by(|a, b| a.0.total_cmp(&b.0));
    if let Some((rel, r)) = worst {
        checks.push(Check::new(
            "gamma matches 2d + |dmu|^2",
            rel < tol,
            format!(
                "worst rel error {rel:.4} at d={} shift={} (tol {tol})",
                r.d, r.mean_shift_sq
            ),
        ));
    }
    for shift in shifts(rows.iter().map(|r| r.mean_shift_sq)) {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.mean_shift_sq == shift)
            .map(|r| (r.d as f64, r.gamma_empirical))
            .collect();
        if pts.len() < 2 {
            continue;
        }
        let (slope, intercept) = fit_line(&pts);
        checks.push(Check::new(
            format!("gamma slope shift={shift}"),
            (slope - 2.0).abs() < slope_tol,
            format!("slope {slope:.4} (2 +/- {slope_tol})"),
        ));
        if shift > 0.0 {
            checks.push(Check::new(
                format!("gamma intercept shift={shift}"),
                (intercept - shift).abs() < tol * shift,
                format!("intercept {intercept:.4} ({shift} +/- {})", tol * shift),
            ));
        }
    }
    checks
}

/// Misaligned SNR strictly decreasing in d, per shift.
pub fn misaligned_snr(rows: &[MisalignedSnrRow]) -> Vec<Check> {
    shifts(rows.iter().map(|r| r.mean_shift_sq))
        .into_iter()
        .map(|shift| {
            let mut curve: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| r.mean_shift_sq == shift)
                .map(|r| (r.d, r.snr_empirical))
                .collect();
            curve.sort_by_key(|p| p.0);
            let ok = curve.windows(2).all(|w| w[1].1 < w[0].1);
            let shown: Vec<String> = curve.iter().map(|(d, s)| format!("{d}:{s:.4}")).collect();
            Check::new(format!("misaligned snr decreasing shift={shift}"), ok, shown.join(" "))
        })
        .collect()
}

fn shifts(it: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = it.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Final test accuracy of one training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunResult {
    pub task: TaskKind,
    pub variant: Variant,
    pub seed: u64,
    pub test_accuracy: f64,
}

/// Per task and seed: indirect >= cross >= naive, and indirect ahead of
/// naive by at least `margin`.
pub fn method_ordering(runs: &[RunResult], margin: f64) -> Vec<Check> {
    let mut keys: Vec<(TaskKind, u64)> = runs.iter().map(|r| (r.task, r.seed)).collect();
    keys.sort_by_key(|(t, s)| (t.to_string(), *s));
    keys.dedup();
    let mut checks = Vec::new();
    for (task, seed) in keys {
        let acc = |v: Variant| {
            runs.iter()
                .find(|r| r.task == task && r.seed == seed && r.variant == v)
                .map(|r| r.test_accuracy)
        };
        let (Some(ia), Some(cross), Some(naive)) = (
            acc(Variant::Indirect),
            acc(Variant::Cross),
            acc(Variant::NaiveMisaligned),
        ) else {
            continue;
        };
        checks.push(Check::new(
            format!("{task} seed={seed} ordering"),
            ia >= cross && cross >= naive,
            format!("indirect {ia:.3} >= cross {cross:.3} >= naive_misaligned {naive:.3}"),
        ));
        checks.push(Check::new(
            format!("{task} seed={seed} margin"),
            ia - naive >= margin,
            format!("indirect - naive_misaligned = {:.3} (need >= {margin})", ia - naive),
        ));
    }
    checks
}
