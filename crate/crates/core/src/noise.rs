//! Monte Carlo estimates of how value-side noise and key/value misalignment
//! propagate through an attention read-out, next to their closed forms.
//!
//! A trial draws tokens, attention weights and perturbations, forms the
//! attention output `o = sum_i a_i x_i W_v` (optionally per head, then `W_o`)
//! and records squared norms. `W_v` and `W_o` are Haar-orthogonal and drawn
//! once per experiment cell. Each trial owns the random stream
//! `(seed, cell, trial)`, so estimates do not depend on evaluation order.
//!
//! Weighted sums are formed before projecting; by linearity this equals
//! projecting each token first.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::init;
use crate::rng::{self, Rng as StreamRng};
use crate::tensor::Tensor;

/// Slack allowed on the triangle-inequality bound for rounding.
pub const LEMMA1_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightsMode {
    /// `a_i = 1/n`.
    Uniform,
    /// All weight on one uniformly chosen position.
    Peaked,
    /// Softmax of i.i.d. standard normal logits.
    RandomSoftmax,
}

impl WeightsMode {
    pub const ALL: [WeightsMode; 3] = [WeightsMode::Uniform, WeightsMode::Peaked, WeightsMode::RandomSoftmax];

    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            WeightsMode::Uniform => vec![1.0 / n as f64; n],
            WeightsMode::Peaked => {
                let mut a = vec![0.0; n];
                a[rng.random_range(0..n)] = 1.0;
                a
            }
            WeightsMode::RandomSoftmax => {
                let logits: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                exp.into_iter().map(|e| e / z).collect()
            }
        }
    }
}

impl fmt::Display for WeightsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightsMode::Uniform => "uniform",
            WeightsMode::Peaked => "peaked",
            WeightsMode::RandomSoftmax => "random_softmax",
        })
    }
}

impl FromStr for WeightsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(WeightsMode::Uniform),
            "peaked" => Ok(WeightsMode::Peaked),
            "random_softmax" => Ok(WeightsMode::RandomSoftmax),
            other => Err(format!(
                "unknown weights mode `{other}` (expected uniform, peaked, random_softmax)"
            )),
        }
    }
}

/// Shape of the token distribution; only its first two moments matter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputDist {
    Gaussian,
    /// Uniform on `mu +- sqrt(3) sigma` per component.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    /// Per-component standard deviation of the additive noise.
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64) -> Self {
        assert!(sigma >= 0.0 && sigma.is_finite(), "noise sigma must be finite and >= 0");
        Self { sigma }
    }
}

/// Key-side (`x`) and value-side (`y`) token distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct MisalignmentSpec {
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub dist: InputDist,
    /// When set, `y_i` is the very same sample as `x_i`.
    pub coupled: bool,
}

impl MisalignmentSpec {
    /// Unit-variance Gaussians with constant-per-component means such that
    /// `|mu_x|^2 = mean_sq_x` and `|mu_y - mu_x|^2 = shift_sq`.
    pub fn with_norms(d: usize, mean_sq_x: f64, shift_sq: f64) -> Self {
        let mx = (mean_sq_x / d as f64).sqrt();
        let s = (shift_sq / d as f64).sqrt();
        Self {
            mu_x: vec![mx; d],
            mu_y: vec![mx + s; d],
            sigma_x: vec![1.0; d],
            sigma_y: vec![1.0; d],
            dist: InputDist::Gaussian,
            coupled: false,
        }
    }

    /// `y_i = x_i` sample by sample.
    pub fn aligned(d: usize) -> Self {
        Self {
            coupled: true,
            ..Self::with_norms(d, 0.0, 0.0)
        }
    }

    pub fn d(&self) -> usize {
        self.mu_x.len()
    }

    pub fn shift_sq(&self) -> f64 {
        self.mu_y.iter().zip(&self.mu_x).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn validate(&self) {
        let d = self.d();
        assert!(
            self.mu_y.len() == d && self.sigma_x.len() == d && self.sigma_y.len() == d,
            "misalignment moments must share one dimension"
        );
        assert!(
            self.mu_x
                .iter()
                .chain(&self.mu_y)
                .chain(&self.sigma_x)
                .chain(&self.sigma_y)
                .all(|v| v.is_finite()),
            "misalignment moments must be finite"
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialConfig {
    pub d: usize,
    pub n: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub weights_mode: WeightsMode,
    pub heads: usize,
}

impl TrialConfig {
    pub fn new(d: usize, n: usize, n_trials: usize, seed: u64, weights_mode: WeightsMode) -> Self {
        Self {
            d,
            n,
            n_trials,
            seed,
            weights_mode,
            heads: 1,
        }
    }

    pub fn with_heads(self, heads: usize) -> Self {
        Self { heads, ..self }
    }

    fn validate(&self) {
        assert!(self.n_trials >= 1, "n_trials must be >= 1");
        assert!(self.d >= 1 && self.n >= 1, "d and n must be positive");
        assert!(
            self.heads >= 1 && self.d.is_multiple_of(self.heads),
            "heads {} must divide d {}",
            self.heads,
            self.d
        );
    }

    fn d_head(&self) -> usize {
        self.d / self.heads
    }
}

/// Monte Carlo mean next to its closed form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub empirical: f64,
    pub theoretical: f64,
    /// `|empirical - theoretical| / max(theoretical, 1e-12)`.
    pub rel_error: f64,
    /// Standard error of `empirical`.
    pub std_error: f64,
    pub n_trials: usize,
}

impl Estimate {
    fn new(empirical: f64, theoretical: f64, std_error: f64, n_trials: usize) -> Self {
        Self {
            empirical,
            theoretical,
            rel_error: rel_error(empirical, theoretical),
            std_error,
            n_trials,
        }
    }
}

pub type SnrEstimate = Estimate;

pub fn rel_error(empirical: f64, theoretical: f64) -> f64 {
    (empirical - theoretical).abs() / theoretical.max(1e-12)
}

/// Running mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn std_error(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.m2 / (self.count - 1) as f64 / self.count as f64).sqrt()
    }
}

/// Stable id for an experiment cell, used to derive random streams.
fn cell_id(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Orthogonal `W_v` (and `W_o` when there are several heads) for a cell.
struct Readout {
    d: usize,
    heads: usize,
    w_v: Tensor,
    w_o: Option<Tensor>,
}

impl Readout {
    fn new(cfg: &TrialConfig, cell: u64) -> Self {
        let mut r = rng::substream(cfg.seed, cell, u64::MAX);
        let w_v = init::orthogonal(cfg.d, &mut r);
        let w_o = (cfg.heads > 1).then(|| init::orthogonal(cfg.d, &mut r));
        Self {
            d: cfg.d,
            heads: cfg.heads,
            w_v,
            w_o,
        }
    }

    /// Head `h` contributes `sums[h] W_v[:, block h]`; the concatenation is
    /// mapped through `W_o` when present.
    fn project(&self, sums: &[Vec<f64>]) -> Vec<f64> {
        let d = self.d;
        let dh = d / self.heads;
        let w = self.w_v.data();
        let mut concat = vec![0.0; d];
        for (h, s) in sums.iter().enumerate() {
            let out = &mut concat[h * dh..(h + 1) * dh];
            for (k, &sk) in s.iter().enumerate() {
                let row = &w[k * d + h * dh..k * d + (h + 1) * dh];
                for (o, &wv) in out.iter_mut().zip(row) {
                    *o += sk * wv;
                }
            }
        }
        match &self.w_o {
            None => concat,
            Some(wo) => vec_mat(&concat, wo),
        }
    }

    /// `|mu W_v[:, block h]|^2` for every head.
    fn head_energies(&self, mu: &[f64]) -> Vec<f64> {
        let dh = self.d / self.heads;
        let p = vec_mat(mu, &self.w_v);
        p.chunks(dh).map(norm_sq).collect()
    }

    /// `tr(W_h^T diag(var) W_h)` for every head block.
    fn head_traces(&self, var: &[f64]) -> Vec<f64> {
        let (d, dh) = (self.d, self.d / self.heads);
        let w = self.w_v.data();
        (0..self.heads)
            .map(|h| {
                (0..d)
                    .map(|k| var[k] * norm_sq(&w[k * d + h * dh..k * d + (h + 1) * dh]))
                    .sum()
            })
            .collect()
    }
}

fn vec_mat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let c = m.cols();
    let mut out = vec![0.0; c];
    for (k, &vk) in v.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(m.row(k)) {
            *o += vk * w;
        }
    }
    out
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn diff_norm_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `n x d` standard normal tokens scaled by `scale`.
fn normal_tokens(rng: &mut StreamRng, n: usize, d: usize, scale: f64) -> Vec<f64> {
    (0..n * d)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        })
        .collect()
}

fn moment_tokens(rng: &mut StreamRng, n: usize, mu: &[f64], sd: &[f64], dist: InputDist) -> Vec<f64> {
    let d = mu.len();
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        for k in 0..d {
            let z: f64 = match dist {
                InputDist::Gaussian => rng.sample(StandardNormal),
                InputDist::Uniform => rng.random_range(-3f64.sqrt()..3f64.sqrt()),
            };
            out.push(mu[k] + sd[k] * z);
        }
    }
    out
}

fn weighted_sum(a: &[f64], tokens: &[f64], d: usize) -> Vec<f64> {
    let mut s = vec![0.0; d];
    for (ai, tok) in a.iter().zip(tokens.chunks(d)) {
        if *ai == 0.0 {
            continue;
        }
        for (sk, t) in s.iter_mut().zip(tok) {
            *sk += ai * t;
        }
    }
    s
}

fn sum_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Result of checking `|o_hat - o*| <= sum_i a_i |eps_i|` trial by trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lemma1Report {
    pub fraction_violations: f64,
    pub violations: usize,
    pub n_trials: usize,
    /// Smallest and largest `lhs - rhs` seen.
    pub gap_range: (f64, f64),
}

/// Checks the triangle bound on the noisy attention output.
pub fn lemma1_check(cfg: &TrialConfig, noise: &NoiseSpec) -> Lemma1Report {
    cfg.validate();
    let cell = cell_id(&format!(
        "lemma1/{}/{}/{}/{}",
        cfg.d, cfg.n, cfg.weights_mode, noise.sigma
    ));
    let readout = Readout::new(&TrialConfig { heads: 1, ..*cfg }, cell);
    let (d, n) = (cfg.d, cfg.n);
    let mut violations = 0;
    let mut gap_range = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..cfg.n_trials {
        let mut r = rng::substream(cfg.seed, cell, t as u64);
        let a = cfg.weights_mode.sample(n, &mut r);
        let x = normal_tokens(&mut r, n, d, 1.0);
        let eps = normal_tokens(&mut r, n, d, noise.sigma);
        let noisy: Vec<f64> = x.iter().zip(&eps).map(|(u, e)| u + e).collect();
        let clean = readout.project(&[weighted_sum(&a, &x, d)]);
        let hat = readout.project(&[weighted_sum(&a, &noisy, d)]);
        let lhs = diff_norm_sq(&hat, &clean).sqrt();
        let rhs: f64 = a.iter().zip(eps.chunks(d)).map(|(ai, e)| ai * norm_sq(e).sqrt()).sum();
        let gap = lhs - rhs;
        gap_range = (gap_range.0.min(gap), gap_range.1.max(gap));
        if gap > LEMMA1_SLACK {
            violations += 1;
        }
    }
    Lemma1Report {
        fraction_violations: violations as f64 / cfg.n_trials as f64,
        violations,
        n_trials: cfg.n_trials,
        gap_range,
    }
}

/// Per-head and aggregated squared output error under value noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseErrorReport {
    /// Error of the full read-out (after `W_o` when `heads > 1`).
    pub aggregated: Estimate,
    /// Error of each head's own output, `sigma^2 d_h sum_i (a_i^h)^2` in expectation.
    pub per_head: Vec<Estimate>,
}

/// Expected squared error `E|o_hat - o*|^2` against `sigma^2 d sum_i a_i^2`
/// (or its per-head sum when `heads > 1`). For random weight modes the
/// closed form uses the trial average of `sum_i a_i^2`.
pub fn lemma2_error(cfg: &TrialConfig, noise: &NoiseSpec) -> Estimate {
    noise_error(cfg, noise).aggregated
}

/// Multi-head form of [`lemma2_error`], keeping each head's estimate.
pub fn noise_error(cfg: &TrialConfig, noise: &NoiseSpec) -> NoiseErrorReport {
    cfg.validate();
    let cell = cell_id(&format!(
        "lemma2/{}/{}/{}/{}/{}",
        cfg.d, cfg.n, cfg.weights_mode, cfg.heads, noise.sigma
    ));
    let readout = Readout::new(cfg, cell);
    let (d, n, heads, dh) = (cfg.d, cfg.n, cfg.heads, cfg.d_head());
    // Head outputs before W_o.
    let per_head_readout = (heads > 1).then(|| Readout {
        d,
        heads,
        w_v: readout.w_v.clone(),
        w_o: None,
    });
    let sigma2 = noise.sigma * noise.sigma;
    let mut total = Moments::default();
    let mut head_err = vec![Moments::default(); heads];
    let mut conc = vec![0.0; heads];
    for t in 0..cfg.n_trials {
        let mut r = rng::substream(cfg.seed, cell, t as u64);
        let weights: Vec<Vec<f64>> = (0..heads).map(|_| cfg.weights_mode.sample(n, &mut r)).collect();
        let x = normal_tokens(&mut r, n, d, 1.0);
        let eps = normal_tokens(&mut r, n, d, noise.sigma);
        let noisy: Vec<f64> = x.iter().zip(&eps).map(|(u, e)| u + e).collect();
        let clean_sums: Vec<Vec<f64>> = weights.iter().map(|a| weighted_sum(a, &x, d)).collect();
        let noisy_sums: Vec<Vec<f64>> = weights.iter().map(|a| weighted_sum(a, &noisy, d)).collect();
        let clean = readout.project(&clean_sums);
        let hat = readout.project(&noisy_sums);
        total.push(diff_norm_sq(&hat, &clean));
        if let Some(ro) = &per_head_readout {
            let (c, h) = (ro.project(&clean_sums), ro.project(&noisy_sums));
            for hh in 0..heads {
                head_err[hh].push(diff_norm_sq(&h[hh * dh..(hh + 1) * dh], &c[hh * dh..(hh + 1) * dh]));
            }
        } else {
            head_err[0].push(diff_norm_sq(&hat, &clean));
        }
        for (c, a) in conc.iter_mut().zip(&weights) {
            *c += sum_sq(a);
        }
    }
    let trials = cfg.n_trials as f64;
    let per_head: Vec<Estimate> = head_err
        .iter()
        .zip(&conc)
        .map(|(m, c)| Estimate::new(m.mean, sigma2 * dh as f64 * c / trials, m.std_error(), cfg.n_trials))
        .collect();
    let theory: f64 = per_head.iter().map(|e| e.theoretical).sum();
    NoiseErrorReport {
        aggregated: Estimate::new(total.mean, theory, total.std_error(), cfg.n_trials),
        per_head,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrRow {
    pub d: usize,
    pub sigma: f64,
    /// `+inf` when `sigma == 0`.
    pub snr_empirical: f64,
    pub snr_theoretical: f64,
    pub n_trials: usize,
}

/// Empirical SNR `E|o*|^2 / E|o_hat - o*|^2` over a grid of noise levels for
/// each `d`. Tokens are zero-mean with unit variance. Within one `d`, every
/// `sigma` reuses the same token and unit-noise draws (common random numbers),
/// so each curve is smooth in `sigma`.
pub fn snr_sweep(d_list: &[usize], sigma_list: &[f64], cfg: &TrialConfig) -> Vec<SnrRow> {
    let mut rows = Vec::with_capacity(d_list.len() * sigma_list.len());
    for &d in d_list {
        let cell_cfg = TrialConfig { d, ..*cfg };
        cell_cfg.validate();
        let cell = cell_id(&format!("snr/{}/{}/{}/{}", d, cfg.n, cfg.weights_mode, cfg.heads));
        let readout = Readout::new(&cell_cfg, cell);
        let mut signal = 0.0;
        let mut err = vec![0.0; sigma_list.len()];
        for t in 0..cfg.n_trials {
            let mut r = rng::substream(cfg.seed, cell, t as u64);
            let weights: Vec<Vec<f64>> = (0..cfg.heads).map(|_| cfg.weights_mode.sample(cfg.n, &mut r)).collect();
            let x = normal_tokens(&mut r, cfg.n, d, 1.0);
            let unit = normal_tokens(&mut r, cfg.n, d, 1.0);
            let clean = readout.project(&weights.iter().map(|a| weighted_sum(a, &x, d)).collect::<Vec<_>>());
            let noise_dir = readout.project(&weights.iter().map(|a| weighted_sum(a, &unit, d)).collect::<Vec<_>>());
            signal += norm_sq(&clean);
            for (e, &s) in err.iter_mut().zip(sigma_list) {
                let hat: Vec<f64> = clean.iter().zip(&noise_dir).map(|(c, u)| c + s * u).collect();
                *e += diff_norm_sq(&hat, &clean);
            }
        }
        for (&s, e) in sigma_list.iter().zip(&err) {
            let (emp, theo) = if s == 0.0 {
                (f64::INFINITY, f64::INFINITY)
            } else {
                (signal / e, 1.0 / (s * s))
            };
            rows.push(SnrRow {
                d,
                sigma: s,
                snr_empirical: emp,
                snr_theoretical: theo,
                n_trials: cfg.n_trials,
            });
        }
    }
    rows
}

/// Noise level at which the empirical SNR of dimension `d` falls through 1,
/// interpolated linearly in `log sigma` / `log snr` between grid points.
pub fn crossing_sigma(rows: &[SnrRow], d: usize) -> Option<f64> {
    let curve: Vec<&SnrRow> = rows.iter().filter(|r| r.d == d && r.sigma > 0.0).collect();
    for w in curve.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.snr_empirical >= 1.0 && b.snr_empirical <= 1.0 {
            let (la, lb) = (a.snr_empirical.ln(), b.snr_empirical.ln());
            if la == lb {
                return Some(a.sigma);
            }
            let t = la / (la - lb);
            return Some((a.sigma.ln() + t * (b.sigma.ln() - a.sigma.ln())).exp());
        }
    }
    None
}

/// Misalignment-induced output noise `gamma = E|sum_i a_i (y_i - x_i) W_v|^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaEstimate {
    pub empirical: f64,
    /// `2d + |mu_y - mu_x|^2`.
    pub theoretical: f64,
    /// `|dmu|^2 + E[sum_i a_i^2] tr(Sigma_x + Sigma_y)`, exact for any weights.
    pub theoretical_general: f64,
    /// `2d + (1/H) sum_h |dmu^h|^2` where `dmu^h` is head `h`'s slice of
    /// `dmu W_v`. Equal to `theoretical` when `H = 1`.
    pub theoretical_multi_head: f64,
    pub rel_error: f64,
    pub rel_error_general: f64,
    pub std_error: f64,
    pub n_trials: usize,
    /// `E|sum_i a_i x_i W_v|^2` of the aligned read-out, for SNR under misalignment.
    pub aligned_signal: f64,
}

impl GammaEstimate {
    /// Aligned signal energy over misalignment noise energy.
    pub fn snr(&self) -> f64 {
        self.aligned_signal / self.empirical
    }
}

pub fn gamma_estimate(cfg: &TrialConfig, mis: &MisalignmentSpec) -> GammaEstimate {
    cfg.validate();
    mis.validate();
    assert_eq!(mis.d(), cfg.d, "misalignment dimension must equal d");
    let cell = cell_id(&format!(
        "gamma/{}/{}/{}/{}/{:?}/{}/{}",
        cfg.d,
        cfg.n,
        cfg.weights_mode,
        cfg.heads,
        mis.dist,
        mis.coupled,
        mis.shift_sq()
    ));
    let readout = Readout::new(cfg, cell);
    let (d, n, heads) = (cfg.d, cfg.n, cfg.heads);
    let mut gamma = Moments::default();
    let mut signal = 0.0;
    let mut conc = vec![0.0; heads];
    for t in 0..cfg.n_trials {
        let mut r = rng::substream(cfg.seed, cell, t as u64);
        let weights: Vec<Vec<f64>> = (0..heads).map(|_| cfg.weights_mode.sample(n, &mut r)).collect();
        let x = moment_tokens(&mut r, n, &mis.mu_x, &mis.sigma_x, mis.dist);
        let y = if mis.coupled {
            x.clone()
        } else {
            moment_tokens(&mut r, n, &mis.mu_y, &mis.sigma_y, mis.dist)
        };
        let aligned = readout.project(&weights.iter().map(|a| weighted_sum(a, &x, d)).collect::<Vec<_>>());
        let misaligned = readout.project(&weights.iter().map(|a| weighted_sum(a, &y, d)).collect::<Vec<_>>());
        gamma.push(diff_norm_sq(&misaligned, &aligned));
        signal += norm_sq(&aligned);
        for (c, a) in conc.iter_mut().zip(&weights) {
            *c += sum_sq(a);
        }
    }
    let trials = cfg.n_trials as f64;
    let shift: Vec<f64> = mis.mu_y.iter().zip(&mis.mu_x).map(|(a, b)| a - b).collect();
    let shift_sq = norm_sq(&shift);
    let theoretical = 2.0 * d as f64 + shift_sq;
    let head_shift = readout.head_energies(&shift);
    let theoretical_multi_head = 2.0 * d as f64 + head_shift.iter().sum::<f64>() / heads as f64;
    let theoretical_general = if mis.coupled {
        0.0
    } else {
        let var: Vec<f64> = (0..d)
            .map(|k| mis.sigma_x[k] * mis.sigma_x[k] + mis.sigma_y[k] * mis.sigma_y[k])
            .collect();
        let traces = readout.head_traces(&var);
        shift_sq + traces.iter().zip(&conc).map(|(tr, c)| tr * c / trials).sum::<f64>()
    };
    GammaEstimate {
        empirical: gamma.mean,
        theoretical,
        theoretical_general,
        theoretical_multi_head,
        rel_error: rel_error(gamma.mean, theoretical),
        rel_error_general: rel_error(gamma.mean, theoretical_general),
        std_error: gamma.std_error(),
        n_trials: cfg.n_trials,
        aligned_signal: signal / trials,
    }
}

/// Least-squares line `y = slope x + intercept`.
pub fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Settings behind the three Figure-1 style tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Figure1Config {
    pub seed: u64,
    pub n: usize,
    pub n_trials: usize,
    pub snr_d: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub snr_weights: WeightsMode,
    pub misaligned_d: Vec<usize>,
    /// `|mu_x|^2` of the aligned signal in the misalignment panel.
    pub signal_mean_sq: f64,
    pub shifts: Vec<f64>,
    pub gamma_weights: WeightsMode,
}

impl Default for Figure1Config {
    fn default() -> Self {
        Self {
            seed: 7,
            n: 16,
            n_trials: 100_000,
            snr_d: vec![32, 64, 128],
            sigmas: (1..=20).map(|i| i as f64 / 10.0).collect(),
            snr_weights: WeightsMode::RandomSoftmax,
            misaligned_d: vec![16, 32, 64, 128],
            signal_mean_sq: 64.0,
            shifts: vec![0.0, 16.0, 64.0],
            gamma_weights: WeightsMode::Peaked,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MisalignedSnrRow {
    pub d: usize,
    pub mean_shift_sq: f64,
    pub snr_empirical: f64,
    pub n_trials: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaRow {
    pub d: usize,
    pub mean_shift_sq: f64,
    pub gamma_empirical: f64,
    pub gamma_theoretical: f64,
    pub n_trials: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Figure1Data {
    pub snr_vs_sigma: Vec<SnrRow>,
    pub snr_vs_d_misaligned: Vec<MisalignedSnrRow>,
    pub gamma_vs_d: Vec<GammaRow>,
}

pub fn figure1(cfg: &Figure1Config) -> Figure1Data {
    let base = TrialConfig::new(cfg.snr_d[0], cfg.n, cfg.n_trials, cfg.seed, cfg.snr_weights);
    let snr_vs_sigma = snr_sweep(&cfg.snr_d, &cfg.sigmas, &base);
    let mut snr_vs_d_misaligned = Vec::new();
    let mut gamma_vs_d = Vec::new();
    for &shift in &cfg.shifts {
        for &d in &cfg.misaligned_d {
            let tc = TrialConfig::new(d, cfg.n, cfg.n_trials, cfg.seed, cfg.gamma_weights);
            let g = gamma_estimate(&tc, &MisalignmentSpec::with_norms(d, cfg.signal_mean_sq, shift));
            snr_vs_d_misaligned.push(MisalignedSnrRow {
                d,
                mean_shift_sq: shift,
                snr_empirical: g.snr(),
                n_trials: cfg.n_trials,
            });
            gamma_vs_d.push(GammaRow {
                d,
                mean_shift_sq: shift,
                gamma_empirical: g.empirical,
                gamma_theoretical: g.theoretical,
                n_trials: cfg.n_trials,
            });
        }
    }
    Figure1Data {
        snr_vs_sigma,
        snr_vs_d_misaligned,
        gamma_vs_d,
    }
}

pub const SNR_VS_SIGMA_HEADER: &str = "d,sigma,snr_empirical,snr_theoretical,n_trials";
pub const SNR_VS_D_MISALIGNED_HEADER: &str = "d,mean_shift_sq,snr_empirical,n_trials";
pub const GAMMA_VS_D_HEADER: &str = "d,mean_shift_sq,gamma_empirical,gamma_theoretical,n_trials";

/// Real number with 17 significant digits; infinities as `inf`.
pub fn fmt_real(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

impl Figure1Data {
    pub fn snr_vs_sigma_csv(&self) -> String {
        let mut s = format!("{SNR_VS_SIGMA_HEADER}\n");
        for r in &self.snr_vs_sigma {
            s += &format!(
                "{},{},{},{},{}\n",
                r.d,
                fmt_real(r.sigma),
                fmt_real(r.snr_empirical),
                fmt_real(r.snr_theoretical),
                r.n_trials
            );
        }
        s
    }

    pub fn snr_vs_d_misaligned_csv(&self) -> String {
        let mut s = format!("{SNR_VS_D_MISALIGNED_HEADER}\n");
        for r in &self.snr_vs_d_misaligned {
            s += &format!(
                "{},{},{},{}\n",
                r.d,
                fmt_real(r.mean_shift_sq),
                fmt_real(r.snr_empirical),
                r.n_trials
            );
        }
        s
    }

    pub fn gamma_vs_d_csv(&self) -> String {
        let mut s = format!("{GAMMA_VS_D_HEADER}\n");
        for r in &self.gamma_vs_d {
            s += &format!(
                "{},{},{},{},{}\n",
                r.d,
                fmt_real(r.mean_shift_sq),
                fmt_real(r.gamma_empirical),
                fmt_real(r.gamma_theoretical),
                r.n_trials
            );
        }
        s
    }

    /// `(file name, contents)` for the three panels.
    pub fn files(&self) -> [(&'static str, String); 3] {
        [
            ("snr_vs_sigma.csv", self.snr_vs_sigma_csv()),
            ("snr_vs_d_misaligned.csv", self.snr_vs_d_misaligned_csv()),
            ("gamma_vs_d.csv", self.gamma_vs_d_csv()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_modes_are_distributions() {
        let mut r = rng::stream(1, 0);
        for mode in WeightsMode::ALL {
            for n in [1, 4, 16] {
                let a = mode.sample(n, &mut r);
                assert_eq!(a.len(), n);
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(a.iter().all(|&w| w >= 0.0));
            }
        }
        assert_eq!(sum_sq(&WeightsMode::Uniform.sample(16, &mut r)), 1.0 / 16.0);
        assert_eq!(sum_sq(&WeightsMode::Peaked.sample(16, &mut r)), 1.0);
        assert_eq!("random_softmax".parse::<WeightsMode>(), Ok(WeightsMode::RandomSoftmax));
        assert!("sharp".parse::<WeightsMode>().is_err());
    }

    #[test]
    fn readout_preserves_norms() {
        let cfg = TrialConfig::new(12, 3, 1, 5, WeightsMode::Uniform).with_heads(3);
        let ro = Readout::new(&cfg, 1);
        let v: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let same = vec![v.clone(), v.clone(), v.clone()];
        // identical inputs per head reproduce the single-head projection under W_o
        let out = ro.project(&same);
        let single = vec_mat(&v, &ro.w_v);
        let want = vec_mat(&single, ro.w_o.as_ref().unwrap());
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((norm_sq(&out) - norm_sq(&v)).abs() < 1e-10);
        let traces = ro.head_traces(&[1.0; 12]);
        for tr in traces {
            assert!((tr - 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn crossing_interpolates_power_law() {
        let rows: Vec<SnrRow> = [0.5, 0.9, 1.2, 2.0]
            .iter()
            .map(|&s| SnrRow {
                d: 8,
                sigma: s,
                snr_empirical: 1.21 / (s * s),
                snr_theoretical: 1.0 / (s * s),
                n_trials: 1,
            })
            .collect();
        let c = crossing_sigma(&rows, 8).unwrap();
        assert!((c - 1.1).abs() < 1e-12);
        assert!(crossing_sigma(&rows, 16).is_none());
    }

    #[test]
    fn line_fit_recovers_affine() {
        let pts: Vec<(f64, f64)> = [16.0, 32.0, 64.0].iter().map(|&d| (d, 2.0 * d + 5.0)).collect();
        let (s, i) = fit_line(&pts);
        assert!((s - 2.0).abs() < 1e-12 && (i - 5.0).abs() < 1e-10);
    }

    #[test]
    fn real_formatting() {
        assert_eq!(fmt_real(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_real(f64::INFINITY), "inf");
        assert_eq!(fmt_real(4.0), "4.0000000000000000e0");
    }
}
