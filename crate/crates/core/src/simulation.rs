//! Null and power simulations: data generation, rejection-rate grids and
//! QQ data.
//!
//! Every replicate draws from its own ChaCha8 stream (`seed`, stream = replicate
//! index), so results do not depend on the number of worker threads.

use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{beta_to_m, SimulationKind, SimulationSpec, StudyDesign, TestKind, MAX_TAU};
use crate::error::{Error, Result};
use crate::estimation::{KdeConfig, MarkerFitter};
use crate::hypothesis::{run_tests, TestSettings};

/// How the second parameter of `N(tau, 1 + tau)` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum SpreadParam {
    #[default]
    Variance,
    Sd,
}

/// Contamination scheme for the beta-with-outliers null.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum OutlierMode {
    /// Each sample independently becomes an outlier with probability `rate`.
    #[default]
    Bernoulli,
    /// Exactly `round(rate * n_g)` outliers in each group.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenerateOptions {
    pub spread: SpreadParam,
    pub outliers: OutlierMode,
    pub outlier_rate: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            spread: SpreadParam::Variance,
            outliers: OutlierMode::Bernoulli,
            outlier_rate: 0.05,
        }
    }
}

/// One simulated marker.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub design: StudyDesign,
}

/// RNG for replicate `rep` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

fn beta_sample<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let d = Beta::new(a, b).expect("valid beta parameters");
    // Clamp away from {0, 1} so the M transform stays finite.
    d.sample(rng).clamp(1e-12, 1.0 - 1e-12)
}

fn to_m(beta: f64) -> f64 {
    beta_to_m(beta).expect("beta clamped into (0, 1)")
}

/// Draws one marker under `spec`. Cases come first.
pub fn generate<R: Rng + ?Sized>(spec: &SimulationSpec, rng: &mut R, opts: &GenerateOptions) -> Dataset {
    let (nc, nn) = (spec.n_cases, spec.n_controls);
    let n = nc + nn;
    let tau = spec.tau;
    let sd = |v: f64| match opts.spread {
        SpreadParam::Variance => v.sqrt(),
        SpreadParam::Sd => v,
    };
    let normal = |rng: &mut R, mean: f64, s: f64| mean + s * rng.sample::<f64, _>(StandardNormal);
    let y: Vec<f64> = match spec.kind {
        SimulationKind::NullNormal => (0..n).map(|_| normal(rng, 0.0, 1.0)).collect(),
        SimulationKind::NullBeta => (0..n).map(|_| to_m(beta_sample(rng, 10.0, 90.0))).collect(),
        SimulationKind::NullChisq3 => {
            let d = ChiSquared::new(3.0).expect("valid df");
            (0..n).map(|_| d.sample(rng)).collect()
        }
        SimulationKind::NullBetaOutlier => {
            let mut beta: Vec<f64> = (0..n).map(|_| beta_sample(rng, 10.0, 90.0)).collect();
            match opts.outliers {
                OutlierMode::Bernoulli => {
                    for b in beta.iter_mut() {
                        if rng.random::<f64>() < opts.outlier_rate {
                            *b = beta_sample(rng, 90.0, 10.0);
                        }
                    }
                }
                OutlierMode::Fixed => {
                    let kc = (opts.outlier_rate * nc as f64).round() as usize;
                    let kn = (opts.outlier_rate * nn as f64).round() as usize;
                    for i in (0..kc).chain(nc..nc + kn) {
                        beta[i] = beta_sample(rng, 90.0, 10.0);
                    }
                }
            }
            beta.into_iter().map(to_m).collect()
        }
        SimulationKind::PowerMeanVar => (0..n)
            .map(|i| if i < nc { normal(rng, tau, sd(1.0 + tau)) } else { normal(rng, 0.0, 1.0) })
            .collect(),
        SimulationKind::PowerVarOnly => (0..n)
            .map(|i| if i < nc { normal(rng, 0.0, sd(1.0 + tau)) } else { normal(rng, 0.0, 1.0) })
            .collect(),
        SimulationKind::PowerMeanOnly => (0..n)
            .map(|i| if i < nc { normal(rng, tau, 1.0) } else { normal(rng, 0.0, 1.0) })
            .collect(),
        SimulationKind::PowerMixture => (0..n)
            .map(|i| {
                if i < nc && rng.random::<f64>() < 0.25 {
                    normal(rng, 3.0 * tau, sd(1.0 + 3.0 * tau))
                } else {
                    normal(rng, 0.0, 1.0)
                }
            })
            .collect(),
    };
    Dataset {
        y,
        design: StudyDesign::balanced(nc, nn),
    }
}

/// Everything besides the specs that a grid run depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOptions {
    pub settings: TestSettings,
    pub kde: KdeConfig,
    pub generate: GenerateOptions,
    /// Keep per-replicate p-values in the report.
    pub keep_pvalues: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            settings: TestSettings::default(),
            kde: KdeConfig::default(),
            generate: GenerateOptions::default(),
            keep_pvalues: false,
        }
    }
}

/// Rejection count at one threshold with a Wilson 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateEstimate {
    pub threshold: f64,
    pub rejections: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestRates {
    pub test: TestKind,
    /// Replicates where the test produced a p-value.
    pub valid: usize,
    /// Replicates where the test failed (degenerate data and the like).
    pub failures: usize,
    pub rates: Vec<RateEstimate>,
    #[serde(skip)]
    pub p_values: Option<Vec<f64>>,
}

impl TestRates {
    pub fn at(&self, threshold: f64) -> Option<&RateEstimate> {
        self.rates.iter().find(|r| r.threshold == threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub spec: SimulationSpec,
    pub tests: Vec<TestRates>,
}

impl SimulationReport {
    pub fn test(&self, kind: TestKind) -> Option<&TestRates> {
        self.tests.iter().find(|t| t.test == kind)
    }

    /// Rejection rate of `kind` at `threshold`, if both were run.
    pub fn rate(&self, kind: TestKind, threshold: f64) -> Option<f64> {
        self.test(kind)?.at(threshold).map(|r| r.rate)
    }
}

const Z_975: f64 = 1.959_963_984_540_054;

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z_975 * Z_975;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z_975 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// P-values of `tests` for every replicate of `spec`, `None` where a test failed.
pub fn simulate_pvalues(
    spec: &SimulationSpec,
    tests: &[TestKind],
    opts: &GridOptions,
) -> Result<Vec<Vec<Option<f64>>>> {
    spec.check()?;
    let design = StudyDesign::balanced(spec.n_cases, spec.n_controls);
    let fitter = if tests.iter().any(|t| t.needs_fit()) {
        Some(MarkerFitter::new(&design, opts.kde)?)
    } else {
        None
    };
    Ok((0..spec.replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(spec.seed, rep);
            let data = generate(spec, &mut rng, &opts.generate);
            run_tests(&data.y, &data.design, fitter.as_ref(), tests, &opts.settings)
                .into_iter()
                .map(|r| r.ok().map(|t| t.p_value))
                .collect()
        })
        .collect())
}

/// Runs every test on every replicate of every spec and tabulates the
/// fraction of p-values at or below each threshold.
pub fn run_grid(
    specs: &[SimulationSpec],
    tests: &[TestKind],
    thresholds: &[f64],
    opts: &GridOptions,
) -> Result<Vec<SimulationReport>> {
    for &t in thresholds {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidParameter(format!("threshold {t} outside [0, 1]")));
        }
    }
    specs
        .iter()
        .map(|spec| {
            let pvals = simulate_pvalues(spec, tests, opts)?;
            let tests = tests
                .iter()
                .enumerate()
                .map(|(k, &test)| {
                    let column: Vec<f64> = pvals.iter().filter_map(|row| row[k]).collect();
                    let failures = pvals.len() - column.len();
                    if failures > 0 {
                        log::debug!("{} {test}: {failures} failed replicates", spec.kind);
                    }
                    let rates = thresholds
                        .iter()
                        .map(|&threshold| {
                            let rejections = column.iter().filter(|&&p| p <= threshold).count();
                            let (ci_low, ci_high) = wilson_interval(rejections, column.len());
                            RateEstimate {
                                threshold,
                                rejections,
                                rate: if column.is_empty() { 0.0 } else { rejections as f64 / column.len() as f64 },
                                ci_low,
                                ci_high,
                            }
                        })
                        .collect();
                    TestRates {
                        test,
                        valid: column.len(),
                        failures,
                        rates,
                        p_values: opts.keep_pvalues.then_some(column),
                    }
                })
                .collect();
            Ok(SimulationReport { spec: *spec, tests })
        })
        .collect()
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Err(Error::InvalidParameter("threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(pool.install(f))
}

/// Writes one row per spec, test and threshold.
pub fn write_reports_tsv<W: Write>(reports: &[SimulationReport], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record([
        "kind", "n_cases", "n_controls", "tau", "replicates", "seed", "test", "threshold", "valid",
        "failures", "rejections", "rate", "ci_low", "ci_high",
    ])
    .map_err(io)?;
    for r in reports {
        for t in &r.tests {
            for e in &t.rates {
                w.write_record([
                    r.spec.kind.to_string(),
                    r.spec.n_cases.to_string(),
                    r.spec.n_controls.to_string(),
                    r.spec.tau.to_string(),
                    r.spec.replicates.to_string(),
                    r.spec.seed.to_string(),
                    t.test.to_string(),
                    e.threshold.to_string(),
                    t.valid.to_string(),
                    t.failures.to_string(),
                    e.rejections.to_string(),
                    e.rate.to_string(),
                    e.ci_low.to_string(),
                    e.ci_high.to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Machine-readable summary, including seeds for replay.
pub fn reports_json(reports: &[SimulationReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

/// Expected versus observed p-value on the `-log10` scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QqPoint {
    pub expected: f64,
    pub observed: f64,
}

/// Sorts p-values and pairs the i-th smallest with `i / (m + 1)`.
pub fn qq_points(p_values: &[f64]) -> Vec<QqPoint> {
    let mut sorted = p_values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let m = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &p)| QqPoint {
            expected: -((i + 1) as f64 / (m + 1.0)).log10(),
            observed: -p.log10(),
        })
        .collect()
}

/// Simulates `n_markers` independent markers under `spec` (its replicate
/// count is ignored) and returns QQ points for `test`. Failed markers are
/// dropped.
pub fn qq_experiment(
    n_markers: usize,
    spec: &SimulationSpec,
    test: TestKind,
    opts: &GridOptions,
) -> Result<Vec<QqPoint>> {
    let spec = SimulationSpec {
        replicates: n_markers,
        ..*spec
    };
    let p: Vec<f64> = simulate_pvalues(&spec, &[test], opts)?
        .into_iter()
        .filter_map(|row| row[0])
        .collect();
    Ok(qq_points(&p))
}

/// Pointwise band for the `i`-th smallest of `m` uniform p-values
/// (1-based), as `(lower, upper)` p-values.
///
/// The order statistic is Beta(i, m - i + 1). For `i` small relative to `m`
/// it is well approximated by Gamma(i, 1) / (m + 1); otherwise by a normal
/// with the same mean and variance.
pub fn uniform_order_band(i: usize, m: usize, level: f64) -> (f64, f64) {
    let (a, b) = (i as f64, (m - i + 1) as f64);
    let tail = 0.5 - level / 2.0;
    if a <= 0.05 * (a + b) {
        if let (Some(lo), Some(hi)) = (gamma_quantile(a, tail), gamma_quantile(a, 1.0 - tail)) {
            return ((lo / (a + b)).min(1.0), (hi / (a + b)).min(1.0));
        }
    }
    let z = Normal::standard().inverse_cdf(1.0 - tail);
    let mean = a / (a + b);
    let sd = (a * b / ((a + b).powi(2) * (a + b + 1.0))).sqrt();
    ((mean - z * sd).max(0.0), (mean + z * sd).min(1.0))
}

fn gamma_quantile(shape: f64, p: f64) -> Option<f64> {
    statrs::distribution::Gamma::new(shape, 1.0)
        .ok()
        .map(|g| g.inverse_cdf(p))
        .filter(|q| q.is_finite())
}

/// Named grids from the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Type-I error grid: four null models by four sample sizes.
    Table1,
    /// Chi-square(3) null at 50/50 for QQ plots.
    Figure4,
    /// Power curves: four scenarios, tau in 0, 0.1, ..., 0.7, 50/50.
    Figure5,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table1" => Ok(Preset::Table1),
            "figure4" => Ok(Preset::Figure4),
            "figure5" => Ok(Preset::Figure5),
            _ => Err(Error::InvalidParameter(format!("unknown preset `{s}`"))),
        }
    }
}

impl Preset {
    /// Specs of the preset with the study's default replicate counts.
    pub fn specs(self, seed: u64) -> Vec<SimulationSpec> {
        self.specs_with(seed, None)
    }

    /// As [`Preset::specs`], overriding the replicate count when given.
    pub fn specs_with(self, seed: u64, replicates: Option<usize>) -> Vec<SimulationSpec> {
        let spec = |kind, n, tau, reps: usize| SimulationSpec {
            kind,
            n_cases: n,
            n_controls: n,
            tau,
            replicates: replicates.unwrap_or(reps),
            seed,
        };
        match self {
            Preset::Table1 => [
                SimulationKind::NullNormal,
                SimulationKind::NullBeta,
                SimulationKind::NullChisq3,
                SimulationKind::NullBetaOutlier,
            ]
            .into_iter()
            .flat_map(|k| [25, 50, 100, 250].map(|n| spec(k, n, 0.0, 50_000)))
            .collect(),
            Preset::Figure4 => vec![spec(SimulationKind::NullChisq3, 50, 0.0, 500_000)],
            Preset::Figure5 => [
                SimulationKind::PowerMeanVar,
                SimulationKind::PowerVarOnly,
                SimulationKind::PowerMeanOnly,
                SimulationKind::PowerMixture,
            ]
            .into_iter()
            .flat_map(|k| {
                (0..=7).map(move |t| (k, (t as f64 / 10.0).min(MAX_TAU)))
            })
            .map(|(k, tau)| spec(k, 50, tau, 2_000))
            .collect(),
        }
    }

    /// Tests reported for the preset.
    pub fn tests(self) -> Vec<TestKind> {
        match self {
            Preset::Figure4 => vec![TestKind::ConstrainedH1c, TestKind::Pauc],
            _ => TestKind::ALL.to_vec(),
        }
    }

    /// Thresholds reported for the preset.
    pub fn thresholds(self) -> Vec<f64> {
        match self {
            Preset::Figure5 => vec![0.05],
            _ => vec![0.05, 1e-3],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec(kind: SimulationKind, n: usize, tau: f64, reps: usize) -> SimulationSpec {
        SimulationSpec::new(kind, n, n, tau, reps, 7).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(SimulationKind::NullNormal, 10, 0.0, 1);
        let a = generate(&s, &mut replicate_rng(5, 3), &GenerateOptions::default());
        let b = generate(&s, &mut replicate_rng(5, 3), &GenerateOptions::default());
        assert_eq!(a, b);
        let c = generate(&s, &mut replicate_rng(5, 4), &GenerateOptions::default());
        assert_ne!(a.y, c.y);
        assert_eq!((a.design.n_cases(), a.design.n_controls()), (10, 10));
    }

    #[test]
    fn beta_null_mean() {
        let s = spec(SimulationKind::NullBeta, 500, 0.0, 1);
        let mut rng = replicate_rng(11, 0);
        let mut sum = 0.0;
        let mut count = 0usize;
        while count < 1_000_000 {
            for m in generate(&s, &mut rng, &GenerateOptions::default()).y {
                sum += crate::data::m_to_beta(m);
                count += 1;
            }
        }
        assert_abs_diff_eq!(sum / count as f64, 0.1, epsilon = 1e-3);
    }

    #[test]
    fn fixed_outliers_split_across_groups() {
        let s = spec(SimulationKind::NullBetaOutlier, 40, 0.0, 1);
        let opts = GenerateOptions {
            outliers: OutlierMode::Fixed,
            ..Default::default()
        };
        let d = generate(&s, &mut replicate_rng(1, 0), &opts);
        // beta(90, 10) draws sit far above beta(10, 90) on the M scale.
        let high = |r: std::ops::Range<usize>| r.filter(|&i| d.y[i] > 0.0).count();
        assert_eq!((high(0..40), high(40..80)), (2, 2));
    }

    #[test]
    fn spread_switch() {
        let mk = |spread| {
            let s = spec(SimulationKind::PowerVarOnly, 20_000, 0.5, 1);
            let opts = GenerateOptions { spread, ..Default::default() };
            let d = generate(&s, &mut replicate_rng(2, 0), &opts);
            d.y[..20_000].iter().map(|v| v * v).sum::<f64>() / 20_000.0
        };
        assert_abs_diff_eq!(mk(SpreadParam::Variance), 1.5, epsilon = 0.05);
        assert_abs_diff_eq!(mk(SpreadParam::Sd), 2.25, epsilon = 0.08);
    }

    #[test]
    fn wilson_examples() {
        let (lo, hi) = wilson_interval(2500, 50_000);
        assert!(lo < 0.05 && hi > 0.05 && (hi - lo) / 2.0 <= 0.002);
        assert_eq!(wilson_interval(0, 0), (0.0, 1.0));
        let (lo, _) = wilson_interval(0, 100);
        assert_eq!(lo, 0.0);
    }

    #[test]
    fn threshold_one_rejects_everything() {
        let s = spec(SimulationKind::NullNormal, 10, 0.0, 200);
        let r = run_grid(&[s], &TestKind::ALL, &[1.0], &GridOptions::default()).unwrap();
        for t in &r[0].tests {
            assert_eq!(t.valid + t.failures, 200);
            assert_eq!(t.rates[0].rate, 1.0, "{}", t.test);
        }
    }

    #[test]
    fn reports_reproducible_and_thread_independent() {
        let s = spec(SimulationKind::NullChisq3, 15, 0.0, 300);
        let opts = GridOptions { keep_pvalues: true, ..Default::default() };
        let a = run_grid(&[s], &TestKind::ALL, &[0.05], &opts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run_grid(&[s], &TestKind::ALL, &[0.05], &opts).unwrap());
        assert_eq!(a, b);
        assert_eq!(a[0].test(TestKind::Welch).unwrap().p_values.as_ref().unwrap().len(), 300);
    }

    #[test]
    fn uniform_pvalues_on_diagonal() {
        let p: Vec<f64> = (1..=100).map(|i| i as f64 / 101.0).collect();
        for q in qq_points(&p) {
            assert_abs_diff_eq!(q.expected, q.observed, epsilon = 1e-12);
        }
    }

    #[test]
    fn band_contains_expectation() {
        for &(i, m) in &[(1, 500_000), (10, 500_000), (5_000, 500_000), (40, 100), (250_000, 500_000)] {
            let (lo, hi) = uniform_order_band(i, m, 0.95);
            let e = i as f64 / (m as f64 + 1.0);
            assert!(lo < e && e < hi, "{i}/{m}: {lo} {e} {hi}");
        }
        // Exact for i = 1: P(U_(1) <= x) = 1 - (1 - x)^m.
        let (lo, hi) = uniform_order_band(1, 1000, 0.95);
        let exact = |q: f64| 1.0 - (1.0 - q).powf(1.0 / 1000.0);
        assert!((lo - exact(0.025)).abs() / exact(0.025) < 0.01);
        assert!((hi - exact(0.975)).abs() / exact(0.975) < 0.01);
    }

    #[test]
    fn presets() {
        assert_eq!(Preset::Table1.specs(1).len(), 16);
        let f5 = Preset::Figure5.specs_with(1, Some(10));
        assert_eq!(f5.len(), 32);
        assert!(f5.iter().all(|s| s.check().is_ok() && s.replicates == 10));
        assert_eq!("figure4".parse::<Preset>().unwrap(), Preset::Figure4);
    }

    #[test]
    fn tsv_and_json_output() {
        let s = spec(SimulationKind::NullNormal, 10, 0.0, 50);
        let r = run_grid(&[s], &[TestKind::Welch], &[0.05, 0.001], &GridOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_reports_tsv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let json: serde_json::Value = serde_json::from_str(&reports_json(&r)).unwrap();
        assert_eq!(json[0]["spec"]["seed"], 7);
    }
}
