//! The seven per-marker tests.
//!
//! Wald-type tests work on a [`MarkerFit`]; Welch, Levene and pAUC can also
//! be run directly on a marker's values.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::data::{CovarianceKind, MarkerFit, StudyDesign, TestKind, TestResult};
use crate::error::{Error, Result};
use crate::estimation::{levene_transform, Regression};

/// Condition number above which a 2x2 covariance is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Survival function of chi-square with one degree of freedom.
pub fn chi2_sf_1(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        erfc((0.5 * x).sqrt())
    }
}

/// Survival function of chi-square with two degrees of freedom.
pub fn chi2_sf_2(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        (-0.5 * x).exp()
    }
}

/// Upper-tail standard normal probability.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z * FRAC_1_SQRT_2)
}

/// Constrained alternatives for `(b1, a1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstrainedHypothesis {
    /// Differential mean, increased variance: `a1 >= 0`.
    H1b,
    /// Increased mean and increased variance: `b1 >= 0, a1 >= 0`.
    H1c,
}

impl ConstrainedHypothesis {
    fn contains(self, beta: f64, alpha: f64) -> bool {
        match self {
            ConstrainedHypothesis::H1b => alpha >= 0.0,
            ConstrainedHypothesis::H1c => alpha >= 0.0 && beta >= 0.0,
        }
    }

    pub fn test_kind(self) -> TestKind {
        match self {
            ConstrainedHypothesis::H1b => TestKind::ConstrainedH1b,
            ConstrainedHypothesis::H1c => TestKind::ConstrainedH1c,
        }
    }
}

/// Where the constrained estimate landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveRegion {
    Interior,
    /// On `a1 = 0` with `b1 != 0`.
    BoundaryAlpha,
    /// On `b1 = 0` with `a1 > 0`.
    BoundaryBeta,
    Origin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstrainedSolution {
    pub beta_tilde: f64,
    pub alpha_tilde: f64,
    pub lrt: f64,
    pub active_region: ActiveRegion,
}

/// Inverse of a symmetric positive-definite 2x2 matrix.
pub fn precision(sigma: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let [[a, b], [c, d]] = *sigma;
    if ![a, b, c, d].iter().all(|v| v.is_finite()) || a <= 0.0 || d <= 0.0 {
        return Err(Error::SingularCovariance);
    }
    let off = 0.5 * (b + c);
    let det = a * d - off * off;
    let half_tr = 0.5 * (a + d);
    let disc = (half_tr * half_tr - det).max(0.0).sqrt();
    let (hi, lo) = (half_tr + disc, half_tr - disc);
    if det <= 0.0 || lo <= 0.0 || hi / lo > MAX_CONDITION {
        return Err(Error::SingularCovariance);
    }
    Ok([[d / det, -off / det], [-off / det, a / det]])
}

fn quad(q: &[[f64; 2]; 2], x: [f64; 2]) -> f64 {
    q[0][0] * x[0] * x[0] + 2.0 * q[0][1] * x[0] * x[1] + q[1][1] * x[1] * x[1]
}

/// Wald statistic `v' Sigma^-1 v` for a pair of estimates.
pub fn wald_statistic(est: [f64; 2], sigma: &[[f64; 2]; 2]) -> Result<f64> {
    Ok(quad(&precision(sigma)?, est).max(0.0))
}

/// Constrained MLE of `(b1, a1)` under `hyp`, treating the estimates as one
/// draw from `N((b1, a1), sigma)`.
///
/// If the estimate is infeasible the Mahalanobis projection lies on the
/// boundary; candidates are the minimizers along the line/ray `a1 = 0` and
/// the ray `b1 = 0, a1 >= 0`, and the closer one wins.
pub fn constrained_mle(
    beta_hat: f64,
    alpha_hat: f64,
    sigma: &[[f64; 2]; 2],
    hyp: ConstrainedHypothesis,
) -> Result<ConstrainedSolution> {
    let q = precision(sigma)?;
    let v = [beta_hat, alpha_hat];
    let full = quad(&q, v).max(0.0);
    if hyp.contains(beta_hat, alpha_hat) {
        return Ok(ConstrainedSolution {
            beta_tilde: beta_hat,
            alpha_tilde: alpha_hat,
            lrt: full,
            active_region: ActiveRegion::Interior,
        });
    }
    // Along a1 = 0: minimize over b of Q00 (bh - b)^2 + 2 Q01 (bh - b) ah + ...
    let mut b_on_axis = beta_hat + q[0][1] / q[0][0] * alpha_hat;
    if hyp == ConstrainedHypothesis::H1c {
        b_on_axis = b_on_axis.max(0.0);
    }
    let a_on_axis = (alpha_hat + q[0][1] / q[1][1] * beta_hat).max(0.0);
    let candidates = [[b_on_axis, 0.0], [0.0, a_on_axis]];
    let dist = |c: [f64; 2]| quad(&q, [v[0] - c[0], v[1] - c[1]]);
    let best = if dist(candidates[0]) <= dist(candidates[1]) {
        candidates[0]
    } else {
        candidates[1]
    };
    let region = match (best[0] != 0.0, best[1] != 0.0) {
        (false, false) => ActiveRegion::Origin,
        (true, _) => ActiveRegion::BoundaryAlpha,
        (false, true) => ActiveRegion::BoundaryBeta,
    };
    Ok(ConstrainedSolution {
        beta_tilde: best[0],
        alpha_tilde: best[1],
        lrt: (full - dist(best)).max(0.0),
        active_region: region,
    })
}

/// Upper-tail probability of the chi-bar-square null of the constrained LRT.
///
/// H1c mixes chi2_0, chi2_1, chi2_2 with weights `(q, 1/2, 1/2 - q)`,
/// `q = acos(rho) / (2 pi)`; H1b mixes chi2_1, chi2_2 equally.
pub fn chi_bar_sq_pvalue(lrt: f64, rho: f64, hyp: ConstrainedHypothesis) -> f64 {
    let lrt = lrt.max(0.0);
    let p = match hyp {
        ConstrainedHypothesis::H1b => 0.5 * chi2_sf_1(lrt) + 0.5 * chi2_sf_2(lrt),
        ConstrainedHypothesis::H1c => {
            let q = chi_bar_weight(rho);
            if lrt == 0.0 {
                1.0 - q
            } else {
                0.5 * chi2_sf_1(lrt) + (0.5 - q) * chi2_sf_2(lrt)
            }
        }
    };
    p.clamp(0.0, 1.0)
}

/// Point-mass weight `acos(rho) / (2 pi)` of the H1c mixture.
pub fn chi_bar_weight(rho: f64) -> f64 {
    let rho = if rho.is_nan() { 0.0 } else { rho.clamp(-1.0, 1.0) };
    rho.acos() / (2.0 * PI)
}

/// Null CDF of the constrained LRT at `c`.
pub fn chi_bar_sq_cdf(c: f64, rho: f64, hyp: ConstrainedHypothesis) -> f64 {
    if c < 0.0 {
        return 0.0;
    }
    let (w0, w1, w2) = match hyp {
        ConstrainedHypothesis::H1b => (0.0, 0.5, 0.5),
        ConstrainedHypothesis::H1c => {
            let q = chi_bar_weight(rho);
            (q, 0.5, 0.5 - q)
        }
    };
    w0 + w1 * (1.0 - chi2_sf_1(c)) + w2 * (1.0 - chi2_sf_2(c))
}

/// 2-df Wald test of `b1 = a1 = 0`.
pub fn two_df_wald(fit: &MarkerFit, kind: CovarianceKind) -> Result<TestResult> {
    let stat = wald_statistic([fit.beta1(), fit.alpha1()], fit.covariance(kind))?;
    let test = match kind {
        CovarianceKind::Naive => TestKind::TwoDfNaive,
        CovarianceKind::Corrected => TestKind::TwoDfCorrected,
    };
    Ok(TestResult::new(test, stat, chi2_sf_2(stat), fit.beta1(), fit.alpha1()))
}

/// Constrained LRT with a chi-bar-square p-value.
pub fn constrained_test(
    fit: &MarkerFit,
    hyp: ConstrainedHypothesis,
    kind: CovarianceKind,
) -> Result<TestResult> {
    let sol = constrained_mle(fit.beta1(), fit.alpha1(), fit.covariance(kind), hyp)?;
    let p = chi_bar_sq_pvalue(sol.lrt, fit.rho(kind), hyp);
    Ok(TestResult::new(hyp.test_kind(), sol.lrt, p, fit.beta1(), fit.alpha1()))
}

/// Wald z-test of `a1 = 0` from a fit, using the naive sandwich variance.
pub fn levene_from_fit(fit: &MarkerFit) -> Result<TestResult> {
    levene_z(fit.alpha1(), fit.joint_cov_naive[1][1], fit.beta1())
}

fn levene_z(alpha1: f64, var: f64, beta1: f64) -> Result<TestResult> {
    if !(var > 0.0) {
        return Err(Error::Degenerate("zero variance of the deviation slope".into()));
    }
    let z = alpha1 / var.sqrt();
    Ok(TestResult::new(TestKind::Levene, z, 2.0 * normal_sf(z.abs()), beta1, alpha1))
}

/// Regression Levene test (absolute deviations from group medians) with
/// a sandwich variance for the group slope; two-sided normal p-value.
pub fn levene_test(y: &[f64], design: &StudyDesign) -> Result<TestResult> {
    let reg = Regression::new(design)?;
    let z = levene_transform(y, design)?;
    let (cases, controls) = design.group_indices();
    if cases.is_empty() || controls.is_empty() {
        return Err(Error::EmptyGroup(if cases.is_empty() { "cancer" } else { "normal" }));
    }
    let dev = reg.fit(&z);
    let w = reg.weights(1);
    let var: f64 = w.iter().zip(&dev.residuals).map(|(wi, r)| (wi * r).powi(2)).sum();
    let beta1 = reg.coefficients(y)[1];
    levene_z(dev.coefs[1], var, beta1)
}

fn split(y: &[f64], design: &StudyDesign) -> Result<(Vec<f64>, Vec<f64>)> {
    if y.len() != design.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values for a design of {} samples",
            y.len(),
            design.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::MissingValue);
    }
    let mut cases = Vec::with_capacity(design.n_cases());
    let mut controls = Vec::with_capacity(design.n_controls());
    for (i, &v) in y.iter().enumerate() {
        if design.is_case(i) {
            cases.push(v);
        } else {
            controls.push(v);
        }
    }
    Ok((cases, controls))
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn mean_abs_dev_from_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    let med = crate::estimation::sorted_median(&s);
    s.iter().map(|x| (x - med).abs()).sum::<f64>() / s.len() as f64
}

/// Welch two-sample t-test (cancer minus normal), Satterthwaite df,
/// two-sided p-value. Covariates are ignored.
pub fn welch_t_test(y: &[f64], design: &StudyDesign) -> Result<TestResult> {
    let (cases, controls) = split(y, design)?;
    if cases.len() < 2 || controls.len() < 2 {
        return Err(Error::Degenerate("Welch test needs two samples per group".into()));
    }
    let (m1, v1) = mean_var(&cases);
    let (m0, v0) = mean_var(&controls);
    let (a, b) = (v1 / cases.len() as f64, v0 / controls.len() as f64);
    if a + b <= 0.0 {
        return Err(Error::Degenerate("zero variance in both groups".into()));
    }
    let t = (m1 - m0) / (a + b).sqrt();
    let df = (a + b).powi(2)
        / (a * a / (cases.len() as f64 - 1.0) + b * b / (controls.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Degenerate(e.to_string()))?;
    let p = 2.0 * dist.sf(t.abs());
    let effect_var = mean_abs_dev_from_median(&cases) - mean_abs_dev_from_median(&controls);
    Ok(TestResult::new(TestKind::Welch, t, p, m1 - m0, effect_var))
}

/// Satterthwaite degrees of freedom of the Welch test.
pub fn welch_df(y: &[f64], design: &StudyDesign) -> Result<f64> {
    let (cases, controls) = split(y, design)?;
    let (_, v1) = mean_var(&cases);
    let (_, v0) = mean_var(&controls);
    let (a, b) = (v1 / cases.len() as f64, v0 / controls.len() as f64);
    Ok((a + b).powi(2) / (a * a / (cases.len() as f64 - 1.0) + b * b / (controls.len() as f64 - 1.0)))
}

/// How a case equal to a control counts in the pAUC double sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    #[default]
    Half,
    Strict,
}

impl TieRule {
    #[inline]
    fn score(self, case: f64, control: f64) -> f64 {
        if case > control {
            1.0
        } else if case == control && self == TieRule::Half {
            0.5
        } else {
            0.0
        }
    }
}

/// Nonparametric partial AUC over false-positive rates `[0, t0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaucEstimate {
    pub t0: f64,
    pub estimate: f64,
    /// Asymptotic variance of `sqrt(n) (estimate - pAUC)`.
    pub variance: f64,
    /// Empirical control quantile at `1 - t0`.
    pub q0: f64,
    /// Case fraction `n_D / n`.
    pub lambda: f64,
    pub n: usize,
    /// Set when no control lies above `q0`.
    pub unstable: bool,
}

impl PaucEstimate {
    /// Value under no discrimination.
    pub fn null_value(&self) -> f64 {
        0.5 * self.t0 * self.t0
    }
}

/// Order statistic at `ceil((1 - t0) n_C)` of the sorted controls.
fn control_quantile(sorted_controls: &[f64], t0: f64) -> f64 {
    let n = sorted_controls.len();
    let k = ((1.0 - t0) * n as f64 - 1e-9).ceil() as usize;
    sorted_controls[k.clamp(1, n) - 1]
}

pub fn pauc_estimate(y: &[f64], design: &StudyDesign, t0: f64, ties: TieRule) -> Result<PaucEstimate> {
    if !(t0 > 0.0 && t0 < 1.0) {
        return Err(Error::InvalidParameter(format!("t0 must lie in (0, 1), got {t0}")));
    }
    let (cases, mut controls) = split(y, design)?;
    if cases.len() < 2 || controls.len() < 2 {
        return Err(Error::Degenerate("pAUC needs two samples per group".into()));
    }
    controls.sort_unstable_by(f64::total_cmp);
    let q0 = control_quantile(&controls, t0);
    let first_in_band = controls.partition_point(|&c| c <= q0);
    let band = &controls[first_in_band..];
    let (nd, nc) = (cases.len() as f64, controls.len() as f64);

    // phi_d[i]: fraction of all controls in the band and below case i.
    let phi_d: Vec<f64> = cases
        .iter()
        .map(|&d| band.iter().map(|&c| ties.score(d, c)).sum::<f64>() / nc)
        .collect();
    let estimate = phi_d.iter().sum::<f64>() / nd;

    // Control influence: phi_c(C_j) + (1 - F_D(q0)) I(C_j <= q0).
    let above_q0 = cases.iter().filter(|&&d| d > q0).count() as f64 / nd;
    let g: Vec<f64> = controls
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            if j >= first_in_band {
                cases.iter().map(|&d| ties.score(d, c)).sum::<f64>() / nd
            } else {
                above_q0
            }
        })
        .collect();
    let pop_var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let n = cases.len() + controls.len();
    let lambda = nd / n as f64;
    let variance = pop_var(&phi_d) / lambda + pop_var(&g) / (1.0 - lambda);
    Ok(PaucEstimate {
        t0,
        estimate,
        variance,
        q0,
        lambda,
        n,
        unstable: band.is_empty(),
    })
}

/// One-sided (upper tail) z-test of `pAUC(t0) = t0^2 / 2`.
pub fn pauc_test(y: &[f64], design: &StudyDesign, t0: f64, ties: TieRule) -> Result<TestResult> {
    let est = pauc_estimate(y, design, t0, ties)?;
    if !(est.variance > 0.0) {
        return Err(Error::Degenerate("zero pAUC variance".into()));
    }
    let z = (est.n as f64).sqrt() * (est.estimate - est.null_value()) / est.variance.sqrt();
    let (cases, controls) = split(y, design)?;
    let (m1, _) = mean_var(&cases);
    let (m0, _) = mean_var(&controls);
    let effect_var = mean_abs_dev_from_median(&cases) - mean_abs_dev_from_median(&controls);
    Ok(TestResult::new(TestKind::Pauc, z, normal_sf(z), m1 - m0, effect_var))
}

/// Settings shared by every test in a battery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestSettings {
    pub t0: f64,
    pub ties: TieRule,
    /// Covariance fed to the constrained tests.
    pub constrained_cov: CovarianceKind,
}

impl Default for TestSettings {
    fn default() -> Self {
        Self {
            t0: 0.2,
            ties: TieRule::Half,
            constrained_cov: CovarianceKind::Corrected,
        }
    }
}

/// Runs `tests` on one marker, fitting the joint model at most once.
///
/// Results come back in the order of `tests`; a failed fit fails every test
/// that needs it.
pub fn run_tests(
    y: &[f64],
    design: &StudyDesign,
    fitter: Option<&crate::estimation::MarkerFitter>,
    tests: &[TestKind],
    settings: &TestSettings,
) -> Vec<Result<TestResult>> {
    let fit = match fitter {
        Some(f) if tests.iter().any(|t| t.needs_fit()) => Some(f.fit(y)),
        _ => None,
    };
    tests
        .iter()
        .map(|&test| {
            let fitted = || -> Result<&MarkerFit> {
                match &fit {
                    Some(Ok(f)) => Ok(f),
                    Some(Err(e)) => Err(e.clone()),
                    None => Err(Error::InvalidParameter(format!("{test} needs a marker fitter"))),
                }
            };
            match test {
                TestKind::Welch => welch_t_test(y, design),
                TestKind::Levene => match &fit {
                    Some(Ok(f)) => levene_from_fit(f),
                    _ => levene_test(y, design),
                },
                TestKind::TwoDfNaive => two_df_wald(fitted()?, CovarianceKind::Naive),
                TestKind::TwoDfCorrected => two_df_wald(fitted()?, CovarianceKind::Corrected),
                TestKind::ConstrainedH1b => {
                    constrained_test(fitted()?, ConstrainedHypothesis::H1b, settings.constrained_cov)
                }
                TestKind::ConstrainedH1c => {
                    constrained_test(fitted()?, ConstrainedHypothesis::H1c, settings.constrained_cov)
                }
                TestKind::Pauc => pauc_test(y, design, settings.t0, settings.ties),
            }
        })
        .collect()
}
