//! Per-marker model fitting.
//!
//! Two linear models are fitted to each marker, sharing the design
//! (intercept, cancer indicator, covariates):
//!
//! ```text
//! E(Y_i)            = b0 + b1 X_i + b2 W_i        (mean model)
//! E(|Y_i - m~_g(i)|) = a0 + a1 X_i + a2 W_i        (absolute-deviation model)
//! ```
//!
//! where `m~_g` is the sample median of the sample's own group. The joint
//! covariance of `(b1, a1)` is the empirical sandwich of the stacked OLS
//! influence functions. The corrected version adds the variance that the
//! two estimated medians induce in `a1`.
//!
//! For group `g`, with slope weights `w_i` (row of the OLS pseudo-inverse)
//! and `s_i = I(Y_i < m_g) - I(Y_i >= m_g)`, the median term in `a1` is
//! `(m~_g - m_g) * sum_g w_i s_i`, and `m~_g - m_g ≈ -sum_g s_k / (2 f n_g)`.
//! The product of the two (jointly Gaussian, mean-zero) sign sums has
//! variance `n_g sum w_i^2 + (sum w_i)^2`, and zero covariance with any
//! linear term, so only `Var(a1)` grows:
//!
//! ```text
//! Var_med(a1) = sum_g [n_g sum_{i in g} w_i^2 + (sum_{i in g} w_i)^2] / (4 f(m_g)^2 n_g^2)
//! ```

use std::f64::consts::PI;

use crate::data::{MarkerFit, StudyDesign};
use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Smallest density at a median accepted before the marker is skipped.
pub const MIN_DENSITY: f64 = 1e-12;

/// Kernel used for density estimation at the group medians.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kernel {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BandwidthRule {
    /// `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`.
    #[default]
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KdeConfig {
    pub kernel: Kernel,
    pub bandwidth_rule: BandwidthRule,
}

impl KdeConfig {
    pub fn fixed(h: f64) -> Result<Self> {
        if h > 0.0 && h.is_finite() {
            Ok(Self {
                kernel: Kernel::Gaussian,
                bandwidth_rule: BandwidthRule::Fixed(h),
            })
        } else {
            Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")))
        }
    }
}

/// Coefficients and residuals of an OLS fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefs: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// OLS projection for a fixed design, precomputed once and reused per marker.
///
/// Columns are intercept, cancer indicator, then covariates. The
/// pseudo-inverse `(X'X)^-1 X'` is obtained from a thin QR factorization
/// (modified Gram-Schmidt with one reorthogonalization pass).
#[derive(Debug, Clone)]
pub struct Regression {
    n: usize,
    p: usize,
    /// Design matrix, row-major n x p.
    x: Vec<f64>,
    /// Pseudo-inverse, row-major p x n.
    pinv: Vec<f64>,
}

impl Regression {
    pub fn new(design: &StudyDesign) -> Result<Self> {
        let n = design.len();
        let mut names = vec!["intercept".to_string(), "group".to_string()];
        names.extend(design.covariate_names().iter().cloned());
        while names.len() < 2 + design.covariates().len() {
            names.push(format!("covariate{}", names.len() - 2));
        }
        let p = names.len();
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
        cols.push(vec![1.0; n]);
        cols.push(design.groups().iter().map(|&g| f64::from(u8::from(g))).collect());
        for row in design.covariates() {
            if row.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "covariate has {} entries, expected {n}",
                    row.len()
                )));
            }
            cols.push(row.clone());
        }
        if n < p {
            return Err(Error::SingularDesign(names[n.min(p - 1)].clone()));
        }

        let mut q = cols.clone();
        let mut r = vec![0.0; p * p];
        for k in 0..p {
            let norm0 = dot(&cols[k], &cols[k]).sqrt();
            for _pass in 0..2 {
                for j in 0..k {
                    let c = dot(&q[j], &q[k]);
                    r[j * p + k] += c;
                    let (head, tail) = q.split_at_mut(k);
                    for (t, h) in tail[0].iter_mut().zip(&head[j]) {
                        *t -= c * h;
                    }
                }
            }
            let norm = dot(&q[k], &q[k]).sqrt();
            if norm0 == 0.0 || norm <= 1e-10 * norm0 {
                return Err(Error::SingularDesign(names[k].clone()));
            }
            r[k * p + k] = norm;
            q[k].iter_mut().for_each(|v| *v /= norm);
        }

        // pinv = R^-1 Q'; solve R row by row from the bottom.
        let mut pinv = vec![0.0; p * n];
        for i in 0..n {
            for k in (0..p).rev() {
                let mut acc = q[k][i];
                for j in k + 1..p {
                    acc -= r[k * p + j] * pinv[j * n + i];
                }
                pinv[k * n + i] = acc / r[k * p + k];
            }
        }
        let mut x = vec![0.0; n * p];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                x[i * p + j] = v;
            }
        }
        Ok(Self { n, p, x, pinv })
    }

    pub fn n_coefs(&self) -> usize {
        self.p
    }

    /// Row `k` of the pseudo-inverse: the weights giving coefficient `k`.
    pub fn weights(&self, k: usize) -> &[f64] {
        &self.pinv[k * self.n..(k + 1) * self.n]
    }

    pub fn coefficients(&self, y: &[f64]) -> Vec<f64> {
        (0..self.p).map(|k| dot(self.weights(k), y)).collect()
    }

    pub fn fit(&self, y: &[f64]) -> LinearFit {
        let coefs = self.coefficients(y);
        let residuals = y
            .iter()
            .enumerate()
            .map(|(i, &v)| v - dot(&self.x[i * self.p..(i + 1) * self.p], &coefs))
            .collect();
        LinearFit { coefs, residuals }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_len(y: &[f64], design: &StudyDesign) -> Result<()> {
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
    Ok(())
}

/// OLS fit of the mean model.
pub fn fit_mean_model(y: &[f64], design: &StudyDesign) -> Result<LinearFit> {
    check_len(y, design)?;
    Ok(Regression::new(design)?.fit(y))
}

/// OLS fit of the absolute-deviation model to a transformed vector `z`.
pub fn fit_variance_model(z: &[f64], design: &StudyDesign) -> Result<LinearFit> {
    fit_mean_model(z, design)
}

/// Median of an ascending slice; midpoint of the central pair for even length.
pub(crate) fn sorted_median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Linear-interpolation quantile of an ascending slice (R type 7).
pub(crate) fn sorted_quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_copy(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_unstable_by(f64::total_cmp);
    v
}

/// Per-group sample medians as `[cancer, normal]`.
pub fn group_medians(y: &[f64], design: &StudyDesign) -> Result<[f64; 2]> {
    check_len(y, design)?;
    let (cases, controls) = design.group_indices();
    if cases.is_empty() {
        return Err(Error::EmptyGroup("cancer"));
    }
    if controls.is_empty() {
        return Err(Error::EmptyGroup("normal"));
    }
    let med = |idx: &[usize]| sorted_median(&sorted_copy(idx.iter().map(|&i| y[i])));
    Ok([med(&cases), med(&controls)])
}

/// Absolute deviation of each sample from its own group's median.
///
/// A design with a single group is accepted here (the missing group has no
/// samples to transform).
pub fn levene_transform(y: &[f64], design: &StudyDesign) -> Result<Vec<f64>> {
    check_len(y, design)?;
    let (cases, controls) = design.group_indices();
    if cases.is_empty() && controls.is_empty() {
        return Err(Error::EmptyGroup("cancer"));
    }
    let med = |idx: &[usize]| {
        if idx.is_empty() {
            0.0
        } else {
            sorted_median(&sorted_copy(idx.iter().map(|&i| y[i])))
        }
    };
    let m = [med(&cases), med(&controls)];
    Ok(y
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - m[usize::from(!design.is_case(i))]).abs())
        .collect())
}

/// Sample standard deviation with an `n - 1` denominator.
pub(crate) fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Silverman's rule of thumb on an ascending slice.
///
/// Falls back to the standard deviation when the IQR is zero.
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let sd = sample_sd(sorted);
    let iqr = sorted_quantile(sorted, 0.75) - sorted_quantile(sorted, 0.25);
    let spread = match sd.min(iqr / 1.34) {
        s if s > 0.0 => s,
        _ => sd,
    };
    0.9 * spread * (sorted.len() as f64).powf(-0.2)
}

fn kde_sorted(sorted: &[f64], point: f64, config: &KdeConfig) -> Result<f64> {
    if sorted.len() < 2 || sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::Degenerate(
            "density estimation needs at least two distinct values".into(),
        ));
    }
    let h = match config.bandwidth_rule {
        BandwidthRule::Silverman => silverman_bandwidth(sorted),
        BandwidthRule::Fixed(h) if h > 0.0 => h,
        BandwidthRule::Fixed(h) => {
            return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")))
        }
    };
    let Kernel::Gaussian = config.kernel;
    let sum: f64 = sorted
        .iter()
        .map(|&v| {
            let u = (point - v) / h;
            (-0.5 * u * u).exp()
        })
        .sum();
    Ok(sum * FRAC_1_SQRT_2PI / (sorted.len() as f64 * h))
}

/// Gaussian kernel density estimate of `values` at `point`.
pub fn kde_density_at(values: &[f64], point: f64, config: &KdeConfig) -> Result<f64> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::MissingValue);
    }
    kde_sorted(&sorted_copy(values.iter().copied()), point, config)
}

/// Per-sample influence contributions of the two stacked OLS fits.
///
/// `beta[i][k]` and `alpha[i][k]` are sample `i`'s contribution to the
/// error of coefficient `k`; their outer-product sum is the naive sandwich.
/// `median_addend[i]` is the sample's share of the median-estimation
/// variance of `alpha[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceSet {
    pub beta: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub median_addend: Vec<f64>,
}

impl InfluenceSet {
    /// Sandwich covariance of coefficients `(j, k)` across the two models,
    /// indexed as `0..p` for the mean model and `p..2p` for the deviation model.
    pub fn covariance(&self, j: usize, k: usize) -> f64 {
        let p = self.beta.first().map_or(0, Vec::len);
        let pick = |i: usize, c: usize| {
            if c < p {
                self.beta[i][c]
            } else {
                self.alpha[i][c - p]
            }
        };
        (0..self.beta.len()).map(|i| pick(i, j) * pick(i, k)).sum()
    }

    /// Column sums of the influence contributions (zero after fitting).
    pub fn column_sums(&self) -> Vec<f64> {
        let p = self.beta.first().map_or(0, Vec::len);
        (0..2 * p)
            .map(|c| {
                self.beta
                    .iter()
                    .zip(&self.alpha)
                    .map(|(b, a)| if c < p { b[c] } else { a[c - p] })
                    .sum()
            })
            .collect()
    }
}

/// Fits both models for many markers against one design.
///
/// The regression projection, group membership and density settings are
/// computed once; [`MarkerFitter::fit`] is then a pure function of the
/// marker's values and safe to call from many threads.
#[derive(Debug, Clone)]
pub struct MarkerFitter {
    regression: Regression,
    cases: Vec<usize>,
    controls: Vec<usize>,
    kde: KdeConfig,
    is_case: Vec<bool>,
}

struct GroupSummary {
    median: f64,
    density: f64,
    /// `n_g sum w_i^2 + (sum w_i)^2` over the group's slope weights.
    weight_moment: f64,
    n: usize,
}

impl MarkerFitter {
    pub fn new(design: &StudyDesign, kde: KdeConfig) -> Result<Self> {
        let (cases, controls) = design.group_indices();
        if cases.is_empty() {
            return Err(Error::EmptyGroup("cancer"));
        }
        if controls.is_empty() {
            return Err(Error::EmptyGroup("normal"));
        }
        Ok(Self {
            regression: Regression::new(design)?,
            cases,
            controls,
            kde,
            is_case: design.groups().to_vec(),
        })
    }

    pub fn regression(&self) -> &Regression {
        &self.regression
    }

    fn summarize_group(&self, y: &[f64], idx: &[usize], which: &str) -> Result<GroupSummary> {
        let sorted = sorted_copy(idx.iter().map(|&i| y[i]));
        let median = sorted_median(&sorted);
        if sorted[0] == sorted[sorted.len() - 1] {
            return Err(Error::Degenerate(format!(
                "zero absolute deviation in {which} group"
            )));
        }
        let density = kde_sorted(&sorted, median, &self.kde)?;
        if !(density >= MIN_DENSITY) {
            return Err(Error::DensityDegenerate(density));
        }
        let w = self.regression.weights(1);
        let (sum, sum_sq) = idx
            .iter()
            .fold((0.0, 0.0), |(s, ss), &i| (s + w[i], ss + w[i] * w[i]));
        Ok(GroupSummary {
            median,
            density,
            weight_moment: idx.len() as f64 * sum_sq + sum * sum,
            n: idx.len(),
        })
    }

    fn median_variance(groups: &[GroupSummary; 2]) -> f64 {
        groups
            .iter()
            .map(|g| g.weight_moment / (4.0 * (g.density * g.n as f64).powi(2)))
            .sum()
    }

    fn deviations(&self, y: &[f64], medians: [f64; 2]) -> Vec<f64> {
        y.iter()
            .zip(&self.is_case)
            .map(|(&v, &case)| (v - medians[usize::from(!case)]).abs())
            .collect()
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.is_case.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a design of {} samples",
                y.len(),
                self.is_case.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::MissingValue);
        }
        Ok(())
    }

    /// Fits both models to one marker and returns estimates with the naive
    /// and median-corrected joint covariance of `(b1, a1)`.
    pub fn fit(&self, y: &[f64]) -> Result<MarkerFit> {
        self.check(y)?;
        let groups = [
            self.summarize_group(y, &self.cases, "cancer")?,
            self.summarize_group(y, &self.controls, "normal")?,
        ];
        let medians = [groups[0].median, groups[1].median];
        let z = self.deviations(y, medians);
        let mean_fit = self.regression.fit(y);
        let dev_fit = self.regression.fit(&z);

        let w = self.regression.weights(1);
        let (mut vb, mut va, mut cab) = (0.0, 0.0, 0.0);
        for ((&wi, &e), &r) in w.iter().zip(&mean_fit.residuals).zip(&dev_fit.residuals) {
            let ib = wi * e;
            let ia = wi * r;
            vb += ib * ib;
            va += ia * ia;
            cab += ib * ia;
        }
        let naive = [[vb, cab], [cab, va]];
        let corrected = [[vb, cab], [cab, va + Self::median_variance(&groups)]];
        Ok(MarkerFit {
            beta_coefs: mean_fit.coefs,
            alpha_coefs: dev_fit.coefs,
            joint_cov: corrected,
            joint_cov_naive: naive,
            group_medians: medians,
            density_at_medians: [groups[0].density, groups[1].density],
        })
    }

    /// Full per-sample influence contributions for one marker.
    pub fn influence(&self, y: &[f64]) -> Result<InfluenceSet> {
        self.check(y)?;
        let groups = [
            self.summarize_group(y, &self.cases, "cancer")?,
            self.summarize_group(y, &self.controls, "normal")?,
        ];
        let z = self.deviations(y, [groups[0].median, groups[1].median]);
        let mean_fit = self.regression.fit(y);
        let dev_fit = self.regression.fit(&z);
        let p = self.regression.n_coefs();
        let n = y.len();
        let per_sample = |res: &[f64]| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| (0..p).map(|k| self.regression.weights(k)[i] * res[i]).collect())
                .collect()
        };
        let w = self.regression.weights(1);
        let group_sum = |idx: &[usize]| idx.iter().map(|&i| w[i]).sum::<f64>();
        let sums = [group_sum(&self.cases), group_sum(&self.controls)];
        let median_addend = (0..n)
            .map(|i| {
                let g = usize::from(!self.is_case[i]);
                let ng = groups[g].n as f64;
                (ng * w[i] * w[i] + w[i] * sums[g]) / (4.0 * (groups[g].density * ng).powi(2))
            })
            .collect();
        Ok(InfluenceSet {
            beta: per_sample(&mean_fit.residuals),
            alpha: per_sample(&dev_fit.residuals),
            median_addend,
        })
    }
}

/// Fits both models for one marker with the default design-specific setup.
pub fn joint_covariance(y: &[f64], design: &StudyDesign, config: &KdeConfig) -> Result<MarkerFit> {
    MarkerFitter::new(design, *config)?.fit(y)
}

/// Asymptotic variance of the sample median of `n` standard-normal draws,
/// `1 / (4 f(0)^2 n) = pi / (2 n)`.
pub fn normal_median_variance(n: usize) -> f64 {
    PI / (2.0 * n as f64)
}
