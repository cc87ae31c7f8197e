//! Shared data types: the methylation matrix, the study design, per-marker
//! fits and test results, and the simulation descriptor.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measurement scale of a methylation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    MValue,
    Beta,
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m" | "mvalue" | "m-value" => Ok(Scale::MValue),
            "beta" | "b" => Ok(Scale::Beta),
            other => Err(Error::InvalidParameter(format!("unknown scale `{other}`"))),
        }
    }
}

/// Markers × samples matrix, stored row-major. Missing cells are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct MethylationMatrix {
    marker_ids: Vec<String>,
    values: Vec<f64>,
    n_samples: usize,
    scale: Scale,
}

impl MethylationMatrix {
    /// Builds a matrix from row-major values. Only the shape is checked here;
    /// range and uniqueness checks live in [`validate`].
    pub fn new(
        marker_ids: Vec<String>,
        values: Vec<f64>,
        n_samples: usize,
        scale: Scale,
    ) -> Result<Self> {
        if values.len() != marker_ids.len() * n_samples {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} markers x {} samples",
                values.len(),
                marker_ids.len(),
                n_samples
            )));
        }
        Ok(Self {
            marker_ids,
            values,
            n_samples,
            scale,
        })
    }

    pub fn from_rows(marker_ids: Vec<String>, rows: &[Vec<f64>], scale: Scale) -> Result<Self> {
        let n_samples = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != n_samples) {
            return Err(Error::DimensionMismatch(format!(
                "row {bad} has {} columns, expected {n_samples}",
                rows[bad].len()
            )));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::new(marker_ids, values, n_samples, scale)
    }

    pub fn n_markers(&self) -> usize {
        self.marker_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn marker_ids(&self) -> &[String] {
        &self.marker_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.marker_ids
            .iter()
            .map(String::as_str)
            .zip(self.values.chunks(self.n_samples.max(1)))
    }

    /// Keeps the rows whose index satisfies `keep`, preserving order.
    pub fn select_rows(&self, keep: impl Fn(usize) -> bool) -> Self {
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for i in 0..self.n_markers() {
            if keep(i) {
                ids.push(self.marker_ids[i].clone());
                values.extend_from_slice(self.row(i));
            }
        }
        Self {
            marker_ids: ids,
            values,
            n_samples: self.n_samples,
            scale: self.scale,
        }
    }
}

/// Group labels (cancer = true) and optional covariates, one row per covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyDesign {
    group: Vec<bool>,
    covariates: Vec<Vec<f64>>,
    covariate_names: Vec<String>,
}

impl StudyDesign {
    /// Design without covariates; `group[i]` is 1 for cancer, 0 for normal.
    pub fn new(group: Vec<u8>) -> Self {
        Self {
            group: group.into_iter().map(|g| g != 0).collect(),
            covariates: Vec::new(),
            covariate_names: Vec::new(),
        }
    }

    pub fn from_flags(group: Vec<bool>) -> Self {
        Self {
            group,
            covariates: Vec::new(),
            covariate_names: Vec::new(),
        }
    }

    /// `n_cases` cancer samples followed by `n_controls` normals.
    pub fn balanced(n_cases: usize, n_controls: usize) -> Self {
        let mut group = vec![true; n_cases];
        group.extend(std::iter::repeat_n(false, n_controls));
        Self::from_flags(group)
    }

    pub fn with_covariates(mut self, names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != rows.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate names for {} covariate rows",
                names.len(),
                rows.len()
            )));
        }
        self.covariates = rows;
        self.covariate_names = names;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group.is_empty()
    }

    pub fn is_case(&self, i: usize) -> bool {
        self.group[i]
    }

    pub fn groups(&self) -> &[bool] {
        &self.group
    }

    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_cases(&self) -> usize {
        self.group.iter().filter(|&&g| g).count()
    }

    pub fn n_controls(&self) -> usize {
        self.len() - self.n_cases()
    }

    /// Sample indices of the cancer group, then of the normal group.
    pub fn group_indices(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.group[i])
    }

    /// Swaps cancer and normal labels.
    pub fn flipped(&self) -> Self {
        Self {
            group: self.group.iter().map(|g| !g).collect(),
            covariates: self.covariates.clone(),
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Reorders samples; `order[k]` is the old index placed at position `k`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            group: order.iter().map(|&i| self.group[i]).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|row| order.iter().map(|&i| row[i]).collect())
                .collect(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Per-marker estimates from the mean and absolute-deviation regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerFit {
    /// Mean model coefficients: intercept, group, covariates.
    pub beta_coefs: Vec<f64>,
    /// Absolute-deviation model coefficients, same layout.
    pub alpha_coefs: Vec<f64>,
    /// Covariance of (beta1, alpha1) including the median-estimation term.
    pub joint_cov: [[f64; 2]; 2],
    /// Plug-in sandwich covariance treating the medians as known.
    pub joint_cov_naive: [[f64; 2]; 2],
    /// Sample medians as [cancer, normal].
    pub group_medians: [f64; 2],
    /// Kernel density estimates at the medians, [cancer, normal].
    pub density_at_medians: [f64; 2],
}

impl MarkerFit {
    pub fn beta1(&self) -> f64 {
        self.beta_coefs[1]
    }

    pub fn alpha1(&self) -> f64 {
        self.alpha_coefs[1]
    }

    pub fn covariance(&self, kind: CovarianceKind) -> &[[f64; 2]; 2] {
        match kind {
            CovarianceKind::Corrected => &self.joint_cov,
            CovarianceKind::Naive => &self.joint_cov_naive,
        }
    }

    /// Correlation of (beta1, alpha1) under the chosen covariance, clamped to [-1, 1].
    pub fn rho(&self, kind: CovarianceKind) -> f64 {
        let c = self.covariance(kind);
        let denom = (c[0][0] * c[1][1]).sqrt();
        if denom > 0.0 {
            (c[0][1] / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    }
}

/// Which joint covariance feeds a Wald or constrained test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CovarianceKind {
    Naive,
    Corrected,
}

/// The seven per-marker tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestKind {
    Welch,
    Levene,
    TwoDfNaive,
    TwoDfCorrected,
    ConstrainedH1b,
    ConstrainedH1c,
    Pauc,
}

impl TestKind {
    pub const ALL: [TestKind; 7] = [
        TestKind::Welch,
        TestKind::Levene,
        TestKind::TwoDfNaive,
        TestKind::TwoDfCorrected,
        TestKind::ConstrainedH1b,
        TestKind::ConstrainedH1c,
        TestKind::Pauc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestKind::Welch => "welch",
            TestKind::Levene => "levene",
            TestKind::TwoDfNaive => "2df-naive",
            TestKind::TwoDfCorrected => "2df-corrected",
            TestKind::ConstrainedH1b => "h1b",
            TestKind::ConstrainedH1c => "h1c",
            TestKind::Pauc => "pauc",
        }
    }

    /// Whether the test needs the joint (beta1, alpha1) fit.
    pub fn needs_fit(self) -> bool {
        !matches!(self, TestKind::Welch | TestKind::Pauc)
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let kind = match key.as_str() {
            "welch" | "t" | "dmc" => TestKind::Welch,
            "levene" | "dvc" => TestKind::Levene,
            "2df-naive" | "naive" => TestKind::TwoDfNaive,
            "2df-corrected" | "2df" | "corrected" => TestKind::TwoDfCorrected,
            "h1b" | "constrained-h1b" => TestKind::ConstrainedH1b,
            "h1c" | "constrained-h1c" => TestKind::ConstrainedH1c,
            "pauc" => TestKind::Pauc,
            _ => return Err(Error::InvalidParameter(format!("unknown test `{s}`"))),
        };
        Ok(kind)
    }
}

/// Outcome of one test on one marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub marker_id: String,
    pub test: TestKind,
    pub statistic: f64,
    pub p_value: f64,
    /// Estimated mean difference (cancer minus normal).
    pub effect_mean: f64,
    /// Estimated difference in mean absolute deviation.
    pub effect_var: f64,
    /// Bonferroni-adjusted p-value, filled in after the scan.
    pub adjusted_p: Option<f64>,
    /// Benjamini-Hochberg adjusted p-value, when requested.
    pub q_value: Option<f64>,
}

impl TestResult {
    pub fn new(test: TestKind, statistic: f64, p_value: f64, effect_mean: f64, effect_var: f64) -> Self {
        Self {
            marker_id: String::new(),
            test,
            statistic,
            p_value: p_value.clamp(0.0, 1.0),
            effect_mean,
            effect_var,
            adjusted_p: None,
            q_value: None,
        }
    }

    pub fn with_marker(mut self, id: impl Into<String>) -> Self {
        self.marker_id = id.into();
        self
    }

    pub fn hyper_mean(&self) -> bool {
        self.effect_mean > 0.0
    }

    pub fn hyper_var(&self) -> bool {
        self.effect_var > 0.0
    }
}

/// Null models and power scenarios used in the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimulationKind {
    NullNormal,
    NullBeta,
    NullChisq3,
    NullBetaOutlier,
    PowerMeanVar,
    PowerVarOnly,
    PowerMeanOnly,
    PowerMixture,
}

impl SimulationKind {
    pub fn is_null(self) -> bool {
        matches!(
            self,
            SimulationKind::NullNormal
                | SimulationKind::NullBeta
                | SimulationKind::NullChisq3
                | SimulationKind::NullBetaOutlier
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            SimulationKind::NullNormal => "normal",
            SimulationKind::NullBeta => "beta",
            SimulationKind::NullChisq3 => "chisq3",
            SimulationKind::NullBetaOutlier => "beta-outlier",
            SimulationKind::PowerMeanVar => "mean-var",
            SimulationKind::PowerVarOnly => "var-only",
            SimulationKind::PowerMeanOnly => "mean-only",
            SimulationKind::PowerMixture => "mixture",
        }
    }
}

impl FromStr for SimulationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let kind = match key.as_str() {
            "normal" | "null-normal" => SimulationKind::NullNormal,
            "beta" | "null-beta" => SimulationKind::NullBeta,
            "chisq3" | "chisq" | "null-chisq3" => SimulationKind::NullChisq3,
            "beta-outlier" | "beta+" | "null-beta-outlier" => SimulationKind::NullBetaOutlier,
            "mean-var" | "power-mean-var" => SimulationKind::PowerMeanVar,
            "var-only" | "power-var-only" => SimulationKind::PowerVarOnly,
            "mean-only" | "power-mean-only" => SimulationKind::PowerMeanOnly,
            "mixture" | "power-mixture" => SimulationKind::PowerMixture,
            _ => return Err(Error::InvalidParameter(format!("unknown simulation kind `{s}`"))),
        };
        Ok(kind)
    }
}

impl fmt::Display for SimulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One simulation cell: a data model, group sizes, effect size and replicate count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub kind: SimulationKind,
    pub n_cases: usize,
    pub n_controls: usize,
    pub tau: f64,
    pub replicates: usize,
    pub seed: u64,
}

/// Largest effect size in the power sweep.
pub const MAX_TAU: f64 = 0.7;

impl SimulationSpec {
    pub fn new(
        kind: SimulationKind,
        n_cases: usize,
        n_controls: usize,
        tau: f64,
        replicates: usize,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self {
            kind,
            n_cases,
            n_controls,
            tau,
            replicates,
            seed,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.n_cases == 0 || self.n_controls == 0 {
            return Err(Error::InvalidParameter("group sizes must be positive".into()));
        }
        if self.kind.is_null() && self.tau != 0.0 {
            return Err(Error::InvalidParameter(format!(
                "tau must be 0 for null model {}, got {}",
                self.kind, self.tau
            )));
        }
        if !(0.0..=MAX_TAU).contains(&self.tau) {
            return Err(Error::InvalidParameter(format!(
                "tau {} outside [0, {MAX_TAU}]",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Logit-2 transform from beta values to M-values.
pub fn beta_to_m(beta: f64) -> Result<f64> {
    if beta > 0.0 && beta < 1.0 {
        Ok((beta / (1.0 - beta)).log2())
    } else {
        Err(Error::Domain(beta))
    }
}

/// Inverse of [`beta_to_m`].
pub fn m_to_beta(m: f64) -> f64 {
    let e = m.exp2();
    if e.is_infinite() {
        1.0
    } else {
        e / (1.0 + e)
    }
}

/// Checks every invariant of a matrix/design pair and returns all violations.
///
/// An empty vector means the pair is valid.
pub fn validate(matrix: &MethylationMatrix, design: &StudyDesign) -> Vec<Error> {
    let mut problems = Vec::new();
    if design.len() != matrix.n_samples() {
        problems.push(Error::DimensionMismatch(format!(
            "matrix has {} samples but design has {}",
            matrix.n_samples(),
            design.len()
        )));
    }
    if design.n_cases() == 0 {
        problems.push(Error::EmptyGroup("cancer"));
    }
    if design.n_controls() == 0 {
        problems.push(Error::EmptyGroup("normal"));
    }
    for (r, row) in design.covariates().iter().enumerate() {
        if row.len() != design.len() {
            problems.push(Error::DimensionMismatch(format!(
                "covariate row {r} has {} entries, expected {}",
                row.len(),
                design.len()
            )));
        }
        if let Some(s) = row.iter().position(|v| !v.is_finite()) {
            problems.push(Error::MissingCovariate { row: r, sample: s });
        }
    }
    let mut seen = HashSet::with_capacity(matrix.n_markers());
    for id in matrix.marker_ids() {
        if !seen.insert(id.as_str()) {
            problems.push(Error::DuplicateMarker(id.clone()));
        }
    }
    if matrix.scale() == Scale::Beta {
        for (id, row) in matrix.rows() {
            for (s, &v) in row.iter().enumerate() {
                if v.is_finite() && !(v > 0.0 && v < 1.0) {
                    problems.push(Error::BetaOutOfRange {
                        marker: id.to_string(),
                        sample: s,
                        value: v,
                    });
                }
            }
        }
    }
    problems
}
