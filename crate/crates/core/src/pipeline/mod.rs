//! Genome-wide scan: filtering, per-marker tests in parallel, multiple-testing
//! adjustment and summary tables.

pub mod io;
mod report;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{beta_to_m, m_to_beta, validate, MethylationMatrix, Scale, StudyDesign, TestKind, TestResult};
use crate::error::{Error, Result};
use crate::estimation::{KdeConfig, MarkerFitter};
use crate::hypothesis::{run_tests, TestSettings};

pub use report::{emit_plots, odds_ratio, summarize, CrossTab, PlotKind, TestSummary};

#[derive(Debug, Clone, PartialEq)]
pub struct ScanConfig {
    pub tests: Vec<TestKind>,
    pub t0: f64,
    pub fwer_alpha: f64,
    pub fdr_q: Option<f64>,
    /// Markers whose beta-scale SD over all samples is below this are dropped.
    pub sd_filter: f64,
    /// Cutoff on the mean normal-group beta for the low-methylation count.
    pub low_beta_threshold: f64,
    pub threads: usize,
    pub seed: u64,
    pub settings: TestSettings,
    pub kde: KdeConfig,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            tests: vec![TestKind::Welch, TestKind::Levene, TestKind::TwoDfCorrected, TestKind::ConstrainedH1b, TestKind::ConstrainedH1c],
            t0: 0.2,
            fwer_alpha: 0.05,
            fdr_q: None,
            sd_filter: 0.05,
            low_beta_threshold: 0.1,
            threads: 1,
            seed: 1,
            settings: TestSettings::default(),
            kde: KdeConfig::default(),
        }
    }
}

impl ScanConfig {
    pub fn check(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        unit("fwer", self.fwer_alpha)?;
        unit("t0", self.t0)?;
        unit("low-beta", self.low_beta_threshold)?;
        if let Some(q) = self.fdr_q {
            unit("fdr", q)?;
        }
        if !(self.sd_filter >= 0.0 && self.sd_filter < 1.0) {
            return Err(Error::InvalidParameter(format!("sd-filter must lie in [0, 1), got {}", self.sd_filter)));
        }
        if self.threads == 0 {
            return Err(Error::InvalidParameter("threads must be at least 1".into()));
        }
        if self.tests.is_empty() {
            return Err(Error::InvalidParameter("no tests selected".into()));
        }
        Ok(())
    }

    /// Requested tests without duplicates, in canonical order.
    pub fn test_list(&self) -> Vec<TestKind> {
        self.tests.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn test_settings(&self) -> TestSettings {
        TestSettings {
            t0: self.t0,
            ..self.settings
        }
    }
}

/// A test result together with beta-scale effect sizes of its marker.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub result: TestResult,
    /// Mean beta, cancer minus normal.
    pub delta_beta_mean: f64,
    /// Beta standard deviation, cancer minus normal.
    pub delta_beta_sd: f64,
    pub normal_beta_mean: f64,
}

/// A test that could not be run on a marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skip {
    pub marker_id: String,
    pub test: TestKind,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanSummary {
    pub markers_input: usize,
    pub markers_filtered: usize,
    pub markers_tested: usize,
    /// Markers on which no requested test succeeded.
    pub markers_skipped: usize,
    pub fwer_alpha: f64,
    pub tests: Vec<TestSummary>,
    /// Welch (DMC) against Levene (DVC) significance, when both were run.
    pub dmc_dvc: Option<CrossTab>,
}

impl ScanSummary {
    pub fn test(&self, kind: TestKind) -> Option<&TestSummary> {
        self.tests.iter().find(|t| t.test == kind)
    }

    /// Flat key/value view used for `summary.tsv`.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("markers_input".to_string(), self.markers_input.to_string()),
            ("markers_filtered".to_string(), self.markers_filtered.to_string()),
            ("markers_tested".to_string(), self.markers_tested.to_string()),
            ("markers_skipped".to_string(), self.markers_skipped.to_string()),
            ("fwer_alpha".to_string(), self.fwer_alpha.to_string()),
        ];
        for t in &self.tests {
            let key = |k: &str| format!("{}.{k}", t.test);
            out.push((key("results"), t.results.to_string()));
            out.push((key("significant"), t.significant.to_string()));
            out.push((key("significant_hypermethylated"), t.hyper_mean.to_string()));
            out.push((key("significant_hypervariable"), t.hyper_var.to_string()));
            out.push((key("significant_low_normal_beta"), t.low_normal_beta.to_string()));
            if let Some(n) = t.fdr_significant {
                out.push((key("fdr_significant"), n.to_string()));
            }
        }
        if let Some(c) = &self.dmc_dvc {
            out.push(("dmc_dvc.both".into(), c.both.to_string()));
            out.push(("dmc_dvc.dmc_only".into(), c.dmc_only.to_string()));
            out.push(("dmc_dvc.dvc_only".into(), c.dvc_only.to_string()));
            out.push(("dmc_dvc.neither".into(), c.neither.to_string()));
            out.push(("dmc_dvc.dvc_not_dmc_proportion".into(), c.dvc_not_dmc.to_string()));
            out.push(("dmc_dvc.odds_ratio".into(), c.odds_ratio.to_string()));
            out.push(("dmc_dvc.continuity_corrected".into(), c.continuity_corrected.to_string()));
        }
        out
    }
}

/// Everything a scan produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutput {
    /// One row per tested marker and successful test, in marker order.
    pub rows: Vec<ResultRow>,
    pub skipped: Vec<Skip>,
    pub filtered: Vec<String>,
    pub summary: ScanSummary,
}

fn beta_row(row: &[f64], scale: Scale) -> Vec<f64> {
    match scale {
        Scale::Beta => row.to_vec(),
        Scale::MValue => row.iter().map(|&m| m_to_beta(m)).collect(),
    }
}

fn sd(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.len() < 2 {
        return f64::NAN;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.filter(|x| x.is_finite()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { f64::NAN } else { s / n as f64 }
}

fn keeps(row: &[f64], scale: Scale, threshold: f64) -> bool {
    !(sd(beta_row(row, scale).into_iter()) < threshold)
}

/// Drops markers whose beta-scale SD over all samples is strictly below
/// `sd_threshold`; survivors keep their order.
pub fn filter_low_variability(matrix: &MethylationMatrix, sd_threshold: f64) -> (MethylationMatrix, Vec<String>) {
    let keep: Vec<bool> = (0..matrix.n_markers())
        .map(|i| keeps(matrix.row(i), matrix.scale(), sd_threshold))
        .collect();
    let dropped = matrix
        .marker_ids()
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| !k)
        .map(|(id, _)| id.clone())
        .collect();
    (matrix.select_rows(|i| keep[i]), dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjustMethod {
    BonferroniFwer,
    BenjaminiHochbergFdr,
}

/// Multiple-testing adjusted p-values, in input order.
pub fn adjust(p_values: &[f64], method: AdjustMethod) -> Vec<f64> {
    let m = p_values.len() as f64;
    match method {
        AdjustMethod::BonferroniFwer => p_values.iter().map(|p| (p * m).min(1.0)).collect(),
        AdjustMethod::BenjaminiHochbergFdr => {
            let mut order: Vec<usize> = (0..p_values.len()).collect();
            order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
            let mut out = vec![0.0; p_values.len()];
            let mut running = 1.0f64;
            for (rank, &i) in order.iter().enumerate().rev() {
                running = running.min(p_values[i] * m / (rank + 1) as f64);
                out[i] = running.min(1.0);
            }
            out
        }
    }
}

struct MarkerOutcome {
    rows: Vec<ResultRow>,
    skips: Vec<Skip>,
}

fn scan_marker(
    id: &str,
    raw: &[f64],
    scale: Scale,
    design: &StudyDesign,
    fitter: Option<&MarkerFitter>,
    tests: &[TestKind],
    settings: &TestSettings,
) -> MarkerOutcome {
    let (y, beta): (Vec<f64>, Vec<f64>) = match scale {
        Scale::MValue => (raw.to_vec(), raw.iter().map(|&m| m_to_beta(m)).collect()),
        Scale::Beta => (raw.iter().map(|&b| beta_to_m(b).unwrap_or(f64::NAN)).collect(), raw.to_vec()),
    };
    let group = |case: bool| beta.iter().enumerate().filter(move |(i, _)| design.is_case(*i) == case).map(|(_, &v)| v);
    let normal_beta_mean = mean(group(false));
    let delta_beta_mean = mean(group(true)) - normal_beta_mean;
    let delta_beta_sd = sd(group(true)) - sd(group(false));
    let mut out = MarkerOutcome {
        rows: Vec::with_capacity(tests.len()),
        skips: Vec::new(),
    };
    for (test, res) in tests.iter().zip(run_tests(&y, design, fitter, tests, settings)) {
        match res {
            Ok(r) => out.rows.push(ResultRow {
                result: r.with_marker(id),
                delta_beta_mean,
                delta_beta_sd,
                normal_beta_mean,
            }),
            Err(e) => out.skips.push(Skip {
                marker_id: id.to_string(),
                test: *test,
                reason: e.to_string(),
            }),
        }
    }
    out
}

/// Runs the configured tests on every marker that survives the variability
/// filter, then fills in adjusted p-values and the summary.
///
/// Per-marker failures are recorded in `skipped`; only invalid inputs or
/// configuration abort the scan.
pub fn scan(matrix: &MethylationMatrix, design: &StudyDesign, config: &ScanConfig) -> Result<ScanOutput> {
    config.check()?;
    if let Some(e) = validate(matrix, design).into_iter().next() {
        return Err(e);
    }
    let tests = config.test_list();
    let settings = config.test_settings();
    let fitter = if tests.iter().any(|t| t.needs_fit()) {
        Some(MarkerFitter::new(design, config.kde)?)
    } else {
        None
    };
    let scale = matrix.scale();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let outcomes: Vec<Option<MarkerOutcome>> = pool.install(|| {
        (0..matrix.n_markers())
            .into_par_iter()
            .map(|i| {
                let row = matrix.row(i);
                keeps(row, scale, config.sd_filter).then(|| {
                    scan_marker(&matrix.marker_ids()[i], row, scale, design, fitter.as_ref(), &tests, &settings)
                })
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut filtered = Vec::new();
    let mut markers_skipped = 0;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            None => filtered.push(matrix.marker_ids()[i].clone()),
            Some(o) => {
                if o.rows.is_empty() {
                    markers_skipped += 1;
                }
                rows.extend(o.rows);
                skipped.extend(o.skips);
            }
        }
    }
    apply_adjustments(&mut rows, &tests, config.fdr_q.is_some());
    let mut summary = summarize(&rows, config);
    summary.markers_input = matrix.n_markers();
    summary.markers_filtered = filtered.len();
    summary.markers_skipped = markers_skipped;
    summary.markers_tested = matrix.n_markers() - filtered.len() - markers_skipped;
    log::info!(
        "scanned {} markers: {} filtered, {} tested, {} skipped",
        summary.markers_input,
        summary.markers_filtered,
        summary.markers_tested,
        summary.markers_skipped
    );
    Ok(ScanOutput {
        rows,
        skipped,
        filtered,
        summary,
    })
}

/// Fills `adjusted_p` (Bonferroni) and optionally `q_value` (BH), separately
/// for each test.
pub fn apply_adjustments(rows: &mut [ResultRow], tests: &[TestKind], with_fdr: bool) {
    for &test in tests {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].result.test == test).collect();
        let p: Vec<f64> = idx.iter().map(|&i| rows[i].result.p_value).collect();
        let bonf = adjust(&p, AdjustMethod::BonferroniFwer);
        let bh = with_fdr.then(|| adjust(&p, AdjustMethod::BenjaminiHochbergFdr));
        for (k, &i) in idx.iter().enumerate() {
            rows[i].result.adjusted_p = Some(bonf[k]);
            rows[i].result.q_value = bh.as_ref().map(|q| q[k]);
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes `results.tsv`, `skipped.tsv`, `summary.tsv`, `volcano.tsv` and
/// `qq.tsv` into `dir`.
pub fn write_outputs(out: &ScanOutput, config: &ScanConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    io::write_results(&out.rows, create(&dir.join("results.tsv"))?)?;
    io::write_skipped(&out.skipped, create(&dir.join("skipped.tsv"))?)?;
    io::write_summary(&out.summary, create(&dir.join("summary.tsv"))?)?;
    emit_plots(&out.rows, PlotKind::Volcano, config.fwer_alpha, create(&dir.join("volcano.tsv"))?)?;
    emit_plots(&out.rows, PlotKind::Qq, config.fwer_alpha, create(&dir.join("qq.tsv"))?)?;
    Ok(())
}
