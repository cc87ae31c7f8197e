use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;

use crate::data::TestKind;
use crate::error::{Error, Result};
use crate::simulation::qq_points;

use super::{ResultRow, ScanConfig, ScanSummary};

/// Significance counts for one test at the FWER threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestSummary {
    pub test: TestKind,
    pub results: usize,
    pub significant: usize,
    /// Significant with a positive mean effect.
    pub hyper_mean: usize,
    /// Significant with a positive deviation effect.
    pub hyper_var: usize,
    /// Significant with mean normal-group beta under the low-beta cutoff.
    pub low_normal_beta: usize,
    /// Count with `q_value` at or below the FDR level, when one was set.
    pub fdr_significant: Option<usize>,
}

/// 2x2 table of DMC (Welch) by DVC (Levene) significance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossTab {
    pub both: usize,
    pub dmc_only: usize,
    pub dvc_only: usize,
    pub neither: usize,
    pub odds_ratio: f64,
    /// True when a zero cell forced the 0.5 correction.
    pub continuity_corrected: bool,
    /// Share of DVCs that are not DMCs (0 when there are no DVCs).
    pub dvc_not_dmc: f64,
}

/// Odds ratio `(a d) / (b c)` of the table `[[a, b], [c, d]]`; adds 0.5 to
/// every cell when any is zero and reports that it did.
pub fn odds_ratio(a: usize, b: usize, c: usize, d: usize) -> (f64, bool) {
    let corrected = a == 0 || b == 0 || c == 0 || d == 0;
    let k = if corrected { 0.5 } else { 0.0 };
    let [a, b, c, d] = [a, b, c, d].map(|x| x as f64 + k);
    (a * d / (b * c), corrected)
}

fn significant(row: &ResultRow, alpha: f64) -> bool {
    row.result.adjusted_p.unwrap_or(row.result.p_value) <= alpha
}

/// Per-test counts and the DMC/DVC table. Marker totals are left at the
/// number of distinct markers with results; the scan overwrites them.
pub fn summarize(rows: &[ResultRow], config: &ScanConfig) -> ScanSummary {
    let alpha = config.fwer_alpha;
    let tests = config.test_list();
    let summaries = tests
        .iter()
        .map(|&test| {
            let mine: Vec<&ResultRow> = rows.iter().filter(|r| r.result.test == test).collect();
            let sig: Vec<&&ResultRow> = mine.iter().filter(|r| significant(r, alpha)).collect();
            TestSummary {
                test,
                results: mine.len(),
                significant: sig.len(),
                hyper_mean: sig.iter().filter(|r| r.result.hyper_mean()).count(),
                hyper_var: sig.iter().filter(|r| r.result.hyper_var()).count(),
                low_normal_beta: sig.iter().filter(|r| r.normal_beta_mean < config.low_beta_threshold).count(),
                fdr_significant: config
                    .fdr_q
                    .map(|q| mine.iter().filter(|r| r.result.q_value.is_some_and(|v| v <= q)).count()),
            }
        })
        .collect();

    let dmc_dvc = (tests.contains(&TestKind::Welch) && tests.contains(&TestKind::Levene)).then(|| {
        let mut calls: HashMap<&str, [Option<bool>; 2]> = HashMap::new();
        for r in rows {
            let slot = match r.result.test {
                TestKind::Welch => 0,
                TestKind::Levene => 1,
                _ => continue,
            };
            calls.entry(r.result.marker_id.as_str()).or_default()[slot] = Some(significant(r, alpha));
        }
        let (mut both, mut dmc_only, mut dvc_only, mut neither) = (0, 0, 0, 0);
        for c in calls.values() {
            match *c {
                [Some(true), Some(true)] => both += 1,
                [Some(true), Some(false)] => dmc_only += 1,
                [Some(false), Some(true)] => dvc_only += 1,
                [Some(false), Some(false)] => neither += 1,
                _ => {}
            }
        }
        let (odds_ratio, continuity_corrected) = odds_ratio(both, dmc_only, dvc_only, neither);
        let dvc = both + dvc_only;
        CrossTab {
            both,
            dmc_only,
            dvc_only,
            neither,
            odds_ratio,
            continuity_corrected,
            dvc_not_dmc: if dvc == 0 { 0.0 } else { dvc_only as f64 / dvc as f64 },
        }
    });

    let mut markers: Vec<&str> = rows.iter().map(|r| r.result.marker_id.as_str()).collect();
    markers.sort_unstable();
    markers.dedup();
    ScanSummary {
        markers_input: markers.len(),
        markers_filtered: 0,
        markers_tested: markers.len(),
        markers_skipped: 0,
        fwer_alpha: alpha,
        tests: summaries,
        dmc_dvc,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Volcano,
    Qq,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "volcano" => Ok(PlotKind::Volcano),
            "qq" => Ok(PlotKind::Qq),
            _ => Err(Error::InvalidParameter(format!("unknown plot kind `{s}`"))),
        }
    }
}

/// Plot data as TSV.
///
/// Volcano: `marker_id, test, delta_beta_sd, neg_log10_p, significant`.
/// QQ: `test, expected, observed`, both on the `-log10` scale.
pub fn emit_plots<W: Write>(rows: &[ResultRow], kind: PlotKind, fwer_alpha: f64, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    match kind {
        PlotKind::Volcano => {
            w.write_record(["marker_id", "test", "delta_beta_sd", "neg_log10_p", "significant"])
                .map_err(io)?;
            for r in rows {
                w.write_record([
                    r.result.marker_id.clone(),
                    r.result.test.to_string(),
                    r.delta_beta_sd.to_string(),
                    (-r.result.p_value.log10()).to_string(),
                    significant(r, fwer_alpha).to_string(),
                ])
                .map_err(io)?;
            }
        }
        PlotKind::Qq => {
            w.write_record(["test", "expected", "observed"]).map_err(io)?;
            for test in TestKind::ALL {
                let p: Vec<f64> = rows.iter().filter(|r| r.result.test == test).map(|r| r.result.p_value).collect();
                for q in qq_points(&p) {
                    w.write_record([test.to_string(), q.expected.to_string(), q.observed.to_string()])
                        .map_err(io)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
