//! Delimited-text input and output for the scan.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::data::{MethylationMatrix, Scale, StudyDesign, TestKind, TestResult};
use crate::error::{Error, Result};

use super::{ResultRow, ScanSummary, Skip};

/// Comma for `.csv` files, tab otherwise.
pub fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => b',',
        _ => b'\t',
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn reader<R: Read>(input: R, delimiter: u8) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn parse_err(path: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line: line as usize,
        msg: msg.into(),
    }
}

fn csv_err(path: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "NaN" | "nan" | "na" | ".")
}

/// Sample IDs and rows of a matrix file, in file order.
struct RawMatrix {
    samples: Vec<String>,
    markers: Vec<String>,
    values: Vec<f64>,
}

fn read_matrix<R: Read>(input: R, delimiter: u8, path: &str) -> Result<RawMatrix> {
    let mut rdr = reader(input, delimiter);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_err(path, e))?,
        None => return Err(parse_err(path, 1, "empty matrix file")),
    };
    let samples: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if samples.is_empty() {
        return Err(parse_err(path, 1, "header has no sample columns"));
    }
    let mut seen = HashSet::new();
    for s in &samples {
        if !seen.insert(s.as_str()) {
            return Err(parse_err(path, 1, format!("duplicate sample id `{s}`")));
        }
    }
    let mut markers = Vec::new();
    let mut values = Vec::new();
    let mut marker_seen: HashSet<String> = HashSet::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() != samples.len() + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", samples.len() + 1, rec.len()),
            ));
        }
        let id = rec[0].to_string();
        if !marker_seen.insert(id.clone()) {
            return Err(parse_err(path, line, format!("duplicate marker id `{id}`")));
        }
        for (k, cell) in rec.iter().skip(1).enumerate() {
            let v = if is_missing(cell) {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| {
                    parse_err(path, line, format!("non-numeric value `{cell}` for sample `{}`", samples[k]))
                })?
            };
            values.push(v);
        }
        markers.push(id);
    }
    Ok(RawMatrix {
        samples,
        markers,
        values,
    })
}

fn parse_group(cell: &str) -> Option<bool> {
    match cell.to_ascii_lowercase().as_str() {
        "1" | "cancer" | "case" | "tumor" | "tumour" => Some(true),
        "0" | "normal" | "control" => Some(false),
        _ => None,
    }
}

struct RawDesign {
    samples: Vec<String>,
    group: Vec<bool>,
    covariate_names: Vec<String>,
    /// One vector per covariate.
    covariates: Vec<Vec<f64>>,
}

fn read_design<R: Read>(input: R, delimiter: u8, path: &str) -> Result<RawDesign> {
    let mut rdr = reader(input, delimiter);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_err(path, e))?,
        None => return Err(parse_err(path, 1, "empty design file")),
    };
    if header.len() < 2 {
        return Err(parse_err(path, 1, "design needs columns sample_id and group"));
    }
    let covariate_names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut samples = Vec::new();
    let mut group = Vec::new();
    let mut covariates = vec![Vec::new(); covariate_names.len()];
    let mut seen = HashSet::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, line, format!("duplicate sample id `{id}`")));
        }
        let g = parse_group(&rec[1]).ok_or_else(|| {
            parse_err(path, line, format!("group `{}` is not one of 1/0, cancer/normal, case/control", &rec[1]))
        })?;
        for (k, cell) in rec.iter().skip(2).enumerate() {
            let v = if is_missing(cell) {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| {
                    parse_err(path, line, format!("non-numeric covariate `{}` value `{cell}`", covariate_names[k]))
                })?
            };
            covariates[k].push(v);
        }
        samples.push(id);
        group.push(g);
    }
    Ok(RawDesign {
        samples,
        group,
        covariate_names,
        covariates,
    })
}

/// Joins a matrix and a design by sample ID; matrix columns are reordered to
/// follow the design.
fn reconcile(m: RawMatrix, d: RawDesign, scale: Scale) -> Result<(MethylationMatrix, StudyDesign)> {
    let position: HashMap<&str, usize> = m.samples.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let design_ids: HashSet<&str> = d.samples.iter().map(String::as_str).collect();
    if let Some(s) = d.samples.iter().find(|s| !position.contains_key(s.as_str())) {
        return Err(Error::Reconcile(format!("design sample `{s}` is absent from the matrix")));
    }
    if let Some(s) = m.samples.iter().find(|s| !design_ids.contains(s.as_str())) {
        return Err(Error::Reconcile(format!("matrix sample `{s}` is absent from the design")));
    }
    let order: Vec<usize> = d.samples.iter().map(|s| position[s.as_str()]).collect();
    let n = m.samples.len();
    let mut values = Vec::with_capacity(m.values.len());
    for row in m.values.chunks_exact(n) {
        values.extend(order.iter().map(|&j| row[j]));
    }
    let matrix = MethylationMatrix::new(m.markers, values, n, scale)?;
    let mut design = StudyDesign::from_flags(d.group);
    if !d.covariate_names.is_empty() {
        design = design.with_covariates(d.covariate_names, d.covariates)?;
    }
    Ok((matrix, design))
}

/// Reads a matrix (header of sample IDs, first column marker IDs) and a design
/// (`sample_id`, `group`, then covariates), joined by sample ID.
pub fn ingest(matrix_path: &Path, design_path: &Path, scale: Scale) -> Result<(MethylationMatrix, StudyDesign)> {
    let m = read_matrix(open(matrix_path)?, delimiter_for(matrix_path), &matrix_path.display().to_string())?;
    let d = read_design(open(design_path)?, delimiter_for(design_path), &design_path.display().to_string())?;
    reconcile(m, d, scale)
}

/// [`ingest`] over in-memory text, for callers that already hold the files.
pub fn ingest_str(matrix: &str, design: &str, delimiter: u8, scale: Scale) -> Result<(MethylationMatrix, StudyDesign)> {
    let m = read_matrix(matrix.as_bytes(), delimiter, "<matrix>")?;
    let d = read_design(design.as_bytes(), delimiter, "<design>")?;
    reconcile(m, d, scale)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn tsv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().delimiter(b'\t').from_writer(out)
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub const RESULT_COLUMNS: [&str; 11] = [
    "marker_id",
    "test",
    "statistic",
    "p_value",
    "adjusted_p",
    "q_value",
    "effect_mean",
    "effect_var",
    "delta_beta_mean",
    "delta_beta_sd",
    "normal_beta_mean",
];

/// One row per marker and test. Floats are written in shortest round-trip form.
pub fn write_results<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = tsv_writer(out);
    w.write_record(RESULT_COLUMNS).map_err(io_err)?;
    for row in rows {
        let r = &row.result;
        w.write_record([
            r.marker_id.clone(),
            r.test.to_string(),
            r.statistic.to_string(),
            r.p_value.to_string(),
            fmt_opt(r.adjusted_p),
            fmt_opt(r.q_value),
            r.effect_mean.to_string(),
            r.effect_var.to_string(),
            row.delta_beta_mean.to_string(),
            row.delta_beta_sd.to_string(),
            row.normal_beta_mean.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a file written by [`write_results`].
pub fn read_results<R: Read>(input: R, path: &str) -> Result<Vec<ResultRow>> {
    let mut rdr = reader(input, b'\t');
    let mut records = rdr.records();
    match records.next() {
        Some(h) => {
            let h = h.map_err(|e| csv_err(path, e))?;
            if h.iter().ne(RESULT_COLUMNS) {
                return Err(parse_err(path, 1, "unexpected results header"));
            }
        }
        None => return Err(parse_err(path, 1, "empty results file")),
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != RESULT_COLUMNS.len() {
            return Err(parse_err(path, line, format!("expected {} fields", RESULT_COLUMNS.len())));
        }
        let num = |k: usize| -> Result<f64> {
            let cell = &rec[k];
            if cell == "NaN" {
                return Ok(f64::NAN);
            }
            cell.parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("bad {} `{cell}`", RESULT_COLUMNS[k])))
        };
        let opt = |k: usize| -> Result<Option<f64>> {
            if &rec[k] == "NA" {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        let test: TestKind = rec[1].parse().map_err(|e: Error| parse_err(path, line, e.to_string()))?;
        let mut result = TestResult::new(test, num(2)?, num(3)?, num(6)?, num(7)?).with_marker(&rec[0]);
        result.adjusted_p = opt(4)?;
        result.q_value = opt(5)?;
        rows.push(ResultRow {
            result,
            delta_beta_mean: num(8)?,
            delta_beta_sd: num(9)?,
            normal_beta_mean: num(10)?,
        });
    }
    Ok(rows)
}

pub fn read_results_file(path: &Path) -> Result<Vec<ResultRow>> {
    read_results(open(path)?, &path.display().to_string())
}

pub fn write_skipped<W: Write>(skipped: &[Skip], out: W) -> Result<()> {
    let mut w = tsv_writer(out);
    w.write_record(["marker_id", "test", "reason"]).map_err(io_err)?;
    for s in skipped {
        w.write_record([s.marker_id.as_str(), s.test.name(), s.reason.as_str()])
            .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Two columns, `key` and `value`.
pub fn write_summary<W: Write>(summary: &ScanSummary, out: W) -> Result<()> {
    let mut w = tsv_writer(out);
    w.write_record(["key", "value"]).map_err(io_err)?;
    for (k, v) in summary.entries() {
        w.write_record([k, v]).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}
