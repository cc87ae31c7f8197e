use dmvc::pipeline::io::{ingest, ingest_str, read_results, write_results};
use dmvc::pipeline::{scan, ScanConfig};
use dmvc::simulation::replicate_rng;
use dmvc::{Scale, TestKind};
use rand::Rng;

const SAMPLES: usize = 40;

fn matrix_text(order: &[usize], delim: char) -> String {
    let mut rng = replicate_rng(11, 0);
    let values: Vec<Vec<f64>> = (0..30)
        .map(|m| {
            (0..SAMPLES)
                .map(|s| {
                    let shift = if m < 3 && s < SAMPLES / 2 { 0.2 } else { 0.0 };
                    (0.3 + shift + 0.15 * rng.random::<f64>()).min(0.99)
                })
                .collect()
        })
        .collect();
    let mut text = String::from("marker");
    for &s in order {
        text.push_str(&format!("{delim}s{s}"));
    }
    text.push('\n');
    for (m, row) in values.iter().enumerate() {
        text.push_str(&format!("cg{m:03}"));
        for &s in order {
            text.push_str(&format!("{delim}{}", row[s]));
        }
        text.push('\n');
    }
    text
}

fn design_text(delim: char) -> String {
    let mut text = format!("sample{delim}group\n");
    for s in 0..SAMPLES {
        text.push_str(&format!("s{s}{delim}{}\n", if s < SAMPLES / 2 { "case" } else { "control" }));
    }
    text
}

fn config() -> ScanConfig {
    ScanConfig {
        tests: TestKind::ALL.to_vec(),
        fdr_q: Some(0.1),
        sd_filter: 0.0,
        ..Default::default()
    }
}

#[test]
fn results_survive_a_write_read_cycle() {
    let order: Vec<usize> = (0..SAMPLES).collect();
    let (m, d) = ingest_str(&matrix_text(&order, '\t'), &design_text('\t'), b'\t', Scale::Beta).unwrap();
    let out = scan(&m, &d, &config()).unwrap();
    assert_eq!(out.rows.len(), 30 * TestKind::ALL.len());
    let mut buf = Vec::new();
    write_results(&out.rows, &mut buf).unwrap();
    let back = read_results(buf.as_slice(), "<results>").unwrap();
    assert_eq!(back, out.rows);
}

#[test]
fn sample_order_in_the_matrix_does_not_matter() {
    let order: Vec<usize> = (0..SAMPLES).collect();
    let mut shuffled: Vec<usize> = (0..SAMPLES).rev().collect();
    shuffled.rotate_left(7);
    let (m1, d1) = ingest_str(&matrix_text(&order, '\t'), &design_text('\t'), b'\t', Scale::Beta).unwrap();
    let (m2, d2) = ingest_str(&matrix_text(&shuffled, '\t'), &design_text('\t'), b'\t', Scale::Beta).unwrap();
    assert_eq!(scan(&m1, &d1, &config()).unwrap().rows, scan(&m2, &d2, &config()).unwrap().rows);
}

#[test]
fn csv_files_match_tsv_strings() {
    let order: Vec<usize> = (0..SAMPLES).collect();
    let dir = tempfile::tempdir().unwrap();
    let mp = dir.path().join("m.csv");
    let dp = dir.path().join("d.csv");
    std::fs::write(&mp, matrix_text(&order, ',')).unwrap();
    std::fs::write(&dp, design_text(',')).unwrap();
    let (m1, d1) = ingest(&mp, &dp, Scale::Beta).unwrap();
    let (m2, d2) = ingest_str(&matrix_text(&order, '\t'), &design_text('\t'), b'\t', Scale::Beta).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(d1, d2);
}

#[test]
fn shifted_markers_lead_the_welch_ranking() {
    let order: Vec<usize> = (0..SAMPLES).collect();
    let (m, d) = ingest_str(&matrix_text(&order, '\t'), &design_text('\t'), b'\t', Scale::Beta).unwrap();
    let out = scan(&m, &d, &config()).unwrap();
    let mut welch: Vec<_> = out.rows.iter().filter(|r| r.result.test == TestKind::Welch).collect();
    welch.sort_by(|a, b| a.result.p_value.total_cmp(&b.result.p_value));
    let mut top: Vec<&str> = welch[..3].iter().map(|r| r.result.marker_id.as_str()).collect();
    top.sort_unstable();
    assert_eq!(top, ["cg000", "cg001", "cg002"]);
    assert!(welch[..3].iter().all(|r| r.result.adjusted_p.unwrap() < 0.05 && r.delta_beta_mean > 0.1));
}
