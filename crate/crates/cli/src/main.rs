use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use dmvc::pipeline::{self, io as pio, PlotKind, ScanConfig};
use dmvc::simulation::{self, GenerateOptions, GridOptions, OutlierMode, Preset, SpreadParam};
use dmvc::{Scale, SimulationKind, SimulationSpec, TestKind};

#[derive(Parser)]
#[command(name = "dmvc", version, about = "Differential mean and variability tests for methylation data")]
struct Cli {
    /// Key-value config file (`key = value` per line); flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test every marker of a matrix and write result tables.
    Scan(ScanArgs),
    /// Run null or power simulations.
    Simulate(SimulateArgs),
    /// Turn a results table into volcano or QQ plot data.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    design: Option<PathBuf>,
    /// Input scale: beta or m.
    #[arg(long)]
    scale: Option<String>,
    /// Comma-separated tests (welch, levene, 2df-naive, 2df-corrected, h1b, h1c, pauc) or `all`.
    #[arg(long)]
    tests: Option<String>,
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long)]
    fwer: Option<f64>,
    #[arg(long)]
    fdr: Option<f64>,
    #[arg(long = "sd-filter")]
    sd_filter: Option<f64>,
    #[arg(long = "low-beta")]
    low_beta: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the naive covariance in the constrained tests.
    #[arg(long = "naive-constrained")]
    naive_constrained: bool,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// table1, figure4 or figure5.
    #[arg(long)]
    preset: Option<String>,
    /// Data model when no preset is given.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long = "n-cases")]
    n_cases: Option<usize>,
    #[arg(long = "n-controls")]
    n_controls: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tests: Option<String>,
    /// Comma-separated p-value thresholds.
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    t0: Option<f64>,
    /// Read the second normal parameter as `variance` or `sd`.
    #[arg(long)]
    spread: Option<String>,
    /// Outlier scheme for the beta-outlier null: `bernoulli` or `fixed`.
    #[arg(long)]
    outliers: Option<String>,
    /// Markers per QQ experiment (figure4 preset).
    #[arg(long = "qq-markers")]
    qq_markers: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// A results.tsv written by `scan`.
    #[arg(long)]
    results: Option<PathBuf>,
    /// volcano or qq.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    fwer: Option<f64>,
    /// Output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Parse(anyhow::Error),
}

impl From<dmvc::Error> for Failure {
    fn from(e: dmvc::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Parse(e.into())
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(anyhow!(msg.into()))
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Values from the config file, looked up by long flag name.
#[derive(Default)]
struct Settings {
    values: HashMap<String, String>,
    source: String,
}

impl Settings {
    fn load(path: Option<&Path>) -> Outcome<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::Parse)?;
        let mut values = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Failure::Parse(anyhow!("{}:{}: expected `key = value`", path.display(), n + 1))
            })?;
            values.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        Ok(Self {
            values,
            source: path.display().to_string(),
        })
    }

    /// The flag value if given, else the config value, else `None`.
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Outcome<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| invalid(format!("{}: bad value `{raw}` for `{key}`: {e}", self.source))),
        }
    }

    fn flag(&self, set: bool, key: &str) -> Outcome<bool> {
        Ok(set || self.pick::<bool>(None, key)?.unwrap_or(false))
    }
}

fn parse_tests(list: &str) -> Outcome<Vec<TestKind>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(TestKind::ALL.to_vec());
    }
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<TestKind>().map_err(Failure::from))
        .collect()
}

fn parse_list<T: FromStr>(list: &str, what: &str) -> Outcome<Vec<T>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<T>().map_err(|_| invalid(format!("bad {what} `{s}`"))))
        .collect()
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Failure::Parse)
}

fn run_scan(args: ScanArgs, cfg: &Settings) -> Outcome<()> {
    let matrix = cfg.pick(args.matrix, "matrix")?.ok_or_else(|| invalid("--matrix is required"))?;
    let design = cfg.pick(args.design, "design")?.ok_or_else(|| invalid("--design is required"))?;
    let out_dir = cfg.pick(args.out_dir, "out-dir")?.unwrap_or_else(|| PathBuf::from("."));
    let scale: Scale = cfg.pick(args.scale, "scale")?.unwrap_or_else(|| "beta".into()).parse()?;
    let defaults = ScanConfig::default();
    let mut config = ScanConfig {
        tests: match cfg.pick(args.tests, "tests")? {
            Some(list) => parse_tests(&list)?,
            None => defaults.tests.clone(),
        },
        t0: cfg.pick(args.t0, "t0")?.unwrap_or(defaults.t0),
        fwer_alpha: cfg.pick(args.fwer, "fwer")?.unwrap_or(defaults.fwer_alpha),
        fdr_q: cfg.pick(args.fdr, "fdr")?,
        sd_filter: cfg.pick(args.sd_filter, "sd-filter")?.unwrap_or(defaults.sd_filter),
        low_beta_threshold: cfg.pick(args.low_beta, "low-beta")?.unwrap_or(defaults.low_beta_threshold),
        threads: cfg.pick(args.threads, "threads")?.unwrap_or(defaults.threads),
        seed: cfg.pick(args.seed, "seed")?.unwrap_or(defaults.seed),
        ..defaults
    };
    if cfg.flag(args.naive_constrained, "naive-constrained")? {
        config.settings.constrained_cov = dmvc::CovarianceKind::Naive;
    }
    config.check()?;
    let (m, d) = pio::ingest(&matrix, &design, scale)?;
    log::info!("read {} markers x {} samples", m.n_markers(), m.n_samples());
    let out = pipeline::scan(&m, &d, &config)?;
    pipeline::write_outputs(&out, &config, &out_dir)?;
    let s = &out.summary;
    println!(
        "{} markers: {} filtered, {} tested, {} skipped; results in {}",
        s.markers_input,
        s.markers_filtered,
        s.markers_tested,
        s.markers_skipped,
        out_dir.display()
    );
    Ok(())
}

fn run_simulate(args: SimulateArgs, cfg: &Settings) -> Outcome<()> {
    let seed = cfg.pick(args.seed, "seed")?.unwrap_or(1);
    let replicates = cfg.pick(args.replicates, "replicates")?;
    let preset: Option<Preset> = cfg.pick(args.preset, "preset")?.map(|p| p.parse()).transpose()?;
    let specs = match preset {
        Some(p) => p.specs_with(seed, replicates),
        None => {
            let kind: SimulationKind = cfg
                .pick(args.kind, "kind")?
                .ok_or_else(|| invalid("either --preset or --kind is required"))?
                .parse()?;
            let n_cases = cfg.pick(args.n_cases, "n-cases")?.unwrap_or(25);
            let n_controls = cfg.pick(args.n_controls, "n-controls")?.unwrap_or(n_cases);
            let tau = cfg.pick(args.tau, "tau")?.unwrap_or(0.0);
            vec![SimulationSpec::new(kind, n_cases, n_controls, tau, replicates.unwrap_or(50_000), seed)?]
        }
    };
    let tests = match cfg.pick(args.tests, "tests")? {
        Some(list) => parse_tests(&list)?,
        None => preset.map_or_else(|| TestKind::ALL.to_vec(), Preset::tests),
    };
    let thresholds: Vec<f64> = match cfg.pick(args.thresholds, "thresholds")? {
        Some(list) => parse_list(&list, "threshold")?,
        None => preset.map_or_else(|| vec![0.05, 1e-3], Preset::thresholds),
    };
    let mut opts = GridOptions {
        generate: GenerateOptions {
            spread: match cfg.pick(args.spread, "spread")?.as_deref() {
                None | Some("variance") => SpreadParam::Variance,
                Some("sd") => SpreadParam::Sd,
                Some(other) => return Err(invalid(format!("unknown spread `{other}`"))),
            },
            outliers: match cfg.pick(args.outliers, "outliers")?.as_deref() {
                None | Some("bernoulli") => OutlierMode::Bernoulli,
                Some("fixed") => OutlierMode::Fixed,
                Some(other) => return Err(invalid(format!("unknown outlier mode `{other}`"))),
            },
            ..Default::default()
        },
        ..Default::default()
    };
    if let Some(t0) = cfg.pick(args.t0, "t0")? {
        opts.settings.t0 = t0;
    }
    let threads = cfg.pick(args.threads, "threads")?.unwrap_or(1);
    let out_dir = cfg.pick(args.out_dir, "out-dir")?.unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .map_err(Failure::Parse)?;

    if preset == Some(Preset::Figure4) {
        let markers = cfg.pick(args.qq_markers, "qq-markers")?.or(replicates).unwrap_or(500_000);
        for test in &tests {
            let points = simulation::with_threads(threads, || simulation::qq_experiment(markers, &specs[0], *test, &opts))??;
            let path = out_dir.join(format!("qq_{}.tsv", test.name()));
            let mut w = create(&path)?;
            writeln!(w, "expected\tobserved\tband_low\tband_high").map_err(|e| Failure::Parse(e.into()))?;
            let m = points.len();
            for (i, q) in points.iter().enumerate() {
                let (lo, hi) = simulation::uniform_order_band(i + 1, m, 0.95);
                writeln!(w, "{}\t{}\t{}\t{}", q.expected, q.observed, -hi.log10(), -lo.log10())
                    .map_err(|e| Failure::Parse(e.into()))?;
            }
            println!("{test}: {m} points in {}", path.display());
        }
        return Ok(());
    }

    let reports = simulation::with_threads(threads, || simulation::run_grid(&specs, &tests, &thresholds, &opts))??;
    simulation::write_reports_tsv(&reports, create(&out_dir.join("simulation.tsv"))?)?;
    fs::write(out_dir.join("simulation.json"), simulation::reports_json(&reports))
        .context("writing simulation.json")
        .map_err(Failure::Parse)?;
    for r in &reports {
        for t in &r.tests {
            let rates: Vec<String> = t.rates.iter().map(|e| format!("{}@{}", e.rate, e.threshold)).collect();
            println!(
                "{} {}/{} tau={} {}: {}",
                r.spec.kind,
                r.spec.n_cases,
                r.spec.n_controls,
                r.spec.tau,
                t.test,
                rates.join(" ")
            );
        }
    }
    Ok(())
}

fn run_plot(args: PlotArgs, cfg: &Settings) -> Outcome<()> {
    let results = cfg.pick(args.results, "results")?.ok_or_else(|| invalid("--results is required"))?;
    let kind: PlotKind = cfg.pick(args.kind, "kind")?.ok_or_else(|| invalid("--kind is required"))?.parse()?;
    let fwer = cfg.pick(args.fwer, "fwer")?.unwrap_or(0.05);
    if !(fwer > 0.0 && fwer < 1.0) {
        return Err(invalid(format!("fwer must lie in (0, 1), got {fwer}")));
    }
    let rows = pio::read_results_file(&results)?;
    match cfg.pick(args.out, "out")? {
        Some(path) => pipeline::emit_plots(&rows, kind, fwer, create(&path)?)?,
        None => pipeline::emit_plots(&rows, kind, fwer, std::io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = Settings::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Scan(a) => run_scan(a, &cfg),
        Command::Simulate(a) => run_simulate(a, &cfg),
        Command::PlotData(a) => run_plot(a, &cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Parse(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
