use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use distill_audit::calibrate::{CalibrationMode, DEFAULT_LINEARITY_THRESHOLD};
use distill_audit::data::SchemaConfig;
use distill_audit::gam::TrainConfig;
use distill_audit::missing::{CorrelationOptions, MimicErrorScale, PearsonInterval, DEFAULT_RESAMPLES};
use distill_audit::report::{run_audit, run_calibrate, run_test_missing, RunConfig, StageError};
use distill_audit::synth::SyntheticKind;
use distill_audit::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "distill-audit", version, about = "Audit a black-box risk score with distilled additive models")]
struct Cli {
    /// Worker threads for bag training and bootstrap (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check score linearity on the logit scale and fit a calibration map.
    Calibrate(CalibrateArgs),
    /// Full audit: calibrate, train paired ensembles, compare, test for
    /// missing features.
    Audit(AuditArgs),
    /// Missing-feature correlation test on a CSV of error pairs.
    TestMissing(TestMissingArgs),
    /// Write a synthetic audit dataset as CSV.
    GenSynthetic(GenArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON schema config (columns, types, delimiter, max_bins).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    score_col: Option<String>,
    #[arg(long)]
    outcome_col: Option<String>,
    #[arg(long, value_enum, default_value_t = Calibration::Auto)]
    calibration: Calibration,
    /// Linearity residual above which auto mode calibrates.
    #[arg(long, default_value_t = DEFAULT_LINEARITY_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Calibration {
    Auto,
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Calibrated,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interval {
    Percentile,
    FisherZ,
}

impl From<Interval> for PearsonInterval {
    fn from(i: Interval) -> Self {
        match i {
            Interval::Percentile => PearsonInterval::Percentile,
            Interval::FisherZ => PearsonInterval::FisherZ,
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "K", default_value_t = 5)]
    outer: usize,
    #[arg(long = "L", default_value_t = 5)]
    inner: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Interaction pairs per model.
    #[arg(long, default_value_t = 0)]
    pairs: usize,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    max_leaves: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Ridge penalty of the linear baseline.
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long, value_enum, default_value_t = Scale::Calibrated)]
    error_scale: Scale,
    #[arg(long, value_enum, default_value_t = Interval::Percentile)]
    pearson_interval: Interval,
}

#[derive(Args)]
struct TestMissingArgs {
    /// CSV with `mimic_error` and `outcome_error` columns.
    #[arg(long)]
    errors: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Interval::Percentile)]
    pearson_interval: Interval,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: SyntheticKind,
    #[arg(long, default_value_t = 10_000)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "score")]
    score_col: String,
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> Result<SyntheticKind, String> {
    SyntheticKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = SyntheticKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown generator '{s}', expected one of: {}", names.join(", "))
    })
}

enum Failure {
    Stage(StageError),
    Plain(Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        let class = match self {
            Failure::Stage(e) => e.class(),
            Failure::Plain(e) => e.class(),
        };
        match class {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Training => 4,
            ErrorClass::Degenerate => 5,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Stage(e) => e.to_string(),
            Failure::Plain(e) => e.to_string(),
        }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::Stage(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Plain(e)
    }
}

fn schema_config(args: &DataArgs) -> Result<SchemaConfig, Error> {
    let mut schema = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Config(format!("config file {} does not exist", path.display())));
            }
            SchemaConfig::from_json_file(path)?
        }
        None => SchemaConfig::new("score", "outcome"),
    };
    if let Some(s) = &args.score_col {
        schema.score_column = s.clone();
    }
    if let Some(o) = &args.outcome_col {
        schema.outcome_column = o.clone();
    }
    Ok(schema)
}

fn run_config(args: &DataArgs) -> Result<RunConfig, Error> {
    if !args.data.is_file() {
        return Err(Error::Config(format!("data file {} does not exist", args.data.display())));
    }
    let mut cfg = RunConfig::new(&args.data, schema_config(args)?, &args.out);
    cfg.calibration = match args.calibration {
        Calibration::Auto => CalibrationMode::Auto,
        Calibration::On => CalibrationMode::On,
        Calibration::Off => CalibrationMode::Off,
    };
    cfg.calibration_threshold = args.threshold;
    Ok(cfg)
}

fn calibrate(args: &CalibrateArgs) -> Result<(), Failure> {
    let cfg = run_config(&args.data)?;
    let d = run_calibrate(&cfg)?;
    println!(
        "calibrated: {} ({}); linearity residual before {:.4}{}",
        d.calibrated,
        d.reason,
        d.before.linearity_residual,
        d.after
            .as_ref()
            .map_or(String::new(), |a| format!(", after {:.4}", a.linearity_residual))
    );
    println!("wrote {}", cfg.out.join("calibration.json").display());
    Ok(())
}

fn audit(args: &AuditArgs) -> Result<(), Failure> {
    let mut cfg = run_config(&args.data)?;
    cfg.outer = args.outer;
    cfg.inner = args.inner;
    cfg.seed = args.seed;
    let defaults = TrainConfig::default();
    cfg.train = TrainConfig {
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        max_rounds: args.max_rounds.unwrap_or(defaults.max_rounds),
        max_leaves: args.max_leaves.unwrap_or(defaults.max_leaves),
        patience: args.patience.unwrap_or(defaults.patience),
        interaction_pairs: args.pairs,
        seed: args.seed,
    };
    if let Some(l2) = args.l2 {
        cfg.linear_l2 = l2;
    }
    cfg.resamples = args.resamples;
    cfg.error_scale = match args.error_scale {
        Scale::Calibrated => MimicErrorScale::Calibrated,
        Scale::Raw => MimicErrorScale::Raw,
    };
    cfg.pearson_interval = args.pearson_interval.into();
    let report = run_audit(&cfg)?;

    let fmt = |m: &Option<distill_audit::metrics::MeanSpread>| {
        m.map_or("n/a".to_owned(), |m| format!("{:.4} +- {:.4}", m.mean, m.sd))
    };
    println!("calibrated: {} ({})", report.calibration.calibrated, report.calibration.reason);
    println!(
        "gam mimic RMSE {}, outcome AUC {}",
        fmt(&report.fidelity.gam.rmse),
        fmt(&report.fidelity.gam.auc)
    );
    if let Some(gi) = &report.fidelity.gam_interactions {
        println!("gam+pairs mimic RMSE {}, outcome AUC {}", fmt(&gi.rmse), fmt(&gi.auc));
    }
    println!(
        "linear mimic RMSE {}, outcome AUC {}",
        fmt(&report.fidelity.linear.rmse),
        fmt(&report.fidelity.linear.auc)
    );
    println!("top discrepancies:");
    for r in report.ranking.iter().take(5) {
        println!("  {:<24} {:.4} ({} significant bins)", r.feature, r.discrepancy, r.significant_bins);
    }
    match (&report.missing_features.result, &report.missing_features.failure) {
        (Some(t), _) => println!(
            "missing-feature test: {:?}; pearson [{:.3}, {:.3}], spearman [{:.3}, {:.3}], kendall [{:.3}, {:.3}]",
            t.verdict, t.pearson.lower, t.pearson.upper, t.spearman.lower, t.spearman.upper, t.kendall.lower, t.kendall.upper
        ),
        (None, Some(f)) => println!("missing-feature test not run: {f}"),
        (None, None) => {}
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {}", cfg.out.join("report.json").display());
    Ok(())
}

fn test_missing(args: &TestMissingArgs) -> Result<(), Failure> {
    let options = CorrelationOptions {
        resamples: args.resamples,
        seed: args.seed,
        pearson_interval: args.pearson_interval.into(),
    };
    let r = run_test_missing(&args.errors, &options, &args.out)?;
    for (name, e) in [("pearson", r.pearson), ("spearman", r.spearman), ("kendall", r.kendall)] {
        println!("{name:<9} {:.4} [{:.4}, {:.4}]", e.estimate, e.lower, e.upper);
    }
    println!("verdict: {:?}", r.verdict);
    Ok(())
}

fn gen_synthetic(args: &GenArgs) -> Result<(), Failure> {
    let data = args.kind.generate(args.rows, args.seed)?;
    let bytes = data.to_csv(&args.score_col, &args.outcome_col)?;
    write_file(&args.out, &bytes)?;
    println!("wrote {} rows of {} to {}", data.n_rows(), args.kind.name(), args.out.display());
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(jobs);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(2);
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Audit(a) => audit(a),
        Command::TestMissing(a) => test_missing(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
