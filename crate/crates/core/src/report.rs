//! End-to-end audit runs and their output directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! report.json          deterministic summary of every stage
//! run_meta.json        timestamps and paths (excluded from report.json)
//! calibration.json     calibration decision, diagnostics and map
//! calibration/*.csv    diagnostics before/after calibration
//! models/              bag plan, schema, additive ensembles, linear baseline
//! curves/*.csv         per-feature curves and interaction heatmap data
//! plots/*.svg          per-feature and calibration plots
//! errors.csv           held-out error pairs of the missing-feature test
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::baseline::{linear_fidelity, train_paired_linear, DEFAULT_L2};
use crate::calibrate::{decide, CalibrationDecision, CalibrationMode, DEFAULT_LINEARITY_THRESHOLD};
use crate::compare::{summarize, Comparison};
use crate::data::{fit_schema, load_csv, AuditDataset, SchemaConfig};
use crate::distill::{fidelity, plan_bags, train_paired, FoldMetrics, DEFAULT_INNER_FOLDS, DEFAULT_OUTER_FOLDS};
use crate::error::{Error, ErrorClass};
use crate::gam::TrainConfig;
use crate::missing::{
    correlation_test_with, error_pairs, CorrelationOptions, CorrelationTestResult, ErrorPairs, MimicErrorScale,
    PearsonInterval, DEFAULT_RESAMPLES,
};
use crate::plot::{calibration_chart, feature_chart};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Calibrate,
    Plan,
    Train,
    Fidelity,
    Compare,
    Baseline,
    MissingTest,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned));
        f.write_str(&s.unwrap_or_default())
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl StageError {
    pub fn class(&self) -> ErrorClass {
        self.error.class()
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T, Error> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub schema: SchemaConfig,
    pub calibration: CalibrationMode,
    pub calibration_threshold: f64,
    pub outer: usize,
    pub inner: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub linear_l2: f64,
    pub resamples: usize,
    pub error_scale: MimicErrorScale,
    pub pearson_interval: PearsonInterval,
    /// Not echoed into `report.json`, so identical runs into different
    /// directories still produce identical reports.
    #[serde(skip)]
    pub out: PathBuf,
}

impl RunConfig {
    pub fn new(data: impl Into<PathBuf>, schema: SchemaConfig, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            data: data.into(),
            schema,
            calibration: CalibrationMode::Auto,
            calibration_threshold: DEFAULT_LINEARITY_THRESHOLD,
            outer: DEFAULT_OUTER_FOLDS,
            inner: DEFAULT_INNER_FOLDS,
            seed: 0,
            train: TrainConfig::default(),
            linear_l2: DEFAULT_L2,
            resamples: DEFAULT_RESAMPLES,
            error_scale: MimicErrorScale::Calibrated,
            pearson_interval: PearsonInterval::Percentile,
            out: out.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub fingerprint: String,
    pub rows: usize,
    pub labelled_rows: usize,
    pub score_only_rows: usize,
    pub rejected_rows: usize,
    pub features: Vec<String>,
}

impl DataSummary {
    fn of(data: &AuditDataset) -> Self {
        DataSummary {
            fingerprint: data.fingerprint(),
            rows: data.n_rows(),
            labelled_rows: data.n_rows() - data.score_only_rows(),
            score_only_rows: data.score_only_rows(),
            rejected_rows: data.rejected_rows,
            features: data.feature_names(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityTable {
    pub gam: FoldMetrics,
    pub gam_interactions: Option<FoldMetrics>,
    pub linear: FoldMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: String,
    pub discrepancy: f64,
    pub significant_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingFeatureSection {
    pub pairs: usize,
    pub never_held_out: usize,
    pub score_only_excluded: usize,
    pub scale: MimicErrorScale,
    pub result: Option<CorrelationTestResult>,
    /// Why the test could not run (degenerate margins, too few pairs).
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub format_version: u32,
    pub config: RunConfig,
    pub data: DataSummary,
    pub calibration: CalibrationDecision,
    pub fidelity: FidelityTable,
    pub ranking: Vec<RankedFeature>,
    /// Per-feature curves. Interaction surfaces live in `surface_files`.
    pub comparison: Comparison,
    pub surface_files: Vec<String>,
    pub missing_features: MissingFeatureSection,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunMeta {
    command: String,
    out: PathBuf,
    started_unix: u64,
    finished_unix: u64,
    version: String,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), StageError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).at(Stage::Write)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e)).at(Stage::Write)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from).at(Stage::Write)?;
    write(path, text + "\n")
}

fn write_meta(out: &Path, command: &str, started: u64) -> Result<(), StageError> {
    write_json(
        &out.join("run_meta.json"),
        &RunMeta {
            command: command.into(),
            out: out.to_path_buf(),
            started_unix: started,
            finished_unix: now(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
    )
}

/// File-name-safe version of a feature name, prefixed with its index so
/// distinct features never collide.
fn file_stem(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:02}_{clean}")
}

fn labelled(data: &AuditDataset) -> (Vec<f64>, Vec<bool>) {
    (0..data.n_rows())
        .filter_map(|r| data.outcomes()[r].map(|o| (data.scores()[r], o)))
        .unzip()
}

fn calibrate_stage(data: &AuditDataset, cfg: &RunConfig) -> Result<CalibrationDecision, StageError> {
    let (scores, outcomes) = labelled(data);
    let decision = decide(&scores, &outcomes, cfg.calibration, cfg.calibration_threshold).at(Stage::Calibrate)?;
    let out = &cfg.out;
    write_json(&out.join("calibration.json"), &decision)?;
    write(&out.join("calibration/diagnostics_before.csv"), decision.before.to_csv())?;
    write(
        &out.join("plots/calibration_before.svg"),
        calibration_chart("before calibration", &decision.before).to_svg(),
    )?;
    if let Some(after) = &decision.after {
        write(&out.join("calibration/diagnostics_after.csv"), after.to_csv())?;
        write(
            &out.join("plots/calibration_after.svg"),
            calibration_chart("after calibration", after).to_svg(),
        )?;
    }
    Ok(decision)
}

fn load(cfg: &RunConfig) -> Result<AuditDataset, StageError> {
    load_csv(&cfg.data, &cfg.schema).at(Stage::Load)
}

/// Loads the data, applies the calibration policy and writes the map,
/// diagnostics and plots.
pub fn run_calibrate(cfg: &RunConfig) -> Result<CalibrationDecision, StageError> {
    let started = now();
    let data = load(cfg)?;
    let decision = calibrate_stage(&data, cfg)?;
    write_meta(&cfg.out, "calibrate", started)?;
    Ok(decision)
}

/// Full audit. Artifacts of completed stages stay on disk when a later stage
/// fails.
pub fn run_audit(cfg: &RunConfig) -> Result<AuditReport, StageError> {
    let started = now();
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e)).at(Stage::Write)?;
    let data = load(cfg)?;
    let mut warnings = Vec::new();
    if data.rejected_rows > 0 {
        warnings.push(format!("{} rows dropped for unparseable scores", data.rejected_rows));
    }

    let decision = calibrate_stage(&data, cfg)?;
    if cfg.calibration == CalibrationMode::Off && decision.before.linearity_residual > cfg.calibration_threshold {
        warnings.push(decision.reason.clone());
    }

    let plan = plan_bags(data.n_rows(), cfg.outer, cfg.inner, cfg.seed).at(Stage::Plan)?;
    let schema = fit_schema(&data, cfg.schema.max_bins).at(Stage::Plan)?;
    write_json(&out.join("models/plan.json"), &plan)?;
    write(&out.join("models/schema.json"), schema.to_json().at(Stage::Write)?)?;

    let mut train = cfg.train.clone();
    train.seed = cfg.seed;
    let paired = train_paired(&data, &schema, decision.map.as_ref(), &plan, &train).at(Stage::Train)?;
    write(&out.join("models/ensembles.json"), paired.to_json().at(Stage::Write)?)?;

    let fid = fidelity(&paired, &data).at(Stage::Fidelity)?;
    for k in &fid.main_effects.skipped_auc_folds {
        warnings.push(format!("outer fold {k} has a single outcome class; AUC skipped"));
    }

    let mut comparison = summarize(&paired).at(Stage::Compare)?;
    for (fc, bins) in comparison.features.iter().zip(&schema.features) {
        let stem = file_stem(fc.feature, &fc.name);
        write(&out.join(format!("curves/{stem}.csv")), fc.to_csv())?;
        write(&out.join(format!("plots/{stem}.svg")), feature_chart(fc, bins).to_svg())?;
        if fc.difference.floored.iter().any(|&f| f) {
            warnings.push(format!("{}: negative difference variance floored at 0", fc.name));
        }
    }
    // surfaces are large; the report points at their CSVs instead of inlining them
    let mut surface_files = Vec::new();
    for s in std::mem::take(&mut comparison.surfaces) {
        let stem = format!("surface_{}_{}", file_stem(s.features.0, &s.names.0), file_stem(s.features.1, &s.names.1));
        let file = format!("curves/{stem}.csv");
        write(&out.join(&file), s.to_csv())?;
        surface_files.push(file);
    }

    let linear = train_paired_linear(&data, &schema, decision.map.as_ref(), &plan, cfg.linear_l2).at(Stage::Baseline)?;
    write_json(&out.join("models/linear.json"), &linear)?;
    let linear_metrics = linear_fidelity(&linear, &data, decision.map.as_ref(), &plan).at(Stage::Baseline)?;

    let pairs = error_pairs(&paired, &data, cfg.error_scale).at(Stage::MissingTest)?;
    write(&out.join("errors.csv"), pairs.to_csv())?;
    let options = CorrelationOptions {
        resamples: cfg.resamples,
        seed: cfg.seed,
        pearson_interval: cfg.pearson_interval,
    };
    let (result, failure) = match correlation_test_with(&pairs, &options) {
        Ok(r) => (Some(r), None),
        // a degenerate margin is a finding about the data, not a failed run
        Err(e) if e.class() == ErrorClass::Degenerate => {
            warnings.push(format!("missing-feature test not run: {e}"));
            (None, Some(e.to_string()))
        }
        Err(e) => return Err(StageError { stage: Stage::MissingTest, error: e }),
    };
    if let Some(r) = &result {
        write(&out.join("missing_test.json"), r.to_json().at(Stage::Write)? + "\n")?;
    }

    let ranking = comparison
        .ranking
        .iter()
        .map(|&j| {
            let fc = &comparison.features[j];
            RankedFeature {
                feature: fc.name.clone(),
                discrepancy: fc.discrepancy,
                significant_bins: fc.difference.significant.iter().filter(|&&s| s).count(),
            }
        })
        .collect();
    let report = AuditReport {
        format_version: REPORT_FORMAT_VERSION,
        config: cfg.clone(),
        data: DataSummary::of(&data),
        calibration: decision,
        fidelity: FidelityTable {
            gam: fid.main_effects,
            gam_interactions: fid.with_interactions,
            linear: linear_metrics,
        },
        ranking,
        comparison,
        surface_files,
        missing_features: MissingFeatureSection {
            pairs: pairs.len(),
            never_held_out: pairs.never_held_out,
            score_only_excluded: pairs.score_only_excluded,
            scale: pairs.scale,
            result,
            failure,
        },
        warnings,
    };
    write_json(&out.join("report.json"), &report)?;
    write_meta(out, "audit", started)?;
    Ok(report)
}

/// Standalone missing-feature test on externally computed error pairs.
/// Writes `missing_test.json` into `out`.
pub fn run_test_missing(
    errors_csv: &Path,
    options: &CorrelationOptions,
    out: &Path,
) -> Result<CorrelationTestResult, StageError> {
    let started = now();
    let pairs = ErrorPairs::from_csv_path(errors_csv).at(Stage::Load)?;
    let result = correlation_test_with(&pairs, options).at(Stage::MissingTest)?;
    write(&out.join("missing_test.json"), result.to_json().at(Stage::Write)? + "\n")?;
    write_meta(out, "test-missing", started)?;
    Ok(result)
}
