//! Missing-feature test: correlation between mimic-model and outcome-model
//! errors on held-out rows. A positive correlation suggests the black box
//! uses information the audit features do not carry.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{bin, AuditDataset};
use crate::distill::PairedEnsembles;
use crate::error::{Error, Result};
use crate::gam::sigmoid;
use crate::metrics::average_ranks;

pub const MIN_PAIRS: usize = 30;
pub const DEFAULT_RESAMPLES: usize = 1000;
/// Positive lower limits at or below this count only as weak evidence.
pub const WEAK_LOWER_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimicErrorScale {
    /// Same scale the mimic was trained on (logit of the calibrated
    /// probability when a calibration map is in use).
    #[default]
    Calibrated,
    Raw,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorPairs {
    pub mimic: Vec<f64>,
    pub outcome: Vec<f64>,
    pub row: Vec<usize>,
    pub fold: Vec<usize>,
    pub scale: MimicErrorScale,
    /// Labelled rows not in any outer test fold, hence excluded.
    pub never_held_out: usize,
    pub score_only_excluded: usize,
}

impl ErrorPairs {
    pub fn len(&self) -> usize {
        self.mimic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mimic.is_empty()
    }

    /// Pairs from externally produced predictions; no row or fold metadata.
    pub fn from_errors(mimic: Vec<f64>, outcome: Vec<f64>) -> Result<Self> {
        if mimic.len() != outcome.len() {
            return Err(Error::MalformedPairs(format!(
                "{} mimic errors vs {} outcome errors",
                mimic.len(),
                outcome.len()
            )));
        }
        if let Some(v) = mimic.iter().chain(&outcome).find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::MalformedPairs(format!("error value {v} is not a finite non-negative number")));
        }
        let n = mimic.len();
        Ok(ErrorPairs {
            mimic,
            outcome,
            row: (0..n).collect(),
            fold: vec![0; n],
            ..Default::default()
        })
    }

    /// Reads a headed CSV with `mimic_error` and `outcome_error` columns.
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&bytes)
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
        let headers = reader.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MalformedPairs(format!("missing column '{name}'")))
        };
        let (im, io) = (find("mimic_error")?, find("outcome_error")?);
        let (mut mimic, mut outcome) = (Vec::new(), Vec::new());
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let parse = |c: usize| {
                record
                    .get(c)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::MalformedPairs(format!("row {}: unparseable value", i + 1)))
            };
            mimic.push(parse(im)?);
            outcome.push(parse(io)?);
        }
        Self::from_errors(mimic, outcome)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,fold,mimic_error,outcome_error\n");
        for i in 0..self.len() {
            out.push_str(&format!("{},{},{},{}\n", self.row[i], self.fold[i], self.mimic[i], self.outcome[i]));
        }
        out
    }
}

/// Held-out errors of the paired ensembles: each labelled row is predicted by
/// the L models of the first outer fold that holds it out.
pub fn error_pairs(paired: &PairedEnsembles, data: &AuditDataset, scale: MimicErrorScale) -> Result<ErrorPairs> {
    let x = bin(data, &paired.schema)?;
    let first = paired.plan.first_test_fold();
    let targets = paired.mimic_targets(data);
    let mut by_fold: Vec<Vec<usize>> = vec![Vec::new(); paired.plan.outer];
    let mut pairs = ErrorPairs {
        scale,
        ..Default::default()
    };
    for (r, fold) in first.iter().enumerate() {
        match (data.is_labelled(r), fold) {
            (false, _) => pairs.score_only_excluded += 1,
            (true, None) => pairs.never_held_out += 1,
            (true, Some(k)) => by_fold[*k].push(r),
        }
    }
    for (k, rows) in by_fold.iter().enumerate() {
        let s = paired.mimic.fold_link(k, &x, rows, true)?;
        let o = paired.outcome.fold_link(k, &x, rows, true)?;
        let s = match (scale, &paired.calibration) {
            (MimicErrorScale::Raw, Some(map)) => map.invert(&s),
            _ => s,
        };
        for (i, &r) in rows.iter().enumerate() {
            let truth = match scale {
                MimicErrorScale::Calibrated => targets[r],
                MimicErrorScale::Raw => data.scores()[r],
            };
            let outcome = if data.outcomes()[r] == Some(true) { 1.0 } else { 0.0 };
            pairs.mimic.push((s[i] - truth).abs());
            pairs.outcome.push((sigmoid(o[i]) - outcome).abs());
            pairs.row.push(r);
            pairs.fold.push(k);
        }
    }
    // restore row order so downstream resampling does not depend on fold layout
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| pairs.row[i]);
    let pick = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
    pairs.mimic = pick(&pairs.mimic);
    pairs.outcome = pick(&pairs.outcome);
    pairs.fold = order.iter().map(|&i| pairs.fold[i]).collect();
    pairs.row = order.iter().map(|&i| pairs.row[i]).collect();
    Ok(pairs)
}

fn variance_is_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Number of inversions, counted while merge-sorting `v` in place.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k = k + mid - i;
    buf[k..n].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

fn tie_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as u64;
        total += t * (t - 1) / 2;
        i = j;
    }
    total
}

/// Kendall's tau-b in O(n log n) (Knight's merge-sort algorithm).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let n0 = (n as u64) * (n as u64 - 1) / 2;

    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let n1 = tie_pairs(&xs);
    let mut joint = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && x[order[j]] == x[order[i]] && y[order[j]] == y[order[i]] {
            j += 1;
        }
        let t = (j - i) as u64;
        joint += t * (t - 1) / 2;
        i = j;
    }

    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);
    let n2 = tie_pairs(&ys);

    let numerator = n0 as f64 - n1 as f64 - n2 as f64 + joint as f64 - 2.0 * swaps as f64;
    let denominator = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    (numerator / denominator).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PearsonInterval {
    #[default]
    Percentile,
    FisherZ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOptions {
    pub resamples: usize,
    pub seed: u64,
    pub pearson_interval: PearsonInterval,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        CorrelationOptions {
            resamples: DEFAULT_RESAMPLES,
            seed: 0,
            pearson_interval: PearsonInterval::Percentile,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Estimate {
    pub fn contains_zero(&self) -> bool {
        self.lower <= 0.0 && self.upper >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    EvidenceOfMissingFeatures,
    WeakEvidence,
    NoEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTestResult {
    pub n_pairs: usize,
    pub pearson: Estimate,
    pub spearman: Estimate,
    pub kendall: Estimate,
    pub resamples: usize,
    /// Resamples dropped because a margin came out constant.
    pub degenerate_resamples: usize,
    pub seed: u64,
    pub pearson_interval: PearsonInterval,
    pub verdict: Verdict,
}

impl CorrelationTestResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn verdict(estimates: [&Estimate; 3]) -> Verdict {
    if estimates.iter().all(|e| e.lower > WEAK_LOWER_LIMIT) {
        Verdict::EvidenceOfMissingFeatures
    } else if estimates.iter().any(|e| e.lower > 0.0) {
        Verdict::WeakEvidence
    } else {
        Verdict::NoEvidence
    }
}

pub fn correlation_test(pairs: &ErrorPairs, resamples: usize, seed: u64) -> Result<CorrelationTestResult> {
    correlation_test_with(
        pairs,
        &CorrelationOptions {
            resamples,
            seed,
            ..Default::default()
        },
    )
}

/// Point estimates with percentile-bootstrap 95% intervals over rows.
/// Resample `b` draws from its own ChaCha stream, so results do not depend on
/// the thread count.
pub fn correlation_test_with(pairs: &ErrorPairs, options: &CorrelationOptions) -> Result<CorrelationTestResult> {
    let n = pairs.len();
    if n < MIN_PAIRS {
        return Err(Error::TooFewPairs(n));
    }
    if variance_is_zero(&pairs.mimic) {
        return Err(Error::DegenerateMargin("mimic"));
    }
    if variance_is_zero(&pairs.outcome) {
        return Err(Error::DegenerateMargin("outcome"));
    }
    if options.resamples < 2 {
        return Err(Error::Config("need at least 2 bootstrap resamples".into()));
    }
    let (x, y) = (&pairs.mimic, &pairs.outcome);
    let point = [pearson(x, y), spearman(x, y), kendall_tau_b(x, y)];

    let draws: Vec<Option<[f64; 3]>> = (0..options.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let bx: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let by: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            if variance_is_zero(&bx) || variance_is_zero(&by) {
                return None;
            }
            Some([pearson(&bx, &by), spearman(&bx, &by), kendall_tau_b(&bx, &by)])
        })
        .collect();
    let kept: Vec<[f64; 3]> = draws.iter().flatten().copied().collect();
    if kept.len() < 2 {
        return Err(Error::DegenerateMargin("bootstrap resamples"));
    }

    let interval = |s: usize| {
        let mut v: Vec<f64> = kept.iter().map(|d| d[s]).collect();
        v.sort_by(f64::total_cmp);
        let estimate = point[s];
        // the percentile interval can miss a point estimate sitting at the
        // edge of a skewed bootstrap distribution; widen to include it
        Estimate {
            estimate,
            lower: quantile(&v, 0.025).min(estimate),
            upper: quantile(&v, 0.975).max(estimate),
        }
    };
    let pearson_est = match options.pearson_interval {
        PearsonInterval::Percentile => interval(0),
        PearsonInterval::FisherZ => {
            let z = point[0].clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh();
            let se = 1.0 / ((n as f64) - 3.0).sqrt();
            Estimate {
                estimate: point[0],
                lower: (z - 1.96 * se).tanh(),
                upper: (z + 1.96 * se).tanh(),
            }
        }
    };
    let spearman_est = interval(1);
    let kendall_est = interval(2);
    Ok(CorrelationTestResult {
        n_pairs: n,
        verdict: verdict([&pearson_est, &spearman_est, &kendall_est]),
        pearson: pearson_est,
        spearman: spearman_est,
        kendall: kendall_est,
        resamples: options.resamples,
        degenerate_resamples: options.resamples - kept.len(),
        seed: options.seed,
        pearson_interval: options.pearson_interval,
    })
}
