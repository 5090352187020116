//! Monotone recalibration of raw risk scores onto the logit scale.
//!
//! The map is a pool-adjacent-violators fit of the outcome on the score: a
//! non-decreasing step function of empirical probabilities, clamped away from
//! 0 and 1 by `1 / (2T)` and then taken to logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gam::logit;

pub const DEFAULT_LINEARITY_THRESHOLD: f64 = 0.15;
pub const DIAGNOSTIC_BUCKETS: usize = 20;
const HISTOGRAM_BINS: usize = 20;

/// A block of consecutive (sorted) points sharing one fitted value.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotonicBlock {
    pub start: usize,
    pub end: usize,
    pub weight: f64,
    pub value: f64,
}

/// Weighted least-squares non-decreasing fit of `y` (already in x order) by
/// pool-adjacent-violators. Blocks are contiguous and cover every point.
pub fn isotonic_blocks(y: &[f64], w: &[f64]) -> Vec<IsotonicBlock> {
    assert_eq!(y.len(), w.len());
    let mut blocks: Vec<IsotonicBlock> = Vec::with_capacity(y.len());
    for (i, (&yi, &wi)) in y.iter().zip(w).enumerate() {
        let mut cur = IsotonicBlock {
            start: i,
            end: i + 1,
            weight: wi,
            value: yi,
        };
        while let Some(prev) = blocks.last() {
            if prev.value < cur.value {
                break;
            }
            let prev = blocks.pop().unwrap();
            let weight = prev.weight + cur.weight;
            cur = IsotonicBlock {
                start: prev.start,
                end: cur.end,
                weight,
                value: (prev.value * prev.weight + cur.value * cur.weight) / weight,
            };
        }
        blocks.push(cur);
    }
    blocks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    /// Smallest training score of each segment, strictly increasing.
    pub lower: Vec<f64>,
    /// Largest training score of each segment.
    pub upper: Vec<f64>,
    /// Pooled empirical probability per segment, after clamping.
    pub probability: Vec<f64>,
    /// Logit of `probability`: the calibrated score.
    pub value: Vec<f64>,
    pub epsilon: f64,
    pub n_samples: usize,
}

fn check_inputs(scores: &[f64], outcomes: &[bool]) -> Result<()> {
    if scores.len() != outcomes.len() {
        return Err(Error::InvalidDataset(format!(
            "{} scores for {} outcomes",
            scores.len(),
            outcomes.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidDataset(format!("non-finite score at index {i}")));
    }
    let first = scores.first().copied().unwrap_or(0.0);
    if scores.iter().all(|&s| s == first) {
        return Err(Error::SingleDistinctScore);
    }
    let positives = outcomes.iter().filter(|&&o| o).count();
    if positives == 0 || positives == outcomes.len() {
        return Err(Error::SingleClassOutcomes);
    }
    Ok(())
}

/// Groups sorted scores into runs of equal value: (score, count, positives).
fn tie_groups(scores: &[f64], outcomes: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        let pos = outcomes[i] as usize;
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += 1;
                g.2 += pos;
            }
            _ => groups.push((scores[i], 1, pos)),
        }
    }
    groups
}

pub fn fit_calibration(scores: &[f64], outcomes: &[bool]) -> Result<CalibrationMap> {
    check_inputs(scores, outcomes)?;
    let groups = tie_groups(scores, outcomes);
    let y: Vec<f64> = groups.iter().map(|g| g.2 as f64 / g.1 as f64).collect();
    let w: Vec<f64> = groups.iter().map(|g| g.1 as f64).collect();
    let blocks = isotonic_blocks(&y, &w);
    let n = scores.len();
    let epsilon = 1.0 / (2.0 * n as f64);
    let mut map = CalibrationMap {
        lower: Vec::with_capacity(blocks.len()),
        upper: Vec::with_capacity(blocks.len()),
        probability: Vec::with_capacity(blocks.len()),
        value: Vec::with_capacity(blocks.len()),
        epsilon,
        n_samples: n,
    };
    for b in blocks {
        let p = b.value.clamp(epsilon, 1.0 - epsilon);
        map.lower.push(groups[b.start].0);
        map.upper.push(groups[b.end - 1].0);
        map.probability.push(p);
        map.value.push(logit(p));
    }
    Ok(map)
}

impl CalibrationMap {
    fn segment(&self, score: f64) -> usize {
        self.lower.partition_point(|&b| b <= score).saturating_sub(1)
    }

    /// Calibrated value of one score. Scores between segments take the value
    /// of the segment to their left; scores outside the training range take
    /// the nearest end segment.
    pub fn apply_one(&self, score: f64) -> f64 {
        self.value[self.segment(score)]
    }

    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply_one(s)).collect()
    }

    /// Approximate inverse back to the raw score scale: each segment's value
    /// maps to the midpoint of its training score range, with linear
    /// interpolation between segments and clamping beyond the ends.
    pub fn invert_one(&self, value: f64) -> f64 {
        let mid = |i: usize| 0.5 * (self.lower[i] + self.upper[i]);
        let k = self.value.partition_point(|&v| v <= value);
        if k == 0 {
            return mid(0);
        }
        if k == self.value.len() {
            return mid(k - 1);
        }
        let (v0, v1) = (self.value[k - 1], self.value[k]);
        let t = (value - v0) / (v1 - v0);
        mid(k - 1) + t * (mid(k) - mid(k - 1))
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.invert_one(v)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

impl LineFit {
    pub fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Count-weighted least-squares line.
fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> LineFit {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        sxy += wi * (xi - mx) * (yi - my);
        sxx += wi * (xi - mx) * (xi - mx);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    LineFit {
        slope,
        intercept: my - slope * mx,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLevel {
    /// Mean score of the rows in this level.
    pub score: f64,
    pub min_score: f64,
    pub max_score: f64,
    pub count: usize,
    pub positives: usize,
    pub empirical_p: f64,
    /// Logit of the empirical probability clamped to `[1/(2n), 1 - 1/(2n)]`.
    pub logit_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDiagnostics {
    /// Whether the diagnostics were computed on calibrated scores.
    pub transformed: bool,
    pub levels: Vec<ScoreLevel>,
    pub probability_line: LineFit,
    pub logit_line: LineFit,
    /// Count-weighted RMSE of the logit-scale line.
    pub linearity_residual: f64,
    pub histogram: Vec<HistogramBin>,
}

/// Splits sorted values into at most `buckets` runs of near-equal size
/// without separating equal values. Returns `[start, end)` ranges.
fn bucket_ranges(sorted: &[f64], buckets: usize) -> Vec<(usize, usize)> {
    let n = sorted.len();
    let mut distinct = sorted.to_vec();
    distinct.dedup();
    let mut ranges = Vec::new();
    let mut start = 0;
    if distinct.len() <= buckets {
        for i in 1..=n {
            if i == n || sorted[i] != sorted[start] {
                ranges.push((start, i));
                start = i;
            }
        }
        return ranges;
    }
    for b in 1..=buckets {
        let mut end = (b * n / buckets).max(start + 1).min(n);
        while end < n && sorted[end] == sorted[end - 1] {
            end += 1;
        }
        if end > start {
            ranges.push((start, end));
            start = end;
        }
        if start == n {
            break;
        }
    }
    ranges
}

pub fn diagnose(scores: &[f64], outcomes: &[bool], map: Option<&CalibrationMap>) -> Result<CalibrationDiagnostics> {
    check_inputs(scores, outcomes)?;
    let x: Vec<f64> = match map {
        Some(m) => m.apply(scores),
        None => scores.to_vec(),
    };
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| x[i]).collect();

    let levels: Vec<ScoreLevel> = bucket_ranges(&sorted, DIAGNOSTIC_BUCKETS)
        .into_iter()
        .map(|(s, e)| {
            let count = e - s;
            let positives = order[s..e].iter().filter(|&&i| outcomes[i]).count();
            let p = positives as f64 / count as f64;
            let eps = 1.0 / (2.0 * count as f64);
            ScoreLevel {
                score: sorted[s..e].iter().sum::<f64>() / count as f64,
                min_score: sorted[s],
                max_score: sorted[e - 1],
                count,
                positives,
                empirical_p: p,
                logit_p: logit(p.clamp(eps, 1.0 - eps)),
            }
        })
        .collect();

    let lx: Vec<f64> = levels.iter().map(|l| l.score).collect();
    let lp: Vec<f64> = levels.iter().map(|l| l.empirical_p).collect();
    let ll: Vec<f64> = levels.iter().map(|l| l.logit_p).collect();
    let lw: Vec<f64> = levels.iter().map(|l| l.count as f64).collect();
    let probability_line = weighted_line(&lx, &lp, &lw);
    let logit_line = weighted_line(&lx, &ll, &lw);
    let sw: f64 = lw.iter().sum();
    let linearity_residual = (lx
        .iter()
        .zip(&ll)
        .zip(&lw)
        .map(|((&x, &y), &w)| w * (y - logit_line.at(x)).powi(2))
        .sum::<f64>()
        / sw)
        .sqrt();

    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut histogram: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
        .map(|i| HistogramBin {
            lo: lo + width * i as f64,
            hi: if i + 1 == HISTOGRAM_BINS { hi } else { lo + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for &v in &sorted {
        let i = if width > 0.0 { (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1) } else { 0 };
        histogram[i].count += 1;
    }

    Ok(CalibrationDiagnostics {
        transformed: map.is_some(),
        levels,
        probability_line,
        logit_line,
        linearity_residual,
        histogram,
    })
}

impl CalibrationDiagnostics {
    /// CSV export: one row per score level.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("score,min_score,max_score,count,positives,empirical_p,logit_p,fitted_logit\n");
        for l in &self.levels {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                l.score,
                l.min_score,
                l.max_score,
                l.count,
                l.positives,
                l.empirical_p,
                l.logit_p,
                self.logit_line.at(l.score)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    #[default]
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDecision {
    pub mode: CalibrationMode,
    pub threshold: f64,
    pub calibrated: bool,
    pub reason: String,
    pub before: CalibrationDiagnostics,
    pub after: Option<CalibrationDiagnostics>,
    pub map: Option<CalibrationMap>,
}

/// Applies the calibration policy: `Auto` calibrates when the raw score's
/// logit-scale linearity residual exceeds `threshold`.
pub fn decide(scores: &[f64], outcomes: &[bool], mode: CalibrationMode, threshold: f64) -> Result<CalibrationDecision> {
    let before = diagnose(scores, outcomes, None)?;
    let residual = before.linearity_residual;
    let (calibrated, reason) = match mode {
        CalibrationMode::On => (true, "calibration forced on".to_owned()),
        CalibrationMode::Off => (
            false,
            if residual > threshold {
                format!("calibration off, but linearity residual {residual:.4} exceeds {threshold}")
            } else {
                "calibration off".to_owned()
            },
        ),
        CalibrationMode::Auto if residual > threshold => (
            true,
            format!("linearity residual {residual:.4} exceeds {threshold}"),
        ),
        CalibrationMode::Auto => (
            false,
            format!("linearity residual {residual:.4} within {threshold}"),
        ),
    };
    let (map, after) = if calibrated {
        let map = fit_calibration(scores, outcomes)?;
        let after = diagnose(scores, outcomes, Some(&map))?;
        (Some(map), Some(after))
    } else {
        (None, None)
    };
    Ok(CalibrationDecision {
        mode,
        threshold,
        calibrated,
        reason,
        before,
        after,
        map,
    })
}
