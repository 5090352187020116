//! Per-feature contribution curves, mimic-minus-outcome differences and
//! pointwise 95% intervals from the bag structure of the ensembles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSchema;
use crate::distill::{BagEnsemble, PairedEnsembles};
use crate::error::{Error, Result};

pub const Z_95: f64 = 1.96;

/// Inner means per outer fold, `[k][bin]`.
fn inner_means(ensemble: &BagEnsemble, feature: usize) -> Vec<Vec<f64>> {
    (0..ensemble.outer)
        .map(|k| {
            let mut acc = vec![0.0; ensemble.model(k, 0).shapes[feature].values.len()];
            for l in 0..ensemble.inner {
                for (a, v) in acc.iter_mut().zip(&ensemble.model(k, l).shapes[feature].values) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= ensemble.inner as f64);
            acc
        })
        .collect()
}

/// `(1/K) sum_k (a_k - a)(b_k - b)` per bin, with `a`, `b` the grand means of
/// the outer-fold inner means.
fn little_bags_cov(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    let k = a.len() as f64;
    let bins = a[0].len();
    (0..bins)
        .map(|j| {
            let ma = a.iter().map(|r| r[j]).sum::<f64>() / k;
            let mb = b.iter().map(|r| r[j]).sum::<f64>() / k;
            a.iter().zip(b).map(|(ra, rb)| (ra[j] - ma) * (rb[j] - mb)).sum::<f64>() / k
        })
        .collect()
}

fn grand_mean(means: &[Vec<f64>]) -> Vec<f64> {
    let k = means.len() as f64;
    (0..means[0].len()).map(|j| means.iter().map(|r| r[j]).sum::<f64>() / k).collect()
}

fn check_ensemble(ensemble: &BagEnsemble, feature: usize) -> Result<()> {
    if ensemble.outer < 2 || ensemble.inner < 2 {
        return Err(Error::Config(format!(
            "little-bags variance needs K, L >= 2, got K={}, L={}",
            ensemble.outer, ensemble.inner
        )));
    }
    if feature >= ensemble.n_features() {
        return Err(Error::UnknownFeature(feature));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionCurve {
    pub feature: usize,
    pub name: String,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Bag-averaged shape of one feature with its little-bags variance.
pub fn curve(ensemble: &BagEnsemble, feature: usize) -> Result<ContributionCurve> {
    check_ensemble(ensemble, feature)?;
    let means = inner_means(ensemble, feature);
    let mean = grand_mean(&means);
    let variance = little_bags_cov(&means, &means);
    let half: Vec<f64> = variance.iter().map(|v| Z_95 * v.sqrt()).collect();
    Ok(ContributionCurve {
        feature,
        name: ensemble.models[0].shapes[feature].name.clone(),
        lower: mean.iter().zip(&half).map(|(m, h)| m - h).collect(),
        upper: mean.iter().zip(&half).map(|(m, h)| m + h).collect(),
        mean,
        variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceCurve {
    pub feature: usize,
    pub name: String,
    /// Mimic minus outcome.
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub significant: Vec<bool>,
    /// Bins whose plug-in variance came out negative and was set to 0.
    pub floored: Vec<bool>,
}

/// Difference between two ensembles sharing a bag structure:
/// `Var(a) + Var(b) - 2 Cov(a, b)` per bin.
pub fn difference_of(a: &BagEnsemble, b: &BagEnsemble, feature: usize) -> Result<DifferenceCurve> {
    check_ensemble(a, feature)?;
    check_ensemble(b, feature)?;
    if a.outer != b.outer || a.inner != b.inner || a.models[0].n_bins != b.models[0].n_bins {
        return Err(Error::MismatchedPlans);
    }
    let ma = inner_means(a, feature);
    let mb = inner_means(b, feature);
    let ga = grand_mean(&ma);
    let gb = grand_mean(&mb);
    let va = little_bags_cov(&ma, &ma);
    let vb = little_bags_cov(&mb, &mb);
    let cov = little_bags_cov(&ma, &mb);
    let mean: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x - y).collect();
    let raw: Vec<f64> = (0..mean.len()).map(|j| va[j] + vb[j] - 2.0 * cov[j]).collect();
    let floored: Vec<bool> = raw.iter().map(|&v| v < 0.0).collect();
    let variance: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
    let lower: Vec<f64> = mean.iter().zip(&variance).map(|(m, v)| m - Z_95 * v.sqrt()).collect();
    let upper: Vec<f64> = mean.iter().zip(&variance).map(|(m, v)| m + Z_95 * v.sqrt()).collect();
    let significant = lower.iter().zip(&upper).map(|(&lo, &hi)| lo > 0.0 || hi < 0.0).collect();
    Ok(DifferenceCurve {
        feature,
        name: a.models[0].shapes[feature].name.clone(),
        mean,
        variance,
        lower,
        upper,
        significant,
        floored,
    })
}

pub fn difference(paired: &PairedEnsembles, feature: usize) -> Result<DifferenceCurve> {
    difference_of(&paired.mimic, &paired.outcome, feature)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureComparison {
    pub feature: usize,
    pub name: String,
    pub bin_labels: Vec<String>,
    pub bin_counts: Vec<usize>,
    pub mimic: ContributionCurve,
    pub outcome: ContributionCurve,
    pub difference: DifferenceCurve,
    /// Mass-weighted mean of |difference| over significant bins.
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSurface {
    pub features: (usize, usize),
    pub names: (String, String),
    pub n_rows: usize,
    pub n_cols: usize,
    /// Bag-averaged surface values, row-major.
    pub mimic: Option<Vec<f64>>,
    pub outcome: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub features: Vec<FeatureComparison>,
    /// Feature indices by decreasing discrepancy, ties by index.
    pub ranking: Vec<usize>,
    pub surfaces: Vec<MeanSurface>,
}

fn discrepancy(diff: &DifferenceCurve, counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let weighted: f64 = (0..diff.mean.len())
        .filter(|&b| diff.significant[b])
        .map(|b| counts[b] as f64 * diff.mean[b].abs())
        .sum();
    weighted / total as f64
}

/// Averages a surface over the bags that carry the pair (with the same
/// bin grid); `None` when no bag has it.
fn mean_surface(ensemble: &BagEnsemble, pair: (usize, usize)) -> Option<Vec<f64>> {
    let found: Vec<&Vec<f64>> = ensemble
        .models
        .iter()
        .flat_map(|m| m.interactions.iter().filter(|s| s.features == pair).map(|s| &s.values))
        .collect();
    let first = found.first()?;
    let mut acc = vec![0.0; first.len()];
    for v in &found {
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    // bags without the pair contribute zero surfaces
    acc.iter_mut().for_each(|a| *a /= ensemble.models.len() as f64);
    Some(acc)
}

/// All curves, differences, the discrepancy ranking and bag-averaged
/// interaction surfaces.
pub fn summarize(paired: &PairedEnsembles) -> Result<Comparison> {
    let schema: &FeatureSchema = &paired.schema;
    let features: Vec<FeatureComparison> = (0..paired.mimic.n_features())
        .into_par_iter()
        .map(|j| {
            let bins = &schema.features[j];
            let difference = difference(paired, j)?;
            let counts = paired.bin_counts[j].clone();
            Ok(FeatureComparison {
                feature: j,
                name: bins.name.clone(),
                bin_labels: (0..bins.n_bins()).map(|b| bins.bin_label(b)).collect(),
                discrepancy: discrepancy(&difference, &counts),
                bin_counts: counts,
                mimic: curve(&paired.mimic, j)?,
                outcome: curve(&paired.outcome, j)?,
                difference,
            })
        })
        .collect::<Result<_>>()?;
    let mut ranking: Vec<usize> = (0..features.len()).collect();
    ranking.sort_by(|&a, &b| features[b].discrepancy.total_cmp(&features[a].discrepancy).then(a.cmp(&b)));

    let mut pairs: Vec<((usize, usize), (String, String), usize, usize)> = paired
        .mimic
        .models
        .iter()
        .chain(&paired.outcome.models)
        .flat_map(|m| m.interactions.iter().map(|s| (s.features, s.names.clone(), s.n_rows, s.n_cols)))
        .collect();
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    pairs.dedup_by(|a, b| a.0 == b.0);
    let surfaces = pairs
        .into_iter()
        .map(|(features, names, n_rows, n_cols)| MeanSurface {
            features,
            names,
            n_rows,
            n_cols,
            mimic: mean_surface(&paired.mimic, features),
            outcome: mean_surface(&paired.outcome, features),
        })
        .collect();
    Ok(Comparison {
        features,
        ranking,
        surfaces,
    })
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl FeatureComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "feature,bin,count,mimic_mean,mimic_lo,mimic_hi,outcome_mean,outcome_lo,outcome_hi,difference,diff_lo,diff_hi,significant\n",
        );
        for b in 0..self.bin_labels.len() {
            let row = [
                csv_field(&self.name),
                csv_field(&self.bin_labels[b]),
                self.bin_counts[b].to_string(),
                fmt(self.mimic.mean[b]),
                fmt(self.mimic.lower[b]),
                fmt(self.mimic.upper[b]),
                fmt(self.outcome.mean[b]),
                fmt(self.outcome.lower[b]),
                fmt(self.outcome.upper[b]),
                fmt(self.difference.mean[b]),
                fmt(self.difference.lower[b]),
                fmt(self.difference.upper[b]),
                self.difference.significant[b].to_string(),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

impl MeanSurface {
    /// Long-format heatmap data: one line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{},mimic,outcome\n", csv_field(&self.names.0), csv_field(&self.names.1));
        let cell = |s: &Option<Vec<f64>>, k: usize| s.as_ref().map_or(String::new(), |v| fmt(v[k]));
        for r in 0..self.n_rows {
            for c in 0..self.n_cols {
                let k = r * self.n_cols + c;
                out.push_str(&format!("{r},{c},{},{}\n", cell(&self.mimic, k), cell(&self.outcome, k)));
            }
        }
        out
    }
}
