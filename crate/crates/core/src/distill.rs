//! Paired mimic/outcome training over two-level structured cross-validation.
//!
//! Each of K outer folds holds out 15% of the rows as a test set; each of L
//! inner repetitions splits the remaining rows into 70% training and 15%
//! validation (fractions of the full dataset). The mimic model and the outcome
//! model of bag `(k, l)` see exactly the same rows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationMap;
use crate::data::{bin, AuditDataset, BinnedMatrix, FeatureSchema};
use crate::error::{Error, Result};
use crate::gam::{fit_interactions, train_classifier, train_regressor, AdditiveModel, Link, RowSplit, TrainConfig};
use crate::metrics::{auc, rmse, MeanSpread};

pub const TEST_FRACTION: f64 = 0.15;
pub const VALIDATION_FRACTION: f64 = 0.15;
pub const DEFAULT_OUTER_FOLDS: usize = 5;
pub const DEFAULT_INNER_FOLDS: usize = 5;
pub const MIN_ROWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagPlan {
    pub n_rows: usize,
    pub outer: usize,
    pub inner: usize,
    pub seed: u64,
    /// Held-out test rows per outer fold.
    pub test: Vec<Vec<usize>>,
    /// Training/validation rows per bag, indexed `k * inner + l`.
    pub splits: Vec<RowSplit>,
}

impl BagPlan {
    pub fn n_bags(&self) -> usize {
        self.outer * self.inner
    }

    pub fn split(&self, k: usize, l: usize) -> &RowSplit {
        &self.splits[k * self.inner + l]
    }

    /// First outer fold holding each row out, if any.
    pub fn first_test_fold(&self) -> Vec<Option<usize>> {
        let mut fold = vec![None; self.n_rows];
        for (k, rows) in self.test.iter().enumerate() {
            for &r in rows {
                fold[r].get_or_insert(k);
            }
        }
        fold
    }
}

/// Draws a plan with `round(0.15 T)` test rows per outer fold (independent
/// draws across folds) and `round(0.15 T)` validation rows per bag.
pub fn plan_bags(n_rows: usize, outer: usize, inner: usize, seed: u64) -> Result<BagPlan> {
    if outer < 2 || inner < 2 {
        return Err(Error::Config(format!(
            "need at least 2 outer and 2 inner folds, got K={outer}, L={inner}"
        )));
    }
    let n_test = (TEST_FRACTION * n_rows as f64).round() as usize;
    let n_val = (VALIDATION_FRACTION * n_rows as f64).round() as usize;
    if n_rows < MIN_ROWS || n_test == 0 || n_val == 0 || n_test + n_val >= n_rows {
        return Err(Error::TooFewRows {
            rows: n_rows,
            k: outer,
            l: inner,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::with_capacity(outer);
    let mut splits = Vec::with_capacity(outer * inner);
    for _ in 0..outer {
        let mut rows: Vec<usize> = (0..n_rows).collect();
        rows.shuffle(&mut rng);
        let mut held: Vec<usize> = rows[..n_test].to_vec();
        held.sort_unstable();
        let mut pool: Vec<usize> = rows[n_test..].to_vec();
        for _ in 0..inner {
            pool.shuffle(&mut rng);
            let mut validation = pool[..n_val].to_vec();
            let mut train = pool[n_val..].to_vec();
            validation.sort_unstable();
            train.sort_unstable();
            splits.push(RowSplit { train, validation });
        }
        test.push(held);
    }
    Ok(BagPlan {
        n_rows,
        outer,
        inner,
        seed,
        test,
        splits,
    })
}

/// K x L models of one link, indexed `k * inner + l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagEnsemble {
    pub link: Link,
    pub outer: usize,
    pub inner: usize,
    pub models: Vec<AdditiveModel>,
}

impl BagEnsemble {
    pub fn new(link: Link, outer: usize, inner: usize, models: Vec<AdditiveModel>) -> Result<Self> {
        if models.len() != outer * inner {
            return Err(Error::Config(format!(
                "{} models for a {outer}x{inner} ensemble",
                models.len()
            )));
        }
        if let Some(m) = models.iter().find(|m| m.link != link || m.n_bins != models[0].n_bins) {
            return Err(Error::SchemaMismatch(format!(
                "ensemble member has link {:?} and bins {:?}",
                m.link, m.n_bins
            )));
        }
        Ok(BagEnsemble {
            link,
            outer,
            inner,
            models,
        })
    }

    pub fn model(&self, k: usize, l: usize) -> &AdditiveModel {
        &self.models[k * self.inner + l]
    }

    pub fn n_features(&self) -> usize {
        self.models.first().map_or(0, AdditiveModel::n_features)
    }

    /// Shape function of one feature averaged over all bags.
    pub fn mean_shape(&self, feature: usize) -> Vec<f64> {
        let n = self.models.len() as f64;
        let mut mean = vec![0.0; self.models[0].shapes[feature].values.len()];
        for m in &self.models {
            for (a, v) in mean.iter_mut().zip(&m.shapes[feature].values) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        mean
    }

    pub fn mean_intercept(&self) -> f64 {
        self.models.iter().map(|m| m.intercept).sum::<f64>() / self.models.len() as f64
    }

    /// Link-scale predictions of outer fold `k`, averaged over its inner
    /// models.
    pub fn fold_link(&self, k: usize, x: &BinnedMatrix, rows: &[usize], with_interactions: bool) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; rows.len()];
        for l in 0..self.inner {
            let m = self.model(k, l);
            let preds = if with_interactions {
                m.predict_link_rows(x, rows)?
            } else {
                m.main_effects_only().predict_link_rows(x, rows)?
            };
            for (a, p) in acc.iter_mut().zip(preds) {
                *a += p;
            }
        }
        acc.iter_mut().for_each(|a| *a /= self.inner as f64);
        Ok(acc)
    }

    pub fn has_interactions(&self) -> bool {
        self.models.iter().any(|m| !m.interactions.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedEnsembles {
    pub plan: BagPlan,
    pub schema: FeatureSchema,
    pub calibration: Option<CalibrationMap>,
    pub config: TrainConfig,
    pub mimic: BagEnsemble,
    pub outcome: BagEnsemble,
    /// Row count per bin over the whole dataset, per feature.
    pub bin_counts: Vec<Vec<usize>>,
}

impl PairedEnsembles {
    /// Mimic targets: calibrated scores when a map is present.
    pub fn mimic_targets(&self, data: &AuditDataset) -> Vec<f64> {
        match &self.calibration {
            Some(map) => map.apply(data.scores()),
            None => data.scores().to_vec(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Outcome-model rows of a bag: the bag's rows minus score-only rows.
pub fn outcome_split(split: &RowSplit, data: &AuditDataset) -> RowSplit {
    RowSplit {
        train: split.train.iter().copied().filter(|&r| data.is_labelled(r)).collect(),
        validation: split.validation.iter().copied().filter(|&r| data.is_labelled(r)).collect(),
    }
}

/// Trains every bag's mimic (regression on the calibrated or raw score) and
/// outcome (classification) model on the same rows. Bags train in parallel
/// on the current rayon pool.
pub fn train_paired(
    data: &AuditDataset,
    schema: &FeatureSchema,
    calibration: Option<&CalibrationMap>,
    plan: &BagPlan,
    config: &TrainConfig,
) -> Result<PairedEnsembles> {
    if plan.n_rows != data.n_rows() {
        return Err(Error::Config(format!(
            "plan covers {} rows, dataset has {}",
            plan.n_rows,
            data.n_rows()
        )));
    }
    config.validate()?;
    let x = bin(data, schema)?;
    let mimic_targets = match calibration {
        Some(map) => map.apply(data.scores()),
        None => data.scores().to_vec(),
    };
    let outcomes = data.outcome_targets();

    let trained: Vec<(AdditiveModel, AdditiveModel)> = (0..plan.n_bags())
        .into_par_iter()
        .map(|b| {
            let split = &plan.splits[b];
            let osplit = outcome_split(split, data);
            let mut mimic = train_regressor(&x, &mimic_targets, split, config)?;
            let mut outcome = train_classifier(&x, &outcomes, &osplit, config)?;
            if config.interaction_pairs > 0 {
                mimic = fit_interactions(&mimic, &x, &mimic_targets, split, config.interaction_pairs, config)?;
                outcome = fit_interactions(&outcome, &x, &outcomes, &osplit, config.interaction_pairs, config)?;
            }
            Ok((mimic, outcome))
        })
        .collect::<Result<_>>()?;
    let (mimic, outcome): (Vec<_>, Vec<_>) = trained.into_iter().unzip();

    Ok(PairedEnsembles {
        plan: plan.clone(),
        schema: schema.clone(),
        calibration: calibration.cloned(),
        config: config.clone(),
        mimic: BagEnsemble::new(Link::Identity, plan.outer, plan.inner, mimic)?,
        outcome: BagEnsemble::new(Link::Logistic, plan.outer, plan.inner, outcome)?,
        bin_counts: (0..x.n_features()).map(|j| x.bin_counts(j)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    /// Mimic RMSE against raw scores on each outer fold's test rows.
    pub rmse_per_fold: Vec<f64>,
    /// Outcome AUC per outer fold; `None` where the fold had a single class.
    pub auc_per_fold: Vec<Option<f64>>,
    pub rmse: Option<MeanSpread>,
    pub auc: Option<MeanSpread>,
    pub skipped_auc_folds: Vec<usize>,
}

/// Fold-wise fidelity/accuracy given per-fold link-scale predictions for the
/// fold's test rows. Mimic predictions are mapped back to the raw score
/// scale through the inverse calibration before the RMSE.
pub fn fold_metrics<M, O>(
    plan: &BagPlan,
    data: &AuditDataset,
    calibration: Option<&CalibrationMap>,
    mut mimic_link: M,
    mut outcome_link: O,
) -> Result<FoldMetrics>
where
    M: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
    O: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    let mut rmse_per_fold = Vec::with_capacity(plan.outer);
    let mut auc_per_fold = Vec::with_capacity(plan.outer);
    let mut skipped = Vec::new();
    for (k, rows) in plan.test.iter().enumerate() {
        let pred = mimic_link(k, rows)?;
        let raw = match calibration {
            Some(map) => map.invert(&pred),
            None => pred,
        };
        let actual: Vec<f64> = rows.iter().map(|&r| data.scores()[r]).collect();
        rmse_per_fold.push(rmse(&raw, &actual));

        let labelled: Vec<usize> = rows.iter().copied().filter(|&r| data.is_labelled(r)).collect();
        let fold_auc = if labelled.is_empty() {
            None
        } else {
            let scores = outcome_link(k, &labelled)?;
            let labels: Vec<bool> = labelled.iter().map(|&r| data.outcomes()[r] == Some(true)).collect();
            auc(&scores, &labels)
        };
        if fold_auc.is_none() {
            skipped.push(k);
        }
        auc_per_fold.push(fold_auc);
    }
    let aucs: Vec<f64> = auc_per_fold.iter().flatten().copied().collect();
    Ok(FoldMetrics {
        rmse: MeanSpread::of(&rmse_per_fold),
        auc: MeanSpread::of(&aucs),
        rmse_per_fold,
        auc_per_fold,
        skipped_auc_folds: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub main_effects: FoldMetrics,
    /// Present when the ensembles carry interaction surfaces.
    pub with_interactions: Option<FoldMetrics>,
}

/// Table-style fidelity (mimic RMSE) and accuracy (outcome AUC) of the
/// paired ensembles, mean and spread over outer folds.
pub fn fidelity(paired: &PairedEnsembles, data: &AuditDataset) -> Result<Fidelity> {
    let x = bin(data, &paired.schema)?;
    let metrics = |with: bool| {
        fold_metrics(
            &paired.plan,
            data,
            paired.calibration.as_ref(),
            |k, rows| paired.mimic.fold_link(k, &x, rows, with),
            |k, rows| paired.outcome.fold_link(k, &x, rows, with),
        )
    };
    let main_effects = metrics(false)?;
    let with_interactions = if paired.mimic.has_interactions() || paired.outcome.has_interactions() {
        Some(metrics(true)?)
    } else {
        None
    };
    Ok(Fidelity {
        main_effects,
        with_interactions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_sizes_follow_fractions() {
        let plan = plan_bags(1000, 2, 2, 7).unwrap();
        for k in 0..2 {
            assert_eq!(plan.test[k].len(), 150);
            for l in 0..2 {
                let s = plan.split(k, l);
                assert_eq!(s.train.len(), 700);
                assert_eq!(s.validation.len(), 150);
                let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&plan.test[k]).copied().collect();
                all.sort_unstable();
                all.dedup();
                assert_eq!(all.len(), 1000, "test, train and validation are disjoint");
            }
        }
    }

    #[test]
    fn plan_is_deterministic() {
        assert_eq!(plan_bags(300, 3, 2, 11).unwrap(), plan_bags(300, 3, 2, 11).unwrap());
        assert_ne!(plan_bags(300, 3, 2, 11).unwrap(), plan_bags(300, 3, 2, 12).unwrap());
    }

    #[test]
    fn plan_rejects_tiny_data() {
        let err = plan_bags(10, 5, 5, 0).unwrap_err();
        assert!(matches!(err, Error::TooFewRows { .. }));
        assert!(err.to_string().starts_with("T too small"));
        assert!(matches!(plan_bags(100, 1, 5, 0), Err(Error::Config(_))));
    }
}
