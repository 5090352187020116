//! Additive models over binned features.
//!
//! A model predicts `g(y) = h0 + sum_i h_i(x_i) + sum_ij h_ij(x_i, x_j)` where
//! every term is a lookup table indexed by bin. Terms are fitted by cyclic
//! gradient boosting of shallow trees (one tree per term per round) and the
//! trees are folded into the tables as they are grown.

mod boost;
mod interactions;
mod tree;

use serde::{Deserialize, Serialize};

use crate::data::BinnedMatrix;
use crate::error::{Error, Result};

pub use boost::{logit, sigmoid, Objective};
pub use interactions::{fit_interactions, fit_interactions_on, screen_pairs, PairScore};

use boost::{boost, center, Term};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logistic,
}

impl Link {
    pub fn apply(self, f: f64) -> f64 {
        match self {
            Link::Identity => f,
            Link::Logistic => sigmoid(f),
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            Link::Identity => Objective::SquaredError,
            Link::Logistic => Objective::LogLoss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_rounds: usize,
    pub max_leaves: usize,
    /// Rounds without validation improvement before stopping.
    pub patience: usize,
    pub interaction_pairs: usize,
    /// Recorded with the model. Boosting itself is deterministic.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            max_rounds: 5000,
            max_leaves: 3,
            patience: 50,
            interaction_pairs: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!(
                "learning rate must lie in (0, 1], got {}",
                self.learning_rate
            )));
        }
        if self.max_rounds < 1 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        if self.max_leaves < 2 {
            return Err(Error::Config("max_leaves must be at least 2".into()));
        }
        Ok(())
    }
}

/// Training and validation rows for one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl RowSplit {
    /// Train on every row, no early-stopping holdout.
    pub fn all(n_rows: usize) -> Self {
        RowSplit {
            train: (0..n_rows).collect(),
            validation: Vec::new(),
        }
    }

    /// Hold out `validation`, train on the remaining rows.
    pub fn holdout(n_rows: usize, validation: &[usize]) -> Self {
        let mut held = vec![false; n_rows];
        for &r in validation {
            if r < n_rows {
                held[r] = true;
            }
        }
        RowSplit {
            train: (0..n_rows).filter(|&r| !held[r]).collect(),
            validation: validation.to_vec(),
        }
    }

    pub(crate) fn check(&self, n_rows: usize) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let mut seen = vec![0u8; n_rows];
        for (set, &r) in self
            .train
            .iter()
            .map(|r| (1u8, r))
            .chain(self.validation.iter().map(|r| (2u8, r)))
        {
            if r >= n_rows {
                return Err(Error::InvalidSplit(format!("row {r} out of range")));
            }
            if seen[r] != 0 {
                return Err(Error::InvalidSplit(if seen[r] == set {
                    format!("row {r} listed twice")
                } else {
                    format!("row {r} is in both training and validation")
                }));
            }
            seen[r] = set;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeFunction {
    pub feature: usize,
    pub name: String,
    /// One contribution per bin, on the link scale.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSurface {
    pub features: (usize, usize),
    pub names: (String, String),
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major `n_rows x n_cols` table indexed by `(bin_i, bin_j)`.
    pub values: Vec<f64>,
}

impl InteractionSurface {
    pub fn value(&self, bin_i: usize, bin_j: usize) -> f64 {
        self.values[bin_i * self.n_cols + bin_j]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub seed: u64,
    pub rounds: usize,
    pub best_round: usize,
    /// Targets had zero variance; the model is intercept-only.
    pub constant_target: bool,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// Intercept before interaction surfaces were centered into it.
    pub main_intercept: f64,
    pub interaction_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveModel {
    pub link: Link,
    pub intercept: f64,
    pub n_bins: Vec<usize>,
    pub shapes: Vec<ShapeFunction>,
    pub interactions: Vec<InteractionSurface>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    model: AdditiveModel,
}

/// Per-term breakdown of one prediction on the link scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub intercept: f64,
    pub main: Vec<f64>,
    pub pairs: Vec<f64>,
}

impl Decomposition {
    /// Sum in the same order [`AdditiveModel::predict_link`] uses.
    pub fn total(&self) -> f64 {
        let mut acc = self.intercept;
        for v in &self.main {
            acc += v;
        }
        for v in &self.pairs {
            acc += v;
        }
        acc
    }
}

impl AdditiveModel {
    /// Model with zero shapes and the given intercept.
    pub fn intercept_only(link: Link, intercept: f64, x: &BinnedMatrix) -> Self {
        AdditiveModel {
            link,
            intercept,
            n_bins: x.n_bins().to_vec(),
            shapes: x
                .names()
                .iter()
                .zip(x.n_bins())
                .enumerate()
                .map(|(feature, (name, &nb))| ShapeFunction {
                    feature,
                    name: name.clone(),
                    values: vec![0.0; nb],
                })
                .collect(),
            interactions: Vec::new(),
            meta: TrainingMeta {
                main_intercept: intercept,
                ..TrainingMeta::default()
            },
        }
    }

    pub fn n_features(&self) -> usize {
        self.shapes.len()
    }

    fn check_matrix(&self, x: &BinnedMatrix) -> Result<()> {
        if x.n_bins() != self.n_bins.as_slice() {
            return Err(Error::SchemaMismatch(format!(
                "model expects bins {:?}, matrix has {:?}",
                self.n_bins,
                x.n_bins()
            )));
        }
        Ok(())
    }

    /// Predictions on the link scale for every row of `x`.
    pub fn predict_link(&self, x: &BinnedMatrix) -> Result<Vec<f64>> {
        self.check_matrix(x)?;
        let mut acc = vec![self.intercept; x.n_rows()];
        for shape in &self.shapes {
            for (a, &b) in acc.iter_mut().zip(x.column(shape.feature)) {
                *a += shape.values[b as usize];
            }
        }
        for s in &self.interactions {
            for ((a, &bi), &bj) in acc.iter_mut().zip(x.column(s.features.0)).zip(x.column(s.features.1)) {
                *a += s.value(bi as usize, bj as usize);
            }
        }
        Ok(acc)
    }

    /// Link-scale predictions restricted to `rows`.
    pub fn predict_link_rows(&self, x: &BinnedMatrix, rows: &[usize]) -> Result<Vec<f64>> {
        self.check_matrix(x)?;
        Ok(rows
            .iter()
            .map(|&r| {
                let mut acc = self.intercept;
                for shape in &self.shapes {
                    acc += shape.values[x.get(r, shape.feature)];
                }
                for s in &self.interactions {
                    acc += s.value(x.get(r, s.features.0), x.get(r, s.features.1));
                }
                acc
            })
            .collect())
    }

    pub fn decompose(&self, x: &BinnedMatrix, row: usize) -> Result<Decomposition> {
        self.check_matrix(x)?;
        Ok(Decomposition {
            intercept: self.intercept,
            main: self.shapes.iter().map(|s| s.values[x.get(row, s.feature)]).collect(),
            pairs: self
                .interactions
                .iter()
                .map(|s| s.value(x.get(row, s.features.0), x.get(row, s.features.1)))
                .collect(),
        })
    }

    /// The model with its interaction surfaces removed.
    pub fn main_effects_only(&self) -> AdditiveModel {
        AdditiveModel {
            intercept: self.meta.main_intercept,
            interactions: Vec::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        Ok(doc.model)
    }
}

/// Output of the model: the additive sum for identity links, probabilities
/// for logistic links.
pub fn predict(model: &AdditiveModel, x: &BinnedMatrix) -> Result<Vec<f64>> {
    let mut out = model.predict_link(x)?;
    if model.link == Link::Logistic {
        out.iter_mut().for_each(|v| *v = sigmoid(*v));
    }
    Ok(out)
}

pub fn contribution(model: &AdditiveModel, feature: usize) -> Result<&ShapeFunction> {
    model.shapes.get(feature).ok_or(Error::UnknownFeature(feature))
}

fn gather(values: &[f64], rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&r| values[r]).collect()
}

fn check_targets(targets: &[f64], x: &BinnedMatrix, split: &RowSplit) -> Result<()> {
    if targets.len() != x.n_rows() {
        return Err(Error::InvalidDataset(format!(
            "{} targets for {} rows",
            targets.len(),
            x.n_rows()
        )));
    }
    split.check(x.n_rows())?;
    if let Some(&r) = split
        .train
        .iter()
        .chain(&split.validation)
        .find(|&&r| !targets[r].is_finite())
    {
        return Err(Error::InvalidDataset(format!("non-finite target at row {r}")));
    }
    Ok(())
}

fn main_terms(x: &BinnedMatrix, split: &RowSplit) -> Vec<Term> {
    (0..x.n_features())
        .map(|j| {
            let col = x.column(j);
            Term {
                rows: x.n_bins()[j],
                cols: 1,
                train_cells: split.train.iter().map(|&r| col[r] as u32).collect(),
                val_cells: split.validation.iter().map(|&r| col[r] as u32).collect(),
            }
        })
        .collect()
}

fn train_main(
    x: &BinnedMatrix,
    targets: &[f64],
    split: &RowSplit,
    config: &TrainConfig,
    link: Link,
    intercept: f64,
) -> AdditiveModel {
    let objective = link.objective();
    let terms = main_terms(x, split);
    let y_train = gather(targets, &split.train);
    let y_val = gather(targets, &split.validation);
    let mut f_train = vec![intercept; y_train.len()];
    let mut f_val = vec![intercept; y_val.len()];
    let mut result = boost(&terms, objective, &y_train, &y_val, &mut f_train, &mut f_val, config);
    let means = center(&mut result.tables, &terms);
    let mut model = AdditiveModel::intercept_only(link, intercept, x);
    for (shape, table) in model.shapes.iter_mut().zip(result.tables) {
        shape.values = table;
    }
    for m in means {
        model.intercept += m;
    }
    model.meta = TrainingMeta {
        learning_rate: config.learning_rate,
        max_leaves: config.max_leaves,
        seed: config.seed,
        rounds: result.rounds,
        best_round: result.best_round,
        constant_target: false,
        train_loss: result.train_loss,
        validation_loss: result.validation_loss,
        main_intercept: model.intercept,
        interaction_rounds: 0,
    };
    model
}

/// Fits an identity-link model minimizing mean squared error. Targets with
/// zero variance over the training rows give an intercept-only model with
/// `meta.constant_target` set.
pub fn train_regressor(
    x: &BinnedMatrix,
    targets: &[f64],
    split: &RowSplit,
    config: &TrainConfig,
) -> Result<AdditiveModel> {
    config.validate()?;
    check_targets(targets, x, split)?;
    let first = targets[split.train[0]];
    if split.train.iter().all(|&r| targets[r] == first) {
        let mut model = AdditiveModel::intercept_only(Link::Identity, first, x);
        model.meta.constant_target = true;
        model.meta.learning_rate = config.learning_rate;
        model.meta.max_leaves = config.max_leaves;
        model.meta.seed = config.seed;
        return Ok(model);
    }
    let mean = split.train.iter().map(|&r| targets[r]).sum::<f64>() / split.train.len() as f64;
    Ok(train_main(x, targets, split, config, Link::Identity, mean))
}

/// Fits a logistic-link model minimizing the mean negative Bernoulli
/// log-likelihood of 0/1 `outcomes`.
pub fn train_classifier(
    x: &BinnedMatrix,
    outcomes: &[f64],
    split: &RowSplit,
    config: &TrainConfig,
) -> Result<AdditiveModel> {
    config.validate()?;
    check_targets(outcomes, x, split)?;
    if let Some(&r) = split
        .train
        .iter()
        .chain(&split.validation)
        .find(|&&r| outcomes[r] != 0.0 && outcomes[r] != 1.0)
    {
        return Err(Error::InvalidDataset(format!(
            "outcome {} at row {r} is not 0 or 1",
            outcomes[r]
        )));
    }
    let positives = split.train.iter().filter(|&&r| outcomes[r] == 1.0).count();
    if positives == 0 || positives == split.train.len() {
        return Err(Error::SingleClassTraining);
    }
    let rate = positives as f64 / split.train.len() as f64;
    Ok(train_main(x, outcomes, split, config, Link::Logistic, logit(rate)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(columns: Vec<Vec<u16>>, n_bins: Vec<usize>) -> BinnedMatrix {
        let names = (0..columns.len()).map(|i| format!("x{i}")).collect();
        BinnedMatrix::from_columns(names, n_bins, columns)
    }

    #[test]
    fn hand_built_model_predicts_direct_sum() {
        let x = matrix(vec![vec![2], vec![0]], vec![4, 3]);
        let mut m = AdditiveModel::intercept_only(Link::Identity, 1.0, &x);
        m.shapes[0].values[2] = 0.5;
        m.shapes[1].values[0] = -0.25;
        assert_eq!(predict(&m, &x).unwrap(), vec![1.25]);
    }

    #[test]
    fn intercept_only_predictions() {
        let x = matrix(vec![vec![0, 1, 2]], vec![3]);
        let m = AdditiveModel::intercept_only(Link::Identity, 1.5, &x);
        assert_eq!(predict(&m, &x).unwrap(), vec![1.5; 3]);
        let m = AdditiveModel::intercept_only(Link::Logistic, 0.0, &x);
        assert_eq!(predict(&m, &x).unwrap(), vec![0.5; 3]);
        assert!(contribution(&m, 0).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(matches!(contribution(&m, 1), Err(Error::UnknownFeature(1))));
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let x = matrix(vec![vec![0, 1]], vec![3]);
        let m = AdditiveModel::intercept_only(Link::Identity, 0.0, &x);
        let other = matrix(vec![vec![0, 1]], vec![4]);
        assert!(matches!(predict(&m, &other), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn constant_targets_give_intercept_only() {
        let x = matrix(vec![(0..50).map(|i| (i % 5) as u16).collect()], vec![6]);
        let m = train_regressor(&x, &[7.0; 50], &RowSplit::all(50), &TrainConfig::default()).unwrap();
        assert!(m.meta.constant_target);
        assert_eq!(m.intercept, 7.0);
        assert!(m.shapes[0].values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_rejects_single_class() {
        let x = matrix(vec![(0..20).map(|i| (i % 2) as u16).collect()], vec![3]);
        let err = train_classifier(&x, &[1.0; 20], &RowSplit::all(20), &TrainConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "single-class training data");
    }

    #[test]
    fn split_validation() {
        let x = matrix(vec![vec![0; 4]], vec![2]);
        let cfg = TrainConfig::default();
        let bad = RowSplit {
            train: vec![0, 1],
            validation: vec![1],
        };
        assert!(matches!(train_regressor(&x, &[0.0, 1.0, 0.0, 1.0], &bad, &cfg), Err(Error::InvalidSplit(_))));
        let empty = RowSplit {
            train: vec![],
            validation: vec![0],
        };
        assert!(matches!(train_regressor(&x, &[0.0; 4], &empty, &cfg), Err(Error::EmptyTrainingSet)));
        let split = RowSplit::holdout(4, &[3]);
        assert_eq!(split.train, vec![0, 1, 2]);
    }

    #[test]
    fn config_bounds() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        c.learning_rate = 1.0;
        c.max_leaves = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let x = matrix(vec![vec![0, 1, 1, 0]], vec![3]);
        let m = train_regressor(&x, &[0.0, 1.0, 1.0, 0.0], &RowSplit::all(4), &TrainConfig::default()).unwrap();
        let back = AdditiveModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let bumped = m.to_json().unwrap().replace("\"format_version\":1", "\"format_version\":99");
        assert!(AdditiveModel::from_json(&bumped).is_err());
    }
}
