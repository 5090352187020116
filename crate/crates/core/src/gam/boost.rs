//! Cyclic gradient boosting of per-term lookup tables.

use serde::{Deserialize, Serialize};

use super::tree::{grow, GridHistogram};
use super::TrainConfig;

/// Training loss on the link scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Mean squared error against real targets (identity link).
    SquaredError,
    /// Mean negative Bernoulli log-likelihood of 0/1 targets (logistic link).
    LogLoss,
}

pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(f: f64) -> f64 {
    f.max(0.0) + (-f.abs()).exp().ln_1p()
}

impl Objective {
    /// Negative gradient of the per-row loss with respect to the link-scale
    /// prediction `f` (up to the constant factor of the squared error).
    #[inline]
    pub fn pseudo_residual(self, y: f64, f: f64) -> f64 {
        match self {
            Objective::SquaredError => y - f,
            Objective::LogLoss => y - sigmoid(f),
        }
    }

    #[inline]
    pub fn hessian(self, f: f64) -> f64 {
        match self {
            Objective::SquaredError => 1.0,
            Objective::LogLoss => {
                let p = sigmoid(f);
                p * (1.0 - p)
            }
        }
    }

    #[inline]
    pub fn row_loss(self, y: f64, f: f64) -> f64 {
        match self {
            Objective::SquaredError => (y - f) * (y - f),
            Objective::LogLoss => softplus(f) - y * f,
        }
    }

    /// Mean loss over rows; 0 for an empty set.
    pub fn loss(self, y: &[f64], f: &[f64]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        y.iter().zip(f).map(|(&y, &f)| self.row_loss(y, f)).sum::<f64>() / y.len() as f64
    }
}

/// One additive term: every training and validation row mapped to a cell of a
/// `rows x cols` grid.
pub(crate) struct Term {
    pub rows: usize,
    pub cols: usize,
    pub train_cells: Vec<u32>,
    pub val_cells: Vec<u32>,
}

impl Term {
    fn n_cells(&self) -> usize {
        self.rows * self.cols
    }
}

pub(crate) struct BoostResult {
    pub tables: Vec<Vec<f64>>,
    pub rounds: usize,
    pub best_round: usize,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
}

/// Relative decrease of the monitored loss that counts as an improvement.
const MIN_RELATIVE_IMPROVEMENT: f64 = 1e-10;

/// Boosts one shallow tree per term per round, visiting terms in order.
/// `f_train` / `f_val` hold the starting link-scale predictions and are
/// advanced in place. Early stopping monitors validation loss (training loss
/// when there are no validation rows); the tables at the best round are
/// returned.
pub(crate) fn boost(
    terms: &[Term],
    objective: Objective,
    y_train: &[f64],
    y_val: &[f64],
    f_train: &mut [f64],
    f_val: &mut [f64],
    config: &TrainConfig,
) -> BoostResult {
    let mut tables: Vec<Vec<f64>> = terms.iter().map(|t| vec![0.0; t.n_cells()]).collect();
    let mut best_tables = tables.clone();
    let mut train_loss = vec![objective.loss(y_train, f_train)];
    let mut validation_loss = vec![objective.loss(y_val, f_val)];
    let monitor_val = !y_val.is_empty();
    let monitored = |train: &[f64], val: &[f64]| if monitor_val { *val.last().unwrap() } else { *train.last().unwrap() };
    let mut best_loss = monitored(&train_loss, &validation_loss);
    let mut best_round = 0;
    let mut rounds = 0;

    let mut hists: Vec<GridHistogram> = terms.iter().map(|t| GridHistogram::new(t.rows, t.cols)).collect();
    let mut update: Vec<Vec<f64>> = terms.iter().map(|t| vec![0.0; t.n_cells()]).collect();

    for round in 1..=config.max_rounds {
        for (k, term) in terms.iter().enumerate() {
            let hist = &mut hists[k];
            hist.clear();
            match objective {
                Objective::SquaredError => {
                    for ((&c, &y), &f) in term.train_cells.iter().zip(y_train).zip(f_train.iter()) {
                        let c = c as usize;
                        hist.grad[c] += y - f;
                        hist.count[c] += 1;
                    }
                    for (h, &n) in hist.hess.iter_mut().zip(&hist.count) {
                        *h = n as f64;
                    }
                }
                Objective::LogLoss => {
                    for ((&c, &y), &f) in term.train_cells.iter().zip(y_train).zip(f_train.iter()) {
                        let c = c as usize;
                        let p = sigmoid(f);
                        hist.grad[c] += y - p;
                        hist.hess[c] += p * (1.0 - p);
                        hist.count[c] += 1;
                    }
                }
            }
            let upd = &mut update[k];
            grow(hist, config.max_leaves, upd);
            for v in upd.iter_mut() {
                *v *= config.learning_rate;
            }
            for (t, v) in tables[k].iter_mut().zip(upd.iter()) {
                *t += v;
            }
            for (f, &c) in f_train.iter_mut().zip(&term.train_cells) {
                *f += upd[c as usize];
            }
            for (f, &c) in f_val.iter_mut().zip(&term.val_cells) {
                *f += upd[c as usize];
            }
        }
        rounds = round;
        train_loss.push(objective.loss(y_train, f_train));
        validation_loss.push(objective.loss(y_val, f_val));
        let current = monitored(&train_loss, &validation_loss);
        if current < best_loss - best_loss.abs() * MIN_RELATIVE_IMPROVEMENT {
            best_loss = current;
            best_round = round;
            for (dst, src) in best_tables.iter_mut().zip(&tables) {
                dst.copy_from_slice(src);
            }
        } else if round - best_round >= config.patience {
            break;
        }
    }

    BoostResult {
        tables: best_tables,
        rounds,
        best_round,
        train_loss,
        validation_loss,
    }
}

/// Subtracts each table's training-row mean and returns the removed means.
pub(crate) fn center(tables: &mut [Vec<f64>], terms: &[Term]) -> Vec<f64> {
    tables
        .iter_mut()
        .zip(terms)
        .map(|(table, term)| {
            let n = term.train_cells.len();
            if n == 0 {
                return 0.0;
            }
            let mut counts = vec![0usize; table.len()];
            for &c in &term.train_cells {
                counts[c as usize] += 1;
            }
            let mean = table.iter().zip(&counts).map(|(v, &c)| v * c as f64).sum::<f64>() / n as f64;
            for v in table.iter_mut() {
                *v -= mean;
            }
            mean
        })
        .collect()
}
