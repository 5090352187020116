//! Pairwise interaction terms: exhaustive pair screening on a coarse grid,
//! then boosting of the selected surfaces with main effects frozen.

use serde::{Deserialize, Serialize};

use super::boost::{boost, center, Term};
use super::{check_targets, gather, AdditiveModel, InteractionSurface, Link, RowSplit, TrainConfig};
use crate::data::BinnedMatrix;
use crate::error::{Error, Result};

/// Coarse grid resolution per axis used for screening.
pub const SCREEN_GRID: usize = 16;

const BACKFIT_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pair: (usize, usize),
    /// Weighted residual sum of squares left by the best additive fit on the
    /// coarse grid that a full cell-means fit removes.
    pub score: f64,
}

/// Merges adjacent bins into at most [`SCREEN_GRID`] groups of roughly equal
/// row mass.
fn coarse_groups(counts: &[usize]) -> Vec<usize> {
    if counts.len() <= SCREEN_GRID {
        return (0..counts.len()).collect();
    }
    let total: usize = counts.iter().sum::<usize>().max(1);
    let mut before = 0usize;
    counts
        .iter()
        .map(|&c| {
            let mid = before as f64 + c as f64 / 2.0;
            before += c;
            ((mid * SCREEN_GRID as f64 / total as f64) as usize).min(SCREEN_GRID - 1)
        })
        .collect()
}

fn pair_score(sums: &[f64], counts: &[f64], rows: usize, cols: usize) -> f64 {
    let mean: Vec<f64> = sums
        .iter()
        .zip(counts)
        .map(|(&s, &n)| if n > 0.0 { s / n } else { 0.0 })
        .collect();
    let mut a = vec![0.0; rows];
    let mut b = vec![0.0; cols];
    for _ in 0..BACKFIT_ITERATIONS {
        for (r, ar) in a.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for c in 0..cols {
                let k = r * cols + c;
                num += counts[k] * (mean[k] - b[c]);
                den += counts[k];
            }
            *ar = if den > 0.0 { num / den } else { 0.0 };
        }
        for (c, bc) in b.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for r in 0..rows {
                let k = r * cols + c;
                num += counts[k] * (mean[k] - a[r]);
                den += counts[k];
            }
            *bc = if den > 0.0 { num / den } else { 0.0 };
        }
    }
    let mut score = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            let d = mean[k] - a[r] - b[c];
            score += counts[k] * d * d;
        }
    }
    score
}

/// Scores every feature pair by how much of the residual variance a coarse
/// 2-D cell-means fit explains beyond an additive fit on the same grid.
/// `residuals[i]` belongs to row `rows[i]`. Sorted by descending score, ties
/// broken by pair order.
pub fn screen_pairs(x: &BinnedMatrix, residuals: &[f64], rows: &[usize]) -> Vec<PairScore> {
    assert_eq!(residuals.len(), rows.len());
    let p = x.n_features();
    let groups: Vec<Vec<usize>> = (0..p)
        .map(|j| {
            let col = x.column(j);
            let mut counts = vec![0; x.n_bins()[j]];
            for &r in rows {
                counts[col[r] as usize] += 1;
            }
            coarse_groups(&counts)
        })
        .collect();
    let sizes: Vec<usize> = groups.iter().map(|g| g.iter().max().map_or(1, |m| m + 1)).collect();
    let cells: Vec<Vec<u8>> = (0..p)
        .map(|j| {
            let col = x.column(j);
            rows.iter().map(|&r| groups[j][col[r] as usize] as u8).collect()
        })
        .collect();

    let mut scores = Vec::with_capacity(p * p.saturating_sub(1) / 2);
    for i in 0..p {
        for j in i + 1..p {
            let (nr, nc) = (sizes[i], sizes[j]);
            let mut sums = vec![0.0; nr * nc];
            let mut counts = vec![0.0; nr * nc];
            for ((&gi, &gj), &res) in cells[i].iter().zip(&cells[j]).zip(residuals) {
                let k = gi as usize * nc + gj as usize;
                sums[k] += res;
                counts[k] += 1.0;
            }
            scores.push(PairScore {
                pair: (i, j),
                score: pair_score(&sums, &counts, nr, nc),
            });
        }
    }
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.pair.cmp(&b.pair)));
    scores
}

fn check_link_targets(model: &AdditiveModel, targets: &[f64], split: &RowSplit) -> Result<()> {
    if model.link == Link::Logistic {
        if let Some(&r) = split
            .train
            .iter()
            .chain(&split.validation)
            .find(|&&r| targets[r] != 0.0 && targets[r] != 1.0)
        {
            return Err(Error::InvalidDataset(format!("outcome {} at row {r} is not 0 or 1", targets[r])));
        }
    }
    Ok(())
}

/// Screens all pairs on the main-effect residuals of the training rows, keeps
/// the top `n_pairs` and boosts their surfaces. Main-effect shapes are frozen.
pub fn fit_interactions(
    model: &AdditiveModel,
    x: &BinnedMatrix,
    targets: &[f64],
    split: &RowSplit,
    n_pairs: usize,
    config: &TrainConfig,
) -> Result<AdditiveModel> {
    let p = x.n_features();
    let available = p * p.saturating_sub(1) / 2;
    if n_pairs > available {
        return Err(Error::TooManyPairs {
            requested: n_pairs,
            available,
        });
    }
    if n_pairs == 0 {
        return Ok(model.clone());
    }
    check_targets(targets, x, split)?;
    check_link_targets(model, targets, split)?;
    let base = model.main_effects_only();
    let f = base.predict_link_rows(x, &split.train)?;
    let objective = model.link.objective();
    let residuals: Vec<f64> = split
        .train
        .iter()
        .zip(&f)
        .map(|(&r, &f)| objective.pseudo_residual(targets[r], f))
        .collect();
    let pairs: Vec<(usize, usize)> = screen_pairs(x, &residuals, &split.train)
        .into_iter()
        .take(n_pairs)
        .map(|s| s.pair)
        .collect();
    fit_interactions_on(model, x, targets, split, &pairs, config)
}

/// Boosts surfaces for the given pairs on top of the model's main effects.
/// Any surfaces already on `model` are replaced.
pub fn fit_interactions_on(
    model: &AdditiveModel,
    x: &BinnedMatrix,
    targets: &[f64],
    split: &RowSplit,
    pairs: &[(usize, usize)],
    config: &TrainConfig,
) -> Result<AdditiveModel> {
    config.validate()?;
    check_targets(targets, x, split)?;
    check_link_targets(model, targets, split)?;
    let base = model.main_effects_only();
    if pairs.is_empty() {
        return Ok(base);
    }
    for &(i, j) in pairs {
        if i == j || i >= x.n_features() || j >= x.n_features() {
            return Err(Error::Config(format!("invalid interaction pair ({i}, {j})")));
        }
    }
    let n_bins = x.n_bins();
    let terms: Vec<Term> = pairs
        .iter()
        .map(|&(i, j)| {
            let (ci, cj) = (x.column(i), x.column(j));
            let cell = |r: usize| (ci[r] as usize * n_bins[j] + cj[r] as usize) as u32;
            Term {
                rows: n_bins[i],
                cols: n_bins[j],
                train_cells: split.train.iter().map(|&r| cell(r)).collect(),
                val_cells: split.validation.iter().map(|&r| cell(r)).collect(),
            }
        })
        .collect();
    let y_train = gather(targets, &split.train);
    let y_val = gather(targets, &split.validation);
    let mut f_train = base.predict_link_rows(x, &split.train)?;
    let mut f_val = base.predict_link_rows(x, &split.validation)?;
    let mut result = boost(
        &terms,
        model.link.objective(),
        &y_train,
        &y_val,
        &mut f_train,
        &mut f_val,
        config,
    );
    let means = center(&mut result.tables, &terms);

    let mut out = base;
    for m in means {
        out.intercept += m;
    }
    out.interactions = pairs
        .iter()
        .zip(result.tables)
        .map(|(&(i, j), values)| InteractionSurface {
            features: (i, j),
            names: (x.names()[i].clone(), x.names()[j].clone()),
            n_rows: n_bins[i],
            n_cols: n_bins[j],
            values,
        })
        .collect();
    out.meta.interaction_rounds = result.rounds;
    Ok(out)
}
