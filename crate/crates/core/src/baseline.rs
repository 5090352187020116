//! Linear mimic and outcome models: ridge least squares and L2-regularized
//! logistic regression over raw numeric values and one-hot categoricals.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationMap;
use crate::data::{AuditDataset, BinLayout, FeatureSchema, FeatureValues};
use crate::distill::{fold_metrics, outcome_split, BagPlan, FoldMetrics};
use crate::error::{Error, Result};
use crate::gam::{sigmoid, Link};

pub const DEFAULT_L2: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
const MAX_NEWTON_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncodedColumn {
    /// Raw value; missing cells take `fill` (the mean at fit time).
    Numeric { feature: String, fill: f64 },
    /// 1 when the cell equals `category`, else 0 (including missing and
    /// unseen values).
    OneHot { feature: String, category: String },
}

impl EncodedColumn {
    pub fn name(&self) -> String {
        match self {
            EncodedColumn::Numeric { feature, .. } => feature.clone(),
            EncodedColumn::OneHot { feature, category } => format!("{feature}={category}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEncoder {
    pub columns: Vec<EncodedColumn>,
}

/// Dense row-major design without the intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Self {
        let n_cols = names.len();
        assert!(rows.iter().all(|r| r.len() == n_cols), "ragged design rows");
        DesignMatrix {
            n_rows: rows.len(),
            n_cols,
            names,
            values: rows.concat(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn select(&self, rows: &[usize]) -> DesignMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        DesignMatrix {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            names: self.names.clone(),
            values,
        }
    }
}

impl LinearEncoder {
    /// Numeric fills are the column means of `data`; categories come from the
    /// schema so the encoding matches the binned models.
    pub fn fit(data: &AuditDataset, schema: &FeatureSchema) -> Result<Self> {
        let mut columns = Vec::new();
        for fb in &schema.features {
            let col = data
                .features()
                .iter()
                .find(|f| f.name == fb.name)
                .ok_or_else(|| Error::SchemaMismatch(format!("schema feature '{}' missing from data", fb.name)))?;
            match (&col.values, &fb.layout) {
                (FeatureValues::Numeric(v), BinLayout::Numeric { .. }) => {
                    let present: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
                    let fill = if present.is_empty() {
                        0.0
                    } else {
                        present.iter().sum::<f64>() / present.len() as f64
                    };
                    columns.push(EncodedColumn::Numeric {
                        feature: fb.name.clone(),
                        fill,
                    });
                }
                (FeatureValues::Categorical(_), BinLayout::Categorical { categories }) => {
                    columns.extend(categories.iter().map(|c| EncodedColumn::OneHot {
                        feature: fb.name.clone(),
                        category: c.clone(),
                    }));
                }
                _ => {
                    return Err(Error::SchemaMismatch(format!(
                        "feature '{}' kind differs between data and schema",
                        fb.name
                    )))
                }
            }
        }
        Ok(LinearEncoder { columns })
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(EncodedColumn::name).collect()
    }

    pub fn encode(&self, data: &AuditDataset) -> Result<DesignMatrix> {
        let n = data.n_rows();
        let d = self.columns.len();
        let mut values = vec![0.0; n * d];
        for (c, column) in self.columns.iter().enumerate() {
            let feature = match column {
                EncodedColumn::Numeric { feature, .. } | EncodedColumn::OneHot { feature, .. } => feature,
            };
            let col = data
                .features()
                .iter()
                .find(|f| &f.name == feature)
                .ok_or_else(|| Error::SchemaMismatch(format!("feature '{feature}' missing from data")))?;
            match (column, &col.values) {
                (EncodedColumn::Numeric { fill, .. }, FeatureValues::Numeric(v)) => {
                    for (r, &x) in v.iter().enumerate() {
                        values[r * d + c] = if x.is_nan() { *fill } else { x };
                    }
                }
                (EncodedColumn::OneHot { category, .. }, FeatureValues::Categorical(v)) => {
                    for (r, x) in v.iter().enumerate() {
                        if x.as_deref() == Some(category.as_str()) {
                            values[r * d + c] = 1.0;
                        }
                    }
                }
                _ => return Err(Error::SchemaMismatch(format!("feature '{feature}' changed kind"))),
            }
        }
        Ok(DesignMatrix {
            n_rows: n,
            n_cols: d,
            names: self.names(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub link: Link,
    pub intercept: f64,
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub l2: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Objective value after each Newton iteration (logistic link only).
    pub loss_trace: Vec<f64>,
}

impl LinearModel {
    pub fn zero(link: Link, names: Vec<String>) -> Self {
        LinearModel {
            link,
            intercept: 0.0,
            weights: vec![0.0; names.len()],
            names,
            l2: 0.0,
            iterations: 0,
            gradient_norm: 0.0,
            converged: true,
            loss_trace: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn predict_linear_link(model: &LinearModel, x: &DesignMatrix) -> Result<Vec<f64>> {
    if x.n_cols != model.weights.len() {
        return Err(Error::SchemaMismatch(format!(
            "design has {} columns, model has {} weights",
            x.n_cols,
            model.weights.len()
        )));
    }
    Ok((0..x.n_rows)
        .map(|r| model.intercept + x.row(r).iter().zip(&model.weights).map(|(a, w)| a * w).sum::<f64>())
        .collect())
}

/// Affine map followed by the inverse link.
pub fn predict_linear(model: &LinearModel, x: &DesignMatrix) -> Result<Vec<f64>> {
    let f = predict_linear_link(model, x)?;
    Ok(f.into_iter().map(|v| model.link.apply(v)).collect())
}

fn to_matrix(x: &DesignMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.n_rows, x.n_cols, &x.values)
}

/// Minimizes `(1/2n) sum (y - f)^2 + (l2/2) |w|^2` (identity link) or the mean
/// log loss plus the same penalty (logistic link). The intercept is not
/// penalized.
pub fn train_linear(x: &DesignMatrix, targets: &[f64], link: Link, l2: f64) -> Result<LinearModel> {
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::Config(format!("l2 must be a finite non-negative number, got {l2}")));
    }
    if targets.len() != x.n_rows {
        return Err(Error::InvalidDataset(format!(
            "{} targets for {} design rows",
            targets.len(),
            x.n_rows
        )));
    }
    if x.n_rows == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if let Some(t) = targets.iter().find(|t| !t.is_finite()) {
        return Err(Error::InvalidDataset(format!("non-finite target {t}")));
    }
    match link {
        Link::Identity => ridge(x, targets, l2),
        Link::Logistic => logistic(x, targets, l2),
    }
}

fn ridge(x: &DesignMatrix, y: &[f64], l2: f64) -> Result<LinearModel> {
    let n = x.n_rows as f64;
    let d = x.n_cols;
    let mut z = to_matrix(x);
    let means: Vec<f64> = (0..d).map(|c| z.column(c).sum() / n).collect();
    for (c, m) in means.iter().enumerate() {
        z.column_mut(c).add_scalar_mut(-m);
    }
    let y_mean = y.iter().sum::<f64>() / n;
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));

    let mut a = z.tr_mul(&z) / n;
    for i in 0..d {
        a[(i, i)] += l2;
    }
    let b = z.tr_mul(&yc) / n;
    if l2 == 0.0 && d > 0 {
        let eig = a.clone().symmetric_eigenvalues();
        let max = eig.max();
        if eig.min() <= 1e-12 * max.max(f64::MIN_POSITIVE) {
            return Err(Error::SingularDesign);
        }
    }
    let w = a.cholesky().ok_or(Error::SingularDesign)?.solve(&b);
    let intercept = y_mean - w.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>();
    let residual = &yc - &z * &w;
    let mut grad = z.tr_mul(&residual) / n;
    grad -= &w * l2;
    Ok(LinearModel {
        link: Link::Identity,
        intercept,
        names: x.names.clone(),
        weights: w.iter().copied().collect(),
        l2,
        iterations: 1,
        gradient_norm: grad.norm(),
        converged: true,
        loss_trace: Vec::new(),
    })
}

fn softplus(f: f64) -> f64 {
    if f > 0.0 {
        f + (-f).exp().ln_1p()
    } else {
        f.exp().ln_1p()
    }
}

fn logistic_objective(z: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>, l2: f64) -> f64 {
    let f = z * theta;
    let n = y.len() as f64;
    let loss: f64 = f.iter().zip(y.iter()).map(|(&f, &y)| softplus(f) - y * f).sum::<f64>() / n;
    let penalty: f64 = theta.iter().skip(1).map(|w| w * w).sum::<f64>() * l2 / 2.0;
    loss + penalty
}

fn logistic(x: &DesignMatrix, y: &[f64], l2: f64) -> Result<LinearModel> {
    if let Some(t) = y.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidDataset(format!("logistic target {t} is not 0 or 1")));
    }
    let n = x.n_rows;
    let positives = y.iter().filter(|&&t| t == 1.0).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClassTraining);
    }
    let d = x.n_cols + 1;
    let mut z = DMatrix::from_element(n, d, 1.0);
    z.view_mut((0, 1), (n, d - 1)).copy_from(&to_matrix(x));
    let yv = DVector::from_column_slice(y);
    let mut penalty = DVector::from_element(d, l2);
    penalty[0] = 0.0;

    let rate = positives as f64 / n as f64;
    let mut theta = DVector::zeros(d);
    theta[0] = (rate / (1.0 - rate)).ln();
    let mut loss = logistic_objective(&z, &yv, &theta, l2);
    let mut trace = vec![loss];
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    while iterations < MAX_NEWTON_ITERATIONS {
        let f = &z * &theta;
        let p = f.map(sigmoid);
        let mut grad = z.tr_mul(&(&p - &yv)) / n as f64;
        grad += penalty.component_mul(&theta);
        grad_norm = grad.norm();
        if grad_norm <= GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        let w = p.map(|p| p * (1.0 - p));
        let mut zw = z.clone();
        for (mut row, &wi) in zw.row_iter_mut().zip(w.iter()) {
            row *= wi;
        }
        let mut h = z.tr_mul(&zw) / n as f64;
        for i in 0..d {
            h[(i, i)] += penalty[i];
        }
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                let jitter = 1e-10 * (h.trace() / d as f64).max(1e-300);
                for i in 0..d {
                    h[(i, i)] += jitter;
                }
                h.cholesky().ok_or(Error::SingularDesign)?.solve(&grad)
            }
        };
        // backtracking on the penalized objective (Armijo condition)
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut next = &theta - &step * t;
        let mut next_loss = logistic_objective(&z, &yv, &next, l2);
        while next_loss > loss - 1e-4 * t * slope && t > 1e-12 {
            t *= 0.5;
            next = &theta - &step * t;
            next_loss = logistic_objective(&z, &yv, &next, l2);
        }
        iterations += 1;
        if next_loss > loss {
            // no descent possible at machine precision
            break;
        }
        theta = next;
        loss = next_loss;
        trace.push(loss);
    }
    Ok(LinearModel {
        link: Link::Logistic,
        intercept: theta[0],
        names: x.names.clone(),
        weights: theta.iter().skip(1).copied().collect(),
        l2,
        iterations,
        gradient_norm: grad_norm,
        converged,
        loss_trace: trace,
    })
}

/// Linear mimic/outcome pairs on the same bags as the additive ensembles,
/// indexed `k * inner + l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPaired {
    pub encoder: LinearEncoder,
    pub l2: f64,
    pub outer: usize,
    pub inner: usize,
    pub mimic: Vec<LinearModel>,
    pub outcome: Vec<LinearModel>,
}

impl LinearPaired {
    fn fold_link(models: &[LinearModel], inner: usize, k: usize, x: &DesignMatrix) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; x.n_rows];
        for m in &models[k * inner..(k + 1) * inner] {
            for (a, p) in acc.iter_mut().zip(predict_linear_link(m, x)?) {
                *a += p;
            }
        }
        acc.iter_mut().for_each(|a| *a /= inner as f64);
        Ok(acc)
    }
}

/// Trains the linear baseline on every bag's training rows. Validation rows
/// are unused; the linear fits have no early stopping.
pub fn train_paired_linear(
    data: &AuditDataset,
    schema: &FeatureSchema,
    calibration: Option<&CalibrationMap>,
    plan: &BagPlan,
    l2: f64,
) -> Result<LinearPaired> {
    let encoder = LinearEncoder::fit(data, schema)?;
    let x = encoder.encode(data)?;
    let targets = match calibration {
        Some(map) => map.apply(data.scores()),
        None => data.scores().to_vec(),
    };
    let outcomes = data.outcome_targets();
    let trained: Vec<(LinearModel, LinearModel)> = plan
        .splits
        .par_iter()
        .map(|split| {
            let osplit = outcome_split(split, data);
            let pick = |v: &[f64], rows: &[usize]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
            let mimic = train_linear(&x.select(&split.train), &pick(&targets, &split.train), Link::Identity, l2)?;
            let outcome = train_linear(
                &x.select(&osplit.train),
                &pick(&outcomes, &osplit.train),
                Link::Logistic,
                l2,
            )?;
            Ok((mimic, outcome))
        })
        .collect::<Result<_>>()?;
    let (mimic, outcome) = trained.into_iter().unzip();
    Ok(LinearPaired {
        encoder,
        l2,
        outer: plan.outer,
        inner: plan.inner,
        mimic,
        outcome,
    })
}

/// Fold metrics of the linear baseline on the same outer test rows as the
/// additive ensembles.
pub fn linear_fidelity(
    paired: &LinearPaired,
    data: &AuditDataset,
    calibration: Option<&CalibrationMap>,
    plan: &BagPlan,
) -> Result<FoldMetrics> {
    let x = paired.encoder.encode(data)?;
    fold_metrics(
        plan,
        data,
        calibration,
        |k, rows| LinearPaired::fold_link(&paired.mimic, paired.inner, k, &x.select(rows)),
        |k, rows| LinearPaired::fold_link(&paired.outcome, paired.inner, k, &x.select(rows)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_design(n: usize) -> DesignMatrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..5).map(|b| ((i >> b) & 1) as f64).collect())
            .collect();
        DesignMatrix::from_rows((0..5).map(|b| format!("x{b}")).collect(), &rows)
    }

    #[test]
    fn recovers_exact_linear_targets() {
        let x = binary_design(64);
        let y: Vec<f64> = (0..64).map(|r| 3.0 * x.row(r)[0] + x.row(r)[1] + x.row(r)[2]).collect();
        let m = train_linear(&x, &y, Link::Identity, 0.0).unwrap();
        let expected = [3.0, 1.0, 1.0, 0.0, 0.0];
        for (w, e) in m.weights.iter().zip(expected) {
            assert!((w - e).abs() < 1e-6, "{:?}", m.weights);
        }
        assert!(m.intercept.abs() < 1e-6);
        let pred = predict_linear(&m, &x).unwrap();
        let worst = pred.iter().zip(&y).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-8);
        // all features on
        assert!((pred[31] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn zero_targets_give_zero_model() {
        let x = binary_design(32);
        let m = train_linear(&x, &[0.0; 32], Link::Identity, 0.0).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-12));
        assert!(m.intercept.abs() < 1e-12);
    }

    #[test]
    fn zero_model_predictions() {
        let x = binary_design(4);
        let names = x.names.clone();
        assert_eq!(predict_linear(&LinearModel::zero(Link::Identity, names.clone()), &x).unwrap(), vec![0.0; 4]);
        assert_eq!(predict_linear(&LinearModel::zero(Link::Logistic, names), &x).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn singular_design_without_penalty() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let x = DesignMatrix::from_rows(vec!["a".into(), "b".into()], &rows);
        let y: Vec<f64> = (0..10).map(f64::from).collect();
        assert!(matches!(train_linear(&x, &y, Link::Identity, 0.0), Err(Error::SingularDesign)));
        assert!(train_linear(&x, &y, Link::Identity, 1e-3).is_ok());
    }

    #[test]
    fn separable_logistic_stays_finite() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 10.0]).collect();
        let x = DesignMatrix::from_rows(vec!["a".into()], &rows);
        let y: Vec<f64> = (0..40).map(|i| if i >= 20 { 1.0 } else { 0.0 }).collect();
        let m = train_linear(&x, &y, Link::Logistic, 0.01).unwrap();
        assert!(m.converged);
        assert!(m.gradient_norm <= GRADIENT_TOLERANCE);
        assert!(m.weights[0].is_finite() && m.weights[0] > 0.0);
        assert!(m.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn logistic_errors() {
        let x = binary_design(8);
        assert!(matches!(train_linear(&x, &[1.0; 8], Link::Logistic, 0.1), Err(Error::SingleClassTraining)));
        let mut y = vec![0.0; 8];
        y[0] = 0.5;
        assert!(matches!(train_linear(&x, &y, Link::Logistic, 0.1), Err(Error::InvalidDataset(_))));
        assert!(matches!(train_linear(&x, &[0.0; 8], Link::Identity, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn one_hot_encoding_ignores_unseen_categories() {
        use crate::data::{fit_schema, FeatureColumn};
        let cat = |v: &[&str]| v.iter().map(|s| Some(s.to_string())).collect::<Vec<_>>();
        let train = AuditDataset::new(
            vec![
                FeatureColumn::categorical("c", cat(&["a", "b", "a"])),
                FeatureColumn::numeric("n", vec![1.0, f64::NAN, 3.0]),
            ],
            vec![0.0, 1.0, 2.0],
            vec![Some(true), Some(false), Some(true)],
        )
        .unwrap();
        let schema = fit_schema(&train, 16).unwrap();
        let enc = LinearEncoder::fit(&train, &schema).unwrap();
        assert_eq!(enc.names(), vec!["c=a", "c=b", "n"]);
        let x = enc.encode(&train).unwrap();
        assert_eq!(x.row(1), &[0.0, 1.0, 2.0]);
        let test = AuditDataset::new(
            vec![
                FeatureColumn::categorical("c", cat(&["z"])),
                FeatureColumn::numeric("n", vec![5.0]),
            ],
            vec![0.0],
            vec![None],
        )
        .unwrap();
        assert_eq!(enc.encode(&test).unwrap().row(0), &[0.0, 0.0, 5.0]);
    }
}
