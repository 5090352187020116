//! Seeded synthetic audit datasets with known ground truth, used by the
//! acceptance tests and `gen-synthetic`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{AuditDataset, FeatureColumn};
use crate::error::Result;
use crate::gam::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    StopAndFrisk,
    UsedUnused,
    HiddenFeature,
    HiddenFeatureControl,
    Kinked,
    LogitLinear,
    Interaction,
    GenderFlip,
    Noise,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 9] = [
        SyntheticKind::StopAndFrisk,
        SyntheticKind::UsedUnused,
        SyntheticKind::HiddenFeature,
        SyntheticKind::HiddenFeatureControl,
        SyntheticKind::Kinked,
        SyntheticKind::LogitLinear,
        SyntheticKind::Interaction,
        SyntheticKind::GenderFlip,
        SyntheticKind::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::StopAndFrisk => "stop-and-frisk",
            SyntheticKind::UsedUnused => "used-unused",
            SyntheticKind::HiddenFeature => "hidden-feature",
            SyntheticKind::HiddenFeatureControl => "hidden-feature-control",
            SyntheticKind::Kinked => "kinked",
            SyntheticKind::LogitLinear => "logit-linear",
            SyntheticKind::Interaction => "interaction",
            SyntheticKind::GenderFlip => "gender-flip",
            SyntheticKind::Noise => "noise",
        }
    }

    pub fn parse(name: &str) -> Option<SyntheticKind> {
        SyntheticKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn generate(self, n: usize, seed: u64) -> Result<AuditDataset> {
        match self {
            SyntheticKind::StopAndFrisk => stop_and_frisk(n, seed),
            SyntheticKind::UsedUnused => used_unused(n, seed),
            SyntheticKind::HiddenFeature => hidden_feature(n, seed, &HiddenFeature::default()),
            SyntheticKind::HiddenFeatureControl => hidden_feature(
                n,
                seed,
                &HiddenFeature {
                    expose_hidden: true,
                    ..Default::default()
                },
            ),
            SyntheticKind::Kinked => kinked(n, seed),
            SyntheticKind::LogitLinear => logit_linear(n, seed),
            SyntheticKind::Interaction => interaction(n, seed),
            SyntheticKind::GenderFlip => gender_flip(n, seed, 0.5),
            SyntheticKind::Noise => noise(n, seed, 2),
        }
    }
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn uniform_column(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // two decimals keeps the CSV round trip exact and the bins readable
    (0..n).map(|_| (rng.random_range(-1.0..1.0f64) * 100.0).round() / 100.0).collect()
}

pub const STOP_AND_FRISK_FEATURES: usize = 40;

/// 40 binary stop circumstances; the score is exactly
/// `3 PS + 1 AS + 1 Bulge`. Outcomes depend on the same three features plus
/// two others.
pub fn stop_and_frisk(n: usize, seed: u64) -> Result<AuditDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = vec!["PS".to_string(), "AS".to_string(), "Bulge".to_string()];
    names.extend((4..=STOP_AND_FRISK_FEATURES).map(|i| format!("C{i:02}")));
    let rates: Vec<f64> = (0..STOP_AND_FRISK_FEATURES).map(|j| 0.1 + 0.4 * ((j * 7) % 10) as f64 / 10.0).collect();
    let mut columns = vec![Vec::with_capacity(n); STOP_AND_FRISK_FEATURES];
    for _ in 0..n {
        for (col, &p) in columns.iter_mut().zip(&rates) {
            col.push(if bernoulli(&mut rng, p) { 1.0 } else { 0.0 });
        }
    }
    let scores: Vec<f64> = (0..n).map(|r| 3.0 * columns[0][r] + columns[1][r] + columns[2][r]).collect();
    let outcomes = (0..n)
        .map(|r| {
            let z = -2.5 + 0.8 * columns[0][r] + 0.5 * columns[1][r] + 0.4 * columns[2][r] + 0.6 * columns[3][r]
                - 0.4 * columns[4][r];
            Some(bernoulli(&mut rng, sigmoid(z)))
        })
        .collect();
    let features = names.into_iter().zip(columns).map(|(n, c)| FeatureColumn::numeric(n, c)).collect();
    AuditDataset::new(features, scores, outcomes)
}

pub const USED_FEATURES: usize = 8;
pub const USED_UNUSED_FEATURES: usize = 16;

fn used_shape(j: usize, x: f64) -> f64 {
    match j % 4 {
        0 => x,
        1 => if x > 0.0 { 0.8 } else { -0.4 },
        2 => x * x - 1.0 / 3.0,
        _ => (2.0 * x).sin() * 0.7,
    }
}

/// 16 uniform features `u01..u16`. The score is an additive function of
/// `u01..u08` only; the outcome depends on all 16.
pub fn used_unused(n: usize, seed: u64) -> Result<AuditDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<Vec<f64>> = (0..USED_UNUSED_FEATURES).map(|_| uniform_column(&mut rng, n)).collect();
    let used = |r: usize| (0..USED_FEATURES).map(|j| used_shape(j, columns[j][r])).sum::<f64>();
    let scores: Vec<f64> = (0..n).map(used).collect();
    let outcomes = (0..n)
        .map(|r| {
            let unused: f64 = (USED_FEATURES..USED_UNUSED_FEATURES)
                .map(|j| 0.8 * used_shape(j, columns[j][r]))
                .sum();
            Some(bernoulli(&mut rng, sigmoid(-0.5 + 0.8 * scores[r] + unused)))
        })
        .collect();
    let features = columns
        .into_iter()
        .enumerate()
        .map(|(j, c)| FeatureColumn::numeric(format!("u{:02}", j + 1), c))
        .collect();
    AuditDataset::new(features, scores, outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenFeature {
    /// Weight of the hidden indicator in the black-box score.
    pub score_weight: f64,
    /// Weight of the hidden indicator in the outcome logit.
    pub outcome_weight: f64,
    pub hidden_rate: f64,
    /// Standard deviation of the black box's own noise.
    pub score_noise: f64,
    /// Include the hidden indicator among the audit features (control run).
    pub expose_hidden: bool,
}

impl Default for HiddenFeature {
    fn default() -> Self {
        HiddenFeature {
            score_weight: 1.5,
            outcome_weight: 1.5,
            hidden_rate: 0.25,
            score_noise: 0.5,
            expose_hidden: false,
        }
    }
}

/// Four uniform features plus a hidden indicator `z` that raises both the
/// score and the outcome probability. `z` appears as feature `hidden` only
/// when `expose_hidden` is set.
pub fn hidden_feature(n: usize, seed: u64, spec: &HiddenFeature) -> Result<AuditDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<Vec<f64>> = (0..4).map(|_| uniform_column(&mut rng, n)).collect();
    let z: Vec<f64> = (0..n)
        .map(|_| if bernoulli(&mut rng, spec.hidden_rate) { 1.0 } else { 0.0 })
        .collect();
    let noise = Normal::new(0.0, spec.score_noise.max(0.0)).expect("finite noise scale");
    let base = |r: usize| columns[0][r] + used_shape(1, columns[1][r]) + 0.5 * used_shape(2, columns[2][r]);
    let scores: Vec<f64> = (0..n)
        .map(|r| base(r) + spec.score_weight * z[r] + noise.sample(&mut rng))
        .collect();
    let outcomes = (0..n)
        .map(|r| Some(bernoulli(&mut rng, sigmoid(-1.5 + base(r) + spec.outcome_weight * z[r]))))
        .collect();
    let mut features: Vec<FeatureColumn> = columns
        .into_iter()
        .enumerate()
        .map(|(j, c)| FeatureColumn::numeric(format!("x{}", j + 1), c))
        .collect();
    if spec.expose_hidden {
        features.push(FeatureColumn::numeric("hidden", z));
    }
    AuditDataset::new(features, scores, outcomes)
}

/// Outcome probability of the kinked generator at score `s`: flat at 0.1 up
/// to 350, then rising steeply on the logit scale.
pub fn kinked_probability(s: f64) -> f64 {
    sigmoid(-2.2 + 0.03 * (s - 350.0).max(0.0))
}

/// Integer scores on 0..=500 whose outcome probability has a sharp upward
/// kink at 350.
pub fn kinked(n: usize, seed: u64) -> Result<AuditDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<Vec<f64>> = (0..2).map(|_| uniform_column(&mut rng, n)).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..=500u32) as f64).collect();
    let outcomes = scores.iter().map(|&s| Some(bernoulli(&mut rng, kinked_probability(s)))).collect();
    let features = columns
        .into_iter()
        .enumerate()
        .map(|(j, c)| FeatureColumn::numeric(format!("x{}", j + 1), c))
        .collect();
    AuditDataset::new(features, scores, outcomes)
}

/// Scores whose outcome probability is `sigmoid(0.5 s)`, so the score is
/// already linear in the logit.
pub fn logit_linear(n: usize, seed: u64) -> Result<AuditDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform_column(&mut rng, n);
    let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-6.0..6.0f64) * 10.0).round() / 10.0).collect();
    let outcomes = scores.iter().map(|&s| Some(bernoulli(&mut rng, sigmoid(0.5 * s)))).collect();
    AuditDataset::new(vec![FeatureColumn::numeric("x1", x)], scores, outcomes)
}

pub const INTERACTION_FEATURES: usize = 5;

/// Five uniform features; the score is additive plus
/// `2 * [x1 > 0] * [x2 > 0]` and Gaussian noise with sd 0.1.
pub fn interaction(n: usize, seed: u64) -> Result<AuditDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<Vec<f64>> = (0..INTERACTION_FEATURES).map(|_| uniform_column(&mut rng, n)).collect();
    let noise = Normal::new(0.0, 0.1).expect("finite noise scale");
    let scores: Vec<f64> = (0..n)
        .map(|r| {
            let additive: f64 = (0..INTERACTION_FEATURES).map(|j| 0.5 * used_shape(j, columns[j][r])).sum();
            let pair = if columns[0][r] > 0.0 && columns[1][r] > 0.0 { 2.0 } else { 0.0 };
            additive + pair + noise.sample(&mut rng)
        })
        .collect();
    let outcomes = scores.iter().map(|&s| Some(bernoulli(&mut rng, sigmoid(s - 1.0)))).collect();
    let features = columns
        .into_iter()
        .enumerate()
        .map(|(j, c)| FeatureColumn::numeric(format!("x{}", j + 1), c))
        .collect();
    AuditDataset::new(features, scores, outcomes)
}

/// A categorical `gender` feature where group `A` gets `+delta` in the
/// black-box score (already on the logit scale) but `-delta` in the outcome
/// logit; everything else is shared.
pub fn gender_flip(n: usize, seed: u64, delta: f64) -> Result<AuditDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform_column(&mut rng, n);
    let group: Vec<bool> = (0..n).map(|_| bernoulli(&mut rng, 0.5)).collect();
    let base: Vec<f64> = x.iter().map(|&v| -0.5 + v).collect();
    let scores: Vec<f64> = (0..n).map(|r| base[r] + if group[r] { delta } else { 0.0 }).collect();
    let outcomes = (0..n)
        .map(|r| Some(bernoulli(&mut rng, sigmoid(base[r] - if group[r] { delta } else { 0.0 }))))
        .collect();
    let gender = group.iter().map(|&a| Some(if a { "A" } else { "B" }.to_string())).collect();
    AuditDataset::new(
        vec![FeatureColumn::categorical("gender", gender), FeatureColumn::numeric("x1", x)],
        scores,
        outcomes,
    )
}

/// Features independent of both targets: standard normal scores and fair
/// coin outcomes.
pub fn noise(n: usize, seed: u64, n_features: usize) -> Result<AuditDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<Vec<f64>> = (0..n_features).map(|_| uniform_column(&mut rng, n)).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let scores: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let outcomes = (0..n).map(|_| Some(bernoulli(&mut rng, 0.5))).collect();
    let features = columns
        .into_iter()
        .enumerate()
        .map(|(j, c)| FeatureColumn::numeric(format!("x{}", j + 1), c))
        .collect();
    AuditDataset::new(features, scores, outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_csv, FeatureValues, SchemaConfig};

    #[test]
    fn stop_and_frisk_score_is_exact() {
        let d = stop_and_frisk(200, 1).unwrap();
        assert_eq!(d.n_features(), 40);
        let col = |j: usize| match &d.features()[j].values {
            FeatureValues::Numeric(v) => v.clone(),
            _ => unreachable!(),
        };
        let (ps, a, b) = (col(0), col(1), col(2));
        for r in 0..200 {
            assert_eq!(d.scores()[r], 3.0 * ps[r] + a[r] + b[r]);
        }
    }

    #[test]
    fn generators_are_seeded() {
        for kind in SyntheticKind::ALL {
            let a = kind.generate(100, 3).unwrap();
            assert_eq!(a, kind.generate(100, 3).unwrap(), "{}", kind.name());
            assert_ne!(a.fingerprint(), kind.generate(100, 4).unwrap().fingerprint());
            assert_eq!(SyntheticKind::parse(kind.name()), Some(kind));
        }
    }

    #[test]
    fn csv_round_trip() {
        for kind in SyntheticKind::ALL {
            let d = kind.generate(50, 9).unwrap();
            let bytes = d.to_csv("score", "outcome").unwrap();
            let back = parse_csv(&bytes, &SchemaConfig::new("score", "outcome")).unwrap();
            assert_eq!(back, d, "{}", kind.name());
        }
    }

    #[test]
    fn hidden_feature_control_exposes_indicator() {
        let spec = HiddenFeature::default();
        let hidden = hidden_feature(100, 5, &spec).unwrap();
        let control = hidden_feature(
            100,
            5,
            &HiddenFeature {
                expose_hidden: true,
                ..spec
            },
        )
        .unwrap();
        assert_eq!(hidden.scores(), control.scores());
        assert_eq!(control.n_features(), hidden.n_features() + 1);
    }
}
