use distill_audit::baseline::{linear_fidelity, train_paired_linear, DEFAULT_L2};
use distill_audit::calibrate::{diagnose, DEFAULT_LINEARITY_THRESHOLD};
use distill_audit::compare::{curve, difference, summarize};
use distill_audit::data::{bin, fit_schema, AuditDataset, FeatureColumn, DEFAULT_MAX_BINS};
use distill_audit::distill::{fidelity, fold_metrics, outcome_split, plan_bags, train_paired, PairedEnsembles};
use distill_audit::gam::TrainConfig;
use distill_audit::missing::{correlation_test, error_pairs, ErrorPairs, MimicErrorScale};
use distill_audit::synth::{self, HiddenFeature};
use distill_audit::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn paired(data: &AuditDataset, outer: usize, inner: usize, seed: u64) -> PairedEnsembles {
    let schema = fit_schema(data, DEFAULT_MAX_BINS).unwrap();
    let plan = plan_bags(data.n_rows(), outer, inner, seed).unwrap();
    train_paired(data, &schema, None, &plan, &TrainConfig::default()).unwrap()
}

#[test]
fn two_by_two_plan_gives_four_models_each() {
    let data = synth::hidden_feature(600, 1, &HiddenFeature::default()).unwrap();
    let p = paired(&data, 2, 2, 1);
    assert_eq!(p.mimic.models.len(), 4);
    assert_eq!(p.outcome.models.len(), 4);
}

#[test]
fn mimic_and_outcome_share_rows_and_runs_repeat() {
    let mut data = synth::hidden_feature(800, 2, &HiddenFeature::default()).unwrap();
    let p = paired(&data, 2, 3, 2);
    // with every row labelled the outcome split is the mimic split itself
    for split in &p.plan.splits {
        assert_eq!(&outcome_split(split, &data), split);
    }
    assert_eq!(p, paired(&data, 2, 3, 2));

    // score-only rows drop out of the outcome split and nothing else changes
    let features = data.features().to_vec();
    let mut outcomes = data.outcomes().to_vec();
    outcomes[3] = None;
    data = AuditDataset::new(features, data.scores().to_vec(), outcomes).unwrap();
    for split in &p.plan.splits {
        let o = outcome_split(split, &data);
        let expect: Vec<usize> = split.train.iter().copied().filter(|&r| r != 3).collect();
        assert_eq!(o.train, expect);
    }
}

#[test]
fn mean_curves_add_up_to_mean_predictions() {
    let data = synth::used_unused(1500, 3).unwrap();
    let p = paired(&data, 3, 2, 3);
    let x = bin(&data, &p.schema).unwrap();
    for ens in [&p.mimic, &p.outcome] {
        let preds: Vec<Vec<f64>> = ens.models.iter().map(|m| m.predict_link(&x).unwrap()).collect();
        let curves: Vec<_> = (0..x.n_features()).map(|j| curve(ens, j).unwrap()).collect();
        for r in 0..data.n_rows() {
            let mean_pred = preds.iter().map(|p| p[r]).sum::<f64>() / preds.len() as f64;
            let additive = ens.mean_intercept() + curves.iter().enumerate().map(|(j, c)| c.mean[x.get(r, j)]).sum::<f64>();
            assert!((mean_pred - additive).abs() <= 1e-9, "row {r}: {mean_pred} vs {additive}");
        }
    }
}

#[test]
fn exact_mimic_has_zero_rmse_and_constant_outcome_half_auc() {
    let data = synth::hidden_feature(400, 4, &HiddenFeature::default()).unwrap();
    let plan = plan_bags(data.n_rows(), 3, 2, 4).unwrap();
    let m = fold_metrics(
        &plan,
        &data,
        None,
        |_, rows| Ok(rows.iter().map(|&r| data.scores()[r]).collect()),
        |_, rows| Ok(vec![0.0; rows.len()]),
    )
    .unwrap();
    assert!(m.rmse_per_fold.iter().all(|&e| e == 0.0));
    assert!(m.auc_per_fold.iter().all(|&a| a == Some(0.5)));
}

#[test]
fn linear_baseline_is_scored_on_the_gam_test_rows() {
    let data = synth::stop_and_frisk(2000, 5).unwrap();
    let schema = fit_schema(&data, DEFAULT_MAX_BINS).unwrap();
    let plan = plan_bags(data.n_rows(), 2, 2, 5).unwrap();
    let linear = train_paired_linear(&data, &schema, None, &plan, DEFAULT_L2).unwrap();
    let m = linear_fidelity(&linear, &data, None, &plan).unwrap();
    assert_eq!(m.rmse_per_fold.len(), plan.test.len());
    // the score is linear in the features, so the ridge mimic is near exact
    assert!(m.rmse.unwrap().mean < 1e-3);
}

#[test]
fn hidden_feature_raises_mimic_error() {
    let run = |expose: bool| {
        let spec = HiddenFeature {
            expose_hidden: expose,
            ..HiddenFeature::default()
        };
        let data = synth::hidden_feature(4000, 6, &spec).unwrap();
        let p = paired(&data, 2, 2, 6);
        (fidelity(&p, &data).unwrap().main_effects.rmse.unwrap().mean, p, data)
    };
    let (hidden_rmse, p, data) = run(false);
    let (control_rmse, _, _) = run(true);
    assert!(hidden_rmse > control_rmse, "{hidden_rmse} vs {control_rmse}");

    let pairs = error_pairs(&p, &data, MimicErrorScale::Calibrated).unwrap();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    assert!(var(&pairs.mimic) > 0.0 && var(&pairs.outcome) > 0.0);
    assert!(pairs.mimic.iter().chain(&pairs.outcome).all(|&e| e >= 0.0));
    assert_eq!(pairs.len() + pairs.never_held_out, data.n_rows());
    let first = p.plan.first_test_fold();
    for (&r, &k) in pairs.row.iter().zip(&pairs.fold) {
        assert_eq!(first[r], Some(k));
    }
}

#[test]
fn hidden_feature_correlation_grows_with_its_outcome_weight() {
    let estimates: Vec<[f64; 3]> = [0.5, 1.5, 3.0]
        .iter()
        .map(|&w| {
            let spec = HiddenFeature {
                outcome_weight: w,
                ..HiddenFeature::default()
            };
            let data = synth::hidden_feature(6000, 7, &spec).unwrap();
            let p = paired(&data, 3, 2, 7);
            let pairs = error_pairs(&p, &data, MimicErrorScale::Calibrated).unwrap();
            let r = correlation_test(&pairs, 100, 7).unwrap();
            [r.pearson.estimate, r.spearman.estimate, r.kendall.estimate]
        })
        .collect();
    for s in 0..3 {
        assert!(estimates[0][s] < estimates[1][s] && estimates[1][s] < estimates[2][s], "{estimates:?}");
    }
}

#[test]
fn independent_error_margins_give_intervals_around_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mimic: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
    let outcome: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
    let r = correlation_test(&ErrorPairs::from_errors(mimic, outcome).unwrap(), 1000, 8).unwrap();
    for e in [r.pearson, r.spearman, r.kendall] {
        assert!(e.contains_zero(), "{e:?}");
    }
}

#[test]
fn zero_error_margins_are_degenerate() {
    let outcome: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
    let err = correlation_test(&ErrorPairs::from_errors(vec![0.0; 50], outcome.clone()).unwrap(), 100, 0);
    assert!(matches!(err, Err(Error::DegenerateMargin(_))));
    let err = correlation_test(&ErrorPairs::from_errors(outcome, vec![0.0; 50]).unwrap(), 100, 0);
    assert!(matches!(err, Err(Error::DegenerateMargin(_))));
}

#[test]
fn gender_flip_difference_is_twice_delta() {
    let delta = 0.5;
    let data = synth::gender_flip(20_000, 9, delta).unwrap();
    let p = paired(&data, 3, 3, 9);
    let gender = p.schema.feature_index("gender").unwrap();
    let bins = &p.schema.features[gender];
    let (a, b) = (bins.category_bin(Some("A")), bins.category_bin(Some("B")));
    let d = difference(&p, gender).unwrap();
    // shapes are centred, so A's bin carries +delta on one side and -delta
    // on the other relative to B
    let gap = d.mean[a] - d.mean[b];
    assert!((gap - 2.0 * delta).abs() <= 0.15, "gap {gap}");
    assert!(d.significant[a] && d.significant[b]);
}

#[test]
fn score_equal_to_true_logit_gives_matching_shapes() {
    let data = synth::gender_flip(20_000, 10, 0.0).unwrap();
    let p = paired(&data, 3, 3, 10);
    let gender = p.schema.feature_index("gender").unwrap();
    let d = difference(&p, gender).unwrap();
    let bins = &p.schema.features[gender];
    for c in ["A", "B"] {
        let b = bins.category_bin(Some(c));
        assert!(d.mean[b].abs() <= 0.1, "{c}: {}", d.mean[b]);
    }
}

#[test]
fn no_signal_features_show_no_discrepancy() {
    let data = synth::noise(4000, 11, 2).unwrap();
    let schema = fit_schema(&data, 4).unwrap();
    let plan = plan_bags(data.n_rows(), 5, 5, 11).unwrap();
    let p = train_paired(&data, &schema, None, &plan, &TrainConfig::default()).unwrap();
    let cmp = summarize(&p).unwrap();
    for f in &cmp.features {
        assert!(f.discrepancy <= 0.05, "{}: {}", f.name, f.discrepancy);
        assert!(f.difference.significant.iter().all(|&s| !s), "{}: {:?}", f.name, f.difference.significant);
    }
}

#[test]
fn single_feature_dataset_gives_one_curve_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
    let scores: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    let outcomes = x.iter().map(|&v| Some(rng.random_bool(v))).collect();
    let data = AuditDataset::new(vec![FeatureColumn::numeric("x", x)], scores, outcomes).unwrap();
    let cmp = summarize(&paired(&data, 2, 2, 12)).unwrap();
    assert_eq!(cmp.features.len(), 1);
    assert_eq!(cmp.ranking, vec![0]);
}

#[test]
fn logit_linear_score_has_slope_one_half() {
    let data = synth::logit_linear(20_000, 13).unwrap();
    let outcomes: Vec<bool> = data.outcomes().iter().map(|o| *o == Some(true)).collect();
    let d = diagnose(data.scores(), &outcomes, None).unwrap();
    assert!((d.logit_line.slope - 0.5).abs() <= 0.05, "slope {}", d.logit_line.slope);
    assert!(d.linearity_residual < DEFAULT_LINEARITY_THRESHOLD);
}

#[test]
fn null_bands_cover_zero_in_most_bins() {
    let (mut covered, mut total) = (0usize, 0usize);
    for rep in 0..40u64 {
        let data = synth::noise(1000, 100 + rep, 2).unwrap();
        let schema = fit_schema(&data, 32).unwrap();
        let plan = plan_bags(data.n_rows(), 5, 5, rep).unwrap();
        let p = train_paired(&data, &schema, None, &plan, &TrainConfig::default()).unwrap();
        for (j, bins) in schema.features.iter().enumerate() {
            for ens in [&p.mimic, &p.outcome] {
                let c = curve(ens, j).unwrap();
                for b in (0..bins.n_value_bins()).filter(|&b| p.bin_counts[j][b] > 0) {
                    total += 1;
                    covered += usize::from(c.lower[b] <= 0.0 && 0.0 <= c.upper[b]);
                }
            }
        }
    }
    let coverage = covered as f64 / total as f64;
    assert!(coverage >= 0.90, "coverage {coverage} over {total} bins");
}
