// One line per acceptance criterion. Run with `cargo test --test acceptance`.
// Exits nonzero if any criterion fails; criteria needing external data skip.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use distill_audit::baseline::{train_linear, LinearEncoder};
use distill_audit::calibrate::{diagnose, fit_calibration, isotonic_blocks};
use distill_audit::compare::{curve, difference_of, summarize, Z_95};
use distill_audit::data::{bin, fit_schema, load_csv, AuditDataset, SchemaConfig, DEFAULT_MAX_BINS};
use distill_audit::distill::{fidelity, plan_bags, train_paired, BagEnsemble};
use distill_audit::gam::{
    fit_interactions_on, screen_pairs, train_regressor, AdditiveModel, Link, TrainConfig,
};
use distill_audit::metrics::rmse;
use distill_audit::missing::{correlation_test, error_pairs, ErrorPairs, MimicErrorScale};
use distill_audit::report::{run_audit, RunConfig};
use distill_audit::synth::{self, HiddenFeature};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok { Outcome::Pass(detail) } else { Outcome::Fail(detail) }
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are passed through; ignore them
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let criteria: [(usize, fn() -> Outcome); 10] = [
        (1, coefficient_recovery),
        (2, mimic_fidelity_floor),
        (3, used_unused_detection),
        (4, variance_formula),
        (5, band_coverage_under_null),
        (6, calibration_correctness),
        (7, missing_feature_test),
        (8, interaction_detection),
        (9, compas_spot_check),
        (10, audit_determinism),
    ];
    let mut failed = 0;
    for (n, run) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {n}: {tag} ({secs:.1}s) {detail}");
    }
    if failed > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS }
}

fn value_bin_mass(counts: &[usize], keep: impl Fn(usize) -> bool) -> f64 {
    let total: usize = counts.iter().sum();
    let kept: usize = counts.iter().enumerate().filter(|(b, _)| keep(*b)).map(|(_, c)| c).sum();
    kept as f64 / total as f64
}

// 1. Stop-and-Frisk analog, T = 50,000.
fn coefficient_recovery() -> Outcome {
    let start = Instant::now();
    let data = synth::stop_and_frisk(50_000, 1).unwrap();
    let schema = fit_schema(&data, DEFAULT_MAX_BINS).unwrap();
    let truth = |name: &str| match name {
        "PS" => 3.0,
        "AS" | "Bulge" => 1.0,
        _ => 0.0,
    };

    let encoder = LinearEncoder::fit(&data, &schema).unwrap();
    let design = encoder.encode(&data).unwrap();
    let linear = train_linear(&design, data.scores(), Link::Identity, 0.0).unwrap();
    let linear_err = linear
        .names
        .iter()
        .zip(&linear.weights)
        .map(|(n, w)| (w - truth(n)).abs())
        .fold(0.0, f64::max);

    let x = bin(&data, &schema).unwrap();
    let plan = plan_bags(data.n_rows(), 2, 2, 1).unwrap();
    let model = train_regressor(&x, data.scores(), plan.split(0, 0), &TrainConfig::default()).unwrap();
    let mut step_err: f64 = 0.0;
    let mut flat_max: f64 = 0.0;
    for (j, bins) in schema.features.iter().enumerate() {
        let h = &model.shapes[j].values;
        let (b0, b1) = (bins.numeric_bin(0.0), bins.numeric_bin(1.0));
        let t = truth(&bins.name);
        if t != 0.0 {
            step_err = step_err.max((h[b1] - h[b0] - t).abs());
        } else {
            flat_max = flat_max.max(h[b0].abs()).max(h[b1].abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        linear_err <= 1e-4 && step_err <= 0.05 && flat_max <= 0.05 && secs <= 120.0,
        format!(
            "linear max coef error {linear_err:.2e} (<= 1e-4), gam step error {step_err:.4} (<= 0.05), \
             gam flat max |h| {flat_max:.4} (<= 0.05), runtime {secs:.0}s (<= 120s)"
        ),
    )
}

// 2. Mimic fidelity on the deterministic linear-score generator.
fn mimic_fidelity_floor() -> Outcome {
    let data = synth::stop_and_frisk(20_000, 2).unwrap();
    let schema = fit_schema(&data, DEFAULT_MAX_BINS).unwrap();
    let plan = plan_bags(data.n_rows(), 2, 2, 2).unwrap();
    let paired = train_paired(&data, &schema, None, &plan, &TrainConfig::default()).unwrap();
    let fid = fidelity(&paired, &data).unwrap();
    let worst = fid.main_effects.rmse_per_fold.iter().copied().fold(0.0, f64::max);
    let spread = fid.main_effects.rmse.unwrap();
    verdict(
        worst <= 0.01,
        format!("test RMSE {:.2e} +/- {:.1e}, worst fold {worst:.2e} (<= 0.01)", spread.mean, spread.sd),
    )
}

// 3. Used/unused generator, T = 30,000, K = L = 5.
fn used_unused_detection() -> Outcome {
    let start = Instant::now();
    let data = synth::used_unused(30_000, 3).unwrap();
    let schema = fit_schema(&data, DEFAULT_MAX_BINS).unwrap();
    let plan = plan_bags(data.n_rows(), 5, 5, 3).unwrap();
    let paired = train_paired(&data, &schema, None, &plan, &TrainConfig::default()).unwrap();
    let cmp = summarize(&paired).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let mut unused_mass = f64::INFINITY;
    let mut used_ok = true;
    let mut outcome_ok = true;
    for f in &cmp.features {
        let used = f.feature < synth::USED_FEATURES;
        let excludes = |c: &distill_audit::compare::ContributionCurve, b: usize| c.lower[b] > 0.0 || c.upper[b] < 0.0;
        if used {
            used_ok &= (0..f.bin_counts.len()).any(|b| f.bin_counts[b] > 0 && excludes(&f.mimic, b));
        } else {
            unused_mass = unused_mass.min(value_bin_mass(&f.bin_counts, |b| !excludes(&f.mimic, b)));
            outcome_ok &= (0..f.bin_counts.len()).any(|b| f.bin_counts[b] > 0 && excludes(&f.outcome, b));
        }
    }
    let top: Vec<usize> = cmp.ranking[..8].to_vec();
    let ranking_ok = top.iter().all(|&j| j >= synth::USED_FEATURES);
    verdict(
        unused_mass >= 0.95 && used_ok && outcome_ok && ranking_ok && secs <= 600.0,
        format!(
            "min unused-feature mass with mimic band containing 0 {unused_mass:.3} (>= 0.95), \
             every used feature has an excluding bin {used_ok}, outcome non-flat on unused {outcome_ok}, \
             unused ranked top 8 {ranking_ok}, runtime {secs:.0}s (<= 600s)"
        ),
    )
}

fn single_feature_ensemble(values: &[Vec<Vec<f64>>]) -> BagEnsemble {
    let bins = values[0][0].len();
    let x = distill_audit::data::BinnedMatrix::from_columns(vec!["f".into()], vec![bins], vec![vec![0]]);
    let models = values
        .iter()
        .flatten()
        .map(|v| {
            let mut m = AdditiveModel::intercept_only(Link::Identity, 0.0, &x);
            m.shapes[0].values = v.clone();
            m
        })
        .collect();
    BagEnsemble::new(Link::Identity, values.len(), values[0].len(), models).unwrap()
}

// Literal transcription: (1/K) sum_k ((1/L) sum_l h_kl - (1/KL) sum_k sum_l h_kl)^2.
fn literal_variance(h: &[Vec<Vec<f64>>], bin: usize) -> f64 {
    let (k, l) = (h.len() as f64, h[0].len() as f64);
    let grand: f64 = h.iter().flatten().map(|v| v[bin]).sum::<f64>() / (k * l);
    h.iter()
        .map(|inner| {
            let m = inner.iter().map(|v| v[bin]).sum::<f64>() / l;
            (m - grand).powi(2)
        })
        .sum::<f64>()
        / k
}

fn literal_difference_variance(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>], bin: usize) -> f64 {
    let (k, l) = (a.len() as f64, a[0].len() as f64);
    let inner = |h: &[Vec<Vec<f64>>], kk: usize| h[kk].iter().map(|v| v[bin]).sum::<f64>() / l;
    let ga: f64 = a.iter().flatten().map(|v| v[bin]).sum::<f64>() / (k * l);
    let gb: f64 = b.iter().flatten().map(|v| v[bin]).sum::<f64>() / (k * l);
    let cov = (0..a.len()).map(|kk| (inner(a, kk) - ga) * (inner(b, kk) - gb)).sum::<f64>() / k;
    literal_variance(a, bin) + literal_variance(b, bin) - 2.0 * cov
}

// 4. Variance formula on hand-built bags.
fn variance_formula() -> Outcome {
    // inner means 1 and 3, grand mean 2: variance ((1-2)^2 + (3-2)^2) / 2 = 1
    let example = vec![vec![vec![0.5], vec![1.5]], vec![vec![2.0], vec![4.0]]];
    let v_example = curve(&single_feature_ensemble(&example), 0).unwrap().variance[0];

    // dyadic values keep every sum and division exact, so equality is exact
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<f64>>> {
        (0..4)
            .map(|_| {
                (0..4)
                    .map(|_| (0..6).map(|_| rand::Rng::random_range(rng, -64i32..=64) as f64 / 32.0).collect())
                    .collect()
            })
            .collect()
    };
    let mut exact = true;
    for _ in 0..50 {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let (ea, eb) = (single_feature_ensemble(&a), single_feature_ensemble(&b));
        let ca = curve(&ea, 0).unwrap();
        let d = difference_of(&ea, &eb, 0).unwrap();
        for bin in 0..6 {
            exact &= ca.variance[bin] == literal_variance(&a, bin);
            exact &= ca.upper[bin] == ca.mean[bin] + Z_95 * literal_variance(&a, bin).sqrt();
            exact &= d.variance[bin] == literal_difference_variance(&a, &b, bin).max(0.0);
        }
    }
    verdict(
        v_example == 1.0 && exact,
        format!("example variance {v_example} (== 1), 50 random dyadic bag sets match the literal formula exactly: {exact}"),
    )
}

// 5. Null Monte Carlo: noise features and targets, so every true shape is 0.
fn band_coverage_under_null() -> Outcome {
    let (mut covered, mut total) = (0usize, 0usize);
    for rep in 0..200u64 {
        let data = synth::noise(1_000, 5_000 + rep, 2).unwrap();
        let schema = fit_schema(&data, 32).unwrap();
        let plan = plan_bags(data.n_rows(), 5, 5, rep).unwrap();
        let paired = train_paired(&data, &schema, None, &plan, &TrainConfig::default()).unwrap();
        for j in 0..schema.features.len() {
            let counts = &paired.bin_counts[j];
            for ens in [&paired.mimic, &paired.outcome] {
                let c = curve(ens, j).unwrap();
                for b in 0..schema.features[j].n_value_bins() {
                    if counts[b] > 0 {
                        total += 1;
                        covered += usize::from(c.lower[b] <= 0.0 && c.upper[b] >= 0.0);
                    }
                }
            }
        }
    }
    let coverage = covered as f64 / total as f64;
    verdict(
        coverage >= 0.93,
        format!("pointwise coverage {coverage:.3} over {total} bins (>= 0.93)"),
    )
}

// Closed-form isotonic fit: f_i = max_{s<=i} min_{t>=i} mean(y[s..=t]).
fn minmax_isotonic(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|i| {
            (0..=i)
                .map(|s| {
                    (i..n)
                        .map(|t| y[s..=t].iter().sum::<f64>() / (t - s + 1) as f64)
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn pav_fit(y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for b in isotonic_blocks(y, &vec![1.0; y.len()]) {
        out[b.start..b.end].iter_mut().for_each(|v| *v = b.value);
    }
    out
}

fn all_instances(grid: &[f64], n: usize, mut visit: impl FnMut(&[f64])) {
    let mut idx = vec![0usize; n];
    let mut y = vec![grid[0]; n];
    loop {
        visit(&y);
        let mut p = 0;
        loop {
            if p == n {
                return;
            }
            idx[p] += 1;
            if idx[p] < grid.len() {
                y[p] = grid[idx[p]];
                break;
            }
            idx[p] = 0;
            y[p] = grid[0];
            p += 1;
        }
    }
}

// 6. PAV against an exhaustive oracle, and the kinked-score improvement.
fn calibration_correctness() -> Outcome {
    let mut instances = 0usize;
    let mut worst: f64 = 0.0;
    let mut check = |y: &[f64]| {
        instances += 1;
        let (a, b) = (pav_fit(y), minmax_isotonic(y));
        for (p, q) in a.iter().zip(&b) {
            worst = worst.max((p - q).abs());
        }
    };
    for n in 1..=12 {
        all_instances(&[0.0, 0.5, 1.0], n, &mut check);
    }
    for n in 1..=7 {
        all_instances(&[0.0, 0.25, 0.5, 0.75, 1.0], n, &mut check);
    }

    // fit the map on one half and judge linearity on the other half
    let data = synth::kinked(40_000, 6).unwrap();
    let outcomes: Vec<bool> = data.outcomes().iter().map(|o| *o == Some(true)).collect();
    let half = data.n_rows() / 2;
    let map = fit_calibration(&data.scores()[..half], &outcomes[..half]).unwrap();
    let (scores, labels) = (&data.scores()[half..], &outcomes[half..]);
    let before = diagnose(scores, labels, None).unwrap().linearity_residual;
    let after = diagnose(scores, labels, Some(&map)).unwrap().linearity_residual;
    let ratio = before / after;
    verdict(
        worst <= 1e-12 && ratio >= 5.0,
        format!(
            "PAV vs oracle max deviation {worst:.1e} over {instances} instances (<= 1e-12), \
             held-out kinked residual {before:.3} -> {after:.3}, improvement {ratio:.1}x (>= 5x)"
        ),
    )
}

fn hidden_pairs(expose: bool) -> ErrorPairs {
    let spec = HiddenFeature {
        expose_hidden: expose,
        ..HiddenFeature::default()
    };
    let data = synth::hidden_feature(10_000, 7, &spec).unwrap();
    let schema = fit_schema(&data, DEFAULT_MAX_BINS).unwrap();
    let plan = plan_bags(data.n_rows(), 5, 5, 7).unwrap();
    let paired = train_paired(&data, &schema, None, &plan, &TrainConfig::default()).unwrap();
    error_pairs(&paired, &data, MimicErrorScale::Calibrated).unwrap()
}

// 7. Missing-feature test: hidden feature, control, permutation null.
fn missing_feature_test() -> Outcome {
    let hidden = correlation_test(&hidden_pairs(false), 1000, 7).unwrap();
    let control_pairs = hidden_pairs(true);
    let control = correlation_test(&control_pairs, 1000, 7).unwrap();
    let stats = |r: &distill_audit::missing::CorrelationTestResult| [r.pearson, r.spearman, r.kendall];
    let hidden_ok = stats(&hidden).iter().all(|e| e.lower > 0.0);
    let control_ok = stats(&control).iter().all(|e| e.contains_zero());

    // permute outcome errors on 1,000-pair subsets of the control pairs
    let runs = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut false_pos = [0usize; 3];
    for run in 0..runs {
        let mut idx: Vec<usize> = (0..control_pairs.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(1000);
        let mimic: Vec<f64> = idx.iter().map(|&i| control_pairs.mimic[i]).collect();
        let mut outcome: Vec<f64> = idx.iter().map(|&i| control_pairs.outcome[i]).collect();
        outcome.shuffle(&mut rng);
        let r = correlation_test(&ErrorPairs::from_errors(mimic, outcome).unwrap(), 1000, run).unwrap();
        for (fp, e) in false_pos.iter_mut().zip(stats(&r)) {
            *fp += usize::from(!e.contains_zero());
        }
    }
    let fpr = false_pos.map(|c| c as f64 / runs as f64);
    let fpr_ok = fpr.iter().all(|&f| f <= 0.07);
    let fmt = |r: &distill_audit::missing::CorrelationTestResult| {
        stats(r).map(|e| format!("{:.3} [{:.3}, {:.3}]", e.estimate, e.lower, e.upper)).join(", ")
    };
    verdict(
        hidden_ok && control_ok && fpr_ok,
        format!(
            "hidden (pearson, spearman, kendall) {} all lower > 0: {hidden_ok}; control {} all contain 0: {control_ok}; \
             permutation false-positive rates {:.3}/{:.3}/{:.3} (<= 0.07)",
            fmt(&hidden),
            fmt(&control),
            fpr[0],
            fpr[1],
            fpr[2]
        ),
    )
}

// 8. One true pair (x1, x2) in the interaction generator, 20 seeds.
fn interaction_detection() -> Outcome {
    let (mut first, mut improved) = (0usize, 0usize);
    let mut worst_reduction = f64::INFINITY;
    for seed in 0..20u64 {
        let data = synth::interaction(5_000, 800 + seed).unwrap();
        let schema = fit_schema(&data, DEFAULT_MAX_BINS).unwrap();
        let x = bin(&data, &schema).unwrap();
        let plan = plan_bags(data.n_rows(), 2, 2, seed).unwrap();
        let split = plan.split(0, 0);
        let test = &plan.test[0];
        let cfg = TrainConfig::default();
        let main = train_regressor(&x, data.scores(), split, &cfg).unwrap();
        let fit = main.predict_link_rows(&x, &split.train).unwrap();
        let residuals: Vec<f64> = split.train.iter().zip(&fit).map(|(&r, f)| data.scores()[r] - f).collect();
        let ranked = screen_pairs(&x, &residuals, &split.train);
        let top = ranked[0].pair;
        first += usize::from(top == (0, 1));

        let with = fit_interactions_on(&main, &x, data.scores(), split, &[top], &cfg).unwrap();
        let truth: Vec<f64> = test.iter().map(|&r| data.scores()[r]).collect();
        let e_main = rmse(&main.predict_link_rows(&x, test).unwrap(), &truth);
        let e_with = rmse(&with.predict_link_rows(&x, test).unwrap(), &truth);
        let reduction = 1.0 - e_with / e_main;
        worst_reduction = worst_reduction.min(reduction);
        improved += usize::from(reduction >= 0.20);
    }
    verdict(
        first >= 19 && improved == 20,
        format!(
            "true pair ranked first in {first}/20 runs (>= 19), test RMSE reduction >= 20% in {improved}/20, \
             smallest reduction {:.1}%",
            100.0 * worst_reduction
        ),
    )
}

// 9. ProPublica COMPAS spot check, only when the CSV is supplied.
fn compas_spot_check() -> Outcome {
    let Some(path) = std::env::var_os("DISTILL_AUDIT_COMPAS_CSV").map(PathBuf::from) else {
        return Outcome::Skip("set DISTILL_AUDIT_COMPAS_CSV to a COMPAS CSV to run".into());
    };
    let mut config = SchemaConfig::new(
        std::env::var("DISTILL_AUDIT_COMPAS_SCORE").unwrap_or_else(|_| "decile_score".into()),
        std::env::var("DISTILL_AUDIT_COMPAS_OUTCOME").unwrap_or_else(|_| "two_year_recid".into()),
    );
    config.features = Some(
        std::env::var("DISTILL_AUDIT_COMPAS_FEATURES")
            .unwrap_or_else(|_| "age,race,sex,priors_count,c_charge_degree,juv_fel_count,juv_misd_count,juv_other_count".into())
            .split(',')
            .map(str::to_owned)
            .collect(),
    );
    let data: AuditDataset = match load_csv(&path, &config) {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(format!("could not load {}: {e}", path.display())),
    };
    let schema = fit_schema(&data, config.max_bins).unwrap();
    let plan = plan_bags(data.n_rows(), 5, 5, 9).unwrap();
    let paired = train_paired(&data, &schema, None, &plan, &TrainConfig::default()).unwrap();
    let fid = fidelity(&paired, &data).unwrap();
    let auc = fid.main_effects.auc.unwrap().mean;
    let err = fid.main_effects.rmse.unwrap().mean;
    let pairs = error_pairs(&paired, &data, MimicErrorScale::Raw).unwrap();
    let test = correlation_test(&pairs, 1000, 9).unwrap();
    let lowest = [test.pearson, test.spearman, test.kendall].iter().map(|e| e.lower).fold(f64::INFINITY, f64::min);
    verdict(
        (auc - 0.74).abs() <= 0.03 && (err - 2.01).abs() <= 0.10 && lowest >= 0.05,
        format!("outcome AUC {auc:.3} (0.74 +/- 0.03), mimic RMSE {err:.3} (2.01 +/- 0.10), smallest lower bound {lowest:.3} (>= 0.05)"),
    )
}

// 10. Two audits with the same config write byte-identical report.json.
fn audit_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = synth::hidden_feature(2_000, 10, &HiddenFeature::default()).unwrap();
    let csv = dir.path().join("data.csv");
    std::fs::write(&csv, data.to_csv("score", "outcome").unwrap()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut cfg = RunConfig::new(&csv, SchemaConfig::new("score", "outcome"), &out);
        cfg.outer = 3;
        cfg.inner = 3;
        cfg.seed = 10;
        cfg.train.interaction_pairs = 1;
        cfg.resamples = 200;
        run_audit(&cfg).unwrap();
        std::fs::read(out.join("report.json")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    verdict(a == b, format!("report.json identical across runs: {} ({} bytes)", a == b, a.len()))
}
