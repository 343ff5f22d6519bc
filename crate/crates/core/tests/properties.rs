use std::collections::BTreeMap;

use cpcr::dataset::{Record, TimeSeriesDataset};
use cpcr::eval::{delta_y_from_predictions, rmse, training_rss};
use cpcr::model::{predict, train_cpcr, train_mpcr, TrainConfig};
use cpcr::preprocess::fit_normalizer;
use cpcr::qp::{self, oracle_solve, QpBlock, QpProblem, QpStatus};
use cpcr::synth::{generate, SynthConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blocks(rng: &mut ChaCha8Rng, sizes: &[usize]) -> Vec<QpBlock> {
    sizes
        .iter()
        .map(|&k| {
            let x = DMatrix::from_fn(k + 6, k, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(k + 6, |_, _| rng.random_range(-1.0..1.0));
            QpBlock::new(x, y).unwrap()
        })
        .collect()
}

fn problem(seed: u64, n_cons: usize) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [rng.random_range(1..=2usize), rng.random_range(1..=2usize)];
    let bl = blocks(&mut rng, &sizes);
    let n = sizes.iter().sum();
    let w0 = qp::solve_unconstrained(&bl, 0.0).unwrap();
    let a = DMatrix::from_fn(n_cons, n, |_, _| rng.random_range(-1.0..1.0));
    let b = DVector::from_fn(n_cons, |i, _| -(a.row(i) * &w0)[0] + rng.random_range(-0.5..0.5));
    QpProblem::new(bl, a, b, 0.0).unwrap()
}

fn solve(p: &QpProblem) -> qp::QpSolution {
    qp::solve(p, 1e-8, qp::default_max_iter(p.n_constraints())).unwrap()
}

fn series(modes: &[&str], preds: &[f64]) -> TimeSeriesDataset {
    let recs: Vec<_> = modes
        .iter()
        .enumerate()
        .map(|(i, m)| Record::new(i as f64, m, vec![0.0], None))
        .collect();
    let ds = TimeSeriesDataset::from_records(vec!["x".into()], recs).unwrap();
    assert_eq!(ds.len(), preds.len());
    ds
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qp_agrees_with_oracle(seed in any::<u64>(), n_cons in 0usize..5) {
        let p = problem(seed, n_cons);
        let s = solve(&p);
        let o = oracle_solve(&p).unwrap();
        prop_assert_eq!(s.status, o.status);
        if s.status == QpStatus::Converged {
            prop_assert!((&s.coefficients - &o.coefficients).amax() <= 1e-6);
            prop_assert!((s.objective_value - o.objective_value).abs() <= 1e-8 * o.objective_value.abs().max(1.0));
        }
    }

    #[test]
    fn loosening_offsets_never_raises_objective(seed in any::<u64>(), n_cons in 1usize..5, loosen in 0.0f64..1.0) {
        let tight = problem(seed, n_cons);
        let loose = QpProblem::new(
            tight.blocks.clone(),
            tight.constraint_matrix.clone(),
            tight.constraint_offset.add_scalar(loosen),
            0.0,
        ).unwrap();
        let (ft, fl) = (solve(&tight).objective_value, solve(&loose).objective_value);
        prop_assert!(fl <= ft + 1e-9 * ft.abs().max(1.0));
    }

    #[test]
    fn feasible_perturbations_do_not_improve(seed in any::<u64>(), n_cons in 0usize..5, dir_seed in any::<u64>()) {
        let p = problem(seed, n_cons);
        let s = solve(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(dir_seed);
        for scale in [1e-1, 1e-3] {
            let d = DVector::from_fn(s.coefficients.len(), |_, _| rng.random_range(-1.0..1.0) * scale);
            let w = &s.coefficients + d;
            if p.slacks(&w).iter().all(|v| *v >= 0.0) {
                prop_assert!(p.objective(&w) >= s.objective_value - 1e-10);
            }
        }
    }

    #[test]
    fn unconstrained_blocks_separate(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bl = blocks(&mut rng, &[2, 3]);
        let joint = qp::solve_unconstrained(&bl, 0.0).unwrap();
        let first = qp::solve_unconstrained(&bl[..1], 0.0).unwrap();
        let second = qp::solve_unconstrained(&bl[1..], 0.0).unwrap();
        prop_assert!((joint.rows(0, 2) - first).amax() <= 1e-12);
        prop_assert!((joint.rows(2, 3) - second).amax() <= 1e-12);
    }

    #[test]
    fn normalizer_round_trips(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..20)) {
        let recs: Vec<_> = rows.iter().enumerate().map(|(i, r)| Record::new(i as f64, "a", r.clone(), Some(r[0]))).collect();
        let ds = TimeSeriesDataset::from_records(vec!["a".into(), "b".into(), "c".into()], recs).unwrap();
        let Ok(norm) = fit_normalizer(&ds) else { return Ok(()) };
        for r in &rows {
            let back = norm.denormalize_features(&norm.normalize_features(r).unwrap());
            for (x, y) in r.iter().zip(&back) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn delta_y_ignores_sign_and_offset(preds in prop::collection::vec(-10.0f64..10.0, 6), shift in -5.0f64..5.0) {
        let ds = series(&["a", "a", "b", "a", "b", "b"], &preds);
        let (d, n) = delta_y_from_predictions(&ds, &preds, 10.0).unwrap();
        let neg: Vec<f64> = preds.iter().map(|v| -v).collect();
        let shifted: Vec<f64> = preds.iter().map(|v| v + shift).collect();
        prop_assert_eq!(n, 3);
        prop_assert!((delta_y_from_predictions(&ds, &neg, 10.0).unwrap().0 - d).abs() <= 1e-12);
        prop_assert!((delta_y_from_predictions(&ds, &shifted, 10.0).unwrap().0 - d).abs() <= 1e-12);
    }

    #[test]
    fn rmse_is_homogeneous(y in prop::collection::vec(-10.0f64..10.0, 1..20), k in -4.0f64..4.0) {
        let zero = vec![0.0; y.len()];
        let scaled: Vec<f64> = y.iter().map(|v| v * k).collect();
        let base = rmse(&zero, &y).unwrap();
        prop_assert!((rmse(&zero, &scaled).unwrap() - k.abs() * base).abs() <= 1e-12 * base.max(1.0) * k.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mpcr_fits_better_than_cpcr(seed in 0u64..1000, c in 0.0f64..0.2) {
        let out = generate(&SynthConfig { seed, n_segments: 8, ..SynthConfig::default() }).unwrap();
        let cfg = TrainConfig { c, ..TrainConfig::default() };
        let m = train_mpcr(&out.complete, &cfg).unwrap();
        let cp = train_cpcr(&out.complete, "c1", &out.incomplete["c1"], &cfg).unwrap();
        let (rm, rc) = (training_rss(&m, &out.complete).unwrap(), training_rss(&cp, &out.complete).unwrap());
        prop_assert!(rm <= rc + 1e-9 * rc.max(1.0));
    }

    #[test]
    fn mode_labels_do_not_matter(seed in 0u64..1000) {
        let out = generate(&SynthConfig { seed, n_segments: 6, ..SynthConfig::default() }).unwrap();
        let cfg = TrainConfig::default();
        let base = train_mpcr(&out.complete, &cfg).unwrap();
        let relabel = |m: &str| if m == "m1" { "zz" } else { "aa" };
        let renamed: BTreeMap<String, TimeSeriesDataset> = out
            .complete
            .iter()
            .map(|(k, ds)| {
                let recs: Vec<_> = ds.records().map(|r| Record::new(r.timestamp, relabel(&r.mode), r.features, r.target)).collect();
                (relabel(k).to_string(), TimeSeriesDataset::from_records(ds.feature_names().to_vec(), recs).unwrap())
            })
            .collect();
        let other = train_mpcr(&renamed, &cfg).unwrap();
        for (k, mm) in &base.modes {
            prop_assert_eq!(&mm.coefficients, &other.modes[relabel(k)].coefficients);
        }
    }

    #[test]
    fn mean_features_predict_mean_target(seed in 0u64..1000) {
        let out = generate(&SynthConfig { seed, n_segments: 6, ..SynthConfig::default() }).unwrap();
        let model = train_mpcr(&out.complete, &TrainConfig::default()).unwrap();
        for (mode, mm) in &model.modes {
            let norm = &mm.preprocessing.normalizer;
            let rec = Record::new(0.0, mode, norm.means.clone(), None);
            let ds = TimeSeriesDataset::from_records(model.feature_names.clone(), vec![rec]).unwrap();
            let p = &predict(&model, &ds).unwrap()[0];
            prop_assert!(p.y_hat_norm.abs() <= 1e-12);
            prop_assert!((p.y_hat_raw.unwrap() - norm.target_mean.unwrap()).abs() <= 1e-9);
        }
    }
}
