use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;
use ridnoise::seed::rng_for;
use ridnoise::weights::{estimate_sample_robustness, kfold_split, robustness_to_weights, RobustnessEstimate, WeightConfig};
use ridnoise::{Dataset, Matrix};

fn line_dataset(n: usize, noisy_sigma: f64, seed: u64) -> Dataset {
    let mut rng = rng_for(seed, "data");
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let xi: f64 = rng.gen_range(-1.0..1.0);
        let noise: f64 = rng.sample(StandardNormal);
        let sigma = if i % 2 == 0 { 0.0 } else { noisy_sigma };
        x.push(xi);
        y.push(2.0 * xi + sigma * noise);
    }
    Dataset::new(Matrix::new(n, 1, x).unwrap(), Matrix::new(n, 1, y).unwrap()).unwrap()
}

fn config(epochs: usize) -> WeightConfig {
    let mut cfg = WeightConfig {
        hidden: vec![16],
        ..WeightConfig::default()
    };
    cfg.training.epochs = epochs;
    cfg
}

#[test]
fn deterministic_line_is_predictable() {
    let data = line_dataset(600, 0.0, 1);
    let est = estimate_sample_robustness(&data, &config(60)).unwrap();
    let mean_raw = est.raw.iter().sum::<f64>() / est.raw.len() as f64;
    let var_y = 4.0 / 3.0;
    assert!(mean_raw < 1e-2 * var_y, "mean raw {mean_raw}");
    let mean_r = est.r.iter().sum::<f64>() / est.r.len() as f64;
    assert!((mean_r - 1.0).abs() < 1e-9);
    assert!(est.r.iter().all(|r| *r >= 0.0));
}

#[test]
fn noisy_half_scores_worse() {
    let data = line_dataset(600, 1.0, 2);
    let est = estimate_sample_robustness(&data, &config(60)).unwrap();
    let half = |parity: usize| {
        let v: Vec<f64> = est.r.iter().enumerate().filter(|(i, _)| i % 2 == parity).map(|(_, r)| *r).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (clean, noisy) = (half(0), half(1));
    assert!(noisy > 10.0 * clean, "clean {clean} noisy {noisy}");
}

#[test]
fn minimal_size_covers_every_row() {
    let data = line_dataset(10, 0.5, 3);
    let est = estimate_sample_robustness(&data, &config(5)).unwrap();
    assert_eq!(est.raw.len(), 10);
    assert!(est.raw.iter().all(|r| r.is_finite() && *r >= 0.0));
    assert!(estimate_sample_robustness(&line_dataset(9, 0.5, 3), &config(5)).is_err());
}

#[test]
fn estimate_is_deterministic() {
    let data = line_dataset(200, 0.5, 4);
    let a = estimate_sample_robustness(&data, &config(10)).unwrap();
    let b = estimate_sample_robustness(&data, &config(10)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn folds_partition(n in 2usize..200, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let folds = kfold_split(n, k, seed).unwrap();
        let mut seen = vec![0; n];
        for f in &folds {
            for &i in f {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn weights_are_monotone_and_normalized(
        raw in prop::collection::vec(0.0f64..10.0, 2..100),
        tau in 0.0f64..8.0,
        eps in 1e-6f64..1e-1,
    ) {
        let r = RobustnessEstimate::from_raw(raw).unwrap().r;
        let w = robustness_to_weights(&r, tau, eps).unwrap();
        prop_assert!((w.mean() - 1.0 - eps).abs() < 1e-9);
        prop_assert!(w.min() >= eps);
        for i in 0..r.len() {
            for j in 0..r.len() {
                if tau > 0.0 && r[i] < r[j] {
                    prop_assert!(w.0[i] >= w.0[j]);
                }
                if tau == 0.0 {
                    prop_assert_eq!(w.0[i], w.0[j]);
                }
            }
        }
    }

    #[test]
    fn weights_ignore_raw_scale(
        raw in prop::collection::vec(0.01f64..10.0, 2..50),
        c in 1e-3f64..1e3,
        tau in 0.0f64..4.0,
    ) {
        let scaled: Vec<f64> = raw.iter().map(|v| v * c).collect();
        let a = robustness_to_weights(&RobustnessEstimate::from_raw(raw).unwrap().r, tau, 1e-3).unwrap();
        let b = robustness_to_weights(&RobustnessEstimate::from_raw(scaled).unwrap().r, tau, 1e-3).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
