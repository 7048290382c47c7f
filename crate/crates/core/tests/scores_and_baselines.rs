use gapcast_core::bench::{
    climatology_forecast, sample_from_quantiles, Imputer, ImputerKind, QrConfig, QuantileRegressor,
};
use gapcast_core::eval::{crps_ensemble, pinball};
use gapcast_core::forecast::{quantile_sorted, sorted_copy};
use gapcast_core::rng;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

/// `int (F(x) - 1{x >= y})^2 dx` by the trapezoid rule.
fn crps_trapezoid(samples: &[f64], y: f64, n: usize) -> f64 {
    let s = sorted_copy(samples);
    let lo = s[0].min(y) - 1.0;
    let hi = s[s.len() - 1].max(y) + 1.0;
    let dx = (hi - lo) / (n - 1) as f64;
    let f = |x: f64| {
        let cdf = s.partition_point(|&v| v <= x) as f64 / s.len() as f64;
        let step = if x >= y { 1.0 } else { 0.0 };
        (cdf - step).powi(2)
    };
    (0..n)
        .map(|i| {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            w * f(lo + i as f64 * dx)
        })
        .sum::<f64>()
        * dx
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crps_matches_the_integral(samples in proptest::collection::vec(-3.0f64..3.0, 1..12), y in -4.0f64..4.0) {
        let exact = crps_ensemble(&samples, y).unwrap();
        let quad = crps_trapezoid(&samples, y, 10_000);
        // the integrand jumps at each sample; each jump costs at most one cell
        let span = samples.iter().copied().fold(y, f64::max) - samples.iter().copied().fold(y, f64::min) + 2.0;
        prop_assert!((exact - quad).abs() <= (samples.len() + 1) as f64 * span / 9_999.0);
    }

    #[test]
    fn crps_is_nonnegative_and_zero_only_at_a_hit(c in -2.0f64..2.0, y in -2.0f64..2.0) {
        let v = crps_ensemble(&[c], y).unwrap();
        prop_assert!((v - (c - y).abs()).abs() < 1e-12);
    }

    #[test]
    fn imputation_is_idempotent(
        rows in proptest::collection::vec(proptest::collection::vec(prop_oneof![3 => -2.0f64..2.0, 1 => Just(f64::NAN)], 3), 8..30),
        iterative in any::<bool>(),
    ) {
        let observed_somewhere = (0..3).all(|j| rows.iter().any(|r| !r[j].is_nan()));
        prop_assume!(observed_somewhere);
        let kind = if iterative { ImputerKind::IterativeLinear } else { ImputerKind::Mean };
        let mut imp = Imputer::new(kind);
        let filled = imp.fit(&rows).unwrap();
        prop_assert!(filled.iter().flatten().all(|v| v.is_finite()));
        for (f, r) in filled.iter().zip(&rows) {
            for (a, b) in f.iter().zip(r) {
                prop_assert!(b.is_nan() || a == b);
            }
        }
        prop_assert_eq!(imp.transform(&filled).unwrap(), filled);
    }

    #[test]
    fn climatology_is_the_same_for_every_origin(history in proptest::collection::vec(0.0f64..1.0, 1..50), y in 0.0f64..1.0) {
        // every origin draws from the same stream, so only the observation moves the score
        let a = climatology_forecast(&history, 64, &mut rng::stream(3, u64::MAX)).unwrap();
        let b = climatology_forecast(&history, 64, &mut rng::stream(3, u64::MAX)).unwrap();
        prop_assert!(a.iter().all(|v| history.contains(v)));
        prop_assert_eq!(crps_ensemble(&a, y).unwrap(), crps_ensemble(&b, y).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn quantile_sampling_stays_in_range(q in proptest::collection::vec(0.0f64..1.0, 5), seed in 0u64..100) {
        let taus = [0.1, 0.3, 0.5, 0.7, 0.9];
        let q = sorted_copy(&q);
        let draws = sample_from_quantiles(&taus, &q, 200, &mut rng::stream(seed, 0));
        prop_assert!(draws.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn crps_is_minimized_by_the_median_point_mass() {
    let mut r = rng::stream(8, 0);
    let ys: Vec<f64> = (0..401).map(|_| r.sample::<f64, _>(StandardNormal).exp()).collect();
    let median = quantile_sorted(&sorted_copy(&ys), 0.5);
    let mean_crps = |c: f64| ys.iter().map(|&y| crps_ensemble(&[c], y).unwrap()).sum::<f64>() / ys.len() as f64;
    let grid: Vec<f64> = (0..=4000).map(|i| i as f64 * 1e-3).collect();
    let best = grid
        .iter()
        .copied()
        .min_by(|a, b| mean_crps(*a).total_cmp(&mean_crps(*b)))
        .unwrap();
    assert!((best - median).abs() <= 1e-3, "grid minimizer {best}, median {median}");
}

#[test]
fn pinball_average_approximates_crps() {
    let mut r = rng::stream(2, 0);
    let taus: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    let (mut crps_sum, mut pin_sum) = (0.0, 0.0);
    for _ in 0..200 {
        let mu: f64 = r.sample(StandardNormal);
        let ens: Vec<f64> = (0..500).map(|_| mu + r.sample::<f64, _>(StandardNormal)).collect();
        let y = r.sample::<f64, _>(StandardNormal);
        let sorted = sorted_copy(&ens);
        crps_sum += crps_ensemble(&ens, y).unwrap();
        pin_sum += 2.0 * taus.iter().map(|&t| pinball(quantile_sorted(&sorted, t), y, t)).sum::<f64>() / taus.len() as f64;
    }
    assert!((pin_sum / crps_sum - 1.0).abs() < 0.03, "pinball {pin_sum}, crps {crps_sum}");
}

#[test]
fn quantile_regression_curves_never_cross() {
    let mut r = rng::stream(6, 0);
    let x: Vec<Vec<f64>> = (0..400).map(|_| vec![r.sample(StandardNormal), r.sample(StandardNormal)]).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| 0.5 * v[0] - 0.3 * v[1] + (0.2 + 0.5 * v[0].abs()) * r.sample::<f64, _>(StandardNormal))
        .collect();
    let qr = QuantileRegressor::fit(&x, &y, &QrConfig::default()).unwrap();
    for _ in 0..200 {
        let probe = [4.0 * r.sample::<f64, _>(StandardNormal), 4.0 * r.sample::<f64, _>(StandardNormal)];
        let q = qr.predict(&probe).unwrap();
        assert!(q.windows(2).all(|w| w[0] <= w[1]));
        let p = qr.predict_power(&probe).unwrap();
        assert!(p.windows(2).all(|w| w[0] <= w[1]));
    }
}
