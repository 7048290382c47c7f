use gapcast_core::autodiff::Tensor;
use gapcast_core::flow::{posterior_logq, FlowChain};
use gapcast_core::rng;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

/// Chain with its zero-initialized output layers filled with noise.
fn random_chain(seed: u64, dim: usize, ctx: usize, n: usize, scale: f64) -> FlowChain {
    let mut chain = FlowChain::new(seed, dim, ctx, 12, n).unwrap();
    let mut r = rng::stream(seed, 9);
    for t in chain.transforms_mut() {
        for w in [&mut t.w_shift, &mut t.w_scale, &mut t.b_shift, &mut t.b_scale] {
            w.data_mut().iter_mut().for_each(|v| *v = scale * r.sample::<f64, _>(StandardNormal));
        }
    }
    chain
}

fn base_draws(n: usize, dim: usize, mean: &[f64], std: &[f64], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    let data = (0..n * dim)
        .map(|i| mean[i % dim] + std[i % dim] * r.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(n, dim, data).unwrap()
}

fn tile(row: &[f64], n: usize) -> Tensor {
    Tensor::matrix(n, row.len(), row.iter().copied().cycle().take(n * row.len()).collect()).unwrap()
}

#[test]
fn pushforward_histogram_matches_logq_1d() {
    let chain = random_chain(2, 1, 2, 3, 0.6);
    let ctx = [0.3, -0.7];
    let (mean, std) = ([0.2], [0.8]);
    let n = 200_000;
    let u0 = base_draws(n, 1, &mean, &std, 1);
    let (un, _) = chain.forward(&u0, &tile(&ctx, n)).unwrap();
    let lo = un.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = un.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = 60;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in un.data() {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let centers: Vec<f64> = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
    let lq = posterior_logq(
        &tile(&mean, bins),
        &tile(&std, bins),
        &chain,
        &Tensor::matrix(bins, 1, centers).unwrap(),
        &tile(&ctx, bins),
    )
    .unwrap();
    for (b, &c) in counts.iter().enumerate() {
        let est = c as f64 / (n as f64 * width);
        let dens = lq.data()[b].exp();
        // binomial standard error plus a curvature allowance for the bin width
        let tol = 4.0 * (dens / (n as f64 * width)).sqrt() + 0.05 * dens + 1e-3;
        assert!((est - dens).abs() < tol, "bin {b}: histogram {est}, density {dens}");
    }
}

#[test]
fn pushforward_density_integrates_to_one_2d() {
    let chain = random_chain(5, 2, 3, 3, 0.5);
    let ctx = [1.0, 0.0, -0.5];
    let (mean, std) = ([0.0, 0.5], [1.0, 0.6]);
    let n = 100_000;
    let u0 = base_draws(n, 2, &mean, &std, 3);
    let (un, _) = chain.forward(&u0, &tile(&ctx, n)).unwrap();
    let bound = |c: usize| {
        let v: Vec<f64> = (0..n).map(|i| un.get(i, c)).collect();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo - 1.0, hi + 1.0)
    };
    let ((x0, x1), (y0, y1)) = (bound(0), bound(1));
    let g = 300;
    let (dx, dy) = ((x1 - x0) / g as f64, (y1 - y0) / g as f64);
    let mut pts = Vec::with_capacity(g * g * 2);
    for i in 0..g {
        for j in 0..g {
            pts.push(x0 + (i as f64 + 0.5) * dx);
            pts.push(y0 + (j as f64 + 0.5) * dy);
        }
    }
    let m = g * g;
    let lq = posterior_logq(
        &tile(&mean, m),
        &tile(&std, m),
        &chain,
        &Tensor::matrix(m, 2, pts.clone()).unwrap(),
        &tile(&ctx, m),
    )
    .unwrap();
    let total: f64 = lq.data().iter().map(|l| l.exp() * dx * dy).sum();
    assert!((total - 1.0).abs() < 5e-3, "integral {total}");

    // probability of one quadrant around the median, by samples and by the density
    let (cx, cy) = (0.0, 0.5);
    let frac = (0..n).filter(|&i| un.get(i, 0) < cx && un.get(i, 1) < cy).count() as f64 / n as f64;
    let mass: f64 = (0..m)
        .filter(|&k| pts[2 * k] < cx && pts[2 * k + 1] < cy)
        .map(|k| lq.data()[k].exp() * dx * dy)
        .sum();
    assert!((frac - mass).abs() < 0.01, "sampled {frac}, integrated {mass}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_log_det_is_the_negated_forward(
        x in proptest::collection::vec(-3.0f64..3.0, 8),
        c in proptest::collection::vec(-2.0f64..2.0, 2),
        seed in 0u64..20,
    ) {
        let chain = random_chain(seed, 8, 2, 3, 0.4);
        let (y, ld) = chain.forward(&Tensor::row(&x), &Tensor::row(&c)).unwrap();
        let (back, ild) = chain.inverse(&y, &Tensor::row(&c)).unwrap();
        prop_assert!((ld.item() + ild.item()).abs() < 1e-10);
        for (a, b) in back.data().iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn perturbing_a_coordinate_leaves_earlier_outputs_unchanged(
        x in proptest::collection::vec(-2.0f64..2.0, 5),
        j in 0usize..5,
        delta in 0.01f64..1.0,
        seed in 0u64..20,
    ) {
        let chain = random_chain(seed, 5, 2, 1, 0.7);
        let c = Tensor::row(&[0.4, -0.1]);
        let (y, _) = chain.forward(&Tensor::row(&x), &c).unwrap();
        let mut xp = x.clone();
        xp[j] += delta;
        let (yp, _) = chain.forward(&Tensor::row(&xp), &c).unwrap();
        for i in 0..j {
            prop_assert_eq!(y.data()[i].to_bits(), yp.data()[i].to_bits());
        }
        prop_assert!(y.data()[j] != yp.data()[j]);
    }
}
