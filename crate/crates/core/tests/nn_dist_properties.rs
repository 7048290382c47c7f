use gapcast_core::autodiff::{Tape, Tensor};
use gapcast_core::dist::{DiagGaussian, DiagStudentT, LogitTransform};
use gapcast_core::nn::{AdamConfig, AdamState, Mlp};
use proptest::prelude::*;

fn close(ad: f64, fd: f64) -> bool {
    let err = (ad - fd).abs();
    err < 1e-6 || err / ad.abs().max(fd.abs()) < 1e-4
}

fn mlp_output_sum(net: &Mlp, x: &Tensor) -> f64 {
    net.forward(x).unwrap().data().iter().sum()
}

#[test]
fn mlp_weight_gradients_match_finite_differences() {
    let mut net = Mlp::init(3, &[3, 5, 4, 2]).unwrap();
    for (i, b) in (0..net.layers()).map(|l| (l, net.bias(l).numel())).collect::<Vec<_>>() {
        for j in 0..b {
            net.bias_mut(i).data_mut()[j] = 0.1 * (j as f64 - 1.0);
        }
    }
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 1.5], vec![-0.3, 0.2, 0.9]]).unwrap();
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    let bound = net.bind(&mut tape, &mut vars).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let y = bound.forward(&mut tape, xv).unwrap();
    let s = tape.sum(y).unwrap();
    let mut grads = tape.backward(s).unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).unwrap()).collect();
    let h = 1e-5;
    for (p, g) in grads.iter().enumerate() {
        for i in 0..g.numel() {
            let orig = net.params()[p].data()[i];
            net.params_mut()[p].data_mut()[i] = orig + h;
            let up = mlp_output_sum(&net, &x);
            net.params_mut()[p].data_mut()[i] = orig - h;
            let down = mlp_output_sum(&net, &x);
            net.params_mut()[p].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(close(g.data()[i], fd), "param {p}[{i}]: {} vs {fd}", g.data()[i]);
        }
    }
}

#[test]
fn parameter_count_formula() {
    let widths = [7, 64, 64, 15];
    let net = Mlp::init(0, &widths).unwrap();
    let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    assert_eq!(net.param_count(), expected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_is_batch_equivariant(rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 1..6), seed in 0u64..50) {
        let net = Mlp::init(seed, &[4, 8, 3]).unwrap();
        let batch = net.forward(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let single = net.forward(&Tensor::row(r)).unwrap();
            prop_assert_eq!(batch.row_slice(i), single.data());
        }
    }

    #[test]
    fn adam_with_zero_lr_is_a_noop(g in proptest::collection::vec(-1e3f64..1e3, 6), steps in 1usize..5) {
        let mut p = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, [&p]);
        let grad = Tensor::matrix(2, 3, g).unwrap();
        for _ in 0..steps {
            adam.step(&mut [&mut p], std::slice::from_ref(&grad), &["w".to_string()]).unwrap();
        }
        prop_assert_eq!(p, before);
        prop_assert_eq!(adam.step_count(), steps as u64);
    }

    #[test]
    fn logit_round_trip(p in 1e-4f64..(1.0 - 1e-4)) {
        let t = LogitTransform::default();
        prop_assert!((t.inverse(t.forward(p)) - p).abs() < 1e-12);
    }

    #[test]
    fn student_t_gradients_match_finite_differences(
        x in -2.0f64..2.0, mu in -2.0f64..2.0, sigma in 0.3f64..2.0, nu in 0.5f64..20.0
    ) {
        let eval = |v: [f64; 4]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let ids: Vec<_> = v.iter().map(|&a| tape.leaf(Tensor::row(&[a])).unwrap()).collect();
            let d = DiagStudentT::new(&tape, ids[1], ids[2], ids[3]).unwrap();
            let lp = d.log_prob(&mut tape, ids[0]).unwrap();
            let s = tape.sum(lp).unwrap();
            let mut g = tape.backward(s).unwrap();
            (tape.value(s).item(), ids.iter().map(|&i| g.take(i).unwrap().item()).collect())
        };
        let p = [x, mu, sigma, nu];
        let (_, ad) = eval(p);
        for i in 0..4 {
            let (mut up, mut down) = (p, p);
            up[i] += 1e-5;
            down[i] -= 1e-5;
            let fd = (eval(up).0 - eval(down).0) / 2e-5;
            prop_assert!(close(ad[i], fd), "arg {}: {} vs {}", i, ad[i], fd);
        }
    }

    #[test]
    fn student_t_is_unimodal(mu in -1.0f64..1.0, sigma in 0.2f64..3.0, nu in 0.5f64..50.0) {
        let mut tape = Tape::new();
        let n = 60;
        let xs: Vec<f64> = (0..n).map(|i| mu + 0.1 * i as f64).collect();
        let x = tape.constant(Tensor::matrix(n, 1, xs).unwrap()).unwrap();
        let m = tape.constant(Tensor::full(&[n, 1], mu)).unwrap();
        let s = tape.constant(Tensor::full(&[n, 1], sigma)).unwrap();
        let v = tape.constant(Tensor::full(&[n, 1], nu)).unwrap();
        let d = DiagStudentT::new(&tape, m, s, v).unwrap();
        let lp = d.log_prob(&mut tape, x).unwrap();
        let lp = tape.value(lp).data();
        prop_assert!(lp.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn student_t_with_huge_df_matches_gaussian() {
    let mut tape = Tape::new();
    let xs: Vec<f64> = (0..61).map(|i| -3.0 + 0.1 * i as f64).collect();
    let n = xs.len();
    let x = tape.constant(Tensor::matrix(n, 1, xs).unwrap()).unwrap();
    let m = tape.constant(Tensor::zeros(&[n, 1])).unwrap();
    let s = tape.constant(Tensor::full(&[n, 1], 1.0)).unwrap();
    let v = tape.constant(Tensor::full(&[n, 1], 1e6)).unwrap();
    let t = DiagStudentT::new(&tape, m, s, v).unwrap().log_prob(&mut tape, x).unwrap();
    let g = DiagGaussian::new(&tape, m, s).unwrap().log_prob(&mut tape, x).unwrap();
    for (a, b) in tape.value(t).data().iter().zip(tape.value(g).data()) {
        assert!((a - b).abs() < 1e-4);
    }
}
