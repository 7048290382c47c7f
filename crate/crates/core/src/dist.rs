//! Diagonal Gaussian and Student's t densities on the tape, plus the logit
//! transform between normalized power and the real line.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal, StudentT};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Lower bound added to softplus outputs for decoder scales.
pub const SCALE_FLOOR: f64 = 1e-3;
/// Lower bound added to softplus outputs for degrees of freedom.
pub const DF_FLOOR: f64 = 2.0;

fn check_positive(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).data().iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid(format!("{what} must be strictly positive")));
    }
    Ok(())
}

fn check_same_shape(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()),
        ));
    }
    Ok(())
}

/// Gaussian with independent coordinates; `mean` and `std` are `[batch, d]`.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: Var,
    pub std: Var,
}

impl DiagGaussian {
    pub fn new(tape: &Tape, mean: Var, std: Var) -> Result<Self> {
        check_same_shape(tape, mean, std, "diag_gaussian")?;
        check_positive(tape, std, "Gaussian standard deviation")?;
        Ok(Self { mean, std })
    }

    /// Per-coordinate log densities, `[batch, d]`.
    pub fn log_prob_terms(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_same_shape(tape, self.mean, x, "gaussian_logpdf")?;
        let diff = tape.sub(x, self.mean)?;
        let z = tape.div(diff, self.std)?;
        let sq = tape.square(z)?;
        let quad = tape.scale(sq, -0.5)?;
        let log_std = tape.log(self.std)?;
        let t = tape.sub(quad, log_std)?;
        tape.add_scalar(t, -HALF_LN_2PI)
    }

    /// Row log densities, `[batch, 1]`.
    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let t = self.log_prob_terms(tape, x)?;
        tape.row_sum(t)
    }

    /// Reparameterized draw `mean + std * eta`, `eta ~ N(0, I)` filled row by
    /// row. Returns the sample and the noise.
    pub fn rsample(&self, tape: &mut Tape, rng: &mut impl rand::Rng) -> Result<(Var, Tensor)> {
        let shape = tape.value(self.mean).shape().to_vec();
        let n = tape.value(self.mean).numel();
        let eta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let eta = Tensor::new(shape, eta)?;
        let e = tape.constant(eta.clone())?;
        let scaled = tape.mul(self.std, e)?;
        Ok((tape.add(self.mean, scaled)?, eta))
    }
}

/// Row log density of `N(0, I)`, `[batch, 1]`.
pub fn standard_normal_log_prob(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.square(x)?;
    let s = tape.row_sum(sq)?;
    let d = tape.value(x).cols() as f64;
    let s = tape.scale(s, -0.5)?;
    tape.add_scalar(s, -HALF_LN_2PI * d)
}

/// Student's t with independent coordinates; all fields `[batch, d]`.
#[derive(Clone, Copy, Debug)]
pub struct DiagStudentT {
    pub loc: Var,
    pub scale: Var,
    pub df: Var,
}

impl DiagStudentT {
    pub fn new(tape: &Tape, loc: Var, scale: Var, df: Var) -> Result<Self> {
        check_same_shape(tape, loc, scale, "diag_student_t")?;
        check_same_shape(tape, loc, df, "diag_student_t")?;
        check_positive(tape, scale, "Student's t scale")?;
        check_positive(tape, df, "Student's t degrees of freedom")?;
        Ok(Self { loc, scale, df })
    }

    /// Per-coordinate log densities, `[batch, d]`.
    pub fn log_prob_terms(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_same_shape(tape, self.loc, x, "student_t_logpdf")?;
        let nu = self.df;
        let half_nu_plus = {
            let t = tape.add_scalar(nu, 1.0)?;
            tape.scale(t, 0.5)?
        };
        let half_nu = tape.scale(nu, 0.5)?;
        let lg_a = tape.lgamma(half_nu_plus)?;
        let lg_b = tape.lgamma(half_nu)?;
        let norm = tape.sub(lg_a, lg_b)?;
        let nu_pi = tape.scale(nu, PI)?;
        let log_nu_pi = tape.log(nu_pi)?;
        let half_log_nu_pi = tape.scale(log_nu_pi, 0.5)?;
        let norm = tape.sub(norm, half_log_nu_pi)?;
        let log_scale = tape.log(self.scale)?;
        let norm = tape.sub(norm, log_scale)?;

        let diff = tape.sub(x, self.loc)?;
        let z = tape.div(diff, self.scale)?;
        let z2 = tape.square(z)?;
        let q = tape.div(z2, nu)?;
        let q1 = tape.add_scalar(q, 1.0)?;
        let lq = tape.log(q1)?;
        let tail = tape.mul(half_nu_plus, lq)?;
        tape.sub(norm, tail)
    }

    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let t = self.log_prob_terms(tape, x)?;
        tape.row_sum(t)
    }

    /// Draws one value per coordinate (no gradient).
    pub fn sample(&self, tape: &Tape, rng: &mut impl rand::Rng) -> Result<Tensor> {
        let loc = tape.value(self.loc);
        let scale = tape.value(self.scale);
        let df = tape.value(self.df);
        let data = loc
            .data()
            .iter()
            .zip(scale.data())
            .zip(df.data())
            .map(|((&m, &s), &nu)| {
                let t = StudentT::new(nu)
                    .map_err(|e| Error::invalid(format!("Student's t with df {nu}: {e}")))?;
                Ok(m + s * t.sample(rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(loc.with_data(data))
    }
}

/// Clipped logit map between normalized power in `[0, 1]` and the real line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitTransform {
    pub eps: f64,
}

impl Default for LogitTransform {
    fn default() -> Self {
        Self { eps: 1e-4 }
    }
}

impl LogitTransform {
    pub fn forward(&self, p: f64) -> f64 {
        let p = p.clamp(self.eps, 1.0 - self.eps);
        (p / (1.0 - p)).ln()
    }

    pub fn inverse(&self, r: f64) -> f64 {
        if r >= 0.0 {
            1.0 / (1.0 + (-r).exp())
        } else {
            let e = r.exp();
            e / (1.0 + e)
        }
    }
}

/// Convenience for code that only needs a standard normal draw.
pub fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw on `[0, 1)`.
pub fn uniform(rng: &mut impl rand::Rng) -> f64 {
    rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn scalar_gauss(mu: f64, sigma: f64, x: f64) -> f64 {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::row(&[mu])).unwrap();
        let s = tape.constant(Tensor::row(&[sigma])).unwrap();
        let xv = tape.constant(Tensor::row(&[x])).unwrap();
        let d = DiagGaussian::new(&tape, m, s).unwrap();
        let lp = d.log_prob(&mut tape, xv).unwrap();
        tape.value(lp).item()
    }

    fn scalar_t(mu: f64, sigma: f64, nu: f64, x: f64) -> f64 {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::row(&[mu])).unwrap();
        let s = tape.constant(Tensor::row(&[sigma])).unwrap();
        let n = tape.constant(Tensor::row(&[nu])).unwrap();
        let xv = tape.constant(Tensor::row(&[x])).unwrap();
        let d = DiagStudentT::new(&tape, m, s, n).unwrap();
        let lp = d.log_prob(&mut tape, xv).unwrap();
        tape.value(lp).item()
    }

    #[test]
    fn gaussian_standard_at_zero() {
        assert!((scalar_gauss(0.0, 1.0, 0.0) + 0.918_938_5).abs() < 1e-7);
    }

    #[test]
    fn gaussian_shift_invariance() {
        let a = scalar_gauss(3.2, 0.7, 3.2 + 0.4);
        let b = scalar_gauss(0.0, 0.7, 0.4);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gaussian_two_dims_factorize() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::row(&[0.1, -1.0])).unwrap();
        let s = tape.constant(Tensor::row(&[0.5, 2.0])).unwrap();
        let x = tape.constant(Tensor::row(&[0.3, 1.0])).unwrap();
        let d = DiagGaussian::new(&tape, m, s).unwrap();
        let lp = d.log_prob(&mut tape, x).unwrap();
        let sep = scalar_gauss(0.1, 0.5, 0.3) + scalar_gauss(-1.0, 2.0, 1.0);
        assert!((tape.value(lp).item() - sep).abs() < 1e-12);
    }

    #[test]
    fn gaussian_integrates_to_one() {
        let (mu, sigma) = (0.3, 1.7);
        let n = 20_001;
        let (lo, hi) = (mu - 10.0 * sigma, mu + 10.0 * sigma);
        let h = (hi - lo) / (n - 1) as f64;
        let ys: Vec<f64> = (0..n).map(|i| scalar_gauss(mu, sigma, lo + i as f64 * h).exp()).collect();
        let integral = h * (ys.iter().sum::<f64>() - 0.5 * (ys[0] + ys[n - 1]));
        assert!((0.9999..=1.0001).contains(&integral), "{integral}");
    }

    #[test]
    fn nonpositive_scale_rejected() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::row(&[0.0])).unwrap();
        let s = tape.constant(Tensor::row(&[0.0])).unwrap();
        assert!(DiagGaussian::new(&tape, m, s).is_err());
        let n = tape.constant(Tensor::row(&[-1.0])).unwrap();
        let one = tape.constant(Tensor::row(&[1.0])).unwrap();
        assert!(DiagStudentT::new(&tape, m, s, one).is_err());
        assert!(DiagStudentT::new(&tape, m, one, n).is_err());
    }

    #[test]
    fn rsample_degenerate_and_reproducible() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::row(&[2.5, -1.0])).unwrap();
        let s = tape.constant(Tensor::row(&[1e-12, 1e-12])).unwrap();
        let d = DiagGaussian::new(&tape, m, s).unwrap();
        let (x, _) = d.rsample(&mut tape, &mut rng::stream(1, 0)).unwrap();
        assert!((tape.value(x).get(0, 0) - 2.5).abs() < 1e-9);
        let (y, _) = d.rsample(&mut tape, &mut rng::stream(1, 0)).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn rsample_moments() {
        let n = 100_000;
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::zeros(&[n, 1])).unwrap();
        let s = tape.constant(Tensor::full(&[n, 1], 1.0)).unwrap();
        let d = DiagGaussian::new(&tape, m, s).unwrap();
        let (x, _) = d.rsample(&mut tape, &mut rng::stream(42, 0)).unwrap();
        let v = tape.value(x).data();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn rsample_gradient_flows_to_parameters() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::row(&[0.0])).unwrap();
        let s = tape.leaf(Tensor::row(&[2.0])).unwrap();
        let d = DiagGaussian::new(&tape, m, s).unwrap();
        let (x, eta) = d.rsample(&mut tape, &mut rng::stream(5, 0)).unwrap();
        let y = tape.sum(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(m).unwrap().item(), 1.0);
        assert_eq!(g.get(s).unwrap().item(), eta.item());
    }

    #[test]
    fn cauchy_at_mode() {
        assert!((scalar_t(0.0, 1.0, 1.0, 0.0) + 1.144_729_9).abs() < 1e-7);
        assert!((scalar_t(0.0, 1.0, 1.0, 0.0) - (1.0 / PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn student_t_large_df_is_gaussian() {
        for i in 0..=60 {
            let x = -3.0 + 0.1 * i as f64;
            let diff = scalar_t(0.0, 1.0, 1e6, x) - scalar_gauss(0.0, 1.0, x);
            assert!(diff.abs() < 1e-4, "x={x}: {diff}");
        }
    }

    #[test]
    fn student_t_symmetric_and_unimodal() {
        let (mu, sigma, nu) = (0.4, 0.8, 3.5);
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let a = i as f64 * 0.05;
            let up = scalar_t(mu, sigma, nu, mu + a);
            let down = scalar_t(mu, sigma, nu, mu - a);
            assert!((up - down).abs() < 1e-12);
            assert!(up < prev || i == 0);
            prev = up;
        }
    }

    #[test]
    fn logit_examples() {
        let t = LogitTransform::default();
        assert_eq!(t.forward(0.5), 0.0);
        assert!((t.forward(0.0) + 9.210_240_366_976).abs() < 1e-5);
        assert!((t.forward(0.0) - (1e-4f64 / (1.0 - 1e-4)).ln()).abs() < 1e-15);
        assert!((t.inverse(t.forward(0.73)) - 0.73).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn logit_round_trip(p in 1e-4f64..=(1.0 - 1e-4)) {
            let t = LogitTransform::default();
            proptest::prop_assert!((t.inverse(t.forward(p)) - p).abs() < 1e-12);
        }
    }
}
