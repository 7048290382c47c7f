//! Baselines: climatology, impute-then-predict with linear quantile
//! regression or a Gaussian network, and a quantile regression trained on
//! complete data.
//!
//! Features and targets are in logit space; forecasts come back in power.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Window;
use crate::dist::{DiagGaussian, LogitTransform, SCALE_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, AdamConfig, AdamState, Mlp};
use crate::rng::{self, Rng};

/// `m` draws with replacement from the training targets (power space).
pub fn climatology_forecast(history: &[f64], m: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::invalid("climatology needs at least one historical value"));
    }
    Ok((0..m).map(|_| *history.choose(rng).expect("non-empty")).collect())
}

/// Feature rows (logit, `NaN` where missing) and targets of windows.
pub fn window_rows(windows: &[Window]) -> (Vec<Vec<f64>>, Vec<f64>) {
    windows
        .iter()
        .map(|w| (w.features().to_vec(), w.values[w.dim() - 1]))
        .unzip()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputerKind {
    Mean,
    IterativeLinear,
}

impl std::str::FromStr for ImputerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "iterative-linear" | "iterative_linear" => Ok(Self::IterativeLinear),
            other => Err(Error::invalid(format!("unknown imputer `{other}`"))),
        }
    }
}

/// Column-mean or iterative linear-regression imputation of `NaN` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Imputer {
    pub kind: ImputerKind,
    pub max_iter: usize,
    pub tol: f64,
    means: Vec<f64>,
    /// Per column: intercept followed by coefficients on the other columns.
    coefs: Vec<Vec<f64>>,
}

impl Imputer {
    pub fn new(kind: ImputerKind) -> Self {
        Self {
            kind,
            max_iter: 10,
            tol: 1e-4,
            means: Vec::new(),
            coefs: Vec::new(),
        }
    }

    /// Fits on `rows` and returns them completed.
    pub fn fit(&mut self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let p = check_rows(rows)?;
        self.means = (0..p)
            .map(|j| {
                let obs: Vec<f64> = rows.iter().map(|r| r[j]).filter(|v| !v.is_nan()).collect();
                if obs.is_empty() {
                    Err(Error::Data(format!("column {j} has no observed values to impute from")))
                } else {
                    Ok(obs.iter().sum::<f64>() / obs.len() as f64)
                }
            })
            .collect::<Result<_>>()?;
        let mut x = self.fill_means(rows);
        if self.kind == ImputerKind::Mean || p < 2 {
            return Ok(x);
        }
        self.coefs = vec![Vec::new(); p];
        for _ in 0..self.max_iter {
            let mut change: f64 = 0.0;
            for j in 0..p {
                let beta = regress_column(&x, rows, j)?;
                for (r, row) in rows.iter().enumerate() {
                    if row[j].is_nan() {
                        let v = predict_column(&x[r], j, &beta);
                        change = change.max((v - x[r][j]).abs());
                        x[r][j] = v;
                    }
                }
                self.coefs[j] = beta;
            }
            if change < self.tol {
                break;
            }
        }
        Ok(x)
    }

    /// Completes `rows` with the fitted statistics; observed cells are kept.
    pub fn transform(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if self.means.is_empty() {
            return Err(Error::invalid("imputer used before fit"));
        }
        let p = self.means.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::shape("impute", format!("rows must have {p} columns")));
        }
        let mut x = self.fill_means(rows);
        if self.kind == ImputerKind::Mean || self.coefs.is_empty() {
            return Ok(x);
        }
        for _ in 0..self.max_iter {
            let mut change: f64 = 0.0;
            for (j, beta) in self.coefs.iter().enumerate() {
                for (r, row) in rows.iter().enumerate() {
                    if row[j].is_nan() {
                        let v = predict_column(&x[r], j, beta);
                        change = change.max((v - x[r][j]).abs());
                        x[r][j] = v;
                    }
                }
            }
            if change < self.tol {
                break;
            }
        }
        Ok(x)
    }

    fn fill_means(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .zip(&self.means)
                    .map(|(&v, &m)| if v.is_nan() { m } else { v })
                    .collect()
            })
            .collect()
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let p = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || p == 0 {
        return Err(Error::invalid("nothing to impute"));
    }
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::shape("impute", "ragged rows"));
    }
    Ok(p)
}

/// Least squares of column `j` on the others over rows where `j` is observed.
fn regress_column(x: &[Vec<f64>], raw: &[Vec<f64>], j: usize) -> Result<Vec<f64>> {
    let p = x[0].len();
    let used: Vec<usize> = (0..x.len()).filter(|&r| !raw[r][j].is_nan()).collect();
    let design = DMatrix::from_fn(used.len(), p, |i, c| {
        let r = used[i];
        if c == 0 {
            1.0
        } else {
            x[r][if c - 1 < j { c - 1 } else { c }]
        }
    });
    let y = DVector::from_iterator(used.len(), used.iter().map(|&r| x[r][j]));
    least_squares(&design, &y)
}

fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>> {
    let ata = a.transpose() * a;
    let aty = a.transpose() * y;
    let ridge = 1e-10 * (ata.trace() / ata.nrows() as f64).max(1e-300);
    let reg = &ata + DMatrix::identity(ata.nrows(), ata.ncols()) * ridge;
    let beta = match reg.clone().cholesky() {
        Some(c) => c.solve(&aty),
        None => reg
            .svd(true, true)
            .solve(&aty, 1e-12)
            .map_err(|e| Error::NonFinite(format!("imputation regression: {e}")))?,
    };
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("imputation regression coefficients".into()));
    }
    Ok(beta.iter().copied().collect())
}

fn predict_column(row: &[f64], j: usize, beta: &[f64]) -> f64 {
    let others = row.iter().enumerate().filter(|&(c, _)| c != j).map(|(_, v)| v);
    beta[0] + beta[1..].iter().zip(others).map(|(b, v)| b * v).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QrConfig {
    pub taus: Vec<f64>,
    pub steps: usize,
    pub lr: f64,
}

impl Default for QrConfig {
    fn default() -> Self {
        Self {
            taus: crate::eval::default_taus(),
            steps: 1000,
            lr: 0.02,
        }
    }
}

/// One linear model per quantile level on standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRegressor {
    pub taus: Vec<f64>,
    feat_mean: Vec<f64>,
    feat_std: Vec<f64>,
    /// `[taus, 1 + p]`: intercept then slopes.
    weights: Vec<Vec<f64>>,
}

fn standardize_stats(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let p = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..p)
        .map(|j| {
            let s = (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn check_complete(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid(format!("{} feature rows for {} targets", x.len(), y.len())));
    }
    let p = x[0].len();
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::shape("regressor", "ragged feature rows"));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("regressor inputs must be complete and finite"));
    }
    Ok(p)
}

impl QuantileRegressor {
    /// Full-batch Adam on the mean pinball loss, intercepts started at the
    /// empirical quantiles, step size decaying linearly to a tenth.
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &QrConfig) -> Result<Self> {
        let p = check_complete(x, y)?;
        if cfg.taus.is_empty() || cfg.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::invalid("quantile levels must lie in (0, 1)"));
        }
        let (feat_mean, feat_std) = standardize_stats(x);
        let xs: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().zip(&feat_mean).zip(&feat_std).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        let sorted_y = crate::forecast::sorted_copy(y);
        let nt = cfg.taus.len();
        let mut w = Tensor::zeros(&[nt, p + 1]);
        for (t, &tau) in cfg.taus.iter().enumerate() {
            w.data_mut()[t * (p + 1)] = crate::forecast::quantile_sorted(&sorted_y, tau);
        }
        let mut adam = AdamState::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            [&w],
        );
        let names = ["qr.weights".to_string()];
        let n = x.len() as f64;
        for step in 0..cfg.steps {
            adam.config.lr = cfg.lr * (1.0 - 0.9 * step as f64 / cfg.steps.max(1) as f64);
            let mut g = Tensor::zeros(&[nt, p + 1]);
            for (row, &target) in xs.iter().zip(y) {
                for (t, &tau) in cfg.taus.iter().enumerate() {
                    let wt = &w.data()[t * (p + 1)..(t + 1) * (p + 1)];
                    let q = wt[0] + wt[1..].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                    let dq = if target > q { -tau } else { 1.0 - tau } / n;
                    let gt = &mut g.data_mut()[t * (p + 1)..(t + 1) * (p + 1)];
                    gt[0] += dq;
                    for (gi, xi) in gt[1..].iter_mut().zip(row) {
                        *gi += dq * xi;
                    }
                }
            }
            adam.step(&mut [&mut w], &[g], &names)
                .map_err(|e| Error::Diverged {
                    epoch: step,
                    detail: e.to_string(),
                })?;
        }
        let weights = w.data().chunks(p + 1).map(<[f64]>::to_vec).collect();
        Ok(Self {
            taus: cfg.taus.clone(),
            feat_mean,
            feat_std,
            weights,
        })
    }

    /// Quantiles in logit space, sorted to remove crossings.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.feat_mean.len() {
            return Err(Error::shape(
                "qr_predict",
                format!("{} features, model expects {}", x.len(), self.feat_mean.len()),
            ));
        }
        let mut q: Vec<f64> = self
            .weights
            .iter()
            .map(|w| {
                w[0] + w[1..]
                    .iter()
                    .zip(x)
                    .zip(self.feat_mean.iter().zip(&self.feat_std))
                    .map(|((a, v), (m, s))| a * (v - m) / s)
                    .sum::<f64>()
            })
            .collect();
        q.sort_by(f64::total_cmp);
        Ok(q)
    }

    /// Sorted quantiles mapped to power.
    pub fn predict_power(&self, x: &[f64]) -> Result<Vec<f64>> {
        let tf = LogitTransform::default();
        Ok(self.predict(x)?.into_iter().map(|v| tf.inverse(v)).collect())
    }

    /// `m` inverse-CDF draws from the power-space quantile curve at `x`.
    pub fn forecast(&self, x: &[f64], m: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let q = self.predict_power(x)?;
        Ok(sample_from_quantiles(&self.taus, &q, m, rng))
    }
}

/// Inverse-CDF sampling from quantiles `q` at levels `taus`: linear between
/// knots, linear extrapolation of the end segments, clipped to `[0, 1]`.
pub fn sample_from_quantiles(taus: &[f64], q: &[f64], m: usize, rng: &mut Rng) -> Vec<f64> {
    (0..m).map(|_| quantile_curve(taus, q, rng.random::<f64>())).collect()
}

fn quantile_curve(taus: &[f64], q: &[f64], u: f64) -> f64 {
    let n = taus.len();
    if n == 1 {
        return q[0].clamp(0.0, 1.0);
    }
    let seg = taus.partition_point(|&t| t <= u).clamp(1, n - 1);
    let (t0, t1, q0, q1) = (taus[seg - 1], taus[seg], q[seg - 1], q[seg]);
    (q0 + (q1 - q0) * (u - t0) / (t1 - t0)).clamp(0.0, 1.0)
}

/// Quantile regression on complete windows; rejects any missing value.
pub fn reference_model(windows: &[Window], cfg: &QrConfig) -> Result<QuantileRegressor> {
    if windows.iter().any(|w| w.mask.missing_count() > 0) {
        return Err(Error::invalid("reference model needs windows without missing values"));
    }
    let (x, y) = window_rows(windows);
    QuantileRegressor::fit(&x, &y, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GaussConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            epochs: 50,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Network emitting `(mu, raw sigma)` of the logit target;
/// `sigma = softplus(raw) + 1e-3`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianRegressor {
    pub net: Mlp,
}

impl GaussianRegressor {
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &GaussConfig) -> Result<Self> {
        let p = check_complete(x, y)?;
        let mut widths = vec![p];
        widths.extend(&cfg.hidden);
        widths.push(2);
        let mut net = Mlp::init(cfg.seed, &widths)?;
        let mut adam = AdamState::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            net.params(),
        );
        let names = net.param_names("gauss");
        let mut order: Vec<usize> = (0..x.len()).collect();
        for epoch in 0..cfg.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng::stream(cfg.seed, 1 + epoch as u64));
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let xb = Tensor::from_rows(&chunk.iter().map(|&i| x[i].clone()).collect::<Vec<_>>())?;
                let yb = Tensor::matrix(chunk.len(), 1, chunk.iter().map(|&i| y[i]).collect())?;
                let mut tape = Tape::new();
                let mut vars = Vec::new();
                let bound = net.bind(&mut tape, &mut vars)?;
                let xv = tape.constant(xb)?;
                let out = bound.forward(&mut tape, xv)?;
                let mu = tape.slice(out, 0, 1)?;
                let raw = tape.slice(out, 1, 2)?;
                let sd = tape.softplus(raw)?;
                let sd = tape.add_scalar(sd, SCALE_FLOOR)?;
                let yv = tape.constant(yb)?;
                let lp = DiagGaussian::new(&tape, mu, sd)?.log_prob(&mut tape, yv)?;
                let loss = tape.mean(lp)?;
                let loss = tape.neg(loss)?;
                let mut grads = tape.backward(loss)?;
                let mut g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("leaf")).collect();
                clip_grad_norm(&mut g, 10.0);
                adam.step(&mut net.params_mut(), &g, &names).map_err(|e| Error::Diverged {
                    epoch,
                    detail: e.to_string(),
                })?;
            }
        }
        Ok(Self { net })
    }

    /// `(mu, sigma)` in logit space.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let out = self.net.forward(&Tensor::row(x))?;
        let raw = out.get(0, 1);
        let sd = if raw > 30.0 { raw } else { raw.exp().ln_1p() };
        Ok((out.get(0, 0), sd + SCALE_FLOOR))
    }

    /// `m` draws mapped to power.
    pub fn forecast(&self, x: &[f64], m: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let (mu, sd) = self.predict(x)?;
        let normal = Normal::new(mu, sd).map_err(|e| Error::invalid(format!("Gaussian forecast: {e}")))?;
        let tf = LogitTransform::default();
        Ok((0..m).map(|_| tf.inverse(normal.sample(rng)).clamp(0.0, 1.0)).collect())
    }
}
