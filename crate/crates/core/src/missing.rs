//! Observation masks, missingness simulation, and zero imputation.
//!
//! Mask convention throughout the crate: `true` (1) = missing, `false` (0) =
//! observed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Missingness indicator for one vector; `true` marks a missing coordinate.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn all_observed(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn all_missing(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_missing(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set_missing(&mut self, i: usize, missing: bool) {
        self.0[i] = missing;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn missing_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// `1.0` where observed, `0.0` where missing.
    pub fn observed_indicator(&self) -> Vec<f64> {
        self.0.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect()
    }
}

/// Row-major grid of missingness bits for a table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl MaskGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, missing: bool) {
        self.bits[r * self.cols + c] = missing;
    }

    pub fn missing_rate(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    pub fn column_missing_rate(&self, c: usize) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        (0..self.rows).filter(|&r| self.get(r, c)).count() as f64 / self.rows as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    Mar,
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            "mnar" => Err(Error::invalid(
                "MNAR simulation is not supported; inference here is only valid under MAR",
            )),
            other => Err(Error::invalid(format!("unknown missingness mechanism '{other}'"))),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Mcar => "mcar",
            Mechanism::Mar => "mar",
        })
    }
}

/// Logistic dependence of missingness on always-observed covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarSpec {
    /// Columns that receive missing values.
    pub targets: Vec<usize>,
    /// `(column, coefficient)` pairs; columns must be fully observed and
    /// disjoint from `targets`. Covariates are z-scored before use.
    pub covariates: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessConfig {
    pub mechanism: Mechanism,
    pub rate: f64,
    pub mar: Option<MarSpec>,
    pub seed: u64,
}

impl MissingnessConfig {
    pub fn mcar(rate: f64, seed: u64) -> Self {
        Self {
            mechanism: Mechanism::Mcar,
            rate,
            mar: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::invalid(format!("missing rate {} outside [0, 1]", self.rate)));
        }
        if let (Mechanism::Mar, Some(spec)) = (self.mechanism, &self.mar) {
            if let Some((c, _)) = spec.covariates.iter().find(|(c, _)| spec.targets.contains(c)) {
                return Err(Error::invalid(format!(
                    "MAR covariate column {c} is also a masked column"
                )));
            }
        }
        if self.mechanism == Mechanism::Mar && self.mar.is_none() {
            return Err(Error::invalid("MAR mechanism needs a dependence spec"));
        }
        Ok(())
    }
}

/// Every cell missing independently with probability `cfg.rate`.
pub fn gen_mask_mcar(cfg: &MissingnessConfig, n_rows: usize, width: usize, rng: &mut impl rand::Rng) -> Result<MaskGrid> {
    cfg.validate()?;
    let mut grid = MaskGrid::new(n_rows, width);
    for b in grid.bits.iter_mut() {
        *b = rng.random::<f64>() < cfg.rate;
    }
    Ok(grid)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Solves `mean_r sigmoid(b0 + eta_r) = rate` for `b0` by bisection.
fn calibrate_intercept(eta: &[f64], rate: f64) -> Result<f64> {
    let gap = |b0: f64| eta.iter().map(|e| sigmoid(b0 + e)).sum::<f64>() / eta.len() as f64 - rate;
    let mut width = 50.0;
    while gap(-width) > 0.0 || gap(width) < 0.0 {
        width *= 2.0;
        if width > 1e4 {
            return Err(Error::invalid(format!(
                "cannot calibrate MAR intercept for rate {rate}: degenerate coefficients"
            )));
        }
    }
    let (mut lo, mut hi) = (-width, width);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Logistic MAR masks over column-major `data`; covariate columns are never
/// masked. The intercept is calibrated so the expected rate over target
/// cells is `cfg.rate`.
pub fn gen_mask_mar(cfg: &MissingnessConfig, data: &[Vec<f64>], rng: &mut impl rand::Rng) -> Result<MaskGrid> {
    cfg.validate()?;
    let spec = cfg
        .mar
        .as_ref()
        .ok_or_else(|| Error::invalid("MAR mechanism needs a dependence spec"))?;
    let cols = data.len();
    let rows = data.first().map_or(0, Vec::len);
    for &c in spec.targets.iter().chain(spec.covariates.iter().map(|(c, _)| c)) {
        if c >= cols {
            return Err(Error::invalid(format!("column {c} out of range ({cols} columns)")));
        }
    }
    let mut eta = vec![0.0; rows];
    for &(c, beta) in &spec.covariates {
        let col = &data[c];
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("MAR covariate column {c} has missing values")));
        }
        let mean = col.iter().sum::<f64>() / rows as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for (e, v) in eta.iter_mut().zip(col) {
            *e += beta * (v - mean) / sd;
        }
    }

    let mut grid = MaskGrid::new(rows, cols);
    if rows == 0 || spec.targets.is_empty() {
        return Ok(grid);
    }
    let probs: Vec<f64> = if cfg.rate <= 0.0 {
        vec![0.0; rows]
    } else if cfg.rate >= 1.0 {
        vec![1.0; rows]
    } else {
        let b0 = calibrate_intercept(&eta, cfg.rate)?;
        eta.iter().map(|e| sigmoid(b0 + e)).collect()
    };
    for (r, p) in probs.iter().enumerate() {
        for &c in &spec.targets {
            grid.set(r, c, rng.random::<f64>() < *p);
        }
    }
    Ok(grid)
}

/// `g(z)`: observed coordinates copied, missing ones set to zero.
pub fn zero_impute(z: &[f64], s: &Mask) -> Result<Vec<f64>> {
    if z.len() != s.len() {
        return Err(Error::shape("zero_impute", format!("{} values, mask of {}", z.len(), s.len())));
    }
    z.iter()
        .zip(s.bits())
        .enumerate()
        .map(|(i, (&v, &missing))| {
            if missing {
                Ok(0.0)
            } else if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("observed coordinate {i} is {v}")))
            }
        })
        .collect()
}

/// Order-preserving partition of a vector into observed and missing parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsSplit {
    pub len: usize,
    pub observed: Vec<(usize, f64)>,
    pub missing: Vec<usize>,
}

impl ObsSplit {
    /// Rebuilds the full vector given values for the missing coordinates.
    pub fn reassemble(&self, missing_values: &[f64]) -> Result<Vec<f64>> {
        if missing_values.len() != self.missing.len() {
            return Err(Error::shape(
                "reassemble",
                format!("{} missing slots, {} values", self.missing.len(), missing_values.len()),
            ));
        }
        let mut out = vec![0.0; self.len];
        for &(i, v) in &self.observed {
            out[i] = v;
        }
        for (&i, &v) in self.missing.iter().zip(missing_values) {
            out[i] = v;
        }
        Ok(out)
    }
}

pub fn split_obs_missing(z: &[f64], s: &Mask) -> Result<ObsSplit> {
    if z.len() != s.len() {
        return Err(Error::shape("split_obs_missing", format!("{} values, mask of {}", z.len(), s.len())));
    }
    let mut observed = Vec::new();
    let mut missing = Vec::new();
    for (i, (&v, &m)) in z.iter().zip(s.bits()).enumerate() {
        if m {
            missing.push(i);
        } else {
            observed.push((i, v));
        }
    }
    Ok(ObsSplit {
        len: z.len(),
        observed,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn mcar_extremes() {
        let mut r = rng::stream(0, 0);
        let none = gen_mask_mcar(&MissingnessConfig::mcar(0.0, 0), 50, 4, &mut r).unwrap();
        assert_eq!(none.missing_rate(), 0.0);
        let all = gen_mask_mcar(&MissingnessConfig::mcar(1.0, 0), 50, 4, &mut r).unwrap();
        assert_eq!(all.missing_rate(), 1.0);
    }

    #[test]
    fn mcar_rate() {
        let g = gen_mask_mcar(&MissingnessConfig::mcar(0.2, 0), 25_000, 4, &mut rng::stream(3, 0)).unwrap();
        let rate = g.missing_rate();
        assert!((0.195..=0.205).contains(&rate), "{rate}");
    }

    #[test]
    fn mcar_rejects_bad_rate() {
        assert!(gen_mask_mcar(&MissingnessConfig::mcar(1.2, 0), 5, 5, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn mnar_rejected() {
        assert!("mnar".parse::<Mechanism>().is_err());
        assert_eq!("MCAR".parse::<Mechanism>().unwrap(), Mechanism::Mcar);
    }

    fn mar_cfg(beta: f64, rate: f64) -> MissingnessConfig {
        MissingnessConfig {
            mechanism: Mechanism::Mar,
            rate,
            mar: Some(MarSpec {
                targets: vec![0],
                covariates: vec![(1, beta)],
            }),
            seed: 0,
        }
    }

    fn covariate_data(n: usize) -> Vec<Vec<f64>> {
        let mut r = rng::stream(77, 1);
        let c: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        vec![vec![0.5; n], c]
    }

    #[test]
    fn mar_with_zero_beta_is_mcar() {
        let data = covariate_data(100_000);
        let g = gen_mask_mar(&mar_cfg(0.0, 0.2), &data, &mut rng::stream(5, 0)).unwrap();
        let rate = g.column_missing_rate(0);
        assert!((0.195..=0.205).contains(&rate), "{rate}");
        assert_eq!(g.column_missing_rate(1), 0.0);
    }

    #[test]
    fn mar_calibrated_rate_and_ordering() {
        let n = 100_000;
        let data = covariate_data(n);
        let g = gen_mask_mar(&mar_cfg(1.5, 0.2), &data, &mut rng::stream(6, 0)).unwrap();
        let rate = g.column_missing_rate(0);
        assert!((0.195..=0.205).contains(&rate), "{rate}");

        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| data[1][a].total_cmp(&data[1][b]));
        let decile = n / 10;
        let frac = |ix: &[usize]| ix.iter().filter(|&&r| g.get(r, 0)).count() as f64 / ix.len() as f64;
        assert!(frac(&idx[n - decile..]) > frac(&idx[..decile]));
    }

    #[test]
    fn mar_rejects_overlap() {
        let mut cfg = mar_cfg(1.0, 0.2);
        cfg.mar.as_mut().unwrap().covariates = vec![(0, 1.0)];
        assert!(gen_mask_mar(&cfg, &covariate_data(10), &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn mar_degenerate_coefficients_fail_to_bracket() {
        // an enormous coefficient makes the rate a step function of b0
        let data = vec![vec![0.5; 4], vec![0.0, 0.0, 0.0, 1.0]];
        let r = gen_mask_mar(&mar_cfg(1e6, 0.5), &data, &mut rng::stream(0, 0));
        assert!(r.is_err());
    }

    #[test]
    fn zero_impute_examples() {
        let s = Mask::new(vec![false, true, false]);
        assert_eq!(zero_impute(&[0.3, f64::NAN, 0.7], &s).unwrap(), vec![0.3, 0.0, 0.7]);
        assert_eq!(zero_impute(&[1.0, 2.0], &Mask::all_observed(2)).unwrap(), vec![1.0, 2.0]);
        assert_eq!(zero_impute(&[1.0, 2.0], &Mask::all_missing(2)).unwrap(), vec![0.0, 0.0]);
        assert!(zero_impute(&[f64::NAN], &Mask::all_observed(1)).is_err());
    }

    #[test]
    fn split_examples() {
        let s = Mask::new(vec![false, true, false]);
        let sp = split_obs_missing(&[10.0, 20.0, 30.0], &s).unwrap();
        assert_eq!(sp.observed, vec![(0, 10.0), (2, 30.0)]);
        assert_eq!(sp.missing, vec![1]);
        let all = split_obs_missing(&[1.0, 2.0], &Mask::all_observed(2)).unwrap();
        assert!(all.missing.is_empty());
    }

    proptest! {
        #[test]
        fn split_reassemble_round_trip(
            pairs in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 0..20)
        ) {
            let z: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let s = Mask::new(pairs.iter().map(|p| p.1).collect());
            let sp = split_obs_missing(&z, &s).unwrap();
            let fill: Vec<f64> = sp.missing.iter().map(|&i| z[i]).collect();
            prop_assert_eq!(sp.reassemble(&fill).unwrap(), z.clone());

            let g = zero_impute(&z, &s).unwrap();
            for (i, &m) in s.bits().iter().enumerate() {
                if m { prop_assert_eq!(g[i], 0.0) } else { prop_assert_eq!(g[i], z[i]) }
            }
        }
    }

    #[test]
    fn masks_are_data_independent_and_deterministic() {
        let cfg = MissingnessConfig::mcar(0.3, 9);
        let a = gen_mask_mcar(&cfg, 100, 3, &mut rng::stream(cfg.seed, 0)).unwrap();
        let b = gen_mask_mcar(&cfg, 100, 3, &mut rng::stream(cfg.seed, 0)).unwrap();
        assert_eq!(a, b);
    }
}
