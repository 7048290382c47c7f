//! Scores for ensemble forecasts of normalized power.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_preamble;
use crate::error::{Error, Result};
use crate::forecast::{quantile_sorted, sorted_copy};

/// Nominal central-interval levels for reliability and sharpness.
pub const DEFAULT_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Quantile levels 0.05, 0.10, ..., 0.95.
pub fn default_taus() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}

/// CRPS of the empirical CDF of `samples` against `y`:
/// `mean|X - y| - mean|X - X'| / 2`, the pair sum done on sorted samples.
pub fn crps_ensemble(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("CRPS of an empty ensemble"));
    }
    if !y.is_finite() {
        return Err(Error::invalid(format!("CRPS against non-finite observation {y}")));
    }
    let s = sorted_copy(samples);
    Ok(crps_sorted(&s, y))
}

fn crps_sorted(s: &[f64], y: f64) -> f64 {
    let m = s.len() as f64;
    let abs_err = s.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    // sum_{i,j} |x_i - x_j| = 2 sum_i (2i - m + 1) x_(i)
    let spread: f64 = s
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - m + 1.0) * x)
        .sum::<f64>()
        / (m * m);
    (abs_err - spread).max(0.0)
}

/// `tau * (y - q)^+ + (1 - tau) * (q - y)^+`
pub fn pinball(q: f64, y: f64, tau: f64) -> f64 {
    if y >= q {
        tau * (y - q)
    } else {
        (1.0 - tau) * (q - y)
    }
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() || levels.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
        return Err(Error::invalid("nominal levels must lie in (0, 1]"));
    }
    Ok(())
}

/// Central interval at level `gamma`; at `gamma = 1` it is the whole unit
/// interval.
fn central_interval(sorted: &[f64], gamma: f64) -> (f64, f64) {
    if gamma >= 1.0 {
        return (0.0, 1.0);
    }
    let a = (1.0 - gamma) / 2.0;
    (quantile_sorted(sorted, a), quantile_sorted(sorted, 1.0 - a))
}

fn check_cases(ensembles: &[Vec<f64>], observations: Option<&[f64]>) -> Result<()> {
    if ensembles.is_empty() || ensembles.iter().any(Vec::is_empty) {
        return Err(Error::invalid("no forecast cases, or an empty ensemble"));
    }
    if let Some(obs) = observations {
        if obs.len() != ensembles.len() {
            return Err(Error::shape(
                "scores",
                format!("{} ensembles, {} observations", ensembles.len(), obs.len()),
            ));
        }
    }
    Ok(())
}

/// Fraction of observations inside each central interval.
pub fn reliability(ensembles: &[Vec<f64>], observations: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    check_cases(ensembles, Some(observations))?;
    check_levels(levels)?;
    let sorted: Vec<Vec<f64>> = ensembles.iter().map(|e| sorted_copy(e)).collect();
    Ok(levels
        .iter()
        .map(|&g| {
            let hits = sorted
                .iter()
                .zip(observations)
                .filter(|(s, &y)| {
                    let (lo, hi) = central_interval(s, g);
                    lo <= y && y <= hi
                })
                .count();
            hits as f64 / observations.len() as f64
        })
        .collect())
}

/// Mean width of each central interval.
pub fn sharpness(ensembles: &[Vec<f64>], levels: &[f64]) -> Result<Vec<f64>> {
    check_cases(ensembles, None)?;
    check_levels(levels)?;
    let sorted: Vec<Vec<f64>> = ensembles.iter().map(|e| sorted_copy(e)).collect();
    Ok(levels
        .iter()
        .map(|&g| {
            sorted
                .iter()
                .map(|s| {
                    let (lo, hi) = central_interval(s, g);
                    hi - lo
                })
                .sum::<f64>()
                / sorted.len() as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: String,
    pub n_cases: usize,
    pub crps: f64,
    /// `crps * 100`, percent of capacity.
    pub crps_x100: f64,
    pub levels: Vec<f64>,
    pub coverage: Vec<f64>,
    pub width: Vec<f64>,
    pub taus: Vec<f64>,
    pub pinball: Vec<f64>,
}

/// Scores `ensembles` against `observations`.
pub fn score(model: &str, ensembles: &[Vec<f64>], observations: &[f64], levels: &[f64], taus: &[f64]) -> Result<ScoreReport> {
    check_cases(ensembles, Some(observations))?;
    if taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::invalid("pinball levels must lie in (0, 1)"));
    }
    let n = ensembles.len() as f64;
    let mut crps = 0.0;
    let mut pin = vec![0.0; taus.len()];
    for (e, &y) in ensembles.iter().zip(observations) {
        if !y.is_finite() {
            return Err(Error::invalid("non-finite observation"));
        }
        let s = sorted_copy(e);
        crps += crps_sorted(&s, y);
        for (p, &t) in pin.iter_mut().zip(taus) {
            *p += pinball(quantile_sorted(&s, t), y, t);
        }
    }
    crps /= n;
    pin.iter_mut().for_each(|p| *p /= n);
    Ok(ScoreReport {
        model: model.to_string(),
        n_cases: ensembles.len(),
        crps,
        crps_x100: 100.0 * crps,
        levels: levels.to_vec(),
        coverage: reliability(ensembles, observations, levels)?,
        width: sharpness(ensembles, levels)?,
        taus: taus.to_vec(),
        pinball: pin,
    })
}

impl ScoreReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// `model,level,nominal,empirical`
    pub fn write_reliability_csv(reports: &[ScoreReport], path: &Path, preamble: &[String]) -> Result<()> {
        let mut w = writer(path, preamble)?;
        w.write_record(["model", "level", "nominal", "empirical"])?;
        for r in reports {
            for (l, c) in r.levels.iter().zip(&r.coverage) {
                w.write_record([r.model.clone(), format!("{l}"), format!("{l}"), format!("{c}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `model,level,width`
    pub fn write_sharpness_csv(reports: &[ScoreReport], path: &Path, preamble: &[String]) -> Result<()> {
        let mut w = writer(path, preamble)?;
        w.write_record(["model", "level", "width"])?;
        for r in reports {
            for (l, v) in r.levels.iter().zip(&r.width) {
                w.write_record([r.model.clone(), format!("{l}"), format!("{v}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn writer(path: &Path, preamble: &[String]) -> Result<csv::Writer<BufWriter<File>>> {
    use std::io::Write;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_preamble(&mut out, preamble).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise_crps(s: &[f64], y: f64) -> f64 {
        let m = s.len() as f64;
        let a = s.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
        let b = s.iter().flat_map(|x| s.iter().map(move |z| (x - z).abs())).sum::<f64>() / (m * m);
        a - 0.5 * b
    }

    #[test]
    fn crps_examples() {
        assert!((crps_ensemble(&[0.3], 0.7).unwrap() - 0.4).abs() < 1e-15);
        assert!((crps_ensemble(&[0.0, 1.0], 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(crps_ensemble(&[0.4; 6], 0.4).unwrap(), 0.0);
        assert!(crps_ensemble(&[], 0.4).is_err());
        let s = [0.9, 0.1, 0.35, 0.35, 0.6, 0.05, 0.77];
        assert!((crps_ensemble(&s, 0.42).unwrap() - pairwise_crps(&s, 0.42)).abs() < 1e-14);
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball(0.0, 1.0, 0.9), 0.9);
        assert_eq!(pinball(0.3, 0.3, 0.2), 0.0);
        assert!((pinball(0.7, 0.2, 0.5) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn interval_edge_cases() {
        let ens = vec![vec![0.5; 10], vec![0.2; 10]];
        let obs = [0.1, 0.9];
        let cov = reliability(&ens, &obs, &[0.5, 0.9, 1.0]).unwrap();
        assert_eq!(cov, vec![0.0, 0.0, 1.0]);
        assert_eq!(sharpness(&ens, &[0.5, 0.9]).unwrap(), vec![0.0, 0.0]);
        assert!(reliability(&ens, &obs, &[0.0]).is_err());
        assert!(sharpness(&[], &[0.5]).is_err());
    }

    #[test]
    fn report_fields_line_up() {
        let ens = vec![vec![0.1, 0.5, 0.9], vec![0.2, 0.3, 0.4]];
        let r = score("m", &ens, &[0.5, 0.3], &DEFAULT_LEVELS, &default_taus()).unwrap();
        assert_eq!(r.coverage.len(), 9);
        assert_eq!(r.pinball.len(), 19);
        assert!((r.crps_x100 - 100.0 * r.crps).abs() < 1e-12);
        assert!(r.width.windows(2).all(|p| p[0] <= p[1]));
    }
}
