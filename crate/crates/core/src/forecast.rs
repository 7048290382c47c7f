//! Forecasting by importance resampling.
//!
//! For a window whose target is hidden, `L` latent draws are taken from the
//! encoder and a full vector `z_i` is drawn from the decoder for each. The
//! draws are weighted by `p(z^o | u) p(u) / q(u | g(z))` over the observed
//! coordinates and `M` of them are resampled. The target forecast is the last
//! coordinate of each resampled vector mapped back to power.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::Rng as _;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{write_preamble, Window};
use crate::dist::LogitTransform;
use crate::error::{Error, Result};
use crate::genmodel::{importance_draws, Batch, GenerativeModel};
use crate::missing::Mask;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

impl std::str::FromStr for Resampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "multinomial" => Ok(Self::Multinomial),
            "systematic" => Ok(Self::Systematic),
            other => Err(Error::invalid(format!("unknown resampling scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    /// Proposals per origin.
    pub l: usize,
    /// Resampled scenarios per origin.
    pub m: usize,
    pub resampling: Resampling,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            l: 1000,
            m: 200,
            resampling: Resampling::Multinomial,
        }
    }
}

/// `L` proposal pairs `(u_i, z_i)` with log ratios and normalized weights.
/// Proposals with non-finite ratios have weight 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub u: Tensor,
    /// Logit-space draws, `[L, d]`.
    pub z: Tensor,
    pub log_r: Vec<f64>,
    pub weights: Vec<f64>,
    /// Mask the proposals were conditioned on (target always missing).
    pub mask: Mask,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.log_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_r.is_empty()
    }

    /// `1 / sum w_i^2`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Softmax of the log ratios, skipping non-finite entries (weight 0).
pub fn normalize_weights(log_r: &[f64]) -> Result<Vec<f64>> {
    let max = log_r
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("all importance ratios are -inf or NaN".into()));
    }
    let mut w: Vec<f64> = log_r
        .iter()
        .map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// Draws `l` proposals for `values` (logit space) with the target coordinate
/// forced missing.
pub fn propose(model: &GenerativeModel, values: &[f64], mask: &Mask, rng: &mut Rng, l: usize) -> Result<ProposalSet> {
    if l == 0 {
        return Err(Error::invalid("number of proposals L must be at least 1"));
    }
    let d = values.len();
    if d != model.data_dim() || mask.len() != d {
        return Err(Error::shape(
            "propose",
            format!("window of {d} values / mask of {} for a model of dim {}", mask.len(), model.data_dim()),
        ));
    }
    let mut mask = mask.clone();
    mask.set_missing(d - 1, true);
    let batch = Batch::new(&[(values, &mask)], model.config().encoder_mask_input)?;
    let draws = importance_draws(model, &batch, rng, l)?;
    let (loc, scale, df) = (
        draws.decoder.loc.data(),
        draws.decoder.scale.data(),
        draws.decoder.df.data(),
    );
    let mut z = Vec::with_capacity(l * d);
    for i in 0..l * d {
        let t = StudentT::new(df[i]).map_err(|e| Error::invalid(format!("Student's t with df {}: {e}", df[i])))?;
        z.push(loc[i] + scale[i] * t.sample(rng));
    }
    let dropped = draws.log_r.iter().filter(|v| !v.is_finite()).count();
    if dropped > 0 {
        warn!("{dropped} of {l} proposals have non-finite importance ratios and were dropped");
    }
    let weights = normalize_weights(&draws.log_r)?;
    Ok(ProposalSet {
        u: draws.u,
        z: Tensor::matrix(l, d, z)?,
        log_r: draws.log_r,
        weights,
        mask,
    })
}

/// Indices of `m` draws with probabilities `weights`.
pub fn resample_indices(weights: &[f64], m: usize, scheme: Resampling, rng: &mut Rng) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::invalid("number of scenarios M must be at least 1"));
    }
    if weights.is_empty() {
        return Err(Error::invalid("no proposals to resample"));
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let total = acc;
    let pick = |x: f64| cdf.partition_point(|&c| c <= x * total).min(weights.len() - 1);
    Ok(match scheme {
        Resampling::Multinomial => (0..m).map(|_| pick(rng.random::<f64>())).collect(),
        Resampling::Systematic => {
            let start: f64 = rng.random::<f64>();
            (0..m).map(|i| pick((start + i as f64) / m as f64)).collect()
        }
    })
}

/// Target samples in power space for one origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastEnsemble {
    pub origin: usize,
    pub lead: usize,
    pub samples: Vec<f64>,
}

/// Resampled joint scenarios and the ensemble taken from their last
/// coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampled {
    pub indices: Vec<usize>,
    /// Logit-space scenarios, `[M, d]`.
    pub scenarios: Tensor,
    pub ensemble: ForecastEnsemble,
}

pub fn resample(
    proposals: &ProposalSet,
    m: usize,
    scheme: Resampling,
    origin: usize,
    lead: usize,
    rng: &mut Rng,
) -> Result<Resampled> {
    let indices = resample_indices(&proposals.weights, m, scheme, rng)?;
    let d = proposals.z.cols();
    let tf = LogitTransform::default();
    let mut scen = Vec::with_capacity(m * d);
    for &i in &indices {
        scen.extend_from_slice(proposals.z.row_slice(i));
    }
    let samples = indices.iter().map(|&i| tf.inverse(proposals.z.get(i, d - 1))).collect();
    Ok(Resampled {
        indices,
        scenarios: Tensor::matrix(m, d, scen)?,
        ensemble: ForecastEnsemble { origin, lead, samples },
    })
}

/// Scenario values at the missing feature positions (target excluded),
/// logit space. Target forecasts never use these; dropping them is the
/// marginalization over missing features.
#[derive(Clone, Debug, PartialEq)]
pub struct Imputations {
    pub positions: Vec<usize>,
    /// `values[j][p]` for scenario `j`, position `positions[p]`.
    pub values: Vec<Vec<f64>>,
}

pub fn missing_feature_imputations(
    proposals: &ProposalSet,
    m: usize,
    scheme: Resampling,
    rng: &mut Rng,
) -> Result<Imputations> {
    let indices = resample_indices(&proposals.weights, m, scheme, rng)?;
    Ok(imputations_at(proposals, &indices))
}

fn imputations_at(proposals: &ProposalSet, indices: &[usize]) -> Imputations {
    let d = proposals.z.cols();
    let positions: Vec<usize> = (0..d - 1).filter(|&i| proposals.mask.is_missing(i)).collect();
    let values = indices
        .iter()
        .map(|&j| positions.iter().map(|&p| proposals.z.get(j, p)).collect())
        .collect();
    Imputations { positions, values }
}

/// Proposal, resampling and ensemble extraction for one window.
pub fn forecast_window(model: &GenerativeModel, window: &Window, cfg: &ForecastConfig, rng: &mut Rng) -> Result<ForecastEnsemble> {
    let p = propose(model, &window.values, &window.mask, rng, cfg.l)?;
    Ok(resample(&p, cfg.m, cfg.resampling, window.origin, window.lead, rng)?.ensemble)
}

/// Type-7 empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted_copy(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Type-7 quantiles at strictly increasing `levels` in `[0, 1]`.
pub fn ensemble_to_quantiles(samples: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("empty ensemble"));
    }
    if levels.iter().any(|l| !(0.0..=1.0).contains(l)) || levels.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::invalid("quantile levels must be strictly increasing in [0, 1]"));
    }
    let s = sorted_copy(samples);
    Ok(levels.iter().map(|&l| quantile_sorted(&s, l)).collect())
}

/// A forecast paired with the timestamp of its origin.
pub struct LabeledForecast<'a> {
    pub origin_timestamp: String,
    pub ensemble: &'a ForecastEnsemble,
}

fn open(path: &Path, preamble: &[String]) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_preamble(&mut out, preamble).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(out))
}

/// `origin_timestamp,lead,sample_index,value`
pub fn write_samples_csv(path: &Path, preamble: &[String], forecasts: &[LabeledForecast<'_>]) -> Result<()> {
    let mut w = open(path, preamble)?;
    w.write_record(["origin_timestamp", "lead", "sample_index", "value"])?;
    for f in forecasts {
        for (i, v) in f.ensemble.samples.iter().enumerate() {
            w.write_record([
                f.origin_timestamp.clone(),
                f.ensemble.lead.to_string(),
                i.to_string(),
                format!("{v}"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `origin_timestamp,lead,level,value`
pub fn write_quantiles_csv(path: &Path, preamble: &[String], forecasts: &[LabeledForecast<'_>], levels: &[f64]) -> Result<()> {
    let mut w = open(path, preamble)?;
    w.write_record(["origin_timestamp", "lead", "level", "value"])?;
    for f in forecasts {
        let q = ensemble_to_quantiles(&f.ensemble.samples, levels)?;
        for (l, v) in levels.iter().zip(q) {
            w.write_record([
                f.origin_timestamp.clone(),
                f.ensemble.lead.to_string(),
                format!("{l}"),
                format!("{v}"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One ensemble read back from a samples file.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub origin_timestamp: String,
    pub lead: usize,
    pub samples: Vec<f64>,
}

/// Reads a file written by [`write_samples_csv`]. Rows of one ensemble must
/// be contiguous with `sample_index` counting up from 0.
pub fn read_samples_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["origin_timestamp", "lead", "sample_index", "value"] {
        return Err(Error::Data(format!(
            "{}: expected header origin_timestamp,lead,sample_index,value",
            path.display()
        )));
    }
    let mut out: Vec<SampleRecord> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| Error::Data(format!("{}:{line}: bad {what}", path.display()));
        let lead: usize = rec[1].parse().map_err(|_| bad("lead"))?;
        let idx: usize = rec[2].parse().map_err(|_| bad("sample_index"))?;
        let value: f64 = rec[3].parse().map_err(|_| bad("value"))?;
        match out.last_mut() {
            Some(last) if last.origin_timestamp == rec[0] && last.lead == lead => {
                if idx != last.samples.len() {
                    return Err(bad("sample_index (out of order)"));
                }
                last.samples.push(value);
            }
            _ => {
                if idx != 0 {
                    return Err(bad("sample_index (ensemble must start at 0)"));
                }
                out.push(SampleRecord {
                    origin_timestamp: rec[0].to_string(),
                    lead,
                    samples: vec![value],
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::ModelConfig;
    use crate::rng;

    #[test]
    fn weights_examples() {
        let w = normalize_weights(&[0.0; 4]).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let w = normalize_weights(&[2f64.ln(), 0.0, 0.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        let shifted = normalize_weights(&[2f64.ln() + 40.0, 40.0, 40.0]).unwrap();
        for (a, b) in w.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = normalize_weights(&[f64::NAN, 0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(w, vec![0.0, 1.0, 0.0]);
        assert!(normalize_weights(&[f64::NEG_INFINITY, f64::NAN]).is_err());
    }

    #[test]
    fn degenerate_weights_repeat_one_proposal() {
        let mut r = rng::stream(1, 0);
        for scheme in [Resampling::Multinomial, Resampling::Systematic] {
            let idx = resample_indices(&[1.0, 0.0, 0.0], 50, scheme, &mut r).unwrap();
            assert!(idx.iter().all(|&i| i == 0));
            let idx = resample_indices(&[0.0, 0.0, 1.0], 50, scheme, &mut r).unwrap();
            assert!(idx.iter().all(|&i| i == 2));
        }
        assert!(resample_indices(&[1.0], 0, Resampling::Multinomial, &mut r).is_err());
    }

    #[test]
    fn type7_quantiles() {
        let q = ensemble_to_quantiles(&[0.8, 0.2, 0.6, 0.4], &[0.5]).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-15);
        let q = ensemble_to_quantiles(&[0.3; 5], &[0.1, 0.5, 0.9]).unwrap();
        assert!(q.iter().all(|&v| v == 0.3));
        assert!(ensemble_to_quantiles(&[], &[0.5]).is_err());
        assert!(ensemble_to_quantiles(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn proposals_are_reproducible_and_normalized() {
        let model = GenerativeModel::new(
            ModelConfig {
                latent_dim: 2,
                hidden: vec![6],
                flow_hidden: 4,
                ..ModelConfig::new(4)
            },
            2,
        )
        .unwrap();
        let mask = Mask::new(vec![false, true, false, false]);
        let vals = [0.1, f64::NAN, -0.3, 0.7];
        let a = propose(&model, &vals, &mask, &mut rng::stream(3, 0), 64).unwrap();
        let b = propose(&model, &vals, &mask, &mut rng::stream(3, 0), 64).unwrap();
        assert_eq!(a, b);
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.effective_sample_size() <= 64.0 + 1e-9);
        assert!(a.mask.is_missing(3));

        let imp = missing_feature_imputations(&a, 10, Resampling::Multinomial, &mut rng::stream(4, 0)).unwrap();
        assert_eq!(imp.positions, vec![1]);
        assert_eq!(imp.values.len(), 10);

        let r = resample(&a, 20, Resampling::Multinomial, 7, 1, &mut rng::stream(5, 0)).unwrap();
        assert_eq!(r.ensemble.samples.len(), 20);
        assert!(r.ensemble.samples.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
