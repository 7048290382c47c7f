//! Run configuration: one TOML file, every field optional, flags override.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gapcast_core::bench::{GaussConfig, ImputerKind, QrConfig};
use gapcast_core::data::Ar2Config;
use gapcast_core::forecast::{ForecastConfig, Resampling};
use gapcast_core::genmodel::{ModelConfig, TrainConfig};
use gapcast_core::missing::{MarSpec, Mechanism, MissingnessConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub missing: MissingSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub forecast: ForecastSection,
    pub bench: BenchSection,
    pub sweep: SweepSection,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            synthetic: SyntheticSection::default(),
            missing: MissingSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            forecast: ForecastSection::default(),
            bench: BenchSection::default(),
            sweep: SweepSection::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// CSV input. Without it, commands that need data use the synthetic
    /// AR(2) series.
    pub path: Option<PathBuf>,
    /// Optional 0/1 mask file aligned with `path`.
    pub mask_path: Option<PathBuf>,
    pub target: String,
    /// Auxiliary sites whose lags join the features.
    pub aux: Vec<String>,
    pub h: usize,
    pub lead: usize,
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            mask_path: None,
            target: "site_0".into(),
            aux: Vec::new(),
            h: 24,
            lead: 1,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n: usize,
    pub phi: [f64; 2],
    pub mean: f64,
    pub noise_std: f64,
    pub aux_sites: usize,
    pub aux_noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = Ar2Config::default();
        Self {
            n: d.n,
            phi: [d.phi.0, d.phi.1],
            mean: d.mean,
            noise_std: d.noise_std,
            aux_sites: d.aux_sites,
            aux_noise_std: d.aux_noise_std,
            seed: d.seed,
        }
    }
}

impl SyntheticSection {
    pub fn to_core(&self) -> Ar2Config {
        Ar2Config {
            n: self.n,
            phi: (self.phi[0], self.phi[1]),
            mean: self.mean,
            noise_std: self.noise_std,
            aux_sites: self.aux_sites,
            aux_noise_std: self.aux_noise_std,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingSection {
    pub mechanism: Mechanism,
    /// Missing rate of the target site.
    pub rate: f64,
    /// Missing rate of auxiliary sites; defaults to `rate`.
    pub aux_rate: Option<f64>,
    pub mar: Option<MarSpec>,
    pub seed: u64,
}

impl Default for MissingSection {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Mcar,
            rate: 0.2,
            aux_rate: None,
            mar: None,
            seed: 0,
        }
    }
}

impl MissingSection {
    pub fn to_core(&self, rate: f64) -> MissingnessConfig {
        MissingnessConfig {
            mechanism: self.mechanism,
            rate,
            mar: self.mar.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub n_flows: usize,
    pub flow_hidden: usize,
    pub encoder_mask_input: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::new(1);
        Self {
            latent_dim: d.latent_dim,
            hidden: d.hidden,
            n_flows: d.n_flows,
            flow_hidden: d.flow_hidden,
            encoder_mask_input: d.encoder_mask_input,
        }
    }
}

impl ModelSection {
    pub fn to_core(&self, data_dim: usize) -> ModelConfig {
        ModelConfig {
            data_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
            n_flows: self.n_flows,
            flow_hidden: self.flow_hidden,
            encoder_mask_input: self.encoder_mask_input,
        }
    }
}

pub type TrainSection = TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub l: usize,
    pub m: usize,
    pub resampling: Resampling,
    pub seed: u64,
}

impl Default for ForecastSection {
    fn default() -> Self {
        let d = ForecastConfig::default();
        Self {
            l: d.l,
            m: d.m,
            resampling: d.resampling,
            seed: 0,
        }
    }
}

impl ForecastSection {
    pub fn to_core(&self) -> ForecastConfig {
        ForecastConfig {
            l: self.l,
            m: self.m,
            resampling: self.resampling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Any of `climatology`, `qr-im`, `gauss-im`, `reference`.
    pub models: Vec<String>,
    pub imputer: ImputerKind,
    pub qr: QrConfig,
    pub gauss: GaussConfig,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            models: vec!["climatology".into(), "qr-im".into(), "gauss-im".into(), "reference".into()],
            imputer: ImputerKind::IterativeLinear,
            qr: QrConfig::default(),
            gauss: GaussConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    MissingRate,
    K,
    Lead,
    AuxMissingRate,
}

impl std::str::FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "missing_rate" => Self::MissingRate,
            "K" | "k" => Self::K,
            "lead" => Self::Lead,
            "aux_missing_rate" => Self::AuxMissingRate,
            other => bail!("unknown sweep axis `{other}` (missing_rate, K, lead, aux_missing_rate)"),
        })
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MissingRate => "missing_rate",
            Self::K => "K",
            Self::Lead => "lead",
            Self::AuxMissingRate => "aux_missing_rate",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Also run the baselines at every point.
    pub baselines: bool,
    /// Points evaluated concurrently (threads); results do not depend on it.
    pub jobs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axis: SweepAxis::MissingRate,
            values: vec![0.05, 0.10, 0.15, 0.20, 0.25],
            baselines: false,
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.h == 0 || d.lead == 0 {
            bail!("data.h and data.lead must be at least 1");
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            bail!("data.train_fraction must lie in (0, 1)");
        }
        for r in std::iter::once(self.missing.rate).chain(self.missing.aux_rate) {
            if !(0.0..=1.0).contains(&r) {
                bail!("missing rate {r} outside [0, 1]");
            }
        }
        if self.train.k == 0 {
            bail!("train.k must be at least 1");
        }
        if self.forecast.l == 0 || self.forecast.m == 0 {
            bail!("forecast.l and forecast.m must be at least 1");
        }
        for m in &self.bench.models {
            if !["climatology", "qr-im", "gauss-im", "reference"].contains(&m.as_str()) {
                bail!("unknown baseline `{m}`");
            }
        }
        if self.missing.mechanism == Mechanism::Mar && self.missing.mar.is_none() {
            bail!("missing.mechanism = \"mar\" needs a [missing.mar] section");
        }
        Ok(())
    }

    /// Canonical TOML rendering; the hash of this text labels outputs.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical text with `output_dir` cleared, so the same
    /// experiment written to two places carries the same label.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Header lines written at the top of every output file.
    pub fn preamble(&self) -> Vec<String> {
        vec![format!("gapcast {} config={}", env!("CARGO_PKG_VERSION"), self.hash())]
    }

    /// Sites (target first) in the order window features are laid out.
    pub fn site_names(&self) -> Vec<String> {
        std::iter::once(self.data.target.clone())
            .chain(self.data.aux.iter().cloned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.k, 50);
        assert_eq!(cfg.forecast.l, 1000);
        cfg.validate().unwrap();
    }

    #[test]
    fn canonical_round_trip_keeps_hash() {
        let mut cfg = RunConfig::default();
        cfg.missing.aux_rate = Some(0.05);
        cfg.data.aux = vec!["site_1".into()];
        let back: RunConfig = toml::from_str(&cfg.canonical()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut moved = cfg.clone();
        moved.output_dir = PathBuf::from("elsewhere");
        assert_eq!(moved.hash(), cfg.hash());
        moved.train.k = 7;
        assert_ne!(moved.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[data]\nhh = 3\n").is_err());
        let cfg: RunConfig = toml::from_str("[missing]\nrate = 1.5\n").unwrap();
        assert!(cfg.validate().is_err());
        assert!(toml::from_str::<RunConfig>("[missing]\nmechanism = \"mnar\"\n").is_err());
    }
}
