//! Latent-variable model for windows with gaps.
//!
//! Decoder: `z | u ~ StudentT(mu(u), sigma(u), nu(u))` per coordinate.
//! Encoder: Gaussian base on the zero-imputed window `g(z)` pushed through an
//! affine autoregressive flow conditioned on the encoder's last hidden layer.
//! Training ascends the K-sample importance-weighted bound in which missing
//! coordinates contribute nothing to the likelihood.

use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Window;
use crate::dist::{standard_normal_log_prob, DiagGaussian, DiagStudentT, DF_FLOOR, SCALE_FLOOR};
use crate::error::{Error, Result};
use crate::flow::{BoundChain, FlowChain};
use crate::missing::{zero_impute, Mask};
use crate::nn::{clip_grad_norm, AdamConfig, AdamState, BoundMlp, Checkpoint, Mlp, NamedArray};
use crate::rng::{self, Rng};

/// Added to the softplus of the encoder's scale head.
pub const ENCODER_SCALE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub latent_dim: usize,
    /// Hidden widths shared by encoder and decoder trunks.
    pub hidden: Vec<usize>,
    pub n_flows: usize,
    pub flow_hidden: usize,
    /// Append the missingness mask to the encoder input.
    pub encoder_mask_input: bool,
}

impl ModelConfig {
    pub fn new(data_dim: usize) -> Self {
        Self {
            data_dim,
            latent_dim: 16,
            hidden: vec![64, 64],
            n_flows: 3,
            flow_hidden: 32,
            encoder_mask_input: false,
        }
    }

    pub fn encoder_input_dim(&self) -> usize {
        if self.encoder_mask_input {
            2 * self.data_dim
        } else {
            self.data_dim
        }
    }

    fn context_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or_else(|| self.encoder_input_dim())
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.latent_dim == 0 || self.flow_hidden == 0 {
            return Err(Error::invalid(format!(
                "model sizes must be positive (d {}, d_u {}, flow hidden {})",
                self.data_dim, self.latent_dim, self.flow_hidden
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer of width 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeModel {
    config: ModelConfig,
    /// `g(z) -> [mean, raw scale]` of the base Gaussian, `2 * d_u` outputs.
    pub encoder: Mlp,
    pub flow: FlowChain,
    /// `u -> [loc, raw scale, raw df]`, `3 * d` outputs.
    pub decoder: Mlp,
}

impl GenerativeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut enc_widths = vec![config.encoder_input_dim()];
        enc_widths.extend(&config.hidden);
        enc_widths.push(2 * config.latent_dim);
        let mut dec_widths = vec![config.latent_dim];
        dec_widths.extend(&config.hidden);
        dec_widths.push(3 * config.data_dim);
        let encoder = Mlp::init(seed, &enc_widths)?;
        let flow = FlowChain::new(
            seed.wrapping_add(0x1000),
            config.latent_dim,
            config.context_dim(),
            config.flow_hidden,
            config.n_flows,
        )?;
        let decoder = Mlp::init(seed.wrapping_add(0x2000), &dec_widths)?;
        Ok(Self {
            config,
            encoder,
            flow,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.flow.params());
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.flow.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.encoder.param_names("encoder");
        n.extend(self.flow.param_names("flow"));
        n.extend(self.decoder.param_names("decoder"));
        n
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Registers all parameters on `tape`; trainable ones become leaves whose
    /// vars are listed in [`GenerativeModel::params`] order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel> {
        let mut vars = Vec::new();
        let (encoder, flow, decoder) = if trainable {
            (
                self.encoder.bind(tape, &mut vars)?,
                self.flow.bind(tape, &mut vars)?,
                self.decoder.bind(tape, &mut vars)?,
            )
        } else {
            (
                self.encoder.bind_frozen(tape)?,
                self.flow.bind_frozen(tape)?,
                self.decoder.bind_frozen(tape)?,
            )
        };
        Ok(BoundModel {
            latent_dim: self.config.latent_dim,
            data_dim: self.config.data_dim,
            encoder,
            flow,
            decoder,
            vars,
        })
    }
}

/// Encoder inputs and likelihood targets for a set of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `g(z)`, optionally followed by the mask, `[B, d or 2d]`.
    pub encoder_input: Tensor,
    /// `g(z)`, `[B, d]`; missing coordinates hold 0 and are never scored.
    pub values: Tensor,
    /// 1 where observed, `[B, d]`.
    pub observed: Tensor,
}

impl Batch {
    pub fn new(rows: &[(&[f64], &Mask)], mask_input: bool) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let d = rows[0].0.len();
        let mut enc = Vec::with_capacity(rows.len() * d * 2);
        let mut vals = Vec::with_capacity(rows.len() * d);
        let mut obs = Vec::with_capacity(rows.len() * d);
        for (z, s) in rows {
            if z.len() != d {
                return Err(Error::shape("batch", format!("row of width {} in a batch of width {d}", z.len())));
            }
            let g = zero_impute(z, s)?;
            enc.extend_from_slice(&g);
            if mask_input {
                enc.extend(s.bits().iter().map(|&m| if m { 1.0 } else { 0.0 }));
            }
            vals.extend_from_slice(&g);
            obs.extend(s.observed_indicator());
        }
        let b = rows.len();
        let width = if mask_input { 2 * d } else { d };
        Ok(Self {
            encoder_input: Tensor::matrix(b, width, enc)?,
            values: Tensor::matrix(b, d, vals)?,
            observed: Tensor::matrix(b, d, obs)?,
        })
    }

    pub fn from_windows(windows: &[&Window], mask_input: bool) -> Result<Self> {
        let rows: Vec<(&[f64], &Mask)> = windows.iter().map(|w| (w.values.as_slice(), &w.mask)).collect();
        Self::new(&rows, mask_input)
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A [`GenerativeModel`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    latent_dim: usize,
    data_dim: usize,
    encoder: BoundMlp,
    flow: BoundChain,
    decoder: BoundMlp,
    /// Leaf vars of trainable parameters; empty when frozen.
    pub vars: Vec<Var>,
}

/// Latent draws for `B` windows, `k` consecutive rows per window.
#[derive(Clone, Copy, Debug)]
pub struct BoundSamples {
    pub u: Var,
    pub log_q: Var,
}

/// Pieces of the bound for `B * k` rows.
#[derive(Clone, Copy, Debug)]
pub struct BoundRatios {
    pub samples: BoundSamples,
    pub decoder: DiagStudentT,
    pub log_lik: Var,
    pub log_prior: Var,
    /// `log p(z^o | u) + log p(u) - log q(u | g(z))`, `[B * k, 1]`.
    pub log_r: Var,
}

impl BoundModel {
    /// Reparameterized draws `u = f(mu + sigma * eps)` with their log density.
    pub fn encode(&self, tape: &mut Tape, encoder_input: Var, rng: &mut Rng, k: usize) -> Result<BoundSamples> {
        if k == 0 {
            return Err(Error::invalid("number of latent samples must be at least 1"));
        }
        let du = self.latent_dim;
        let (out, context) = self.encoder.forward_with_hidden(tape, encoder_input)?;
        let mean = tape.slice(out, 0, du)?;
        let raw = tape.slice(out, du, 2 * du)?;
        let std = tape.softplus(raw)?;
        let std = tape.add_scalar(std, ENCODER_SCALE_FLOOR)?;
        let mean = tape.repeat_rows(mean, k)?;
        let std = tape.repeat_rows(std, k)?;
        let base = DiagGaussian::new(tape, mean, std)?;
        let (u0, _) = base.rsample(tape, rng)?;
        let log_q0 = base.log_prob(tape, u0)?;
        let projs = self.flow.context_projections(tape, context, k)?;
        let (u, log_det) = self.flow.forward(tape, u0, &projs)?;
        let log_q = tape.sub(log_q0, log_det)?;
        Ok(BoundSamples { u, log_q })
    }

    pub fn decode(&self, tape: &mut Tape, u: Var) -> Result<DiagStudentT> {
        let d = self.data_dim;
        let out = self.decoder.forward(tape, u)?;
        let loc = tape.slice(out, 0, d)?;
        let raw_scale = tape.slice(out, d, 2 * d)?;
        let raw_df = tape.slice(out, 2 * d, 3 * d)?;
        let scale = tape.softplus(raw_scale)?;
        let scale = tape.add_scalar(scale, SCALE_FLOOR)?;
        let df = tape.softplus(raw_df)?;
        let df = tape.add_scalar(df, DF_FLOOR)?;
        DiagStudentT::new(tape, loc, scale, df)
    }

    pub fn log_ratios(&self, tape: &mut Tape, batch: &Batch, rng: &mut Rng, k: usize) -> Result<BoundRatios> {
        let input = tape.constant(batch.encoder_input.clone())?;
        let samples = self.encode(tape, input, rng, k)?;
        let decoder = self.decode(tape, samples.u)?;
        let z = tape.constant(batch.values.clone())?;
        let z = tape.repeat_rows(z, k)?;
        let observed = tape.constant(batch.observed.clone())?;
        let observed = tape.repeat_rows(observed, k)?;
        let log_lik = observed_loglik(tape, &decoder, z, observed)?;
        let log_prior = standard_normal_log_prob(tape, samples.u)?;
        let joint = tape.add(log_lik, log_prior)?;
        let log_r = tape.sub(joint, samples.log_q)?;
        Ok(BoundRatios {
            samples,
            decoder,
            log_lik,
            log_prior,
            log_r,
        })
    }

    /// Sum over windows of `logsumexp_k(log r) - log k` (a scalar var) and the
    /// ratios behind it.
    pub fn elbo(&self, tape: &mut Tape, batch: &Batch, rng: &mut Rng, k: usize) -> Result<(Var, BoundRatios)> {
        let ratios = self.log_ratios(tape, batch, rng, k)?;
        let per_window = tape.reshape(ratios.log_r, vec![batch.len(), k])?;
        let lse = tape.row_logsumexp(per_window)?;
        let lse = tape.add_scalar(lse, -(k as f64).ln())?;
        Ok((tape.sum(lse)?, ratios))
    }
}

/// Sum of per-coordinate log densities over observed coordinates only,
/// `[rows, 1]`. `observed` is 1 where observed, 0 where missing.
pub fn observed_loglik(tape: &mut Tape, dist: &DiagStudentT, z: Var, observed: Var) -> Result<Var> {
    let terms = dist.log_prob_terms(tape, z)?;
    let kept = tape.mul(terms, observed)?;
    tape.row_sum(kept)
}

/// Decoder parameters, each `[rows, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub loc: Tensor,
    pub scale: Tensor,
    pub df: Tensor,
}

pub fn decode(model: &GenerativeModel, u: &Tensor) -> Result<DecoderOutput> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let uv = tape.constant(u.clone())?;
    let dist = bound.decode(&mut tape, uv)?;
    Ok(DecoderOutput {
        loc: tape.value(dist.loc).clone(),
        scale: tape.value(dist.scale).clone(),
        df: tape.value(dist.df).clone(),
    })
}

/// `k` latent draws per encoder-input row, `k` consecutive rows per input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSamples {
    pub u: Tensor,
    pub log_q: Tensor,
}

pub fn encode_sample(model: &GenerativeModel, encoder_input: &Tensor, rng: &mut Rng, k: usize) -> Result<LatentSamples> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let x = tape.constant(encoder_input.clone())?;
    let s = bound.encode(&mut tape, x, rng, k)?;
    Ok(LatentSamples {
        u: tape.value(s.u).clone(),
        log_q: tape.value(s.log_q).clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboEstimate {
    /// Sum over windows, nats.
    pub value: f64,
    /// `log_ratios[t][j]` for window `t`, sample `j`.
    pub log_ratios: Vec<Vec<f64>>,
    pub k: usize,
}

impl ElboEstimate {
    pub fn per_window(&self) -> Vec<f64> {
        let lk = (self.k as f64).ln();
        self.log_ratios
            .iter()
            .map(|r| crate::autodiff::log_sum_exp(r) - lk)
            .collect()
    }
}

fn check_ratios(log_r: &Tensor, k: usize) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = log_r.data().chunks(k).map(<[f64]>::to_vec).collect();
    for (t, r) in rows.iter().enumerate() {
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("importance ratio of window {t}, sample {j}")));
        }
    }
    Ok(rows)
}

/// Importance-weighted bound for a batch, without gradients.
pub fn elbo(model: &GenerativeModel, batch: &Batch, rng: &mut Rng, k: usize) -> Result<ElboEstimate> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let (total, ratios) = bound.elbo(&mut tape, batch, rng, k)?;
    Ok(ElboEstimate {
        value: tape.value(total).item(),
        log_ratios: check_ratios(tape.value(ratios.log_r), k)?,
        k,
    })
}

/// Proposals for importance sampling: `k` rows per window.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceDraws {
    pub u: Tensor,
    pub log_r: Vec<f64>,
    pub decoder: DecoderOutput,
}

/// Latent draws, their log ratios and decoder parameters, no gradients.
/// Non-finite ratios are returned as is.
pub fn importance_draws(model: &GenerativeModel, batch: &Batch, rng: &mut Rng, k: usize) -> Result<ImportanceDraws> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let r = bound.log_ratios(&mut tape, batch, rng, k)?;
    Ok(ImportanceDraws {
        u: tape.value(r.samples.u).clone(),
        log_r: tape.value(r.log_r).data().to_vec(),
        decoder: DecoderOutput {
            loc: tape.value(r.decoder.loc).clone(),
            scale: tape.value(r.decoder.scale).clone(),
            df: tape.value(r.decoder.df).clone(),
        },
    })
}

/// Summed bound over the batch and the gradient of the mean negative bound
/// per window, in [`GenerativeModel::params`] order.
pub fn elbo_gradient(model: &GenerativeModel, batch: &Batch, rng: &mut Rng, k: usize) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let (sum, _) = bound.elbo(&mut tape, batch, rng, k)?;
    let loss = tape.scale(sum, -1.0 / batch.len() as f64)?;
    let mut grads = tape.backward(loss)?;
    let g = bound
        .vars
        .iter()
        .map(|&v| grads.take(v).expect("every leaf has a gradient"))
        .collect();
    Ok((tape.value(sum).item(), g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 50,
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-window bound over the epoch's minibatches, nats.
    pub mean_elbo: f64,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
}

/// Optimizer state that survives between epochs and checkpoints.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(model: &GenerativeModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            model.params(),
        );
        Ok(Self {
            config,
            adam,
            epochs_done: 0,
        })
    }

    /// One pass over `windows` in a seed-derived shuffled order. On a
    /// numerical failure the model keeps its last finite parameters.
    pub fn run_epoch(&mut self, model: &mut GenerativeModel, windows: &[Window]) -> Result<EpochStats> {
        if windows.is_empty() {
            return Err(Error::invalid("no training windows"));
        }
        let epoch = self.epochs_done;
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, (epoch as u64) << 1));
        let mut noise = rng::stream(self.config.seed, ((epoch as u64) << 1) | 1);
        let names = model.param_names();
        let mask_input = model.config.encoder_mask_input;
        let (mut total, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let ws: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = Batch::from_windows(&ws, mask_input)?;
            let (sum, mut grads) =
                elbo_gradient(model, &batch, &mut noise, self.config.k).map_err(|e| diverged(epoch, e))?;
            let norm = clip_grad_norm(&mut grads, self.config.clip_norm);
            let mut params = model.params_mut();
            self.adam
                .step(&mut params, &grads, &names)
                .map_err(|e| diverged(epoch, e))?;
            total += sum;
            norm_sum += norm;
            batches += 1;
        }
        self.epochs_done += 1;
        let stats = EpochStats {
            epoch,
            mean_elbo: total / windows.len() as f64,
            grad_norm: norm_sum / batches as f64,
        };
        debug!("epoch {epoch}: elbo {:.4}, |g| {:.3}", stats.mean_elbo, stats.grad_norm);
        Ok(stats)
    }

    /// Runs epochs until `config.epochs` have been completed in total.
    pub fn run(&mut self, model: &mut GenerativeModel, windows: &[Window]) -> Result<Vec<EpochStats>> {
        let mut trace = Vec::new();
        while self.epochs_done < self.config.epochs {
            trace.push(self.run_epoch(model, windows)?);
        }
        Ok(trace)
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    if e.is_numerical() {
        Error::Diverged {
            epoch,
            detail: e.to_string(),
        }
    } else {
        e
    }
}

/// Trains from scratch; returns the per-epoch trace.
pub fn train(model: &mut GenerativeModel, windows: &[Window], config: &TrainConfig) -> Result<Vec<EpochStats>> {
    Trainer::new(model, config.clone())?.run(model, windows)
}

/// Metadata stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub model: ModelConfig,
    pub h: usize,
    pub lead: usize,
    pub sites: Vec<String>,
    pub k: usize,
    pub epochs_done: usize,
    pub train: Option<TrainConfig>,
    pub adam_step: Option<u64>,
}

/// Writes parameters and, when given, the optimizer moments.
pub fn save_checkpoint(path: &Path, model: &GenerativeModel, mut header: ModelHeader, trainer: Option<&Trainer>) -> Result<()> {
    header.model = model.config.clone();
    let names = model.param_names();
    let mut ck = Checkpoint::new(header, &names, &model.params());
    if let Some(t) = trainer {
        ck.header.adam_step = Some(t.adam.step_count());
        ck.header.epochs_done = t.epochs_done;
        ck.header.train = Some(t.config.clone());
        let (m, v) = t.adam.moments();
        for (prefix, moments) in [("adam.m", m), ("adam.v", v)] {
            for (n, t) in names.iter().zip(moments) {
                ck.params.push(NamedArray {
                    name: format!("{prefix}.{n}"),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                });
            }
        }
    }
    ck.save(path)
}

/// Restores the model and, if the file has one, a trainer ready to resume.
pub fn load_checkpoint(path: &Path) -> Result<(GenerativeModel, ModelHeader, Option<Trainer>)> {
    let mut ck: Checkpoint<ModelHeader> = Checkpoint::load(path)?;
    let mut model = GenerativeModel::new(ck.header.model.clone(), 0)?;
    let names = model.param_names();
    let n = names.len();
    if ck.params.len() < n {
        return Err(Error::Data(format!(
            "{}: {} arrays, model needs {n}",
            path.display(),
            ck.params.len()
        )));
    }
    let extra = ck.params.split_off(n);
    ck.restore_into(&names, &mut model.params_mut())?;
    let trainer = match (&ck.header.train, ck.header.adam_step) {
        (Some(cfg), Some(step)) if extra.len() == 2 * n => {
            let to_tensor = |a: &NamedArray| Tensor::new(a.shape.clone(), a.values.clone());
            let m = extra[..n].iter().map(to_tensor).collect::<Result<Vec<_>>>()?;
            let v = extra[n..].iter().map(to_tensor).collect::<Result<Vec<_>>>()?;
            let adam = AdamState::from_parts(
                AdamConfig {
                    lr: cfg.lr,
                    ..AdamConfig::default()
                },
                step,
                m,
                v,
            )?;
            Some(Trainer {
                config: cfg.clone(),
                adam,
                epochs_done: ck.header.epochs_done,
            })
        }
        _ => None,
    };
    Ok((model, ck.header, trainer))
}
