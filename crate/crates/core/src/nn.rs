//! Multilayer perceptrons, Adam, and the parameter checkpoint format.
//!
//! Parameters live outside the tape. For each batch a fresh [`Tape`] is
//! built, every parameter tensor is registered as a leaf in a fixed order,
//! and the adjoints come back in that same order for the optimizer.
//!
//! # Checkpoint layout
//!
//! A checkpoint is a JSON document:
//!
//! ```json
//! {
//!   "format": "gapcast-params",
//!   "version": 1,
//!   "header": { ... model hyperparameters ... },
//!   "params": [ { "name": "encoder.w0", "shape": [25, 64], "values": [ ... ] }, ... ]
//! }
//! ```
//!
//! Values are written with shortest round-trip formatting, so a reload is
//! bit-exact.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_FORMAT: &str = "gapcast-params";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fully connected network with tanh hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(seed: u64, widths: &[usize]) -> Result<Self> {
        Self::validate(widths)?;
        let mut rng = rng::stream(seed, 0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, w)?);
            biases.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::validate(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            weights: widths
                .windows(2)
                .map(|p| Tensor::zeros(&[p[0], p[1]]))
                .collect(),
            biases: widths.windows(2).map(|p| Tensor::zeros(&[1, p[1]])).collect(),
        })
    }

    fn validate(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid(format!("zero layer width in {widths:?}")));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Width of the last hidden layer, or the input width when there are no
    /// hidden layers.
    pub fn last_hidden_width(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.weights[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.biases[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.biases[layer]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// `[w0, b0, w1, b1, ...]`
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers())
            .flat_map(|i| [format!("{prefix}.w{i}"), format!("{prefix}.b{i}")])
            .collect()
    }

    /// Registers the parameters as leaves, in [`Mlp::params`] order.
    pub fn bind(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> Result<BoundMlp> {
        let start = vars.len();
        for p in self.params() {
            vars.push(tape.leaf(p.clone())?);
        }
        Ok(BoundMlp::from_vars(&vars[start..]))
    }

    /// Registers the parameters as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<BoundMlp> {
        let vars = self
            .params()
            .into_iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundMlp::from_vars(&vars))
    }

    /// Plain forward pass of `x: [batch, d_in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.bind_frozen(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let y = net.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// An [`Mlp`] whose parameters are registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl BoundMlp {
    pub fn from_vars(vars: &[Var]) -> Self {
        Self {
            weights: vars.iter().step_by(2).copied().collect(),
            biases: vars.iter().skip(1).step_by(2).copied().collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_with_hidden(tape, x)?.0)
    }

    /// Returns `(output, last hidden activation)`; the latter is the input
    /// itself for a network without hidden layers.
    pub fn forward_with_hidden(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let expected = tape.value(self.weights[0]).rows();
        let got = tape.value(x).cols();
        if expected != got {
            return Err(Error::shape(
                "mlp_forward",
                format!("input width {got}, network expects {expected}"),
            ));
        }
        let last = self.weights.len() - 1;
        let mut h = x;
        for (i, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            if i == last {
                return Ok((z, h));
            }
            h = tape.tanh(z)?;
        }
        unreachable!("an MLP has at least one layer")
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates, in parameter order.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Rebuilds a state saved with [`AdamState::moments`].
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape("adam_state", "first and second moments disagree"));
        }
        Ok(Self { config, step, m, v })
    }

    /// One bias-corrected Adam update. `names` label parameters in errors.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map_or("?", String::as_str);
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} at step {}",
                    self.step + 1
                )));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                md[j] = beta1 * md[j] + (1.0 - beta1) * gd[j];
                vd[j] = beta2 * vd[j] + (1.0 - beta2) * gd[j] * gd[j];
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
    state.step(params, grads, names)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<H> {
    pub format: String,
    pub version: u32,
    pub header: H,
    pub params: Vec<NamedArray>,
}

impl<H: Serialize + for<'de> Deserialize<'de>> Checkpoint<H> {
    pub fn new(header: H, names: &[String], params: &[&Tensor]) -> Self {
        let params = names
            .iter()
            .zip(params)
            .map(|(n, t)| NamedArray {
                name: n.clone(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            header,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("{}: not a {CHECKPOINT_FORMAT} file", path.display())));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Copies stored arrays into `params`, checking names and shapes.
    pub fn restore_into(&self, names: &[String], params: &mut [&mut Tensor]) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} arrays, model expects {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((arr, name), p) in self.params.iter().zip(names).zip(params.iter_mut()) {
            if &arr.name != name || arr.shape != p.shape() {
                return Err(Error::Data(format!(
                    "checkpoint array {} {:?} does not match {} {:?}",
                    arr.name,
                    arr.shape,
                    name,
                    p.shape()
                )));
            }
            **p = Tensor::new(arr.shape.clone(), arr.values.clone())?;
        }
        Ok(())
    }
}
