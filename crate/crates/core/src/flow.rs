//! Affine autoregressive flow used for the approximate posterior.
//!
//! Each transform maps `u -> u * exp(a(u)) + b(u)` where the conditioner
//! outputs for coordinate `j` see only coordinates `< j` (MADE-style binary
//! masks) plus an unmasked context vector. The Jacobian is triangular with
//! `log|det| = sum_j a_j`. Sampling direction is parallel; the inverse solves
//! one coordinate at a time. Odd-numbered transforms work in reversed
//! coordinate order (and restore it), so the autoregressive direction
//! alternates along the chain while an all-identity chain stays the identity.

use crate::autodiff::{Tape, Tensor, Var};
use crate::dist::DiagGaussian;
use crate::error::{Error, Result};
use crate::nn::Mlp;

/// Bound on the per-coordinate log scale, applied as `LIMIT * tanh(raw / LIMIT)`.
pub const LOG_SCALE_LIMIT: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AffineArTransform {
    dim: usize,
    context_dim: usize,
    hidden: usize,
    pub w_in: Tensor,
    pub w_ctx: Tensor,
    pub b_hidden: Tensor,
    pub w_shift: Tensor,
    pub b_shift: Tensor,
    pub w_scale: Tensor,
    pub b_scale: Tensor,
    mask_in: Tensor,
    mask_out: Tensor,
}

/// Binary masks `(input -> hidden, hidden -> output)` for a `dim`-dimensional
/// autoregressive conditioner with `hidden` units.
fn made_masks(dim: usize, hidden: usize) -> (Tensor, Tensor) {
    let degree = |k: usize| k % dim;
    let mut mask_in = Tensor::zeros(&[dim, hidden]);
    let mut mask_out = Tensor::zeros(&[hidden, dim]);
    for k in 0..hidden {
        for i in 0..dim {
            if i < degree(k) {
                mask_in.data_mut()[i * hidden + k] = 1.0;
            }
            if i >= degree(k) {
                mask_out.data_mut()[k * dim + i] = 1.0;
            }
        }
    }
    (mask_in, mask_out)
}

impl AffineArTransform {
    /// Glorot-initialized conditioner with zeroed output layer, so the
    /// transform starts as the identity.
    pub fn new(seed: u64, dim: usize, context_dim: usize, hidden: usize) -> Result<Self> {
        if dim == 0 || context_dim == 0 || hidden == 0 {
            return Err(Error::invalid(format!(
                "flow transform needs positive sizes (dim {dim}, context {context_dim}, hidden {hidden})"
            )));
        }
        let w_in = Mlp::init(seed, &[dim, hidden])?.weight(0).clone();
        let w_ctx = Mlp::init(seed.wrapping_add(1), &[context_dim, hidden])?.weight(0).clone();
        let (mask_in, mask_out) = made_masks(dim, hidden);
        Ok(Self {
            dim,
            context_dim,
            hidden,
            w_in,
            w_ctx,
            b_hidden: Tensor::zeros(&[1, hidden]),
            w_shift: Tensor::zeros(&[hidden, dim]),
            b_shift: Tensor::zeros(&[1, dim]),
            w_scale: Tensor::zeros(&[hidden, dim]),
            b_scale: Tensor::zeros(&[1, dim]),
            mask_in,
            mask_out,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.w_in,
            &self.w_ctx,
            &self.b_hidden,
            &self.w_shift,
            &self.b_shift,
            &self.w_scale,
            &self.b_scale,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_in,
            &mut self.w_ctx,
            &mut self.b_hidden,
            &mut self.w_shift,
            &mut self.b_shift,
            &mut self.w_scale,
            &mut self.b_scale,
        ]
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        ["w_in", "w_ctx", "b_hidden", "w_shift", "b_shift", "w_scale", "b_scale"]
            .iter()
            .map(|n| format!("{prefix}.{n}"))
            .collect()
    }

    fn bind_with(&self, tape: &mut Tape, vars: &[Var]) -> Result<BoundTransform> {
        let mask_in = tape.constant(self.mask_in.clone())?;
        let mask_out = tape.constant(self.mask_out.clone())?;
        let w_in = tape.mul(vars[0], mask_in)?;
        let w_shift = tape.mul(vars[3], mask_out)?;
        let w_scale = tape.mul(vars[5], mask_out)?;
        Ok(BoundTransform {
            w_in,
            w_ctx: vars[1],
            b_hidden: vars[2],
            w_shift,
            b_shift: vars[4],
            w_scale,
            b_scale: vars[6],
        })
    }
}

/// A transform registered on a tape, with masks already applied.
#[derive(Clone, Debug)]
pub struct BoundTransform {
    w_in: Var,
    w_ctx: Var,
    b_hidden: Var,
    w_shift: Var,
    b_shift: Var,
    w_scale: Var,
    b_scale: Var,
}

impl BoundTransform {
    /// `context [rows, c] -> [rows, hidden]`; computed once per window and
    /// repeated across latent samples.
    pub fn context_projection(&self, tape: &mut Tape, context: Var) -> Result<Var> {
        tape.matmul(context, self.w_ctx)
    }

    /// `(shift, log_scale)` for inputs `u [rows, d]`.
    pub fn conditioner(&self, tape: &mut Tape, u: Var, ctx_proj: Var) -> Result<(Var, Var)> {
        let h = tape.matmul(u, self.w_in)?;
        let h = tape.add(h, ctx_proj)?;
        let h = tape.add_row(h, self.b_hidden)?;
        let h = tape.tanh(h)?;
        let shift = tape.matmul(h, self.w_shift)?;
        let shift = tape.add_row(shift, self.b_shift)?;
        let raw = tape.matmul(h, self.w_scale)?;
        let raw = tape.add_row(raw, self.b_scale)?;
        let a = tape.scale(raw, 1.0 / LOG_SCALE_LIMIT)?;
        let a = tape.tanh(a)?;
        let a = tape.scale(a, LOG_SCALE_LIMIT)?;
        Ok((shift, a))
    }

    /// `(u * exp(a) + b, sum_j a_j)`.
    pub fn forward(&self, tape: &mut Tape, u: Var, ctx_proj: Var) -> Result<(Var, Var)> {
        let (shift, a) = self.conditioner(tape, u, ctx_proj)?;
        let ea = tape.exp(a)?;
        let scaled = tape.mul(u, ea)?;
        let out = tape.add(scaled, shift)?;
        let log_det = tape.row_sum(a)?;
        Ok((out, log_det))
    }
}

/// Ordered transforms; odd-numbered ones act on reversed coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowChain {
    dim: usize,
    context_dim: usize,
    transforms: Vec<AffineArTransform>,
}

impl FlowChain {
    pub fn new(seed: u64, dim: usize, context_dim: usize, hidden: usize, n_transforms: usize) -> Result<Self> {
        let transforms = (0..n_transforms)
            .map(|n| AffineArTransform::new(seed.wrapping_add(17 * n as u64 + 1), dim, context_dim, hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            context_dim,
            transforms,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn transforms(&self) -> &[AffineArTransform] {
        &self.transforms
    }

    pub fn transforms_mut(&mut self) -> &mut [AffineArTransform] {
        &mut self.transforms
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.transforms.iter().flat_map(|t| t.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.transforms.iter_mut().flat_map(|t| t.params_mut()).collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        self.transforms
            .iter()
            .enumerate()
            .flat_map(|(i, t)| t.param_names(&format!("{prefix}.{i}")))
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> Result<BoundChain> {
        let mut bound = Vec::with_capacity(self.transforms.len());
        for t in &self.transforms {
            let start = vars.len();
            for p in t.params() {
                vars.push(tape.leaf(p.clone())?);
            }
            let own = vars[start..].to_vec();
            bound.push(t.bind_with(tape, &own)?);
        }
        Ok(BoundChain {
            dim: self.dim,
            transforms: bound,
        })
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<BoundChain> {
        let mut bound = Vec::with_capacity(self.transforms.len());
        for t in &self.transforms {
            let own = t
                .params()
                .into_iter()
                .map(|p| tape.constant(p.clone()))
                .collect::<Result<Vec<_>>>()?;
            bound.push(t.bind_with(tape, &own)?);
        }
        Ok(BoundChain {
            dim: self.dim,
            transforms: bound,
        })
    }

    fn check(&self, u: &Tensor, context: &Tensor) -> Result<()> {
        if u.cols() != self.dim || context.cols() != self.context_dim || u.rows() != context.rows() {
            return Err(Error::shape(
                "flow",
                format!(
                    "input {:?} / context {:?} for a chain of dim {} with context {}",
                    u.shape(),
                    context.shape(),
                    self.dim,
                    self.context_dim
                ),
            ));
        }
        Ok(())
    }

    /// `(u_N, sum_n log|det df_n|)` for rows of `u0`.
    pub fn forward(&self, u0: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(u0, context)?;
        let mut tape = Tape::new();
        let chain = self.bind_frozen(&mut tape)?;
        let u = tape.constant(u0.clone())?;
        let c = tape.constant(context.clone())?;
        let projs = chain.context_projections(&mut tape, c, 1)?;
        let (out, ld) = chain.forward(&mut tape, u, &projs)?;
        Ok((tape.value(out).clone(), tape.value(ld).clone()))
    }

    /// Inverts the chain. Returns `(u0, sum of inverse log-dets)`; the second
    /// value is the negative of the forward log-det at `u0`.
    pub fn inverse(&self, u_n: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(u_n, context)?;
        if !u_n.all_finite() {
            return Err(Error::NonFinite("flow inverse input".into()));
        }
        let rows = u_n.rows();
        let d = self.dim;
        let mut tape = Tape::new();
        let chain = self.bind_frozen(&mut tape)?;
        let c = tape.constant(context.clone())?;
        let projs = chain.context_projections(&mut tape, c, 1)?;
        let mut y = u_n.clone();
        let mut log_det = vec![0.0; rows];
        for (n, t) in chain.transforms.iter().enumerate().rev() {
            let reversed = n % 2 == 1;
            if reversed {
                y = reverse_cols(&y);
            }
            // solve u_j = (y_j - b_j(u_<j)) * exp(-a_j(u_<j)) in order
            let mut u = Tensor::zeros(&[rows, d]);
            for j in 0..d {
                let uv = tape.constant(u.clone())?;
                let (shift, a) = t.conditioner(&mut tape, uv, projs[n])?;
                let (shift, a) = (tape.value(shift).clone(), tape.value(a).clone());
                for (r, ld) in log_det.iter_mut().enumerate() {
                    let aj = a.get(r, j);
                    u.data_mut()[r * d + j] = (y.get(r, j) - shift.get(r, j)) * (-aj).exp();
                    *ld -= aj;
                }
            }
            y = if reversed { reverse_cols(&u) } else { u };
        }
        Ok((y, Tensor::matrix(rows, 1, log_det)?))
    }
}

fn reverse_cols(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(m * n);
    for r in 0..m {
        data.extend(t.row_slice(r).iter().rev());
    }
    t.with_data(data)
}

/// A [`FlowChain`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundChain {
    dim: usize,
    transforms: Vec<BoundTransform>,
}

impl BoundChain {
    /// Context projections for every transform, each repeated `repeat` times
    /// per row.
    pub fn context_projections(&self, tape: &mut Tape, context: Var, repeat: usize) -> Result<Vec<Var>> {
        self.transforms
            .iter()
            .map(|t| {
                let p = t.context_projection(tape, context)?;
                tape.repeat_rows(p, repeat)
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, u0: Var, projs: &[Var]) -> Result<(Var, Var)> {
        let rows = tape.value(u0).rows();
        let mut log_det = tape.constant(Tensor::zeros(&[rows, 1]))?;
        let mut u = u0;
        let reversal: Vec<usize> = (0..self.dim).rev().collect();
        for (n, (t, &proj)) in self.transforms.iter().zip(projs).enumerate() {
            let reversed = n % 2 == 1;
            if reversed {
                u = tape.permute_cols(u, reversal.clone())?;
            }
            let (next, ld) = t.forward(tape, u, proj)?;
            log_det = tape.add(log_det, ld)?;
            u = if reversed {
                tape.permute_cols(next, reversal.clone())?
            } else {
                next
            };
        }
        Ok((u, log_det))
    }
}

/// `log q(u_N) = log N(u_0; base) - sum_n log|det df_n|`, with `u_0` recovered
/// by inverting the chain. `base_mean`/`base_std` are `[rows, d]`.
pub fn posterior_logq(
    base_mean: &Tensor,
    base_std: &Tensor,
    chain: &FlowChain,
    u_n: &Tensor,
    context: &Tensor,
) -> Result<Tensor> {
    let (u0, inv_log_det) = chain.inverse(u_n, context)?;
    let mut tape = Tape::new();
    let m = tape.constant(base_mean.clone())?;
    let s = tape.constant(base_std.clone())?;
    let x = tape.constant(u0)?;
    let base = DiagGaussian::new(&tape, m, s)?;
    let lp = base.log_prob(&mut tape, x)?;
    let ild = tape.constant(inv_log_det)?;
    let out = tape.add(lp, ild)?;
    Ok(tape.value(out).clone())
}
