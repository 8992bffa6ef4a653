//! Masked autoregressive flows built from MADE blocks and invertible batch
//! normalization.
//!
//! Layers are stored in generative order: `z0 -> MADE_1 -> BN_1 -> reverse
//! -> MADE_2 -> ... -> BN_K = x`. The [`Direction`] flag picks which way
//! each MADE is cheap to evaluate:
//!
//! * [`Direction::Density`]: `x -> z0` is a single pass per block, so
//!   `log_prob` is fast and sampling runs the `d`-step sequential inverse.
//! * [`Direction::Sampling`]: `z0 -> x` is a single pass per block, so
//!   sampling (and the VI objective) is fast and `log_prob` is sequential.
//!
//! Every computation is recorded on an [`ndiff::Tape`](crate::ndiff::Tape)
//! after [`FlowModel::bind`] registers the parameters as differentiable
//! leaves. The `*_values` helpers run on a throwaway tape in inference mode.

use crate::ndiff::{NdiffError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const ALPHA_CLAMP: f64 = 7.0;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error("invalid flow configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("batch norm layer {layer} is not invertible: {reason}")]
    NonInvertible { layer: usize, reason: String },
    #[error("parameter vector has length {got}, model needs {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Density,
    Sampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Where batch norm takes its statistics on the single-pass side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Statistics of the current input; gradients flow through them.
    Batch,
    /// Running averages, treated as constants.
    Running,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub direction: Direction,
    pub batch_norm: bool,
    pub activation: Activation,
    pub seed: u64,
}

impl FlowConfig {
    pub fn new(dim: usize, blocks: usize, hidden: Vec<usize>, direction: Direction) -> Self {
        Self {
            dim,
            blocks,
            hidden,
            direction,
            batch_norm: true,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(FlowError::InvalidConfig("dim must be at least 1".into()));
        }
        if self.blocks == 0 {
            return Err(FlowError::InvalidConfig("blocks must be at least 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(FlowError::InvalidConfig(format!(
                "hidden sizes must be non-empty and positive, got {:?}",
                self.hidden
            )));
        }
        Ok(())
    }
}

/// Degree of hidden unit `k` (0-based) for input dimension `d`.
pub fn hidden_degree(k: usize, d: usize) -> usize {
    k % (d.saturating_sub(1).max(1)) + 1
}

/// One MADE network with a mean head and a log-scale head.
#[derive(Debug, Clone, PartialEq)]
pub struct MadeLayer {
    dim: usize,
    hidden: Vec<usize>,
    activation: Activation,
    /// Hidden-layer masks and weights stored `[out, in]`.
    masks: Vec<Tensor>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    out_mask: Tensor,
    w_mu: Tensor,
    b_mu: Tensor,
    w_alpha: Tensor,
    b_alpha: Tensor,
}

impl MadeLayer {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let degrees: Vec<Vec<usize>> = hidden
            .iter()
            .map(|&h| (0..h).map(|k| hidden_degree(k, dim)).collect())
            .collect();
        let input_degrees: Vec<usize> = (1..=dim).collect();
        let mut masks = Vec::new();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut prev = &input_degrees;
        for (l, deg) in degrees.iter().enumerate() {
            let (rows, cols) = (deg.len(), prev.len());
            let mut m = vec![0.0; rows * cols];
            for u in 0..rows {
                for v in 0..cols {
                    if deg[u] >= prev[v] {
                        m[u * cols + v] = 1.0;
                    }
                }
            }
            let bound = 1.0 / (cols as f64).sqrt();
            let w = m
                .iter()
                .map(|&mk| mk * rng.random_range(-bound..bound))
                .collect();
            masks.push(Tensor::new(vec![rows, cols], m).expect("mask shape"));
            weights.push(Tensor::new(vec![rows, cols], w).expect("weight shape"));
            biases.push(Tensor::zeros(&[hidden[l]]));
            prev = deg;
        }
        let last = degrees.last().expect("at least one hidden layer");
        let hl = last.len();
        let mut om = vec![0.0; dim * hl];
        for u in 0..dim {
            for v in 0..hl {
                if u + 1 > last[v] {
                    om[u * hl + v] = 1.0;
                }
            }
        }
        let bound = 1.0 / (hl as f64).sqrt();
        let w_mu = om
            .iter()
            .map(|&mk| mk * rng.random_range(-bound..bound))
            .collect();
        Self {
            dim,
            hidden: hidden.to_vec(),
            activation,
            masks,
            weights,
            biases,
            out_mask: Tensor::new(vec![dim, hl], om).expect("mask shape"),
            w_mu: Tensor::new(vec![dim, hl], w_mu).expect("weight shape"),
            b_mu: Tensor::zeros(&[dim]),
            w_alpha: Tensor::zeros(&[dim, hl]),
            b_alpha: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Masks in application order, the output mask last; each `[out, in]`.
    pub fn masks(&self) -> Vec<&Tensor> {
        self.masks.iter().chain(std::iter::once(&self.out_mask)).collect()
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            p.push(w);
            p.push(b);
        }
        p.extend([&self.w_mu, &self.b_mu, &self.w_alpha, &self.b_alpha]);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            p.push(w);
            p.push(b);
        }
        p.extend([
            &mut self.w_mu,
            &mut self.b_mu,
            &mut self.w_alpha,
            &mut self.b_alpha,
        ]);
        p
    }

    /// Registers the parameters on `tape`; masked weights are formed once.
    pub fn bind(&self, tape: &mut Tape) -> Result<MadeVars> {
        let mut leaves = Vec::new();
        let mut layers = Vec::new();
        for ((w, b), m) in self.weights.iter().zip(&self.biases).zip(&self.masks) {
            let wv = tape.var(w.clone());
            let bv = tape.var(b.clone());
            leaves.push(wv);
            leaves.push(bv);
            let mv = tape.constant(m.clone());
            let masked = tape.mul(wv, mv)?;
            layers.push((masked, bv));
        }
        let om = tape.constant(self.out_mask.clone());
        let head = |t: &mut Tape, w: &Tensor, b: &Tensor, leaves: &mut Vec<Var>| {
            let wv = t.var(w.clone());
            let bv = t.var(b.clone());
            leaves.push(wv);
            leaves.push(bv);
            t.mul(wv, om).map(|mw| (mw, bv))
        };
        let mu = head(tape, &self.w_mu, &self.b_mu, &mut leaves)?;
        let alpha = head(tape, &self.w_alpha, &self.b_alpha, &mut leaves)?;
        Ok(MadeVars {
            leaves,
            layers,
            mu,
            alpha,
            activation: self.activation,
        })
    }
}

/// Tape handles for one bound [`MadeLayer`].
#[derive(Debug, Clone)]
pub struct MadeVars {
    leaves: Vec<Var>,
    layers: Vec<(Var, Var)>,
    mu: (Var, Var),
    alpha: (Var, Var),
    activation: Activation,
}

impl MadeVars {
    /// `(μ, α)` for every row of `a`, with `α` clamped to `±ALPHA_CLAMP`.
    pub fn heads(&self, tape: &mut Tape, a: Var) -> Result<(Var, Var)> {
        let mut h = a;
        for &(w, b) in &self.layers {
            let p = tape.matmul_t(h, w)?;
            let p = tape.add_row(p, b)?;
            h = match self.activation {
                Activation::Relu => tape.relu(p),
                Activation::Tanh => tape.tanh(p),
            };
        }
        let mu = tape.matmul_t(h, self.mu.0)?;
        let mu = tape.add_row(mu, self.mu.1)?;
        let al = tape.matmul_t(h, self.alpha.0)?;
        let al = tape.add_row(al, self.alpha.1)?;
        let al = tape.clamp(al, -ALPHA_CLAMP, ALPHA_CLAMP);
        Ok((mu, al))
    }

    /// `(a − μ(a))·e^{−α(a)}` with per-row log-det `−Σα`.
    fn shift_scale_down(&self, tape: &mut Tape, a: Var) -> Result<(Var, Var)> {
        let (mu, al) = self.heads(tape, a)?;
        let c = tape.sub(a, mu)?;
        let na = tape.neg(al);
        let s = tape.exp(na);
        let out = tape.mul(c, s)?;
        let ld = tape.sum_cols(na)?;
        Ok((out, ld))
    }

    /// `a·e^{α(a)} + μ(a)` with per-row log-det `Σα`.
    fn scale_shift_up(&self, tape: &mut Tape, a: Var) -> Result<(Var, Var)> {
        let (mu, al) = self.heads(tape, a)?;
        let s = tape.exp(al);
        let p = tape.mul(a, s)?;
        let out = tape.add(p, mu)?;
        let ld = tape.sum_cols(al)?;
        Ok((out, ld))
    }

    /// Solves `x = z·e^{α(x)} + μ(x)` for `x`, one coordinate per sweep.
    fn solve_up(&self, tape: &mut Tape, z: Var, d: usize) -> Result<(Var, Var)> {
        let shape = tape.shape(z).to_vec();
        let mut x = tape.constant(Tensor::zeros(&shape));
        for _ in 0..d {
            let (mu, al) = self.heads(tape, x)?;
            let s = tape.exp(al);
            let p = tape.mul(z, s)?;
            x = tape.add(p, mu)?;
        }
        let (_, al) = self.heads(tape, x)?;
        let ld = tape.sum_cols(al)?;
        Ok((x, ld))
    }

    /// Solves `x = (z − μ(x))·e^{−α(x)}` for `x`, one coordinate per sweep.
    fn solve_down(&self, tape: &mut Tape, z: Var, d: usize) -> Result<(Var, Var)> {
        let shape = tape.shape(z).to_vec();
        let mut x = tape.constant(Tensor::zeros(&shape));
        for _ in 0..d {
            let (mu, al) = self.heads(tape, x)?;
            let c = tape.sub(z, mu)?;
            let na = tape.neg(al);
            let s = tape.exp(na);
            x = tape.mul(c, s)?;
        }
        let (_, al) = self.heads(tape, x)?;
        let na = tape.neg(al);
        let ld = tape.sum_cols(na)?;
        Ok((x, ld))
    }
}

/// Affine batch-normalization bijection
/// `N(a) = (a − m)/√(v + eps)·e^γ + β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub log_gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(dim: usize) -> Self {
        Self {
            log_gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    pub fn update_running(&mut self, stats: &BnStats) {
        for (r, &m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }

    fn check(&self, layer: usize) -> Result<()> {
        if let Some(v) = self.running_var.iter().find(|&&v| !(v + BN_EPS > 0.0)) {
            return Err(FlowError::NonInvertible {
                layer,
                reason: format!("running variance {v}"),
            });
        }
        if self.log_gamma.iter().any(|g| !g.is_finite()) {
            return Err(FlowError::NonInvertible {
                layer,
                reason: "non-finite scale".into(),
            });
        }
        Ok(())
    }

    /// `inverse(forward(x))` in running mode, on plain values.
    pub fn forward_values(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &a)| {
                (a - self.running_mean[j]) / (self.running_var[j] + BN_EPS).sqrt()
                    * self.log_gamma[j].exp()
                    + self.beta[j]
            })
            .collect()
    }

    pub fn inverse_values(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(j, &b)| {
                (b - self.beta[j]) * (-self.log_gamma[j]).exp()
                    * (self.running_var[j] + BN_EPS).sqrt()
                    + self.running_mean[j]
            })
            .collect()
    }
}

/// Batch statistics observed by one batch-norm layer during a pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct BnVars {
    log_gamma: Var,
    beta: Var,
}

/// All parameter handles of a model bound to one tape.
#[derive(Debug, Clone)]
pub struct BoundFlow {
    mades: Vec<MadeVars>,
    bns: Vec<Option<BnVars>>,
    leaves: Vec<Var>,
}

impl BoundFlow {
    /// Parameter leaves in flat-parameter order.
    pub fn params(&self) -> &[Var] {
        &self.leaves
    }
}

/// Result of a pass through the flow on a tape.
#[derive(Debug, Clone)]
pub struct FlowPass {
    /// Transformed batch, or per-row log-density for `log_prob`.
    pub out: Var,
    /// Per-row sum of generative log-dets (`log|det ∂F/∂z0|`).
    pub logdet: Var,
    /// Batch statistics per block, present for layers run in batch mode.
    pub stats: Vec<Option<BnStats>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    mades: Vec<MadeLayer>,
    bns: Vec<BatchNormLayer>,
    bn_mode: BnMode,
}

impl FlowModel {
    pub fn new(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mades = (0..config.blocks)
            .map(|_| MadeLayer::new(config.dim, &config.hidden, config.activation, &mut rng))
            .collect();
        let bns = if config.batch_norm {
            (0..config.blocks)
                .map(|_| BatchNormLayer::new(config.dim))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            mades,
            bns,
            bn_mode: BnMode::Batch,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn direction(&self) -> Direction {
        self.config.direction
    }

    pub fn mades(&self) -> &[MadeLayer] {
        &self.mades
    }

    pub fn batch_norms(&self) -> &[BatchNormLayer] {
        &self.bns
    }

    pub fn batch_norms_mut(&mut self) -> &mut [BatchNormLayer] {
        &mut self.bns
    }

    pub fn bn_mode(&self) -> BnMode {
        self.bn_mode
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn_mode = mode;
    }

    pub fn absorb_batch_stats(&mut self, stats: &[Option<BnStats>]) {
        for (bn, s) in self.bns.iter_mut().zip(stats) {
            if let Some(s) = s {
                bn.update_running(s);
            }
        }
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for m in &self.mades {
            p.extend(m.params());
        }
        p
    }

    pub fn num_params(&self) -> usize {
        let made: usize = self.param_tensors().iter().map(|t| t.len()).sum();
        made + self.bns.len() * 2 * self.config.dim
    }

    /// ℓ2 norm of each block's parameters (MADE plus its batch norm).
    pub fn block_param_norms(&self) -> Vec<f64> {
        self.mades
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mut s: f64 = m
                    .params()
                    .iter()
                    .flat_map(|t| t.data())
                    .map(|x| x * x)
                    .sum();
                if let Some(bn) = self.bns.get(k) {
                    s += bn.log_gamma.iter().chain(&bn.beta).map(|x| x * x).sum::<f64>();
                }
                s.sqrt()
            })
            .collect()
    }

    /// Parameters in the order `[MADE_1, ..., MADE_K, BN_1, ..., BN_K]`,
    /// each batch norm contributing `log γ` then `β`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.param_tensors() {
            out.extend_from_slice(t.data());
        }
        for bn in &self.bns {
            out.extend_from_slice(&bn.log_gamma);
            out.extend_from_slice(&bn.beta);
        }
        out
    }

    /// Overwrites all parameters; masked weight entries are forced to zero.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(FlowError::ParamLength {
                got: flat.len(),
                expected,
            });
        }
        let mut off = 0;
        for m in &mut self.mades {
            let masks: Vec<Tensor> = m.masks().into_iter().cloned().collect();
            let n_hidden = m.weights.len();
            for (i, t) in m.params_mut().into_iter().enumerate() {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[off..off + n]);
                // Even slots hold weights; slots past the hidden layers are
                // the two heads, which share the output mask.
                let mask = if i % 2 == 0 {
                    if i / 2 < n_hidden {
                        Some(&masks[i / 2])
                    } else {
                        Some(&masks[n_hidden])
                    }
                } else {
                    None
                };
                if let Some(mask) = mask {
                    for (x, &mk) in t.data_mut().iter_mut().zip(mask.data()) {
                        *x *= mk;
                    }
                }
                off += n;
            }
        }
        let d = self.config.dim;
        for bn in &mut self.bns {
            bn.log_gamma.copy_from_slice(&flat[off..off + d]);
            bn.beta.copy_from_slice(&flat[off + d..off + 2 * d]);
            off += 2 * d;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundFlow> {
        let mut mades = Vec::new();
        let mut leaves = Vec::new();
        for m in &self.mades {
            let mv = m.bind(tape)?;
            leaves.extend_from_slice(&mv.leaves);
            mades.push(mv);
        }
        let mut bns = Vec::new();
        for bn in &self.bns {
            let g = tape.var(Tensor::vector(bn.log_gamma.clone()));
            let b = tape.var(Tensor::vector(bn.beta.clone()));
            leaves.push(g);
            leaves.push(b);
            bns.push(Some(BnVars {
                log_gamma: g,
                beta: b,
            }));
        }
        if bns.is_empty() {
            bns = vec![None; self.mades.len()];
        }
        Ok(BoundFlow {
            mades,
            bns,
            leaves,
        })
    }

    /// `N(a)`; returns output, scalar log-det and batch statistics when in
    /// batch mode.
    fn bn_down(
        &self,
        tape: &mut Tape,
        k: usize,
        vars: BnVars,
        a: Var,
        mode: BnMode,
    ) -> Result<(Var, Var, Option<BnStats>)> {
        let (centered, log_std, stats) = match mode {
            BnMode::Batch => {
                let mean = tape.mean_rows(a)?;
                let nm = tape.neg(mean);
                let c = tape.add_row(a, nm)?;
                let sq = tape.square(c);
                let var = tape.mean_rows(sq)?;
                let ve = tape.add_scalar(var, BN_EPS);
                let lv = tape.log(ve)?;
                let ls = tape.scale(lv, 0.5);
                let stats = BnStats {
                    mean: tape.value(mean).data().to_vec(),
                    var: tape.value(var).data().to_vec(),
                };
                (c, ls, Some(stats))
            }
            BnMode::Running => {
                let bn = &self.bns[k];
                bn.check(k)?;
                let nm = tape.constant(Tensor::vector(
                    bn.running_mean.iter().map(|m| -m).collect(),
                ));
                let c = tape.add_row(a, nm)?;
                let ls = tape.constant(Tensor::vector(
                    bn.running_var
                        .iter()
                        .map(|v| 0.5 * (v + BN_EPS).ln())
                        .collect(),
                ));
                (c, ls, None)
            }
        };
        let logscale = tape.sub(vars.log_gamma, log_std)?;
        let s = tape.exp(logscale);
        let y = tape.mul_row(centered, s)?;
        let y = tape.add_row(y, vars.beta)?;
        let ld = tape.sum(logscale);
        Ok((y, ld, stats))
    }

    /// `N⁻¹(b)` with running statistics; returns output and scalar log-det.
    fn bn_up(&self, tape: &mut Tape, k: usize, vars: BnVars, b: Var) -> Result<(Var, Var)> {
        let bn = &self.bns[k];
        bn.check(k)?;
        let ls = tape.constant(Tensor::vector(
            bn.running_var
                .iter()
                .map(|v| 0.5 * (v + BN_EPS).ln())
                .collect(),
        ));
        let mean = tape.constant(Tensor::vector(bn.running_mean.clone()));
        let nb = tape.neg(vars.beta);
        let c = tape.add_row(b, nb)?;
        let logscale = tape.sub(ls, vars.log_gamma)?;
        let s = tape.exp(logscale);
        let y = tape.mul_row(c, s)?;
        let y = tape.add_row(y, mean)?;
        let ld = tape.sum(logscale);
        Ok((y, ld))
    }

    fn reverse_perm(&self) -> Vec<usize> {
        (0..self.config.dim).rev().collect()
    }

    /// Pushes base samples `z0: [n, d]` through the flow, returning `x` and
    /// the per-row generative log-det.
    pub fn sample_on_tape(&self, tape: &mut Tape, bound: &BoundFlow, z0: Var) -> Result<FlowPass> {
        self.sample_with_mode(tape, bound, z0, self.bn_mode)
    }

    fn sample_with_mode(
        &self,
        tape: &mut Tape,
        bound: &BoundFlow,
        z0: Var,
        mode: BnMode,
    ) -> Result<FlowPass> {
        let d = self.config.dim;
        let n = tape.shape(z0)[0];
        let mut a = z0;
        let mut logdet = tape.constant(Tensor::zeros(&[n]));
        let mut stats = vec![None; self.config.blocks];
        let perm = self.reverse_perm();
        for k in 0..self.config.blocks {
            let made = &bound.mades[k];
            let (b, ld) = match self.config.direction {
                Direction::Density => made.solve_up(tape, a, d)?,
                Direction::Sampling => made.scale_shift_up(tape, a)?,
            };
            a = b;
            logdet = tape.add(logdet, ld)?;
            if let Some(vars) = bound.bns[k] {
                let (b, ld) = match self.config.direction {
                    Direction::Density => self.bn_up(tape, k, vars, a)?,
                    Direction::Sampling => {
                        let (b, ld, s) = self.bn_down(tape, k, vars, a, mode)?;
                        stats[k] = s;
                        (b, ld)
                    }
                };
                a = b;
                logdet = tape.add(logdet, ld)?;
            }
            if k + 1 < self.config.blocks {
                a = tape.permute_cols(a, &perm)?;
            }
        }
        if tape.value(a).data().iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("flow sample"));
        }
        Ok(FlowPass {
            out: a,
            logdet,
            stats,
        })
    }

    /// Pulls `x: [n, d]` back to the base and returns `log q_K(x)` per row
    /// in `out`; `logdet` holds the generative log-det at the recovered
    /// base point.
    pub fn log_prob_on_tape(&self, tape: &mut Tape, bound: &BoundFlow, x: Var) -> Result<FlowPass> {
        self.log_prob_with_mode(tape, bound, x, self.bn_mode)
    }

    fn log_prob_with_mode(
        &self,
        tape: &mut Tape,
        bound: &BoundFlow,
        x: Var,
        mode: BnMode,
    ) -> Result<FlowPass> {
        let d = self.config.dim;
        let n = tape.shape(x)[0];
        let mut a = x;
        // Log-det of the data-to-base map.
        let mut down = tape.constant(Tensor::zeros(&[n]));
        let mut stats = vec![None; self.config.blocks];
        let perm = self.reverse_perm();
        for k in (0..self.config.blocks).rev() {
            if k + 1 < self.config.blocks {
                a = tape.permute_cols(a, &perm)?;
            }
            if let Some(vars) = bound.bns[k] {
                let (b, ld) = match self.config.direction {
                    Direction::Density => {
                        let (b, ld, s) = self.bn_down(tape, k, vars, a, mode)?;
                        stats[k] = s;
                        (b, ld)
                    }
                    Direction::Sampling => self.bn_up(tape, k, vars, a)?,
                };
                a = b;
                down = tape.add(down, ld)?;
            }
            let made = &bound.mades[k];
            let (b, ld) = match self.config.direction {
                Direction::Density => made.shift_scale_down(tape, a)?,
                Direction::Sampling => made.solve_down(tape, a, d)?,
            };
            a = b;
            down = tape.add(down, ld)?;
        }
        let base = standard_normal_log_density(tape, a)?;
        let logp = tape.add(base, down)?;
        if tape.value(logp).data().iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("flow log density"));
        }
        let logdet = tape.neg(down);
        Ok(FlowPass {
            out: logp,
            logdet,
            stats,
        })
    }

    /// Inverse pass `x -> z0` in inference mode; returns `z0` and the
    /// per-row log-det of the inverse map.
    pub fn inverse_values(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape)?;
        let xv = tape.constant(x.clone());
        let d = self.config.dim;
        let n = x.rows();
        let mut a = xv;
        let mut down = tape.constant(Tensor::zeros(&[n]));
        let perm = self.reverse_perm();
        for k in (0..self.config.blocks).rev() {
            if k + 1 < self.config.blocks {
                a = tape.permute_cols(a, &perm)?;
            }
            if let Some(vars) = bound.bns[k] {
                let (b, ld) = match self.config.direction {
                    Direction::Density => {
                        let (b, ld, _) = self.bn_down(&mut tape, k, vars, a, BnMode::Running)?;
                        (b, ld)
                    }
                    Direction::Sampling => self.bn_up(&mut tape, k, vars, a)?,
                };
                a = b;
                down = tape.add(down, ld)?;
            }
            let made = &bound.mades[k];
            let (b, ld) = match self.config.direction {
                Direction::Density => made.shift_scale_down(&mut tape, a)?,
                Direction::Sampling => made.solve_down(&mut tape, a, d)?,
            };
            a = b;
            down = tape.add(down, ld)?;
        }
        Ok((tape.value(a).clone(), tape.value(down).data().to_vec()))
    }

    /// Forward pass `z0 -> x` in inference mode; returns `x` and the
    /// per-row generative log-det.
    pub fn forward_values(&self, z0: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape)?;
        let zv = tape.constant(z0.clone());
        let pass = self.sample_with_mode(&mut tape, &bound, zv, BnMode::Running)?;
        Ok((
            tape.value(pass.out).clone(),
            tape.value(pass.logdet).data().to_vec(),
        ))
    }

    /// `log q_K(x)` per row in inference mode.
    pub fn log_prob_values(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape)?;
        let xv = tape.constant(x.clone());
        let pass = self.log_prob_with_mode(&mut tape, &bound, xv, BnMode::Running)?;
        Ok(tape.value(pass.out).data().to_vec())
    }

    /// `n` draws from the flow in inference mode.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        self.sample_with_rng(n, &mut rng)
    }

    pub fn sample_with_rng<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Err(FlowError::InvalidConfig("sample count must be at least 1".into()));
        }
        let z0 = standard_normal_tensor(rng, n, self.config.dim);
        Ok(self.forward_values(&z0)?.0)
    }

    fn bind_constant(&self, tape: &mut Tape) -> Result<BoundFlow> {
        self.bind(tape)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.flat_params(),
            running_mean: self.bns.iter().map(|b| b.running_mean.clone()).collect(),
            running_var: self.bns.iter().map(|b| b.running_var.clone()).collect(),
            bn_mode: self.bn_mode,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(FlowError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let mut m = Self::new(ck.config.clone())?;
        m.set_flat_params(&ck.params)?;
        if ck.running_mean.len() != m.bns.len() || ck.running_var.len() != m.bns.len() {
            return Err(FlowError::Checkpoint("batch norm state has wrong layer count".into()));
        }
        for ((bn, rm), rv) in m.bns.iter_mut().zip(&ck.running_mean).zip(&ck.running_var) {
            if rm.len() != ck.config.dim || rv.len() != ck.config.dim {
                return Err(FlowError::Checkpoint("batch norm state has wrong width".into()));
            }
            bn.running_mean = rm.clone();
            bn.running_var = rv.clone();
        }
        m.bn_mode = ck.bn_mode;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())
            .map_err(|e| FlowError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| FlowError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}

/// Serialized model. Masks are rebuilt from `config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: FlowConfig,
    pub params: Vec<f64>,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
    pub bn_mode: BnMode,
}

/// `log N(z; 0, I)` per row of `z: [n, d]`.
pub fn standard_normal_log_density(tape: &mut Tape, z: Var) -> Result<Var> {
    let d = tape.shape(z)[1] as f64;
    let sq = tape.square(z);
    let s = tape.sum_cols(sq)?;
    let h = tape.scale(s, -0.5);
    Ok(tape.add_scalar(h, -0.5 * d * (2.0 * std::f64::consts::PI).ln()))
}

pub fn standard_normal_tensor<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    crate::privacy::fill_standard_normal(rng, &mut data);
    Tensor::new(vec![n, d], data).expect("positive dims")
}

/// Generative pass of a single MADE layer: `(z_out, log|det ∂z_out/∂z|)`.
pub fn made_forward(
    layer: &MadeLayer,
    direction: Direction,
    z: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let mv = layer.bind(&mut tape)?;
    let zv = tape.constant(z.clone());
    let (out, ld) = match direction {
        Direction::Density => mv.solve_up(&mut tape, zv, layer.dim)?,
        Direction::Sampling => mv.scale_shift_up(&mut tape, zv)?,
    };
    check_finite(&tape, out, "made forward")?;
    Ok((tape.value(out).clone(), tape.value(ld).data().to_vec()))
}

/// Inverse pass of a single MADE layer: `(z, log|det ∂z/∂x|)`.
pub fn made_inverse(
    layer: &MadeLayer,
    direction: Direction,
    x: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let mv = layer.bind(&mut tape)?;
    let xv = tape.constant(x.clone());
    let (out, ld) = match direction {
        Direction::Density => mv.shift_scale_down(&mut tape, xv)?,
        Direction::Sampling => mv.solve_down(&mut tape, xv, layer.dim)?,
    };
    check_finite(&tape, out, "made inverse")?;
    Ok((tape.value(out).clone(), tape.value(ld).data().to_vec()))
}

/// `(μ, α)` of a single MADE layer at each row of `z`.
pub fn made_heads(layer: &MadeLayer, z: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let mv = layer.bind(&mut tape)?;
    let zv = tape.constant(z.clone());
    let (mu, al) = mv.heads(&mut tape, zv)?;
    Ok((tape.value(mu).clone(), tape.value(al).clone()))
}

fn check_finite(tape: &Tape, v: Var, what: &'static str) -> Result<()> {
    if tape.value(v).data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::NonFinite(what))
    }
}
