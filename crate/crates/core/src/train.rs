//! Training loops for density estimation and variational inference, with
//! optional DP-SGD (Poisson subsampling, per-example clipping, Gaussian
//! noise on the clipped sum).
//!
//! Random streams are split by purpose so that enabling privacy does not
//! shift the subsampling or base draws: stream 0 subsamples, stream 1 adds
//! noise, stream 2 draws base samples.

use crate::flows::{
    standard_normal_log_density, standard_normal_tensor, BnMode, Direction, FlowError, FlowModel,
};
use crate::ndiff::{NdiffError, Tape, Tensor, Var};
use crate::privacy::{self, clip_in_place, mu_total, ClippedSum, PrivacyError};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use thiserror::Error;

/// Consecutive iterations above ten times the initial loss before a run is
/// flagged as not converged.
pub const STALL_WINDOW: usize = 500;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(
        "training diverged at iteration {iteration}: non-finite {what}; \
         block parameter norms {block_norms:?}; privacy spent mu = {mu:?}"
    )]
    Diverged {
        iteration: usize,
        what: &'static str,
        block_norms: Vec<f64>,
        mu: Option<f64>,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "rmsprop" => Ok(Self::Rmsprop),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer '{other}' (expected sgd, rmsprop or adam)")),
        }
    }
}

pub const RMSPROP_ALPHA: f64 = 0.99;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const OPT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Rmsprop => (Vec::new(), vec![0.0; n]),
            OptimizerKind::Adam => (vec![0.0; n], vec![0.0; n]),
        };
        Self { kind, m, v, t: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length");
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Rmsprop => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.v) {
                    *v = RMSPROP_ALPHA * *v + (1.0 - RMSPROP_ALPHA) * g * g;
                    *p -= lr * g / (v.sqrt() + OPT_EPS);
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + OPT_EPS);
                }
            }
        }
    }
}

pub fn optimizer_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64], lr: f64) {
    state.step(params, grads, lr);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSettings {
    pub sigma: f64,
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Per-iteration multiplicative learning-rate decay.
    pub decay: f64,
    pub iterations: usize,
    /// Monte Carlo base samples per iteration (VI only).
    pub mc_samples: usize,
    /// Poisson subsampling rate.
    pub sample_rate: f64,
    pub privacy: Option<DpSettings>,
    pub seed: u64,
    /// VI iterations that use batch statistics in batch norm before
    /// switching to running averages.
    pub bn_warmup: usize,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerKind, lr: f64, iterations: usize) -> Self {
        Self {
            optimizer,
            lr,
            decay: 1.0,
            iterations,
            mc_samples: 100,
            sample_rate: 1.0,
            privacy: None,
            seed: 0,
            bn_warmup: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return bad(format!("sample rate must lie in (0, 1], got {}", self.sample_rate));
        }
        if let Some(dp) = self.privacy {
            if !(dp.sigma >= 0.0) || !dp.sigma.is_finite() {
                return bad(format!("sigma must be finite and non-negative, got {}", dp.sigma));
            }
            if !(dp.clip > 0.0) {
                return bad(format!("clip must be positive, got {}", dp.clip));
            }
            if dp.sigma > 0.0 && !dp.clip.is_finite() {
                return bad("noise requires a finite clip bound".into());
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr * self.decay.powi(t as i32)
    }

    /// Privacy spent after `realized` iterations.
    pub fn ledger(&self, realized: usize) -> PrivacyLedger {
        match self.privacy {
            None => PrivacyLedger {
                private: false,
                sigma: None,
                clip: None,
                sample_rate: self.sample_rate,
                iterations: realized,
                mu: None,
            },
            Some(dp) => {
                let mu = mu_total(dp.sigma, self.sample_rate, realized);
                PrivacyLedger {
                    private: true,
                    sigma: Some(dp.sigma),
                    clip: Some(dp.clip),
                    sample_rate: self.sample_rate,
                    iterations: realized,
                    mu: mu.is_finite().then_some(mu),
                }
            }
        }
    }
}

/// Privacy spent by a run. `mu` is `None` when no finite guarantee holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub private: bool,
    pub sigma: Option<f64>,
    pub clip: Option<f64>,
    pub sample_rate: f64,
    pub iterations: usize,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// One entry per iteration with a non-empty batch.
    pub loss_trace: Vec<f64>,
    pub iterations_run: usize,
    pub skipped_iterations: usize,
    pub ledger: PrivacyLedger,
    pub converged: bool,
}

/// Log-likelihood and prior of a Bayesian model whose parameters are the
/// flow's output `z: [m, d]`.
pub trait TargetPosterior {
    fn dim(&self) -> usize;

    /// `Σ_{rows} log p(x_i | z_j)` for each sample `j`, shape `[m]`.
    fn log_likelihood(&self, tape: &mut Tape, rows: &Tensor, z: Var) -> std::result::Result<Var, NdiffError>;

    /// `log p(z_j)` up to a constant, shape `[m]`; `None` for a flat prior.
    fn log_prior(&self, _tape: &mut Tape, _z: Var) -> std::result::Result<Option<Var>, NdiffError> {
        Ok(None)
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

struct Monitor {
    initial: Option<f64>,
    run: usize,
    stalled: bool,
}

impl Monitor {
    fn new() -> Self {
        Self {
            initial: None,
            run: 0,
            stalled: false,
        }
    }

    fn observe(&mut self, loss: f64) {
        let init = *self.initial.get_or_insert(loss);
        if loss > 10.0 * init.abs() {
            self.run += 1;
            if self.run >= STALL_WINDOW {
                self.stalled = true;
            }
        } else {
            self.run = 0;
        }
    }
}

fn check_data(data: &Tensor, dim: Option<usize>) -> Result<()> {
    if data.shape().len() != 2 {
        return Err(TrainError::InvalidConfig(format!(
            "data must be a matrix, got shape {:?}",
            data.shape()
        )));
    }
    if let Some(d) = dim {
        if data.cols() != d {
            return Err(TrainError::InvalidConfig(format!(
                "data has {} columns, model expects {d}",
                data.cols()
            )));
        }
    }
    if data.data().iter().any(|x| !x.is_finite()) {
        return Err(TrainError::InvalidConfig("data contains non-finite values".into()));
    }
    Ok(())
}

/// Converts non-finite flow evaluations into a divergence report.
fn flow_guard<T>(
    r: std::result::Result<T, FlowError>,
    model: &FlowModel,
    cfg: &TrainConfig,
    t: usize,
) -> Result<T> {
    match r {
        Err(FlowError::NonFinite(what)) => Err(diverged(model, cfg, t, what)),
        other => Ok(other?),
    }
}

fn diverged(model: &FlowModel, cfg: &TrainConfig, t: usize, what: &'static str) -> TrainError {
    TrainError::Diverged {
        iteration: t,
        what,
        block_norms: model.block_param_norms(),
        mu: cfg.ledger(t + 1).mu,
    }
}

fn apply_step(
    model: &mut FlowModel,
    opt: &mut OptimizerState,
    grad: &[f64],
    lr: f64,
    cfg: &TrainConfig,
    t: usize,
) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(diverged(model, cfg, t, "gradient"));
    }
    let mut params = model.flat_params();
    opt.step(&mut params, grad, lr);
    if params.iter().any(|p| !p.is_finite()) {
        return Err(diverged(model, cfg, t, "parameters"));
    }
    model.set_flat_params(&params)?;
    Ok(())
}

/// Maximum-likelihood density estimation.
///
/// Non-private runs average the negative log-likelihood over the subsampled
/// batch with batch-statistics batch norm. Private runs freeze batch norm
/// at its running statistics so each example's loss depends on that example
/// alone, then clip and noise per-example gradients.
pub fn fit_density(model: &mut FlowModel, data: &Tensor, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(data, Some(model.dim()))?;
    let n = data.rows();
    model.set_bn_mode(if cfg.privacy.is_some() {
        BnMode::Running
    } else {
        BnMode::Batch
    });
    let mut sub_rng = rng_stream(cfg.seed, 0);
    let mut noise_rng = rng_stream(cfg.seed, 1);
    let mut opt = OptimizerState::new(cfg.optimizer, model.num_params());
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut skipped = 0;
    let mut monitor = Monitor::new();

    for t in 0..cfg.iterations {
        let idx = privacy::poisson_subsample(n, cfg.sample_rate, &mut sub_rng);
        if idx.is_empty() {
            skipped += 1;
            continue;
        }
        let (loss, grad) = match cfg.privacy {
            None => {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape)?;
                let x = tape.constant(data.select_rows(&idx)?);
                let pass = flow_guard(model.log_prob_on_tape(&mut tape, &bound, x), model, cfg, t)?;
                let m = tape.mean(pass.out);
                let loss = tape.neg(m);
                let grad = tape.gradient(loss, bound.params())?;
                model.absorb_batch_stats(&pass.stats);
                (tape.item(loss), grad)
            }
            Some(dp) => {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape)?;
                let mark = tape.len();
                let mut acc = ClippedSum::new(model.num_params(), dp.clip)?;
                let mut total = 0.0;
                for &i in &idx {
                    let x = tape.constant(data.select_rows(&[i])?);
                    let pass =
                        flow_guard(model.log_prob_on_tape(&mut tape, &bound, x), model, cfg, t)?;
                    let s = tape.sum(pass.out);
                    let li = tape.neg(s);
                    total += tape.item(li);
                    let mut g = tape.gradient(li, bound.params())?;
                    clip_in_place(&mut g, dp.clip);
                    acc.push(&g)?;
                    tape.truncate(mark);
                }
                (total / idx.len() as f64, acc.finish(dp.sigma, &mut noise_rng)?)
            }
        };
        if !loss.is_finite() {
            return Err(diverged(model, cfg, t, "loss"));
        }
        trace.push(loss);
        monitor.observe(loss);
        apply_step(model, &mut opt, &grad, cfg.lr_at(t), cfg, t)?;
        if t % 500 == 0 {
            log::debug!("density iteration {t}: loss {loss:.6}");
        }
    }
    Ok(TrainReport {
        loss_trace: trace,
        iterations_run: cfg.iterations,
        skipped_iterations: skipped,
        ledger: cfg.ledger(cfg.iterations),
        converged: !monitor.stalled,
    })
}

/// Per-sample `(log q0(z0) − log|det ∂F/∂z0| − log p(z)) / n`, shape `[m]`.
fn shared_term(
    tape: &mut Tape,
    target: &dyn TargetPosterior,
    z0: Var,
    z: Var,
    logdet: Var,
    n: usize,
) -> Result<Var> {
    let lq0 = standard_normal_log_density(tape, z0)?;
    let mut s = tape.sub(lq0, logdet)?;
    if let Some(p) = target.log_prior(tape, z)? {
        s = tape.sub(s, p)?;
    }
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// Variational inference by minimizing the free-energy bound.
///
/// Each data point contributes
/// `l_i = mean_j[(log q0(z0j) − log|det| − log p(z_j))/n − log p(x_i|z_j)]`,
/// so `Σ_i l_i` over the full data is the free energy. The loss trace
/// records the unbiased estimate `(n/b)·Σ_{i∈batch} l_i`.
pub fn fit_vi(
    model: &mut FlowModel,
    target: &dyn TargetPosterior,
    data: &Tensor,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(data, None)?;
    if model.direction() != Direction::Sampling {
        return Err(TrainError::InvalidConfig(
            "variational inference needs a flow built in the sampling direction".into(),
        ));
    }
    if target.dim() != model.dim() {
        return Err(TrainError::InvalidConfig(format!(
            "target has {} parameters, flow has dimension {}",
            target.dim(),
            model.dim()
        )));
    }
    let n = data.rows();
    let d = model.dim();
    let mut sub_rng = rng_stream(cfg.seed, 0);
    let mut noise_rng = rng_stream(cfg.seed, 1);
    let mut base_rng = rng_stream(cfg.seed, 2);
    let mut opt = OptimizerState::new(cfg.optimizer, model.num_params());
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut skipped = 0;
    let mut monitor = Monitor::new();

    for t in 0..cfg.iterations {
        let idx = privacy::poisson_subsample(n, cfg.sample_rate, &mut sub_rng);
        if idx.is_empty() {
            skipped += 1;
            continue;
        }
        model.set_bn_mode(if t < cfg.bn_warmup {
            BnMode::Batch
        } else {
            BnMode::Running
        });
        let b = idx.len();
        let z0t = standard_normal_tensor(&mut base_rng, cfg.mc_samples, d);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let z0 = tape.constant(z0t);
        let pass = flow_guard(model.sample_on_tape(&mut tape, &bound, z0), model, cfg, t)?;
        let shared = shared_term(&mut tape, target, z0, pass.out, pass.logdet, n)?;

        let (estimate, grad) = match cfg.privacy {
            None => {
                let rows = data.select_rows(&idx)?;
                let ll = target.log_likelihood(&mut tape, &rows, pass.out)?;
                let ll = tape.scale(ll, 1.0 / b as f64);
                let diff = tape.sub(shared, ll)?;
                let loss = tape.mean(diff);
                let grad = tape.gradient(loss, bound.params())?;
                (n as f64 * tape.item(loss), grad)
            }
            Some(dp) => {
                let mark = tape.len();
                let mut acc = ClippedSum::new(model.num_params(), dp.clip)?;
                let mut total = 0.0;
                for &i in &idx {
                    let row = data.select_rows(&[i])?;
                    let ll = target.log_likelihood(&mut tape, &row, pass.out)?;
                    let diff = tape.sub(shared, ll)?;
                    let li = tape.mean(diff);
                    total += tape.item(li);
                    let mut g = tape.gradient(li, bound.params())?;
                    clip_in_place(&mut g, dp.clip);
                    acc.push(&g)?;
                    tape.truncate(mark);
                }
                (
                    n as f64 / b as f64 * total,
                    acc.finish(dp.sigma, &mut noise_rng)?,
                )
            }
        };
        if !estimate.is_finite() {
            return Err(diverged(model, cfg, t, "loss"));
        }
        trace.push(estimate);
        monitor.observe(estimate);
        model.absorb_batch_stats(&pass.stats);
        apply_step(model, &mut opt, &grad, cfg.lr_at(t), cfg, t)?;
        if t % 500 == 0 {
            log::debug!("vi iteration {t}: free energy {estimate:.6}");
        }
    }
    model.set_bn_mode(BnMode::Running);
    Ok(TrainReport {
        loss_trace: trace,
        iterations_run: cfg.iterations,
        skipped_iterations: skipped,
        ledger: cfg.ledger(cfg.iterations),
        converged: !monitor.stalled,
    })
}

/// Monte Carlo estimate of the free energy over the full data with `m`
/// base samples, using the model's current batch-norm mode.
pub fn free_energy<R: rand::Rng + ?Sized>(
    model: &FlowModel,
    target: &dyn TargetPosterior,
    data: &Tensor,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = data.rows();
    let z0t = standard_normal_tensor(rng, m, model.dim());
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let z0 = tape.constant(z0t);
    let pass = model.sample_on_tape(&mut tape, &bound, z0)?;
    let shared = shared_term(&mut tape, target, z0, pass.out, pass.logdet, n)?;
    let ll = target.log_likelihood(&mut tape, data, pass.out)?;
    let ll = tape.scale(ll, 1.0 / n as f64);
    let diff = tape.sub(shared, ll)?;
    let loss = tape.mean(diff);
    Ok(n as f64 * tape.item(loss))
}

/// Sample mean, standard deviation and correlation matrix of the rows of
/// `samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub corr: Vec<Vec<f64>>,
}

pub fn summarize(samples: &Tensor) -> SampleSummary {
    let (n, d) = (samples.rows(), samples.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(samples.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..n {
        let r = samples.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    cov.iter_mut().flatten().for_each(|c| *c /= denom);
    let sd: Vec<f64> = (0..d).map(|a| cov[a][a].sqrt()).collect();
    let corr = (0..d)
        .map(|a| (0..d).map(|b| cov[a][b] / (sd[a] * sd[b])).collect())
        .collect();
    SampleSummary { mean, sd, corr }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowConfig;
    use crate::privacy::fill_standard_normal;

    fn gaussian_data(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut raw = vec![0.0; n * 2];
        fill_standard_normal(&mut rng, &mut raw);
        let rho: f64 = 0.7;
        let data = raw
            .chunks(2)
            .flat_map(|c| [c[0], rho * c[0] + (1.0 - rho * rho).sqrt() * c[1]])
            .collect();
        Tensor::new(vec![n, 2], data).unwrap()
    }

    /// `x_i ~ N(θ, 1)` with a flat prior on `θ`.
    struct GaussianMean;

    impl TargetPosterior for GaussianMean {
        fn dim(&self) -> usize {
            1
        }

        fn log_likelihood(&self, tape: &mut Tape, rows: &Tensor, z: Var) -> std::result::Result<Var, NdiffError> {
            let b = rows.rows() as f64;
            let s1: f64 = rows.data().iter().sum();
            let s2: f64 = rows.data().iter().map(|x| x * x).sum();
            // −½ Σ_i (x_i − θ)² = −½(S2 − 2θS1 + bθ²)
            let th = tape.column(z, 0)?;
            let sq = tape.square(th);
            let q = tape.scale(sq, -0.5 * b);
            let lin = tape.scale(th, s1);
            let s = tape.add(q, lin)?;
            Ok(tape.add_scalar(s, -0.5 * s2))
        }
    }

    struct NanTarget;

    impl TargetPosterior for NanTarget {
        fn dim(&self) -> usize {
            1
        }

        fn log_likelihood(&self, tape: &mut Tape, _rows: &Tensor, z: Var) -> std::result::Result<Var, NdiffError> {
            let c = tape.column(z, 0)?;
            Ok(tape.add_scalar(c, f64::NAN))
        }
    }

    #[test]
    fn sgd_single_step() {
        let mut st = OptimizerState::new(OptimizerKind::Sgd, 1);
        let mut p = [1.0];
        st.step(&mut p, &[2.0], 0.1);
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            let mut st = OptimizerState::new(kind, 3);
            let mut p = [1.0, -2.0, 0.5];
            for _ in 0..3 {
                st.step(&mut p, &[0.0; 3], 0.1);
            }
            assert_eq!(p, [1.0, -2.0, 0.5], "{kind:?}");
        }
    }

    #[test]
    fn adam_first_step_has_size_lr() {
        for scale in [1e-4, 1.0, 1e4] {
            let mut st = OptimizerState::new(OptimizerKind::Adam, 2);
            let mut p = [0.0, 0.0];
            st.step(&mut p, &[scale, -3.0 * scale], 0.01);
            // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
            assert!((p[0] + 0.01).abs() < 1e-6);
            assert!((p[1] - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsprop_matches_hand_computation() {
        let mut st = OptimizerState::new(OptimizerKind::Rmsprop, 1);
        let mut p = [0.0];
        st.step(&mut p, &[2.0], 0.01);
        let v: f64 = 0.01 * 4.0;
        assert!((p[0] + 0.01 * 2.0 / (v.sqrt() + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn optimizer_names_parse() {
        assert_eq!("RMSProp".parse::<OptimizerKind>().unwrap(), OptimizerKind::Rmsprop);
        assert_eq!("SGD".parse::<OptimizerKind>().unwrap(), OptimizerKind::Sgd);
        assert!("lbfgs".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(OptimizerKind::Sgd, 0.1, 10);
        assert!(c.validate().is_ok());
        c.decay = 1.5;
        assert!(c.validate().is_err());
        c.decay = 1.0;
        c.privacy = Some(DpSettings {
            sigma: 1.0,
            clip: f64::INFINITY,
        });
        assert!(c.validate().is_err());
    }

    #[test]
    fn ledger_reports_exact_mu() {
        let mut c = TrainConfig::new(OptimizerKind::Sgd, 0.1, 10);
        c.sample_rate = 0.5;
        c.privacy = Some(DpSettings { sigma: 7.36, clip: 10.0 });
        assert_eq!(c.ledger(8000).mu, Some(mu_total(7.36, 0.5, 8000)));
        c.privacy = Some(DpSettings { sigma: 0.0, clip: 1.0 });
        assert_eq!(c.ledger(5).mu, None);
        assert!(c.ledger(5).private);
    }

    fn no_bn_model(seed: u64) -> FlowModel {
        let mut cfg = FlowConfig::new(2, 2, vec![8], Direction::Density);
        cfg.batch_norm = false;
        cfg.seed = seed;
        FlowModel::new(cfg).unwrap()
    }

    #[test]
    fn noiseless_unclipped_dp_equals_full_batch_descent() {
        let data = gaussian_data(64, 1);
        let mut cfg = TrainConfig::new(OptimizerKind::Sgd, 0.05, 10);
        let mut plain = no_bn_model(3);
        let r1 = fit_density(&mut plain, &data, &cfg).unwrap();
        cfg.privacy = Some(DpSettings {
            sigma: 0.0,
            clip: f64::INFINITY,
        });
        let mut dp = no_bn_model(3);
        let r2 = fit_density(&mut dp, &data, &cfg).unwrap();

        // Hand-written maximum-likelihood loop.
        let mut manual = no_bn_model(3);
        let mut trace = Vec::new();
        for _ in 0..10 {
            let mut tape = Tape::new();
            let b = manual.bind(&mut tape).unwrap();
            let x = tape.constant(data.clone());
            let lp = manual.log_prob_on_tape(&mut tape, &b, x).unwrap();
            let s = tape.sum(lp.out);
            let nll = tape.scale(s, -1.0 / 64.0);
            trace.push(tape.item(nll));
            let g = tape.gradient(nll, b.params()).unwrap();
            let p: Vec<f64> = manual
                .flat_params()
                .iter()
                .zip(&g)
                .map(|(p, g)| p - 0.05 * g)
                .collect();
            manual.set_flat_params(&p).unwrap();
        }
        for i in 0..10 {
            assert!((r1.loss_trace[i] - trace[i]).abs() < 1e-10);
            assert!((r2.loss_trace[i] - trace[i]).abs() < 1e-10);
        }
        assert!(r1.loss_trace[9] < r1.loss_trace[0]);
    }

    #[test]
    fn density_runs_are_bit_reproducible() {
        let data = gaussian_data(200, 2);
        let mut cfg = TrainConfig::new(OptimizerKind::Rmsprop, 0.01, 20);
        cfg.sample_rate = 0.2;
        cfg.privacy = Some(DpSettings { sigma: 1.0, clip: 5.0 });
        cfg.seed = 17;
        let run = || {
            let mut m = FlowModel::new(FlowConfig::new(2, 2, vec![8], Direction::Density)).unwrap();
            let r = fit_density(&mut m, &data, &cfg).unwrap();
            (r.loss_trace, m.sample(20, 1).unwrap())
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(sa, sb);
    }

    #[test]
    fn empty_batches_are_skipped_but_counted() {
        let data = gaussian_data(3, 4);
        let mut cfg = TrainConfig::new(OptimizerKind::Sgd, 0.01, 30);
        cfg.sample_rate = 0.05;
        cfg.privacy = Some(DpSettings { sigma: 1.0, clip: 1.0 });
        let mut m = FlowModel::new(FlowConfig::new(2, 1, vec![4], Direction::Density)).unwrap();
        let r = fit_density(&mut m, &data, &cfg).unwrap();
        assert!(r.skipped_iterations > 0);
        assert_eq!(r.loss_trace.len() + r.skipped_iterations, 30);
        assert_eq!(r.ledger.mu, Some(mu_total(1.0, 0.05, 30)));
    }

    #[test]
    fn vi_rejects_density_direction() {
        let mut m = FlowModel::new(FlowConfig::new(1, 1, vec![4], Direction::Density)).unwrap();
        let cfg = TrainConfig::new(OptimizerKind::Adam, 0.01, 5);
        let data = Tensor::zeros(&[4, 1]);
        assert!(matches!(
            fit_vi(&mut m, &GaussianMean, &data, &cfg),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let mut m = FlowModel::new(FlowConfig::new(1, 1, vec![4], Direction::Sampling)).unwrap();
        let mut cfg = TrainConfig::new(OptimizerKind::Adam, 0.01, 5);
        cfg.privacy = Some(DpSettings { sigma: 1.0, clip: 1.0 });
        let data = Tensor::zeros(&[4, 1]);
        match fit_vi(&mut m, &NanTarget, &data, &cfg) {
            Err(TrainError::Diverged {
                iteration,
                block_norms,
                mu,
                ..
            }) => {
                assert_eq!(iteration, 0);
                assert_eq!(block_norms.len(), 1);
                assert_eq!(mu, Some(mu_total(1.0, 1.0, 1)));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn vi_on_gaussian_mean_recovers_posterior() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut x = vec![0.0; 100];
        fill_standard_normal(&mut rng, &mut x);
        let x: Vec<f64> = x.iter().map(|v| v + 1.5).collect();
        let xbar = x.iter().sum::<f64>() / 100.0;
        let data = Tensor::new(vec![100, 1], x).unwrap();
        let mut fc = FlowConfig::new(1, 1, vec![4], Direction::Sampling);
        fc.batch_norm = false;
        let mut m = FlowModel::new(fc).unwrap();
        let mut cfg = TrainConfig::new(OptimizerKind::Adam, 0.02, 1500);
        cfg.mc_samples = 64;
        cfg.decay = 0.999;
        let r = fit_vi(&mut m, &GaussianMean, &data, &cfg).unwrap();
        assert!(r.converged);
        let s = summarize(&m.sample(20_000, 9).unwrap());
        assert!((s.mean[0] - xbar).abs() < 0.05, "{} vs {xbar}", s.mean[0]);
        assert!((s.sd[0] / 0.1 - 1.0).abs() < 0.1, "sd {}", s.sd[0]);
    }

    #[test]
    fn monitor_flags_sustained_blowup() {
        let mut mon = Monitor::new();
        mon.observe(1.0);
        for _ in 0..STALL_WINDOW - 1 {
            mon.observe(100.0);
        }
        assert!(!mon.stalled);
        mon.observe(100.0);
        assert!(mon.stalled);
    }

    #[test]
    fn summary_of_known_rows() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 10.0]]).unwrap();
        let s = summarize(&t);
        assert_eq!(s.mean, vec![3.0, 6.0]);
        assert!((s.sd[0] - 2.0).abs() < 1e-12);
        assert!((s.corr[0][1] - 1.0).abs() < 1e-12);
    }
}
