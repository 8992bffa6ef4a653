//! Gaussian-DP accounting for subsampled noisy gradient descent.
//!
//! The total loss of `T` Poisson-subsampled Gaussian mechanisms at rate `r`
//! and noise multiplier `σ` is `μ = r·√(T·(e^{1/σ²} − 1))`. The conversion
//! to `(ε, δ)` uses the exact duality curve of the Gaussian trade-off
//! function.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy parameter: {0}")]
    InvalidParameter(String),
    #[error("empty batch: sanitize_sum needs at least one gradient")]
    EmptyBatch,
    #[error("gradient {index} has norm {norm} above clip bound {clip}")]
    Unclipped { index: usize, norm: f64, clip: f64 },
    #[error("gradient {index} has length {len}, expected {expected}")]
    LengthMismatch {
        index: usize,
        len: usize,
        expected: usize,
    },
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

/// Noise multiplier, sampling rate, iteration count and clip bound of one
/// DP-SGD run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub sigma: f64,
    pub rate: f64,
    pub iterations: usize,
    pub clip: f64,
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        check_rate(self.rate)?;
        if !(self.clip > 0.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "clip must be positive, got {}",
                self.clip
            )));
        }
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        mu_total(self.sigma, self.rate, self.iterations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsDelta {
    pub epsilon: f64,
    pub delta: f64,
}

fn check_rate(r: f64) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "rate must lie in (0, 1], got {r}"
        )));
    }
    Ok(())
}

pub fn mu_from_spec(spec: &PrivacySpec) -> f64 {
    spec.mu()
}

/// `r·√(T·(e^{1/σ²} − 1))`; infinite when `σ = 0` and zero when `T = 0`.
pub fn mu_total(sigma: f64, rate: f64, iterations: usize) -> f64 {
    if iterations == 0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    rate * (iterations as f64 * (1.0 / (sigma * sigma)).exp_m1()).sqrt()
}

/// Inverse of [`mu_total`] in `σ`.
pub fn sigma_from_mu(mu: f64, rate: f64, iterations: usize) -> Result<f64> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(PrivacyError::InvalidParameter(format!(
            "mu must be positive and finite, got {mu}"
        )));
    }
    check_rate(rate)?;
    if iterations == 0 {
        return Err(PrivacyError::InvalidParameter(
            "iterations must be at least 1".into(),
        ));
    }
    let q = (mu / rate).powi(2) / iterations as f64;
    Ok(1.0 / q.ln_1p().sqrt())
}

/// `ln Φ(x)`, accurate deep into the lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x >= -8.0 {
        return (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln();
    }
    // Φ(x) = φ(x)/t · 1/(1 + 1/(t² + ...)) with t = −x; evaluate the Mills
    // ratio continued fraction R(t) = 1/(t + 1/(t + 2/(t + 3/(t + ...)))).
    let t = -x;
    let mut r = t;
    for k in (1..=60).rev() {
        r = t + k as f64 / r;
    }
    -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln() - r.ln()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `δ(ε) = Φ(−ε/μ + μ/2) − e^ε·Φ(−ε/μ − μ/2)` evaluated in log space.
pub fn delta_from_eps_mu(eps: f64, mu: f64) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    if mu.is_infinite() {
        return 1.0;
    }
    let a = -eps / mu + mu / 2.0;
    let b = -eps / mu - mu / 2.0;
    let la = log_norm_cdf(a);
    let lb = eps + log_norm_cdf(b);
    // δ = e^{la}(1 − e^{lb − la}); lb < la always holds mathematically.
    let d = la.exp() * -(lb - la).exp_m1();
    d.clamp(0.0, 1.0)
}

/// Smallest `ε ≥ 0` with `δ(ε; μ) ≤ delta`.
pub fn eps_from_delta_mu(delta: f64, mu: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(PrivacyError::InvalidParameter(format!(
            "mu must be positive and finite, got {mu}"
        )));
    }
    if delta_from_eps_mu(0.0, mu) <= delta {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while delta_from_eps_mu(hi, mu) > delta {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if delta_from_eps_mu(mid, mu) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Largest `μ` whose `δ(ε; μ)` does not exceed `delta`.
pub fn mu_from_eps_delta(eps: f64, delta: f64) -> Result<f64> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(PrivacyError::InvalidParameter(format!(
            "epsilon must be non-negative and finite, got {eps}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let mut hi = 1.0;
    while delta_from_eps_mu(eps, hi) < delta {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(PrivacyError::InvalidParameter(format!(
                "no finite mu reaches delta {delta} at epsilon {eps}"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if delta_from_eps_mu(eps, mid) < delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `g / max(1, ‖g‖₂/C)`.
pub fn clip_gradient(g: &[f64], clip: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip);
    out
}

pub fn clip_in_place(g: &mut [f64], clip: f64) {
    let scale = (l2_norm(g) / clip).max(1.0);
    if scale > 1.0 {
        for x in g.iter_mut() {
            *x /= scale;
        }
    }
}

/// `(Σ g_i + N(0, σ²C²I)) / b` with `b` the realized batch size.
pub fn sanitize_sum<R: Rng + ?Sized>(
    grads: &[Vec<f64>],
    sigma: f64,
    clip: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let first = grads.first().ok_or(PrivacyError::EmptyBatch)?;
    let mut acc = ClippedSum::new(first.len(), clip)?;
    for g in grads {
        acc.push(g)?;
    }
    acc.finish(sigma, rng)
}

/// Streaming form of [`sanitize_sum`]: per-example gradients are checked
/// against the clip bound and summed as they arrive.
#[derive(Debug, Clone)]
pub struct ClippedSum {
    sum: Vec<f64>,
    count: usize,
    clip: f64,
}

impl ClippedSum {
    pub fn new(dim: usize, clip: f64) -> Result<Self> {
        if !(clip > 0.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "clip must be positive, got {clip}"
            )));
        }
        Ok(Self {
            sum: vec![0.0; dim],
            count: 0,
            clip,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, g: &[f64]) -> Result<()> {
        let index = self.count;
        if g.len() != self.sum.len() {
            return Err(PrivacyError::LengthMismatch {
                index,
                len: g.len(),
                expected: self.sum.len(),
            });
        }
        let norm = l2_norm(g);
        if norm > self.clip * (1.0 + 1e-9) {
            return Err(PrivacyError::Unclipped {
                index,
                norm,
                clip: self.clip,
            });
        }
        for (s, x) in self.sum.iter_mut().zip(g) {
            *s += x;
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish<R: Rng + ?Sized>(mut self, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(PrivacyError::EmptyBatch);
        }
        if !(sigma >= 0.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "sigma must be non-negative, got {sigma}"
            )));
        }
        if sigma > 0.0 {
            if !self.clip.is_finite() {
                return Err(PrivacyError::InvalidParameter(
                    "noise needs a finite clip bound".into(),
                ));
            }
            let mut noise = vec![0.0; self.sum.len()];
            fill_standard_normal(rng, &mut noise);
            for (s, z) in self.sum.iter_mut().zip(&noise) {
                *s += sigma * self.clip * z;
            }
        }
        let b = self.count as f64;
        Ok(self.sum.into_iter().map(|s| s / b).collect())
    }
}

/// Indices kept by independent Bernoulli(`rate`) draws, in increasing order.
pub fn poisson_subsample<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < rate).collect()
}

/// One standard normal draw via Box–Muller.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let (z, _) = box_muller(rng);
    z
}

/// Fills `out` with standard normal draws, two per Box–Muller pair.
pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    let mut chunks = out.chunks_exact_mut(2);
    for pair in &mut chunks {
        let (a, b) = box_muller(rng);
        pair[0] = a;
        pair[1] = b;
    }
    if let [last] = chunks.into_remainder() {
        *last = box_muller(rng).0;
    }
}

fn box_muller<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    // 1 − U lies in (0, 1], keeping the log finite.
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let th = 2.0 * std::f64::consts::PI * u2;
    (r * th.cos(), r * th.sin())
}
