//! Dissimilarity metrics between zero-mean equicorrelated bivariate
//! Gaussians `Σ = σ²[(1−ρ)I + ρ·11ᵀ]`, loss surfaces over `(ρ, σ)` and the
//! minimizing correlation at a fixed inflated scale.
//!
//! Every covariance of this family has eigenvectors `(1, ±1)/√2` with
//! eigenvalues `σ²(1 ± ρ)`, so densities factor in rotated coordinates.

use crate::privacy::norm_cdf;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::OnceLock;
use thiserror::Error;

pub const MAX_ABS_RHO: f64 = 1.0 - 1e-9;
/// Default correlation grid limit and spacing.
pub const RHO_LIMIT: f64 = 0.999;
pub const RHO_STEP: f64 = 1e-3;
/// Gauss–Legendre nodes per panel for the ℓ1 integral, and for its error check.
pub const L1_NODES: usize = 400;
pub const L1_CHECK_NODES: usize = 200;
/// Integration half-width in units of the larger standard deviation.
pub const L1_HALF_WIDTH: f64 = 8.0;

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error("covariance is near singular: |rho| = {0} exceeds {MAX_ABS_RHO}")]
    NearSingular(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DivergenceError>;

/// Target `p` with `(ρ0, σ0)` and approximation `q` with `(ρ, σ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPair {
    pub rho0: f64,
    pub sigma0: f64,
    pub rho: f64,
    pub sigma: f64,
}

impl GaussianPair {
    pub fn new(rho0: f64, sigma0: f64, rho: f64, sigma: f64) -> Result<Self> {
        for r in [rho0, rho] {
            if !(r.abs() <= MAX_ABS_RHO) {
                return Err(DivergenceError::NearSingular(r.abs()));
            }
        }
        for s in [sigma0, sigma] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(DivergenceError::Invalid(format!("sigma must be positive, got {s}")));
            }
        }
        Ok(Self {
            rho0,
            sigma0,
            rho,
            sigma,
        })
    }

    /// Eigenvalues `(σ0²(1+ρ0), σ0²(1−ρ0))` of the target covariance.
    pub fn target_eigen(&self) -> [f64; 2] {
        let v = self.sigma0 * self.sigma0;
        [v * (1.0 + self.rho0), v * (1.0 - self.rho0)]
    }

    pub fn approx_eigen(&self) -> [f64; 2] {
        let v = self.sigma * self.sigma;
        [v * (1.0 + self.rho), v * (1.0 - self.rho)]
    }

    pub fn target_cov(&self) -> [[f64; 2]; 2] {
        cov(self.rho0, self.sigma0)
    }

    pub fn approx_cov(&self) -> [[f64; 2]; 2] {
        cov(self.rho, self.sigma)
    }
}

fn cov(rho: f64, sigma: f64) -> [[f64; 2]; 2] {
    let v = sigma * sigma;
    [[v, v * rho], [v * rho, v]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// `D(q ‖ p)`, the variational objective.
    Kl,
    /// `D(p ‖ q)`.
    ReverseKl,
    L1,
    /// Squared 2-Wasserstein distance (Bures form).
    W2,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Kl, Metric::ReverseKl, Metric::L1, Metric::W2];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Kl => "kl",
            Metric::ReverseKl => "reverse-kl",
            Metric::L1 => "l1",
            Metric::W2 => "w2",
        }
    }

    pub fn eval(self, pair: &GaussianPair) -> f64 {
        match self {
            Metric::Kl => kl(pair),
            Metric::ReverseKl => reverse_kl(pair),
            Metric::L1 => l1_distance(pair).value,
            Metric::W2 => wasserstein2(pair),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = DivergenceError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "kl" => Ok(Metric::Kl),
            "reverse-kl" | "rkl" => Ok(Metric::ReverseKl),
            "l1" => Ok(Metric::L1),
            "w2" | "wasserstein" | "wasserstein2" => Ok(Metric::W2),
            other => Err(DivergenceError::Invalid(format!(
                "unknown metric '{other}' (expected kl, reverse-kl, l1 or w2)"
            ))),
        }
    }
}

fn kl_eigen(num: [f64; 2], den: [f64; 2]) -> f64 {
    // D(N(0,A) ‖ N(0,B)) for commuting A, B with eigenvalues num, den.
    num.iter()
        .zip(den)
        .map(|(a, b)| {
            let r = a / b;
            0.5 * (r - 1.0 - r.ln())
        })
        .sum()
}

/// `D(q ‖ p)`.
pub fn kl(pair: &GaussianPair) -> f64 {
    kl_eigen(pair.approx_eigen(), pair.target_eigen())
}

/// `D(p ‖ q)`.
pub fn reverse_kl(pair: &GaussianPair) -> f64 {
    kl_eigen(pair.target_eigen(), pair.approx_eigen())
}

type M2 = [[f64; 2]; 2];

fn mat_mul(a: &M2, b: &M2) -> M2 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j]))
}

/// Square root of a symmetric positive semi-definite 2×2 matrix from its
/// closed-form eigendecomposition.
pub fn sqrtm_2x2(m: &M2) -> M2 {
    let (a, b, d) = (m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1]);
    let mean = 0.5 * (a + d);
    let rad = (0.25 * (a - d).powi(2) + b * b).sqrt();
    let (l1, l2) = ((mean + rad).max(0.0), (mean - rad).max(0.0));
    // Unit eigenvector for l1.
    let (vx, vy) = if b.abs() > 1e-300 {
        let (x, y) = (b, l1 - a);
        let n = x.hypot(y);
        (x / n, y / n)
    } else if a >= d {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let (s1, s2) = (l1.sqrt(), l2.sqrt());
    // s1·vvᵀ + s2·(I − vvᵀ).
    [
        [s2 + (s1 - s2) * vx * vx, (s1 - s2) * vx * vy],
        [(s1 - s2) * vx * vy, s2 + (s1 - s2) * vy * vy],
    ]
}

/// `trace(Σ0 + Σ − 2(Σ^{1/2} Σ0 Σ^{1/2})^{1/2})`, the squared 2-Wasserstein
/// distance between zero-mean Gaussians.
pub fn bures(s0: &M2, s: &M2) -> f64 {
    let r = sqrtm_2x2(s);
    let inner = mat_mul(&mat_mul(&r, s0), &r);
    let c = sqrtm_2x2(&inner);
    (s0[0][0] + s0[1][1] + s[0][0] + s[1][1] - 2.0 * (c[0][0] + c[1][1])).max(0.0)
}

pub fn wasserstein2(pair: &GaussianPair) -> f64 {
    bures(&pair.target_cov(), &pair.approx_cov())
}

/// Gauss–Legendre nodes and weights on `[−1, 1]` by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * p - pm) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn legendre_rule(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static FINE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    static COARSE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    match n {
        L1_NODES => FINE.get_or_init(|| gauss_legendre(L1_NODES)),
        L1_CHECK_NODES => COARSE.get_or_init(|| gauss_legendre(L1_CHECK_NODES)),
        _ => unreachable!("only the two ℓ1 rules are cached"),
    }
}

/// Quadrature value with an error estimate from a coarser rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub value: f64,
    pub error_estimate: f64,
}

fn normal_pdf(v: f64, x: f64) -> f64 {
    (-0.5 * x * x / v).exp() / (2.0 * PI * v).sqrt()
}

/// `∫ |P·φ_a(v) − Q·φ_b(v)| dv` for centered normals with variances `a`, `b`.
/// The sign of the integrand changes only at `v² = c²`, so the integral is a
/// combination of normal CDFs.
fn inner_abs(p: f64, q: f64, a: f64, b: f64) -> f64 {
    if p == 0.0 || q == 0.0 {
        return p + q;
    }
    // P φ_a(v) > Q φ_b(v)  ⇔  d − k·v² > 0.
    let d = (p / q).ln() - 0.5 * (a / b).ln();
    let k = 0.5 * (1.0 / a - 1.0 / b);
    let central = |c: f64| p * (2.0 * norm_cdf(c / a.sqrt()) - 1.0) - q * (2.0 * norm_cdf(c / b.sqrt()) - 1.0);
    let tails = |c: f64| 2.0 * (p * norm_cdf(-c / a.sqrt()) - q * norm_cdf(-c / b.sqrt()));
    let positive_part = if k > 0.0 {
        if d > 0.0 { central((d / k).sqrt()) } else { 0.0 }
    } else if k < 0.0 {
        if d < 0.0 { tails((d / k).sqrt()) } else { p - q }
    } else if d > 0.0 {
        p - q
    } else {
        0.0
    };
    (2.0 * positive_part - (p - q)).max(0.0)
}

fn l1_with(pair: &GaussianPair, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let (a, b) = (pair.target_eigen(), pair.approx_eigen());
    let (nodes, weights) = rule;
    let half = L1_HALF_WIDTH * a[0].max(b[0]).sqrt();
    // The sign pattern along v changes where d(u) = 0, a quadratic in u;
    // split the outer range there so each panel is smooth.
    let d0 = -0.5 * (a[0] / b[0]).ln() - 0.5 * (a[1] / b[1]).ln();
    let k0 = 0.5 * (1.0 / a[0] - 1.0 / b[0]);
    let mut breaks = vec![-half, half];
    if k0 != 0.0 && d0 / k0 > 0.0 {
        let u = (d0 / k0).sqrt();
        if u < half {
            breaks = vec![-half, -u, u, half];
        }
    }
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (mid, rad) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
        for (t, wt) in nodes.iter().zip(weights) {
            let u = mid + rad * t;
            total += wt * rad * inner_abs(normal_pdf(a[0], u), normal_pdf(b[0], u), a[1], b[1]);
        }
    }
    total.clamp(0.0, 2.0)
}

/// `∫ |p − q|` in the rotated frame: closed form along one axis and
/// panelled Gauss–Legendre along the other, with the difference from a
/// coarser rule as the error estimate.
pub fn l1_distance(pair: &GaussianPair) -> Quadrature {
    let value = l1_with(pair, legendre_rule(L1_NODES));
    let coarse = l1_with(pair, legendre_rule(L1_CHECK_NODES));
    Quadrature {
        value,
        error_estimate: (value - coarse).abs(),
    }
}

/// Contiguous run of grid points attaining the minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TieInterval {
    pub lo: f64,
    pub hi: f64,
    pub mid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoStar {
    pub metric: Metric,
    pub rho0: f64,
    pub sigma0: f64,
    pub sigma_hat: f64,
    /// Midpoint of the first minimizing interval.
    pub rho: f64,
    pub value: f64,
    pub ties: Vec<TieInterval>,
    /// One minimizing interval no wider than a few grid steps.
    pub unique: bool,
}

/// Symmetric correlation grid on `[−limit, limit]` with spacing at most `step`.
pub fn rho_grid(limit: f64, step: f64) -> Result<Vec<f64>> {
    if !(limit > 0.0 && limit <= MAX_ABS_RHO && step > 0.0) {
        return Err(DivergenceError::Invalid(format!("bad grid limit {limit} or step {step}")));
    }
    let n = (2.0 * limit / step).ceil() as usize;
    Ok((0..=n).map(|k| -limit + 2.0 * limit * k as f64 / n as f64).collect())
}

/// Minimizer of `metric` over `grid` at fixed `sigma_hat`. Grid values
/// within a tolerance of the minimum form tie intervals.
pub fn rho_star(metric: Metric, rho0: f64, sigma0: f64, sigma_hat: f64, grid: &[f64]) -> Result<RhoStar> {
    if grid.len() < 2 {
        return Err(DivergenceError::Invalid("grid needs at least two points".into()));
    }
    let mut values = Vec::with_capacity(grid.len());
    let mut quad_err: f64 = 0.0;
    for &r in grid {
        let pair = GaussianPair::new(rho0, sigma0, r, sigma_hat)?;
        values.push(match metric {
            Metric::L1 => {
                let q = l1_distance(&pair);
                quad_err = quad_err.max(q.error_estimate);
                q.value
            }
            m => m.eval(&pair),
        });
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * min.abs().max(1.0) + quad_err;
    let mut ties = Vec::new();
    let mut k = 0;
    while k < grid.len() {
        if values[k] <= min + tol {
            let start = k;
            while k + 1 < grid.len() && values[k + 1] <= min + tol {
                k += 1;
            }
            ties.push(TieInterval {
                lo: grid[start],
                hi: grid[k],
                mid: 0.5 * (grid[start] + grid[k]),
            });
        }
        k += 1;
    }
    let step = grid.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let unique = ties.len() == 1 && ties[0].hi - ties[0].lo <= 4.0 * step;
    Ok(RhoStar {
        metric,
        rho0,
        sigma0,
        sigma_hat,
        rho: ties[0].mid,
        value: min,
        ties,
        unique,
    })
}

/// Loss surface `values[s][r]` over `sigmas × rhos` and the minimizer trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourGrid {
    pub metric: Metric,
    pub rho0: f64,
    pub sigma0: f64,
    pub rhos: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub trace: Vec<RhoStar>,
}

/// Evaluates `metric` on the product grid; the trace is computed on the
/// default fine correlation grid at each `sigma`.
pub fn contour_grid(metric: Metric, rho0: f64, sigma0: f64, rhos: &[f64], sigmas: &[f64]) -> Result<ContourGrid> {
    if rhos.is_empty() || sigmas.is_empty() {
        return Err(DivergenceError::Invalid("empty grid".into()));
    }
    let fine = rho_grid(RHO_LIMIT, RHO_STEP)?;
    let mut values = Vec::with_capacity(sigmas.len());
    let mut trace = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        let row = rhos
            .iter()
            .map(|&r| Ok(metric.eval(&GaussianPair::new(rho0, sigma0, r, s)?)))
            .collect::<Result<Vec<f64>>>()?;
        values.push(row);
        trace.push(rho_star(metric, rho0, sigma0, s, &fine)?);
    }
    Ok(ContourGrid {
        metric,
        rho0,
        sigma0,
        rhos: rhos.to_vec(),
        sigmas: sigmas.to_vec(),
        values,
        trace,
    })
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

impl ContourGrid {
    /// Long-format surface: `metric,rho0,sigma0,sigma,rho,value`.
    pub fn write_surface_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "metric,rho0,sigma0,sigma,rho,value")?;
        for (s, row) in self.sigmas.iter().zip(&self.values) {
            for (r, v) in self.rhos.iter().zip(row) {
                writeln!(w, "{},{},{},{},{},{}", self.metric, self.rho0, self.sigma0, s, r, v)?;
            }
        }
        Ok(())
    }

    /// `metric,rho0,sigma0,sigma,rho_star,value,unique,ties` where `ties`
    /// lists `lo:hi` intervals separated by `;`.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "metric,rho0,sigma0,sigma,rho_star,value,unique,ties")?;
        for t in &self.trace {
            write_rho_star_row(&mut w, t)?;
        }
        Ok(())
    }
}

pub fn write_rho_star_row<W: Write>(w: &mut W, t: &RhoStar) -> Result<()> {
    let ties: Vec<String> = t.ties.iter().map(|i| format!("{}:{}", i.lo, i.hi)).collect();
    writeln!(
        w,
        "{},{},{},{},{},{},{},{}",
        t.metric,
        t.rho0,
        t.sigma0,
        t.sigma_hat,
        t.rho,
        t.value,
        t.unique,
        ties.join(";")
    )?;
    Ok(())
}
