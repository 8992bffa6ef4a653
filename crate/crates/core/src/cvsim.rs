//! Six-compartment lumped-parameter circulation model (left/right ventricle,
//! systemic arteries/veins, pulmonary arteries/veins) with diode valves and
//! time-varying ventricular capacitance, plus the bounded parameter
//! transform, the Gaussian output likelihood and a neural surrogate.

use crate::ndiff::{NdiffError, Tape, Tensor, Var};
use crate::train::{OptimizerKind, OptimizerState, TargetPosterior};
use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// mmHg·s/mL to dyn·s·cm⁻⁵.
pub const MMHG_S_PER_ML_TO_DYN: f64 = 1333.22;
/// Pressures beyond this magnitude abort a simulation.
pub const PRESSURE_LIMIT: f64 = 1e4;
/// Output variances of the measurement model, in output order.
pub const OUTPUT_VARIANCES: [f64; 8] = [444.84, 145.60, 2.21, 45034.41, 475.59, 24.77, 84.06, 15.48];
pub const OUTPUT_NAMES: [&str; 8] = [
    "heart_rate",
    "pulmonary_vascular_resistance",
    "central_venous_pressure",
    "rv_diastolic_pressure",
    "rv_systolic_pressure",
    "rv_end_diastolic_pressure",
    "aov_mean_pg",
    "aov_peak_pg",
];
pub const PRESSURE_NAMES: [&str; 6] = ["p_l", "p_a", "p_v", "p_r", "p_pa", "p_pv"];
pub const FLOW_NAMES: [&str; 6] = ["q_li", "q_lo", "q_ri", "q_ro", "q_a", "q_pv"];

#[derive(Debug, Error)]
pub enum CvsimError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("equilibrium system is singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("simulation unstable at t = {t:.4} s: |{name}| = {value:.3e} mmHg")]
    Unstable { t: f64, name: &'static str, value: f64 },
    #[error("surrogate: {0}")]
    Surrogate(String),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
}

pub type Result<T> = std::result::Result<T, CvsimError>;

/// Model inputs. Resistances in mmHg·s/mL, capacitances in mL/mmHg,
/// volumes in mL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CVSimParams {
    pub r_li: f64,
    pub r_lo: f64,
    pub r_a: f64,
    pub r_v: f64,
    pub r_ro: f64,
    pub r_pv: f64,
    pub c_l_dias: f64,
    pub c_l_sys: f64,
    pub c_r_dias: f64,
    pub c_r_sys: f64,
    pub c_a: f64,
    pub c_v: f64,
    pub c_pa: f64,
    pub c_pv: f64,
    /// Unstressed volumes `[l, a, v, r, pa, pv]`.
    pub v0: [f64; 6],
    pub v_total: f64,
    pub heart_rate: f64,
    pub p_th: f64,
}

impl Default for CVSimParams {
    fn default() -> Self {
        Self {
            r_li: 0.01,
            r_lo: 0.006,
            r_a: 1.0,
            r_v: 0.05,
            r_ro: 0.003,
            r_pv: 0.08,
            c_l_dias: 10.0,
            c_l_sys: 0.4,
            c_r_dias: 20.0,
            c_r_sys: 1.2,
            c_a: 1.6,
            c_v: 100.0,
            c_pa: 4.3,
            c_pv: 8.4,
            v0: [15.0, 715.0, 2500.0, 15.0, 90.0, 490.0],
            v_total: 5000.0,
            heart_rate: 72.0,
            p_th: -4.0,
        }
    }
}

impl CVSimParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("r_li", self.r_li),
            ("r_lo", self.r_lo),
            ("r_a", self.r_a),
            ("r_v", self.r_v),
            ("r_ro", self.r_ro),
            ("r_pv", self.r_pv),
            ("c_l_dias", self.c_l_dias),
            ("c_l_sys", self.c_l_sys),
            ("c_r_dias", self.c_r_dias),
            ("c_r_sys", self.c_r_sys),
            ("c_a", self.c_a),
            ("c_v", self.c_v),
            ("c_pa", self.c_pa),
            ("c_pv", self.c_pv),
            ("heart_rate", self.heart_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CvsimError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.c_l_dias > self.c_l_sys && self.c_r_dias > self.c_r_sys) {
            return Err(CvsimError::InvalidParams(
                "diastolic ventricular capacitance must exceed the systolic value".into(),
            ));
        }
        if !(self.v_total > self.v0.iter().sum::<f64>()) {
            return Err(CvsimError::InvalidParams(
                "total volume must exceed the sum of unstressed volumes".into(),
            ));
        }
        if !self.p_th.is_finite() || self.v0.iter().any(|v| !v.is_finite()) {
            return Err(CvsimError::InvalidParams("non-finite volume or pressure".into()));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        60.0 / self.heart_rate
    }

    pub fn t_sys(&self) -> f64 {
        0.3 * self.period().sqrt()
    }

    /// Left and right ventricular capacitance and their time derivatives at
    /// cycle phase `tau` (seconds since systole onset).
    pub fn ventricular_capacitance(&self, tau: f64) -> ((f64, f64), (f64, f64)) {
        let ts = self.t_sys();
        let shape = |cd: f64, cs: f64| {
            if (0.0..ts).contains(&tau) {
                let w = 2.0 * PI / ts;
                let s = 0.5 * (1.0 - (w * tau).cos());
                (cd + (cs - cd) * s, (cs - cd) * 0.5 * w * (w * tau).sin())
            } else {
                (cd, 0.0)
            }
        };
        (shape(self.c_l_dias, self.c_l_sys), shape(self.c_r_dias, self.c_r_sys))
    }
}

/// Pressures `[P_l, P_a, P_v, P_r, P_pa, P_pv]` in mmHg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CVSimState {
    pub p: [f64; 6],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CVSimOutputs {
    pub heart_rate: f64,
    /// dyn·s·cm⁻⁵.
    pub pulmonary_vascular_resistance: f64,
    pub central_venous_pressure: f64,
    pub rv_diastolic_pressure: f64,
    pub rv_systolic_pressure: f64,
    pub rv_end_diastolic_pressure: f64,
    pub aov_mean_pg: f64,
    pub aov_peak_pg: f64,
}

impl CVSimOutputs {
    pub fn to_array(&self) -> [f64; 8] {
        [
            self.heart_rate,
            self.pulmonary_vascular_resistance,
            self.central_venous_pressure,
            self.rv_diastolic_pressure,
            self.rv_systolic_pressure,
            self.rv_end_diastolic_pressure,
            self.aov_mean_pg,
            self.aov_peak_pg,
        ]
    }
}

/// `[q_li, q_lo, q_ri, q_ro, q_a, q_pv]` in mL/s.
pub fn valve_flows(state: &CVSimState, params: &CVSimParams) -> [f64; 6] {
    let [pl, pa, pv, pr, ppa, ppv] = state.p;
    let diode = |up: f64, down: f64, r: f64| if up > down { (up - down) / r } else { 0.0 };
    [
        diode(ppv, pl, params.r_li),
        diode(pl, pa, params.r_lo),
        diode(pv, pr, params.r_v),
        diode(pr, ppa, params.r_ro),
        (pa - pv) / params.r_a,
        (ppa - ppv) / params.r_pv,
    ]
}

/// Pressure derivatives at cycle phase `tau`.
pub fn rhs(state: &CVSimState, params: &CVSimParams, tau: f64) -> [f64; 6] {
    let [pl, _, _, pr, _, _] = state.p;
    let [q_li, q_lo, q_ri, q_ro, q_a, q_pv] = valve_flows(state, params);
    let ((cl, dcl), (cr, dcr)) = params.ventricular_capacitance(tau);
    let pth = params.p_th;
    [
        (q_li - q_lo - (pl - pth) * dcl) / cl,
        (q_lo - q_a) / params.c_a,
        (q_a - q_ri) / params.c_v,
        (q_ri - q_ro - (pr - pth) * dcr) / cr,
        (q_ro - q_pv) / params.c_pa,
        (q_pv - q_li) / params.c_pv,
    ]
}

/// Blood volume stored above the unstressed volumes.
pub fn stressed_volume(state: &CVSimState, params: &CVSimParams, tau: f64) -> f64 {
    let [pl, pa, pv, pr, ppa, ppv] = state.p;
    let ((cl, _), (cr, _)) = params.ventricular_capacitance(tau);
    let pth = params.p_th;
    cl * (pl - pth)
        + params.c_a * (pa - pth / 3.0)
        + params.c_v * pv
        + cr * (pr - pth)
        + params.c_pa * (ppa - pth)
        + params.c_pv * (ppv - pth)
}

/// Solution of the equilibrium system: diastolic and systolic ventricular
/// pressures, the four vascular pressures and the stroke volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub p_l_dias: f64,
    pub p_l_sys: f64,
    pub p_a: f64,
    pub p_v: f64,
    pub p_r_dias: f64,
    pub p_r_sys: f64,
    pub p_pa: f64,
    pub p_pv: f64,
    pub stroke_volume: f64,
    /// ℓ∞ residual of the assembled system at the solution.
    pub residual: f64,
}

impl Equilibrium {
    /// Initial state at systole onset.
    pub fn state(&self) -> CVSimState {
        CVSimState {
            p: [self.p_l_dias, self.p_a, self.p_v, self.p_r_dias, self.p_pa, self.p_pv],
        }
    }
}

type Mat9 = SMatrix<f64, 9, 9>;
type Vec9 = SVector<f64, 9>;

fn equilibrium_system(p: &CVSimParams) -> (Mat9, Vec9) {
    // Unknowns: [P_l,d, P_l,s, P_a, P_v, P_r,d, P_r,s, P_pa, P_pv, SV].
    let t_tot = p.period();
    let t_sys = p.t_sys();
    let t_dias = t_tot - t_sys;
    let pth = p.p_th;
    let mut a = Mat9::zeros();
    let mut b = Vec9::zeros();
    let sv = 8;
    a[(0, 0)] = p.c_l_dias;
    a[(0, 1)] = -p.c_l_sys;
    b[0] = pth * (p.c_l_dias - p.c_l_sys);
    a[(1, 4)] = p.c_r_dias;
    a[(1, 5)] = -p.c_r_sys;
    b[1] = pth * (p.c_r_dias - p.c_r_sys);
    // Cycle-averaged flows through each resistor equal the stroke volume.
    let links = [
        (t_sys / p.r_lo, 1, 2),
        (t_tot / p.r_a, 2, 3),
        (t_dias / p.r_v, 3, 4),
        (t_sys / p.r_ro, 5, 6),
        (t_tot / p.r_pv, 6, 7),
        (t_dias / p.r_li, 7, 0),
    ];
    for (row, &(g, up, down)) in links.iter().enumerate() {
        a[(row + 2, up)] = g;
        a[(row + 2, down)] = -g;
    }
    for row in 0..8 {
        a[(row, sv)] = -1.0;
    }
    a[(8, 0)] = p.c_l_dias;
    a[(8, 2)] = p.c_a;
    a[(8, 3)] = p.c_v;
    a[(8, 4)] = p.c_r_dias;
    a[(8, 6)] = p.c_pa;
    a[(8, 7)] = p.c_pv;
    b[8] = p.v_total - p.v0.iter().sum::<f64>()
        + pth * (p.c_l_dias + p.c_a / 3.0 + p.c_r_dias + p.c_pa + p.c_pv);
    (a, b)
}

fn solve_checked(a: &Mat9, b: &Vec9) -> Result<(Vec9, f64)> {
    let sv = a.singular_values();
    let condition = sv.max() / sv.min();
    match a.lu().solve(b) {
        Some(x) if condition.is_finite() && condition < 1e14 => {
            let residual = (a * x - b).amax();
            Ok((x, residual))
        }
        _ => Err(CvsimError::Singular { condition }),
    }
}

pub fn equilibrium_init(params: &CVSimParams) -> Result<Equilibrium> {
    params.validate()?;
    let (a, b) = equilibrium_system(params);
    let (x, residual) = solve_checked(&a, &b)?;
    Ok(Equilibrium {
        p_l_dias: x[0],
        p_l_sys: x[1],
        p_a: x[2],
        p_v: x[3],
        p_r_dias: x[4],
        p_r_sys: x[5],
        p_pa: x[6],
        p_pv: x[7],
        stroke_volume: x[8],
        residual,
    })
}

/// Per-step record of pressures, flows and ventricular volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub t: Vec<f64>,
    pub pressures: Vec<[f64; 6]>,
    pub flows: Vec<[f64; 6]>,
    /// Left and right ventricular volumes.
    pub volumes: Vec<[f64; 2]>,
}

impl History {
    pub fn header() -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend(PRESSURE_NAMES.iter().map(|s| s.to_string()));
        h.extend(FLOW_NAMES.iter().map(|s| s.to_string()));
        h.extend(["v_lv".to_string(), "v_rv".to_string()]);
        h
    }

    /// Rows `[t, six pressures, six flows, two volumes]`.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.t.len() * 15);
        for i in 0..self.t.len() {
            data.push(self.t[i]);
            data.extend_from_slice(&self.pressures[i]);
            data.extend_from_slice(&self.flows[i]);
            data.extend_from_slice(&self.volumes[i]);
        }
        Tensor::new(vec![self.t.len(), 15], data).expect("non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub equilibrium: Equilibrium,
    pub history: History,
    pub outputs: CVSimOutputs,
    /// Steps per cycle; the step is `period / steps_per_cycle`.
    pub steps_per_cycle: usize,
    /// Largest pointwise difference between the final two cycles, relative
    /// to each compartment's peak magnitude.
    pub periodic_error: f64,
    /// Relative stressed-volume change over each cycle.
    pub volume_drift: Vec<f64>,
}

/// Integrates `n_cycles` beats with RK4 from the equilibrium state. The step
/// is the largest value not exceeding `dt` that divides the period evenly.
pub fn simulate(params: &CVSimParams, n_cycles: usize, dt: f64) -> Result<Simulation> {
    if n_cycles < 2 {
        return Err(CvsimError::InvalidParams("at least two cycles are needed".into()));
    }
    if !(dt > 0.0) {
        return Err(CvsimError::InvalidParams(format!("step must be positive, got {dt}")));
    }
    let eq = equilibrium_init(params)?;
    let period = params.period();
    let n = (period / dt).ceil() as usize;
    let h = period / n as f64;
    let total = n * n_cycles;
    let mut hist = History {
        t: Vec::with_capacity(total + 1),
        pressures: Vec::with_capacity(total + 1),
        flows: Vec::with_capacity(total + 1),
        volumes: Vec::with_capacity(total + 1),
    };
    let record = |hist: &mut History, step: usize, s: &CVSimState| {
        let tau = (step % n) as f64 * h;
        let ((cl, _), (cr, _)) = params.ventricular_capacitance(tau);
        hist.t.push(step as f64 * h);
        hist.pressures.push(s.p);
        hist.flows.push(valve_flows(s, params));
        hist.volumes.push([
            params.v0[0] + cl * (s.p[0] - params.p_th),
            params.v0[3] + cr * (s.p[3] - params.p_th),
        ]);
    };
    let mut s = eq.state();
    record(&mut hist, 0, &s);
    let mut volume_drift = Vec::with_capacity(n_cycles);
    let mut v_start = stressed_volume(&s, params, 0.0);
    for step in 0..total {
        let tau = (step % n) as f64 * h;
        let shifted = |base: &CVSimState, k: &[f64; 6], f: f64| CVSimState {
            p: std::array::from_fn(|i| base.p[i] + f * k[i]),
        };
        let k1 = rhs(&s, params, tau);
        let k2 = rhs(&shifted(&s, &k1, 0.5 * h), params, tau + 0.5 * h);
        let k3 = rhs(&shifted(&s, &k2, 0.5 * h), params, tau + 0.5 * h);
        let k4 = rhs(&shifted(&s, &k3, h), params, tau + h);
        for i in 0..6 {
            s.p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if let Some(i) = (0..6).find(|&i| !(s.p[i].abs() <= PRESSURE_LIMIT)) {
            return Err(CvsimError::Unstable {
                t: (step + 1) as f64 * h,
                name: PRESSURE_NAMES[i],
                value: s.p[i],
            });
        }
        record(&mut hist, step + 1, &s);
        if (step + 1) % n == 0 {
            let v_end = stressed_volume(&s, params, 0.0);
            volume_drift.push((v_end - v_start).abs() / v_start.abs());
            v_start = v_end;
        }
    }
    let periodic_error = periodic_error(&hist, n);
    let outputs = extract_outputs(&hist, params, n, h);
    Ok(Simulation {
        equilibrium: eq,
        history: hist,
        outputs,
        steps_per_cycle: n,
        periodic_error,
        volume_drift,
    })
}

fn periodic_error(hist: &History, n: usize) -> f64 {
    let end = hist.t.len() - 1;
    let (last, prev) = (end - n, end - 2 * n);
    (0..6)
        .map(|i| {
            let scale = (last..=end).map(|k| hist.pressures[k][i].abs()).fold(0.0, f64::max);
            let diff = (0..=n)
                .map(|k| (hist.pressures[last + k][i] - hist.pressures[prev + k][i]).abs())
                .fold(0.0, f64::max);
            diff / scale.max(1e-12)
        })
        .fold(0.0, f64::max)
}

fn extract_outputs(hist: &History, params: &CVSimParams, n: usize, h: f64) -> CVSimOutputs {
    let start = hist.t.len() - 1 - n;
    let cycle = start..start + n;
    let mean = |f: &dyn Fn(usize) -> f64| cycle.clone().map(f).sum::<f64>() / n as f64;
    let p_pa = mean(&|k| hist.pressures[k][4]);
    let p_pv = mean(&|k| hist.pressures[k][5]);
    let cardiac_output = mean(&|k| hist.flows[k][1]);
    let p_v = mean(&|k| hist.pressures[k][2]);
    let rv = cycle.clone().map(|k| hist.pressures[k][3]);
    let rv_min = rv.clone().fold(f64::INFINITY, f64::min);
    let rv_max = rv.fold(f64::NEG_INFINITY, f64::max);

    // Aortic-valve gradient over the ejection interval, with crossing times
    // located by linear interpolation.
    let grad = |k: usize| hist.pressures[k][0] - hist.pressures[k][1];
    let (mut area, mut duration, mut peak) = (0.0, 0.0, 0.0f64);
    for k in start..start + n {
        let (g0, g1) = (grad(k), grad(k + 1));
        peak = peak.max(g0).max(g1);
        match (g0 > 0.0, g1 > 0.0) {
            (true, true) => {
                area += 0.5 * (g0 + g1) * h;
                duration += h;
            }
            (true, false) | (false, true) => {
                let pos = g0.max(g1);
                let frac = pos / (g0 - g1).abs();
                area += 0.5 * pos * frac * h;
                duration += frac * h;
            }
            (false, false) => {}
        }
    }
    CVSimOutputs {
        heart_rate: 60.0 / params.period(),
        pulmonary_vascular_resistance: (p_pa - p_pv) / cardiac_output * MMHG_S_PER_ML_TO_DYN,
        central_venous_pressure: p_v,
        rv_diastolic_pressure: rv_min,
        rv_systolic_pressure: rv_max,
        rv_end_diastolic_pressure: hist.pressures[start][3],
        aov_mean_pg: if duration > 0.0 { area / duration } else { 0.0 },
        aov_peak_pg: peak,
    }
}

/// Bounds on `(R_ro, C_a)` used by the `tanh` reparameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub r_lo: f64,
    pub r_hi: f64,
    pub c_lo: f64,
    pub c_hi: f64,
}

impl ParamBounds {
    /// `[lo·x0, hi·x0]` around the given defaults.
    pub fn around(r0: f64, c0: f64, lo: f64, hi: f64) -> Self {
        Self {
            r_lo: lo * r0,
            r_hi: hi * r0,
            c_lo: lo * c0,
            c_hi: hi * c0,
        }
    }

    /// `[0.1×, 1.9×]` the defaults of `params`.
    pub fn default_for(params: &CVSimParams) -> Self {
        Self::around(params.r_ro, params.c_a, 0.1, 1.9)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_lo < self.r_hi && self.c_lo < self.c_hi) {
            return Err(CvsimError::InvalidParams("bounds need lower < upper".into()));
        }
        Ok(())
    }

    fn centers(&self) -> [f64; 2] {
        [0.5 * (self.r_lo + self.r_hi), 0.5 * (self.c_lo + self.c_hi)]
    }

    fn halves(&self) -> [f64; 2] {
        [0.5 * (self.r_hi - self.r_lo), 0.5 * (self.c_hi - self.c_lo)]
    }

    /// Maps `u ∈ [0,1]²` onto the rectangle.
    pub fn from_unit(&self, u: [f64; 2]) -> [f64; 2] {
        [
            self.r_lo + u[0] * (self.r_hi - self.r_lo),
            self.c_lo + u[1] * (self.c_hi - self.c_lo),
        ]
    }
}

/// `x = tanh(3/7·x′)·(H − L)/2 + x0` for both parameters.
pub fn transform_params(rp: f64, cp: f64, bounds: &ParamBounds, defaults: (f64, f64)) -> (f64, f64) {
    let [hr, hc] = bounds.halves();
    (
        (3.0 / 7.0 * rp).tanh() * hr + defaults.0,
        (3.0 / 7.0 * cp).tanh() * hc + defaults.1,
    )
}

/// Anything mapping `(R_ro, C_a)` to the eight outputs.
pub trait OutputModel {
    fn outputs(&self, r_ro: f64, c_a: f64) -> Result<[f64; 8]>;
}

/// The full simulator with all parameters but `(R_ro, C_a)` held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Simulator {
    pub base: CVSimParams,
    pub cycles: usize,
    pub dt: f64,
}

impl Default for Simulator {
    fn default() -> Self {
        Self {
            base: CVSimParams::default(),
            cycles: 10,
            dt: 1e-3,
        }
    }
}

impl OutputModel for Simulator {
    fn outputs(&self, r_ro: f64, c_a: f64) -> Result<[f64; 8]> {
        let p = CVSimParams {
            r_ro,
            c_a,
            ..self.base
        };
        Ok(simulate(&p, self.cycles, self.dt)?.outputs.to_array())
    }
}

/// Gaussian log-likelihood of output rows `data: [n, 8]`, independent across
/// outputs with the fixed variances. Model failures give `−∞`.
pub fn log_likelihood(r_ro: f64, c_a: f64, data: &Tensor, model: &dyn OutputModel) -> f64 {
    let f = match model.outputs(r_ro, c_a) {
        Ok(f) => f,
        Err(e) => {
            log::debug!("output model failed at ({r_ro}, {c_a}): {e}");
            return f64::NEG_INFINITY;
        }
    };
    let norm: f64 = OUTPUT_VARIANCES.iter().map(|v| (2.0 * PI * v).ln()).sum();
    let mut quad = 0.0;
    for i in 0..data.rows() {
        for (o, x) in data.row(i).iter().enumerate() {
            quad += (x - f[o]).powi(2) / OUTPUT_VARIANCES[o];
        }
    }
    -0.5 * quad - 0.5 * norm * data.rows() as f64
}

/// Points of a Sobol sequence in Gray-code order (index 0 is the origin),
/// with Joe–Kuo direction numbers for up to five dimensions.
#[derive(Debug, Clone)]
pub struct Sobol {
    directions: Vec<[u32; 32]>,
}

impl Sobol {
    pub fn new(dim: usize) -> Result<Self> {
        // (s, a, m_1..m_s) for dimensions 2..=5.
        const TABLE: [(usize, u32, &[u32]); 4] =
            [(1, 0, &[1]), (2, 1, &[1, 3]), (3, 1, &[1, 3, 1]), (3, 2, &[1, 1, 1])];
        if dim == 0 || dim > TABLE.len() + 1 {
            return Err(CvsimError::InvalidParams(format!(
                "Sobol dimension must be in 1..={}",
                TABLE.len() + 1
            )));
        }
        let mut directions = vec![std::array::from_fn(|k| 1u32 << (31 - k))];
        for &(s, a, m) in TABLE.iter().take(dim - 1) {
            let mut v = [0u32; 32];
            for k in 0..32 {
                v[k] = if k < s {
                    m[k] << (31 - k)
                } else {
                    let mut x = v[k - s] ^ (v[k - s] >> s);
                    for j in 1..s {
                        if (a >> (s - 1 - j)) & 1 == 1 {
                            x ^= v[k - j];
                        }
                    }
                    x
                };
            }
            directions.push(v);
        }
        Ok(Self { directions })
    }

    pub fn point(&self, index: u32) -> Vec<f64> {
        let gray = index ^ (index >> 1);
        self.directions
            .iter()
            .map(|v| {
                let x = (0..32).filter(|&k| (gray >> k) & 1 == 1).fold(0u32, |acc, k| acc ^ v[k]);
                x as f64 / 4294967296.0
            })
            .collect()
    }
}

/// Fully connected `tanh` network from normalized `(R_ro, C_a)` to the
/// standardized outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    /// Layer widths including input and output.
    pub widths: Vec<usize>,
    /// Per layer: row-major `[in, out]` weights followed by `out` biases.
    pub params: Vec<f64>,
    pub bounds: ParamBounds,
    pub out_mean: [f64; 8],
    pub out_sd: [f64; 8],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub n_samples: usize,
    pub n_held_out: usize,
    pub hidden: Vec<usize>,
    pub iterations: usize,
    pub lr: f64,
    pub decay: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            n_held_out: 50,
            hidden: vec![64, 32],
            iterations: 120_000,
            lr: 0.01,
            decay: 0.9999,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub loss_trace: Vec<f64>,
    /// Sobol indices whose simulation failed.
    pub excluded: Vec<u32>,
    /// Held-out RMSE divided by the RMS of the true output, per output.
    pub held_out_relative_rmse: Vec<f64>,
}

impl Surrogate {
    fn layer_offsets(widths: &[usize]) -> Vec<(usize, usize, usize)> {
        let mut off = 0;
        widths
            .windows(2)
            .map(|w| {
                let o = off;
                off += w[0] * w[1] + w[1];
                (o, w[0], w[1])
            })
            .collect()
    }

    pub fn num_params(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn init(widths: Vec<usize>, bounds: ParamBounds, rng: &mut ChaCha20Rng) -> Self {
        let mut params = Vec::with_capacity(Self::num_params(&widths));
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1] + w[1]).map(|_| rng.random_range(-bound..bound)));
        }
        Self {
            widths,
            params,
            bounds,
            out_mean: [0.0; 8],
            out_sd: [1.0; 8],
        }
    }

    /// Network input for physical `(R_ro, C_a)`.
    pub fn normalize(&self, r_ro: f64, c_a: f64) -> [f64; 2] {
        let (c, h) = (self.bounds.centers(), self.bounds.halves());
        [(r_ro - c[0]) / h[0], (c_a - c[1]) / h[1]]
    }

    /// Physical outputs for normalized inputs `u: [m, 2]`, recorded on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, u: Var, params: &[Var]) -> std::result::Result<Var, NdiffError> {
        let layers = Self::layer_offsets(&self.widths);
        let mut h = u;
        for (l, _) in layers.iter().enumerate() {
            h = tape.matmul(h, params[2 * l])?;
            h = tape.add_row(h, params[2 * l + 1])?;
            if l + 1 < layers.len() {
                h = tape.tanh(h);
            }
        }
        let sd = tape.constant(Tensor::vector(self.out_sd.to_vec()));
        let mean = tape.constant(Tensor::vector(self.out_mean.to_vec()));
        let h = tape.mul_row(h, sd)?;
        tape.add_row(h, mean)
    }

    /// Binds the parameters as tape leaves: weights `[in, out]` and biases.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        let mut vars = Vec::new();
        for (off, i, o) in Self::layer_offsets(&self.widths) {
            let w = Tensor::new(vec![i, o], self.params[off..off + i * o].to_vec()).expect("non-empty");
            let b = Tensor::vector(self.params[off + i * o..off + i * o + o].to_vec());
            for t in [w, b] {
                vars.push(if trainable { tape.var(t) } else { tape.constant(t) });
            }
        }
        vars
    }

    pub fn predict_normalized(&self, u: [f64; 2]) -> [f64; 8] {
        let mut h = u.to_vec();
        let layers = Self::layer_offsets(&self.widths);
        for (l, &(off, i, o)) in layers.iter().enumerate() {
            let mut next = self.params[off + i * o..off + i * o + o].to_vec();
            for (a, x) in h.iter().enumerate() {
                for (b, y) in next.iter_mut().enumerate() {
                    *y += x * self.params[off + a * o + b];
                }
            }
            if l + 1 < layers.len() {
                next.iter_mut().for_each(|y| *y = y.tanh());
            }
            h = next;
        }
        std::array::from_fn(|k| h[k] * self.out_sd[k] + self.out_mean[k])
    }
}

impl OutputModel for Surrogate {
    fn outputs(&self, r_ro: f64, c_a: f64) -> Result<[f64; 8]> {
        Ok(self.predict_normalized(self.normalize(r_ro, c_a)))
    }
}

/// Evaluates `model` at Sobol points `start..start + n` of the bounds
/// rectangle; failed points are skipped and their indices returned.
pub fn sobol_design(
    model: &dyn OutputModel,
    bounds: &ParamBounds,
    start: u32,
    n: usize,
) -> Result<(Vec<[f64; 2]>, Vec<[f64; 8]>, Vec<u32>)> {
    let sobol = Sobol::new(2)?;
    let (mut x, mut y, mut failed) = (Vec::new(), Vec::new(), Vec::new());
    for idx in start..start + n as u32 {
        let p = sobol.point(idx);
        let [r, c] = bounds.from_unit([p[0], p[1]]);
        match model.outputs(r, c) {
            Ok(out) => {
                x.push([r, c]);
                y.push(out);
            }
            Err(e) => {
                log::warn!("excluding Sobol point {idx} ({r}, {c}): {e}");
                failed.push(idx);
            }
        }
    }
    Ok((x, y, failed))
}

/// Per-output RMSE of `surrogate` against `(x, y)`, relative to the RMS of `y`.
pub fn relative_rmse(surrogate: &dyn OutputModel, x: &[[f64; 2]], y: &[[f64; 8]]) -> Result<Vec<f64>> {
    let mut se = [0.0; 8];
    let mut ss = [0.0; 8];
    for (xi, yi) in x.iter().zip(y) {
        let p = surrogate.outputs(xi[0], xi[1])?;
        for k in 0..8 {
            se[k] += (p[k] - yi[k]).powi(2);
            ss[k] += yi[k].powi(2);
        }
    }
    Ok((0..8).map(|k| (se[k] / ss[k].max(1e-300)).sqrt()).collect())
}

/// Fits the surrogate on Sobol samples of `model` over `bounds`, by full
/// batch RMSprop on mean squared standardized error plus an ℓ2 penalty.
pub fn train_surrogate(
    model: &dyn OutputModel,
    bounds: &ParamBounds,
    cfg: &SurrogateConfig,
) -> Result<(Surrogate, SurrogateReport)> {
    bounds.validate()?;
    if cfg.n_samples < 2 || cfg.hidden.contains(&0) {
        return Err(CvsimError::Surrogate("need at least two samples and non-empty layers".into()));
    }
    let (x, y, mut excluded) = sobol_design(model, bounds, 0, cfg.n_samples)?;
    if x.len() < 2 {
        return Err(CvsimError::Surrogate("fewer than two successful simulations".into()));
    }
    let mut widths = vec![2];
    widths.extend(&cfg.hidden);
    widths.push(8);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut sur = Surrogate::init(widths, *bounds, &mut rng);
    let n = x.len();
    for k in 0..8 {
        let mean = y.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        let sd = (y.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        sur.out_mean[k] = mean;
        sur.out_sd[k] = if sd > 1e-9 * mean.abs().max(1.0) { sd } else { 1.0 };
    }
    let inputs: Vec<f64> = x.iter().flat_map(|p| sur.normalize(p[0], p[1])).collect();
    let inputs = Tensor::new(vec![n, 2], inputs).expect("non-empty");
    let targets: Vec<f64> = y
        .iter()
        .flat_map(|r| (0..8).map(move |k| (r[k] - sur.out_mean[k]) / sur.out_sd[k]).collect::<Vec<_>>())
        .collect();
    let targets = Tensor::new(vec![n, 8], targets).expect("non-empty");

    let mut opt = OptimizerState::new(OptimizerKind::Rmsprop, sur.params.len());
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut tape = Tape::new();
    for t in 0..cfg.iterations {
        tape.truncate(0);
        let params = sur.bind(&mut tape, true);
        let u = tape.constant(inputs.clone());
        let tgt = tape.constant(targets.clone());
        // Standardized output: forward without the output affine map.
        let mut h = u;
        let depth = params.len() / 2;
        for l in 0..depth {
            h = tape.matmul(h, params[2 * l])?;
            h = tape.add_row(h, params[2 * l + 1])?;
            if l + 1 < depth {
                h = tape.tanh(h);
            }
        }
        let err = tape.sub(h, tgt)?;
        let sq = tape.square(err);
        let mse = tape.mean(sq);
        let mut grads = tape.gradient(mse, &params)?;
        let penalty: f64 = sur.params.iter().map(|p| p * p).sum::<f64>() * cfg.l2;
        for (g, p) in grads.iter_mut().zip(&sur.params) {
            *g += 2.0 * cfg.l2 * p;
        }
        let loss = tape.item(mse) + penalty;
        if !loss.is_finite() {
            return Err(CvsimError::Surrogate(format!("non-finite loss at iteration {t}")));
        }
        trace.push(loss);
        opt.step(&mut sur.params, &grads, cfg.lr * cfg.decay.powi(t as i32));
    }
    let start = cfg.n_samples as u32;
    let (hx, hy, failed) = sobol_design(model, bounds, start, cfg.n_held_out)?;
    excluded.extend(failed);
    let held_out_relative_rmse = if hx.is_empty() {
        Vec::new()
    } else {
        relative_rmse(&sur, &hx, &hy)?
    };
    Ok((
        sur,
        SurrogateReport {
            loss_trace: trace,
            excluded,
            held_out_relative_rmse,
        },
    ))
}

/// Posterior of the transformed parameters `(R′, C′)` given output rows,
/// with the surrogate standing in for the simulator. The prior is flat on
/// `[−7, 7]²` with a quadratic wall outside.
#[derive(Debug, Clone)]
pub struct SurrogateTarget<'a> {
    pub surrogate: &'a Surrogate,
    pub bounds: ParamBounds,
    pub defaults: (f64, f64),
    pub wall: f64,
}

impl<'a> SurrogateTarget<'a> {
    pub fn new(surrogate: &'a Surrogate, bounds: ParamBounds, defaults: (f64, f64)) -> Self {
        Self {
            surrogate,
            bounds,
            defaults,
            wall: 100.0,
        }
    }

    /// Maps samples of `(R′, C′)` to `(R_ro, C_a)`.
    pub fn to_physical(&self, z: &Tensor) -> Tensor {
        let mut out = z.clone();
        for row in out.data_mut().chunks_mut(2) {
            let (r, c) = transform_params(row[0], row[1], &self.bounds, self.defaults);
            row[0] = r;
            row[1] = c;
        }
        out
    }
}

impl TargetPosterior for SurrogateTarget<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn log_likelihood(&self, tape: &mut Tape, rows: &Tensor, z: Var) -> std::result::Result<Var, NdiffError> {
        let m = tape.shape(z)[0];
        let b = rows.rows();
        let halves = self.bounds.halves();
        let centers = self.surrogate.bounds.centers();
        let in_halves = self.surrogate.bounds.halves();
        let defaults = [self.defaults.0, self.defaults.1];
        let t = tape.scale(z, 3.0 / 7.0);
        let t = tape.tanh(t);
        let ratio = tape.constant(Tensor::vector((0..2).map(|j| halves[j] / in_halves[j]).collect()));
        let offset = tape.constant(Tensor::vector(
            (0..2).map(|j| (defaults[j] - centers[j]) / in_halves[j]).collect(),
        ));
        let u = tape.mul_row(t, ratio)?;
        let u = tape.add_row(u, offset)?;
        let params = self.surrogate.bind(tape, false);
        let f = self.surrogate.forward_on_tape(tape, u, &params)?;

        let mut s1 = [0.0; 8];
        let mut quad_const = 0.0;
        for i in 0..b {
            for (k, x) in rows.row(i).iter().enumerate() {
                s1[k] += x;
                quad_const += x * x / OUTPUT_VARIANCES[k];
            }
        }
        let inv_b = tape.constant(Tensor::new(vec![8, 1], OUTPUT_VARIANCES.iter().map(|v| b as f64 / v).collect()).expect("non-empty"));
        let lin_w = tape.constant(
            Tensor::new(vec![8, 1], (0..8).map(|k| -2.0 * s1[k] / OUTPUT_VARIANCES[k]).collect()).expect("non-empty"),
        );
        let sq = tape.square(f);
        let q = tape.matmul(sq, inv_b)?;
        let l = tape.matmul(f, lin_w)?;
        let s = tape.add(q, l)?;
        let s = tape.reshape(s, &[m])?;
        let s = tape.scale(s, -0.5);
        let norm: f64 = OUTPUT_VARIANCES.iter().map(|v| (2.0 * PI * v).ln()).sum();
        Ok(tape.add_scalar(s, -0.5 * quad_const - 0.5 * norm * b as f64))
    }

    fn log_prior(&self, tape: &mut Tape, z: Var) -> std::result::Result<Option<Var>, NdiffError> {
        let hi = tape.add_scalar(z, -7.0);
        let hi = tape.relu(hi);
        let nz = tape.neg(z);
        let lo = tape.add_scalar(nz, -7.0);
        let lo = tape.relu(lo);
        let hi = tape.square(hi);
        let lo = tape.square(lo);
        let both = tape.add(hi, lo)?;
        let per = tape.sum_cols(both)?;
        Ok(Some(tape.scale(per, -self.wall)))
    }
}
