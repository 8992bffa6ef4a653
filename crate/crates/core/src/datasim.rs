//! Data generation and tabular post-processing: the nonlinear
//! repeated-measures simulator and its exact marginal likelihood, the
//! pulmonary-hypertension labeler, bound truncation for synthetic records,
//! and CSV ingestion with z-score standardization.

use crate::ndiff::{NdiffError, Tape, Tensor, Var};
use crate::privacy::fill_standard_normal;
use crate::train::TargetPosterior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasimError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(
        "missing value in column '{column}' at data row {row}; impute missing values upstream \
         (for example with multiple imputation) and load complete cases only"
    )]
    MissingValue { column: String, row: usize },
    #[error("non-numeric value '{value}' in column '{column}' at data row {row}")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },
    #[error("column '{0}' is constant; it cannot be standardized")]
    ConstantColumn(String),
    #[error("column '{0}' is not in the schema")]
    UnknownColumn(String),
    #[error("schema column '{0}' is missing from the table")]
    MissingColumn(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DatasimError>;

/// Settings of the nonlinear repeated-measures simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub beta: [f64; 5],
    pub sigma0: f64,
    pub sigma: f64,
    pub n: usize,
    pub k: usize,
    /// Covariate `w_j` is uniform on `[0, a_j]`.
    pub a: [f64; 4],
    pub seed: u64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            beta: [0.2, 1.0, 0.8, -1.2, 0.6],
            sigma0: 0.2,
            sigma: 0.2,
            n: 6000,
            k: 5,
            a: [1.0, 3.0, 0.5, 2.0],
            seed: 0,
        }
    }
}

impl RegressionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(DatasimError::Invalid("n and k must be at least 1".into()));
        }
        if !(self.sigma0 >= 0.0 && self.sigma >= 0.0) {
            return Err(DatasimError::Invalid("standard deviations must be non-negative".into()));
        }
        if self.a.iter().any(|&a| !(a > 0.0)) {
            return Err(DatasimError::Invalid("covariate bounds must be positive".into()));
        }
        Ok(())
    }
}

/// Simulated covariates `w: [n, 4]` and outcomes `x: [n, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    pub w: Tensor,
    pub x: Tensor,
}

impl RegressionData {
    /// Records `[w1..w4, x1..xk]`, the layout used by [`RegressionTarget`].
    pub fn rows(&self) -> Tensor {
        let (n, k) = (self.x.rows(), self.x.cols());
        let mut data = Vec::with_capacity(n * (4 + k));
        for i in 0..n {
            data.extend_from_slice(self.w.row(i));
            data.extend_from_slice(self.x.row(i));
        }
        Tensor::new(vec![n, 4 + k], data).expect("non-empty")
    }

    pub fn from_rows(rows: &Tensor) -> Result<Self> {
        let c = rows.cols();
        if rows.shape().len() != 2 || c < 5 {
            return Err(DatasimError::Invalid(format!(
                "regression records need at least 5 columns, got shape {:?}",
                rows.shape()
            )));
        }
        let n = rows.rows();
        let mut w = Vec::with_capacity(n * 4);
        let mut x = Vec::with_capacity(n * (c - 4));
        for i in 0..n {
            w.extend_from_slice(&rows.row(i)[..4]);
            x.extend_from_slice(&rows.row(i)[4..]);
        }
        Ok(Self {
            w: Tensor::new(vec![n, 4], w).expect("non-empty"),
            x: Tensor::new(vec![n, c - 4], x).expect("non-empty"),
        })
    }
}

/// `β0 + e^{β1 w1} + ln(w2 + e^{β2}) + e^{β3 w3} + ln(w4 + e^{β4})`.
pub fn regression_mean(w: &[f64], beta: &[f64]) -> f64 {
    beta[0]
        + (beta[1] * w[0]).exp()
        + (w[1] + beta[2].exp()).ln()
        + (beta[3] * w[2]).exp()
        + (w[3] + beta[4].exp()).ln()
}

pub fn simulate_regression(spec: &RegressionSpec) -> Result<RegressionData> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let (n, k) = (spec.n, spec.k);
    let mut w = Vec::with_capacity(n * 4);
    let mut x = Vec::with_capacity(n * k);
    let mut noise = vec![0.0; k + 1];
    for _ in 0..n {
        let wi: Vec<f64> = spec.a.iter().map(|&a| rng.random::<f64>() * a).collect();
        let f = regression_mean(&wi, &spec.beta);
        fill_standard_normal(&mut rng, &mut noise);
        let r = spec.sigma0 * noise[0];
        x.extend(noise[1..].iter().map(|e| f + r + spec.sigma * e));
        w.extend(wi);
    }
    Ok(RegressionData {
        w: Tensor::new(vec![n, 4], w).expect("non-empty"),
        x: Tensor::new(vec![n, k], x).expect("non-empty"),
    })
}

/// Coefficients of the per-subject marginal log-likelihood as a quadratic
/// in the mean `f`: `ll = −½(A f² + B f + C) + D`.
#[derive(Debug, Clone, Copy)]
struct Quadratic {
    a: f64,
    d: f64,
    c_shrink: f64,
    s2: f64,
}

impl Quadratic {
    fn new(k: usize, sigma0: f64, sigma: f64) -> Self {
        let kf = k as f64;
        let s2 = sigma * sigma;
        let t2 = sigma0 * sigma0;
        let c = t2 / (s2 + kf * t2);
        let logdet = (kf - 1.0) * s2.ln() + (s2 + kf * t2).ln();
        Self {
            a: (kf - c * kf * kf) / s2,
            d: -0.5 * (logdet + kf * (2.0 * std::f64::consts::PI).ln()),
            c_shrink: c,
            s2,
        }
    }

    /// `(B, C)` for one subject's outcomes.
    fn row_terms(&self, x: &[f64]) -> (f64, f64) {
        let s1: f64 = x.iter().sum();
        let sq: f64 = x.iter().map(|v| v * v).sum();
        let kf = x.len() as f64;
        let b = -2.0 * s1 * (1.0 - self.c_shrink * kf) / self.s2;
        let c = (sq - self.c_shrink * s1 * s1) / self.s2;
        (b, c)
    }
}

/// Marginal log-likelihood of one record `[w1..w4, x1..xk]` at `β`, with
/// the subject effect integrated out.
pub fn regression_log_likelihood_row(beta: &[f64], row: &[f64], sigma0: f64, sigma: f64) -> f64 {
    let x = &row[4..];
    let q = Quadratic::new(x.len(), sigma0, sigma);
    let f = regression_mean(&row[..4], beta);
    let (b, c) = q.row_terms(x);
    -0.5 * (q.a * f * f + b * f + c) + q.d
}

/// Log joint per sample `β_j` (rows of `beta: [m, 5]`) under a flat prior.
pub fn regression_log_joint(beta: &Tensor, rows: &Tensor, sigma0: f64, sigma: f64) -> Vec<f64> {
    (0..beta.rows())
        .map(|j| {
            (0..rows.rows())
                .map(|i| regression_log_likelihood_row(beta.row(j), rows.row(i), sigma0, sigma))
                .sum()
        })
        .collect()
}

/// Posterior of `β` for the repeated-measures model with known variance
/// components and a flat prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    pub sigma0: f64,
    pub sigma: f64,
}

impl RegressionTarget {
    pub fn new(sigma0: f64, sigma: f64) -> Self {
        Self { sigma0, sigma }
    }
}

impl TargetPosterior for RegressionTarget {
    fn dim(&self) -> usize {
        5
    }

    fn log_likelihood(
        &self,
        tape: &mut Tape,
        rows: &Tensor,
        z: Var,
    ) -> std::result::Result<Var, NdiffError> {
        let (b, cols) = (rows.rows(), rows.cols());
        let m = tape.shape(z)[0];
        let k = cols - 4;
        let q = Quadratic::new(k, self.sigma0, self.sigma);
        let wcol = |j: usize| (0..b).map(|i| rows.at(i, j)).collect::<Vec<f64>>();

        let beta_row = |tape: &mut Tape, j: usize| -> std::result::Result<Var, NdiffError> {
            let c = tape.column(z, j)?;
            tape.reshape(c, &[1, m])
        };
        let ones_b = tape.constant(Tensor::full(&[b, 1], 1.0));
        // w_j broadcast across samples as a [b, m] constant.
        let repeat = |tape: &mut Tape, j: usize| {
            let col = wcol(j);
            let data = col.iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect();
            tape.constant(Tensor::new(vec![b, m], data).expect("non-empty"))
        };
        let exp_term = |tape: &mut Tape, wj: usize, bj: usize| {
            let wv = tape.constant(Tensor::new(vec![b, 1], wcol(wj)).expect("non-empty"));
            let br = beta_row(tape, bj)?;
            let p = tape.matmul(wv, br)?;
            Ok::<Var, NdiffError>(tape.exp(p))
        };
        let log_term = |tape: &mut Tape, wj: usize, bj: usize| {
            let br = beta_row(tape, bj)?;
            let eb = tape.exp(br);
            let spread = tape.matmul(ones_b, eb)?;
            let w = repeat(tape, wj);
            let s = tape.add(w, spread)?;
            tape.log(s)
        };

        let b0 = beta_row(tape, 0)?;
        let mut f = tape.matmul(ones_b, b0)?;
        let t1 = exp_term(tape, 0, 1)?;
        f = tape.add(f, t1)?;
        let t2 = log_term(tape, 1, 2)?;
        f = tape.add(f, t2)?;
        let t3 = exp_term(tape, 2, 3)?;
        f = tape.add(f, t3)?;
        let t4 = log_term(tape, 3, 4)?;
        f = tape.add(f, t4)?;

        let mut bs = Vec::with_capacity(b);
        let mut c_total = 0.0;
        for i in 0..b {
            let (bi, ci) = q.row_terms(&rows.row(i)[4..]);
            bs.push(bi);
            c_total += ci;
        }
        let sq = tape.square(f);
        let sum_sq = tape.mean_rows(sq)?;
        let quad = tape.scale(sum_sq, q.a * b as f64);
        let brow = tape.constant(Tensor::new(vec![1, b], bs).expect("non-empty"));
        let lin = tape.matmul(brow, f)?;
        let lin = tape.reshape(lin, &[m])?;
        let s = tape.add(quad, lin)?;
        let s = tape.scale(s, -0.5);
        Ok(tape.add_scalar(s, -0.5 * c_total + b as f64 * q.d))
    }
}

/// Mean pulmonary arterial pressure and the hypertension label
/// (`p_pm > 20` mmHg).
pub fn label_hypertension(p_pd: f64, p_ps: f64) -> (bool, f64) {
    let p_pm = 2.0 / 3.0 * p_pd + 1.0 / 3.0 * p_ps;
    (p_pm > 20.0, p_pm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub unit: String,
    pub lower: f64,
    pub upper: f64,
    /// Measurement standard deviation, when known.
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub columns: Vec<AttributeSpec>,
}

impl AttributeSchema {
    pub fn new(columns: Vec<AttributeSpec>) -> Result<Self> {
        for c in &columns {
            if !(c.lower < c.upper) {
                return Err(DatasimError::Invalid(format!(
                    "column '{}' has lower bound {} not below upper bound {}",
                    c.name, c.lower, c.upper
                )));
            }
            if let Some(sd) = c.sd {
                if !(sd > 0.0) {
                    return Err(DatasimError::Invalid(format!(
                        "column '{}' has non-positive measurement SD {sd}",
                        c.name
                    )));
                }
            }
        }
        Ok(Self { columns })
    }

    /// Schema with no bounds for the given column names.
    pub fn unbounded<S: AsRef<str>>(names: &[S]) -> Self {
        Self {
            columns: names
                .iter()
                .map(|n| AttributeSpec {
                    name: n.as_ref().to_string(),
                    unit: String::new(),
                    lower: f64::NEG_INFINITY,
                    upper: f64::INFINITY,
                    sd: None,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// The 19 EHR attributes with complete enough coverage for imputation.
    pub fn ehr() -> Self {
        let cols: [(&str, &str, f64); 19] = [
            ("heart_rate2", "bpm", 3.0),
            ("systolic_bp_2", "mmHg", 1.5),
            ("diastolic_bp_2", "mmHg", 1.5),
            ("cardiac_output", "L/min", 0.2),
            ("systemic_vascular_resistan", "dynes*s*cm^-5", 50.0),
            ("pulmonary_vascular_resista", "dynes*s*cm^-5", 5.0),
            ("right_ventricle_diastole", "mmHg", 1.0),
            ("right_ventricle_systole", "mmHg", 1.0),
            ("rvedp", "mmHg", 1.0),
            ("aov_peak_pg", "mmHg", 0.5),
            ("mv_decel_time", "ms", 6.0),
            ("mv_e_a_ratio", "-", 0.2),
            ("pv_at", "ms", 6.0),
            ("pv_max_pg", "mmHg", 0.5),
            ("ra_pressure", "mmHg", 0.5),
            ("lvef", "%", 2.0),
            ("pap_diastolic", "mmHg", 1.0),
            ("pap_systolic", "mmHg", 1.0),
            ("wedge_pressure", "mmHg", 1.0),
        ];
        Self {
            columns: cols
                .iter()
                .map(|&(name, unit, sd)| AttributeSpec {
                    name: name.into(),
                    unit: unit.into(),
                    lower: 0.0,
                    upper: match name {
                        "pv_max_pg" => 50.0,
                        "lvef" => 100.0,
                        _ => f64::INFINITY,
                    },
                    sd: Some(sd),
                })
                .collect(),
        }
    }

    /// Records `[w1..w4, x1..xk]` of the regression simulator.
    pub fn regression(spec: &RegressionSpec) -> Self {
        let mut columns: Vec<AttributeSpec> = spec
            .a
            .iter()
            .enumerate()
            .map(|(j, &a)| AttributeSpec {
                name: format!("w{}", j + 1),
                unit: String::new(),
                lower: 0.0,
                upper: a,
                sd: None,
            })
            .collect();
        columns.extend((0..spec.k).map(|j| AttributeSpec {
            name: format!("x{}", j + 1),
            unit: String::new(),
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            sd: None,
        }));
        Self { columns }
    }
}

/// Clamps each column into its schema bounds; returns the clamped data and
/// the number of values moved per column.
pub fn truncate_to_bounds(data: &Tensor, schema: &AttributeSchema) -> Result<(Tensor, Vec<usize>)> {
    let d = data.cols();
    if d != schema.len() {
        return Err(DatasimError::Invalid(format!(
            "data has {d} columns, schema covers {}",
            schema.len()
        )));
    }
    let mut out = data.clone();
    let mut counts = vec![0; d];
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let c = &schema.columns[i % d];
        let y = x.clamp(c.lower, c.upper);
        if y != *x {
            counts[i % d] += 1;
            *x = y;
        }
    }
    Ok((out, counts))
}

/// Standardized table with the statistics needed to undo the transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub data: Tensor,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Table {
    /// Z-scores every column of raw `data`.
    pub fn standardize(columns: Vec<String>, raw: &Tensor) -> Result<Self> {
        let (n, d) = (raw.rows(), raw.cols());
        if n < 2 {
            return Err(DatasimError::Invalid("need at least two rows to standardize".into()));
        }
        let mut means = vec![0.0; d];
        for i in 0..n {
            for (m, x) in means.iter_mut().zip(raw.row(i)) {
                *m += x;
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        let mut sds = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                sds[j] += (raw.at(i, j) - means[j]).powi(2);
            }
        }
        for (j, s) in sds.iter_mut().enumerate() {
            *s = (*s / (n - 1) as f64).sqrt();
            if !(*s > 0.0) {
                return Err(DatasimError::ConstantColumn(columns[j].clone()));
            }
        }
        let mut data = raw.clone();
        for (i, x) in data.data_mut().iter_mut().enumerate() {
            *x = (*x - means[i % d]) / sds[i % d];
        }
        Ok(Self {
            columns,
            data,
            means,
            sds,
        })
    }

    pub fn destandardize(&self, z: &Tensor) -> Tensor {
        let d = self.means.len();
        let mut out = z.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = *x * self.sds[i % d] + self.means[i % d];
        }
        out
    }
}

/// Reads a complete-case CSV whose header matches `schema` (any column
/// order) and returns it standardized, columns in schema order.
pub fn load_table(path: &Path, schema: &AttributeSchema) -> Result<Table> {
    let raw = read_raw(path, schema)?;
    Table::standardize(schema.names().iter().map(|s| s.to_string()).collect(), &raw)
}

/// Reads a complete-case CSV into a raw matrix in schema column order.
pub fn read_raw(path: &Path, schema: &AttributeSchema) -> Result<Tensor> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    for h in &header {
        if !schema.columns.iter().any(|c| &c.name == h) {
            return Err(DatasimError::UnknownColumn(h.clone()));
        }
    }
    let order: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == &c.name)
                .ok_or_else(|| DatasimError::MissingColumn(c.name.clone()))
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::new();
    let mut n = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, &src) in order.iter().enumerate() {
            let cell = rec.get(src).unwrap_or("").trim();
            let column = || schema.columns[j].name.clone();
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                return Err(DatasimError::MissingValue {
                    column: column(),
                    row: row + 1,
                });
            }
            let v: f64 = cell.parse().map_err(|_| DatasimError::NonNumeric {
                column: column(),
                row: row + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DatasimError::NonNumeric {
                    column: column(),
                    row: row + 1,
                    value: cell.to_string(),
                });
            }
            data.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(DatasimError::Invalid(format!("{} has no data rows", path.display())));
    }
    Ok(Tensor::new(vec![n, schema.len()], data).expect("non-empty"))
}

/// Column names from a CSV header.
pub fn read_header(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    Ok(rdr.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

/// Writes `data` with a header row.
pub fn write_table<S: AsRef<str>>(path: &Path, header: &[S], data: &Tensor) -> Result<()> {
    if header.len() != data.cols() {
        return Err(DatasimError::Invalid(format!(
            "header has {} names for {} columns",
            header.len(),
            data.cols()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header.iter().map(|h| h.as_ref()))?;
    for i in 0..data.rows() {
        w.write_record(data.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
