//! Per-step metrics and the `metrics.csv` schema.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use ovfilt_core::baselines::kf_pairwise_smooth;
use ovfilt_core::math::{gaussian_kl, GaussianDist};
use ovfilt_core::models::ModelTheta;
use ovfilt_core::variational::PhiStep;
use ovfilt_core::{Error, Result};

/// Column order of `metrics.csv`. Missing values are empty cells.
pub const METRICS_COLUMNS: [&str; 11] = [
    "t",
    "rmse",
    "pair_kl",
    "mae_f",
    "mae_g",
    "loglik",
    "elbo_batch",
    "relbo",
    "step_objective",
    "marginal_gap",
    "wall_ms",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub t: usize,
    /// Root mean squared error of the filtering mean against the true state.
    pub rmse: Option<f64>,
    /// `KL(q(x_{t-1}, x_t) || p(x_{t-1}, x_t | y^t))`; the marginal at `t = 1`.
    pub pair_kl: Option<f64>,
    pub mae_f: Option<f64>,
    pub mae_g: Option<f64>,
    /// Log evidence `log p(y^t)` (exact or estimated by the method).
    pub loglik: Option<f64>,
    /// Batch Monte Carlo ELBO of the whole trajectory (final row only).
    pub elbo_batch: Option<f64>,
    pub relbo: Option<f64>,
    /// Per-step objective value of the variational methods.
    pub step_objective: Option<f64>,
    /// Largest absolute difference of smoothing means and standard deviations
    /// between the online and offline fits.
    pub marginal_gap: Option<f64>,
    pub wall_ms: Option<f64>,
}

impl MetricsRow {
    pub fn new(t: usize) -> Self {
        Self { t, ..Default::default() }
    }

    fn cells(&self) -> [Option<f64>; 10] {
        [
            self.rmse,
            self.pair_kl,
            self.mae_f,
            self.mae_g,
            self.loglik,
            self.elbo_batch,
            self.relbo,
            self.step_objective,
            self.marginal_gap,
            self.wall_ms,
        ]
    }

    fn from_cells(t: usize, c: [Option<f64>; 10]) -> Self {
        let [rmse, pair_kl, mae_f, mae_g, loglik, elbo_batch, relbo, step_objective, marginal_gap, wall_ms] = c;
        Self { t, rmse, pair_kl, mae_f, mae_g, loglik, elbo_batch, relbo, step_objective, marginal_gap, wall_ms }
    }
}

pub fn write_metrics<W: Write>(rows: &[MetricsRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", METRICS_COLUMNS.join(","))?;
    for r in rows {
        let mut line = r.t.to_string();
        for c in r.cells() {
            line.push(',');
            if let Some(v) = c {
                line.push_str(&v.to_string());
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parses a `metrics.csv` file, rejecting any deviation from the schema.
pub fn read_metrics<R: BufRead>(input: R) -> Result<Vec<MetricsRow>> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty metrics file".into()))??;
    if header.trim_end() != METRICS_COLUMNS.join(",") {
        return Err(Error::Format(format!("unexpected metrics header: {header}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != METRICS_COLUMNS.len() {
            return Err(Error::Format(format!("metrics row {}: expected {} fields", i + 1, METRICS_COLUMNS.len())));
        }
        let t = fields[0].parse().map_err(|_| Error::Format(format!("metrics row {}: bad t", i + 1)))?;
        let mut cells = [None; 10];
        for (k, f) in fields[1..].iter().enumerate() {
            if !f.is_empty() {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::Format(format!("metrics row {}: bad {}", i + 1, METRICS_COLUMNS[k + 1])))?;
                cells[k] = Some(v);
            }
        }
        rows.push(MetricsRow::from_cells(t, cells));
    }
    Ok(rows)
}

pub fn rmse(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch { what: "rmse", expected: truth.len(), got: estimate.len() });
    }
    Ok(((estimate - truth).norm_squared() / truth.len() as f64).sqrt())
}

/// Mean absolute error over the diagonal entries.
pub fn diagonal_mae(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch { what: "mae", expected: truth.len(), got: estimate.len() });
    }
    Ok((estimate - truth).abs().sum() / truth.len() as f64)
}

/// `KL(q_t(x_{t-1}, x_t) || p(x_{t-1}, x_t | y^t))` against the exact
/// linear-Gaussian pairwise smoother. At `t = 1` (no previous filter) the
/// marginal `q_1` is compared with the first filtering distribution.
pub fn pairwise_kl(
    model: &ModelTheta,
    phi: &PhiStep,
    prev_filter: Option<&GaussianDist>,
    filter: &GaussianDist,
    y: &DVector<f64>,
) -> Result<f64> {
    match prev_filter {
        None => gaussian_kl(&phi.marginal(), filter),
        Some(prev) => gaussian_kl(&phi.pairwise_joint()?, &kf_pairwise_smooth(model, prev, y)?),
    }
}

/// Largest absolute difference of means and standard deviations.
pub fn marginal_gap(a: &GaussianDist, b: &GaussianDist) -> f64 {
    let dm = (&a.mean - &b.mean).amax();
    let sa = a.variances().map(f64::sqrt);
    let sb = b.variances().map(f64::sqrt);
    dm.max((sa - sb).amax())
}
