//! Generative state-space models: prior, transition and observation densities
//! with analytic gradients, plus trajectory simulation.
//!
//! Two models are provided. [`LinearGaussian`] has diagonal noise and an
//! optionally learnable `{F, G}`; [`Crnn`] is an Euler-discretised chaotic
//! recurrent network observed through Student-t noise.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{check_dim, Error, Result};
use crate::math::{diag_gaussian_logpdf, RngStream, Want};

/// Which entries of `{F, G}` are learnable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThetaMask {
    Fixed,
    /// Diagonal entries of `F` then diagonal entries of `G`.
    Diagonal,
    /// All of `F` row-major, then all of `G` row-major.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// Transition noise variances.
    pub u: DVector<f64>,
    /// Observation noise variances.
    pub v: DVector<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_var: DVector<f64>,
    pub learn: ThetaMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crnn {
    pub w: DMatrix<f64>,
    pub gamma: f64,
    pub tau: f64,
    pub delta: f64,
    pub u: DVector<f64>,
    /// `d_y x d_x` observation matrix.
    pub c: DMatrix<f64>,
    pub t_scale: f64,
    pub t_dof: f64,
    pub prior_mean: DVector<f64>,
    pub prior_var: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelTheta {
    LinearGaussian(LinearGaussian),
    Crnn(Crnn),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModelWant {
    pub theta: bool,
    pub x: bool,
}

impl ModelWant {
    pub const NONE: ModelWant = ModelWant { theta: false, x: false };
    pub const ALL: ModelWant = ModelWant { theta: true, x: true };
    pub const X: ModelWant = ModelWant { theta: false, x: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionEval {
    pub value: f64,
    pub d_theta: Option<DVector<f64>>,
    pub d_prev: Option<DVector<f64>>,
    pub d_x: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationEval {
    pub value: f64,
    pub d_theta: Option<DVector<f64>>,
    pub d_x: Option<DVector<f64>>,
}

impl LinearGaussian {
    /// Diagonal model with `F`, `G` entries uniform in `[0.5, 1.0]` and a
    /// standard normal prior.
    pub fn random_diagonal(d: usize, u_var: f64, v_var: f64, rng: &mut RngStream) -> Self {
        let f = DMatrix::from_diagonal(&DVector::from_fn(d, |_, _| rng.uniform_range(0.5, 1.0)));
        let g = DMatrix::from_diagonal(&DVector::from_fn(d, |_, _| rng.uniform_range(0.5, 1.0)));
        Self {
            f,
            g,
            u: DVector::from_element(d, u_var),
            v: DVector::from_element(d, v_var),
            prior_mean: DVector::zeros(d),
            prior_var: DVector::from_element(d, 1.0),
            learn: ThetaMask::Fixed,
        }
    }

    pub fn is_diagonal(&self) -> bool {
        let off = |m: &DMatrix<f64>| {
            (0..m.nrows()).any(|i| (0..m.ncols()).any(|j| i != j && m[(i, j)] != 0.0))
        };
        self.f.nrows() == self.g.nrows() && !off(&self.f) && !off(&self.g)
    }
}

impl Crnn {
    /// Chaotic-regime defaults: `delta=0.01`, `tau=0.1`, `gamma=2.5`,
    /// `W ~ N(0, 1/d)`, `U = 0.01 I`, full observation, Student-t(3) noise
    /// with scale 0.1 and prior `N(0, 0.1 I)`.
    pub fn chaotic(d: usize, rng: &mut RngStream) -> Self {
        let sd = (1.0 / d as f64).sqrt();
        Self {
            w: DMatrix::from_fn(d, d, |_, _| sd * rng.normal()),
            gamma: 2.5,
            tau: 0.1,
            delta: 0.01,
            u: DVector::from_element(d, 0.01),
            c: DMatrix::identity(d, d),
            t_scale: 0.1,
            t_dof: 3.0,
            prior_mean: DVector::zeros(d),
            prior_var: DVector::from_element(d, 0.1),
        }
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let k = self.delta / self.tau;
        let t = x.map(f64::tanh);
        x + (-x + &self.w * t * self.gamma) * k
    }

    pub fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = x.len();
        let k = self.delta / self.tau;
        let sech2 = x.map(|v| 1.0 - v.tanh().powi(2));
        let mut j = &self.w * DMatrix::from_diagonal(&sech2) * (self.gamma * k);
        for i in 0..d {
            j[(i, i)] += 1.0 - k;
        }
        j
    }

    /// `J^T v` for the drift Jacobian at `x`, without forming `J`.
    fn drift_vjp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let k = self.delta / self.tau;
        let wt = self.w.tr_mul(v);
        DVector::from_fn(x.len(), |i, _| {
            let s = 1.0 - x[i].tanh().powi(2);
            v[i] * (1.0 - k) + k * self.gamma * s * wt[i]
        })
    }

    fn student_t_log_norm(&self) -> f64 {
        let nu = self.t_dof;
        ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln()
            - self.t_scale.ln()
    }
}

fn log_sigma_of(var: &DVector<f64>) -> DVector<f64> {
    var.map(|v| 0.5 * v.ln())
}

impl ModelTheta {
    pub fn dx(&self) -> usize {
        match self {
            ModelTheta::LinearGaussian(m) => m.f.nrows(),
            ModelTheta::Crnn(m) => m.w.nrows(),
        }
    }

    pub fn dy(&self) -> usize {
        match self {
            ModelTheta::LinearGaussian(m) => m.g.nrows(),
            ModelTheta::Crnn(m) => m.c.nrows(),
        }
    }

    pub fn as_linear_gaussian(&self) -> Result<&LinearGaussian> {
        match self {
            ModelTheta::LinearGaussian(m) => Ok(m),
            _ => Err(Error::WrongVariant("expected linear-Gaussian model")),
        }
    }

    pub fn as_crnn(&self) -> Result<&Crnn> {
        match self {
            ModelTheta::Crnn(m) => Ok(m),
            _ => Err(Error::WrongVariant("expected chaotic-RNN model")),
        }
    }

    /// Length of the learnable parameter vector.
    pub fn d_theta(&self) -> usize {
        match self {
            ModelTheta::LinearGaussian(m) => match m.learn {
                ThetaMask::Fixed => 0,
                ThetaMask::Diagonal => m.f.nrows() + m.g.nrows().min(m.g.ncols()),
                ThetaMask::Full => m.f.len() + m.g.len(),
            },
            ModelTheta::Crnn(_) => 0,
        }
    }

    pub fn theta_flat(&self) -> DVector<f64> {
        match self {
            ModelTheta::LinearGaussian(m) => match m.learn {
                ThetaMask::Fixed => DVector::zeros(0),
                ThetaMask::Diagonal => {
                    let mut v: Vec<f64> = (0..m.f.nrows()).map(|i| m.f[(i, i)]).collect();
                    v.extend((0..m.g.nrows().min(m.g.ncols())).map(|i| m.g[(i, i)]));
                    DVector::from_vec(v)
                }
                ThetaMask::Full => {
                    let mut v = row_major(&m.f);
                    v.extend(row_major(&m.g));
                    DVector::from_vec(v)
                }
            },
            ModelTheta::Crnn(_) => DVector::zeros(0),
        }
    }

    pub fn set_theta_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("theta", self.d_theta(), flat.len())?;
        if let ModelTheta::LinearGaussian(m) = self {
            match m.learn {
                ThetaMask::Fixed => {}
                ThetaMask::Diagonal => {
                    let df = m.f.nrows();
                    for i in 0..df {
                        m.f[(i, i)] = flat[i];
                    }
                    for i in 0..m.g.nrows().min(m.g.ncols()) {
                        m.g[(i, i)] = flat[df + i];
                    }
                }
                ThetaMask::Full => {
                    let nf = m.f.len();
                    fill_row_major(&mut m.f, &flat[..nf]);
                    fill_row_major(&mut m.g, &flat[nf..]);
                }
            }
        }
        Ok(())
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        match self {
            ModelTheta::LinearGaussian(m) => &m.prior_mean,
            ModelTheta::Crnn(m) => &m.prior_mean,
        }
    }

    pub fn prior_var(&self) -> &DVector<f64> {
        match self {
            ModelTheta::LinearGaussian(m) => &m.prior_var,
            ModelTheta::Crnn(m) => &m.prior_var,
        }
    }

    /// Transition noise variances.
    pub fn transition_var(&self) -> &DVector<f64> {
        match self {
            ModelTheta::LinearGaussian(m) => &m.u,
            ModelTheta::Crnn(m) => &m.u,
        }
    }

    /// Log prior `log mu(x_1)`. The prior does not depend on the learnable
    /// parameters, so its theta-gradient is zero.
    pub fn prior_logpdf(&self, x: &DVector<f64>, want: ModelWant) -> Result<ObservationEval> {
        check_dim("prior state", self.dx(), x.len())?;
        let ls = log_sigma_of(self.prior_var());
        let e = diag_gaussian_logpdf(x, self.prior_mean(), &ls, Want { x: want.x, ..Want::NONE });
        Ok(ObservationEval {
            value: e.value,
            d_theta: want.theta.then(|| DVector::zeros(self.d_theta())),
            d_x: e.d_x,
        })
    }

    pub fn transition_mean(&self, x_prev: &DVector<f64>) -> DVector<f64> {
        match self {
            ModelTheta::LinearGaussian(m) => &m.f * x_prev,
            ModelTheta::Crnn(m) => m.drift(x_prev),
        }
    }

    pub fn crnn_drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.as_crnn()?;
        check_dim("crnn state", self.dx(), x.len())?;
        Ok(m.drift(x))
    }

    /// `log f(x | x_prev)` with optional gradients.
    pub fn transition_logpdf(
        &self,
        x_prev: &DVector<f64>,
        x: &DVector<f64>,
        want: ModelWant,
    ) -> Result<TransitionEval> {
        check_dim("transition previous state", self.dx(), x_prev.len())?;
        check_dim("transition state", self.dx(), x.len())?;
        let mean = self.transition_mean(x_prev);
        let ls = log_sigma_of(self.transition_var());
        let e = diag_gaussian_logpdf(x, &mean, &ls, Want { x: want.x, mean: want.x || want.theta, log_scale: false });
        // d/d mean of log N(x; mean, U) = (x - mean) / U
        let d_mean = e.d_mean;
        let d_prev = if want.x {
            let dm = d_mean.as_ref().unwrap();
            Some(match self {
                ModelTheta::LinearGaussian(m) => m.f.tr_mul(dm),
                ModelTheta::Crnn(m) => m.drift_vjp(x_prev, dm),
            })
        } else {
            None
        };
        let d_theta = if want.theta {
            let dm = d_mean.as_ref().unwrap();
            Some(match self {
                ModelTheta::LinearGaussian(m) => {
                    let mut g = DVector::zeros(self.d_theta());
                    match m.learn {
                        ThetaMask::Fixed => {}
                        ThetaMask::Diagonal => {
                            for i in 0..m.f.nrows() {
                                g[i] = dm[i] * x_prev[i];
                            }
                        }
                        ThetaMask::Full => {
                            let d = m.f.ncols();
                            for i in 0..m.f.nrows() {
                                for j in 0..d {
                                    g[i * d + j] = dm[i] * x_prev[j];
                                }
                            }
                        }
                    }
                    g
                }
                ModelTheta::Crnn(_) => DVector::zeros(0),
            })
        } else {
            None
        };
        Ok(TransitionEval { value: e.value, d_theta, d_prev, d_x: e.d_x })
    }

    pub fn observation_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ModelTheta::LinearGaussian(m) => &m.g * x,
            ModelTheta::Crnn(m) => &m.c * x,
        }
    }

    /// The linear observation operator (`G` or `C`).
    pub fn observation_matrix(&self) -> &DMatrix<f64> {
        match self {
            ModelTheta::LinearGaussian(m) => &m.g,
            ModelTheta::Crnn(m) => &m.c,
        }
    }

    /// Per-coordinate observation noise variance (infinite for Student-t
    /// with at most two degrees of freedom).
    pub fn observation_noise_var(&self) -> DVector<f64> {
        match self {
            ModelTheta::LinearGaussian(m) => m.v.clone(),
            ModelTheta::Crnn(m) => {
                let nu = m.t_dof;
                let var = if nu > 2.0 { m.t_scale * m.t_scale * nu / (nu - 2.0) } else { f64::INFINITY };
                DVector::from_element(m.c.nrows(), var)
            }
        }
    }

    /// `log g(y | x)` with optional gradients.
    pub fn observation_logpdf(&self, x: &DVector<f64>, y: &DVector<f64>, want: ModelWant) -> Result<ObservationEval> {
        check_dim("observation state", self.dx(), x.len())?;
        check_dim("observation", self.dy(), y.len())?;
        match self {
            ModelTheta::LinearGaussian(m) => {
                let mean = &m.g * x;
                let ls = log_sigma_of(&m.v);
                let e = diag_gaussian_logpdf(y, &mean, &ls, Want { x: false, mean: want.x || want.theta, log_scale: false });
                let dm = e.d_mean;
                let d_x = want.x.then(|| m.g.tr_mul(dm.as_ref().unwrap()));
                let d_theta = want.theta.then(|| {
                    let dm = dm.as_ref().unwrap();
                    let mut g = DVector::zeros(self.d_theta());
                    match m.learn {
                        ThetaMask::Fixed => {}
                        ThetaMask::Diagonal => {
                            let off = m.f.nrows();
                            for i in 0..m.g.nrows().min(m.g.ncols()) {
                                g[off + i] = dm[i] * x[i];
                            }
                        }
                        ThetaMask::Full => {
                            let off = m.f.len();
                            let d = m.g.ncols();
                            for i in 0..m.g.nrows() {
                                for j in 0..d {
                                    g[off + i * d + j] = dm[i] * x[j];
                                }
                            }
                        }
                    }
                    g
                });
                Ok(ObservationEval { value: e.value, d_theta, d_x })
            }
            ModelTheta::Crnn(m) => {
                let nu = m.t_dof;
                let s = m.t_scale;
                let mean = &m.c * x;
                let norm = m.student_t_log_norm();
                let mut value = 0.0;
                let mut d_mean = DVector::zeros(y.len());
                for j in 0..y.len() {
                    let z = (y[j] - mean[j]) / s;
                    value += norm - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p();
                    d_mean[j] = (nu + 1.0) * z / (s * (nu + z * z));
                }
                Ok(ObservationEval {
                    value,
                    d_theta: want.theta.then(|| DVector::zeros(0)),
                    d_x: want.x.then(|| m.c.tr_mul(&d_mean)),
                })
            }
        }
    }

    pub fn sample_prior(&self, rng: &mut RngStream) -> DVector<f64> {
        let d = self.dx();
        let eps = rng.normal_vec(d);
        self.prior_mean() + self.prior_var().map(f64::sqrt).component_mul(&eps)
    }

    pub fn sample_transition(&self, x_prev: &DVector<f64>, rng: &mut RngStream) -> DVector<f64> {
        let eps = rng.normal_vec(self.dx());
        self.transition_mean(x_prev) + self.transition_var().map(f64::sqrt).component_mul(&eps)
    }

    pub fn sample_observation(&self, x: &DVector<f64>, rng: &mut RngStream) -> DVector<f64> {
        let mean = self.observation_mean(x);
        match self {
            ModelTheta::LinearGaussian(m) => {
                let eps = rng.normal_vec(mean.len());
                mean + m.v.map(f64::sqrt).component_mul(&eps)
            }
            ModelTheta::Crnn(m) => {
                DVector::from_fn(mean.len(), |j, _| mean[j] + m.t_scale * rng.student_t(m.t_dof))
            }
        }
    }

    /// Draws `x_1 ~ mu`, `x_{t+1} ~ f(. | x_t)`, `y_t ~ g(. | x_t)`.
    pub fn sample_trajectory(&self, horizon: usize, rng: &mut RngStream) -> Trajectory {
        let mut states = Vec::with_capacity(horizon);
        let mut observations = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let x = if t == 0 { self.sample_prior(rng) } else { self.sample_transition(&states[t - 1], rng) };
            observations.push(self.sample_observation(&x, rng));
            states.push(x);
        }
        Trajectory { dx: self.dx(), dy: self.dy(), states, observations }
    }

    /// `log p(x_{1:T}, y_{1:T})` assembled from prior, transition and observation terms.
    pub fn joint_logpdf(&self, states: &[DVector<f64>], observations: &[DVector<f64>]) -> Result<f64> {
        check_dim("joint length", states.len(), observations.len())?;
        let mut total = 0.0;
        for t in 0..states.len() {
            total += if t == 0 {
                self.prior_logpdf(&states[0], ModelWant::NONE)?.value
            } else {
                self.transition_logpdf(&states[t - 1], &states[t], ModelWant::NONE)?.value
            };
            total += self.observation_logpdf(&states[t], &observations[t], ModelWant::NONE)?.value;
        }
        Ok(total)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            v.push(m[(r, c)]);
        }
    }
    v
}

fn fill_row_major(m: &mut DMatrix<f64>, flat: &[f64]) {
    let nc = m.ncols();
    for r in 0..m.nrows() {
        for c in 0..nc {
            m[(r, c)] = flat[r * nc + c];
        }
    }
}

/// Simulated or loaded states and observations, one entry per time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dx: usize,
    pub dy: usize,
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// CSV with header `t,x_1..x_dx,y_1..y_dy`; `t` starts at 1.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dx).map(|i| format!("x_{i}")));
        header.extend((1..=self.dy).map(|i| format!("y_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for t in 0..self.len() {
            let mut row = vec![(t + 1).to_string()];
            row.extend(self.states[t].iter().map(|v| format!("{v:e}")));
            row.extend(self.observations[t].iter().map(|v| format!("{v:e}")));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty trajectory file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"t") {
            return Err(Error::Format("trajectory header must start with t".into()));
        }
        let dx = cols.iter().filter(|c| c.starts_with("x_")).count();
        let dy = cols.iter().filter(|c| c.starts_with("y_")).count();
        if dx + dy + 1 != cols.len() {
            return Err(Error::Format(format!("unexpected trajectory header: {header}")));
        }
        let mut states = Vec::new();
        let mut observations = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> = line.trim().split(',').map(|s| s.parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))?;
            if vals.len() != cols.len() {
                return Err(Error::Format(format!("line {}: expected {} fields", ln + 2, cols.len())));
            }
            states.push(DVector::from_column_slice(&vals[1..1 + dx]));
            observations.push(DVector::from_column_slice(&vals[1 + dx..]));
        }
        Ok(Self { dx, dy, states, observations })
    }
}
