//! Online variational filtering and parameter learning.
//!
//! At each time index `t` the engine holds the variational step `phi_t`, the
//! model parameters `theta_t`, and regression approximations of the
//! state-gradient function (`t_hat`), the parameter-gradient function
//! (`s_hat`) and optionally the value function (`v_hat`). With `x_t ~ q_t`
//! and `x_{t-1} ~ q_t(. | x_t)`:
//!
//! * reward `r_t = log f(x_t | x_{t-1}) + log g(y_t | x_t) - log m_t(x_t | x_{t-1})`,
//!   and `r_1 = log mu(x_1) + log g(y_1 | x_1) - log q_1(x_1)`;
//! * value `V_t(x_t) = E[V_{t-1}(x_{t-1}) + r_t]`, whose mean under `q_t` is the ELBO;
//! * parameter gradient `S_t(x_t) = E[S_{t-1}(x_{t-1}) + grad_theta r_t]`;
//! * state gradient `T_t(x_t) = E[(T_{t-1}(x_{t-1}) + d r_t/d x_{t-1}) dx_{t-1}/dx_t + d r_t/d x_t]`.
//!
//! The gradient of the ELBO w.r.t. `phi_t` uses the same reverse pass as the
//! state-gradient target, continued into the reparameterised samplers.


use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::math::{mean_and_stderr, RngStream};
use crate::models::{ModelTheta, ModelWant};
use crate::regression::{
    build_grad_datasets, krr_fit_shared, median_heuristic, mlp_regressor_fit, select_bandwidth, BandwidthSearch,
    GradApprox, KernelFamily, KernelSpec, RegLoss,
};
use crate::smallnet::{Activation, Mlp};
use crate::variational::{pseudo_transition_logpdf, BackwardKernel, KernelKind, PhiStep, PhiTrajectory, PhiWant};

/// Which per-step objective drives `phi_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Full recursive ELBO with the learned state-gradient function.
    Ours,
    /// Independent pairwise factor: the backward kernel is frozen to the
    /// previous marginal and only `mu_t`, `log_sigma_t` are optimised.
    Aelbo1,
    /// Conditional pairwise factor without the state-gradient term.
    Aelbo2,
}

/// Everything needed to evaluate step-`t` quantities.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub t: usize,
    pub model: &'a ModelTheta,
    pub phi: &'a PhiStep,
    /// `None` exactly when `t == 1`.
    pub phi_prev: Option<&'a PhiStep>,
    pub y: &'a DVector<f64>,
    pub t_hat: &'a GradApprox,
    pub s_hat: &'a GradApprox,
    /// Zero the kernel block of the `phi` gradient.
    pub freeze_kernel: bool,
}

impl StepContext<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Precondition("time index starts at 1".into()));
        }
        check_dim("phi state dimension", self.model.dx(), self.phi.dim())?;
        check_dim("observation", self.model.dy(), self.y.len())?;
        if self.t == 1 {
            if self.phi_prev.is_some() || self.phi.kernel.is_some() {
                return Err(Error::Precondition("the first step has no previous step or kernel".into()));
            }
        } else {
            let prev = self.phi_prev.ok_or_else(|| Error::Precondition("missing previous step".into()))?;
            check_dim("previous phi state dimension", self.phi.dim(), prev.dim())?;
            if self.phi.kernel.is_none() {
                return Err(Error::Precondition("steps after the first need a backward kernel".into()));
            }
        }
        check_dim("state-gradient output", self.model.dx(), self.t_hat.d_out())?;
        check_dim("parameter-gradient output", self.model.d_theta(), self.s_hat.d_out())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RewardWant {
    pub theta: bool,
    /// Partials w.r.t. `x_{t-1}` and `x_t`.
    pub args: bool,
    /// Explicit partial w.r.t. the flat `phi_t` (states held fixed).
    pub phi: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardEval {
    pub value: f64,
    pub d_theta: Option<DVector<f64>>,
    pub d_prev: Option<DVector<f64>>,
    pub d_x: Option<DVector<f64>>,
    pub d_phi: Option<DVector<f64>>,
}

fn finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term: term.into() })
    }
}

fn finite_vec(term: &str, v: Option<DVector<f64>>) -> Result<Option<DVector<f64>>> {
    if let Some(x) = &v {
        check_finite(term, x.as_slice())?;
    }
    Ok(v)
}

/// The step-`t` reward. `x_prev` must be `None` exactly at `t == 1`.
pub fn reward(ctx: &StepContext, x_prev: Option<&DVector<f64>>, x: &DVector<f64>, want: RewardWant) -> Result<RewardEval> {
    let mw = ModelWant { theta: want.theta, x: want.args };
    let pw = PhiWant { args: want.args, phi: want.phi };
    let obs = ctx.model.observation_logpdf(x, ctx.y, mw)?;
    finite("log observation density", obs.value)?;
    match (ctx.phi_prev, x_prev) {
        (None, None) => {
            let pri = ctx.model.prior_logpdf(x, mw)?;
            finite("log prior density", pri.value)?;
            let q = ctx.phi.marginal_logpdf(x, pw)?;
            finite("log marginal density", q.value)?;
            let d_x = want.args.then(|| pri.d_x.unwrap() + obs.d_x.unwrap() - q.d_x.unwrap());
            Ok(RewardEval {
                value: pri.value + obs.value - q.value,
                d_theta: finite_vec("observation parameter gradient", want.theta.then(|| pri.d_theta.unwrap() + obs.d_theta.unwrap()))?,
                d_prev: None,
                d_x: finite_vec("reward state gradient", d_x)?,
                d_phi: want.phi.then(|| -q.d_phi.unwrap()),
            })
        }
        (Some(prev), Some(xp)) => {
            let tr = ctx.model.transition_logpdf(xp, x, mw)?;
            finite("log transition density", tr.value)?;
            let m = pseudo_transition_logpdf(prev, ctx.phi, xp, x, pw)?;
            finite("log pseudo-transition density", m.value)?;
            let (d_prev, d_x) = if want.args {
                (
                    Some(tr.d_prev.unwrap() - m.d_x.unwrap()),
                    Some(tr.d_x.unwrap() + obs.d_x.unwrap() - m.d_next.unwrap()),
                )
            } else {
                (None, None)
            };
            Ok(RewardEval {
                value: tr.value + obs.value - m.value,
                d_theta: finite_vec("transition parameter gradient", want.theta.then(|| tr.d_theta.unwrap() + obs.d_theta.unwrap()))?,
                d_prev: finite_vec("reward previous-state gradient", d_prev)?,
                d_x: finite_vec("reward state gradient", d_x)?,
                d_phi: want.phi.then(|| -m.d_phi_next.unwrap()),
            })
        }
        _ => Err(Error::Precondition("previous state must be given exactly when t > 1".into())),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TermsWant {
    pub phi_grad: bool,
    /// Total derivative of `V_{t-1}(x_{t-1}) + r_t` w.r.t. `x_t` (state-gradient target).
    pub state_grad: bool,
    /// Parameter-gradient target `S_{t-1}(x_{t-1}) + grad_theta r_t`.
    pub theta: bool,
}

/// Per-draw quantities shared by the gradient estimate and the regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTerms {
    pub x_prev: Option<DVector<f64>>,
    pub x: DVector<f64>,
    pub reward: f64,
    pub state_grad: Option<DVector<f64>>,
    pub s_target: Option<DVector<f64>>,
    pub phi_grad: Option<DVector<f64>>,
}

/// Standard normal noise for one draw: `(eps_prev, eps)`, with an empty
/// `eps_prev` at the first step. `eps` is drawn first.
pub fn draw_noise(ctx: &StepContext, rng: &mut RngStream) -> (DVector<f64>, DVector<f64>) {
    let d = ctx.phi.dim();
    let eps = rng.normal_vec(d);
    let eps_prev = if ctx.t > 1 { rng.normal_vec(d) } else { DVector::zeros(0) };
    (eps_prev, eps)
}

/// Evaluates one reparameterised draw `x_t = mu + sigma eps`,
/// `x_{t-1} = mean(x_t) + sigma_tilde eps_prev`.
pub fn sample_terms(ctx: &StepContext, eps_prev: &DVector<f64>, eps: &DVector<f64>, want: TermsWant) -> Result<SampleTerms> {
    let x = ctx.phi.marginal_sample(eps)?;
    let x_prev = if ctx.t > 1 { Some(ctx.phi.backward_sample(&x, eps_prev)?) } else { None };
    let need_path = want.phi_grad || want.state_grad;
    let r = reward(ctx, x_prev.as_ref(), &x, RewardWant { theta: want.theta, args: need_path, phi: want.phi_grad })?;
    let mut state_grad = None;
    let mut phi_grad = None;
    if need_path {
        let mut g_x = r.d_x.clone().unwrap();
        let mut g_kernel = None;
        if let Some(xp) = &x_prev {
            let mut g_prev = r.d_prev.clone().unwrap();
            if !ctx.t_hat.is_zero() {
                g_prev += ctx.t_hat.predict(xp);
            }
            let (gk, gx) = ctx.phi.backward_jacobian_vjp(eps_prev, &x, &g_prev)?;
            g_x += gx;
            g_kernel = Some(gk);
        }
        if want.phi_grad {
            let mut g = r.d_phi.clone().unwrap() + ctx.phi.marginal_vjp(eps, &g_x)?;
            if let Some(gk) = g_kernel {
                g += gk;
            }
            if ctx.freeze_kernel {
                let start = 2 * ctx.phi.dim();
                g.rows_mut(start, g.len() - start).fill(0.0);
            }
            phi_grad = finite_vec("phi gradient", Some(g))?;
        }
        if want.state_grad {
            state_grad = finite_vec("state-gradient target", Some(g_x))?;
        }
    }
    let s_target = if want.theta {
        let mut s = r.d_theta.clone().unwrap();
        if let (Some(xp), false) = (&x_prev, ctx.s_hat.is_zero()) {
            s += ctx.s_hat.predict(xp);
        }
        Some(s)
    } else {
        None
    };
    Ok(SampleTerms { x_prev, x, reward: r.value, state_grad, s_target, phi_grad })
}

/// Monte Carlo estimate of the gradient of the step-`t` objective w.r.t. the
/// flat `phi_t`, averaged over `n` draws.
pub fn phi_gradient_estimate(ctx: &StepContext, n: usize, rng: &mut RngStream) -> Result<DVector<f64>> {
    if n == 0 {
        return Err(Error::Precondition("sample count must be positive".into()));
    }
    let mut total = DVector::zeros(ctx.phi.param_count());
    let want = TermsWant { phi_grad: true, ..Default::default() };
    for _ in 0..n {
        let (ep, e) = draw_noise(ctx, rng);
        total += sample_terms(ctx, &ep, &e, want)?.phi_grad.unwrap();
    }
    Ok(total / n as f64)
}

/// Mean and standard error of `r_t` under the step-`t` draws.
pub fn mean_reward(ctx: &StepContext, n: usize, rng: &mut RngStream) -> Result<(f64, f64)> {
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        let (ep, e) = draw_noise(ctx, rng);
        v.push(sample_terms(ctx, &ep, &e, TermsWant::default())?.reward);
    }
    Ok(mean_and_stderr(&v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    /// Ascent steps per time index.
    pub iters: usize,
    pub lr: f64,
    /// Learning rate at `t = 1`, where the initial parameters are far from the optimum.
    pub first_lr: f64,
    /// Learning rate multiplier per step.
    pub decay: f64,
    /// Draws per gradient estimate.
    pub n: usize,
    pub optimizer: OptimizerKind,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self { iters: 500, lr: 0.01, first_lr: 0.1, decay: 0.999, n: 10, optimizer: OptimizerKind::Adam }
    }
}

/// Adam ascent state for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    k: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    pub fn new(n: usize) -> Self {
        Self { m: DVector::zeros(n), v: DVector::zeros(n), k: 0 }
    }

    /// Returns the ascent increment for gradient `g` at learning rate `lr`.
    pub fn increment(&mut self, g: &DVector<f64>, lr: f64) -> DVector<f64> {
        self.k += 1;
        self.m = &self.m * Self::B1 + g * (1.0 - Self::B1);
        self.v = &self.v * Self::B2 + g.component_mul(g) * (1.0 - Self::B2);
        let c1 = 1.0 - Self::B1.powi(self.k);
        let c2 = 1.0 - Self::B2.powi(self.k);
        DVector::from_fn(g.len(), |i, _| lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8))
    }
}

/// Result of the inner loop; on failure `phi` is the last finite iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub phi: PhiStep,
    pub failure: Option<Error>,
    pub last_grad_norm: f64,
}

/// Runs `cfg.iters` stochastic ascent steps on `phi_t` starting from `ctx.phi`.
pub fn inner_optimize_phi(ctx: &StepContext, cfg: &InnerConfig, rng: &mut RngStream) -> Result<InnerOutcome> {
    ctx.validate()?;
    let mut phi = ctx.phi.clone();
    let mut flat = phi.flat();
    let mut adam = Adam::new(flat.len());
    let mut lr = if ctx.t == 1 { cfg.first_lr } else { cfg.lr };
    let mut last_grad_norm = 0.0;
    for m in 0..cfg.iters {
        let c = StepContext { phi: &phi, ..*ctx };
        let g = match phi_gradient_estimate(&c, cfg.n, rng) {
            Ok(g) => g,
            Err(e) => return Ok(InnerOutcome { phi, failure: Some(e), last_grad_norm }),
        };
        last_grad_norm = g.norm();
        let step = match cfg.optimizer {
            OptimizerKind::Sgd => &g * lr,
            OptimizerKind::Adam => adam.increment(&g, lr),
        };
        let next = &flat + step;
        if next.iter().any(|v| !v.is_finite()) {
            let e = Error::NonFinite { term: format!("phi after inner step {}", m + 1) };
            return Ok(InnerOutcome { phi, failure: Some(e), last_grad_norm });
        }
        flat = next;
        phi.set_flat(flat.as_slice())?;
        lr *= cfg.decay;
    }
    Ok(InnerOutcome { phi, failure: None, last_grad_norm })
}

/// Which parameter-gradient approximation the theta step differences.
#[derive(Debug, Clone, Copy)]
pub enum ThetaDirection<'a> {
    /// `E_{q_t}[S_{t-1}(x_{t-1}) + s_t] - E_{q_{t-1}}[S_{t-1}]`, with `S_{t-1} = ctx.s_hat`.
    Literal,
    /// `E_{q_t}[S_t(x_t)] - E_{q_{t-1}}[S_{t-1}]` using the freshly refit `S_t`.
    Refit(&'a GradApprox),
}

/// Monte Carlo ascent direction for the parameters.
pub fn theta_direction(ctx: &StepContext, n: usize, dir: ThetaDirection, rng: &mut RngStream) -> Result<DVector<f64>> {
    if n == 0 {
        return Err(Error::Precondition("sample count must be positive".into()));
    }
    let dt = ctx.model.d_theta();
    let mut total = DVector::zeros(dt);
    for _ in 0..n {
        let (ep, e) = draw_noise(ctx, rng);
        match dir {
            ThetaDirection::Literal => {
                total += sample_terms(ctx, &ep, &e, TermsWant { theta: true, ..Default::default() })?.s_target.unwrap();
            }
            ThetaDirection::Refit(s_new) => {
                total += s_new.predict(&ctx.phi.marginal_sample(&e)?);
            }
        }
        if let (Some(prev), false) = (ctx.phi_prev, ctx.s_hat.is_zero()) {
            let x_tilde = prev.marginal_sample(&rng.normal_vec(prev.dim()))?;
            total -= ctx.s_hat.predict(&x_tilde);
        }
    }
    finite_vec("theta direction", Some(total / n as f64)).map(Option::unwrap)
}

/// One parameter ascent step `theta + eta * direction`; returns the new flat vector.
pub fn theta_step(ctx: &StepContext, n: usize, eta: f64, dir: ThetaDirection, rng: &mut RngStream) -> Result<DVector<f64>> {
    if ctx.model.d_theta() == 0 {
        return Err(Error::Precondition("model has no learnable parameters".into()));
    }
    let theta = ctx.model.theta_flat();
    if eta == 0.0 {
        return Ok(theta);
    }
    Ok(theta + theta_direction(ctx, n, dir, rng)? * eta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegressionBackend {
    Krr {
        family: KernelFamily,
        ridge_lambda: f64,
        /// Fixed log bandwidth; `None` uses the median heuristic on each dataset.
        log_bandwidth: Option<f64>,
        /// Bandwidth search, run every `select_every` steps (0 disables it).
        search: BandwidthSearch,
        select_every: usize,
        n_val: usize,
    },
    Mlp { hidden: Vec<usize>, activation: Activation, loss: RegLoss, epochs: usize, batch: usize, lr: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub backend: RegressionBackend,
    pub n_fit: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            backend: RegressionBackend::Krr {
                family: KernelFamily::Matern52,
                ridge_lambda: 0.1,
                log_bandwidth: None,
                search: BandwidthSearch::default(),
                select_every: 1,
                n_val: 100,
            },
            n_fit: 500,
        }
    }
}

/// Newly fitted approximators for step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub t_hat: GradApprox,
    pub s_hat: GradApprox,
    pub v_hat: Option<GradApprox>,
}

/// Builds the step-`t` regression datasets and fits the configured backend.
/// `v_prev` requests a value-function fit as well.
pub fn fit_approximators(
    ctx: &StepContext,
    v_prev: Option<&GradApprox>,
    cfg: &RegressionConfig,
    rng: &mut RngStream,
) -> Result<Fitted> {
    ctx.validate()?;
    let data = build_grad_datasets(ctx, v_prev, cfg.n_fit, &mut rng.substream(0))?;
    let dt = ctx.model.d_theta();
    match &cfg.backend {
        RegressionBackend::Krr { family, ridge_lambda, log_bandwidth, search, select_every, n_val } => {
            let mut spec = KernelSpec {
                family: *family,
                ridge_lambda: *ridge_lambda,
                log_bandwidth: log_bandwidth.unwrap_or_else(|| median_heuristic(&data.t.inputs)),
            };
            if log_bandwidth.is_none() {
                if let GradApprox::Krr { spec: prev, .. } = ctx.t_hat {
                    if *select_every == 0 || !(ctx.t - 1).is_multiple_of(*select_every) {
                        spec.log_bandwidth = prev.log_bandwidth;
                    }
                }
            }
            if *select_every > 0 && (ctx.t - 1).is_multiple_of(*select_every) && search.iters > 0 {
                let val = build_grad_datasets(ctx, None, (*n_val).max(1), &mut rng.substream(1))?;
                let res = select_bandwidth(&data.t, &val.t, &spec, search, &mut rng.substream(2))?;
                spec = res.spec;
            }
            let mut targets = vec![&data.t.targets];
            if let Some(s) = &data.s {
                targets.push(&s.targets);
            }
            if let Some(v) = &data.v {
                targets.push(&v.targets);
            }
            let mut fits = krr_fit_shared(&data.t.inputs, &targets, &spec)?.into_iter();
            let t_hat = fits.next().unwrap();
            let s_hat = if data.s.is_some() { fits.next().unwrap() } else { GradApprox::Zero { d_out: dt } };
            let v_hat = data.v.as_ref().map(|_| fits.next().unwrap());
            Ok(Fitted { t_hat, s_hat, v_hat })
        }
        RegressionBackend::Mlp { hidden, activation, loss, epochs, batch, lr } => {
            let d = ctx.phi.dim();
            let fit = |ds: &crate::regression::RegressionDataset, prev: &GradApprox, loss: RegLoss, key: u64| -> Result<GradApprox> {
                let mut r = rng.substream(10 + key);
                let net = match prev {
                    GradApprox::MlpReg { net, loss: l } if *l == loss => net.clone(),
                    _ => {
                        let extra = usize::from(loss == RegLoss::DirLogMag);
                        let mut sizes = vec![d];
                        sizes.extend(hidden.iter());
                        sizes.push(ds.targets.ncols() + extra);
                        Mlp::new(&sizes, *activation, &mut r)?
                    }
                };
                mlp_regressor_fit(ds, &net, loss, *epochs, *batch, *lr, &mut r)
            };
            let t_hat = fit(&data.t, ctx.t_hat, *loss, 0)?;
            let s_hat = match &data.s {
                Some(s) => fit(s, ctx.s_hat, *loss, 1)?,
                None => GradApprox::Zero { d_out: dt },
            };
            let v_hat = match (&data.v, v_prev) {
                (Some(v), Some(prev)) => Some(fit(v, prev, RegLoss::Mse, 2)?),
                _ => None,
            };
            Ok(Fitted { t_hat, s_hat, v_hat })
        }
    }
}

/// Fits the step-`t` value function on `v_prev(x_{t-1}) + r_t` and returns the
/// recursive ELBO `E_{q_t}[V_t]` estimated from `n` fresh draws.
pub fn relbo_update(
    ctx: &StepContext,
    v_prev: &GradApprox,
    cfg: &RegressionConfig,
    n: usize,
    rng: &mut RngStream,
) -> Result<(f64, GradApprox)> {
    let data = build_grad_datasets(ctx, Some(v_prev), cfg.n_fit, &mut rng.substream(0))?;
    let v = data.v.unwrap();
    let v_hat = match &cfg.backend {
        RegressionBackend::Krr { family, ridge_lambda, log_bandwidth, .. } => {
            let spec = KernelSpec {
                family: *family,
                ridge_lambda: *ridge_lambda,
                log_bandwidth: log_bandwidth.unwrap_or_else(|| median_heuristic(&v.inputs)),
            };
            crate::regression::krr_fit(&v, &spec)?
        }
        RegressionBackend::Mlp { hidden, activation, epochs, batch, lr, .. } => {
            let mut r = rng.substream(1);
            let mut sizes = vec![ctx.phi.dim()];
            sizes.extend(hidden.iter());
            sizes.push(1);
            let net = Mlp::new(&sizes, *activation, &mut r)?;
            mlp_regressor_fit(&v, &net, RegLoss::Mse, *epochs, *batch, *lr, &mut r)?
        }
    };
    Ok((relbo_from(&v_hat, ctx.phi, n, &mut rng.substream(2))?, v_hat))
}

/// `E_{q_t}[V_t]` by Monte Carlo.
pub fn relbo_from(v_hat: &GradApprox, phi: &PhiStep, n: usize, rng: &mut RngStream) -> Result<f64> {
    if n == 0 {
        return Err(Error::Precondition("sample count must be positive".into()));
    }
    let mut s = 0.0;
    for _ in 0..n {
        s += v_hat.predict(&phi.marginal_sample(&rng.normal_vec(phi.dim()))?)[0];
    }
    finite("recursive ELBO", s / n as f64)
}

/// Batch ELBO estimate and optional gradient over the concatenated flat steps.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchElbo {
    pub mean: f64,
    pub stderr: f64,
    pub grad: Option<DVector<f64>>,
}

/// Longest horizon accepted by [`batch_elbo_mc`] in gradient mode by default.
pub const DEFAULT_GRAD_HORIZON_CAP: usize = 200;

/// Monte Carlo ELBO of the joint `q(x_{1:t}) = q_t(x_t) prod_k q_{k+1}(x_k | x_{k+1})`,
/// sampled ancestrally backwards from `x_t`. With `grad_cap = Some(c)` the
/// reparameterised gradient is returned as well, refused when `t > c`.
pub fn batch_elbo_mc(
    traj: &PhiTrajectory,
    model: &ModelTheta,
    ys: &[DVector<f64>],
    n: usize,
    rng: &mut RngStream,
    grad_cap: Option<usize>,
) -> Result<BatchElbo> {
    let t = traj.len();
    if t == 0 {
        return Err(Error::Precondition("batch ELBO needs at least one step".into()));
    }
    if n == 0 {
        return Err(Error::Precondition("sample count must be positive".into()));
    }
    check_dim("observations", t, ys.len())?;
    if let Some(cap) = grad_cap {
        if t > cap {
            return Err(Error::Refused(format!("gradient mode supports at most {cap} steps, got {t}")));
        }
    }
    for (k, s) in traj.steps.iter().enumerate() {
        if k > 0 && s.kernel.is_none() {
            return Err(Error::Precondition(format!("step {} has no backward kernel", k + 1)));
        }
    }
    let want_grad = grad_cap.is_some();
    let offsets: Vec<usize> = traj
        .steps
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.param_count();
            Some(o)
        })
        .collect();
    let total_len: usize = traj.steps.iter().map(PhiStep::param_count).sum();
    let mut grad = want_grad.then(|| DVector::zeros(total_len));
    let mut values = Vec::with_capacity(n);
    let d = model.dx();
    let pw = PhiWant { args: want_grad, phi: want_grad };
    let mw = ModelWant { theta: false, x: want_grad };
    for _ in 0..n {
        let mut eps = vec![DVector::zeros(d); t];
        let mut xs = vec![DVector::zeros(d); t];
        eps[t - 1] = rng.normal_vec(d);
        xs[t - 1] = traj.steps[t - 1].marginal_sample(&eps[t - 1])?;
        for k in (0..t - 1).rev() {
            eps[k] = rng.normal_vec(d);
            xs[k] = traj.steps[k + 1].backward_sample(&xs[k + 1], &eps[k])?;
        }
        let mut gx = vec![DVector::zeros(d); if want_grad { t } else { 0 }];
        let mut gphi: Vec<DVector<f64>> =
            if want_grad { traj.steps.iter().map(|s| DVector::zeros(s.param_count())).collect() } else { Vec::new() };
        let mut v = 0.0;
        for k in 0..t {
            let o = model.observation_logpdf(&xs[k], &ys[k], mw)?;
            v += o.value;
            if want_grad {
                gx[k] += o.d_x.unwrap();
            }
            if k == 0 {
                let p = model.prior_logpdf(&xs[0], mw)?;
                v += p.value;
                if want_grad {
                    gx[0] += p.d_x.unwrap();
                }
            } else {
                let f = model.transition_logpdf(&xs[k - 1], &xs[k], mw)?;
                v += f.value;
                let b = traj.steps[k].backward_logpdf(&xs[k - 1], &xs[k], pw)?;
                v -= b.value;
                if want_grad {
                    gx[k] += f.d_x.unwrap() - b.d_xt.unwrap();
                    gx[k - 1] += f.d_prev.unwrap() - b.d_prev.unwrap();
                    gphi[k] -= b.d_phi.unwrap();
                }
            }
        }
        let q = traj.steps[t - 1].marginal_logpdf(&xs[t - 1], pw)?;
        v -= q.value;
        values.push(finite("batch ELBO sample", v)?);
        if let Some(total) = grad.as_mut() {
            gx[t - 1] -= q.d_x.unwrap();
            gphi[t - 1] -= q.d_phi.unwrap();
            let mut g = gx[0].clone();
            for k in 0..t - 1 {
                let (gp, gnext) = traj.steps[k + 1].backward_jacobian_vjp(&eps[k], &xs[k + 1], &g)?;
                gphi[k + 1] += gp;
                g = &gx[k + 1] + gnext;
            }
            gphi[t - 1] += traj.steps[t - 1].marginal_vjp(&eps[t - 1], &g)?;
            for (k, gp) in gphi.iter().enumerate() {
                total.rows_mut(offsets[k], gp.len()).add_assign(gp);
            }
        }
    }
    let (mean, stderr) = mean_and_stderr(&values);
    Ok(BatchElbo { mean, stderr, grad: grad.map(|g| g / n as f64) })
}

trait AddAssignView {
    fn add_assign(&mut self, g: &DVector<f64>);
}

impl AddAssignView for nalgebra::DVectorViewMut<'_, f64> {
    fn add_assign(&mut self, g: &DVector<f64>) {
        for (a, b) in self.iter_mut().zip(g.iter()) {
            *a += *b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub iters: usize,
    pub lr: f64,
    pub decay: f64,
    pub n: usize,
    pub grad_cap: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self { iters: 3000, lr: 0.01, decay: 0.9995, n: 10, grad_cap: DEFAULT_GRAD_HORIZON_CAP }
    }
}

/// Adam ascent on the full batch ELBO over every step's parameters.
pub fn offline_train(
    init: &PhiTrajectory,
    model: &ModelTheta,
    ys: &[DVector<f64>],
    cfg: &OfflineConfig,
    rng: &mut RngStream,
) -> Result<PhiTrajectory> {
    let mut traj = init.clone();
    let mut flat: DVector<f64> = DVector::from_iterator(
        traj.steps.iter().map(PhiStep::param_count).sum(),
        traj.steps.iter().flat_map(|s| s.flat().iter().cloned().collect::<Vec<_>>()),
    );
    let mut adam = Adam::new(flat.len());
    let mut lr = cfg.lr;
    for it in 0..cfg.iters {
        let g = batch_elbo_mc(&traj, model, ys, cfg.n, rng, Some(cfg.grad_cap))?.grad.unwrap();
        flat += adam.increment(&g, lr);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: format!("offline parameters after iteration {}", it + 1) });
        }
        let mut o = 0;
        for s in traj.steps.iter_mut() {
            let n = s.param_count();
            s.set_flat(&flat.as_slice()[o..o + n])?;
            o += n;
        }
        lr *= cfg.decay;
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaConfig {
    pub eta0: f64,
    /// `eta_t = eta0 * t^-exponent`.
    pub exponent: f64,
    pub n: usize,
    /// Difference the freshly refit `S_t` instead of `S_{t-1} + s_t`.
    pub uses_refit_s: bool,
}

impl Default for ThetaConfig {
    fn default() -> Self {
        Self { eta0: 0.01, exponent: 0.6, n: 100, uses_refit_s: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub objective: Objective,
    pub kernel: KernelKind,
    pub inner: InnerConfig,
    pub regression: RegressionConfig,
    pub learn_theta: bool,
    pub theta: ThetaConfig,
    pub relbo: bool,
    /// Draws for the RELBO average and the per-step objective estimate.
    pub eval_n: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Ours,
            kernel: KernelKind::Affine,
            inner: InnerConfig::default(),
            regression: RegressionConfig::default(),
            learn_theta: false,
            theta: ThetaConfig::default(),
            relbo: false,
            eval_n: 1000,
            seed: 0,
        }
    }
}

/// One processed observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub phi: PhiStep,
    pub theta: DVector<f64>,
    pub relbo: Option<f64>,
    /// Mean step reward at the final `phi_t`; for the AELBO objectives this
    /// is the per-step objective value.
    pub step_objective: f64,
    pub step_ms: f64,
    pub phi_grad_norm: f64,
    pub phi_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub records: Vec<StepRecord>,
    /// Set when a step failed; records up to that step are kept.
    pub error: Option<String>,
}

impl RunResult {
    pub fn phi_trajectory(&self) -> Result<PhiTrajectory> {
        PhiTrajectory::new(self.records.iter().map(|r| r.phi.clone()).collect())
    }
}

/// Substream keys within one time index.
pub mod stream {
    pub const INIT: u64 = 0;
    pub const INNER: u64 = 1;
    pub const FIT: u64 = 2;
    pub const THETA: u64 = 3;
    pub const EVAL: u64 = 4;
}

/// The online engine. Between steps it retains only the current
/// variational step, the model parameters, the regression approximators and
/// the step counter; observations and earlier steps are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineFilter {
    pub config: EngineConfig,
    pub model: ModelTheta,
    pub t: usize,
    pub phi: Option<PhiStep>,
    pub t_hat: GradApprox,
    pub s_hat: GradApprox,
    pub v_hat: Option<GradApprox>,
}

impl OnlineFilter {
    pub fn new(model: ModelTheta, config: EngineConfig) -> Self {
        let d = model.dx();
        let dt = model.d_theta();
        let v_hat = config.relbo.then_some(GradApprox::Zero { d_out: 1 });
        Self { config, model, t: 0, phi: None, t_hat: GradApprox::Zero { d_out: d }, s_hat: GradApprox::Zero { d_out: dt }, v_hat }
    }

    /// Random stream for substream `key` of time index `t`.
    pub fn step_stream(seed: u64, t: usize, key: u64) -> RngStream {
        RngStream::new(seed, t as u64).substream(key)
    }

    /// The step-`t` initial parameters: a copy of the previous step (with an
    /// independent kernel at `t = 2`), or a frozen independent kernel for
    /// the first AELBO variant.
    pub fn initial_phi(&self, rng: &mut RngStream) -> Result<PhiStep> {
        let Some(prev) = &self.phi else { return Ok(PhiStep::initial(self.model.dx())) };
        let mut next = PhiStep::init_from_previous(prev, &self.config.kernel, rng)?;
        if self.config.objective == Objective::Aelbo1 {
            let d = prev.dim();
            next.kernel = Some(BackwardKernel::Affine {
                w: DMatrix::zeros(d, d),
                b: prev.mu.clone(),
                log_sigma_tilde: prev.log_sigma.clone(),
            });
        }
        Ok(next)
    }

    pub fn step(&mut self, y: &DVector<f64>) -> Result<StepRecord> {
        let start = clock();
        let t = self.t + 1;
        let seed = self.config.seed;
        let phi0 = self.initial_phi(&mut Self::step_stream(seed, t, stream::INIT))?;
        let zero_t = GradApprox::Zero { d_out: self.model.dx() };
        let uses_t = self.config.objective == Objective::Ours;
        let ctx = StepContext {
            t,
            model: &self.model,
            phi: &phi0,
            phi_prev: self.phi.as_ref(),
            y,
            t_hat: if uses_t { &self.t_hat } else { &zero_t },
            s_hat: &self.s_hat,
            freeze_kernel: self.config.objective == Objective::Aelbo1,
        };
        ctx.validate()?;
        let out = inner_optimize_phi(&ctx, &self.config.inner, &mut Self::step_stream(seed, t, stream::INNER))?;
        if let Some(e) = out.failure {
            return Err(e);
        }
        let phi = out.phi;
        let ctx = StepContext { phi: &phi, ..ctx };
        let learn = self.config.learn_theta && self.model.d_theta() > 0;
        let need_fit = uses_t || (learn && self.config.objective == Objective::Ours) || self.config.relbo;
        let fitted = if need_fit {
            Some(fit_approximators(&ctx, self.v_hat.as_ref(), &self.config.regression, &mut Self::step_stream(seed, t, stream::FIT))?)
        } else {
            None
        };
        let mut new_theta = None;
        if learn {
            let eta = self.config.theta.eta0 * (t as f64).powf(-self.config.theta.exponent);
            let ours = self.config.objective == Objective::Ours;
            let dir = match (&fitted, self.config.theta.uses_refit_s && ours) {
                (Some(f), true) => ThetaDirection::Refit(&f.s_hat),
                _ => ThetaDirection::Literal,
            };
            let zero_s = GradApprox::Zero { d_out: self.model.d_theta() };
            let tctx = StepContext { s_hat: if ours { &self.s_hat } else { &zero_s }, ..ctx };
            new_theta = Some(theta_step(&tctx, self.config.theta.n, eta, dir, &mut Self::step_stream(seed, t, stream::THETA))?);
        }
        let mut eval_rng = Self::step_stream(seed, t, stream::EVAL);
        let (step_objective, _) = mean_reward(&ctx, self.config.eval_n.clamp(1, 1000), &mut eval_rng)?;
        let mut relbo = None;
        if let Some(f) = &fitted {
            if let Some(v) = &f.v_hat {
                relbo = Some(relbo_from(v, &phi, self.config.eval_n.max(1), &mut eval_rng)?);
            }
        }
        // Commit.
        if let Some(f) = fitted {
            if uses_t {
                self.t_hat = f.t_hat;
            }
            if learn && self.config.objective == Objective::Ours {
                self.s_hat = f.s_hat;
            }
            if f.v_hat.is_some() {
                self.v_hat = f.v_hat;
            }
        }
        if let Some(th) = new_theta {
            self.model.set_theta_flat(th.as_slice())?;
        }
        let phi_norm = phi.flat().norm();
        self.phi = Some(phi.clone());
        self.t = t;
        Ok(StepRecord {
            t,
            phi,
            theta: self.model.theta_flat(),
            relbo,
            step_objective,
            step_ms: start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3),
            phi_grad_norm: out.last_grad_norm,
            phi_norm,
        })
    }

    pub fn checkpoint(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn restore(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

/// Processes `observations` in order. A failing step ends the run and is
/// reported in [`RunResult::error`] alongside the records produced so far.
pub fn run_online(model: ModelTheta, config: EngineConfig, observations: &[DVector<f64>]) -> RunResult {
    let mut engine = OnlineFilter::new(model, config);
    let mut records = Vec::with_capacity(observations.len());
    for y in observations {
        match engine.step(y) {
            Ok(r) => records.push(r),
            Err(e) => return RunResult { records, error: Some(format!("step {}: {e}", engine.t + 1)) },
        }
    }
    RunResult { records, error: None }
}

/// Index of every symbol in the value/gradient recursions and the function
/// that evaluates it.
pub const VALUE_FN_SYMBOLS: &[(&str, &str)] = &[
    ("r_t", "engine::reward"),
    ("m_t", "variational::pseudo_transition_logpdf"),
    ("s_t", "engine::reward (d_theta)"),
    ("V_t", "engine::relbo_update"),
    ("S_t", "engine::fit_approximators (s_hat)"),
    ("T_t", "engine::fit_approximators (t_hat)"),
];

/// Step timer. `wasm32-unknown-unknown` has no clock, so timings read zero there.
#[cfg(not(target_arch = "wasm32"))]
fn clock() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn clock() -> Option<std::time::Instant> {
    None
}
