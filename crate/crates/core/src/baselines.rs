//! Reference filters and comparison objectives: Kalman filtering and its
//! parameter sensitivities, ensemble Kalman and bootstrap particle filters,
//! and the two approximate per-step ELBOs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{draw_noise, sample_terms, StepContext, TermsWant};
use crate::error::{check_dim, Error, Result};
use crate::math::{gaussian_logpdf, log_sum_exp, spd_solve, Covariance, GaussianDist, RngStream, Want};
use crate::models::{LinearGaussian, ModelTheta, ThetaMask};
use crate::regression::GradApprox;
use crate::variational::{BackwardKernel, PhiStep, PhiTrajectory};

/// Filtering distribution and accumulated log evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub filter: GaussianDist,
    pub loglik: f64,
    /// Observations absorbed so far; at 0 the next step uses the prior.
    pub steps: usize,
}

impl KalmanState {
    pub fn new(model: &ModelTheta) -> Result<Self> {
        let lg = model.as_linear_gaussian()?;
        Ok(Self {
            filter: GaussianDist::dense(lg.prior_mean.clone(), DMatrix::from_diagonal(&lg.prior_var))?,
            loglik: 0.0,
            steps: 0,
        })
    }
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Predictive moments of `x_t` given `y^{t-1}`.
fn predict(lg: &LinearGaussian, state: &KalmanState) -> (DVector<f64>, DMatrix<f64>) {
    let p = state.filter.cov_matrix();
    if state.steps == 0 {
        (state.filter.mean.clone(), p)
    } else {
        (&lg.f * &state.filter.mean, sym(&lg.f * p * lg.f.transpose() + DMatrix::from_diagonal(&lg.u)))
    }
}

/// One Kalman predict/update cycle, adding `log p(y_t | y^{t-1})` to the log evidence.
pub fn kf_step(model: &ModelTheta, state: &KalmanState, y: &DVector<f64>) -> Result<KalmanState> {
    let lg = model.as_linear_gaussian()?;
    check_dim("observation", lg.g.nrows(), y.len())?;
    let (m, p) = predict(lg, state);
    let s = sym(&lg.g * &p * lg.g.transpose() + DMatrix::from_diagonal(&lg.v));
    let pred_y = GaussianDist::dense(&lg.g * &m, s.clone()).map_err(|_| Error::NotSpd("innovation covariance".into()))?;
    let inc = gaussian_logpdf(y, &pred_y, Want::NONE)?.value;
    let pgt = &p * lg.g.transpose();
    let k = spd_solve(&s, &pgt.transpose())?.transpose();
    let mean = &m + &k * (y - &lg.g * &m);
    let cov = sym(&p - &k * &lg.g * &p);
    Ok(KalmanState { filter: GaussianDist::dense(mean, cov)?, loglik: state.loglik + inc, steps: state.steps + 1 })
}

/// Runs [`kf_step`] over `ys`, returning the state after each observation.
pub fn kf_filter(model: &ModelTheta, ys: &[DVector<f64>]) -> Result<Vec<KalmanState>> {
    let mut s = KalmanState::new(model)?;
    let mut out = Vec::with_capacity(ys.len());
    for y in ys {
        s = kf_step(model, &s, y)?;
        out.push(s.clone());
    }
    Ok(out)
}

/// Joint law of `(x_{t-1}, x_t)` given `y^t`, from the filter at `t-1`.
pub fn kf_pairwise_smooth(model: &ModelTheta, prev_filter: &GaussianDist, y: &DVector<f64>) -> Result<GaussianDist> {
    let lg = model.as_linear_gaussian()?;
    check_dim("observation", lg.g.nrows(), y.len())?;
    let d = lg.f.nrows();
    check_dim("previous filter", d, prev_filter.dim())?;
    let p = prev_filter.cov_matrix();
    let fp = &lg.f * &p;
    let mut mean = DVector::zeros(2 * d);
    mean.rows_mut(0, d).copy_from(&prev_filter.mean);
    mean.rows_mut(d, d).copy_from(&(&lg.f * &prev_filter.mean));
    let mut cov = DMatrix::zeros(2 * d, 2 * d);
    cov.view_mut((0, 0), (d, d)).copy_from(&p);
    cov.view_mut((d, 0), (d, d)).copy_from(&fp);
    cov.view_mut((0, d), (d, d)).copy_from(&fp.transpose());
    cov.view_mut((d, d), (d, d)).copy_from(&(&fp * lg.f.transpose() + DMatrix::from_diagonal(&lg.u)));
    let mut h = DMatrix::zeros(lg.g.nrows(), 2 * d);
    h.view_mut((0, d), (lg.g.nrows(), d)).copy_from(&lg.g);
    let s = sym(&h * &cov * h.transpose() + DMatrix::from_diagonal(&lg.v));
    let k = spd_solve(&s, &(&h * &cov))?.transpose();
    let post_mean = &mean + &k * (y - &h * &mean);
    let post_cov = sym(&cov - &k * &h * &cov);
    GaussianDist::dense(post_mean, post_cov)
}

fn diag_log_sigma(p: &DMatrix<f64>, what: &str) -> Result<DVector<f64>> {
    let scale = p.diagonal().amax().max(1e-300);
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            if i != j && p[(i, j)].abs() > 1e-10 * scale {
                return Err(Error::Precondition(format!("{what} is not diagonal")));
            }
        }
    }
    Ok(p.diagonal().map(|v| 0.5 * v.ln()))
}

/// Variational steps that reproduce the exact filter marginals and backward
/// kernels `p(x_{t-1} | x_t, y^{t-1})`. Needs diagonal filter covariances,
/// as produced by a diagonal model with a diagonal prior.
pub fn kalman_phi_trajectory(model: &ModelTheta, ys: &[DVector<f64>]) -> Result<PhiTrajectory> {
    let lg = model.as_linear_gaussian()?;
    let states = kf_filter(model, ys)?;
    let mut steps = Vec::with_capacity(ys.len());
    for (t, st) in states.iter().enumerate() {
        let p = st.filter.cov_matrix();
        let mut step = PhiStep {
            mu: st.filter.mean.clone(),
            log_sigma: diag_log_sigma(&p, "filter covariance")?,
            kernel: None,
        };
        if t > 0 {
            let prev = &states[t - 1];
            let pp = prev.filter.cov_matrix();
            let (mpred, ppred) = predict(lg, prev);
            // J = P F^T (P^-)^{-1}
            let j = spd_solve(&ppred, &(&lg.f * &pp))?.transpose();
            let b = &prev.filter.mean - &j * mpred;
            let cond = sym(&pp - &j * &lg.f * &pp);
            step.kernel = Some(BackwardKernel::Affine { w: j, b, log_sigma_tilde: diag_log_sigma(&cond, "backward covariance")? });
        }
        steps.push(step);
    }
    PhiTrajectory::new(steps)
}

/// Kalman state with derivatives of the filter moments w.r.t. each
/// learnable parameter coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentState {
    pub kf: KalmanState,
    pub dm: Vec<DVector<f64>>,
    pub dp: Vec<DMatrix<f64>>,
}

impl TangentState {
    pub fn new(model: &ModelTheta) -> Result<Self> {
        let lg = model.as_linear_gaussian()?;
        let n = model.d_theta();
        let d = lg.f.nrows();
        Ok(Self { kf: KalmanState::new(model)?, dm: vec![DVector::zeros(d); n], dp: vec![DMatrix::zeros(d, d); n] })
    }
}

/// `(dF, dG)` for parameter coordinate `k`.
fn param_direction(lg: &LinearGaussian, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut df = DMatrix::zeros(lg.f.nrows(), lg.f.ncols());
    let mut dg = DMatrix::zeros(lg.g.nrows(), lg.g.ncols());
    match lg.learn {
        ThetaMask::Fixed => {}
        ThetaMask::Diagonal => {
            let nf = lg.f.nrows();
            if k < nf {
                df[(k, k)] = 1.0;
            } else {
                dg[(k - nf, k - nf)] = 1.0;
            }
        }
        ThetaMask::Full => {
            let nf = lg.f.len();
            if k < nf {
                df[(k / lg.f.ncols(), k % lg.f.ncols())] = 1.0;
            } else {
                let k = k - nf;
                dg[(k / lg.g.ncols(), k % lg.g.ncols())] = 1.0;
            }
        }
    }
    (df, dg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmleStep {
    pub theta: DVector<f64>,
    pub state: TangentState,
    /// Gradient of `log p(y_t | y^{t-1})` w.r.t. the learnable parameters.
    pub grad: DVector<f64>,
    pub increment: f64,
}

/// Kalman step with sensitivity propagation, then `theta + eta * grad` of
/// the predictive log-likelihood increment. Sensitivities carried from
/// earlier steps are those computed under the parameters in force at the time.
pub fn rmle_exact_step(model: &ModelTheta, ts: &TangentState, y: &DVector<f64>, eta: f64) -> Result<RmleStep> {
    let lg = model.as_linear_gaussian()?;
    check_dim("observation", lg.g.nrows(), y.len())?;
    let n = model.d_theta();
    if n == 0 {
        return Err(Error::Precondition("model has no learnable parameters".into()));
    }
    check_dim("tangent coordinates", n, ts.dm.len())?;
    let (m, p) = predict(lg, &ts.kf);
    let g = &lg.g;
    let s = sym(g * &p * g.transpose() + DMatrix::from_diagonal(&lg.v));
    let chol = s.clone().cholesky().ok_or_else(|| Error::NotSpd("innovation covariance".into()))?;
    let s_inv = chol.inverse();
    let e = y - g * &m;
    let s_inv_e = &s_inv * &e;
    let pgt = &p * g.transpose();
    let k = &pgt * &s_inv;
    let kg = &k * g;
    let d = m.len();
    let ikg = DMatrix::identity(d, d) - &kg;
    let new_m = &m + &k * &e;
    let new_p = sym(&ikg * &p);
    let pred_y = GaussianDist::dense(g * &m, s.clone())?;
    let increment = gaussian_logpdf(y, &pred_y, Want::NONE)?.value;
    let mut grad = DVector::zeros(n);
    let mut dm_out = Vec::with_capacity(n);
    let mut dp_out = Vec::with_capacity(n);
    for c in 0..n {
        let (df, dg) = param_direction(lg, c);
        let (dmp, dpp) = if ts.kf.steps == 0 {
            (DVector::zeros(d), DMatrix::zeros(d, d))
        } else {
            let pf = ts.kf.filter.cov_matrix();
            let dm0 = &ts.dm[c];
            let dp0 = &ts.dp[c];
            (
                &df * &ts.kf.filter.mean + &lg.f * dm0,
                sym(&df * &pf * lg.f.transpose() + &lg.f * dp0 * lg.f.transpose() + &lg.f * &pf * df.transpose()),
            )
        };
        let ds = sym(&dg * &p * g.transpose() + g * &dpp * g.transpose() + g * &p * dg.transpose());
        let de = -(&dg * &m) - g * &dmp;
        grad[c] = -0.5 * ((&s_inv * &ds).trace() + 2.0 * s_inv_e.dot(&de) - s_inv_e.dot(&(&ds * &s_inv_e)));
        let dk = &dpp * g.transpose() * &s_inv + &p * dg.transpose() * &s_inv - &pgt * &s_inv * &ds * &s_inv;
        dm_out.push(&dmp + &dk * &e + &k * &de);
        dp_out.push(sym(-(&dk * g + &k * &dg) * &p + &ikg * &dpp));
    }
    let theta = model.theta_flat() + &grad * eta;
    Ok(RmleStep {
        theta,
        state: TangentState {
            kf: KalmanState {
                filter: GaussianDist::dense(new_m, new_p)?,
                loglik: ts.kf.loglik + increment,
                steps: ts.kf.steps + 1,
            },
            dm: dm_out,
            dp: dp_out,
        },
        grad,
        increment,
    })
}

/// Stochastic ensemble Kalman filter with perturbed observations.
/// Particles are the columns of `particles`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub particles: DMatrix<f64>,
    /// Gaussian-approximation log evidence from the ensemble innovation moments.
    pub loglik: f64,
    pub steps: usize,
    /// Set when the ensemble is too small for a full-rank sample covariance
    /// and the ridge carries the rank.
    pub ridge_repaired: bool,
}

/// Ridge added to sample covariances.
pub const ENKF_RIDGE: f64 = 1e-8;

fn prior_particles(model: &ModelTheta, n: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let d = model.dx();
    let mut p = DMatrix::zeros(d, n);
    for i in 0..n {
        p.set_column(i, &model.sample_prior(rng));
    }
    p
}

impl Ensemble {
    pub fn from_prior(model: &ModelTheta, n: usize, rng: &mut RngStream) -> Result<Self> {
        if n < 2 {
            return Err(Error::Precondition("ensemble needs at least two members".into()));
        }
        Ok(Self { particles: prior_particles(model, n, rng), loglik: 0.0, steps: 0, ridge_repaired: false })
    }

    pub fn mean(&self) -> DVector<f64> {
        self.particles.column_mean()
    }
}

fn propagate(model: &ModelTheta, particles: &mut DMatrix<f64>, rng: &mut RngStream) {
    for i in 0..particles.ncols() {
        let x = particles.column(i).into_owned();
        particles.set_column(i, &model.sample_transition(&x, rng));
    }
}

pub fn enkf_step(ens: &Ensemble, model: &ModelTheta, y: &DVector<f64>, rng: &mut RngStream) -> Result<Ensemble> {
    check_dim("observation", model.dy(), y.len())?;
    let n = ens.particles.ncols();
    if n < 2 {
        return Err(Error::Precondition("ensemble needs at least two members".into()));
    }
    let mut x = ens.particles.clone();
    if ens.steps > 0 {
        propagate(model, &mut x, rng);
    }
    let d = x.nrows();
    let mean = x.column_mean();
    let mut centred = x.clone();
    for mut c in centred.column_iter_mut() {
        c -= &mean;
    }
    let mut p = &centred * centred.transpose() / (n as f64 - 1.0);
    for i in 0..d {
        p[(i, i)] += ENKF_RIDGE;
    }
    let h = model.observation_matrix();
    let r = model.observation_noise_var();
    let s = sym(h * &p * h.transpose() + DMatrix::from_diagonal(&r));
    let k = spd_solve(&s, &(h * &p))?.transpose();
    let pred_y = GaussianDist::dense(h * &mean, s)?;
    let inc = gaussian_logpdf(y, &pred_y, Want::NONE)?.value;
    let rs = r.map(f64::sqrt);
    for i in 0..n {
        let noise = rs.component_mul(&rng.normal_vec(y.len()));
        let xi = x.column(i).into_owned();
        let innov = y + noise - h * &xi;
        x.set_column(i, &(xi + &k * innov));
    }
    Ok(Ensemble { particles: x, loglik: ens.loglik + inc, steps: ens.steps + 1, ridge_repaired: ens.ridge_repaired || n <= d })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resampling {
    Multinomial,
    Systematic,
}

/// Bootstrap particle filter state. Particles are columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    pub particles: DMatrix<f64>,
    /// Normalised log weights (uniform after resampling).
    pub log_weights: Vec<f64>,
    pub loglik: f64,
    /// Sum of delta-method variances of the per-step log-evidence increments.
    pub loglik_var: f64,
    /// Weighted mean before the last resampling.
    pub filter_mean: DVector<f64>,
    pub steps: usize,
    pub resampling: Resampling,
}

impl ParticleSet {
    pub fn from_prior(model: &ModelTheta, n: usize, resampling: Resampling, rng: &mut RngStream) -> Result<Self> {
        if n == 0 {
            return Err(Error::Precondition("particle filter needs at least one particle".into()));
        }
        Ok(Self {
            particles: prior_particles(model, n, rng),
            log_weights: vec![-(n as f64).ln(); n],
            loglik: 0.0,
            loglik_var: 0.0,
            filter_mean: DVector::zeros(model.dx()),
            steps: 0,
            resampling,
        })
    }

    pub fn loglik_stderr(&self) -> f64 {
        self.loglik_var.sqrt()
    }
}

fn resample_indices(w: &[f64], kind: Resampling, rng: &mut RngStream) -> Vec<usize> {
    let n = w.len();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for v in w {
        acc += v;
        cdf.push(acc);
    }
    let total = acc;
    let mut out = Vec::with_capacity(n);
    match kind {
        Resampling::Multinomial => {
            let mut u: Vec<f64> = (0..n).map(|_| rng.uniform() * total).collect();
            u.sort_by(|a, b| a.total_cmp(b));
            let mut j = 0;
            for ui in u {
                while j + 1 < n && cdf[j] < ui {
                    j += 1;
                }
                out.push(j);
            }
        }
        Resampling::Systematic => {
            let u0 = rng.uniform();
            let mut j = 0;
            for i in 0..n {
                let ui = (u0 + i as f64) / n as f64 * total;
                while j + 1 < n && cdf[j] < ui {
                    j += 1;
                }
                out.push(j);
            }
        }
    }
    out
}

pub fn bpf_step(ps: &ParticleSet, model: &ModelTheta, y: &DVector<f64>, rng: &mut RngStream) -> Result<ParticleSet> {
    check_dim("observation", model.dy(), y.len())?;
    let n = ps.particles.ncols();
    let mut x = ps.particles.clone();
    if ps.steps > 0 {
        propagate(model, &mut x, rng);
    }
    let mut lw = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x.column(i).into_owned();
        lw.push(model.observation_logpdf(&xi, y, crate::models::ModelWant::NONE)?.value + ps.log_weights[i] + (n as f64).ln());
    }
    let lse = log_sum_exp(&lw);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights { step: ps.steps + 1 });
    }
    let inc = lse - (n as f64).ln();
    let w: Vec<f64> = lw.iter().map(|v| (v - lse).exp()).collect();
    // Relative variance of the mean weight: var(w) / (N mean(w)^2) with w normalised to sum 1.
    let mean_w = 1.0 / n as f64;
    let var_w = w.iter().map(|v| (v - mean_w).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    let rel_var = var_w / (n as f64 * mean_w * mean_w);
    let filter_mean = &x * DVector::from_column_slice(&w);
    let idx = resample_indices(&w, ps.resampling, rng);
    let mut res = DMatrix::zeros(x.nrows(), n);
    for (i, &j) in idx.iter().enumerate() {
        res.set_column(i, &x.column(j));
    }
    Ok(ParticleSet {
        particles: res,
        log_weights: vec![-(n as f64).ln(); n],
        loglik: ps.loglik + inc,
        loglik_var: ps.loglik_var + rel_var,
        filter_mean,
        steps: ps.steps + 1,
        resampling: ps.resampling,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AelboVariant {
    /// `q_{t-1}(x_{t-1}) q_t(x_t)`.
    Independent,
    /// `q_t(x_t) q_t(x_{t-1} | x_t)`.
    Conditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AelboEval {
    pub value: f64,
    pub stderr: f64,
    pub grad: Option<DVector<f64>>,
}

/// Per-step approximate ELBO `E[log f g q_{t-1}(x_{t-1}) - log q(x_{t-1}, x_t)]`
/// with `q_{t-1}`'s parameters held fixed. For the independent variant the
/// kernel of `phi` is replaced by `q_{t-1}` and its gradient block is zero.
#[allow(clippy::too_many_arguments)]
pub fn aelbo_objective(
    variant: AelboVariant,
    phi_prev: &PhiStep,
    phi: &PhiStep,
    model: &ModelTheta,
    t: usize,
    y: &DVector<f64>,
    n: usize,
    rng: &mut RngStream,
    want_grad: bool,
) -> Result<AelboEval> {
    if n == 0 {
        return Err(Error::Precondition("sample count must be positive".into()));
    }
    if t < 2 {
        return Err(Error::Precondition("approximate ELBO steps start at t = 2".into()));
    }
    let mut phi = phi.clone();
    if variant == AelboVariant::Independent {
        let d = phi_prev.dim();
        phi.kernel = Some(BackwardKernel::Affine {
            w: DMatrix::zeros(d, d),
            b: phi_prev.mu.clone(),
            log_sigma_tilde: phi_prev.log_sigma.clone(),
        });
    }
    let zt = GradApprox::Zero { d_out: model.dx() };
    let zs = GradApprox::Zero { d_out: model.d_theta() };
    let ctx = StepContext {
        t,
        model,
        phi: &phi,
        phi_prev: Some(phi_prev),
        y,
        t_hat: &zt,
        s_hat: &zs,
        freeze_kernel: variant == AelboVariant::Independent,
    };
    ctx.validate()?;
    let mut vals = Vec::with_capacity(n);
    let mut grad = want_grad.then(|| DVector::zeros(phi.param_count()));
    for _ in 0..n {
        let (ep, e) = draw_noise(&ctx, rng);
        let s = sample_terms(&ctx, &ep, &e, TermsWant { phi_grad: want_grad, ..Default::default() })?;
        vals.push(s.reward);
        if let Some(g) = grad.as_mut() {
            *g += s.phi_grad.unwrap();
        }
    }
    let (value, stderr) = crate::math::mean_and_stderr(&vals);
    Ok(AelboEval { value, stderr, grad: grad.map(|g| g / n as f64) })
}

/// Diagonal Gaussian view of a dense filter (for metrics on diagonal models).
pub fn as_diagonal(g: &GaussianDist) -> GaussianDist {
    GaussianDist { mean: g.mean.clone(), cov: Covariance::Diagonal(g.variances()) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_diff_grad, rel_err};

    fn scalar_model(f: f64, g: f64, u: f64, v: f64) -> ModelTheta {
        ModelTheta::LinearGaussian(LinearGaussian {
            f: DMatrix::from_element(1, 1, f),
            g: DMatrix::from_element(1, 1, g),
            u: DVector::from_element(1, u),
            v: DVector::from_element(1, v),
            prior_mean: DVector::zeros(1),
            prior_var: DVector::from_element(1, 1.0),
            learn: ThetaMask::Diagonal,
        })
    }

    #[test]
    fn hand_computed_update() {
        let m = scalar_model(1.0, 1.0, 1.0, 1.0);
        let s0 = KalmanState::new(&m).unwrap();
        // Absorb an uninformative first observation so the next step predicts N(0, 2).
        let mut s = KalmanState { filter: GaussianDist::dense(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap(), steps: 1, ..s0 };
        s = kf_step(&m, &s, &DVector::from_element(1, 1.0)).unwrap();
        assert!((s.filter.mean[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((s.filter.cov_matrix()[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn uninformative_observation() {
        let m = scalar_model(0.8, 1.0, 0.5, 1e12);
        let s = kf_step(&m, &KalmanState::new(&m).unwrap(), &DVector::from_element(1, 3.0)).unwrap();
        assert!(s.filter.mean[0].abs() <= 1e-6);
    }

    #[test]
    fn non_linear_model_is_refused() {
        let mut rng = RngStream::new(1, 0);
        let c = ModelTheta::Crnn(crate::models::Crnn::chaotic(2, &mut rng));
        assert!(matches!(KalmanState::new(&c), Err(Error::WrongVariant(_))));
    }

    #[test]
    fn pairwise_degenerate_and_consistency() {
        let mut rng = RngStream::new(2, 0);
        let mut lg = LinearGaussian::random_diagonal(2, 1e-12, 0.1, &mut rng);
        lg.f[(0, 1)] = 0.3;
        let model = ModelTheta::LinearGaussian(lg.clone());
        let tr = model.sample_trajectory(3, &mut rng);
        let st = kf_filter(&model, &tr.observations).unwrap();
        let j = kf_pairwise_smooth(&model, &st[1].filter, &tr.observations[2]).unwrap();
        let cov = j.cov_matrix();
        let var_prev = cov.view((0, 0), (2, 2)).into_owned();
        let cross = cov.view((2, 0), (2, 2)).into_owned();
        assert!((cross - &lg.f * var_prev).amax() < 1e-8);
        let model = ModelTheta::LinearGaussian(LinearGaussian { u: DVector::from_element(2, 0.05), ..lg });
        let st = kf_filter(&model, &tr.observations).unwrap();
        let j = kf_pairwise_smooth(&model, &st[1].filter, &tr.observations[2]).unwrap();
        assert!((j.mean.rows(2, 2) - &st[2].filter.mean).amax() < 1e-10);
        assert!((j.cov_matrix().view((2, 2), (2, 2)) - st[2].filter.cov_matrix()).amax() < 1e-10);
    }

    #[test]
    fn exact_phi_matches_filter() {
        let mut rng = RngStream::new(3, 0);
        let model = ModelTheta::LinearGaussian(LinearGaussian::random_diagonal(3, 0.1, 0.2, &mut rng));
        let tr = model.sample_trajectory(5, &mut rng);
        let phis = kalman_phi_trajectory(&model, &tr.observations).unwrap();
        let st = kf_filter(&model, &tr.observations).unwrap();
        for t in 1..5 {
            let q = phis.steps[t].pairwise_joint().unwrap();
            let p = kf_pairwise_smooth(&model, &st[t - 1].filter, &tr.observations[t]).unwrap();
            assert!((&q.mean - &p.mean).amax() < 1e-10);
            assert!((q.cov_matrix() - p.cov_matrix()).amax() < 1e-10);
        }
    }

    #[test]
    fn tangent_gradient_matches_finite_differences() {
        for mask in [ThetaMask::Diagonal, ThetaMask::Full] {
            let mut rng = RngStream::new(4, 0);
            let mut lg = LinearGaussian::random_diagonal(2, 0.1, 0.2, &mut rng);
            lg.g = DMatrix::from_fn(2, 2, |i, j| if i == j { 0.8 } else { 0.2 });
            lg.learn = mask;
            let model = ModelTheta::LinearGaussian(lg);
            let tr = model.sample_trajectory(8, &mut rng);
            let mut ts = TangentState::new(&model).unwrap();
            for t in 0..8 {
                let step = rmle_exact_step(&model, &ts, &tr.observations[t], 0.0).unwrap();
                assert_eq!(step.theta, model.theta_flat());
                let inc = |v: &DVector<f64>| {
                    let mut m2 = model.clone();
                    m2.set_theta_flat(v.as_slice()).unwrap();
                    let st = kf_filter(&m2, &tr.observations[..=t]).unwrap();
                    st[t].loglik - if t > 0 { st[t - 1].loglik } else { 0.0 }
                };
                let fd = finite_diff_grad(inc, &model.theta_flat(), 1e-6).unwrap();
                assert!(rel_err(&step.grad, &fd) < 1e-5, "t={t} {}", rel_err(&step.grad, &fd));
                ts = step.state;
            }
        }
    }

    #[test]
    fn enkf_uninformative_and_deterministic() {
        let m = scalar_model(0.9, 1.0, 0.1, 1e10);
        let mut rng = RngStream::new(5, 0);
        let e0 = Ensemble::from_prior(&m, 500, &mut rng).unwrap();
        let y = DVector::from_element(1, e0.mean()[0]);
        let e1 = enkf_step(&e0, &m, &y, &mut rng.clone()).unwrap();
        assert!((e1.mean() - e0.mean()).amax() < 1e-3);
        let e2 = enkf_step(&e0, &m, &y, &mut rng.clone()).unwrap();
        assert_eq!(e1, e2);
        assert!(Ensemble::from_prior(&m, 1, &mut rng).is_err());
    }

    #[test]
    fn bpf_uniform_weights_under_flat_likelihood() {
        let m = scalar_model(0.9, 1.0, 0.1, 1e12);
        let mut rng = RngStream::new(6, 0);
        let ps = ParticleSet::from_prior(&m, 200, Resampling::Multinomial, &mut rng).unwrap();
        let y = DVector::from_element(1, 0.0);
        let next = bpf_step(&ps, &m, &y, &mut rng).unwrap();
        let at_one = m.observation_logpdf(&ps.particles.column(0).into_owned(), &y, crate::models::ModelWant::NONE).unwrap().value;
        assert!((next.loglik - at_one).abs() < 1e-6);
        assert_eq!(next.particles.ncols(), 200);
        let total: f64 = next.log_weights.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bpf_degenerate_weights() {
        let m = scalar_model(0.9, 1.0, 0.1, 1e-300);
        let mut rng = RngStream::new(7, 0);
        let ps = ParticleSet::from_prior(&m, 5, Resampling::Systematic, &mut rng).unwrap();
        let r = bpf_step(&ps, &m, &DVector::from_element(1, 1e6), &mut rng);
        assert!(matches!(r, Err(Error::DegenerateWeights { step: 1 })));
    }

    #[test]
    fn resampling_preserves_count() {
        let mut rng = RngStream::new(8, 0);
        for kind in [Resampling::Multinomial, Resampling::Systematic] {
            let w = vec![0.1, 0.0, 0.6, 0.3];
            let idx = resample_indices(&w, kind, &mut rng);
            assert_eq!(idx.len(), 4);
            assert!(!idx.contains(&1));
        }
    }
}
