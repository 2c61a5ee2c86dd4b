//! Independent oracles shared by the integration tests. Everything here is
//! written directly against nalgebra and the model fields, not the library's
//! filtering code.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ovfilt_core::engine::{reward, RewardWant, StepContext};
use ovfilt_core::math::RngStream;
use ovfilt_core::models::{LinearGaussian, ModelTheta, ThetaMask};
use ovfilt_core::regression::GradApprox;
use ovfilt_core::variational::{BackwardKernel, PhiStep, PhiTrajectory};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn lg(model: &ModelTheta) -> &LinearGaussian {
    match model {
        ModelTheta::LinearGaussian(m) => m,
        _ => panic!("linear-Gaussian model expected"),
    }
}

/// Random linear-Gaussian model; `diagonal` gives diagonal `F`, `G` with
/// entries in [0.5, 1], otherwise dense entries with spectral scale below 1.
pub fn random_lg(dx: usize, dy: usize, diagonal: bool, learn: ThetaMask, rng: &mut RngStream) -> ModelTheta {
    let (f, g) = if diagonal {
        assert_eq!(dx, dy);
        (
            DMatrix::from_diagonal(&DVector::from_fn(dx, |_, _| rng.uniform_range(0.5, 1.0))),
            DMatrix::from_diagonal(&DVector::from_fn(dy, |_, _| rng.uniform_range(0.5, 1.0))),
        )
    } else {
        let s = 0.9 / dx as f64;
        (DMatrix::from_fn(dx, dx, |_, _| rng.uniform_range(-s, s) + 0.0) + DMatrix::identity(dx, dx) * 0.5, DMatrix::from_fn(dy, dx, |_, _| rng.normal()))
    };
    ModelTheta::LinearGaussian(LinearGaussian {
        f,
        g,
        u: DVector::from_fn(dx, |_, _| rng.uniform_range(0.05, 0.3)),
        v: DVector::from_fn(dy, |_, _| rng.uniform_range(0.05, 0.3)),
        prior_mean: DVector::from_fn(dx, |_, _| 0.3 * rng.normal()),
        prior_var: DVector::from_fn(dx, |_, _| rng.uniform_range(0.5, 1.5)),
        learn,
    })
}

pub fn gauss_logpdf(y: &DVector<f64>, m: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    let ch = s.clone().cholesky().expect("SPD");
    let r = y - m;
    let z = ch.solve(&r);
    let logdet: f64 = ch.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (y.len() as f64 * LN_2PI + logdet + r.dot(&z))
}

/// `KL(N(a, A) || N(c, C))`.
pub fn kl(a: &DVector<f64>, am: &DMatrix<f64>, c: &DVector<f64>, cm: &DMatrix<f64>) -> f64 {
    let ch = cm.clone().cholesky().expect("SPD");
    let ci = ch.inverse();
    let diff = c - a;
    let ld = |m: &DMatrix<f64>| m.clone().cholesky().unwrap().l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>();
    0.5 * ((&ci * am).trace() + diff.dot(&(&ci * &diff)) - a.len() as f64 + ld(cm) - ld(am))
}

pub struct Filtered {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
    pub pred_mean: Vec<DVector<f64>>,
    pub pred_cov: Vec<DMatrix<f64>>,
    pub loglik: Vec<f64>,
}

/// Textbook Kalman filter.
pub fn kalman(m: &LinearGaussian, ys: &[DVector<f64>]) -> Filtered {
    let mut out = Filtered { mean: vec![], cov: vec![], pred_mean: vec![], pred_cov: vec![], loglik: vec![] };
    let mut ll = 0.0;
    for (t, y) in ys.iter().enumerate() {
        let (mp, pp) = if t == 0 {
            (m.prior_mean.clone(), DMatrix::from_diagonal(&m.prior_var))
        } else {
            (&m.f * &out.mean[t - 1], &m.f * &out.cov[t - 1] * m.f.transpose() + DMatrix::from_diagonal(&m.u))
        };
        let s = &m.g * &pp * m.g.transpose() + DMatrix::from_diagonal(&m.v);
        ll += gauss_logpdf(y, &(&m.g * &mp), &s);
        let k = &pp * m.g.transpose() * s.clone().try_inverse().unwrap();
        let mean = &mp + &k * (y - &m.g * &mp);
        let cov = &pp - &k * &m.g * &pp;
        out.pred_mean.push(mp);
        out.pred_cov.push(pp);
        out.mean.push(mean);
        out.cov.push((&cov + cov.transpose()) * 0.5);
        out.loglik.push(ll);
    }
    out
}

/// Rauch-Tung-Striebel smoothed marginals `p(x_t | y^T)`.
pub fn rts(m: &LinearGaussian, ys: &[DVector<f64>]) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let f = kalman(m, ys);
    let n = ys.len();
    let mut out = vec![(f.mean[n - 1].clone(), f.cov[n - 1].clone()); n];
    for t in (0..n - 1).rev() {
        let j = &f.cov[t] * m.f.transpose() * f.pred_cov[t + 1].clone().try_inverse().unwrap();
        let mean = &f.mean[t] + &j * (&out[t + 1].0 - &f.pred_mean[t + 1]);
        let cov = &f.cov[t] + &j * (&out[t + 1].1 - &f.pred_cov[t + 1]) * j.transpose();
        out[t] = (mean, cov);
    }
    out
}

/// Joint Gaussian of `(x_{1:T}, y_{1:T})` written out block by block.
pub fn dense_joint(m: &LinearGaussian, horizon: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = m.f.nrows();
    let e = m.g.nrows();
    let nx = d * horizon;
    let mut mean = DVector::zeros(nx + e * horizon);
    let mut var = vec![DMatrix::from_diagonal(&m.prior_var)];
    let mut mu = vec![m.prior_mean.clone()];
    for t in 1..horizon {
        mu.push(&m.f * &mu[t - 1]);
        var.push(&m.f * &var[t - 1] * m.f.transpose() + DMatrix::from_diagonal(&m.u));
    }
    let mut fpow = vec![DMatrix::identity(d, d)];
    for k in 1..horizon {
        fpow.push(&m.f * &fpow[k - 1]);
    }
    let mut cx = DMatrix::zeros(nx, nx);
    for t in 0..horizon {
        for s in 0..=t {
            let c = &fpow[t - s] * &var[s];
            cx.view_mut((t * d, s * d), (d, d)).copy_from(&c);
            cx.view_mut((s * d, t * d), (d, d)).copy_from(&c.transpose());
        }
        mean.rows_mut(t * d, d).copy_from(&mu[t]);
        mean.rows_mut(nx + t * e, e).copy_from(&(&m.g * &mu[t]));
    }
    let mut h = DMatrix::zeros(e * horizon, nx);
    for t in 0..horizon {
        h.view_mut((t * e, t * d), (e, d)).copy_from(&m.g);
    }
    let mut noise = DMatrix::zeros(e * horizon, e * horizon);
    for t in 0..horizon {
        for i in 0..e {
            noise[(t * e + i, t * e + i)] = m.v[i];
        }
    }
    let n = nx + e * horizon;
    let mut cov = DMatrix::zeros(n, n);
    cov.view_mut((0, 0), (nx, nx)).copy_from(&cx);
    let cxy = &cx * h.transpose();
    cov.view_mut((0, nx), (nx, e * horizon)).copy_from(&cxy);
    cov.view_mut((nx, 0), (e * horizon, nx)).copy_from(&cxy.transpose());
    cov.view_mut((nx, nx), (e * horizon, e * horizon)).copy_from(&(&h * &cx * h.transpose() + noise));
    (mean, cov)
}

/// `p(x_t | y_{1:t})` by conditioning the dense joint of the first `t` steps.
pub fn dense_filter(m: &LinearGaussian, ys: &[DVector<f64>], t: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = m.f.nrows();
    let e = m.g.nrows();
    let (mean, cov) = dense_joint(m, t);
    let nx = d * t;
    let ny = e * t;
    let y = DVector::from_iterator(ny, ys[..t].iter().flat_map(|v| v.iter().cloned().collect::<Vec<_>>()));
    let sxy = cov.view(((t - 1) * d, nx), (d, ny)).into_owned();
    let syy = cov.view((nx, nx), (ny, ny)).into_owned();
    let k = &sxy * syy.try_inverse().unwrap();
    let mx = mean.rows((t - 1) * d, d) + &k * (y - mean.rows(nx, ny));
    let cxx = cov.view(((t - 1) * d, (t - 1) * d), (d, d)) - &k * sxy.transpose();
    (mx, cxx)
}

pub fn dense_log_evidence(m: &LinearGaussian, ys: &[DVector<f64>]) -> f64 {
    let t = ys.len();
    let d = m.f.nrows();
    let e = m.g.nrows();
    let (mean, cov) = dense_joint(m, t);
    let y = DVector::from_iterator(e * t, ys.iter().flat_map(|v| v.iter().cloned().collect::<Vec<_>>()));
    gauss_logpdf(&y, &mean.rows(d * t, e * t).into_owned(), &cov.view((d * t, d * t), (e * t, e * t)).into_owned())
}

fn affine(step: &PhiStep) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    match step.kernel.as_ref().expect("kernel") {
        BackwardKernel::Affine { w, b, log_sigma_tilde } => (w.clone(), b.clone(), log_sigma_tilde.map(|v| (2.0 * v).exp())),
        _ => panic!("affine kernel expected"),
    }
}

/// `l_T - KL(q_T(x_T) || p(x_T | y^T)) - sum_k E_q[KL(q_{k+1}(x_k | x_{k+1}) || p(x_k | y^k, x_{k+1}))]`.
pub fn kl_decomposition_elbo(m: &LinearGaussian, traj: &PhiTrajectory, ys: &[DVector<f64>]) -> f64 {
    let n = traj.steps.len();
    let f = kalman(m, ys);
    let last = &traj.steps[n - 1];
    let q_var = |s: &PhiStep| DMatrix::from_diagonal(&s.log_sigma.map(|v| (2.0 * v).exp()));
    let mut total = f.loglik[n - 1] - kl(&last.mu, &q_var(last), &f.mean[n - 1], &f.cov[n - 1]);
    // Marginal of x_{k+1} under the joint q, walking backwards from x_T.
    let mut mx = last.mu.clone();
    let mut sx = q_var(last);
    for k in (0..n - 1).rev() {
        let (w, b, sv) = affine(&traj.steps[k + 1]);
        let pk = &f.cov[k];
        let j = pk * m.f.transpose() * f.pred_cov[k + 1].clone().try_inverse().unwrap();
        let cp = pk - &j * &m.f * pk;
        let cq = DMatrix::from_diagonal(&sv);
        let dmat = &j - &w;
        let e = &f.mean[k] - &j * &m.f * &f.mean[k] - &b;
        let ci = cp.clone().try_inverse().unwrap();
        let ld = |a: &DMatrix<f64>| a.clone().cholesky().unwrap().l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>();
        let mean_diff = &dmat * &mx + &e;
        let exp_kl = 0.5
            * ((&ci * &cq).trace() + mean_diff.dot(&(&ci * &mean_diff)) + (dmat.transpose() * &ci * &dmat * &sx).trace()
                - sv.len() as f64
                + ld(&cp)
                - ld(&cq));
        total -= exp_kl;
        let nm = &w * &mx + &b;
        sx = &w * &sx * w.transpose() + cq;
        mx = nm;
    }
    total
}

/// Random diagonal affine trajectory of length `t`.
pub fn random_affine_traj(d: usize, t: usize, rng: &mut RngStream) -> PhiTrajectory {
    let steps = (0..t)
        .map(|k| PhiStep {
            mu: rng.normal_vec(d) * 0.5,
            log_sigma: DVector::from_fn(d, |_, _| rng.uniform_range(-1.0, -0.2)),
            kernel: (k > 0).then(|| BackwardKernel::Affine {
                w: DMatrix::from_fn(d, d, |_, _| 0.3 * rng.normal()),
                b: rng.normal_vec(d) * 0.3,
                log_sigma_tilde: DVector::from_fn(d, |_, _| rng.uniform_range(-1.0, -0.2)),
            }),
        })
        .collect();
    PhiTrajectory::new(steps).unwrap()
}

pub fn step_ctx<'a>(
    t: usize,
    model: &'a ModelTheta,
    traj: &'a PhiTrajectory,
    ys: &'a [DVector<f64>],
    t_hat: &'a GradApprox,
    s_hat: &'a GradApprox,
) -> StepContext<'a> {
    StepContext {
        t,
        model,
        phi: &traj.steps[t - 1],
        phi_prev: (t > 1).then(|| &traj.steps[t - 2]),
        y: &ys[t - 1],
        t_hat,
        s_hat,
        freeze_kernel: false,
    }
}

/// Nested Monte Carlo evaluation of `(V_t(x_t), S_t(x_t))` with `k` inner
/// backward draws per level.
pub fn nested_value_score(
    model: &ModelTheta,
    traj: &PhiTrajectory,
    ys: &[DVector<f64>],
    t: usize,
    x: &DVector<f64>,
    k: usize,
    rng: &mut RngStream,
) -> (f64, DVector<f64>) {
    let zt = GradApprox::Zero { d_out: model.dx() };
    let zs = GradApprox::Zero { d_out: model.d_theta() };
    let ctx = step_ctx(t, model, traj, ys, &zt, &zs);
    let want = RewardWant { theta: true, ..Default::default() };
    if t == 1 {
        let r = reward(&ctx, None, x, want).unwrap();
        return (r.value, r.d_theta.unwrap());
    }
    let mut v = 0.0;
    let mut s = DVector::zeros(model.d_theta());
    for _ in 0..k {
        let xp = traj.steps[t - 1].backward_sample(x, &rng.normal_vec(x.len())).unwrap();
        let (vp, sp) = nested_value_score(model, traj, ys, t - 1, &xp, k, rng);
        let r = reward(&ctx, Some(&xp), x, want).unwrap();
        v += vp + r.value;
        s += sp + r.d_theta.unwrap();
    }
    (v / k as f64, s / k as f64)
}

pub fn flat_of(traj: &PhiTrajectory) -> DVector<f64> {
    let v: Vec<f64> = traj.steps.iter().flat_map(|s| s.flat().iter().cloned().collect::<Vec<_>>()).collect();
    DVector::from_vec(v)
}

pub fn with_flat(traj: &PhiTrajectory, flat: &DVector<f64>) -> PhiTrajectory {
    let mut t = traj.clone();
    let mut o = 0;
    for s in t.steps.iter_mut() {
        let n = s.param_count();
        s.set_flat(&flat.as_slice()[o..o + n]).unwrap();
        o += n;
    }
    t
}
