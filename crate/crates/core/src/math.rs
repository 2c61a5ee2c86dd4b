//! Small dense linear algebra, Gaussian densities and the random stream type.
//!
//! Everything here works at the modest dimensions the filters need (tens to a
//! few hundreds). Diagonal Gaussians are the common case and have their own
//! allocation-light entry point, [`diag_gaussian_logpdf`].

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Covariance of a [`GaussianDist`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Covariance {
    /// Per-coordinate variances.
    Diagonal(DVector<f64>),
    /// Full symmetric positive definite matrix.
    Dense(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

/// Which partial derivatives a density evaluation should return.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Want {
    pub x: bool,
    pub mean: bool,
    pub log_scale: bool,
}

impl Want {
    pub const NONE: Want = Want { x: false, mean: false, log_scale: false };
    pub const ALL: Want = Want { x: true, mean: true, log_scale: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEval {
    pub value: f64,
    pub d_x: Option<DVector<f64>>,
    pub d_mean: Option<DVector<f64>>,
    /// Derivative w.r.t. `log sigma` (diagonal covariances only).
    pub d_log_scale: Option<DVector<f64>>,
}

impl GaussianDist {
    pub fn diagonal(mean: DVector<f64>, var: DVector<f64>) -> Result<Self> {
        check_dim("gaussian variance", mean.len(), var.len())?;
        if var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Precondition("non-positive variance".into()));
        }
        Ok(Self { mean, cov: Covariance::Diagonal(var) })
    }

    pub fn dense(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim("gaussian covariance rows", mean.len(), cov.nrows())?;
        check_dim("gaussian covariance cols", mean.len(), cov.ncols())?;
        if cov.clone().cholesky().is_none() {
            return Err(Error::NotSpd("gaussian covariance".into()));
        }
        Ok(Self { mean, cov: Covariance::Dense(cov) })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(v),
            Covariance::Dense(m) => m.clone(),
        }
    }

    pub fn variances(&self) -> DVector<f64> {
        match &self.cov {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Dense(m) => m.diagonal(),
        }
    }
}

/// Log density of `N(x; mean, diag(exp(log_sigma))^2)` with optional partials.
pub fn diag_gaussian_logpdf(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    log_sigma: &DVector<f64>,
    want: Want,
) -> GaussianEval {
    let d = x.len();
    debug_assert_eq!(mean.len(), d);
    debug_assert_eq!(log_sigma.len(), d);
    let mut value = -0.5 * d as f64 * LN_2PI;
    let mut d_x = want.x.then(|| DVector::zeros(d));
    let mut d_mean = want.mean.then(|| DVector::zeros(d));
    let mut d_ls = want.log_scale.then(|| DVector::zeros(d));
    for i in 0..d {
        let inv_sigma = (-log_sigma[i]).exp();
        let z = (x[i] - mean[i]) * inv_sigma;
        value -= 0.5 * z * z + log_sigma[i];
        if let Some(g) = d_x.as_mut() {
            g[i] = -z * inv_sigma;
        }
        if let Some(g) = d_mean.as_mut() {
            g[i] = z * inv_sigma;
        }
        if let Some(g) = d_ls.as_mut() {
            g[i] = z * z - 1.0;
        }
    }
    GaussianEval { value, d_x, d_mean, d_log_scale: d_ls }
}

/// Log density of a [`GaussianDist`]. The log-scale gradient is only defined for
/// diagonal covariances and is `None` for dense ones.
pub fn gaussian_logpdf(x: &DVector<f64>, dist: &GaussianDist, want: Want) -> Result<GaussianEval> {
    check_dim("gaussian_logpdf", dist.dim(), x.len())?;
    match &dist.cov {
        Covariance::Diagonal(var) => {
            if var.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Precondition("non-positive variance".into()));
            }
            let log_sigma = var.map(|v| 0.5 * v.ln());
            Ok(diag_gaussian_logpdf(x, &dist.mean, &log_sigma, want))
        }
        Covariance::Dense(cov) => {
            let chol = cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::NotSpd("gaussian covariance".into()))?;
            let diff = x - &dist.mean;
            let sol = chol.solve(&diff);
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let value = -0.5 * (diff.dot(&sol) + log_det + x.len() as f64 * LN_2PI);
            Ok(GaussianEval {
                value,
                d_x: want.x.then(|| -&sol),
                d_mean: want.mean.then(|| sol.clone()),
                d_log_scale: None,
            })
        }
    }
}

/// Closed-form `KL(p || q)` for any mix of diagonal and dense covariances.
pub fn gaussian_kl(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    check_dim("gaussian_kl", p.dim(), q.dim())?;
    let d = p.dim() as f64;
    let diff = &q.mean - &p.mean;
    if let (Covariance::Diagonal(vp), Covariance::Diagonal(vq)) = (&p.cov, &q.cov) {
        let mut kl = 0.0;
        for i in 0..vp.len() {
            let r = vp[i] / vq[i];
            kl += 0.5 * (r + diff[i] * diff[i] / vq[i] - 1.0 - r.ln());
        }
        return Ok(kl.max(0.0));
    }
    let sp = p.cov_matrix();
    let sq = q.cov_matrix();
    let cq = sq.cholesky().ok_or_else(|| Error::NotSpd("kl q covariance".into()))?;
    let cp = sp.clone().cholesky().ok_or_else(|| Error::NotSpd("kl p covariance".into()))?;
    let trace = cq.solve(&sp).trace();
    let maha = diff.dot(&cq.solve(&diff));
    let ld_q: f64 = 2.0 * cq.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ld_p: f64 = 2.0 * cp.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((0.5 * (trace + maha - d + ld_q - ld_p)).max(0.0))
}

/// Solves `A X = B` for symmetric positive definite `A` by Cholesky factorization.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("spd_solve rows", a.nrows(), b.nrows())?;
    check_dim("spd_solve square", a.nrows(), a.ncols())?;
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("spd_solve".into()))?;
    Ok(chol.solve(b))
}

/// Central finite-difference gradient.
pub fn finite_diff_grad<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteAt { coordinate: i });
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// `log(sum(exp(v)))` computed stably; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Sample mean and standard error of the mean, summed in index order.
pub fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Relative error `|a - b| / max(|b|, floor)` in the Euclidean norm.
pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based random stream.
///
/// A stream is identified by `(seed, stream_id)` and positioned by `counter`
/// (the generator's word position). The same triple always yields the same
/// draws, so substreams can be handed out per sample index or per iteration
/// without depending on evaluation order.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::at(seed, stream_id, 0)
    }

    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        rng.set_word_pos(counter as u128);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Independent child stream keyed by `key`. Does not advance `self`.
    pub fn substream(&self, key: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(key.wrapping_add(0x5851_f42d_4c95_7f2d)));
        RngStream::new(self.seed, id)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vec(&mut self, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| self.normal())
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Draw from a Student-t distribution with `dof` degrees of freedom.
    pub fn student_t(&mut self, dof: f64) -> f64 {
        rand_distr::StudentT::new(dof)
            .expect("positive degrees of freedom")
            .sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn random_spd(d: usize, rng: &mut RngStream) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
        &a * a.transpose() + DMatrix::identity(d, d) * (d as f64 * 0.1)
    }

    #[test]
    fn standard_normal_at_mode() {
        let g = GaussianDist::diagonal(DVector::zeros(1), DVector::from_element(1, 1.0)).unwrap();
        let e = gaussian_logpdf(&DVector::zeros(1), &g, Want::NONE).unwrap();
        assert!((e.value + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn logpdf_at_mean_is_normaliser() {
        let mean = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let var = DVector::from_vec(vec![0.5, 2.0, 4.0]);
        let g = GaussianDist::diagonal(mean.clone(), var.clone()).unwrap();
        let v = gaussian_logpdf(&mean, &g, Want::NONE).unwrap().value;
        let expect = -1.5 * (2.0 * PI).ln() - var.iter().map(|s| s.sqrt().ln()).sum::<f64>();
        assert!((v - expect).abs() < 1e-12);
        let dense = GaussianDist::dense(mean.clone(), DMatrix::from_diagonal(&var)).unwrap();
        let vd = gaussian_logpdf(&mean, &dense, Want::NONE).unwrap().value;
        assert!((vd - expect).abs() < 1e-12);
    }

    #[test]
    fn logpdf_errors() {
        let g = GaussianDist::diagonal(DVector::zeros(2), DVector::from_element(2, 1.0)).unwrap();
        assert!(matches!(
            gaussian_logpdf(&DVector::zeros(3), &g, Want::NONE),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(GaussianDist::diagonal(DVector::zeros(2), DVector::from_vec(vec![1.0, 0.0])).is_err());
        let bad = GaussianDist { mean: DVector::zeros(1), cov: Covariance::Diagonal(DVector::from_element(1, -1.0)) };
        assert!(matches!(gaussian_logpdf(&DVector::zeros(1), &bad, Want::NONE), Err(Error::Precondition(_))));
    }

    #[test]
    fn logpdf_gradients_match_finite_differences() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..100 {
            let d = 5;
            let x = rng.normal_vec(d);
            let mean = rng.normal_vec(d);
            let ls = rng.normal_vec(d) * 0.3;
            let e = diag_gaussian_logpdf(&x, &mean, &ls, Want::ALL);
            let fx = finite_diff_grad(|v| diag_gaussian_logpdf(v, &mean, &ls, Want::NONE).value, &x, 1e-5).unwrap();
            let fm = finite_diff_grad(|v| diag_gaussian_logpdf(&x, v, &ls, Want::NONE).value, &mean, 1e-5).unwrap();
            let fl = finite_diff_grad(|v| diag_gaussian_logpdf(&x, &mean, v, Want::NONE).value, &ls, 1e-5).unwrap();
            assert!(rel_err(e.d_x.as_ref().unwrap(), &fx) < 1e-6);
            assert!(rel_err(e.d_mean.as_ref().unwrap(), &fm) < 1e-6);
            assert!(rel_err(e.d_log_scale.as_ref().unwrap(), &fl) < 1e-5);
        }
    }

    #[test]
    fn dense_logpdf_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(8, 0);
        for _ in 0..20 {
            let cov = random_spd(4, &mut rng);
            let g = GaussianDist::dense(rng.normal_vec(4), cov).unwrap();
            let x = rng.normal_vec(4);
            let e = gaussian_logpdf(&x, &g, Want::ALL).unwrap();
            let fx = finite_diff_grad(|v| gaussian_logpdf(v, &g, Want::NONE).unwrap().value, &x, 1e-5).unwrap();
            assert!(rel_err(e.d_x.as_ref().unwrap(), &fx) < 1e-6);
            assert!(e.d_log_scale.is_none());
        }
    }

    #[test]
    fn kl_closed_forms() {
        let p = GaussianDist::diagonal(DVector::zeros(1), DVector::from_element(1, 1.0)).unwrap();
        let q = GaussianDist::diagonal(DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)).unwrap();
        assert!(gaussian_kl(&p, &p).unwrap().abs() < 1e-12);
        assert!((gaussian_kl(&p, &q).unwrap() - 0.5).abs() < 1e-12);
        let mut rng = RngStream::new(3, 1);
        let a = GaussianDist::dense(rng.normal_vec(3), random_spd(3, &mut rng)).unwrap();
        assert!(gaussian_kl(&a, &a).unwrap().abs() < 1e-12);
        // diagonal-vs-dense agrees with the dense-dense route
        let dq = GaussianDist::diagonal(rng.normal_vec(3), DVector::from_vec(vec![0.5, 1.0, 2.0])).unwrap();
        let dq_dense = GaussianDist::dense(dq.mean.clone(), dq.cov_matrix()).unwrap();
        let k1 = gaussian_kl(&a, &dq).unwrap();
        let k2 = gaussian_kl(&a, &dq_dense).unwrap();
        assert!((k1 - k2).abs() < 1e-12);
        assert!(gaussian_kl(&a, &p).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = RngStream::new(11, 2);
        let p = GaussianDist::dense(rng.normal_vec(3) * 0.5, random_spd(3, &mut rng) * 0.3).unwrap();
        let q = GaussianDist::dense(rng.normal_vec(3) * 0.5, random_spd(3, &mut rng) * 0.3).unwrap();
        let exact = gaussian_kl(&p, &q).unwrap();
        let lp = p.cov_matrix().cholesky().unwrap().l();
        let n = 1_000_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let x = &p.mean + &lp * rng.normal_vec(3);
            let a = gaussian_logpdf(&x, &p, Want::NONE).unwrap().value;
            let b = gaussian_logpdf(&x, &q, Want::NONE).unwrap().value;
            vals.push(a - b);
        }
        let (m, se) = mean_and_stderr(&vals);
        assert!((m - exact).abs() <= 3.0 * se, "mc {m} exact {exact} se {se}");
    }

    #[test]
    fn spd_solve_cases() {
        let b = DMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let x = spd_solve(&DMatrix::identity(3, 3), &b).unwrap();
        assert_eq!(x, b);
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let x = spd_solve(&a, &DMatrix::from_vec(2, 1, vec![2.0, 4.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
        let mut rng = RngStream::new(5, 5);
        let a = random_spd(50, &mut rng);
        let b = DMatrix::from_fn(50, 3, |_, _| rng.normal());
        let x = spd_solve(&a, &b).unwrap();
        assert!((&a * &x - &b).norm() / b.norm() <= 1e-8);
        let not_spd = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(spd_solve(&not_spd, &DMatrix::zeros(2, 1)), Err(Error::NotSpd(_))));
    }

    #[test]
    fn finite_diff_cases() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let g = finite_diff_grad(|v| v.norm_squared(), &x, 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.0, &x, 1e-5).unwrap();
        assert_eq!(g, DVector::zeros(2));
        let err = finite_diff_grad(|v| if v[1] > 2.0 { f64::NAN } else { 0.0 }, &x, 1e-5);
        assert_eq!(err, Err(Error::NonFiniteAt { coordinate: 1 }));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = RngStream::new(42, 3);
        let mut b = RngStream::new(42, 3);
        let va: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(va, vb);
        let mut c = RngStream::at(42, 3, a.counter());
        assert_eq!(c.next_u64(), a.next_u64());
        let mut other = RngStream::new(42, 4);
        let vo: Vec<u64> = (0..64).map(|_| other.next_u64()).collect();
        assert_ne!(va, vo);
    }

    #[test]
    fn distinct_substreams_are_uncorrelated() {
        let root = RngStream::new(1, 0);
        let mut a = root.substream(0);
        let mut b = root.substream(1);
        let n = 200_000;
        let mut s = 0.0;
        for _ in 0..n {
            s += a.normal() * b.normal();
        }
        // correlation estimate has standard error 1/sqrt(n)
        assert!((s / n as f64).abs() < 4.0 / (n as f64).sqrt());
    }
}
