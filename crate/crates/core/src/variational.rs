//! Backward-factorised Gaussian variational family.
//!
//! Step `t` holds a diagonal Gaussian marginal `q_t(x_t)` and, for `t > 1`, a
//! backward kernel `q_t(x_{t-1} | x_t)` whose mean is affine or an MLP in
//! `x_t` with a state-independent diagonal scale.
//!
//! Flat parameter layout of a [`PhiStep`]: `[mu, log_sigma, kernel]`, where the
//! affine kernel block is `W` row-major, then `b`, then `log_sigma_tilde`, and
//! the MLP block is the network's flat parameters followed by
//! `log_sigma_tilde`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::{diag_gaussian_logpdf, GaussianDist, RngStream, Want};
use crate::smallnet::{Activation, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BackwardKernel {
    Affine { w: DMatrix<f64>, b: DVector<f64>, log_sigma_tilde: DVector<f64> },
    MlpMean { net: Mlp, log_sigma_tilde: DVector<f64> },
}

/// How to build the backward kernel when a step is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelKind {
    Affine,
    Mlp { hidden: Vec<usize>, activation: Activation },
}

impl BackwardKernel {
    pub fn param_count(&self) -> usize {
        match self {
            BackwardKernel::Affine { w, b, log_sigma_tilde } => w.len() + b.len() + log_sigma_tilde.len(),
            BackwardKernel::MlpMean { net, log_sigma_tilde } => net.param_count() + log_sigma_tilde.len(),
        }
    }

    pub fn log_sigma_tilde(&self) -> &DVector<f64> {
        match self {
            BackwardKernel::Affine { log_sigma_tilde, .. } | BackwardKernel::MlpMean { log_sigma_tilde, .. } => {
                log_sigma_tilde
            }
        }
    }

    pub fn mean(&self, x_t: &DVector<f64>) -> DVector<f64> {
        match self {
            BackwardKernel::Affine { w, b, .. } => w * x_t + b,
            BackwardKernel::MlpMean { net, .. } => net.forward_unchecked(x_t),
        }
    }

    /// `(cot^T d mean / d kernel-params without log_sigma_tilde, cot^T d mean / d x_t)`.
    fn mean_vjp(&self, x_t: &DVector<f64>, cot: &DVector<f64>, want_params: bool) -> (DVector<f64>, DVector<f64>) {
        match self {
            BackwardKernel::Affine { w, .. } => {
                let gx = w.tr_mul(cot);
                let gp = if want_params {
                    let d = x_t.len();
                    let mut out = DVector::zeros(w.len() + cot.len());
                    for i in 0..w.nrows() {
                        for j in 0..d {
                            out[i * d + j] = cot[i] * x_t[j];
                        }
                    }
                    out.rows_mut(w.len(), cot.len()).copy_from(cot);
                    out
                } else {
                    DVector::zeros(0)
                };
                (gp, gx)
            }
            BackwardKernel::MlpMean { net, .. } => net.vjp_unchecked(x_t, cot, want_params),
        }
    }

    fn flat_into(&self, out: &mut Vec<f64>) {
        match self {
            BackwardKernel::Affine { w, b, log_sigma_tilde } => {
                for i in 0..w.nrows() {
                    for j in 0..w.ncols() {
                        out.push(w[(i, j)]);
                    }
                }
                out.extend(b.iter());
                out.extend(log_sigma_tilde.iter());
            }
            BackwardKernel::MlpMean { net, log_sigma_tilde } => {
                out.extend(net.flat_params().iter());
                out.extend(log_sigma_tilde.iter());
            }
        }
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("kernel parameters", self.param_count(), flat.len())?;
        match self {
            BackwardKernel::Affine { w, b, log_sigma_tilde } => {
                let d = w.ncols();
                for i in 0..w.nrows() {
                    for j in 0..d {
                        w[(i, j)] = flat[i * d + j];
                    }
                }
                let nw = w.len();
                b.copy_from_slice(&flat[nw..nw + b.len()]);
                log_sigma_tilde.copy_from_slice(&flat[nw + b.len()..]);
            }
            BackwardKernel::MlpMean { net, log_sigma_tilde } => {
                let n = net.param_count();
                net.set_flat_params(&flat[..n])?;
                log_sigma_tilde.copy_from_slice(&flat[n..]);
            }
        }
        Ok(())
    }
}

/// Variational parameters for one time index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiStep {
    pub mu: DVector<f64>,
    pub log_sigma: DVector<f64>,
    /// Absent at the first time index.
    pub kernel: Option<BackwardKernel>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhiWant {
    /// Gradients w.r.t. the density arguments.
    pub args: bool,
    /// Gradient w.r.t. the flat parameter vector.
    pub phi: bool,
}

impl PhiWant {
    pub const NONE: PhiWant = PhiWant { args: false, phi: false };
    pub const ALL: PhiWant = PhiWant { args: true, phi: true };
    pub const ARGS: PhiWant = PhiWant { args: true, phi: false };
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalEval {
    pub value: f64,
    pub d_x: Option<DVector<f64>>,
    pub d_phi: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardEval {
    pub value: f64,
    pub d_prev: Option<DVector<f64>>,
    pub d_xt: Option<DVector<f64>>,
    pub d_phi: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoEval {
    pub value: f64,
    /// Gradient w.r.t. the earlier state `x_t`.
    pub d_x: Option<DVector<f64>>,
    /// Gradient w.r.t. the later state `x_{t+1}`.
    pub d_next: Option<DVector<f64>>,
    pub d_phi: Option<DVector<f64>>,
    pub d_phi_next: Option<DVector<f64>>,
}

impl PhiStep {
    /// `mu = 0`, `log_sigma = 0`, no kernel.
    pub fn initial(d: usize) -> Self {
        Self { mu: DVector::zeros(d), log_sigma: DVector::zeros(d), kernel: None }
    }

    /// Copy of `prev`. When `prev` has no kernel, one is created that leaves
    /// `x_{t-1}` independent of `x_t` and distributed as `prev`'s marginal.
    pub fn init_from_previous(prev: &PhiStep, kind: &KernelKind, rng: &mut RngStream) -> Result<Self> {
        let mut next = prev.clone();
        if next.kernel.is_none() {
            let d = prev.dim();
            next.kernel = Some(match kind {
                KernelKind::Affine => BackwardKernel::Affine {
                    w: DMatrix::zeros(d, d),
                    b: prev.mu.clone(),
                    log_sigma_tilde: prev.log_sigma.clone(),
                },
                KernelKind::Mlp { hidden, activation } => {
                    let mut sizes = vec![d];
                    sizes.extend(hidden.iter());
                    sizes.push(d);
                    let mut net = Mlp::new(&sizes, *activation, rng)?;
                    let last = net.layers.last_mut().unwrap();
                    last.w.fill(0.0);
                    last.b.copy_from(&prev.mu);
                    BackwardKernel::MlpMean { net, log_sigma_tilde: prev.log_sigma.clone() }
                }
            });
        }
        Ok(next)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim() + self.kernel.as_ref().map_or(0, BackwardKernel::param_count)
    }

    pub fn flat(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.mu.iter());
        out.extend(self.log_sigma.iter());
        if let Some(k) = &self.kernel {
            k.flat_into(&mut out);
        }
        DVector::from_vec(out)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("phi parameters", self.param_count(), flat.len())?;
        let d = self.dim();
        self.mu.copy_from_slice(&flat[..d]);
        self.log_sigma.copy_from_slice(&flat[d..2 * d]);
        if let Some(k) = &mut self.kernel {
            k.set_flat(&flat[2 * d..])?;
        }
        Ok(())
    }

    pub fn sigma(&self) -> DVector<f64> {
        self.log_sigma.map(f64::exp)
    }

    pub fn marginal(&self) -> GaussianDist {
        GaussianDist { mean: self.mu.clone(), cov: crate::math::Covariance::Diagonal(self.log_sigma.map(|l| (2.0 * l).exp())) }
    }

    fn kernel_ref(&self) -> Result<&BackwardKernel> {
        self.kernel.as_ref().ok_or(Error::WrongVariant("step has no backward kernel"))
    }

    /// `mu + sigma * eps`.
    pub fn marginal_sample(&self, eps: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("marginal eps", self.dim(), eps.len())?;
        Ok(&self.mu + self.sigma().component_mul(eps))
    }

    /// `cot^T d x_t / d phi` for the marginal reparameterisation.
    pub fn marginal_vjp(&self, eps: &DVector<f64>, cot: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("marginal eps", self.dim(), eps.len())?;
        check_dim("marginal cotangent", self.dim(), cot.len())?;
        let d = self.dim();
        let mut g = DVector::zeros(self.param_count());
        for i in 0..d {
            g[i] = cot[i];
            g[d + i] = cot[i] * self.log_sigma[i].exp() * eps[i];
        }
        Ok(g)
    }

    pub fn backward_mean(&self, x_t: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("backward state", self.dim(), x_t.len())?;
        Ok(self.kernel_ref()?.mean(x_t))
    }

    /// `mean(x_t) + sigma_tilde * eps`.
    pub fn backward_sample(&self, x_t: &DVector<f64>, eps: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("backward eps", self.dim(), eps.len())?;
        let k = self.kernel_ref()?;
        check_dim("backward state", self.dim(), x_t.len())?;
        Ok(k.mean(x_t) + k.log_sigma_tilde().map(f64::exp).component_mul(eps))
    }

    /// `log q_t(x)` and optional gradients.
    pub fn marginal_logpdf(&self, x: &DVector<f64>, want: PhiWant) -> Result<MarginalEval> {
        check_dim("marginal state", self.dim(), x.len())?;
        let e = diag_gaussian_logpdf(x, &self.mu, &self.log_sigma, Want { x: want.args, mean: want.phi, log_scale: want.phi });
        let d_phi = want.phi.then(|| {
            let d = self.dim();
            let mut g = DVector::zeros(self.param_count());
            g.rows_mut(0, d).copy_from(e.d_mean.as_ref().unwrap());
            g.rows_mut(d, d).copy_from(e.d_log_scale.as_ref().unwrap());
            g
        });
        Ok(MarginalEval { value: e.value, d_x: e.d_x, d_phi })
    }

    /// `log q_t(x_prev | x_t)` and optional gradients.
    pub fn backward_logpdf(&self, x_prev: &DVector<f64>, x_t: &DVector<f64>, want: PhiWant) -> Result<BackwardEval> {
        check_dim("backward previous state", self.dim(), x_prev.len())?;
        check_dim("backward state", self.dim(), x_t.len())?;
        let k = self.kernel_ref()?;
        let mean = k.mean(x_t);
        let any = want.args || want.phi;
        let e = diag_gaussian_logpdf(x_prev, &mean, k.log_sigma_tilde(), Want { x: want.args, mean: any, log_scale: want.phi });
        let (mut d_xt, mut d_phi) = (None, None);
        if any {
            let (gp, gx) = k.mean_vjp(x_t, e.d_mean.as_ref().unwrap(), want.phi);
            if want.args {
                d_xt = Some(gx);
            }
            if want.phi {
                let d = self.dim();
                let mut g = DVector::zeros(self.param_count());
                g.rows_mut(2 * d, gp.len()).copy_from(&gp);
                g.rows_mut(2 * d + gp.len(), d).copy_from(e.d_log_scale.as_ref().unwrap());
                d_phi = Some(g);
            }
        }
        Ok(BackwardEval { value: e.value, d_prev: e.d_x, d_xt, d_phi })
    }

    /// `(cot^T d x_prev / d phi, cot^T d x_prev / d x_t)` for
    /// `x_prev = backward_sample(x_t, eps)`.
    pub fn backward_jacobian_vjp(
        &self,
        eps: &DVector<f64>,
        x_t: &DVector<f64>,
        cot: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let d = self.dim();
        check_dim("backward eps", d, eps.len())?;
        check_dim("backward state", d, x_t.len())?;
        check_dim("backward cotangent", d, cot.len())?;
        let k = self.kernel_ref()?;
        let (gp, gx) = k.mean_vjp(x_t, cot, true);
        let mut g = DVector::zeros(self.param_count());
        g.rows_mut(2 * d, gp.len()).copy_from(&gp);
        let lst = k.log_sigma_tilde();
        for i in 0..d {
            g[2 * d + gp.len() + i] = cot[i] * lst[i].exp() * eps[i];
        }
        Ok((g, gx))
    }

    /// Full Gaussian law of `(x_{t-1}, x_t)` under `q_t(x_t) q_t(x_{t-1} | x_t)`
    /// for an affine kernel.
    pub fn pairwise_joint(&self) -> Result<GaussianDist> {
        let Some(BackwardKernel::Affine { w, b, log_sigma_tilde }) = &self.kernel else {
            return Err(Error::WrongVariant("pairwise joint needs an affine kernel"));
        };
        let d = self.dim();
        let s = DMatrix::from_diagonal(&self.log_sigma.map(|l| (2.0 * l).exp()));
        let st = DMatrix::from_diagonal(&log_sigma_tilde.map(|l| (2.0 * l).exp()));
        let mut mean = DVector::zeros(2 * d);
        mean.rows_mut(0, d).copy_from(&(w * &self.mu + b));
        mean.rows_mut(d, d).copy_from(&self.mu);
        let ws = w * &s;
        let mut cov = DMatrix::zeros(2 * d, 2 * d);
        cov.view_mut((0, 0), (d, d)).copy_from(&(&ws * w.transpose() + st));
        cov.view_mut((0, d), (d, d)).copy_from(&ws);
        cov.view_mut((d, 0), (d, d)).copy_from(&ws.transpose());
        cov.view_mut((d, d), (d, d)).copy_from(&s);
        GaussianDist::dense(mean, cov)
    }
}

/// `log m(x_next | x) = log q_{t+1}(x | x_next) + log q_{t+1}(x_next) - log q_t(x)`.
pub fn pseudo_transition_logpdf(
    phi_t: &PhiStep,
    phi_next: &PhiStep,
    x: &DVector<f64>,
    x_next: &DVector<f64>,
    want: PhiWant,
) -> Result<PseudoEval> {
    let kb = phi_next.backward_logpdf(x, x_next, want)?;
    let mn = phi_next.marginal_logpdf(x_next, want)?;
    let mp = phi_t.marginal_logpdf(x, want)?;
    let value = kb.value + mn.value - mp.value;
    let (d_x, d_next) = if want.args {
        (
            Some(kb.d_prev.unwrap() - mp.d_x.unwrap()),
            Some(kb.d_xt.unwrap() + mn.d_x.unwrap()),
        )
    } else {
        (None, None)
    };
    let (d_phi, d_phi_next) = if want.phi {
        (Some(-mp.d_phi.unwrap()), Some(kb.d_phi.unwrap() + mn.d_phi.unwrap()))
    } else {
        (None, None)
    };
    Ok(PseudoEval { value, d_x, d_next, d_phi, d_phi_next })
}

/// Variational parameters for time indices `1..=t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiTrajectory {
    pub steps: Vec<PhiStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StepShape {
    t: usize,
    len: usize,
    kernel: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    mlp_sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    activation: Option<Activation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointShapes {
    dx: usize,
    layout: String,
    steps: Vec<StepShape>,
}

impl PhiTrajectory {
    pub fn new(steps: Vec<PhiStep>) -> Result<Self> {
        if let Some(first) = steps.first() {
            for s in &steps {
                check_dim("phi trajectory state dimension", first.dim(), s.dim())?;
            }
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Marginals of each `x_k` under the joint `q(x_{1:t})`, propagated
    /// backwards from `q_t` through affine kernels. Index `k-1` holds `x_k`.
    pub fn smoothing_marginals(&self) -> Result<Vec<GaussianDist>> {
        let Some(last) = self.steps.last() else { return Ok(Vec::new()) };
        let mut mean = last.mu.clone();
        let mut cov = DMatrix::from_diagonal(&last.log_sigma.map(|l| (2.0 * l).exp()));
        let mut out = vec![GaussianDist::dense(mean.clone(), cov.clone())?];
        for k in (1..self.steps.len()).rev() {
            let Some(BackwardKernel::Affine { w, b, log_sigma_tilde }) = &self.steps[k].kernel else {
                return Err(Error::WrongVariant("smoothing marginals need affine kernels"));
            };
            mean = w * &mean + b;
            cov = w * &cov * w.transpose() + DMatrix::from_diagonal(&log_sigma_tilde.map(|l| (2.0 * l).exp()));
            cov = (&cov + cov.transpose()) * 0.5;
            out.push(GaussianDist::dense(mean.clone(), cov.clone())?);
        }
        out.reverse();
        Ok(out)
    }

    /// Writes one CSV row `t,p_1,..,p_n` per step (rows may differ in length)
    /// and a JSON sidecar describing each step's kernel shape.
    pub fn write_checkpoint<W1: Write, W2: Write>(&self, mut csv: W1, sidecar: W2) -> Result<()> {
        let dx = self.steps.first().map_or(0, PhiStep::dim);
        let mut shapes = Vec::new();
        for (i, s) in self.steps.iter().enumerate() {
            let flat = s.flat();
            let mut row = vec![(i + 1).to_string()];
            row.extend(flat.iter().map(|v| format!("{v:e}")));
            writeln!(csv, "{}", row.join(","))?;
            let (kernel, mlp_sizes, activation) = match &s.kernel {
                None => ("none", None, None),
                Some(BackwardKernel::Affine { .. }) => ("affine", None, None),
                Some(BackwardKernel::MlpMean { net, .. }) => ("mlp", Some(net.sizes()), Some(net.activation)),
            };
            shapes.push(StepShape { t: i + 1, len: flat.len(), kernel: kernel.into(), mlp_sizes, activation });
        }
        let meta = CheckpointShapes {
            dx,
            layout: "mu, log_sigma, kernel (affine: W row-major, b, log_sigma_tilde; mlp: layer W row-major then b per layer, log_sigma_tilde)".into(),
            steps: shapes,
        };
        serde_json::to_writer_pretty(sidecar, &meta)?;
        Ok(())
    }

    pub fn read_checkpoint<R1: BufRead, R2: std::io::Read>(csv: R1, sidecar: R2) -> Result<Self> {
        let meta: CheckpointShapes = serde_json::from_reader(sidecar)?;
        let rows: Vec<String> = csv.lines().collect::<std::io::Result<_>>()?;
        let rows: Vec<&String> = rows.iter().filter(|r| !r.trim().is_empty()).collect();
        if rows.len() != meta.steps.len() {
            return Err(Error::Format(format!("checkpoint has {} rows but sidecar lists {} steps", rows.len(), meta.steps.len())));
        }
        let d = meta.dx;
        let mut steps = Vec::with_capacity(rows.len());
        for (row, shape) in rows.iter().zip(&meta.steps) {
            let vals: std::result::Result<Vec<f64>, _> = row.trim().split(',').skip(1).map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| Error::Format(format!("step {}: {e}", shape.t)))?;
            let mut step = PhiStep::initial(d);
            step.kernel = match shape.kernel.as_str() {
                "none" => None,
                "affine" => Some(BackwardKernel::Affine {
                    w: DMatrix::zeros(d, d),
                    b: DVector::zeros(d),
                    log_sigma_tilde: DVector::zeros(d),
                }),
                "mlp" => {
                    let sizes = shape.mlp_sizes.clone().ok_or_else(|| Error::Format("mlp step without sizes".into()))?;
                    let act = shape.activation.ok_or_else(|| Error::Format("mlp step without activation".into()))?;
                    Some(BackwardKernel::MlpMean { net: Mlp::zeros(&sizes, act)?, log_sigma_tilde: DVector::zeros(d) })
                }
                other => return Err(Error::Format(format!("unknown kernel kind {other}"))),
            };
            step.set_flat(&vals)?;
            steps.push(step);
        }
        Self::new(steps)
    }
}
