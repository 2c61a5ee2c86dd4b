//! Experiment drivers: data generation, method dispatch and output files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ovfilt_core::baselines::{
    bpf_step, enkf_step, kf_filter, rmle_exact_step, Ensemble, KalmanState, ParticleSet, Resampling, TangentState,
};
use ovfilt_core::engine::{
    batch_elbo_mc, offline_train, BatchElbo, EngineConfig, InnerConfig, Objective, OfflineConfig, OnlineFilter,
    OptimizerKind, RegressionBackend, RegressionConfig, ThetaConfig, DEFAULT_GRAD_HORIZON_CAP,
};
use ovfilt_core::math::RngStream;
use ovfilt_core::models::{Crnn, LinearGaussian, ModelTheta, ThetaMask, Trajectory};
use ovfilt_core::regression::{BandwidthSearch, KernelFamily, RegLoss};
use ovfilt_core::smallnet;
use ovfilt_core::variational::{BackwardKernel, KernelKind, PhiStep, PhiTrajectory};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::*;
use crate::error::BenchError;
use crate::metrics::{diagonal_mae, marginal_gap, pairwise_kl, rmse, write_metrics, MetricsRow};
use crate::plot::{line_chart, Series};

/// Substreams of `RngStream::new(seed, 0)`.
pub mod stream {
    pub const TRUTH: u64 = 1;
    pub const DATA: u64 = 2;
    pub const INIT: u64 = 3;
    pub const METHOD: u64 = 4;
    pub const EVAL: u64 = 5;
}

/// Final aggregates of one run. Contains no timings, so identical inputs
/// give identical files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub method: String,
    pub seed: u64,
    pub horizon: usize,
    /// Hex SHA-256 of the normalised configuration dump.
    pub config_hash: String,
    pub steps_completed: usize,
    pub mean_rmse: Option<f64>,
    pub final_rmse: Option<f64>,
    pub mean_pair_kl: Option<f64>,
    /// Largest pairwise KL over `t >= 10`.
    pub max_pair_kl_from_10: Option<f64>,
    pub final_mae_f: Option<f64>,
    pub final_mae_g: Option<f64>,
    /// Exact or estimated `log p(y^T)`.
    pub loglik: Option<f64>,
    pub batch_elbo: Option<f64>,
    pub batch_elbo_stderr: Option<f64>,
    pub relbo: Option<f64>,
    /// Sum of per-step objectives for the approximate-ELBO methods.
    pub aelbo_cumulative: Option<f64>,
    pub max_marginal_gap: Option<f64>,
    pub offline_batch_elbo: Option<f64>,
    pub error: Option<String>,
}

/// In-memory result of a run. `error` is set when the run stopped early;
/// `rows` then hold the steps completed before the failure.
#[derive(Debug)]
pub struct Outcome {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub data: Option<Trajectory>,
    /// Final variational trajectory of the variational methods.
    pub phi: Option<PhiTrajectory>,
    pub error: Option<String>,
    pub(crate) failure: Option<BenchError>,
}

pub fn config_hash(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(cfg.dump().as_bytes()))
}

fn root(cfg: &RunConfig) -> RngStream {
    RngStream::new(cfg.seed, 0)
}

/// Ground-truth model drawn from the `TRUTH` stream.
pub fn truth_model(cfg: &RunConfig) -> ModelTheta {
    let mut rng = root(cfg).substream(stream::TRUTH);
    let m = &cfg.model;
    match m.kind {
        ModelKind::LinearGaussian => {
            ModelTheta::LinearGaussian(LinearGaussian::random_diagonal(m.dx, m.u_var, m.v_var, &mut rng))
        }
        ModelKind::Crnn => {
            let c = &m.crnn;
            let mut net = Crnn::chaotic(m.dx, &mut rng);
            net.gamma = c.gamma;
            net.tau = c.tau;
            net.delta = c.delta;
            net.u = DVector::from_element(m.dx, c.u_var);
            net.c = DMatrix::identity(m.dy, m.dx);
            net.t_dof = c.t_dof;
            net.t_scale = c.t_scale;
            net.prior_var = DVector::from_element(m.dx, c.prior_var);
            ModelTheta::Crnn(net)
        }
    }
}

/// The learner's starting model for the learning experiment: the truth with
/// the diagonals of `F` and `G` redrawn uniformly in `[0.5, 1]`.
pub fn learner_init(cfg: &RunConfig, truth: &ModelTheta) -> Result<ModelTheta, BenchError> {
    let mut lg = truth.as_linear_gaussian()?.clone();
    let mut rng = root(cfg).substream(stream::INIT);
    for i in 0..lg.f.nrows() {
        lg.f[(i, i)] = rng.uniform_range(0.5, 1.0);
    }
    for i in 0..lg.g.nrows().min(lg.g.ncols()) {
        lg.g[(i, i)] = rng.uniform_range(0.5, 1.0);
    }
    lg.learn = ThetaMask::Diagonal;
    Ok(ModelTheta::LinearGaussian(lg))
}

/// Simulated data, or the configured trajectory file truncated to the horizon.
pub fn load_data(cfg: &RunConfig, truth: &ModelTheta) -> Result<Trajectory, BenchError> {
    match &cfg.trajectory {
        None => Ok(truth.sample_trajectory(cfg.horizon, &mut root(cfg).substream(stream::DATA))),
        Some(path) => {
            let file = File::open(path).map_err(|e| BenchError::ConfigRead(format!("{path}: {e}")))?;
            let mut tr = Trajectory::read_csv(BufReader::new(file))?;
            if tr.dx != cfg.model.dx || tr.dy != cfg.model.dy {
                return Err(BenchError::ConfigInvalid {
                    key: "trajectory".into(),
                    msg: format!("file has dx={} dy={}, model has dx={} dy={}", tr.dx, tr.dy, cfg.model.dx, cfg.model.dy),
                });
            }
            if tr.len() < cfg.horizon {
                return Err(BenchError::ConfigInvalid {
                    key: "trajectory".into(),
                    msg: format!("file has {} steps, horizon is {}", tr.len(), cfg.horizon),
                });
            }
            tr.states.truncate(cfg.horizon);
            tr.observations.truncate(cfg.horizon);
            Ok(tr)
        }
    }
}

fn activation(a: Activation) -> smallnet::Activation {
    match a {
        Activation::Tanh => smallnet::Activation::Tanh,
        Activation::Relu => smallnet::Activation::Relu,
    }
}

pub fn engine_config(cfg: &RunConfig, objective: Objective, learn_theta: bool) -> EngineConfig {
    let r = &cfg.regression;
    let backend = match r.backend {
        Backend::Krr => RegressionBackend::Krr {
            family: match r.kernel {
                Kernel::Rbf => KernelFamily::Rbf,
                Kernel::Matern52 => KernelFamily::Matern52,
            },
            ridge_lambda: r.ridge,
            log_bandwidth: r.log_bandwidth,
            search: BandwidthSearch { iters: r.search_iters, lr: r.search_lr, minibatch: r.search_minibatch },
            select_every: r.select_every,
            n_val: r.n_val,
        },
        Backend::Mlp => RegressionBackend::Mlp {
            hidden: r.mlp_hidden.clone(),
            activation: activation(r.mlp_activation),
            loss: match r.mlp_loss {
                Loss::Mse => RegLoss::Mse,
                Loss::DirLogMag => RegLoss::DirLogMag,
            },
            epochs: r.mlp_epochs,
            batch: r.mlp_batch,
            lr: r.mlp_lr,
        },
    };
    EngineConfig {
        objective,
        kernel: match cfg.backward.form {
            KernelForm::Affine => KernelKind::Affine,
            KernelForm::Mlp => {
                KernelKind::Mlp { hidden: cfg.backward.hidden.clone(), activation: activation(cfg.backward.activation) }
            }
        },
        inner: InnerConfig {
            iters: cfg.inner.iters,
            lr: cfg.inner.lr,
            first_lr: cfg.inner.first_lr,
            decay: cfg.inner.decay,
            n: cfg.inner.n,
            optimizer: match cfg.inner.optimizer {
                Optimizer::Sgd => OptimizerKind::Sgd,
                Optimizer::Adam => OptimizerKind::Adam,
            },
        },
        regression: RegressionConfig { backend, n_fit: r.n_fit },
        learn_theta,
        theta: ThetaConfig {
            eta0: cfg.theta.eta0,
            exponent: cfg.theta.exponent,
            n: cfg.theta.n,
            uses_refit_s: cfg.theta.uses_refit_s,
        },
        relbo: cfg.relbo,
        eval_n: cfg.eval_n,
        seed: cfg.seed,
    }
}

fn diagonals(m: &ModelTheta) -> Option<(DVector<f64>, DVector<f64>)> {
    let lg = m.as_linear_gaussian().ok()?;
    Some((lg.f.diagonal(), DVector::from_fn(lg.g.nrows().min(lg.g.ncols()), |i, _| lg.g[(i, i)])))
}

/// Per-step context shared by every method.
struct Ctx<'a> {
    cfg: &'a RunConfig,
    truth: &'a ModelTheta,
    data: &'a Trajectory,
    /// Exact filters under the true model (linear-Gaussian only).
    kf: Option<Vec<KalmanState>>,
    truth_diag: Option<(DVector<f64>, DVector<f64>)>,
}

impl Ctx<'_> {
    fn mae(&self, row: &mut MetricsRow, model: &ModelTheta) -> Result<(), BenchError> {
        if self.cfg.experiment != Experiment::LgLearning {
            return Ok(());
        }
        if let (Some((f0, g0)), Some((f, g))) = (&self.truth_diag, diagonals(model)) {
            row.mae_f = Some(diagonal_mae(&f, f0)?);
            row.mae_g = Some(diagonal_mae(&g, g0)?);
        }
        Ok(())
    }

    fn pair_kl(&self, t: usize, phi: &PhiStep) -> Result<Option<f64>, BenchError> {
        let Some(kf) = &self.kf else { return Ok(None) };
        if matches!(phi.kernel, Some(BackwardKernel::MlpMean { .. })) {
            return Ok(None);
        }
        let prev = (t > 1).then(|| &kf[t - 2].filter);
        Ok(Some(pairwise_kl(self.truth, phi, prev, &kf[t - 1].filter, &self.data.observations[t - 1])?))
    }
}

/// Runs one configuration in memory.
pub fn execute(cfg: &RunConfig) -> Outcome {
    let mut summary = Summary {
        experiment: cfg.experiment.name().into(),
        method: cfg.method.name().into(),
        seed: cfg.seed,
        horizon: cfg.horizon,
        config_hash: config_hash(cfg),
        ..Default::default()
    };
    let truth = truth_model(cfg);
    let data = match load_data(cfg, &truth) {
        Ok(d) => d,
        Err(e) => {
            summary.error = Some(e.to_string());
            return Outcome { rows: Vec::new(), summary, data: None, phi: None, error: Some(e.to_string()), failure: Some(e) };
        }
    };
    let kf = if cfg.model.kind == ModelKind::LinearGaussian { kf_filter(&truth, &data.observations).ok() } else { None };
    let ctx = Ctx { cfg, truth: &truth, data: &data, kf, truth_diag: diagonals(&truth) };
    let mut rows = Vec::new();
    let mut phi = None;
    let result = match (cfg.experiment, cfg.method) {
        (Experiment::OnlineOffline, _) => online_offline(&ctx, &mut rows, &mut summary, &mut phi),
        (_, m) if m.is_variational() => variational(&ctx, &mut rows, &mut summary, &mut phi),
        (_, Method::Kf) => kalman(&ctx, &mut rows),
        (_, Method::RmleExact) => rmle(&ctx, &mut rows),
        (_, Method::Enkf) => enkf(&ctx, &mut rows),
        (_, Method::Bpf) => bpf(&ctx, &mut rows),
        _ => unreachable!("validated configuration"),
    };
    summarise(&rows, &mut summary);
    let (error, failure) = match result {
        Ok(()) => (None, None),
        Err(e) => (Some(e.to_string()), Some(e)),
    };
    summary.error = error.clone();
    Outcome { rows, summary, data: Some(data), phi, error, failure }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarise(rows: &[MetricsRow], s: &mut Summary) {
    s.steps_completed = rows.len();
    let col = |f: fn(&MetricsRow) -> Option<f64>| rows.iter().filter_map(f).collect::<Vec<_>>();
    let rm = col(|r| r.rmse);
    s.mean_rmse = mean(&rm);
    s.final_rmse = rm.last().copied();
    let kl = col(|r| r.pair_kl);
    s.mean_pair_kl = mean(&kl);
    s.max_pair_kl_from_10 =
        rows.iter().filter(|r| r.t >= 10).filter_map(|r| r.pair_kl).fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))));
    s.final_mae_f = col(|r| r.mae_f).last().copied();
    s.final_mae_g = col(|r| r.mae_g).last().copied();
    s.loglik = col(|r| r.loglik).last().copied();
    s.relbo = col(|r| r.relbo).last().copied();
    let gaps = col(|r| r.marginal_gap);
    s.max_marginal_gap = gaps.iter().copied().fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))));
}

fn objective(m: Method) -> Objective {
    match m {
        Method::Aelbo1 => Objective::Aelbo1,
        Method::Aelbo2 => Objective::Aelbo2,
        _ => Objective::Ours,
    }
}

fn batch_elbo(ctx: &Ctx, traj: &PhiTrajectory, model: &ModelTheta) -> Result<BatchElbo, BenchError> {
    let mut rng = root(ctx.cfg).substream(stream::EVAL);
    Ok(batch_elbo_mc(traj, model, &ctx.data.observations, ctx.cfg.elbo_n, &mut rng, None)?)
}

fn variational(
    ctx: &Ctx,
    rows: &mut Vec<MetricsRow>,
    summary: &mut Summary,
    phi_out: &mut Option<PhiTrajectory>,
) -> Result<(), BenchError> {
    let cfg = ctx.cfg;
    let learning = cfg.experiment == Experiment::LgLearning;
    let model = if learning { learner_init(cfg, ctx.truth)? } else { ctx.truth.clone() };
    let mut engine = OnlineFilter::new(model, engine_config(cfg, objective(cfg.method), learning));
    let mut steps = Vec::with_capacity(cfg.horizon);
    let mut cumulative = 0.0;
    let mut result = Ok(());
    for (k, y) in ctx.data.observations.iter().enumerate() {
        let rec = match engine.step(y) {
            Ok(r) => r,
            Err(e) => {
                result = Err(e.into());
                break;
            }
        };
        let t = k + 1;
        let mut row = MetricsRow::new(t);
        row.rmse = Some(rmse(&rec.phi.mu, &ctx.data.states[k])?);
        row.pair_kl = ctx.pair_kl(t, &rec.phi)?;
        ctx.mae(&mut row, &engine.model)?;
        row.relbo = rec.relbo;
        row.step_objective = Some(rec.step_objective);
        row.wall_ms = Some(rec.step_ms);
        cumulative += rec.step_objective;
        rows.push(row);
        steps.push(rec.phi);
    }
    if cfg.method != Method::Ours && !steps.is_empty() {
        summary.aelbo_cumulative = Some(cumulative);
    }
    if steps.is_empty() {
        return result;
    }
    let traj = PhiTrajectory::new(steps)?;
    if result.is_ok() && cfg.elbo_n > 0 {
        let b = batch_elbo(ctx, &traj, &engine.model)?;
        summary.batch_elbo = Some(b.mean);
        summary.batch_elbo_stderr = Some(b.stderr);
        if let Some(last) = rows.last_mut() {
            last.elbo_batch = Some(b.mean);
        }
    }
    *phi_out = Some(traj);
    result
}

/// Step parameters chained from the standard initial step, used as the
/// starting point of offline training.
fn offline_init(d: usize, horizon: usize, rng: &mut RngStream) -> Result<PhiTrajectory, BenchError> {
    let mut steps = vec![PhiStep::initial(d)];
    for _ in 1..horizon {
        let next = PhiStep::init_from_previous(steps.last().unwrap(), &KernelKind::Affine, rng)?;
        steps.push(next);
    }
    Ok(PhiTrajectory::new(steps)?)
}

fn online_offline(
    ctx: &Ctx,
    rows: &mut Vec<MetricsRow>,
    summary: &mut Summary,
    phi_out: &mut Option<PhiTrajectory>,
) -> Result<(), BenchError> {
    variational(ctx, rows, summary, phi_out)?;
    let online = phi_out.as_ref().expect("online trajectory");
    let cfg = ctx.cfg;
    let mut init_rng = root(cfg).substream(stream::INIT);
    let init = offline_init(cfg.model.dx, ctx.data.len(), &mut init_rng)?;
    let oc = OfflineConfig {
        iters: cfg.offline.iters,
        lr: cfg.offline.lr,
        decay: cfg.offline.decay,
        n: cfg.offline.n,
        grad_cap: DEFAULT_GRAD_HORIZON_CAP,
    };
    let offline = offline_train(&init, ctx.truth, &ctx.data.observations, &oc, &mut root(cfg).substream(stream::METHOD))?;
    let a = online.smoothing_marginals()?;
    let b = offline.smoothing_marginals()?;
    for (row, (ma, mb)) in rows.iter_mut().zip(a.iter().zip(&b)) {
        row.marginal_gap = Some(marginal_gap(ma, mb));
    }
    if cfg.elbo_n > 0 {
        summary.offline_batch_elbo = Some(batch_elbo(ctx, &offline, ctx.truth)?.mean);
    }
    summarise(rows, summary);
    Ok(())
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

fn kalman(ctx: &Ctx, rows: &mut Vec<MetricsRow>) -> Result<(), BenchError> {
    let mut state = KalmanState::new(ctx.truth)?;
    for (k, y) in ctx.data.observations.iter().enumerate() {
        let (next, ms) = timed(|| ovfilt_core::baselines::kf_step(ctx.truth, &state, y));
        state = next?;
        let mut row = MetricsRow::new(k + 1);
        row.rmse = Some(rmse(&state.filter.mean, &ctx.data.states[k])?);
        row.pair_kl = Some(0.0);
        row.loglik = Some(state.loglik);
        row.wall_ms = Some(ms);
        rows.push(row);
    }
    Ok(())
}

fn rmle(ctx: &Ctx, rows: &mut Vec<MetricsRow>) -> Result<(), BenchError> {
    let mut model = learner_init(ctx.cfg, ctx.truth)?;
    let mut ts = TangentState::new(&model)?;
    for (k, y) in ctx.data.observations.iter().enumerate() {
        let t = k + 1;
        let eta = ctx.cfg.theta.eta0 * (t as f64).powf(-ctx.cfg.theta.exponent);
        let (step, ms) = timed(|| rmle_exact_step(&model, &ts, y, eta));
        let step = step?;
        model.set_theta_flat(step.theta.as_slice())?;
        ts = step.state;
        let mut row = MetricsRow::new(t);
        row.rmse = Some(rmse(&ts.kf.filter.mean, &ctx.data.states[k])?);
        row.loglik = Some(ts.kf.loglik);
        ctx.mae(&mut row, &model)?;
        row.wall_ms = Some(ms);
        rows.push(row);
    }
    Ok(())
}

fn enkf(ctx: &Ctx, rows: &mut Vec<MetricsRow>) -> Result<(), BenchError> {
    let mut rng = root(ctx.cfg).substream(stream::METHOD);
    let mut ens = Ensemble::from_prior(ctx.truth, ctx.cfg.particles, &mut rng)?;
    for (k, y) in ctx.data.observations.iter().enumerate() {
        let (next, ms) = timed(|| enkf_step(&ens, ctx.truth, y, &mut rng));
        ens = next?;
        let mut row = MetricsRow::new(k + 1);
        row.rmse = Some(rmse(&ens.mean(), &ctx.data.states[k])?);
        row.loglik = Some(ens.loglik);
        row.wall_ms = Some(ms);
        rows.push(row);
    }
    Ok(())
}

fn bpf(ctx: &Ctx, rows: &mut Vec<MetricsRow>) -> Result<(), BenchError> {
    let mut rng = root(ctx.cfg).substream(stream::METHOD);
    let resampling = match ctx.cfg.resampling {
        ResamplingSpec::Multinomial => Resampling::Multinomial,
        ResamplingSpec::Systematic => Resampling::Systematic,
    };
    let mut ps = ParticleSet::from_prior(ctx.truth, ctx.cfg.particles, resampling, &mut rng)?;
    for (k, y) in ctx.data.observations.iter().enumerate() {
        let (next, ms) = timed(|| bpf_step(&ps, ctx.truth, y, &mut rng));
        ps = next?;
        let mut row = MetricsRow::new(k + 1);
        row.rmse = Some(rmse(&ps.filter_mean, &ctx.data.states[k])?);
        row.loglik = Some(ps.loglik);
        row.wall_ms = Some(ms);
        rows.push(row);
    }
    Ok(())
}

fn series(rows: &[MetricsRow], name: &str, f: fn(&MetricsRow) -> Option<f64>) -> Series {
    Series { name: name.into(), points: rows.iter().filter_map(|r| f(r).map(|v| (r.t as f64, v))).collect() }
}

/// Writes `metrics.csv`, `summary.json`, `config.toml`, `data.csv`, the
/// variational trajectory (`phi.csv` with its `phi.json` sidecar) and, when
/// enabled, `plot_*.svg`.
pub fn write_outputs(cfg: &RunConfig, outcome: &Outcome, dir: &Path) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    write_metrics(&outcome.rows, BufWriter::new(File::create(dir.join("metrics.csv"))?))?;
    let mut js = serde_json::to_string_pretty(&outcome.summary).expect("summary serialises");
    js.push('\n');
    fs::write(dir.join("summary.json"), js)?;
    fs::write(dir.join("config.toml"), cfg.dump())?;
    if let Some(data) = &outcome.data {
        data.write_csv(BufWriter::new(File::create(dir.join("data.csv"))?))?;
    }
    if let Some(phi) = &outcome.phi {
        phi.write_checkpoint(BufWriter::new(File::create(dir.join("phi.csv"))?), File::create(dir.join("phi.json"))?)?;
    }
    if cfg.plots {
        let rows = &outcome.rows;
        let charts = [
            ("plot_rmse.svg", "Filter RMSE", vec![series(rows, "rmse", |r| r.rmse)]),
            ("plot_kl.svg", "Pairwise KL", vec![series(rows, "pair KL", |r| r.pair_kl)]),
            (
                "plot_elbo.svg",
                "ELBO estimates",
                vec![
                    series(rows, "log evidence", |r| r.loglik),
                    series(rows, "RELBO", |r| r.relbo),
                    series(rows, "step objective", |r| r.step_objective),
                ],
            ),
            ("plot_gap.svg", "Online vs offline marginal gap", vec![series(rows, "gap", |r| r.marginal_gap)]),
        ];
        for (file, title, s) in charts {
            let s: Vec<Series> = s.into_iter().filter(|s| !s.points.is_empty()).collect();
            if !s.is_empty() {
                let mut f = File::create(dir.join(file))?;
                f.write_all(line_chart(title, "t", &s).as_bytes())?;
            }
        }
    }
    Ok(())
}

/// Runs `cfg` and writes its outputs to `dir`. Outputs are written even when
/// the run fails part-way; the error is returned afterwards.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path) -> Result<Summary, BenchError> {
    let mut outcome = execute(cfg);
    write_outputs(cfg, &outcome, dir)?;
    match outcome.failure.take() {
        Some(e) => Err(e),
        None => Ok(outcome.summary),
    }
}
