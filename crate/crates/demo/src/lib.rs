//! Browser demo: a scalar linear-Gaussian filter compared with the Kalman
//! filter, and a one-dimensional kernel ridge fit. Each exported function
//! returns a JSON string for the page in `www/`.

use nalgebra::{DMatrix, DVector};
use ovfilt_core::baselines::kf_filter;
use ovfilt_core::engine::{EngineConfig, InnerConfig, Objective, OnlineFilter};
use ovfilt_core::math::{gaussian_kl, RngStream};
use ovfilt_core::models::{LinearGaussian, ModelTheta, ThetaMask};
use ovfilt_core::regression::{krr_fit, median_heuristic, KernelFamily, KernelSpec, RegressionDataset};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct FilterRun {
    pub truth: Vec<f64>,
    pub observations: Vec<f64>,
    pub kf_mean: Vec<f64>,
    pub kf_sd: Vec<f64>,
    pub q_mean: Vec<f64>,
    pub q_sd: Vec<f64>,
    /// `KL(q_t || p(x_t | y^t))` per step.
    pub kl: Vec<f64>,
}

fn scalar_model(f: f64, v: f64) -> ModelTheta {
    ModelTheta::LinearGaussian(LinearGaussian {
        f: DMatrix::from_element(1, 1, f),
        g: DMatrix::from_element(1, 1, 1.0),
        u: DVector::from_element(1, 0.1),
        v: DVector::from_element(1, v),
        prior_mean: DVector::zeros(1),
        prior_var: DVector::from_element(1, 1.0),
        learn: ThetaMask::Fixed,
    })
}

/// Simulates `x_t = f x_{t-1} + u_t`, `y_t = x_t + v_t` and filters it with
/// the Kalman filter and with the online variational filter.
pub fn run_filter(seed: u64, horizon: usize, f: f64, v: f64, iters: usize, objective: Objective) -> Result<FilterRun, String> {
    if horizon == 0 || !(v > 0.0) {
        return Err("horizon and observation variance must be positive".into());
    }
    let model = scalar_model(f, v);
    let tr = model.sample_trajectory(horizon, &mut RngStream::new(seed, 1));
    let kf = kf_filter(&model, &tr.observations).map_err(|e| e.to_string())?;
    let config = EngineConfig {
        objective,
        inner: InnerConfig { iters, ..InnerConfig::default() },
        eval_n: 50,
        seed,
        ..EngineConfig::default()
    };
    let mut engine = OnlineFilter::new(model, config);
    let mut run = FilterRun {
        truth: tr.states.iter().map(|x| x[0]).collect(),
        observations: tr.observations.iter().map(|y| y[0]).collect(),
        kf_mean: kf.iter().map(|k| k.filter.mean[0]).collect(),
        kf_sd: kf.iter().map(|k| k.filter.variances()[0].sqrt()).collect(),
        q_mean: Vec::new(),
        q_sd: Vec::new(),
        kl: Vec::new(),
    };
    for (y, k) in tr.observations.iter().zip(&kf) {
        let rec = engine.step(y).map_err(|e| e.to_string())?;
        let q = rec.phi.marginal();
        run.q_mean.push(q.mean[0]);
        run.q_sd.push(q.variances()[0].sqrt());
        run.kl.push(gaussian_kl(&q, &k.filter).map_err(|e| e.to_string())?);
    }
    Ok(run)
}

#[derive(Debug, Serialize)]
pub struct KrrRun {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    pub fit: Vec<f64>,
    pub log_bandwidth: f64,
}

fn target(x: f64) -> f64 {
    (2.0 * x).sin() + 0.3 * x
}

/// Fits noisy draws of a smooth curve on `[-3, 3]` with a Matérn-5/2 kernel.
/// A non-finite `log_bandwidth` selects the median heuristic.
pub fn run_krr(seed: u64, n: usize, noise_sd: f64, log_bandwidth: f64, ridge: f64) -> Result<KrrRun, String> {
    if n == 0 {
        return Err("need at least one sample".into());
    }
    let mut rng = RngStream::new(seed, 2);
    let xs: Vec<f64> = (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| target(x) + noise_sd * rng.normal()).collect();
    let inputs = DMatrix::from_column_slice(n, 1, &xs);
    let data = RegressionDataset::new(inputs.clone(), DMatrix::from_column_slice(n, 1, &ys)).map_err(|e| e.to_string())?;
    let log_bandwidth = if log_bandwidth.is_finite() { log_bandwidth } else { median_heuristic(&inputs) };
    let spec = KernelSpec { family: KernelFamily::Matern52, log_bandwidth, ridge_lambda: ridge };
    let fitted = krr_fit(&data, &spec).map_err(|e| e.to_string())?;
    let grid: Vec<f64> = (0..=200).map(|i| -3.0 + 6.0 * i as f64 / 200.0).collect();
    let fit = grid.iter().map(|&x| fitted.predict(&DVector::from_element(1, x))[0]).collect();
    Ok(KrrRun { xs, ys, truth: grid.iter().map(|&x| target(x)).collect(), grid, fit, log_bandwidth })
}

fn objective(name: &str) -> Result<Objective, JsValue> {
    match name {
        "ours" => Ok(Objective::Ours),
        "aelbo1" => Ok(Objective::Aelbo1),
        "aelbo2" => Ok(Objective::Aelbo2),
        _ => Err(JsValue::from_str(&format!("unknown objective {name}"))),
    }
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn filter_json(seed: u32, horizon: u32, f: f64, v: f64, iters: u32, objective_name: &str) -> Result<String, JsValue> {
    to_js(run_filter(seed as u64, horizon as usize, f, v, iters as usize, objective(objective_name)?))
}

#[wasm_bindgen]
pub fn krr_json(seed: u32, n: u32, noise_sd: f64, log_bandwidth: f64, ridge: f64) -> Result<String, JsValue> {
    to_js(run_krr(seed as u64, n as usize, noise_sd, log_bandwidth, ridge))
}
