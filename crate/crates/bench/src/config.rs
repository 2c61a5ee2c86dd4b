//! Run configuration: flat `key = value` lines with dotted section names,
//! parsed as TOML.
//!
//! ```text
//! experiment = "lg_inference"
//! method = "ours"
//! horizon = 20
//! model.dx = 10
//! inner.iters = 2000
//! ```

use serde::{Deserialize, Serialize};

use crate::error::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// State inference in a diagonal linear-Gaussian model with known parameters.
    LgInference,
    /// Online learning of the diagonals of `F` and `G`.
    LgLearning,
    /// State inference in the chaotic recurrent network.
    Crnn,
    /// Online versus offline training of the same joint variational family.
    OnlineOffline,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::LgInference => "lg_inference",
            Experiment::LgLearning => "lg_learning",
            Experiment::Crnn => "crnn",
            Experiment::OnlineOffline => "online_offline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    Aelbo1,
    Aelbo2,
    Enkf,
    Bpf,
    Kf,
    RmleExact,
}

impl Method {
    pub const ALL: [Method; 7] =
        [Method::Ours, Method::Aelbo1, Method::Aelbo2, Method::Enkf, Method::Bpf, Method::Kf, Method::RmleExact];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Aelbo1 => "aelbo1",
            Method::Aelbo2 => "aelbo2",
            Method::Enkf => "enkf",
            Method::Bpf => "bpf",
            Method::Kf => "kf",
            Method::RmleExact => "rmle_exact",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Method::Ours | Method::Aelbo1 | Method::Aelbo2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearGaussian,
    Crnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrnnSpec {
    pub gamma: f64,
    pub tau: f64,
    pub delta: f64,
    pub u_var: f64,
    pub t_dof: f64,
    pub t_scale: f64,
    pub prior_var: f64,
}

impl Default for CrnnSpec {
    fn default() -> Self {
        Self { gamma: 2.5, tau: 0.1, delta: 0.01, u_var: 0.01, t_dof: 3.0, t_scale: 0.1, prior_var: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dx: usize,
    pub dy: usize,
    /// Linear-Gaussian transition noise variance (every coordinate).
    pub u_var: f64,
    /// Linear-Gaussian observation noise variance (every coordinate).
    pub v_var: f64,
    pub crnn: CrnnSpec,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { kind: ModelKind::LinearGaussian, dx: 10, dy: 10, u_var: 0.01, v_var: 0.01, crnn: CrnnSpec::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerSpec {
    pub iters: usize,
    pub lr: f64,
    pub first_lr: f64,
    pub decay: f64,
    /// Draws per gradient estimate.
    pub n: usize,
    pub optimizer: Optimizer,
}

impl Default for InnerSpec {
    fn default() -> Self {
        Self { iters: 500, lr: 0.01, first_lr: 0.1, decay: 0.999, n: 10, optimizer: Optimizer::Adam }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Krr,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Rbf,
    Matern52,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    DirLogMag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionSpec {
    pub backend: Backend,
    pub n_fit: usize,
    pub kernel: Kernel,
    pub ridge: f64,
    /// Fixed log bandwidth; absent means the median heuristic.
    pub log_bandwidth: Option<f64>,
    /// Bandwidth search cadence in steps; 0 disables the search.
    pub select_every: usize,
    pub n_val: usize,
    pub search_iters: usize,
    pub search_lr: f64,
    pub search_minibatch: usize,
    pub mlp_hidden: Vec<usize>,
    pub mlp_activation: Activation,
    pub mlp_loss: Loss,
    pub mlp_epochs: usize,
    pub mlp_batch: usize,
    pub mlp_lr: f64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            backend: Backend::Krr,
            n_fit: 500,
            kernel: Kernel::Matern52,
            ridge: 0.1,
            log_bandwidth: None,
            select_every: 1,
            n_val: 100,
            search_iters: 25,
            search_lr: 1e-2,
            search_minibatch: 10,
            mlp_hidden: vec![64],
            mlp_activation: Activation::Relu,
            mlp_loss: Loss::Mse,
            mlp_epochs: 128,
            mlp_batch: 32,
            mlp_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThetaSpec {
    pub eta0: f64,
    /// `eta_t = eta0 * t^-exponent`.
    pub exponent: f64,
    pub n: usize,
    pub uses_refit_s: bool,
}

impl Default for ThetaSpec {
    fn default() -> Self {
        Self { eta0: 0.01, exponent: 0.6, n: 100, uses_refit_s: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelForm {
    Affine,
    Mlp,
}

/// Backward-kernel family of the variational posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackwardSpec {
    pub form: KernelForm,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for BackwardSpec {
    fn default() -> Self {
        Self { form: KernelForm::Affine, hidden: vec![100], activation: Activation::Tanh }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineSpec {
    pub iters: usize,
    pub lr: f64,
    pub decay: f64,
    pub n: usize,
}

impl Default for OfflineSpec {
    fn default() -> Self {
        Self { iters: 3000, lr: 0.01, decay: 0.9995, n: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingSpec {
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub method: Method,
    pub seed: u64,
    pub horizon: usize,
    /// Output directory; the `--out` flag overrides it.
    pub out: String,
    /// CSV trajectory (`t,x_1..,y_1..`) to filter instead of simulated data.
    pub trajectory: Option<String>,
    pub model: ModelSpec,
    pub inner: InnerSpec,
    pub regression: RegressionSpec,
    pub theta: ThetaSpec,
    pub backward: BackwardSpec,
    pub offline: OfflineSpec,
    /// Fit the value function and report the recursive ELBO.
    pub relbo: bool,
    /// Draws for per-step objective and RELBO averages.
    pub eval_n: usize,
    /// Draws for the batch ELBO of the final trajectory; 0 skips it.
    pub elbo_n: usize,
    /// Ensemble or particle count for the sampling baselines.
    pub particles: usize,
    pub resampling: ResamplingSpec,
    pub plots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::LgInference,
            method: Method::Ours,
            seed: 0,
            horizon: 20,
            out: "out".into(),
            trajectory: None,
            model: ModelSpec::default(),
            inner: InnerSpec::default(),
            regression: RegressionSpec::default(),
            theta: ThetaSpec::default(),
            backward: BackwardSpec::default(),
            offline: OfflineSpec::default(),
            relbo: false,
            eval_n: 1000,
            elbo_n: 1000,
            particles: 10_000,
            resampling: ResamplingSpec::Multinomial,
            plots: false,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn invalid(key: &str, msg: impl Into<String>) -> BenchError {
    BenchError::ConfigInvalid { key: key.to_string(), msg: msg.into() }
}

impl RunConfig {
    /// Parses and validates configuration text.
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| BenchError::ConfigParse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::ConfigRead(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Flat `key = value` form with keys in sorted order. `parse(dump(c)) == c`.
    pub fn dump(&self) -> String {
        let value = toml::Value::try_from(self).expect("configuration is representable");
        let mut out = String::new();
        flatten("", &value, &mut out);
        out
    }

    /// Every key with its default value.
    pub fn reference() -> String {
        let mut s = String::from("# ovfilt configuration keys and their defaults\n");
        s.push_str("# regression.log_bandwidth (float) and trajectory (path) are unset by default\n");
        s.push_str(&RunConfig::default().dump());
        s
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let positive = [
            ("horizon", self.horizon),
            ("model.dx", self.model.dx),
            ("model.dy", self.model.dy),
            ("inner.n", self.inner.n),
            ("regression.n_fit", self.regression.n_fit),
            ("theta.n", self.theta.n),
            ("offline.n", self.offline.n),
            ("eval_n", self.eval_n),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        let rates = [
            ("model.u_var", self.model.u_var),
            ("model.v_var", self.model.v_var),
            ("model.crnn.u_var", self.model.crnn.u_var),
            ("model.crnn.t_dof", self.model.crnn.t_dof),
            ("model.crnn.t_scale", self.model.crnn.t_scale),
            ("model.crnn.prior_var", self.model.crnn.prior_var),
            ("model.crnn.tau", self.model.crnn.tau),
            ("regression.ridge", self.regression.ridge),
            ("inner.decay", self.inner.decay),
        ];
        for (key, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(key, "must be positive and finite"));
            }
        }
        if matches!(self.method, Method::Enkf | Method::Bpf) && self.particles < 2 {
            return Err(invalid("particles", "sampling baselines need at least two particles"));
        }
        let lg = self.model.kind == ModelKind::LinearGaussian;
        if matches!(self.method, Method::Kf | Method::RmleExact) && !lg {
            return Err(invalid("method", format!("{} requires model.kind = \"linear_gaussian\"", self.method.name())));
        }
        match self.experiment {
            Experiment::LgInference | Experiment::LgLearning | Experiment::OnlineOffline => {
                if !lg {
                    return Err(invalid("model.kind", "this experiment uses the linear-Gaussian model"));
                }
                if self.model.dx != self.model.dy {
                    return Err(invalid("model.dy", "the diagonal linear-Gaussian model needs dy = dx"));
                }
            }
            Experiment::Crnn => {
                if lg {
                    return Err(invalid("model.kind", "the crnn experiment uses model.kind = \"crnn\""));
                }
            }
        }
        let allowed: &[Method] = match self.experiment {
            Experiment::LgLearning => &[Method::Ours, Method::Aelbo1, Method::Aelbo2, Method::RmleExact],
            Experiment::OnlineOffline => &[Method::Ours],
            Experiment::Crnn => &[Method::Ours, Method::Aelbo1, Method::Aelbo2, Method::Enkf, Method::Bpf],
            Experiment::LgInference => &Method::ALL[..6],
        };
        if !allowed.contains(&self.method) {
            return Err(invalid("method", format!("{} is not available for this experiment", self.method.name())));
        }
        if self.regression.backend == Backend::Mlp && self.regression.mlp_batch == 0 {
            return Err(invalid("regression.mlp_batch", "must be positive"));
        }
        Ok(())
    }

    /// Budgets of the original study in place of the desk-scale defaults.
    pub fn apply_paper_scale(&mut self) {
        match self.experiment {
            Experiment::LgInference => {
                self.inner.iters = 5000;
                self.inner.decay = 0.999;
                self.regression.n_fit = 500;
            }
            Experiment::LgLearning => {
                self.inner.iters = 500;
                self.inner.decay = 0.991;
                self.regression.n_fit = 1000;
            }
            Experiment::Crnn => {
                self.inner.iters = 500;
                self.particles = if self.model.dx <= 20 { 1_000_000 } else { 250_000 };
                self.backward.hidden = vec![100];
                self.regression.n_fit = if self.model.dx <= 5 { 100 } else { 250 };
            }
            Experiment::OnlineOffline => {
                self.inner.iters = 5000;
                self.offline.iters = 10_000;
            }
        }
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::Table(t) => {
            // Scalars first so a section's own keys precede its subsections.
            let (tables, scalars): (Vec<_>, Vec<_>) = t.iter().partition(|(_, v)| v.is_table());
            for (k, v) in scalars.into_iter().chain(tables) {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => {
            out.push_str(prefix);
            out.push_str(" = ");
            out.push_str(&v.to_string());
            out.push('\n');
        }
    }
}
