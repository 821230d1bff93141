use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sindy_core::{
    AdamConfig, BenchmarkKind, FitConfig, GridSpec, MasterOptions, ObjectiveMode, Reduction, SparsityMode,
    WildfireParams,
};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_VAR: &str = "SINDY_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    AdamSindy,
    AdamSindyDivergence,
    SindyW,
    SindyWo,
}

impl Method {
    pub fn is_baseline(self) -> bool {
        matches!(self, Method::SindyW | Method::SindyWo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    JointMin,
    MinMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sparsity {
    Gamma,
    Lambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateSource {
    Discrete,
    Difference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    /// Benchmark name or `wildfire`.
    pub benchmark: String,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Gaussian noise, as a fraction of each state's standard deviation.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LibrarySection {
    /// Family names to keep; all of them when absent.
    pub families: Option<Vec<String>>,
    pub time_power: bool,
    pub rational_exp: bool,
    pub trainable_poly: bool,
    pub power_products: bool,
    /// Highest spatial derivative for the wildfire library.
    pub max_order: u8,
}

impl Default for LibrarySection {
    fn default() -> Self {
        Self {
            families: None,
            time_power: false,
            rational_exp: false,
            trainable_poly: false,
            power_products: false,
            max_order: 4,
        }
    }
}

impl LibrarySection {
    pub fn master_options(&self) -> MasterOptions {
        MasterOptions {
            time_power: self.time_power,
            rational_exp: self.rational_exp,
            trainable_poly: self.trainable_poly,
            power_products: self.power_products,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSection {
    pub epochs: usize,
    /// Initial rate for every block unless overridden below.
    pub learning_rate: f64,
    pub lr_xi: Option<f64>,
    pub lr_lambda: Option<f64>,
    pub lr_gamma: Option<f64>,
    pub lr_sparsity: Option<f64>,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub threshold: f64,
    pub threshold_start: usize,
    pub batch_size: usize,
    pub objective: Objective,
    pub sparsity: Sparsity,
    pub lambda: f64,
    pub gamma_std: f64,
    pub reduction: ReductionKind,
    pub history_stride: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for AdamSection {
    fn default() -> Self {
        let fit = FitConfig::default();
        Self {
            epochs: fit.epochs,
            learning_rate: fit.lr_xi,
            lr_xi: None,
            lr_lambda: None,
            lr_gamma: None,
            lr_sparsity: None,
            decay_factor: fit.decay_factor,
            decay_every: fit.decay_every,
            threshold: fit.threshold,
            threshold_start: fit.threshold_start,
            batch_size: fit.batch_size,
            objective: Objective::JointMin,
            sparsity: Sparsity::Gamma,
            lambda: fit.lambda,
            gamma_std: fit.gamma_std,
            reduction: ReductionKind::Sum,
            history_stride: 100,
            beta1: fit.adam.beta1,
            beta2: fit.adam.beta2,
            adam_epsilon: fit.adam.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SindySection {
    pub lambda: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Values per family, keyed by family name.
    #[serde(default)]
    pub grids: BTreeMap<String, Vec<f64>>,
}

fn default_max_iter() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WildfireSection {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    /// Time step; the stability bound when absent.
    pub dt: Option<f64>,
    pub t_end: f64,
    pub snapshot_every: usize,
    pub kappa: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub wind_speed: f64,
    pub wind_angle_deg: f64,
    pub front_center: [f64; 2],
    pub front_side: f64,
    pub rates: RateSource,
}

impl Default for WildfireSection {
    fn default() -> Self {
        let p = WildfireParams::default();
        let g = GridSpec::default();
        Self {
            nx: g.nx,
            ny: g.ny,
            lx: g.lx,
            ly: g.ly,
            dt: None,
            t_end: 0.08,
            snapshot_every: 1,
            kappa: p.kappa,
            beta: p.beta,
            epsilon: p.epsilon,
            alpha: p.alpha,
            wind_speed: p.wind_speed,
            wind_angle_deg: p.wind_angle.to_degrees(),
            front_center: [p.front_center.0, p.front_center.1],
            front_side: p.front_side,
            rates: RateSource::Discrete,
        }
    }
}

impl WildfireSection {
    pub fn params(&self) -> WildfireParams {
        WildfireParams {
            kappa: self.kappa,
            beta: self.beta,
            epsilon: self.epsilon,
            alpha: self.alpha,
            wind_speed: self.wind_speed,
            wind_angle: self.wind_angle_deg.to_radians(),
            front_center: (self.front_center[0], self.front_center[1]),
            front_side: self.front_side,
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec { nx: self.nx, ny: self.ny, lx: self.lx, ly: self.ly }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub library: LibrarySection,
    #[serde(default)]
    pub adam: AdamSection,
    pub sindy: Option<SindySection>,
    pub wildfire: Option<WildfireSection>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn is_wildfire(&self) -> bool {
        self.experiment.benchmark == "wildfire"
    }

    /// Checks the settings the chosen method will use.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.is_wildfire() {
            if let Err(e) = BenchmarkKind::parse(&self.experiment.benchmark) {
                return bad(e.to_string());
            }
            if self.wildfire.is_some() {
                return bad("[wildfire] is only valid with benchmark = \"wildfire\"".into());
            }
        }
        if !(self.data.noise >= 0.0 && self.data.noise.is_finite()) {
            return bad(format!("data.noise = {} must be finite and non-negative", self.data.noise));
        }
        if self.is_wildfire() && !self.data.overrides.is_empty() {
            return bad("data.overrides applies to ODE benchmarks; set [wildfire] keys instead".into());
        }
        if !(1..=4).contains(&self.library.max_order) {
            return bad(format!("library.max_order = {} not in 1..=4", self.library.max_order));
        }
        match self.experiment.method {
            Method::SindyW | Method::SindyWo => {
                let Some(s) = &self.sindy else {
                    return bad("method sindy-w/sindy-wo needs a [sindy] section".into());
                };
                if !(s.lambda >= 0.0 && s.lambda.is_finite()) || s.max_iter == 0 {
                    return bad("sindy.lambda must be >= 0 and sindy.max_iter >= 1".into());
                }
            }
            Method::AdamSindy | Method::AdamSindyDivergence => {
                if self.experiment.method == Method::AdamSindyDivergence && self.is_wildfire() {
                    return bad("adam-sindy-divergence does not support the wildfire library".into());
                }
                self.fit_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        let a = &self.adam;
        FitConfig {
            epochs: a.epochs,
            lr_xi: a.lr_xi.unwrap_or(a.learning_rate),
            lr_lambda: a.lr_lambda.unwrap_or(a.learning_rate),
            lr_gamma: a.lr_gamma.unwrap_or(a.learning_rate),
            lr_sparsity: a.lr_sparsity.unwrap_or(a.learning_rate),
            decay_factor: a.decay_factor,
            decay_every: a.decay_every,
            threshold: a.threshold,
            threshold_start: a.threshold_start,
            batch_size: a.batch_size,
            objective: match a.objective {
                Objective::JointMin => ObjectiveMode::JointMin,
                Objective::MinMax => ObjectiveMode::MinMax,
            },
            sparsity: match a.sparsity {
                Sparsity::Gamma => SparsityMode::GammaTrainable,
                Sparsity::Lambda => SparsityMode::LambdaTrainable,
            },
            lambda: a.lambda,
            gamma_std: a.gamma_std,
            seed: self.experiment.seed,
            divergence_penalty: self.experiment.method == Method::AdamSindyDivergence,
            reduction: match a.reduction {
                ReductionKind::Sum => Reduction::Sum,
                ReductionKind::Mean => Reduction::Mean,
            },
            adam: AdamConfig { beta1: a.beta1, beta2: a.beta2, epsilon: a.adam_epsilon },
            history_stride: a.history_stride,
        }
    }

    /// Configuration with every default spelled out, as TOML.
    pub fn effective_toml(&self) -> String {
        let mut cfg = self.clone();
        let a = &mut cfg.adam;
        for lr in [&mut a.lr_xi, &mut a.lr_lambda, &mut a.lr_gamma, &mut a.lr_sparsity] {
            lr.get_or_insert(a.learning_rate);
        }
        if cfg.is_wildfire() && cfg.wildfire.is_none() {
            cfg.wildfire = Some(WildfireSection::default());
        }
        toml::to_string(&cfg).expect("config types serialize")
    }

    /// Output directory after applying [`OUTPUT_ROOT_VAR`] to relative paths.
    pub fn output_dir(&self) -> PathBuf {
        let dir = &self.experiment.output_dir;
        match std::env::var_os(OUTPUT_ROOT_VAR) {
            Some(root) if dir.is_relative() => Path::new(&root).join(dir),
            _ => dir.clone(),
        }
    }
}
