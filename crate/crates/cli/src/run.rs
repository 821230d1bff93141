use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sindy_core::engine::{gamma_csv, loss_csv, sub_seed, summary_text};
use sindy_core::{
    add_noise, build_fixed_library, fit, flatten_for_regression, format_model, identified_terms, integrate,
    make_benchmark, master_specs, retain_families, simulate_wildfire, stlsq, support_matches, terms_match,
    wildfire_library, wildfire_truth, LibraryInstance, RegressionProblem, SindyError, Term,
};

use crate::config::{ConfigError, Method, RateSource, RunConfig, WildfireSection};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical divergence: {0}")]
    Divergence(SindyError),
    #[error(transparent)]
    Core(SindyError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<SindyError> for RunError {
    fn from(e: SindyError) -> Self {
        match e {
            SindyError::Divergence { .. } | SindyError::NonFiniteState { .. } => RunError::Divergence(e),
            SindyError::InvalidArgument(_) | SindyError::UnknownBenchmark(_) | SindyError::UnknownParameter { .. } => {
                RunError::Config(ConfigError::Invalid(e.to_string()))
            }
            other => RunError::Core(other),
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Divergence(_) => 3,
            RunError::Core(_) | RunError::Io { .. } => 1,
        }
    }
}

/// Regression data, candidate library and reference model for one config.
pub struct Prepared {
    pub problem: RegressionProblem,
    pub library: LibraryInstance,
    pub truth: Vec<Vec<Term>>,
    pub data_csv: String,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, RunError> {
    if cfg.is_wildfire() {
        return prepare_wildfire(cfg);
    }
    let overrides: Vec<(&str, f64)> = cfg.data.overrides.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let system = make_benchmark(&cfg.experiment.benchmark, &overrides)?;
    let clean = integrate(&system)?;
    let traj = add_noise(&clean, cfg.data.noise, sub_seed(cfg.experiment.seed, "noise"))?;
    let m = traj.n_states();
    let mut specs = master_specs(m, &cfg.library.master_options())?;
    if let Some(kinds) = &cfg.library.families {
        specs = retain_families(specs, kinds)?;
    }
    let library = LibraryInstance::new(specs, m, traj.state_names.clone())?;
    Ok(Prepared {
        problem: RegressionProblem::from_trajectory(&traj)?,
        library,
        truth: system.true_terms(),
        data_csv: traj.to_csv(),
    })
}

fn prepare_wildfire(cfg: &RunConfig) -> Result<Prepared, RunError> {
    let w = cfg.wildfire.clone().unwrap_or_else(WildfireSection::default);
    let (params, grid) = (w.params(), w.grid());
    let dt = w.dt.unwrap_or_else(|| grid.max_dt(&params));
    let mut series = simulate_wildfire(&params, &grid, dt, w.t_end, w.snapshot_every)?;
    if w.rates == RateSource::Difference {
        series = series.with_difference_rates()?;
    }
    let problem = flatten_for_regression(&series, cfg.library.max_order)?;
    let mut library = wildfire_library(cfg.library.max_order)?;
    if let Some(kinds) = &cfg.library.families {
        library = LibraryInstance::new(retain_families(library.specs, kinds)?, 1, library.input_names)?;
    }
    Ok(Prepared { problem, library, truth: vec![wildfire_truth(&params, &grid)], data_csv: series.to_csv() })
}

/// Whether an identified model matches the reference: exact terms with
/// parameters and coefficients within 1e-3 for ODE benchmarks, support with
/// parameters within 5e-3 for the wildfire model.
pub fn recovered(cfg: &RunConfig, found: &[Vec<Term>], truth: &[Vec<Term>]) -> bool {
    found.len() == truth.len()
        && found.iter().zip(truth).all(|(f, t)| {
            if cfg.is_wildfire() {
                support_matches(f, t, 5e-3)
            } else {
                terms_match(f, t, 1e-3, 1e-3)
            }
        })
}

/// Result of one fit, independent of method.
pub struct FitOutcome {
    pub equations: String,
    pub terms: Vec<Vec<Term>>,
    pub final_loss: f64,
    pub files: Vec<(String, String)>,
}

impl FitOutcome {
    pub fn support_size(&self) -> usize {
        self.terms.iter().map(Vec::len).sum()
    }
}

pub fn execute(cfg: &RunConfig, data: &Prepared) -> Result<FitOutcome, RunError> {
    let names = data.problem.target_names.clone();
    let mut head = String::new();
    let _ = writeln!(head, "benchmark = {}", cfg.experiment.benchmark);
    let _ = writeln!(head, "method = {}", method_name(cfg.experiment.method));
    let _ = writeln!(head, "samples = {}", data.problem.len());
    let _ = writeln!(head, "columns = {}", data.library.n_columns());

    if cfg.experiment.method.is_baseline() {
        let s = cfg.sindy.as_ref().expect("validated");
        let fixed = build_fixed_library(&data.library, &s.grids)?;
        let theta = fixed.evaluate(&data.problem)?;
        let res = stlsq(&theta, &data.problem.targets, s.lambda, s.max_iter)?;
        let terms = identified_terms(&fixed, &res.xi);
        let equations = format_model(&fixed.instance, &fixed.instance.lambda, &res.xi, &names);
        let final_loss = (&data.problem.targets - &theta * &res.xi).norm_squared();
        let mut summary = head;
        let _ = writeln!(summary, "fixed_columns = {}", fixed.n_columns());
        let _ = writeln!(summary, "sindy.lambda = {}", s.lambda);
        let _ = writeln!(summary, "sindy.max_iter = {}", s.max_iter);
        let _ = writeln!(summary, "iterations = {}", res.iterations);
        let _ = writeln!(summary, "converged = {}", res.converged);
        let _ = writeln!(summary, "rank_deficient = {}", res.rank_deficient);
        let _ = writeln!(summary, "residual_sum_squares = {final_loss:e}");
        let outcome = FitOutcome { equations: equations.clone(), terms, final_loss, files: Vec::new() };
        let _ = writeln!(summary, "support_size = {}", outcome.support_size());
        let _ = writeln!(summary, "exact_recovery = {}", recovered(cfg, &outcome.terms, &data.truth));
        return Ok(FitOutcome {
            files: vec![
                ("equations.txt".into(), equations),
                ("summary.txt".into(), summary),
                ("library.txt".into(), fixed.instance.describe()),
            ],
            ..outcome
        });
    }

    let fit_cfg = cfg.fit_config();
    let report = fit(&data.problem, &data.library, &fit_cfg)?;
    let equations = report.equations();
    let terms = report.terms();
    let mut summary = head;
    summary.push_str(&summary_text(&report, &fit_cfg));
    let support: usize = terms.iter().map(Vec::len).sum();
    let _ = writeln!(summary, "support_size = {support}");
    let _ = writeln!(summary, "exact_recovery = {}", recovered(cfg, &terms, &data.truth));
    let mut files = vec![
        ("equations.txt".to_string(), equations.clone()),
        ("summary.txt".to_string(), summary),
        ("loss.csv".to_string(), loss_csv(&report)),
        ("gamma.csv".to_string(), gamma_csv(&report)),
        ("library.txt".to_string(), report.library.describe()),
    ];
    if !report.penalty_history.is_empty() {
        let mut csv = String::from("epoch,divergence_weight\n");
        for (e, w) in report.penalty_history.iter().enumerate() {
            let _ = writeln!(csv, "{e},{w:e}");
        }
        files.push(("penalty.csv".into(), csv));
    }
    Ok(FitOutcome { equations, terms, final_loss: report.final_loss, files })
}

pub fn method_name(m: Method) -> &'static str {
    match m {
        Method::AdamSindy => "adam-sindy",
        Method::AdamSindyDivergence => "adam-sindy-divergence",
        Method::SindyW => "sindy-w",
        Method::SindyWo => "sindy-wo",
    }
}

/// Writes every file to a temporary name first and renames only once all
/// writes succeeded.
pub fn write_atomically(dir: &Path, files: &[(String, String)]) -> Result<(), RunError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| RunError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut staged = Vec::new();
    for (name, body) in files {
        let tmp = dir.join(format!(".{name}.tmp"));
        if let Err(e) = fs::write(&tmp, body) {
            for (t, _) in &staged {
                let _ = fs::remove_file(t);
            }
            return Err(io(&tmp)(e));
        }
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, dest) in &staged {
        fs::rename(tmp, dest).map_err(io(dest))?;
    }
    Ok(())
}

/// Runs one config end to end and writes its artifacts. Returns the equations.
pub fn run(cfg: &RunConfig) -> Result<String, RunError> {
    let data = prepare(cfg)?;
    let mut outcome = execute(cfg, &data)?;
    outcome.files.push(("trajectory.csv".into(), data.data_csv));
    outcome.files.push(("config.toml".into(), cfg.effective_toml()));
    write_atomically(&cfg.output_dir(), &outcome.files)?;
    Ok(outcome.equations)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Knob {
    Lambda,
    GammaStd,
}

impl Knob {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "lambda" => Ok(Knob::Lambda),
            "gamma_std" => Ok(Knob::GammaStd),
            other => Err(ConfigError::Invalid(format!("unknown knob `{other}`, expected lambda or gamma_std"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Knob::Lambda => "lambda",
            Knob::GammaStd => "gamma_std",
        }
    }

    /// Copy of `cfg` with this knob set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig, ConfigError> {
        let mut c = cfg.clone();
        match (self, c.experiment.method.is_baseline()) {
            (Knob::Lambda, true) => c.sindy.as_mut().expect("validated").lambda = value,
            (Knob::Lambda, false) => {
                c.adam.sparsity = crate::config::Sparsity::Lambda;
                c.adam.lambda = value;
            }
            (Knob::GammaStd, false) => {
                c.adam.sparsity = crate::config::Sparsity::Gamma;
                c.adam.gamma_std = value;
            }
            (Knob::GammaStd, true) => {
                return Err(ConfigError::Invalid("gamma_std only applies to adam-sindy methods".into()))
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// `value,support_size,exact_recovery,final_loss` per value; a diverged fit
/// reports `NaN` loss and no recovery.
pub fn sweep(cfg: &RunConfig, knob: Knob, values: &[f64]) -> Result<String, RunError> {
    let configs: Vec<RunConfig> = values.iter().map(|v| knob.apply(cfg, *v)).collect::<Result<_, _>>()?;
    let mut csv = String::from("value,support_size,exact_recovery,final_loss\n");
    if configs.is_empty() {
        return Ok(csv);
    }
    let data = prepare(cfg)?;
    for (v, c) in values.iter().zip(&configs) {
        match execute(c, &data) {
            Ok(out) => {
                let exact = recovered(c, &out.terms, &data.truth);
                let _ = writeln!(csv, "{v:e},{},{exact},{:e}", out.support_size(), out.final_loss);
            }
            Err(RunError::Divergence(_)) => {
                let _ = writeln!(csv, "{v:e},0,false,NaN");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(csv)
}
