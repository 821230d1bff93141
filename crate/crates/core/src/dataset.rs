//! Benchmark ODE systems, fixed-step RK4 trajectories and derivative data.

use std::f64::consts::PI;
use std::fmt::{self, Write as _};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SindyError};
use crate::library::{signed_pow, Family, Term};

/// Sampled states, their time derivatives and the sample times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `n × m`, one row per sample.
    pub states: DMatrix<f64>,
    /// Same shape as `states`.
    pub derivatives: DMatrix<f64>,
    pub state_names: Vec<String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.states.ncols()
    }

    /// Sample spacing, taken from the first interval.
    pub fn dt(&self) -> Option<f64> {
        (self.times.len() >= 2).then(|| self.times[1] - self.times[0])
    }

    /// Checks shape agreement, finiteness and uniform spacing.
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.states.nrows() != n || self.derivatives.shape() != self.states.shape() {
            return Err(SindyError::ShapeMismatch(format!(
                "times {n}, states {:?}, derivatives {:?}",
                self.states.shape(),
                self.derivatives.shape()
            )));
        }
        if self.state_names.len() != self.states.ncols() {
            return Err(SindyError::ShapeMismatch(
                "one name per state column required".into(),
            ));
        }
        if self.states.iter().chain(self.derivatives.iter()).any(|v| !v.is_finite()) {
            return Err(SindyError::InvalidArgument("trajectory has non-finite entries".into()));
        }
        if let Some(dt) = self.dt() {
            if dt <= 0.0 {
                return Err(SindyError::InvalidArgument("times must increase".into()));
            }
            for w in self.times.windows(2) {
                let h = w[1] - w[0];
                // rounding in t0 + i·dt grows with |t|
                let tol = 1e-12 * dt + 8.0 * f64::EPSILON * w[1].abs();
                if h <= 0.0 || (h - dt).abs() > tol {
                    return Err(SindyError::InvalidArgument("times must be uniformly spaced".into()));
                }
            }
        }
        Ok(())
    }

    /// CSV with header `t,<states>,d<states>` and 17 significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for name in &self.state_names {
            let _ = write!(out, ",{name}");
        }
        for name in &self.state_names {
            let _ = write!(out, ",d{name}");
        }
        out.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            let _ = write!(out, "{t:.16e}");
            for v in self.states.row(i).iter().chain(self.derivatives.row(i).iter()) {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Right-hand side of an autonomous or time-dependent ODE `ẋ = f(x, t)`.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);
}

/// Adapter turning a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.f)(t, x, out)
    }
}

/// Classical fixed-step RK4. Returns sample times and the `(steps + 1) × dim` state matrix.
pub fn rk4<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t0: f64,
    dt: f64,
    steps: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let dim = field.dim();
    if x0.len() != dim {
        return Err(SindyError::ShapeMismatch(format!(
            "initial state has {} entries, field expects {dim}",
            x0.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(SindyError::InvalidArgument("dt must be positive".into()));
    }
    let mut states = DMatrix::zeros(steps + 1, dim);
    let mut times = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) =
        (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut tmp = vec![0.0; dim];

    for step in 0..=steps {
        let t = t0 + step as f64 * dt;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SindyError::NonFiniteState { step });
        }
        times.push(t);
        for (j, v) in x.iter().enumerate() {
            states[(step, j)] = *v;
        }
        if step == steps {
            break;
        }
        field.eval(t, &x, &mut k1);
        for j in 0..dim {
            tmp[j] = x[j] + 0.5 * dt * k1[j];
        }
        field.eval(t + 0.5 * dt, &tmp, &mut k2);
        for j in 0..dim {
            tmp[j] = x[j] + 0.5 * dt * k2[j];
        }
        field.eval(t + 0.5 * dt, &tmp, &mut k3);
        for j in 0..dim {
            tmp[j] = x[j] + dt * k3[j];
        }
        field.eval(t + dt, &tmp, &mut k4);
        for j in 0..dim {
            x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    Ok((times, states))
}

/// The five benchmark systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchmarkKind {
    Harmonic,
    VanDerPol,
    Abc,
    Chemical,
    Pharma,
}

impl BenchmarkKind {
    pub const ALL: [BenchmarkKind; 5] = [
        BenchmarkKind::Harmonic,
        BenchmarkKind::VanDerPol,
        BenchmarkKind::Abc,
        BenchmarkKind::Chemical,
        BenchmarkKind::Pharma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkKind::Harmonic => "harmonic",
            BenchmarkKind::VanDerPol => "vanderpol",
            BenchmarkKind::Abc => "abc",
            BenchmarkKind::Chemical => "chemical",
            BenchmarkKind::Pharma => "pharma",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| SindyError::UnknownBenchmark(name.to_string()))
    }

    pub fn description(self) -> &'static str {
        match self {
            BenchmarkKind::Harmonic => "x' = a y; y' = -b x + c y cos(d x)",
            BenchmarkKind::VanDerPol => "x' = y; y' = mu (1 - x^b) y - x",
            BenchmarkKind::Abc => "ABC flow with six Fourier frequencies",
            BenchmarkKind::Chemical => "a' = -k a exp(g th) + mu; th' = a exp(h th) - th",
            BenchmarkKind::Pharma => "B' = k0 t^eta G - kb B; G' = -k0 t^eta G; U' = kb B",
        }
    }
}

impl fmt::Display for BenchmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A benchmark ODE with its named parameters, initial state and sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSystem {
    pub kind: BenchmarkKind,
    /// Ordered `(name, value)` pairs.
    pub params: Vec<(String, f64)>,
    pub state_names: Vec<String>,
    pub initial_state: Vec<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
}

impl BenchmarkSystem {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn p(&self, i: usize) -> f64 {
        self.params[i].1
    }

    pub fn n_samples(&self) -> usize {
        self.n_steps() + 1
    }

    fn n_steps(&self) -> usize {
        ((self.t_end - self.t_start) / self.dt).round() as usize
    }

    /// Evaluates `f(x, t)` into `out`.
    pub fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self.kind {
            BenchmarkKind::Harmonic => {
                let (a, b, c, d) = (self.p(0), self.p(1), self.p(2), self.p(3));
                out[0] = a * x[1];
                out[1] = -b * x[0] + c * x[1] * (d * x[0]).cos();
            }
            BenchmarkKind::VanDerPol => {
                let (mu, b) = (self.p(0), self.p(1));
                out[0] = x[1];
                out[1] = mu * x[1] - mu * signed_pow(x[0], b) * x[1] - x[0];
            }
            BenchmarkKind::Abc => {
                let (a, b, c) = (self.p(0), self.p(1), self.p(2));
                let w = [self.p(3), self.p(4), self.p(5), self.p(6), self.p(7), self.p(8)];
                out[0] = a * (w[0] * x[2]).sin() + c * (w[1] * x[1]).cos();
                out[1] = b * (w[2] * x[0]).sin() + a * (w[3] * x[2]).cos();
                out[2] = c * (w[4] * x[1]).sin() + b * (w[5] * x[0]).cos();
            }
            BenchmarkKind::Chemical => {
                let (k, mu, g, h) = (self.p(0), self.p(1), self.p(2), self.p(3));
                out[0] = -k * x[0] * (g * x[1]).exp() + mu;
                out[1] = x[0] * (h * x[1]).exp() - x[1];
            }
            BenchmarkKind::Pharma => {
                let (kb, k0, eta) = (self.p(0), self.p(1), self.p(2));
                let kg = k0 * t.powf(eta);
                out[0] = kg * x[1] - kb * x[0];
                out[1] = -kg * x[1];
                out[2] = kb * x[0];
            }
        }
    }
}

impl BenchmarkSystem {
    /// Ground-truth model as library terms, one list per state equation.
    pub fn true_terms(&self) -> Vec<Vec<Term>> {
        use Family::*;
        let t = Term::new;
        match self.kind {
            BenchmarkKind::Harmonic => {
                let (a, b, c, d) = (self.p(0), self.p(1), self.p(2), self.p(3));
                vec![
                    vec![t(Poly { input: 1 }, 1.0, a)],
                    vec![t(Poly { input: 0 }, 1.0, -b), t(PolyCos { factor: 1, arg: 0 }, d, c)],
                ]
            }
            BenchmarkKind::VanDerPol => {
                let (mu, b) = (self.p(0), self.p(1));
                vec![
                    vec![t(Poly { input: 1 }, 1.0, 1.0)],
                    vec![
                        t(Poly { input: 0 }, 1.0, -1.0),
                        t(Poly { input: 1 }, 1.0, mu),
                        t(PowerProduct { base: 0, factor: 1 }, b, -mu),
                    ],
                ]
            }
            BenchmarkKind::Abc => {
                let (a, b, c) = (self.p(0), self.p(1), self.p(2));
                let w = |i: usize| self.p(3 + i);
                vec![
                    vec![t(Sin { input: 2 }, w(0), a), t(Cos { input: 1 }, w(1), c)],
                    vec![t(Sin { input: 0 }, w(2), b), t(Cos { input: 2 }, w(3), a)],
                    vec![t(Sin { input: 1 }, w(4), c), t(Cos { input: 0 }, w(5), b)],
                ]
            }
            BenchmarkKind::Chemical => {
                let (k, mu, g, h) = (self.p(0), self.p(1), self.p(2), self.p(3));
                vec![
                    vec![t(Constant, 0.0, mu), t(PolyExp { factor: 0, arg: 1 }, g, -k)],
                    vec![t(Poly { input: 1 }, 1.0, -1.0), t(PolyExp { factor: 0, arg: 1 }, h, 1.0)],
                ]
            }
            BenchmarkKind::Pharma => {
                let (kb, k0, eta) = (self.p(0), self.p(1), self.p(2));
                vec![
                    vec![t(Poly { input: 0 }, 1.0, -kb), t(TimePower { input: 1 }, -eta, k0)],
                    vec![t(TimePower { input: 1 }, -eta, -k0)],
                    vec![t(Poly { input: 0 }, 1.0, kb)],
                ]
            }
        }
    }
}

impl VectorField for BenchmarkSystem {
    fn dim(&self) -> usize {
        self.initial_state.len()
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.rhs(t, x, out)
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Builds a benchmark with its default parameters, replacing any named in `overrides`.
pub fn make_benchmark(name: &str, overrides: &[(&str, f64)]) -> Result<BenchmarkSystem> {
    let kind = BenchmarkKind::parse(name)?;
    let mut system = match kind {
        BenchmarkKind::Harmonic => BenchmarkSystem {
            kind,
            params: vec![
                ("a".into(), 1.0),
                ("b".into(), 1.0),
                ("c".into(), 0.1),
                ("d".into(), 0.75),
            ],
            state_names: names(&["x", "y"]),
            initial_state: vec![-2.0, 0.0],
            t_start: 0.0,
            t_end: 50.0,
            dt: 0.01,
        },
        BenchmarkKind::VanDerPol => BenchmarkSystem {
            kind,
            params: vec![("mu".into(), 0.01), ("b".into(), 2.15)],
            state_names: names(&["x", "y"]),
            initial_state: vec![0.0, -1.0],
            t_start: 0.0,
            t_end: 200.0,
            dt: 0.01,
        },
        BenchmarkKind::Abc => BenchmarkSystem {
            kind,
            params: vec![
                ("A".into(), 2.0),
                ("B".into(), 3.0),
                ("C".into(), 1.0),
                ("w1".into(), PI / 2.0),
                ("w2".into(), PI / 2.8),
                ("w3".into(), PI / 3.0),
                ("w4".into(), PI / 4.0),
                ("w5".into(), PI / 4.5),
                ("w6".into(), PI / 5.0),
            ],
            state_names: names(&["x", "y", "z"]),
            initial_state: vec![0.5, 0.2, 1.0],
            t_start: 0.0,
            t_end: 20.0,
            dt: 0.01,
        },
        BenchmarkKind::Chemical => BenchmarkSystem {
            kind,
            params: vec![
                ("k".into(), 0.07),
                ("mu".into(), 0.1),
                ("g".into(), 1.015),
                ("h".into(), 1.025),
            ],
            state_names: names(&["alpha", "theta"]),
            initial_state: vec![0.0, 5.0],
            t_start: 0.0,
            t_end: 200.0,
            dt: 0.02,
        },
        // k_g = k0 t^eta is singular at t = 0, so sampling starts one step in.
        BenchmarkKind::Pharma => BenchmarkSystem {
            kind,
            params: vec![("kb".into(), 0.15), ("k0".into(), 0.72), ("eta".into(), -0.5)],
            state_names: names(&["B", "G", "U"]),
            initial_state: vec![0.0, 1.0, 0.0],
            t_start: 0.001,
            t_end: 10.0,
            dt: 0.001,
        },
    };
    for (key, value) in overrides {
        match system.params.iter_mut().find(|(n, _)| n == key) {
            Some(slot) => slot.1 = *value,
            None => {
                return Err(SindyError::UnknownParameter {
                    system: kind.name().to_string(),
                    param: key.to_string(),
                })
            }
        }
    }
    Ok(system)
}

/// Integrates the system with fixed-step RK4 and fills derivatives from the exact right-hand side.
pub fn integrate(system: &BenchmarkSystem) -> Result<Trajectory> {
    if !(system.dt > 0.0) || !(system.t_end > system.t_start) {
        return Err(SindyError::InvalidArgument("need dt > 0 and t_end > t_start".into()));
    }
    let (times, states) = rk4(
        system,
        &system.initial_state,
        system.t_start,
        system.dt,
        system.n_steps(),
    )?;
    let mut traj = Trajectory {
        times,
        derivatives: DMatrix::zeros(states.nrows(), states.ncols()),
        states,
        state_names: system.state_names.clone(),
    };
    traj.derivatives = derivatives_exact(system, &traj);
    Ok(traj)
}

/// `Ẋ(tᵢ) = f(X(tᵢ), tᵢ)` from the known vector field.
pub fn derivatives_exact<F: VectorField + ?Sized>(field: &F, trajectory: &Trajectory) -> DMatrix<f64> {
    let (n, m) = trajectory.states.shape();
    let mut out = DMatrix::zeros(n, m);
    let mut x = vec![0.0; m];
    let mut dx = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            x[j] = trajectory.states[(i, j)];
        }
        field.eval(trajectory.times[i], &x, &mut dx);
        for j in 0..m {
            out[(i, j)] = dx[j];
        }
    }
    out
}

/// Second-order finite differences: central in the interior, one-sided at the ends.
pub fn derivatives_fd(trajectory: &Trajectory) -> Result<DMatrix<f64>> {
    let (n, m) = trajectory.states.shape();
    if n < 3 {
        return Err(SindyError::TooFewSamples { needed: 3, got: n });
    }
    let dt = trajectory.times[1] - trajectory.times[0];
    let x = &trajectory.states;
    let mut out = DMatrix::zeros(n, m);
    for j in 0..m {
        out[(0, j)] = (-3.0 * x[(0, j)] + 4.0 * x[(1, j)] - x[(2, j)]) / (2.0 * dt);
        for i in 1..n - 1 {
            out[(i, j)] = (x[(i + 1, j)] - x[(i - 1, j)]) / (2.0 * dt);
        }
        out[(n - 1, j)] =
            (3.0 * x[(n - 1, j)] - 4.0 * x[(n - 2, j)] + x[(n - 3, j)]) / (2.0 * dt);
    }
    Ok(out)
}

/// Adds zero-mean Gaussian noise scaled by `fraction` times each column's standard
/// deviation, then recomputes derivatives by finite differences.
pub fn add_noise(trajectory: &Trajectory, fraction: f64, seed: u64) -> Result<Trajectory> {
    if !(fraction >= 0.0) {
        return Err(SindyError::InvalidArgument("noise fraction must be >= 0".into()));
    }
    if fraction == 0.0 {
        return Ok(trajectory.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = trajectory.clone();
    let n = trajectory.len();
    for j in 0..trajectory.n_states() {
        let col = trajectory.states.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        let sigma = fraction * var.sqrt();
        if sigma == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| SindyError::InvalidArgument(e.to_string()))?;
        for i in 0..n {
            noisy.states[(i, j)] += normal.sample(&mut rng);
        }
    }
    noisy.derivatives = derivatives_fd(&noisy)?;
    Ok(noisy)
}

/// Regression data: inputs that the library reads and the targets it must reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    /// `n × k` library inputs (states, or states plus derivative features).
    pub inputs: DMatrix<f64>,
    pub times: Vec<f64>,
    /// `n × m` targets, one column per equation.
    pub targets: DMatrix<f64>,
    pub input_names: Vec<String>,
    pub target_names: Vec<String>,
}

impl RegressionProblem {
    pub fn from_trajectory(trajectory: &Trajectory) -> Result<Self> {
        trajectory.validate()?;
        Ok(Self {
            inputs: trajectory.states.clone(),
            times: trajectory.times.clone(),
            targets: trajectory.derivatives.clone(),
            input_names: trajectory.state_names.clone(),
            target_names: trajectory.state_names.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.inputs.nrows() != n || self.targets.nrows() != n {
            return Err(SindyError::ShapeMismatch(format!(
                "{n} times, {} input rows, {} target rows",
                self.inputs.nrows(),
                self.targets.nrows()
            )));
        }
        if self.inputs.ncols() != self.input_names.len()
            || self.targets.ncols() != self.target_names.len()
        {
            return Err(SindyError::ShapeMismatch("column names do not match data".into()));
        }
        if let Some(i) = self.inputs.iter().chain(self.targets.iter()).position(|v| !v.is_finite()) {
            return Err(SindyError::InvalidArgument(format!("non-finite regression entry {i}")));
        }
        Ok(())
    }

    /// Problem restricted to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(rows),
            times: rows.iter().map(|&r| self.times[r]).collect(),
            targets: self.targets.select_rows(rows),
            input_names: self.input_names.clone(),
            target_names: self.target_names.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn harmonic_defaults_and_override() {
        let s = make_benchmark("harmonic", &[]).unwrap();
        assert_eq!(s.param("a"), Some(1.0));
        assert_eq!(s.param("b"), Some(1.0));
        assert_eq!(s.param("c"), Some(0.1));
        assert_eq!(s.param("d"), Some(0.75));

        let o = make_benchmark("harmonic", &[("d", 1.0)]).unwrap();
        assert_eq!(o.param("d"), Some(1.0));
        assert_eq!(o.param("c"), Some(0.1));
        assert_eq!(o.initial_state, s.initial_state);
    }

    #[test]
    fn chemical_defaults() {
        let s = make_benchmark("chemical", &[]).unwrap();
        assert_eq!(s.param("k"), Some(0.07));
        assert_eq!(s.param("mu"), Some(0.1));
        assert_eq!(s.param("g"), Some(1.015));
        assert_eq!(s.param("h"), Some(1.025));
    }

    #[test]
    fn rejects_unknown_names() {
        assert!(matches!(
            make_benchmark("lorenz", &[]),
            Err(SindyError::UnknownBenchmark(_))
        ));
        assert!(matches!(
            make_benchmark("harmonic", &[("mu", 1.0)]),
            Err(SindyError::UnknownParameter { .. })
        ));
    }

    #[test]
    fn parameter_counts() {
        let counts = [("harmonic", 4), ("vanderpol", 2), ("abc", 9), ("chemical", 4), ("pharma", 3)];
        for (name, count) in counts {
            assert_eq!(make_benchmark(name, &[]).unwrap().params.len(), count, "{name}");
        }
    }

    #[test]
    fn linear_decay_matches_exponential() {
        let field = FnField::new(1, |_t, x: &[f64], out: &mut [f64]| out[0] = -x[0]);
        let (times, states) = rk4(&field, &[1.0], 0.0, 1e-3, 1000).unwrap();
        assert_abs_diff_eq!(times[1000], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(states[(1000, 0)], (-1.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn rk4_reports_blow_up_step() {
        let field = FnField::new(1, |_t, x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0]);
        let err = rk4(&field, &[1.0], 0.0, 0.1, 100).unwrap_err();
        assert!(matches!(err, SindyError::NonFiniteState { step } if step > 5));
    }

    #[test]
    fn harmonic_trajectory_shape() {
        let s = make_benchmark("harmonic", &[]).unwrap();
        let traj = integrate(&s).unwrap();
        assert_eq!(traj.len(), 5001);
        traj.validate().unwrap();
        let x = traj.states.column(0);
        assert!(x.iter().all(|v| v.abs() < 5.0));
        // oscillates: x changes sign repeatedly
        let crossings = x.as_slice().windows(2).filter(|w| w[0] * w[1] < 0.0).count();
        assert!(crossings > 10, "{crossings}");
    }

    #[test]
    fn abc_trajectory_finite() {
        let traj = integrate(&make_benchmark("abc", &[]).unwrap()).unwrap();
        assert_eq!(traj.len(), 2001);
        assert!(traj.states.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn exact_derivative_hand_values() {
        let h = make_benchmark("harmonic", &[]).unwrap();
        let mut out = [0.0; 2];
        h.rhs(0.0, &[1.0, 0.0], &mut out);
        assert_eq!(out, [0.0, -1.0]);

        let v = make_benchmark("vanderpol", &[]).unwrap();
        v.rhs(0.0, &[0.0, -1.0], &mut out);
        assert_abs_diff_eq!(out[0], -1.0);
        assert_abs_diff_eq!(out[1], -0.01, epsilon = 1e-15);

        // origin is a fixed point of the harmonic oscillator
        h.rhs(0.0, &[0.0, 0.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    fn synthetic(f: impl Fn(f64) -> f64, dt: f64, n: usize) -> Trajectory {
        let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let states = DMatrix::from_fn(n, 1, |i, _| f(times[i]));
        Trajectory {
            derivatives: DMatrix::zeros(n, 1),
            times,
            states,
            state_names: vec!["x".into()],
        }
    }

    #[test]
    fn fd_exact_for_quadratics() {
        let traj = synthetic(|t| t * t, 0.1, 20);
        let d = derivatives_fd(&traj).unwrap();
        for i in 0..20 {
            assert_abs_diff_eq!(d[(i, 0)], 2.0 * traj.times[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn fd_sine_error_is_second_order() {
        let dt = 0.01;
        let traj = synthetic(f64::sin, dt, 1000);
        let d = derivatives_fd(&traj).unwrap();
        let max_err = (0..1000)
            .map(|i| (d[(i, 0)] - traj.times[i].cos()).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= dt * dt, "{max_err}");
    }

    #[test]
    fn fd_constant_and_short() {
        let traj = synthetic(|_| 3.0, 0.5, 5);
        assert!(derivatives_fd(&traj).unwrap().iter().all(|v| *v == 0.0));
        let short = synthetic(|_| 3.0, 0.5, 2);
        assert!(matches!(derivatives_fd(&short), Err(SindyError::TooFewSamples { .. })));
    }

    #[test]
    fn noise_contract() {
        let traj = synthetic(f64::sin, 0.01, 20_000);
        assert_eq!(add_noise(&traj, 0.0, 7).unwrap(), traj);
        assert!(add_noise(&traj, -0.1, 7).is_err());

        let a = add_noise(&traj, 0.5, 11).unwrap();
        let b = add_noise(&traj, 0.5, 11).unwrap();
        assert_eq!(a, b);

        let noisy = add_noise(&traj, 0.1, 3).unwrap();
        let col = traj.states.column(0);
        let mean = col.mean();
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64).sqrt();
        let diff: Vec<f64> = (0..traj.len()).map(|i| noisy.states[(i, 0)] - traj.states[(i, 0)]).collect();
        let dm = diff.iter().sum::<f64>() / diff.len() as f64;
        let dstd = (diff.iter().map(|v| (v - dm).powi(2)).sum::<f64>() / (diff.len() - 1) as f64).sqrt();
        assert!((dstd / (0.1 * std) - 1.0).abs() < 0.05, "{dstd} vs {}", 0.1 * std);
    }

    #[test]
    fn csv_layout() {
        let traj = synthetic(|t| t, 0.5, 3);
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,x,dx"));
        let row: Vec<f64> = lines.nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row, vec![0.5, 0.5, 0.0]);
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
    }
}
