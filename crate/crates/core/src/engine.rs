//! Gradient-based sparse regression over a trainable library.
//!
//! Per equation `j` the objective is
//! `‖ẋ_j − Θ_j ξ_j‖² + λ Σ_c |Γ_cj| |ξ_cj|`, summed over equations. Ξ and Λ
//! are updated by ADAM descent; Γ (or the scalar λ) by descent in joint
//! minimization or optimistic ascent in the min-max formulation. After every
//! update, entries of Ξ and Λ at or below the tolerance are zeroed and masked
//! for the rest of the run.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::RegressionProblem;
use crate::error::{Result, SindyError};
use crate::library::{canonical_terms, duplicate_columns, LibraryInstance, Param, Term};
use crate::optim::{AdamConfig, AdamState, Direction, Schedule, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveMode {
    JointMin,
    MinMax,
}

impl ObjectiveMode {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveMode::JointMin => "joint_min",
            ObjectiveMode::MinMax => "min_max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityMode {
    /// Per-candidate Γ is trained; λ stays at its configured value.
    GammaTrainable,
    /// Γ is fixed at identity; the scalar λ is trained and clamped at 0.
    LambdaTrainable,
}

impl SparsityMode {
    pub fn name(self) -> &'static str {
        match self {
            SparsityMode::GammaTrainable => "gamma",
            SparsityMode::LambdaTrainable => "lambda",
        }
    }
}

/// How squared residuals are combined over samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr_xi: f64,
    pub lr_lambda: f64,
    pub lr_gamma: f64,
    pub lr_sparsity: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub threshold: f64,
    /// First epoch at which thresholding is applied.
    pub threshold_start: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub objective: ObjectiveMode,
    pub sparsity: SparsityMode,
    /// Fixed λ with trainable Γ, initial λ otherwise.
    pub lambda: f64,
    pub gamma_std: f64,
    pub seed: u64,
    pub divergence_penalty: bool,
    /// Reduction of the squared residuals over samples.
    pub reduction: Reduction,
    pub adam: AdamConfig,
    /// Record |Γ| every this many epochs (the final epoch is always recorded).
    pub history_stride: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr_xi: 0.1,
            lr_lambda: 0.1,
            lr_gamma: 0.1,
            lr_sparsity: 0.1,
            decay_factor: 0.5,
            decay_every: 4000,
            threshold: 5e-3,
            threshold_start: 0,
            batch_size: 0,
            objective: ObjectiveMode::JointMin,
            sparsity: SparsityMode::GammaTrainable,
            lambda: 1.0,
            gamma_std: 1.0,
            seed: 0,
            divergence_penalty: false,
            reduction: Reduction::Sum,
            adam: AdamConfig::default(),
            history_stride: 1,
        }
    }
}

impl FitConfig {
    /// Defaults with one learning rate for every block.
    pub fn with_schedule(epochs: usize, rate: f64, decay_every: u64) -> Self {
        Self {
            epochs,
            lr_xi: rate,
            lr_lambda: rate,
            lr_gamma: rate,
            lr_sparsity: rate,
            decay_every,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SindyError::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.threshold > 0.0) {
            return bad(format!("threshold {} must be positive", self.threshold));
        }
        for rate in [self.lr_xi, self.lr_lambda, self.lr_gamma, self.lr_sparsity] {
            Schedule::new(rate, self.decay_factor, self.decay_every)?;
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and non-negative", self.lambda));
        }
        if !(self.gamma_std >= 0.0 && self.gamma_std.is_finite()) {
            return bad(format!("gamma_std {} must be finite and non-negative", self.gamma_std));
        }
        if self.history_stride == 0 {
            return bad("history_stride must be at least 1".into());
        }
        AdamState::new(0, self.adam, Variant::Standard)?;
        Ok(())
    }

    fn schedule(&self, rate: f64) -> Schedule {
        Schedule { initial_rate: rate, decay_factor: self.decay_factor, decay_every: self.decay_every }
    }

    /// Every setting as `key = value` pairs.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("lr_xi", self.lr_xi.to_string()),
            ("lr_lambda", self.lr_lambda.to_string()),
            ("lr_gamma", self.lr_gamma.to_string()),
            ("lr_sparsity", self.lr_sparsity.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("decay_every", self.decay_every.to_string()),
            ("threshold", self.threshold.to_string()),
            ("threshold_start", self.threshold_start.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("objective", self.objective.name().to_string()),
            ("sparsity", self.sparsity.name().to_string()),
            ("lambda", self.lambda.to_string()),
            ("gamma_std", self.gamma_std.to_string()),
            ("seed", self.seed.to_string()),
            ("divergence_penalty", self.divergence_penalty.to_string()),
            ("reduction", self.reduction.name().to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_epsilon", self.adam.epsilon.to_string()),
            ("history_stride", self.history_stride.to_string()),
        ]
    }
}

/// Derives an independent seed for a named random stream.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Trainable quantities, masks and optimizer moments of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    /// `p × m`
    pub xi: DMatrix<f64>,
    /// `m × p̂`
    pub lambda: DMatrix<f64>,
    /// `p × m`
    pub gamma: DMatrix<f64>,
    pub sparsity: f64,
    /// `true` where Ξ has been thresholded.
    pub xi_mask: DMatrix<bool>,
    /// `true` where Λ has been thresholded.
    pub lambda_mask: DMatrix<bool>,
    pub epoch: usize,
    pub opt_xi: AdamState,
    pub opt_lambda: AdamState,
    pub opt_gamma: AdamState,
    pub opt_sparsity: AdamState,
    /// Number of times λ was clamped at zero.
    pub clamped: usize,
}

impl FitState {
    /// Ξ = 1, Λ from the library (all ones for freshly built libraries),
    /// Γ ~ N(0, σ) in trainable-Γ mode and 1 otherwise.
    pub fn new(library: &LibraryInstance, config: &FitConfig) -> Result<Self> {
        let p = library.n_columns();
        let m = library.n_equations();
        let slots = library.n_slots();
        let gamma = match config.sparsity {
            SparsityMode::GammaTrainable => {
                let normal = Normal::new(0.0, config.gamma_std)
                    .map_err(|e| SindyError::InvalidArgument(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "gamma-init"));
                DMatrix::from_fn(p, m, |_, _| normal.sample(&mut rng))
            }
            SparsityMode::LambdaTrainable => DMatrix::from_element(p, m, 1.0),
        };
        let gamma_variant = match config.objective {
            ObjectiveMode::JointMin => Variant::Standard,
            ObjectiveMode::MinMax => Variant::Optimistic,
        };
        Ok(Self {
            xi: DMatrix::from_element(p, m, 1.0),
            lambda: library.lambda.clone(),
            gamma,
            sparsity: config.lambda,
            xi_mask: DMatrix::from_element(p, m, false),
            lambda_mask: DMatrix::from_element(m, slots, false),
            epoch: 0,
            opt_xi: AdamState::new(p * m, config.adam, Variant::Standard)?,
            opt_lambda: AdamState::new(m * slots, config.adam, Variant::Standard)?,
            opt_gamma: AdamState::new(p * m, config.adam, gamma_variant)?,
            opt_sparsity: AdamState::new(1, config.adam, gamma_variant)?,
            clamped: 0,
        })
    }

    fn apply(&mut self, ev: &Evaluation, library: &LibraryInstance, config: &FitConfig) -> Result<()> {
        let epoch = self.epoch as u64;
        let diverged = || SindyError::Divergence { epoch: self.epoch };
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&ev.g_xi) || !finite(&ev.g_lambda) || !finite(&ev.g_gamma) || !ev.g_sparsity.is_finite()
        {
            return Err(diverged());
        }
        let frozen_xi: Vec<bool> = self.xi_mask.iter().copied().collect();
        self.opt_xi.step(
            self.xi.as_mut_slice(),
            ev.g_xi.as_slice(),
            config.schedule(config.lr_xi).rate_at(epoch),
            Direction::Descent,
            Some(&frozen_xi),
        )?;

        let slot_cols = library.slot_columns();
        let (m, slots) = self.lambda.shape();
        let mut frozen_lambda = vec![false; m * slots];
        for s in 0..slots {
            for j in 0..m {
                frozen_lambda[s * m + j] = self.lambda_mask[(j, s)] || self.xi_mask[(slot_cols[s], j)];
            }
        }
        self.opt_lambda.step(
            self.lambda.as_mut_slice(),
            ev.g_lambda.as_slice(),
            config.schedule(config.lr_lambda).rate_at(epoch),
            Direction::Descent,
            Some(&frozen_lambda),
        )?;

        if config.divergence_penalty {
            return Ok(());
        }
        let direction = match config.objective {
            ObjectiveMode::JointMin => Direction::Descent,
            ObjectiveMode::MinMax => Direction::Ascent,
        };
        match config.sparsity {
            SparsityMode::GammaTrainable => self.opt_gamma.step(
                self.gamma.as_mut_slice(),
                ev.g_gamma.as_slice(),
                config.schedule(config.lr_gamma).rate_at(epoch),
                direction,
                Some(&frozen_xi),
            )?,
            SparsityMode::LambdaTrainable => {
                let mut v = [self.sparsity];
                self.opt_sparsity.step(
                    &mut v,
                    &[ev.g_sparsity],
                    config.schedule(config.lr_sparsity).rate_at(epoch),
                    direction,
                    None,
                )?;
                self.sparsity = if v[0] < 0.0 {
                    self.clamped += 1;
                    0.0
                } else {
                    v[0]
                };
            }
        }
        Ok(())
    }
}

/// Zeroes and permanently masks every live Ξ entry with `|Ξ| ≤ ε` and every
/// live Λ entry with `|Λ| ≤ ε`. Returns the number of newly masked entries.
pub fn threshold(state: &mut FitState, eps: f64) -> usize {
    let mut count = 0;
    for (v, mask) in state.xi.iter_mut().zip(state.xi_mask.iter_mut()) {
        if !*mask && v.abs() <= eps {
            *v = 0.0;
            *mask = true;
            count += 1;
        }
    }
    for (v, mask) in state.lambda.iter_mut().zip(state.lambda_mask.iter_mut()) {
        if !*mask && v.abs() <= eps {
            *v = 0.0;
            *mask = true;
            count += 1;
        }
    }
    count
}

fn check_thetas(targets: &DMatrix<f64>, thetas: &[DMatrix<f64>], xi: &DMatrix<f64>) -> Result<()> {
    let (n, m) = targets.shape();
    if thetas.len() != m || xi.ncols() != m {
        return Err(SindyError::ShapeMismatch(format!(
            "{m} targets, {} libraries, Ξ with {} columns",
            thetas.len(),
            xi.ncols()
        )));
    }
    if let Some(t) = thetas.iter().find(|t| t.nrows() != n || t.ncols() != xi.nrows()) {
        return Err(SindyError::ShapeMismatch(format!(
            "library {:?} against {n} rows and {} coefficients",
            t.shape(),
            xi.nrows()
        )));
    }
    Ok(())
}

fn check_same(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SindyError::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `Ẋ − ΘΞ`, column `j` using equation `j`'s library.
pub fn residuals(targets: &DMatrix<f64>, thetas: &[DMatrix<f64>], xi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_thetas(targets, thetas, xi)?;
    let mut r = targets.clone();
    for (j, theta) in thetas.iter().enumerate() {
        let pred = theta * xi.column(j);
        r.column_mut(j).axpy(-1.0, &pred, 1.0);
    }
    Ok(r)
}

/// `Σ_j ‖ẋ_j − Θ_j ξ_j‖² + λ ‖|Γ| ⊙ Ξ‖₁`
pub fn loss(
    targets: &DMatrix<f64>,
    thetas: &[DMatrix<f64>],
    xi: &DMatrix<f64>,
    lambda: f64,
    gamma: &DMatrix<f64>,
) -> Result<f64> {
    check_same(xi, gamma, "Ξ and Γ")?;
    let r = residuals(targets, thetas, xi)?;
    let l1: f64 = xi.iter().zip(gamma.iter()).map(|(x, g)| (g * x).abs()).sum();
    Ok(r.norm_squared() + lambda * l1)
}

/// `−2 Θ_jᵀ r_j + λ |Γ| ⊙ sign(ξ_j)` per column.
pub fn grad_xi(
    targets: &DMatrix<f64>,
    thetas: &[DMatrix<f64>],
    xi: &DMatrix<f64>,
    lambda: f64,
    gamma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_same(xi, gamma, "Ξ and Γ")?;
    let r = residuals(targets, thetas, xi)?;
    let mut g = DMatrix::zeros(xi.nrows(), xi.ncols());
    for (j, theta) in thetas.iter().enumerate() {
        let tr = theta.tr_mul(&r.column(j));
        for c in 0..xi.nrows() {
            g[(c, j)] = -2.0 * tr[c] + lambda * gamma[(c, j)].abs() * sgn(xi[(c, j)]);
        }
    }
    Ok(g)
}

/// Gradient of the loss in Λ: for slot `s` of equation `j`,
/// `−2 Σ_rows r_j ⊙ ∂Θ_col(s)/∂Λ_js · Ξ_col(s),j`.
///
/// `d_thetas[j]` is equation `j`'s `n × p̂` matrix of parameter partials.
pub fn grad_lambda(
    residuals: &DMatrix<f64>,
    d_thetas: &[DMatrix<f64>],
    slot_columns: &[usize],
    xi: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (n, m) = residuals.shape();
    if d_thetas.len() != m || xi.ncols() != m {
        return Err(SindyError::ShapeMismatch("one partial matrix per equation required".into()));
    }
    let slots = slot_columns.len();
    let mut g = DMatrix::zeros(m, slots);
    for (j, d) in d_thetas.iter().enumerate() {
        if d.shape() != (n, slots) {
            return Err(SindyError::ShapeMismatch(format!("partials {:?} vs ({n}, {slots})", d.shape())));
        }
        for (s, &c) in slot_columns.iter().enumerate() {
            if c >= xi.nrows() {
                return Err(SindyError::ShapeMismatch(format!("slot {s} points at column {c}")));
            }
            g[(j, s)] = -2.0 * d.column(s).dot(&residuals.column(j)) * xi[(c, j)];
        }
    }
    Ok(g)
}

/// `λ |Ξ| ⊙ sign(Γ)`
pub fn grad_gamma(xi: &DMatrix<f64>, lambda: f64, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_same(xi, gamma, "Ξ and Γ")?;
    Ok(xi.zip_map(gamma, |x, g| lambda * x.abs() * sgn(g)))
}

/// `∂L/∂λ = ‖|Γ| ⊙ Ξ‖₁`
pub fn grad_lambda_scalar(xi: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<f64> {
    check_same(xi, gamma, "Ξ and Γ")?;
    Ok(xi.iter().zip(gamma.iter()).map(|(x, g)| (g * x).abs()).sum())
}

/// Loss and all gradients at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Sum of squared residuals.
    pub misfit: f64,
    /// Weight multiplying `‖Ξ‖₁` when the divergence penalty is active.
    pub divergence: Option<f64>,
    pub g_xi: DMatrix<f64>,
    pub g_lambda: DMatrix<f64>,
    pub g_gamma: DMatrix<f64>,
    pub g_sparsity: f64,
}

/// Column-wise loss/gradient evaluation that skips thresholded candidates and
/// caches columns whose parameter can no longer change.
pub struct Evaluator<'a> {
    library: &'a LibraryInstance,
    reduction: Reduction,
    cache: Vec<Vec<Option<Vec<f64>>>>,
    values: Vec<f64>,
    partials: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(library: &'a LibraryInstance, reduction: Reduction) -> Self {
        Self {
            library,
            reduction,
            cache: vec![vec![None; library.n_columns()]; library.n_equations()],
            values: Vec::new(),
            partials: Vec::new(),
        }
    }

    fn param(&self, state: &FitState, eq: usize, c: usize) -> (f64, Option<usize>) {
        match self.library.specs[c].param {
            Param::None => (0.0, None),
            Param::Fixed(v) => (v, None),
            Param::Trainable(s) if state.lambda_mask[(eq, s)] => (state.lambda[(eq, s)], None),
            Param::Trainable(s) => (state.lambda[(eq, s)], Some(s)),
        }
    }

    fn check(&self, problem: &RegressionProblem, state: &FitState) -> Result<()> {
        let lib = self.library;
        let (p, m) = state.xi.shape();
        if p != lib.n_columns() || m != lib.n_equations() || problem.targets.ncols() != m {
            return Err(SindyError::ShapeMismatch(format!(
                "Ξ {:?}, library {} columns × {} equations, {} targets",
                state.xi.shape(),
                lib.n_columns(),
                lib.n_equations(),
                problem.targets.ncols()
            )));
        }
        if problem.inputs.ncols() != lib.input_names.len() || problem.inputs.nrows() != problem.times.len() {
            return Err(SindyError::ShapeMismatch("problem inputs do not match the library".into()));
        }
        Ok(())
    }

    /// Evaluates loss and gradients. `use_cache` must only be set when every
    /// call sees the same rows.
    pub fn evaluate(
        &mut self,
        problem: &RegressionProblem,
        state: &FitState,
        use_cache: bool,
        divergence_penalty: bool,
    ) -> Result<Evaluation> {
        self.check(problem, state)?;
        let lib = self.library;
        let (p, m) = state.xi.shape();
        let n = problem.len();
        let mut ev = Evaluation {
            loss: 0.0,
            misfit: 0.0,
            divergence: None,
            g_xi: DMatrix::zeros(p, m),
            g_lambda: DMatrix::zeros(m, lib.n_slots()),
            g_gamma: DMatrix::zeros(p, m),
            g_sparsity: 0.0,
        };
        let lam = if divergence_penalty { 0.0 } else { state.sparsity };
        let scale = match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        };
        let mut penalty = 0.0;
        for j in 0..m {
            let live: Vec<usize> = (0..p).filter(|&c| !state.xi_mask[(c, j)]).collect();
            self.values.resize(live.len() * n, 0.0);
            self.partials.resize(live.len() * n, 0.0);
            for (li, &c) in live.iter().enumerate() {
                let (s, slot) = self.param(state, j, c);
                let vals = &mut self.values[li * n..(li + 1) * n];
                if slot.is_none() && use_cache {
                    if self.cache[j][c].is_none() {
                        let mut col = vec![0.0; n];
                        lib.column_into(c, s, &problem.inputs, &problem.times, &mut col, None)?;
                        self.cache[j][c] = Some(col);
                    }
                    vals.copy_from_slice(self.cache[j][c].as_deref().expect("filled above"));
                } else if slot.is_some() {
                    let d = &mut self.partials[li * n..(li + 1) * n];
                    lib.column_into(c, s, &problem.inputs, &problem.times, vals, Some(d))?;
                } else {
                    lib.column_into(c, s, &problem.inputs, &problem.times, vals, None)?;
                }
            }
            let mut r: Vec<f64> = problem.targets.column(j).iter().copied().collect();
            for (li, &c) in live.iter().enumerate() {
                let x = state.xi[(c, j)];
                for (ri, v) in r.iter_mut().zip(&self.values[li * n..(li + 1) * n]) {
                    *ri -= x * v;
                }
            }
            ev.misfit += scale * r.iter().map(|v| v * v).sum::<f64>();
            for (li, &c) in live.iter().enumerate() {
                let x = state.xi[(c, j)];
                let g = state.gamma[(c, j)];
                let dot: f64 = self.values[li * n..(li + 1) * n].iter().zip(&r).map(|(a, b)| a * b).sum();
                ev.g_xi[(c, j)] = -2.0 * scale * dot + lam * g.abs() * sgn(x);
                ev.g_gamma[(c, j)] = lam * x.abs() * sgn(g);
                penalty += (g * x).abs();
                if let (_, Some(s)) = self.param(state, j, c) {
                    let dot: f64 =
                        self.partials[li * n..(li + 1) * n].iter().zip(&r).map(|(a, b)| a * b).sum();
                    ev.g_lambda[(j, s)] = -2.0 * scale * dot * x;
                }
            }
        }
        if divergence_penalty {
            let weight = self.add_divergence_terms(problem, state, &mut ev)?;
            let l1: f64 = state.xi.iter().map(|x| x.abs()).sum();
            ev.divergence = Some(weight);
            ev.loss = ev.misfit + weight * l1;
        } else {
            ev.g_sparsity = penalty;
            ev.loss = ev.misfit + lam * penalty;
        }
        Ok(ev)
    }

    /// Adds the gradient of `Γ̂ ‖Ξ‖₁` with `Γ̂ = mean_rows |Σ_j ∂ẋ_j/∂x_j|`.
    fn add_divergence_terms(
        &self,
        problem: &RegressionProblem,
        state: &FitState,
        ev: &mut Evaluation,
    ) -> Result<f64> {
        let lib = self.library;
        let (p, m) = state.xi.shape();
        let n = problem.len();
        let div = divergence_rows(lib, &state.lambda, &state.xi, problem)?;
        let weight = div.iter().map(|d| d.abs()).sum::<f64>() / n as f64;
        let l1: f64 = state.xi.iter().map(|x| x.abs()).sum();
        let signs: Vec<f64> = div.iter().map(|d| sgn(*d)).collect();
        for j in 0..m {
            for c in 0..p {
                if state.xi_mask[(c, j)] {
                    continue;
                }
                let x = state.xi[(c, j)];
                let (s, slot) = self.param(state, j, c);
                let (ia, ib) = lib.specs[c].family.inputs();
                let (mut sx, mut sxp) = (0.0, 0.0);
                if ia == Some(j) || ib == Some(j) {
                    for r in 0..n {
                        let a = ia.map_or(0.0, |i| problem.inputs[(r, i)]);
                        let b = ib.map_or(0.0, |i| problem.inputs[(r, i)]);
                        let (_, dx, dxdp) = lib.input_partials(c, s, j, a, b, problem.times[r]);
                        sx += signs[r] * dx;
                        sxp += signs[r] * dxdp;
                    }
                }
                ev.g_xi[(c, j)] += weight * sgn(x) + l1 * sx / n as f64;
                if let Some(s) = slot {
                    ev.g_lambda[(j, s)] += l1 * x * sxp / n as f64;
                }
            }
        }
        Ok(weight)
    }
}

fn divergence_rows(
    library: &LibraryInstance,
    lambda: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    problem: &RegressionProblem,
) -> Result<Vec<f64>> {
    let (p, m) = xi.shape();
    if problem.inputs.ncols() != m {
        return Err(SindyError::ShapeMismatch(format!(
            "divergence needs one input per equation, got {} inputs for {m} equations",
            problem.inputs.ncols()
        )));
    }
    if library.specs.iter().any(|s| matches!(s.family, crate::library::Family::SpatialDeriv { .. })) {
        return Err(SindyError::Unsupported(
            "divergence penalty with spatial-derivative columns".into(),
        ));
    }
    let n = problem.len();
    let mut div = vec![0.0; n];
    for j in 0..m {
        for c in 0..p {
            let x = xi[(c, j)];
            if x == 0.0 {
                continue;
            }
            let (ia, ib) = library.specs[c].family.inputs();
            if ia != Some(j) && ib != Some(j) {
                continue;
            }
            let s = match library.specs[c].param {
                Param::None => 0.0,
                Param::Fixed(v) => v,
                Param::Trainable(s) => lambda[(j, s)],
            };
            for (r, d) in div.iter_mut().enumerate() {
                let a = ia.map_or(0.0, |i| problem.inputs[(r, i)]);
                let b = ib.map_or(0.0, |i| problem.inputs[(r, i)]);
                let (_, dx, _) = library.input_partials(c, s, j, a, b, problem.times[r]);
                *d += x * dx;
            }
        }
    }
    if let Some(row) = div.iter().position(|d| !d.is_finite()) {
        return Err(SindyError::NonFiniteColumn { column: 0, row });
    }
    Ok(div)
}

/// `Γ̂`: mean absolute divergence of the model `ΘΞ` over the samples, using
/// the library's own Λ.
pub fn divergence_weight(
    problem: &RegressionProblem,
    library: &LibraryInstance,
    xi: &DMatrix<f64>,
) -> Result<f64> {
    if xi.shape() != (library.n_columns(), library.n_equations()) {
        return Err(SindyError::ShapeMismatch("Ξ does not match the library".into()));
    }
    let div = divergence_rows(library, &library.lambda, xi, problem)?;
    Ok(div.iter().map(|d| d.abs()).sum::<f64>() / problem.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaSnapshot {
    pub epoch: usize,
    /// `p × m` entrywise |Γ|.
    pub abs_gamma: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub xi: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub sparsity: f64,
    pub xi_mask: DMatrix<bool>,
    pub lambda_mask: DMatrix<bool>,
    /// Full-data loss at the start of each epoch.
    pub loss_history: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
    pub gamma_history: Vec<GammaSnapshot>,
    /// Divergence weight per epoch (divergence penalty only).
    pub penalty_history: Vec<f64>,
    /// Epoch at which each Ξ entry was thresholded.
    pub xi_threshold_epoch: DMatrix<Option<usize>>,
    pub lambda_clamped: usize,
    pub duplicate_warnings: Vec<String>,
    pub epoch_seconds: Vec<f64>,
    pub seed: u64,
    /// Library with the final Λ.
    pub library: LibraryInstance,
    pub target_names: Vec<String>,
}

impl FitReport {
    pub fn epochs_run(&self) -> usize {
        self.loss_history.len()
    }

    /// Retained library columns for equation `eq`.
    pub fn support(&self, eq: usize) -> Vec<usize> {
        (0..self.xi.nrows()).filter(|&c| self.xi[(c, eq)] != 0.0).collect()
    }

    pub fn is_empty_model(&self) -> bool {
        self.xi.iter().all(|v| *v == 0.0)
    }

    /// Parameter value used by column `c` of equation `eq`.
    pub fn param(&self, eq: usize, c: usize) -> f64 {
        self.library.param_value(eq, c)
    }

    /// Identified model per equation in canonical form (see [`canonical_terms`]).
    pub fn terms(&self) -> Vec<Vec<Term>> {
        (0..self.xi.ncols())
            .map(|j| {
                canonical_terms(
                    (0..self.xi.nrows()).map(|c| (self.library.specs[c].family, self.param(j, c), self.xi[(c, j)])),
                )
            })
            .collect()
    }

    /// Identified equations, one line per target, followed by duplicate-column warnings.
    pub fn equations(&self) -> String {
        format_equations(self, &self.library, &self.target_names)
    }
}

/// Fits a trajectory's states against its derivatives.
pub fn fit_trajectory(
    trajectory: &crate::dataset::Trajectory,
    library: &LibraryInstance,
    config: &FitConfig,
) -> Result<FitReport> {
    fit(&RegressionProblem::from_trajectory(trajectory)?, library, config)
}

/// Runs the training loop.
pub fn fit(problem: &RegressionProblem, library: &LibraryInstance, config: &FitConfig) -> Result<FitReport> {
    config.validate()?;
    problem.validate()?;
    library.validate()?;
    if problem.targets.ncols() != library.n_equations() {
        return Err(SindyError::ShapeMismatch(format!(
            "{} targets for a library with {} equations",
            problem.targets.ncols(),
            library.n_equations()
        )));
    }
    if problem.inputs.ncols() != library.input_names.len() {
        return Err(SindyError::ShapeMismatch(format!(
            "{} inputs for a library reading {}",
            problem.inputs.ncols(),
            library.input_names.len()
        )));
    }
    if problem.is_empty() {
        return Err(SindyError::TooFewSamples { needed: 1, got: 0 });
    }
    if config.divergence_penalty {
        divergence_rows(library, &library.lambda, &DMatrix::zeros(library.n_columns(), library.n_equations()), problem)?;
    }

    let div = config.divergence_penalty;
    let mut state = FitState::new(library, config)?;
    if div {
        state.sparsity = 1.0;
    }
    let (p, m) = state.xi.shape();
    let mut evaluator = Evaluator::new(library, config.reduction);
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut penalty_history = Vec::new();
    let mut gamma_history = Vec::new();
    let mut epoch_seconds = Vec::with_capacity(config.epochs);
    let mut xi_threshold_epoch = DMatrix::from_element(p, m, None);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "batching"));
    let full_batch = config.batch_size == 0 || config.batch_size >= problem.len();
    let mut rows: Vec<usize> = (0..problem.len()).collect();

    let as_divergence = |e: SindyError, epoch: usize| match e {
        SindyError::NonFiniteColumn { .. } => SindyError::Divergence { epoch },
        other => other,
    };
    let record = |state: &FitState, newly: &mut DMatrix<Option<usize>>| {
        for c in 0..p {
            for j in 0..m {
                if state.xi_mask[(c, j)] && newly[(c, j)].is_none() {
                    newly[(c, j)] = Some(state.epoch);
                }
            }
        }
    };

    for epoch in 0..config.epochs {
        let started = Instant::now();
        state.epoch = epoch;
        let ev = evaluator
            .evaluate(problem, &state, true, div)
            .map_err(|e| as_divergence(e, epoch))?;
        if !ev.loss.is_finite() {
            return Err(SindyError::Divergence { epoch });
        }
        loss_history.push(ev.loss);
        if let Some(w) = ev.divergence {
            penalty_history.push(w);
        }
        if full_batch {
            state.apply(&ev, library, config)?;
            if epoch >= config.threshold_start {
                threshold(&mut state, config.threshold);
            }
            record(&state, &mut xi_threshold_epoch);
        } else {
            rows.shuffle(&mut batch_rng);
            for chunk in rows.chunks(config.batch_size) {
                let batch = problem.select_rows(chunk);
                let ev = evaluator
                    .evaluate(&batch, &state, false, div)
                    .map_err(|e| as_divergence(e, epoch))?;
                state.apply(&ev, library, config)?;
                if epoch >= config.threshold_start {
                    threshold(&mut state, config.threshold);
                }
                record(&state, &mut xi_threshold_epoch);
            }
        }
        if epoch % config.history_stride == 0 || epoch + 1 == config.epochs {
            gamma_history.push(GammaSnapshot { epoch, abs_gamma: state.gamma.abs() });
        }
        epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    state.epoch = config.epochs;
    let final_eval = evaluator
        .evaluate(problem, &state, true, div)
        .map_err(|e| as_divergence(e, config.epochs))?;
    if !final_eval.loss.is_finite() {
        return Err(SindyError::Divergence { epoch: config.epochs });
    }

    let mut final_library = library.clone();
    final_library.lambda = state.lambda.clone();
    let duplicate_warnings = duplicate_warnings(problem, &final_library, &state.xi)?;
    Ok(FitReport {
        xi: state.xi,
        lambda: state.lambda,
        gamma: state.gamma,
        sparsity: state.sparsity,
        xi_mask: state.xi_mask,
        lambda_mask: state.lambda_mask,
        loss_history,
        final_loss: final_eval.loss,
        gamma_history,
        penalty_history,
        xi_threshold_epoch,
        lambda_clamped: state.clamped,
        duplicate_warnings,
        epoch_seconds,
        seed: config.seed,
        library: final_library,
        target_names: problem.target_names.clone(),
    })
}

/// Runs the training loop with the divergence weight in place of λ|Γ|.
pub fn fit_divergence(
    problem: &RegressionProblem,
    library: &LibraryInstance,
    config: &FitConfig,
) -> Result<FitReport> {
    let config = FitConfig { divergence_penalty: true, ..config.clone() };
    fit(problem, library, &config)
}

fn duplicate_warnings(
    problem: &RegressionProblem,
    library: &LibraryInstance,
    xi: &DMatrix<f64>,
) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for j in 0..xi.ncols() {
        let active: Vec<usize> = (0..xi.nrows()).filter(|&c| xi[(c, j)] != 0.0).collect();
        if active.len() < 2 {
            continue;
        }
        let theta = library.evaluate(j, &problem.inputs, &problem.times)?;
        for (a, b) in duplicate_columns(&theta, &active) {
            let la = library.specs[a].label(library.param_value(j, a), &library.input_names);
            let lb = library.specs[b].label(library.param_value(j, b), &library.input_names);
            out.push(format!(
                "warning: d{}/dt uses near-identical columns {a} ({la}) and {b} ({lb})",
                problem.target_names[j]
            ));
        }
    }
    Ok(out)
}

/// One line per target: `d<name>/dt = c·term + …`, then any duplicate-column warnings.
pub fn format_equations(report: &FitReport, library: &LibraryInstance, names: &[String]) -> String {
    let mut out = format_model(library, &report.lambda, &report.xi, names);
    for w in &report.duplicate_warnings {
        out.push_str(w);
        out.push('\n');
    }
    out
}

/// One line per target for coefficients `xi` (`p × m`) over `library` with
/// parameters `lambda` (`m × p̂`); zero coefficients are omitted.
pub fn format_model(library: &LibraryInstance, lambda: &DMatrix<f64>, xi: &DMatrix<f64>, names: &[String]) -> String {
    let mut out = String::new();
    for j in 0..xi.ncols() {
        let name = names.get(j).cloned().unwrap_or_else(|| format!("x{j}"));
        let _ = write!(out, "d{name}/dt =");
        let mut first = true;
        for c in (0..xi.nrows()).filter(|&c| xi[(c, j)] != 0.0) {
            let coef = xi[(c, j)];
            let theta = match library.specs[c].param {
                Param::None => 0.0,
                Param::Fixed(v) => v,
                Param::Trainable(s) => lambda[(j, s)],
            };
            let label = library.specs[c].label(theta, &library.input_names);
            let term = if label == "1" {
                format!("{:.6}", coef.abs())
            } else {
                format!("{:.6}·{label}", coef.abs())
            };
            let sign = match (first, coef < 0.0) {
                (true, false) => " ",
                (true, true) => " -",
                (false, false) => " + ",
                (false, true) => " - ",
            };
            out.push_str(sign);
            out.push_str(&term);
            first = false;
        }
        if first {
            out.push_str(" 0");
        }
        out.push('\n');
    }
    out
}

/// `epoch,loss` rows.
pub fn loss_csv(report: &FitReport) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in report.loss_history.iter().enumerate() {
        let _ = writeln!(out, "{e},{l:e}");
    }
    out
}

/// `epoch,candidate_id,abs_gamma` rows; the candidate id is `<target>:<column>`.
pub fn gamma_csv(report: &FitReport) -> String {
    let mut out = String::from("epoch,candidate_id,abs_gamma\n");
    for snap in &report.gamma_history {
        for j in 0..snap.abs_gamma.ncols() {
            for c in 0..snap.abs_gamma.nrows() {
                let _ = writeln!(
                    out,
                    "{},{}:{c},{:e}",
                    snap.epoch, report.target_names[j], snap.abs_gamma[(c, j)]
                );
            }
        }
    }
    out
}

/// `key = value` summary of the final parameters and the configuration.
pub fn summary_text(report: &FitReport, config: &FitConfig) -> String {
    let mut out = String::new();
    for (k, v) in config.echo() {
        let _ = writeln!(out, "config.{k} = {v}");
    }
    let _ = writeln!(out, "epochs_run = {}", report.epochs_run());
    let _ = writeln!(out, "final_loss = {:e}", report.final_loss);
    let _ = writeln!(out, "lambda = {}", report.sparsity);
    let _ = writeln!(out, "lambda_clamped = {}", report.lambda_clamped);
    let lib = &report.library;
    for (j, name) in report.target_names.iter().enumerate() {
        for c in 0..report.xi.nrows() {
            let label = lib.specs[c].label(lib.param_value(j, c), &lib.input_names);
            let _ = writeln!(out, "xi.{name}.{c} = {} # {label}", report.xi[(c, j)]);
        }
        for c in 0..report.xi.nrows() {
            if let Some(e) = report.xi_threshold_epoch[(c, j)] {
                let _ = writeln!(out, "thresholded.{name}.{c} = {e}");
            }
        }
        for s in 0..report.lambda.ncols() {
            let _ = writeln!(out, "Lambda.{name}.{s} = {}", report.lambda[(j, s)]);
        }
        for c in 0..report.gamma.nrows() {
            let _ = writeln!(out, "Gamma.{name}.{c} = {}", report.gamma[(c, j)]);
        }
    }
    out
}
