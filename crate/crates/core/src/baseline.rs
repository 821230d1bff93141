//! Sequentially thresholded least squares over a fixed library whose
//! nonlinear parameters are enumerated on grids.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::dataset::RegressionProblem;
use crate::error::{Result, SindyError};
use crate::library::{canonical_terms, terms_match, CandidateSpec, LibraryInstance, Param, Term};

/// Candidate values per family, keyed by [`crate::Family::kind_name`].
pub type ParamGrid = BTreeMap<String, Vec<f64>>;

/// A library in which every parameter is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedLibrary {
    pub instance: LibraryInstance,
}

impl FixedLibrary {
    pub fn n_columns(&self) -> usize {
        self.instance.n_columns()
    }

    /// `Θ`, shared by every equation.
    pub fn evaluate(&self, problem: &RegressionProblem) -> Result<DMatrix<f64>> {
        self.instance.evaluate(0, &problem.inputs, &problem.times)
    }
}

/// Expands each parameterized column of `base` into one column per grid value
/// of its family. Families missing from `grids` keep the base parameter of
/// equation 0; an empty grid drops the family.
pub fn build_fixed_library(base: &LibraryInstance, grids: &ParamGrid) -> Result<FixedLibrary> {
    let mut specs = Vec::new();
    for (j, spec) in base.specs.iter().enumerate() {
        if !spec.family.has_param() {
            specs.push(*spec);
            continue;
        }
        let values = match grids.get(spec.family.kind_name()) {
            Some(v) => v.clone(),
            None => vec![match spec.param {
                Param::Fixed(v) => v,
                _ => base.param_value(0, j),
            }],
        };
        for v in values {
            if !v.is_finite() {
                return Err(SindyError::InvalidArgument(format!(
                    "non-finite grid value for {}",
                    spec.family.kind_name()
                )));
            }
            specs.push(CandidateSpec::new(spec.family, Param::Fixed(v)));
        }
    }
    let instance = LibraryInstance::new(specs, base.n_equations(), base.input_names.clone())?;
    Ok(FixedLibrary { instance })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StlsqResult {
    /// `p × m`
    pub xi: DMatrix<f64>,
    pub iterations: usize,
    /// Whether every equation reached a fixed point within the iteration cap.
    pub converged: bool,
    /// Whether any sub-solve hit a rank-deficient active set.
    pub rank_deficient: bool,
}

/// Least squares on the given columns via a truncated SVD of the
/// column-normalized matrix. Returns the coefficients and a rank flag.
fn lstsq(theta: &DMatrix<f64>, cols: &[usize], b: &DVector<f64>) -> (Vec<f64>, bool) {
    if cols.is_empty() {
        return (Vec::new(), false);
    }
    let mut a = theta.select_columns(cols);
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    for (mut c, &nrm) in a.column_iter_mut().zip(&norms) {
        if nrm > 0.0 {
            c /= nrm;
        }
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * f64::EPSILON * theta.nrows().max(cols.len()) as f64;
    let deficient = svd.singular_values.iter().any(|s| *s <= tol) || norms.iter().any(|n| *n == 0.0);
    let x = svd.solve(b, tol).expect("both singular vector sets were computed");
    let coef = x.iter().zip(&norms).map(|(v, n)| if *n > 0.0 { v / n } else { 0.0 }).collect();
    (coef, deficient)
}

/// Sequentially thresholded least squares: solve on the active columns, drop
/// coefficients with magnitude below `knob`, repeat until the active set stops
/// changing or `max_iter` solves have run.
pub fn stlsq(theta: &DMatrix<f64>, targets: &DMatrix<f64>, knob: f64, max_iter: usize) -> Result<StlsqResult> {
    if theta.nrows() != targets.nrows() {
        return Err(SindyError::ShapeMismatch(format!(
            "library has {} rows, targets {}",
            theta.nrows(),
            targets.nrows()
        )));
    }
    if !(knob >= 0.0) || max_iter == 0 {
        return Err(SindyError::InvalidArgument(format!("knob {knob}, max_iter {max_iter}")));
    }
    let (p, m) = (theta.ncols(), targets.ncols());
    let mut xi = DMatrix::zeros(p, m);
    let mut iterations = 0;
    let mut converged = true;
    let mut rank_deficient = false;
    for j in 0..m {
        let b = targets.column(j).into_owned();
        let mut active: Vec<usize> = (0..p).collect();
        let mut coef = Vec::new();
        let mut done = false;
        for it in 0..max_iter {
            iterations = iterations.max(it + 1);
            let (c, deficient) = lstsq(theta, &active, &b);
            rank_deficient |= deficient;
            coef = c;
            let keep: Vec<usize> = active
                .iter()
                .zip(&coef)
                .filter(|(_, v)| v.abs() >= knob)
                .map(|(i, _)| *i)
                .collect();
            if keep.len() == active.len() {
                done = true;
                break;
            }
            active = keep;
            if active.is_empty() {
                coef.clear();
                done = true;
                break;
            }
        }
        converged &= done;
        for (i, v) in active.iter().zip(&coef) {
            xi[(*i, j)] = *v;
        }
    }
    Ok(StlsqResult { xi, iterations, converged, rank_deficient })
}

/// Canonical identified model per equation.
pub fn identified_terms(library: &FixedLibrary, xi: &DMatrix<f64>) -> Vec<Vec<Term>> {
    let lib = &library.instance;
    (0..xi.ncols())
        .map(|j| {
            canonical_terms(
                (0..xi.nrows()).map(|c| (lib.specs[c].family, lib.param_value(0, c), xi[(c, j)])),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub knob: f64,
    /// Total number of nonzero coefficients over all equations.
    pub support_size: usize,
    pub exact_recovery: bool,
}

/// Runs [`stlsq`] for each knob value and compares against `truth`
/// (supports equal, parameters and coefficients within 1e-3).
pub fn sweep_lambda(
    library: &FixedLibrary,
    problem: &RegressionProblem,
    knobs: &[f64],
    truth: &[Vec<Term>],
    max_iter: usize,
) -> Result<Vec<SweepRow>> {
    let theta = library.evaluate(problem)?;
    knobs
        .iter()
        .map(|&knob| {
            let res = stlsq(&theta, &problem.targets, knob, max_iter)?;
            let found = identified_terms(library, &res.xi);
            let exact = found.len() == truth.len()
                && found.iter().zip(truth).all(|(f, t)| terms_match(f, t, 1e-3, 1e-3));
            Ok(SweepRow {
                knob,
                support_size: res.xi.iter().filter(|v| **v != 0.0).count(),
                exact_recovery: exact,
            })
        })
        .collect()
}
