//! Sparse regression of governing equations over a candidate library whose
//! nonlinear parameters (frequencies, exponents, rates) are trained jointly
//! with the sparse coefficients.

pub mod baseline;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod library;
pub mod optim;
pub mod pde;

pub use dataset::{
    add_noise, derivatives_exact, derivatives_fd, integrate, make_benchmark, rk4, BenchmarkKind,
    BenchmarkSystem, FnField, RegressionProblem, Trajectory, VectorField,
};
pub use engine::{
    fit, fit_divergence, fit_trajectory, format_equations, format_model, FitConfig, FitReport, FitState,
    ObjectiveMode, Reduction, SparsityMode,
};
pub use baseline::{
    build_fixed_library, identified_terms, stlsq, sweep_lambda, FixedLibrary, ParamGrid, StlsqResult, SweepRow,
};
pub use error::{Result, SindyError};
pub use library::{
    canonical_terms, master_library, master_specs, retain_families, signed_pow, support_matches, terms_match, Axis,
    CandidateSpec, Family, LibraryInstance, MasterOptions, Param, Term,
};
pub use optim::{AdamConfig, AdamState, Direction, Schedule, Variant};
pub use pde::{
    fd_derivative, flatten_for_regression, simulate_wildfire, wildfire_library, wildfire_truth, Field2D, FieldSeries,
    GridSpec, WildfireParams,
};
