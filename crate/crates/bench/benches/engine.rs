use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use sindy_core::engine::Evaluator;
use sindy_core::{
    fit, integrate, make_benchmark, master_library, stlsq, FitConfig, FitState, MasterOptions, Reduction,
    RegressionProblem,
};

fn harmonic() -> (RegressionProblem, sindy_core::LibraryInstance) {
    let traj = integrate(&make_benchmark("harmonic", &[]).unwrap()).unwrap();
    let lib = master_library(traj.n_states(), &MasterOptions::default(), &traj.state_names).unwrap();
    (RegressionProblem::from_trajectory(&traj).unwrap(), lib)
}

fn evaluate(c: &mut Criterion) {
    let (problem, lib) = harmonic();
    let cfg = FitConfig::with_schedule(1, 0.1, 1);
    let state = FitState::new(&lib, &cfg).unwrap();
    c.bench_function("evaluate/harmonic/uncached", |b| {
        let mut ev = Evaluator::new(&lib, Reduction::Sum);
        b.iter(|| black_box(ev.evaluate(&problem, &state, false, false).unwrap().loss))
    });
    c.bench_function("evaluate/harmonic/cached", |b| {
        let mut ev = Evaluator::new(&lib, Reduction::Sum);
        b.iter(|| black_box(ev.evaluate(&problem, &state, true, false).unwrap().loss))
    });
}

fn fit_epochs(c: &mut Criterion) {
    let (problem, lib) = harmonic();
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("harmonic/100_epochs", |b| {
        b.iter_batched(
            || FitConfig::with_schedule(100, 0.1, 4000),
            |cfg| black_box(fit(&problem, &lib, &cfg).unwrap().final_loss),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn baseline(c: &mut Criterion) {
    let (problem, lib) = harmonic();
    let theta = sindy_core::build_fixed_library(&lib, &Default::default()).unwrap().evaluate(&problem).unwrap();
    c.bench_function("stlsq/harmonic", |b| b.iter(|| black_box(stlsq(&theta, &problem.targets, 0.01, 20).unwrap())));
}

criterion_group!(benches, evaluate, fit_epochs, baseline);
criterion_main!(benches);
