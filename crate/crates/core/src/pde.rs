//! Reduced-scale wildfire model
//! `∂T/∂t = −V·∇T + κ∇²T + β exp(T/(1 + εT)) − αT`
//! on a uniform 2-D grid, finite-difference derivative features, and
//! flattening of space-time samples into regression rows.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::dataset::RegressionProblem;
use crate::error::{Result, SindyError};
use crate::library::{Axis, CandidateSpec, Family, LibraryInstance, Param, Term};

/// Scalar field on a uniform grid; `values[iy * nx + ix]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub values: Vec<f64>,
}

impl Field2D {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, values: Vec<f64>) -> Result<Self> {
        if !(dx > 0.0 && dy > 0.0) {
            return Err(SindyError::InvalidArgument(format!("grid spacing {dx} × {dy}")));
        }
        if values.len() != nx * ny {
            return Err(SindyError::ShapeMismatch(format!("{} values for {nx} × {ny}", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SindyError::InvalidArgument(format!("non-finite field value at {i}")));
        }
        Ok(Self { nx, ny, dx, dy, values })
    }

    /// Samples `f(x, y)` at `(ix·dx, iy·dy)`.
    pub fn from_fn(nx: usize, ny: usize, dx: f64, dy: f64, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                values.push(f(ix as f64 * dx, iy as f64 * dy));
            }
        }
        Self::new(nx, ny, dx, dy, values)
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    fn same_grid(&self, values: Vec<f64>) -> Self {
        Self { nx: self.nx, ny: self.ny, dx: self.dx, dy: self.dy, values }
    }
}

/// Finite-difference weights for derivative `order` at offset 0 from sample
/// offsets `offsets` (Fornberg's recursion).
fn fd_weights(offsets: &[f64], order: usize) -> Vec<f64> {
    let n = offsets.len();
    let mut c = vec![vec![0.0; order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = offsets[0];
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = offsets[i];
        for j in 0..i {
            let c3 = offsets[i] - offsets[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[order]).collect()
}

/// Interior half-width of the centered stencil for a derivative order.
pub fn stencil_half_width(order: u8) -> usize {
    (order as usize + 1) / 2
}

fn derivative_1d(line: &[f64], h: f64, order: u8, out: &mut [f64]) {
    let n = line.len();
    let k = order as usize;
    let w = stencil_half_width(order);
    let centered: Vec<f64> = fd_weights(&(0..=2 * w).map(|i| i as f64 - w as f64).collect::<Vec<_>>(), k);
    let width = k + 2;
    let scale = h.powi(order as i32);
    for i in 0..n {
        if i >= w && i + w < n {
            out[i] = (0..=2 * w).map(|s| centered[s] * line[i + s - w]).sum::<f64>() / scale;
        } else {
            let start = if i < w { 0 } else { n - width };
            let offsets: Vec<f64> = (start..start + width).map(|s| s as f64 - i as f64).collect();
            let wts = fd_weights(&offsets, k);
            out[i] = (0..width).map(|s| wts[s] * line[start + s]).sum::<f64>() / scale;
        }
    }
}

/// Derivative of order 1..=4 along one axis: centered second-order stencils
/// in the interior, one-sided `order + 2`-point stencils at the edges.
pub fn fd_derivative(field: &Field2D, axis: Axis, order: u8) -> Result<Field2D> {
    if !(1..=4).contains(&order) {
        return Err(SindyError::InvalidArgument(format!("derivative order {order} not in 1..=4")));
    }
    let (len, h) = match axis {
        Axis::X => (field.nx, field.dx),
        Axis::Y => (field.ny, field.dy),
    };
    if len < order as usize + 2 {
        return Err(SindyError::TooFewSamples { needed: order as usize + 2, got: len });
    }
    let (nx, ny) = (field.nx, field.ny);
    let mut out = vec![0.0; nx * ny];
    match axis {
        Axis::X => {
            for iy in 0..ny {
                let row = &field.values[iy * nx..(iy + 1) * nx];
                derivative_1d(row, h, order, &mut out[iy * nx..(iy + 1) * nx]);
            }
        }
        Axis::Y => {
            let mut line = vec![0.0; ny];
            let mut d = vec![0.0; ny];
            for ix in 0..nx {
                for iy in 0..ny {
                    line[iy] = field.values[iy * nx + ix];
                }
                derivative_1d(&line, h, order, &mut d);
                for iy in 0..ny {
                    out[iy * nx + ix] = d[iy];
                }
            }
        }
    }
    Ok(field.same_grid(out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WildfireParams {
    pub kappa: f64,
    pub beta: f64,
    /// Inverse activation energy.
    pub epsilon: f64,
    pub alpha: f64,
    pub wind_speed: f64,
    /// Direction the wind blows toward, radians from the +x axis.
    pub wind_angle: f64,
    pub front_center: (f64, f64),
    pub front_side: f64,
}

impl Default for WildfireParams {
    fn default() -> Self {
        Self {
            kappa: 1.1,
            beta: 1.0,
            epsilon: 0.3,
            alpha: 0.2,
            wind_speed: 10.0,
            wind_angle: std::f64::consts::FRAC_PI_4,
            front_center: (8.0, 8.0),
            front_side: 4.0,
        }
    }
}

impl WildfireParams {
    pub fn wind(&self) -> (f64, f64) {
        (self.wind_speed * self.wind_angle.cos(), self.wind_speed * self.wind_angle.sin())
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.kappa,
            self.beta,
            self.epsilon,
            self.alpha,
            self.wind_speed,
            self.wind_angle,
            self.front_center.0,
            self.front_center.1,
            self.front_side,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.kappa < 0.0 || !(self.epsilon > 0.0) || self.wind_speed < 0.0 {
            return Err(SindyError::InvalidArgument(
                "wildfire parameters need kappa ≥ 0, epsilon > 0, finite values".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { nx: 64, ny: 64, lx: 16.0, ly: 16.0 }
    }
}

impl GridSpec {
    pub fn dx(&self) -> f64 {
        self.lx / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / (self.ny - 1) as f64
    }

    /// Largest admissible step: `0.2·min(h²/κ, h/|V|)` over both axes.
    pub fn max_dt(&self, params: &WildfireParams) -> f64 {
        let h = self.dx().min(self.dy());
        let mut bound = f64::INFINITY;
        if params.kappa > 0.0 {
            bound = bound.min(h * h / params.kappa);
        }
        if params.wind_speed > 0.0 {
            bound = bound.min(h / params.wind_speed);
        }
        0.2 * bound
    }
}

/// Snapshots of a simulation with the model's discrete right-hand side at each.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    pub times: Vec<f64>,
    pub snapshots: Vec<Field2D>,
    /// `∂T/∂t` from the discrete operators, one per snapshot.
    pub rates: Vec<Field2D>,
    pub wind: (f64, f64),
}

impl FieldSeries {
    /// Replaces the stored rates with central differences in time (one-sided
    /// at the first and last snapshot).
    pub fn with_difference_rates(&self) -> Result<Self> {
        let k = self.snapshots.len();
        if k < 2 {
            return Err(SindyError::TooFewSamples { needed: 2, got: k });
        }
        let rates = (0..k)
            .map(|i| {
                let (a, b) = (i.saturating_sub(1), (i + 1).min(k - 1));
                let dt = self.times[b] - self.times[a];
                let (fa, fb) = (&self.snapshots[a], &self.snapshots[b]);
                fa.same_grid(fa.values.iter().zip(&fb.values).map(|(x, y)| (y - x) / dt).collect())
            })
            .collect();
        Ok(Self { rates, ..self.clone() })
    }

    /// `x,y,t,T` rows, time-major, then y, then x.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,t,T\n");
        for (t, f) in self.times.iter().zip(&self.snapshots) {
            for iy in 0..f.ny {
                for ix in 0..f.nx {
                    let _ = writeln!(
                        out,
                        "{:e},{:e},{:e},{:e}",
                        ix as f64 * f.dx,
                        iy as f64 * f.dy,
                        t,
                        f.at(ix, iy)
                    );
                }
            }
        }
        out
    }
}

/// Right-hand side with first-order upwind advection, central diffusion and
/// zero-gradient ghost cells on every edge.
fn wildfire_rhs(t: &[f64], nx: usize, ny: usize, dx: f64, dy: f64, p: &WildfireParams, out: &mut [f64]) {
    let (vx, vy) = p.wind();
    let at = |ix: isize, iy: isize| {
        let ix = ix.clamp(0, nx as isize - 1) as usize;
        let iy = iy.clamp(0, ny as isize - 1) as usize;
        t[iy * nx + ix]
    };
    for iy in 0..ny as isize {
        for ix in 0..nx as isize {
            let c = at(ix, iy);
            let (w, e, s, n) = (at(ix - 1, iy), at(ix + 1, iy), at(ix, iy - 1), at(ix, iy + 1));
            let tx = if vx >= 0.0 { (c - w) / dx } else { (e - c) / dx };
            let ty = if vy >= 0.0 { (c - s) / dy } else { (n - c) / dy };
            let lap = (e - 2.0 * c + w) / (dx * dx) + (n - 2.0 * c + s) / (dy * dy);
            let reaction = p.beta * (c / (1.0 + p.epsilon * c)).exp() - p.alpha * c;
            out[iy as usize * nx + ix as usize] = -vx * tx - vy * ty + p.kappa * lap + reaction;
        }
    }
}

/// Integrates the wildfire model from a unit square front with RK4, storing a
/// snapshot every `snapshot_every` steps (and the initial state). The step
/// count is `round(t_end / dt)`.
pub fn simulate_wildfire(
    params: &WildfireParams,
    grid: &GridSpec,
    dt: f64,
    t_end: f64,
    snapshot_every: usize,
) -> Result<FieldSeries> {
    params.validate()?;
    if grid.nx < 6 || grid.ny < 6 || !(grid.lx > 0.0 && grid.ly > 0.0) {
        return Err(SindyError::InvalidArgument("grid needs ≥ 6 points and positive extent".into()));
    }
    if !(dt > 0.0) || !(t_end > 0.0) || snapshot_every == 0 {
        return Err(SindyError::InvalidArgument("need dt > 0, t_end > 0, snapshot_every ≥ 1".into()));
    }
    let limit = grid.max_dt(params);
    if dt > limit {
        return Err(SindyError::InvalidArgument(format!(
            "dt = {dt} exceeds the stability bound {limit}"
        )));
    }
    let (nx, ny, dx, dy) = (grid.nx, grid.ny, grid.dx(), grid.dy());
    let (cx, cy) = params.front_center;
    let half = params.front_side / 2.0;
    let init = Field2D::from_fn(nx, ny, dx, dy, |x, y| {
        if (x - cx).abs() <= half && (y - cy).abs() <= half {
            1.0
        } else {
            0.0
        }
    })?;
    let steps = (t_end / dt).round() as usize;
    let len = nx * ny;
    let mut state = init.values;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    let mut tmp = vec![0.0; len];
    let rhs = |s: &[f64], out: &mut [f64]| wildfire_rhs(s, nx, ny, dx, dy, params, out);

    let mut series = FieldSeries { times: vec![], snapshots: vec![], rates: vec![], wind: params.wind() };
    let push = |state: &[f64], step: usize, series: &mut FieldSeries| {
        let mut rate = vec![0.0; len];
        rhs(state, &mut rate);
        series.times.push(step as f64 * dt);
        series.snapshots.push(Field2D { nx, ny, dx, dy, values: state.to_vec() });
        series.rates.push(Field2D { nx, ny, dx, dy, values: rate });
    };
    push(&state, 0, &mut series);
    for step in 1..=steps {
        rhs(&state, &mut k1);
        for i in 0..len {
            tmp[i] = state[i] + 0.5 * dt * k1[i];
        }
        rhs(&tmp, &mut k2);
        for i in 0..len {
            tmp[i] = state[i] + 0.5 * dt * k2[i];
        }
        rhs(&tmp, &mut k3);
        for i in 0..len {
            tmp[i] = state[i] + dt * k3[i];
        }
        rhs(&tmp, &mut k4);
        for i in 0..len {
            state[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(SindyError::NonFiniteState { step });
        }
        if step % snapshot_every == 0 {
            push(&state, step, &mut series);
        }
    }
    Ok(series)
}

/// Names of the derivative features, `T_x, T_y, T_xx, …` up to `max_order`.
pub fn feature_names(max_order: u8) -> Vec<(u8, Axis, String)> {
    let mut out = Vec::new();
    for order in 1..=max_order {
        for axis in [Axis::X, Axis::Y] {
            out.push((order, axis, format!("T_{}", axis.label().repeat(order as usize))));
        }
    }
    out
}

/// One regression row per interior grid point per snapshot (time-major, then
/// y, then x), dropping points within the widest centered stencil of the edge.
/// Inputs are `[T, T_x, T_y, T_xx, T_yy, …]`; the target is `∂T/∂t`.
pub fn flatten_for_regression(series: &FieldSeries, max_order: u8) -> Result<RegressionProblem> {
    if !(1..=4).contains(&max_order) {
        return Err(SindyError::InvalidArgument(format!("max order {max_order} not in 1..=4")));
    }
    let first = series
        .snapshots
        .first()
        .ok_or(SindyError::TooFewSamples { needed: 1, got: 0 })?;
    let (nx, ny) = (first.nx, first.ny);
    let w = stencil_half_width(max_order);
    if nx <= 2 * w || ny <= 2 * w {
        return Err(SindyError::TooFewSamples { needed: 2 * w + 1, got: nx.min(ny) });
    }
    let features = feature_names(max_order);
    let per = (nx - 2 * w) * (ny - 2 * w);
    let rows = per * series.snapshots.len();
    let k = 1 + features.len();
    let mut inputs = DMatrix::zeros(rows, k);
    let mut targets = DMatrix::zeros(rows, 1);
    let mut times = Vec::with_capacity(rows);
    let mut r0 = 0;
    for ((t, snap), rate) in series.times.iter().zip(&series.snapshots).zip(&series.rates) {
        let derived: Vec<Field2D> = features
            .iter()
            .map(|(order, axis, _)| fd_derivative(snap, *axis, *order))
            .collect::<Result<_>>()?;
        let mut r = r0;
        for iy in w..ny - w {
            for ix in w..nx - w {
                inputs[(r, 0)] = snap.at(ix, iy);
                for (f, d) in derived.iter().enumerate() {
                    inputs[(r, 1 + f)] = d.at(ix, iy);
                }
                targets[(r, 0)] = rate.at(ix, iy);
                times.push(*t);
                r += 1;
            }
        }
        r0 = r;
    }
    let mut input_names = vec!["T".to_string()];
    input_names.extend(features.into_iter().map(|(_, _, n)| n));
    Ok(RegressionProblem { inputs, times, targets, input_names, target_names: vec!["T".into()] })
}

/// Model written in the regression's own columns. First-order upwinding
/// equals the central first difference minus `(h/2)` times the central second
/// difference, so each second-derivative coefficient carries the numerical
/// diffusion `|V_i| h_i / 2` on top of κ.
pub fn wildfire_truth(params: &WildfireParams, grid: &GridSpec) -> Vec<Term> {
    let (vx, vy) = params.wind();
    let deriv = |input, order, axis| Family::SpatialDeriv { input, order, axis };
    let mut terms = vec![
        Term::new(Family::Poly { input: 0 }, 1.0, -params.alpha),
        Term::new(deriv(1, 1, Axis::X), 0.0, -vx),
        Term::new(deriv(2, 1, Axis::Y), 0.0, -vy),
        Term::new(deriv(3, 2, Axis::X), 0.0, params.kappa + vx.abs() * grid.dx() / 2.0),
        Term::new(deriv(4, 2, Axis::Y), 0.0, params.kappa + vy.abs() * grid.dy() / 2.0),
        Term::new(Family::RationalExp { input: 0 }, params.epsilon, params.beta),
    ];
    terms.retain(|t| t.coef != 0.0);
    terms
}

/// `[1, T, T_x, T_y, …, exp(T/(1 + H T))]` over the inputs of [`flatten_for_regression`].
pub fn wildfire_library(max_order: u8) -> Result<LibraryInstance> {
    let features = feature_names(max_order);
    let mut specs = vec![
        CandidateSpec::constant(),
        CandidateSpec::new(Family::Poly { input: 0 }, Param::Fixed(1.0)),
    ];
    for (i, (order, axis, _)) in features.iter().enumerate() {
        specs.push(CandidateSpec::new(
            Family::SpatialDeriv { input: 1 + i, order: *order, axis: *axis },
            Param::None,
        ));
    }
    specs.push(CandidateSpec::new(Family::RationalExp { input: 0 }, Param::Trainable(0)));
    let mut names = vec!["T".to_string()];
    names.extend(features.into_iter().map(|(_, _, n)| n));
    LibraryInstance::new(specs, 1, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn weights_match_textbook_stencils() {
        let w = fd_weights(&[-1.0, 0.0, 1.0], 2);
        assert_eq!(w, vec![1.0, -2.0, 1.0]);
        let w = fd_weights(&[-2.0, -1.0, 0.0, 1.0, 2.0], 4);
        for (a, b) in w.iter().zip([1.0, -4.0, 6.0, -4.0, 1.0]) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        let w = fd_weights(&[-2.0, -1.0, 0.0, 1.0, 2.0], 3);
        for (a, b) in w.iter().zip([-0.5, 1.0, 0.0, -1.0, 0.5]) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn quadratic_second_derivative() {
        let f = Field2D::from_fn(12, 5, 0.1, 0.2, |x, _| x * x).unwrap();
        let d = fd_derivative(&f, Axis::X, 2).unwrap();
        for iy in 0..5 {
            for ix in 0..12 {
                assert_relative_eq!(d.at(ix, iy), 2.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn constant_field_has_no_derivatives() {
        let f = Field2D::from_fn(9, 9, 0.5, 0.5, |_, _| 3.0).unwrap();
        for order in 1..=4 {
            for axis in [Axis::X, Axis::Y] {
                let d = fd_derivative(&f, axis, order).unwrap();
                assert!(d.values.iter().all(|v| v.abs() < 1e-9), "order {order}");
            }
        }
    }

    #[test]
    fn bad_orders_and_short_grids() {
        let f = Field2D::from_fn(4, 4, 1.0, 1.0, |x, _| x).unwrap();
        assert!(fd_derivative(&f, Axis::X, 5).is_err());
        assert!(fd_derivative(&f, Axis::X, 3).is_err());
    }

    #[test]
    fn sine_fourth_derivative_is_second_order() {
        let k = 1.3;
        let err = |n: usize| {
            let h = 6.0 / (n - 1) as f64;
            let f = Field2D::from_fn(n, 6, h, 1.0, |x, _| (k * x).sin()).unwrap();
            let d = fd_derivative(&f, Axis::X, 4).unwrap();
            (2..n - 2)
                .map(|i| (d.at(i, 3) - k.powi(4) * (k * i as f64 * h).sin()).abs())
                .fold(0.0, f64::max)
        };
        let (coarse, fine) = (err(41), err(81));
        assert!(coarse < 0.02, "{coarse}");
        let ratio = coarse / fine;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn monomials_are_exact_in_the_interior() {
        for order in 1..=4u8 {
            let f = Field2D::from_fn(7, 12, 1.0, 0.3, |_, y| y.powi(order as i32)).unwrap();
            let d = fd_derivative(&f, Axis::Y, order).unwrap();
            let want: f64 = (1..=order as u32).map(f64::from).product();
            for iy in 0..12 {
                assert!((d.at(2, iy) - want).abs() < 1e-6 * want, "order {order} at {iy}");
            }
        }
    }

    #[test]
    fn pure_cooling_decays_exponentially() {
        let p = WildfireParams { kappa: 0.0, wind_speed: 0.0, beta: 0.0, alpha: 0.7, ..Default::default() };
        let grid = GridSpec { nx: 16, ny: 16, lx: 16.0, ly: 16.0 };
        let s = simulate_wildfire(&p, &grid, 0.01, 1.0, 100).unwrap();
        let last = s.snapshots.last().unwrap();
        let first = &s.snapshots[0];
        let decay = (-0.7f64).exp();
        for (a, b) in first.values.iter().zip(&last.values) {
            assert!((b - a * decay).abs() < 1e-6);
        }
    }

    #[test]
    fn diffusion_conserves_heat() {
        let p = WildfireParams { wind_speed: 0.0, beta: 0.0, alpha: 0.0, ..Default::default() };
        let grid = GridSpec { nx: 32, ny: 32, lx: 16.0, ly: 16.0 };
        let dt = grid.max_dt(&p);
        let s = simulate_wildfire(&p, &grid, dt, 20.0 * dt, 1).unwrap();
        let heat = |f: &Field2D| f.values.iter().sum::<f64>() * f.dx * f.dy;
        for w in s.snapshots.windows(2) {
            assert!((heat(&w[1]) - heat(&w[0])).abs() < 1e-8);
        }
    }

    fn centroid(f: &Field2D) -> (f64, f64) {
        let floor = f.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for iy in 0..f.ny {
            for ix in 0..f.nx {
                let w = f.at(ix, iy) - floor;
                sx += w * ix as f64 * f.dx;
                sy += w * iy as f64 * f.dy;
                sw += w;
            }
        }
        (sx / sw, sy / sw)
    }

    #[test]
    fn front_moves_with_the_wind() {
        let p = WildfireParams::default();
        let grid = GridSpec::default();
        let dt = grid.max_dt(&p);
        let s = simulate_wildfire(&p, &grid, dt, 0.08, 4).unwrap();
        let (x0, y0) = centroid(&s.snapshots[0]);
        let (x1, y1) = centroid(s.snapshots.last().unwrap());
        assert!(x1 - x0 > 0.1 && y1 - y0 > 0.1, "moved ({}, {})", x1 - x0, y1 - y0);
        let again = simulate_wildfire(&p, &grid, dt, 0.08, 4).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn truth_reproduces_discrete_rates() {
        let p = WildfireParams::default();
        let grid = GridSpec { nx: 24, ny: 24, lx: 16.0, ly: 16.0 };
        let dt = grid.max_dt(&p);
        let s = simulate_wildfire(&p, &grid, dt, 4.0 * dt, 2).unwrap();
        let prob = flatten_for_regression(&s, 4).unwrap();
        let mut lib = wildfire_library(4).unwrap();
        lib.lambda[(0, 0)] = p.epsilon;
        let theta = lib.evaluate(0, &prob.inputs, &prob.times).unwrap();
        let truth = wildfire_truth(&p, &grid);
        let mut xi = nalgebra::DVector::zeros(lib.n_columns());
        for t in &truth {
            let c = lib.specs.iter().position(|s| s.family == t.spec.family).unwrap();
            xi[c] = t.coef;
        }
        let resid = &theta * xi - prob.targets.column(0);
        assert!(resid.amax() < 1e-9 * prob.targets.amax(), "{}", resid.amax());
    }

    #[test]
    fn difference_rates_track_discrete_rates() {
        let p = WildfireParams { wind_speed: 0.0, ..Default::default() };
        let grid = GridSpec { nx: 16, ny: 16, lx: 16.0, ly: 16.0 };
        let dt = grid.max_dt(&p) / 4.0;
        let s = simulate_wildfire(&p, &grid, dt, 40.0 * dt, 1).unwrap();
        let fd = s.with_difference_rates().unwrap();
        let mid = 20;
        let err = fd.rates[mid].values.iter().zip(&s.rates[mid].values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-2 * s.rates[mid].values.iter().fold(0.0f64, |m, v| m.max(v.abs())), "{err}");
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let grid = GridSpec::default();
        let p = WildfireParams::default();
        let dt = grid.max_dt(&p) * 1.01;
        assert!(simulate_wildfire(&p, &grid, dt, 0.08, 1).is_err());
    }

    #[test]
    fn row_count_and_constant_snapshot() {
        let f = Field2D::from_fn(10, 8, 1.0, 1.0, |_, _| 2.0).unwrap();
        let series = FieldSeries {
            times: vec![0.0],
            snapshots: vec![f.clone()],
            rates: vec![f],
            wind: (0.0, 0.0),
        };
        let prob = flatten_for_regression(&series, 4).unwrap();
        assert_eq!(prob.len(), (10 - 4) * (8 - 4));
        let lib = wildfire_library(4).unwrap();
        let theta = lib.evaluate(0, &prob.inputs, &prob.times).unwrap();
        assert!(theta.column(0).iter().all(|v| *v == 1.0));
        for c in 2..10 {
            assert!(theta.column(c).iter().all(|v| v.abs() < 1e-9));
        }
    }
}
