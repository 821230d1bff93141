//! Parameterized candidate library `Θ(X; Λ)`.
//!
//! Every column is one [`CandidateSpec`]: a function family applied to one or
//! two input columns, optionally carrying a nonlinear parameter (frequency,
//! exponent, rate). Trainable parameters live in a per-equation row of `Λ`, so
//! each target equation sees its own copy of the library.
//!
//! Master library column order for `m` inputs:
//!
//! 1. constant
//! 2. `x_i^A` for each input
//! 3. `sin(B x_i)`, then `cos(C x_i)`, then `exp(D x_i)`, each per input
//! 4. `x_i sin(E x_k)`, `x_i cos(F x_k)`, `x_i exp(G x_k)`, each over ordered
//!    pairs `(i, k)` with `i` outer, self-pairs included
//! 5. optional `x_i^A x_k` over ordered pairs (trainable power products)
//! 6. optional `x_i t^-H` per input
//! 7. optional `exp(x_i / (1 + H x_i))` per input

use std::fmt::{self, Write as _};

use nalgebra::DMatrix;

use crate::error::{Result, SindyError};

/// Magnitudes below this are treated as exact zeros by the signed power.
pub const POWER_ZERO: f64 = 1e-12;

/// Odd extension of the real power: `sign(x)·|x|^a`, and 0 for `|x| < 1e-12`.
pub fn signed_pow(x: f64, a: f64) -> f64 {
    if x.abs() < POWER_ZERO {
        0.0
    } else {
        x.signum() * x.abs().powf(a)
    }
}

/// Spatial direction of a derivative feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
        }
    }
}

/// Function family of one library column, with the input columns it reads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Constant,
    /// `sign(x)·|x|^A`
    Poly { input: usize },
    Sin { input: usize },
    Cos { input: usize },
    Exp { input: usize },
    /// `x_factor · sin(E x_arg)`
    PolySin { factor: usize, arg: usize },
    PolyCos { factor: usize, arg: usize },
    PolyExp { factor: usize, arg: usize },
    /// `sign(x_base)|x_base|^A · x_factor`
    PowerProduct { base: usize, factor: usize },
    /// `x_input · t^(-H)`; the parameter is the decay exponent of `t`.
    TimePower { input: usize },
    /// `exp(x / (1 + H x))`
    RationalExp { input: usize },
    /// Precomputed spatial-derivative feature stored in input column `input`.
    SpatialDeriv { input: usize, order: u8, axis: Axis },
}

impl Family {
    /// Whether the family has a nonlinear parameter slot.
    pub fn has_param(&self) -> bool {
        !matches!(self, Family::Constant | Family::SpatialDeriv { .. })
    }

    /// Input columns read by this family (primary first).
    pub fn inputs(&self) -> (Option<usize>, Option<usize>) {
        use Family::*;
        match *self {
            Constant => (None, None),
            Poly { input }
            | Sin { input }
            | Cos { input }
            | Exp { input }
            | TimePower { input }
            | RationalExp { input }
            | SpatialDeriv { input, .. } => (Some(input), None),
            PolySin { factor, arg } | PolyCos { factor, arg } | PolyExp { factor, arg } => {
                (Some(factor), Some(arg))
            }
            PowerProduct { base, factor } => (Some(base), Some(factor)),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        use Family::*;
        match self {
            Constant => "constant",
            Poly { .. } => "poly",
            Sin { .. } => "sin",
            Cos { .. } => "cos",
            Exp { .. } => "exp",
            PolySin { .. } => "poly_sin",
            PolyCos { .. } => "poly_cos",
            PolyExp { .. } => "poly_exp",
            PowerProduct { .. } => "power_product",
            TimePower { .. } => "time_power",
            RationalExp { .. } => "rational_exp",
            SpatialDeriv { .. } => "spatial_deriv",
        }
    }
}

/// How a column obtains its nonlinear parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Param {
    None,
    Fixed(f64),
    /// Index into the equation's row of `Λ`.
    Trainable(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateSpec {
    pub family: Family,
    pub param: Param,
}

impl CandidateSpec {
    pub fn new(family: Family, param: Param) -> Self {
        Self { family, param }
    }

    pub fn constant() -> Self {
        Self::new(Family::Constant, Param::None)
    }

    pub fn slot(&self) -> Option<usize> {
        match self.param {
            Param::Trainable(s) => Some(s),
            _ => None,
        }
    }

    /// Human-readable term, e.g. `y·cos(0.750000·x)`.
    pub fn label(&self, theta: f64, names: &[String]) -> String {
        use Family::*;
        let n = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("x{i}"));
        let p = format!("{theta:.6}");
        match self.family {
            Constant => "1".into(),
            Poly { input } if theta == 1.0 => n(input),
            Poly { input } => format!("{}^{p}", n(input)),
            Sin { input } => format!("sin({p}·{})", n(input)),
            Cos { input } => format!("cos({p}·{})", n(input)),
            Exp { input } => format!("exp({p}·{})", n(input)),
            PolySin { factor, arg } => format!("{}·sin({p}·{})", n(factor), n(arg)),
            PolyCos { factor, arg } => format!("{}·cos({p}·{})", n(factor), n(arg)),
            PolyExp { factor, arg } => format!("{}·exp({p}·{})", n(factor), n(arg)),
            PowerProduct { base, factor } => format!("{}^{p}·{}", n(base), n(factor)),
            TimePower { input } => format!("{}·t^({:.6})", n(input), -theta),
            RationalExp { input } => {
                let v = n(input);
                format!("exp({v}/(1 + {p}·{v}))")
            }
            SpatialDeriv { input, .. } => n(input),
        }
    }
}

/// Value of one library entry together with its partial derivatives.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Partials {
    pub value: f64,
    /// With respect to the nonlinear parameter.
    pub d_param: f64,
    /// With respect to the primary and secondary inputs.
    pub d_input: [f64; 2],
    /// Mixed second partials `∂²/∂input ∂param`.
    pub d_input_param: [f64; 2],
}

fn power_parts(a: f64, s: f64) -> (f64, f64, f64, f64) {
    // returns (value, d/ds, d/da, d²/da ds)
    if s == 1.0 {
        if a.abs() < POWER_ZERO {
            return (a, 0.0, 1.0, 0.0);
        }
        let l = a.abs().ln();
        return (a, a * l, 1.0, 1.0 + l);
    }
    if a.abs() < POWER_ZERO {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let l = a.abs().ln();
    let v = a.signum() * a.abs().powf(s);
    // |a|^(s-1) == v / a
    let base = v / a;
    (v, v * l, s * base, base * (1.0 + s * l))
}

/// Evaluates one library entry at a point.
///
/// `a`/`b` are the primary and secondary input values, `s` the parameter and
/// `t` the sample time.
pub fn point_partials(family: &Family, s: f64, a: f64, b: f64, t: f64) -> Partials {
    use Family::*;
    match *family {
        Constant => Partials { value: 1.0, ..Default::default() },
        SpatialDeriv { .. } => Partials { value: a, d_input: [1.0, 0.0], ..Default::default() },
        Poly { .. } => {
            let (v, dp, da, dadp) = power_parts(a, s);
            Partials { value: v, d_param: dp, d_input: [da, 0.0], d_input_param: [dadp, 0.0] }
        }
        Sin { .. } => {
            let (sn, cs) = (s * a).sin_cos();
            Partials {
                value: sn,
                d_param: a * cs,
                d_input: [s * cs, 0.0],
                d_input_param: [cs - s * a * sn, 0.0],
            }
        }
        Cos { .. } => {
            let (sn, cs) = (s * a).sin_cos();
            Partials {
                value: cs,
                d_param: -a * sn,
                d_input: [-s * sn, 0.0],
                d_input_param: [-sn - s * a * cs, 0.0],
            }
        }
        Exp { .. } => {
            let e = (s * a).exp();
            Partials {
                value: e,
                d_param: a * e,
                d_input: [s * e, 0.0],
                d_input_param: [e * (1.0 + s * a), 0.0],
            }
        }
        PolySin { .. } => {
            let (sn, cs) = (s * b).sin_cos();
            Partials {
                value: a * sn,
                d_param: a * b * cs,
                d_input: [sn, a * s * cs],
                d_input_param: [b * cs, a * (cs - s * b * sn)],
            }
        }
        PolyCos { .. } => {
            let (sn, cs) = (s * b).sin_cos();
            Partials {
                value: a * cs,
                d_param: -a * b * sn,
                d_input: [cs, -a * s * sn],
                d_input_param: [-b * sn, -a * (sn + s * b * cs)],
            }
        }
        PolyExp { .. } => {
            let e = (s * b).exp();
            Partials {
                value: a * e,
                d_param: a * b * e,
                d_input: [e, a * s * e],
                d_input_param: [b * e, a * e * (1.0 + s * b)],
            }
        }
        PowerProduct { .. } => {
            let (v, dp, da, dadp) = power_parts(a, s);
            Partials {
                value: v * b,
                d_param: dp * b,
                d_input: [da * b, v],
                d_input_param: [dadp * b, dp],
            }
        }
        TimePower { .. } => {
            let lt = t.ln();
            let q = (-s * lt).exp();
            Partials {
                value: a * q,
                d_param: -a * q * lt,
                d_input: [q, 0.0],
                d_input_param: [-q * lt, 0.0],
            }
        }
        RationalExp { .. } => {
            let den = 1.0 + s * a;
            let e = (a / den).exp();
            let inv2 = 1.0 / (den * den);
            Partials {
                value: e,
                d_param: -a * a * inv2 * e,
                d_input: [e * inv2, 0.0],
                d_input_param: [-e * a * inv2 / den * (a / den + 2.0), 0.0],
            }
        }
    }
}

/// The candidate library for `m` target equations, with `Λ` stored row-wise per equation.
#[derive(Debug, Clone, PartialEq)]
pub struct LibraryInstance {
    pub specs: Vec<CandidateSpec>,
    /// `m × p̂`
    pub lambda: DMatrix<f64>,
    /// Names of the input columns the specs index into.
    pub input_names: Vec<String>,
}

/// Feature toggles for [`master_library`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MasterOptions {
    /// Add `x_i · t^-H` columns.
    pub time_power: bool,
    /// Add `exp(x_i/(1 + H x_i))` columns.
    pub rational_exp: bool,
    /// Make the exponent of every `x_i^A` column trainable instead of fixed at 1.
    pub trainable_poly: bool,
    /// Add `x_i^A · x_k` columns with trainable exponent, one per pair `i < k`.
    /// The reversed pair would coincide with this one at `A = 1`.
    pub power_products: bool,
}

impl LibraryInstance {
    /// Builds an instance for `n_targets` equations with every trainable parameter set to 1.
    pub fn new(specs: Vec<CandidateSpec>, n_targets: usize, input_names: Vec<String>) -> Result<Self> {
        let n_slots = specs.iter().filter(|s| s.slot().is_some()).count();
        let lib = Self {
            specs,
            lambda: DMatrix::from_element(n_targets, n_slots, 1.0),
            input_names,
        };
        lib.validate()?;
        Ok(lib)
    }

    pub fn n_columns(&self) -> usize {
        self.specs.len()
    }

    pub fn n_slots(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn n_equations(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.input_names.len();
        let mut seen = vec![false; self.n_slots()];
        for (j, spec) in self.specs.iter().enumerate() {
            let (a, b) = spec.family.inputs();
            if a.into_iter().chain(b).any(|i| i >= k) {
                return Err(SindyError::InvalidArgument(format!(
                    "column {j} reads an input beyond the {k} available"
                )));
            }
            if let Family::SpatialDeriv { order, .. } = spec.family {
                if !(1..=4).contains(&order) {
                    return Err(SindyError::InvalidArgument(format!(
                        "column {j}: derivative order {order} not in 1..=4"
                    )));
                }
            }
            match (spec.family.has_param(), spec.param) {
                (false, Param::None) | (true, Param::Fixed(_)) => {}
                (true, Param::Trainable(s)) => {
                    if s >= seen.len() || seen[s] {
                        return Err(SindyError::InvalidArgument(format!(
                            "column {j}: slot {s} missing or shared"
                        )));
                    }
                    seen[s] = true;
                }
                _ => {
                    return Err(SindyError::InvalidArgument(format!(
                        "column {j}: parameter does not match family {}",
                        spec.family.kind_name()
                    )))
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(SindyError::InvalidArgument("unreferenced parameter slot".into()));
        }
        if self.lambda.iter().any(|v| !v.is_finite()) {
            return Err(SindyError::InvalidArgument("non-finite nonlinear parameter".into()));
        }
        Ok(())
    }

    /// Parameter value column `j` uses in equation `eq`.
    pub fn param_value(&self, eq: usize, j: usize) -> f64 {
        match self.specs[j].param {
            Param::None => 0.0,
            Param::Fixed(v) => v,
            Param::Trainable(s) => self.lambda[(eq, s)],
        }
    }

    /// Column that each slot belongs to.
    pub fn slot_columns(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_slots()];
        for (j, spec) in self.specs.iter().enumerate() {
            if let Some(s) = spec.slot() {
                out[s] = j;
            }
        }
        out
    }

    fn check_inputs(&self, eq: usize, inputs: &DMatrix<f64>, times: &[f64]) -> Result<()> {
        if eq >= self.n_equations() {
            return Err(SindyError::InvalidArgument(format!("equation {eq} out of range")));
        }
        if inputs.ncols() != self.input_names.len() || inputs.nrows() != times.len() {
            return Err(SindyError::ShapeMismatch(format!(
                "inputs {:?} vs {} names and {} times",
                inputs.shape(),
                self.input_names.len(),
                times.len()
            )));
        }
        Ok(())
    }

    /// Evaluates column `j` with parameter `s` at every row, writing values and
    /// parameter partials (when requested).
    pub(crate) fn column_into(
        &self,
        j: usize,
        s: f64,
        inputs: &DMatrix<f64>,
        times: &[f64],
        values: &mut [f64],
        mut d_param: Option<&mut [f64]>,
    ) -> Result<()> {
        let spec = &self.specs[j];
        let n = inputs.nrows();
        let data = inputs.as_slice();
        let (ia, ib) = spec.family.inputs();
        let col_a = ia.map(|i| &data[i * n..(i + 1) * n]);
        let col_b = ib.map(|i| &data[i * n..(i + 1) * n]);
        if matches!(spec.family, Family::TimePower { .. }) {
            if let Some(row) = times.iter().position(|t| !(*t > 0.0)) {
                return Err(SindyError::Domain { column: j, row, reason: "t^H needs t > 0" });
            }
        }
        for r in 0..n {
            let a = col_a.map_or(0.0, |c| c[r]);
            let b = col_b.map_or(0.0, |c| c[r]);
            let p = point_partials(&spec.family, s, a, b, times[r]);
            if !p.value.is_finite() || !p.d_param.is_finite() {
                return Err(SindyError::NonFiniteColumn { column: j, row: r });
            }
            values[r] = p.value;
            if let Some(d) = d_param.as_deref_mut() {
                d[r] = p.d_param;
            }
        }
        Ok(())
    }

    /// `Θ` for equation `eq`, `n × p`.
    pub fn evaluate(&self, eq: usize, inputs: &DMatrix<f64>, times: &[f64]) -> Result<DMatrix<f64>> {
        self.check_inputs(eq, inputs, times)?;
        let n = inputs.nrows();
        let mut theta = DMatrix::zeros(n, self.n_columns());
        for j in 0..self.n_columns() {
            let col = &mut theta.as_mut_slice()[j * n..(j + 1) * n];
            self.column_into(j, self.param_value(eq, j), inputs, times, col, None)?;
        }
        Ok(theta)
    }

    /// `∂Θ/∂Λ` for equation `eq`: column `s` holds the derivative of the column
    /// owning slot `s` with respect to that slot, `n × p̂`.
    pub fn d_theta_d_lambda(
        &self,
        eq: usize,
        inputs: &DMatrix<f64>,
        times: &[f64],
    ) -> Result<DMatrix<f64>> {
        self.check_inputs(eq, inputs, times)?;
        let n = inputs.nrows();
        let mut out = DMatrix::zeros(n, self.n_slots());
        let mut scratch = vec![0.0; n];
        for (s, j) in self.slot_columns().into_iter().enumerate() {
            let col = &mut out.as_mut_slice()[s * n..(s + 1) * n];
            self.column_into(j, self.param_value(eq, j), inputs, times, &mut scratch, Some(col))?;
        }
        Ok(out)
    }

    /// Per-point partials of column `j` with respect to input `k` and the
    /// mixed partial with the column's parameter.
    pub(crate) fn input_partials(
        &self,
        j: usize,
        s: f64,
        k: usize,
        a: f64,
        b: f64,
        t: f64,
    ) -> (f64, f64, f64) {
        let spec = &self.specs[j];
        let p = point_partials(&spec.family, s, a, b, t);
        let (ia, ib) = spec.family.inputs();
        let mut dx = 0.0;
        let mut dxdp = 0.0;
        if ia == Some(k) {
            dx += p.d_input[0];
            dxdp += p.d_input_param[0];
        }
        if ib == Some(k) {
            dx += p.d_input[1];
            dxdp += p.d_input_param[1];
        }
        (p.value, dx, dxdp)
    }

    /// `∂Θ/∂x_k` for every input `k`: one `n × p` matrix per input.
    pub fn d_theta_d_x(
        &self,
        eq: usize,
        inputs: &DMatrix<f64>,
        times: &[f64],
    ) -> Result<Vec<DMatrix<f64>>> {
        self.check_inputs(eq, inputs, times)?;
        if let Some(j) = self
            .specs
            .iter()
            .position(|s| matches!(s.family, Family::SpatialDeriv { .. }))
        {
            return Err(SindyError::Unsupported(format!(
                "column {j} is a spatial-derivative feature; input partials are undefined"
            )));
        }
        let (n, k_inputs) = inputs.shape();
        let mut out = vec![DMatrix::zeros(n, self.n_columns()); k_inputs];
        for j in 0..self.n_columns() {
            let (ia, ib) = self.specs[j].family.inputs();
            for r in 0..n {
                let a = ia.map_or(0.0, |i| inputs[(r, i)]);
                let b = ib.map_or(0.0, |i| inputs[(r, i)]);
                for (k, m) in out.iter_mut().enumerate() {
                    if ia != Some(k) && ib != Some(k) {
                        continue;
                    }
                    let (_, dx, _) = self.input_partials(j, self.param_value(eq, j), k, a, b, times[r]);
                    if !dx.is_finite() {
                        return Err(SindyError::NonFiniteColumn { column: j, row: r });
                    }
                    m[(r, j)] = dx;
                }
            }
        }
        Ok(out)
    }

    /// One record per column: index, family, inputs, slot and the parameter
    /// value for every equation.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (j, spec) in self.specs.iter().enumerate() {
            let (a, b) = spec.family.inputs();
            let inputs: Vec<&str> = a
                .into_iter()
                .chain(b)
                .map(|i| self.input_names[i].as_str())
                .collect();
            let _ = write!(
                out,
                "column={j} family={} inputs={}",
                spec.family.kind_name(),
                if inputs.is_empty() { "-".to_string() } else { inputs.join("+") }
            );
            if let Family::SpatialDeriv { order, axis, .. } = spec.family {
                let _ = write!(out, " order={order} axis={}", axis.label());
            }
            match spec.param {
                Param::None => out.push_str(" slot=- value=-"),
                Param::Fixed(v) => {
                    let _ = write!(out, " slot=fixed value={v:.17e}");
                }
                Param::Trainable(s) => {
                    let vals: Vec<String> =
                        (0..self.n_equations()).map(|e| format!("{:.17e}", self.lambda[(e, s)])).collect();
                    let _ = write!(out, " slot={s} value={}", vals.join(";"));
                }
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for LibraryInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

/// Column list of the master library; see the module docs for the ordering.
pub fn master_specs(m: usize, opts: &MasterOptions) -> Result<Vec<CandidateSpec>> {
    if m == 0 {
        return Err(SindyError::InvalidArgument("library needs at least one state".into()));
    }
    let mut specs = vec![CandidateSpec::constant()];
    let mut slot = 0usize;
    let mut trainable = |family: Family, specs: &mut Vec<CandidateSpec>| {
        specs.push(CandidateSpec::new(family, Param::Trainable(slot)));
        slot += 1;
    };
    for input in 0..m {
        if opts.trainable_poly {
            trainable(Family::Poly { input }, &mut specs);
        } else {
            specs.push(CandidateSpec::new(Family::Poly { input }, Param::Fixed(1.0)));
        }
    }
    for make in [
        (|input| Family::Sin { input }) as fn(usize) -> Family,
        |input| Family::Cos { input },
        |input| Family::Exp { input },
    ] {
        for input in 0..m {
            trainable(make(input), &mut specs);
        }
    }
    for make in [
        (|factor, arg| Family::PolySin { factor, arg }) as fn(usize, usize) -> Family,
        |factor, arg| Family::PolyCos { factor, arg },
        |factor, arg| Family::PolyExp { factor, arg },
    ] {
        for i in 0..m {
            for k in 0..m {
                trainable(make(i, k), &mut specs);
            }
        }
    }
    if opts.power_products {
        for base in 0..m {
            for factor in base + 1..m {
                trainable(Family::PowerProduct { base, factor }, &mut specs);
            }
        }
    }
    if opts.time_power {
        for input in 0..m {
            trainable(Family::TimePower { input }, &mut specs);
        }
    }
    if opts.rational_exp {
        for input in 0..m {
            trainable(Family::RationalExp { input }, &mut specs);
        }
    }
    Ok(specs)
}

/// Keeps the specs whose family is named in `kinds` (see [`Family::kind_name`])
/// and renumbers the parameter slots densely.
pub fn retain_families(specs: Vec<CandidateSpec>, kinds: &[String]) -> Result<Vec<CandidateSpec>> {
    const KNOWN: [&str; 12] = [
        "constant",
        "poly",
        "sin",
        "cos",
        "exp",
        "poly_sin",
        "poly_cos",
        "poly_exp",
        "power_product",
        "time_power",
        "rational_exp",
        "spatial_deriv",
    ];
    if let Some(bad) = kinds.iter().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(SindyError::InvalidArgument(format!("unknown family `{bad}`")));
    }
    let mut slot = 0;
    Ok(specs
        .into_iter()
        .filter(|s| kinds.iter().any(|k| k == s.family.kind_name()))
        .map(|s| match s.param {
            Param::Trainable(_) => {
                slot += 1;
                CandidateSpec::new(s.family, Param::Trainable(slot - 1))
            }
            _ => s,
        })
        .collect())
}

/// Master library over `m` states, one equation per state, all trainable parameters at 1.
pub fn master_library(m: usize, opts: &MasterOptions, names: &[String]) -> Result<LibraryInstance> {
    let specs = master_specs(m, opts)?;
    if names.len() != m {
        return Err(SindyError::ShapeMismatch(format!("{} names for {m} states", names.len())));
    }
    LibraryInstance::new(specs, m, names.to_vec())
}

/// One identified or true term: a concrete column (parameter fixed) and its coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub spec: CandidateSpec,
    pub coef: f64,
}

impl Term {
    pub fn new(family: Family, param: f64, coef: f64) -> Self {
        let param = if family.has_param() { Param::Fixed(param) } else { Param::None };
        Self { spec: CandidateSpec::new(family, param), coef }
    }

    pub fn param(&self) -> f64 {
        match self.spec.param {
            Param::Fixed(v) => v,
            _ => 0.0,
        }
    }
}

/// Rewrites a column with parameter `theta` into the simplest equivalent
/// column, or `None` if it vanishes identically.
///
/// Degenerate parameters collapse onto other families: `cos(0·x)` and
/// `exp(0·x)` become the constant, `x·cos(0·y)`, `x·exp(0·y)` and
/// `x^0·y` become `y` or `x`, `x·t^0` becomes `x` and `exp(x/(1+0·x))`
/// becomes `exp(1·x)`.
pub fn canonical(family: &Family, theta: f64) -> Option<CandidateSpec> {
    use Family::*;
    let poly1 = |input| CandidateSpec::new(Poly { input }, Param::Fixed(1.0));
    let keep = |f: Family| Some(CandidateSpec::new(f, Param::Fixed(theta)));
    match *family {
        Constant => Some(CandidateSpec::constant()),
        SpatialDeriv { .. } => Some(CandidateSpec::new(*family, Param::None)),
        Poly { .. } if theta == 0.0 => Some(CandidateSpec::constant()),
        Sin { .. } | PolySin { .. } if theta == 0.0 => None,
        Cos { .. } | Exp { .. } if theta == 0.0 => Some(CandidateSpec::constant()),
        PolyCos { factor, .. } | PolyExp { factor, .. } if theta == 0.0 => Some(poly1(factor)),
        PowerProduct { factor, .. } if theta == 0.0 => Some(poly1(factor)),
        TimePower { input } if theta == 0.0 => Some(poly1(input)),
        RationalExp { input } if theta == 0.0 => {
            Some(CandidateSpec::new(Exp { input }, Param::Fixed(1.0)))
        }
        f => keep(f),
    }
}

/// Canonical form of one equation: degenerate columns rewritten, equal
/// columns merged, zero terms dropped. Input is `(family, parameter, coefficient)`.
pub fn canonical_terms(columns: impl IntoIterator<Item = (Family, f64, f64)>) -> Vec<Term> {
    let mut out: Vec<Term> = Vec::new();
    for (family, theta, coef) in columns {
        if coef == 0.0 {
            continue;
        }
        let Some(spec) = canonical(&family, theta) else { continue };
        match out.iter_mut().find(|t| t.spec == spec) {
            Some(t) => t.coef += coef,
            None => out.push(Term { spec, coef }),
        }
    }
    out.retain(|t| t.coef != 0.0);
    out
}

/// Whether `found` has exactly the terms of `truth`, with parameters within
/// `param_tol` and coefficients within `coef_tol`.
pub fn terms_match(found: &[Term], truth: &[Term], param_tol: f64, coef_tol: f64) -> bool {
    found.len() == truth.len()
        && truth.iter().all(|t| {
            found.iter().any(|f| {
                f.spec.family == t.spec.family
                    && (f.param() - t.param()).abs() <= param_tol
                    && (f.coef - t.coef).abs() <= coef_tol
            })
        })
}

/// Whether `found` has the same term families and inputs as `truth`, with
/// parameters within `param_tol` (coefficients unchecked).
pub fn support_matches(found: &[Term], truth: &[Term], param_tol: f64) -> bool {
    terms_match(found, truth, param_tol, f64::INFINITY)
}

/// Pairs of active columns whose cosine similarity exceeds `1 - 1e-8`.
pub fn duplicate_columns(theta: &DMatrix<f64>, active: &[usize]) -> Vec<(usize, usize)> {
    let norms: Vec<f64> = active.iter().map(|&j| theta.column(j).norm()).collect();
    let mut out = Vec::new();
    for (ai, &a) in active.iter().enumerate() {
        for (bi, &b) in active.iter().enumerate().skip(ai + 1) {
            if norms[ai] == 0.0 || norms[bi] == 0.0 {
                continue;
            }
            let cos = theta.column(a).dot(&theta.column(b)) / (norms[ai] * norms[bi]);
            if cos.abs() > 1.0 - 1e-8 {
                out.push((a, b));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn names(m: usize) -> Vec<String> {
        ["x", "y", "z"].iter().take(m).map(|s| s.to_string()).collect()
    }

    fn single(family: Family, param: Param) -> LibraryInstance {
        let k = match family.inputs() {
            (_, Some(_)) => 2,
            _ => 1,
        };
        LibraryInstance::new(vec![CandidateSpec::new(family, param)], 1, names(k)).unwrap()
    }

    #[test]
    fn master_m1_enumeration() {
        let specs = master_specs(1, &MasterOptions::default()).unwrap();
        let kinds: Vec<&str> = specs.iter().map(|s| s.family.kind_name()).collect();
        assert_eq!(
            kinds,
            ["constant", "poly", "sin", "cos", "exp", "poly_sin", "poly_cos", "poly_exp"]
        );
    }

    #[test]
    fn master_m2_pairs() {
        let specs = master_specs(2, &MasterOptions::default()).unwrap();
        let pairs: Vec<(usize, usize)> = specs
            .iter()
            .filter_map(|s| match s.family {
                Family::PolySin { factor, arg } => Some((factor, arg)),
                _ => None,
            })
            .collect();
        assert_eq!(pairs, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(specs.len(), 1 + 2 * 4 + 3 * 4);
        let lib = master_library(2, &MasterOptions::default(), &names(2)).unwrap();
        assert_eq!(lib.n_slots(), 18);
        assert!(lib.lambda.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn retained_families_get_dense_slots() {
        let opts = MasterOptions { power_products: true, ..Default::default() };
        let specs = master_specs(3, &opts).unwrap();
        let kinds = ["constant", "poly", "power_product"].map(String::from);
        let kept = retain_families(specs, &kinds).unwrap();
        assert_eq!(kept.len(), 1 + 3 + 3);
        let slots: Vec<usize> = kept.iter().filter_map(|s| s.slot()).collect();
        assert_eq!(slots, vec![0, 1, 2]);
        assert!(matches!(kept[4].family, Family::PowerProduct { base: 0, factor: 1 }));
        assert!(retain_families(vec![], &["nope".to_string()]).is_err());
    }

    #[test]
    fn master_rejects_zero_states() {
        assert!(master_specs(0, &MasterOptions::default()).is_err());
    }

    #[test]
    fn values_at_zero_input() {
        let zeros = DMatrix::zeros(3, 1);
        let t = [1.0, 2.0, 3.0];
        let expect = [
            (Family::Sin { input: 0 }, 0.0),
            (Family::Cos { input: 0 }, 1.0),
            (Family::Exp { input: 0 }, 1.0),
            (Family::Constant, 1.0),
        ];
        for (family, want) in expect {
            let param = if family.has_param() { Param::Trainable(0) } else { Param::None };
            let lib = single(family, param);
            let theta = lib.evaluate(0, &zeros, &t).unwrap();
            assert!(theta.iter().all(|v| *v == want), "{family:?}");
        }
    }

    #[test]
    fn scalar_oracles() {
        let mut lib = single(Family::Poly { input: 0 }, Param::Trainable(0));
        lib.lambda[(0, 0)] = 2.15;
        let v = lib.evaluate(0, &DMatrix::from_element(1, 1, 2.0), &[1.0]).unwrap()[(0, 0)];
        assert_relative_eq!(v, 2f64.powf(2.15), max_relative = 1e-14);
        assert_relative_eq!(v, 4.4383, epsilon = 1e-4);

        let mut lib = single(Family::RationalExp { input: 0 }, Param::Trainable(0));
        lib.lambda[(0, 0)] = 0.3;
        let v = lib.evaluate(0, &DMatrix::from_element(1, 1, 1.0), &[1.0]).unwrap()[(0, 0)];
        assert_relative_eq!(v, (1.0f64 / 1.3).exp(), max_relative = 1e-14);
        assert_relative_eq!(v, 2.1581, epsilon = 1e-4);
    }

    #[test]
    fn signed_power_is_odd() {
        assert_eq!(signed_pow(-2.0, 2.0), -4.0);
        assert_eq!(signed_pow(1e-13, 0.5), 0.0);
        assert_eq!(signed_pow(3.0, 1.0), 3.0);
    }

    #[test]
    fn lambda_partial_hand_values() {
        let lib = single(Family::Sin { input: 0 }, Param::Trainable(0));
        let d = lib.d_theta_d_lambda(0, &DMatrix::zeros(4, 1), &[1.0; 4]).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));

        let lib = single(Family::Exp { input: 0 }, Param::Trainable(0));
        let d = lib.d_theta_d_lambda(0, &DMatrix::from_element(1, 1, 1.0), &[1.0]).unwrap();
        assert_relative_eq!(d[(0, 0)], std::f64::consts::E, max_relative = 1e-15);
    }

    #[test]
    fn time_power_requires_positive_time() {
        let lib = single(Family::TimePower { input: 0 }, Param::Trainable(0));
        let err = lib.evaluate(0, &DMatrix::from_element(2, 1, 1.0), &[0.0, 1.0]).unwrap_err();
        assert!(matches!(err, SindyError::Domain { row: 0, .. }));
    }

    #[test]
    fn input_partials_basic() {
        let lib = single(Family::Constant, Param::None);
        let d = lib.d_theta_d_x(0, &DMatrix::from_element(3, 1, 0.7), &[1.0; 3]).unwrap();
        assert!(d[0].iter().all(|v| *v == 0.0));

        let mut lib = single(Family::Sin { input: 0 }, Param::Trainable(0));
        lib.lambda[(0, 0)] = 1.3;
        let d = lib.d_theta_d_x(0, &DMatrix::from_element(1, 1, 0.4), &[1.0]).unwrap();
        assert_relative_eq!(d[0][(0, 0)], 1.3 * (1.3f64 * 0.4).cos(), max_relative = 1e-15);

        let spatial = single(
            Family::SpatialDeriv { input: 0, order: 2, axis: Axis::X },
            Param::None,
        );
        assert!(matches!(
            spatial.d_theta_d_x(0, &DMatrix::zeros(1, 1), &[1.0]),
            Err(SindyError::Unsupported(_))
        ));
    }

    #[test]
    fn validation_catches_bad_specs() {
        let bad = vec![CandidateSpec::new(Family::Sin { input: 0 }, Param::None)];
        assert!(LibraryInstance::new(bad, 1, names(1)).is_err());
        let bad = vec![CandidateSpec::new(Family::Sin { input: 3 }, Param::Trainable(0))];
        assert!(LibraryInstance::new(bad, 1, names(1)).is_err());
        let bad = vec![CandidateSpec::new(
            Family::SpatialDeriv { input: 0, order: 5, axis: Axis::Y },
            Param::None,
        )];
        assert!(LibraryInstance::new(bad, 1, names(1)).is_err());
    }

    #[test]
    fn describe_lists_every_column() {
        let lib = master_library(1, &MasterOptions::default(), &names(1)).unwrap();
        let text = lib.describe();
        assert_eq!(text.lines().count(), 8);
        assert!(text.lines().nth(2).unwrap().starts_with("column=2 family=sin inputs=x slot=0"));
    }

    #[test]
    fn duplicates_are_reported() {
        let theta = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 2.0, 4.0, 1.0, 3.0, 6.0, 0.0]);
        assert_eq!(duplicate_columns(&theta, &[0, 1, 2]), vec![(0, 1)]);
    }

    #[test]
    fn labels() {
        let n = names(2);
        let spec = CandidateSpec::new(Family::PolyCos { factor: 1, arg: 0 }, Param::Trainable(0));
        assert_eq!(spec.label(0.75, &n), "y·cos(0.750000·x)");
        let spec = CandidateSpec::new(Family::Poly { input: 0 }, Param::Fixed(1.0));
        assert_eq!(spec.label(1.0, &n), "x");
        let spec = CandidateSpec::new(Family::TimePower { input: 1 }, Param::Trainable(0));
        assert_eq!(spec.label(0.5, &n), "y·t^(-0.500000)");
    }
}
