//! Time-varying compartmental and cooperative systems
//! `q' = F(t, q) g(t, q) + I(t, q)` on a box, the structured class where every
//! coefficient depends only on the state of one compartment, and the sampled
//! structural checks run on them.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{check_monotone, BoundExpr, Direction, Expression, MonotonicityVerdict};
use crate::matrix::{CompartmentalMatrix, SquareMatrix};
use crate::sampling::{box_points, corners, SamplePlan};

/// Safety factor applied to sampled divided differences.
pub const LIPSCHITZ_SAFETY: f64 = 1.25;
/// Grid size used for scalar coefficient checks on `[0, c_i]`.
pub const SCALAR_GRID: usize = 257;
/// Number of time points used for scalar coefficient checks.
pub const TIME_GRID: usize = 9;

/// `[lower_1, upper_1] x ... x [lower_n, upper_n]`. Upper bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(Error::InvalidParameter("box must have dimension >= 1".into()));
        }
        for i in 0..lower.len() {
            if !(lower[i].is_finite() && lower[i] <= upper[i]) || upper[i].is_nan() {
                return Err(Error::InvalidParameter(format!(
                    "invalid interval [{}, {}] in component {}",
                    lower[i],
                    upper[i],
                    i + 1
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[0, c_1] x ... x [0, c_n]`.
    pub fn capacities(c: &[f64]) -> Result<Self> {
        Self::new(vec![0.0; c.len()], c.to_vec())
    }

    /// The nonnegative orthant.
    pub fn orthant(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_bounded(&self) -> bool {
        self.upper.iter().all(|u| u.is_finite())
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .enumerate()
                .all(|(i, &v)| v >= self.lower[i] - tol && v <= self.upper[i] + tol)
    }

    fn require_bounded(&self) -> Result<()> {
        if self.is_bounded() {
            Ok(())
        } else {
            Err(Error::InvalidParameter("sampling needs a bounded box".into()))
        }
    }
}

/// Right-hand side `Q(t, x)` of an ODE on a box. Implementations must be pure,
/// since checks and ensembles evaluate them from several threads.
pub trait Dynamics: Send + Sync {
    fn space(&self) -> &BoxSpace;

    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;

    fn dim(&self) -> usize {
        self.space().dim()
    }

    fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.rhs(t, x, &mut out)?;
        Ok(out)
    }
}

/// Dynamics written as `F(t, x) g(t, x) + I(t, x)`.
pub trait CompartmentalSystem: Dynamics {
    fn f_matrix(&self, t: f64, x: &[f64]) -> Result<SquareMatrix>;
    fn g(&self, t: f64, x: &[f64]) -> Result<Vec<f64>>;
    fn inflow(&self, t: f64, x: &[f64]) -> Result<Vec<f64>>;
}

type MatrixFn = dyn Fn(f64, &[f64]) -> Result<SquareMatrix> + Send + Sync;
type VectorFn = dyn Fn(f64, &[f64]) -> Result<Vec<f64>> + Send + Sync;
type RhsFn = dyn Fn(f64, &[f64], &mut [f64]) -> Result<()> + Send + Sync;
type ScalarFn = dyn Fn(f64, f64) -> Result<f64> + Send + Sync;

/// `q' = F q` with a constant compartmental matrix.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    f: CompartmentalMatrix,
    space: BoxSpace,
}

impl LinearSystem {
    /// On the nonnegative orthant.
    pub fn new(f: CompartmentalMatrix) -> Self {
        let space = BoxSpace::orthant(f.n());
        Self { f, space }
    }

    pub fn with_space(f: CompartmentalMatrix, space: BoxSpace) -> Result<Self> {
        if space.dim() != f.n() {
            return Err(Error::DimensionMismatch {
                expected: f.n(),
                got: space.dim(),
            });
        }
        Ok(Self { f, space })
    }

    pub fn matrix(&self) -> &CompartmentalMatrix {
        &self.f
    }
}

impl Dynamics for LinearSystem {
    fn space(&self) -> &BoxSpace {
        &self.space
    }

    fn rhs(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.f.matrix().mul_vec(x));
        Ok(())
    }
}

impl CompartmentalSystem for LinearSystem {
    fn f_matrix(&self, _t: f64, _x: &[f64]) -> Result<SquareMatrix> {
        Ok(self.f.matrix().clone())
    }

    fn g(&self, _t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }

    fn inflow(&self, _t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
}

/// Compartmental system from closures. `g` defaults to the identity and `I` to zero.
#[derive(Clone)]
pub struct GeneralSystem {
    space: BoxSpace,
    f: Arc<MatrixFn>,
    g: Option<Arc<VectorFn>>,
    inflow: Option<Arc<VectorFn>>,
}

impl fmt::Debug for GeneralSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralSystem").field("space", &self.space).finish_non_exhaustive()
    }
}

impl GeneralSystem {
    pub fn new(space: BoxSpace, f: impl Fn(f64, &[f64]) -> Result<SquareMatrix> + Send + Sync + 'static) -> Self {
        Self {
            space,
            f: Arc::new(f),
            g: None,
            inflow: None,
        }
    }

    pub fn with_g(mut self, g: impl Fn(f64, &[f64]) -> Result<Vec<f64>> + Send + Sync + 'static) -> Self {
        self.g = Some(Arc::new(g));
        self
    }

    pub fn with_inflow(mut self, i: impl Fn(f64, &[f64]) -> Result<Vec<f64>> + Send + Sync + 'static) -> Self {
        self.inflow = Some(Arc::new(i));
        self
    }
}

impl Dynamics for GeneralSystem {
    fn space(&self) -> &BoxSpace {
        &self.space
    }

    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let f = self.f_matrix(t, x)?;
        let g = self.g(t, x)?;
        let i = self.inflow(t, x)?;
        for (k, (a, b)) in f.mul_vec(&g).into_iter().zip(i).enumerate() {
            out[k] = a + b;
        }
        Ok(())
    }
}

impl CompartmentalSystem for GeneralSystem {
    fn f_matrix(&self, t: f64, x: &[f64]) -> Result<SquareMatrix> {
        let m = (self.f)(t, x)?;
        if m.n() != self.space.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.space.dim(),
                got: m.n(),
            });
        }
        Ok(m)
    }

    fn g(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        match &self.g {
            Some(g) => g(t, x),
            None => Ok(x.to_vec()),
        }
    }

    fn inflow(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        match &self.inflow {
            Some(i) => i(t, x),
            None => Ok(vec![0.0; x.len()]),
        }
    }
}

/// Arbitrary dynamics from a closure, for systems outside the compartmental form.
#[derive(Clone)]
pub struct FnDynamics {
    space: BoxSpace,
    f: Arc<RhsFn>,
}

impl FnDynamics {
    pub fn new(space: BoxSpace, f: impl Fn(f64, &[f64], &mut [f64]) -> Result<()> + Send + Sync + 'static) -> Self {
        Self { space, f: Arc::new(f) }
    }
}

impl Dynamics for FnDynamics {
    fn space(&self) -> &BoxSpace {
        &self.space
    }

    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(t, x, out)
    }
}

/// Scalar coefficient `(t, x_i) -> value` of a structured system.
#[derive(Clone)]
pub enum Coefficient {
    Zero,
    Constant(f64),
    /// `g(t, x) = x`.
    Identity,
    Expr(BoundExpr),
    Native { label: String, f: Arc<ScalarFn> },
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl Coefficient {
    pub fn native(label: impl Into<String>, f: impl Fn(f64, f64) -> Result<f64> + Send + Sync + 'static) -> Self {
        Coefficient::Native {
            label: label.into(),
            f: Arc::new(f),
        }
    }

    /// Evaluate at time `t` and own-compartment state `x` with capacity `c`.
    pub fn eval(&self, t: f64, x: f64, c: f64) -> Result<f64> {
        match self {
            Coefficient::Zero => Ok(0.0),
            Coefficient::Constant(v) => Ok(*v),
            Coefficient::Identity => Ok(x),
            Coefficient::Expr(e) => Ok(e.eval(t, x, c)?),
            Coefficient::Native { f, .. } => f(t, x),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Coefficient::Zero => true,
            Coefficient::Constant(v) => *v == 0.0,
            Coefficient::Expr(e) => e.is_zero(),
            _ => false,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Coefficient::Zero => "0".into(),
            Coefficient::Constant(v) => format!("{v:?}"),
            Coefficient::Identity => "x".into(),
            Coefficient::Expr(e) => e.text().to_string(),
            Coefficient::Native { label, .. } => label.clone(),
        }
    }
}

/// Which coefficient of a structured system. Indices are 0-based here and
/// printed 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CoefficientId {
    Outflow(usize),
    /// `F_ij`: flow from `j` into `i`, evaluated at `x_i`.
    Flow(usize, usize),
    G(usize),
    Inflow(usize),
}

impl CoefficientId {
    /// Compartment whose state the coefficient reads.
    pub fn owner(&self) -> usize {
        match *self {
            CoefficientId::Outflow(i) | CoefficientId::G(i) | CoefficientId::Inflow(i) => i,
            CoefficientId::Flow(i, _) => i,
        }
    }
}

impl fmt::Display for CoefficientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            CoefficientId::Outflow(i) => write!(f, "f_0{}", i + 1),
            CoefficientId::Flow(i, j) => write!(f, "f_{},{}", i + 1, j + 1),
            CoefficientId::G(i) => write!(f, "g_{}", i + 1),
            CoefficientId::Inflow(i) => write!(f, "I_{}", i + 1),
        }
    }
}

impl Serialize for CoefficientId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// User-declared Lipschitz constants. Missing entries are estimated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeclaredLipschitz {
    pub values: BTreeMap<CoefficientId, f64>,
}

impl DeclaredLipschitz {
    pub fn get(&self, id: CoefficientId) -> Option<f64> {
        self.values.get(&id).copied()
    }
}

/// Compartmental system of the structured class: `F_ij(t, x) = f_ij(t, x_i)`
/// for `j != i` and `F_ii = -f_0i(t, x_i) - sum_{k != i} f_ki(t, x_k)`, with
/// `g_i(t, x_i)` and `I_i(t, x_i)` also depending on the own state only.
#[derive(Debug, Clone)]
pub struct StructuredSystem {
    space: BoxSpace,
    f0: Vec<Coefficient>,
    /// `(i, j, f_ij)` sorted by `(i, j)`, zero coefficients dropped.
    flows: Vec<(usize, usize, Coefficient)>,
    g: Vec<Coefficient>,
    inflow: Vec<Coefficient>,
    declared: DeclaredLipschitz,
}

impl StructuredSystem {
    /// All coefficients zero, `g = x`, on `[0, c]`. Capacities must be finite.
    pub fn new(capacities: &[f64]) -> Result<Self> {
        if let Some(i) = capacities.iter().position(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "capacity c_{} = {} must be positive and finite",
                i + 1,
                capacities[i]
            )));
        }
        let n = capacities.len();
        Ok(Self {
            space: BoxSpace::capacities(capacities)?,
            f0: vec![Coefficient::Zero; n],
            flows: Vec::new(),
            g: vec![Coefficient::Identity; n],
            inflow: vec![Coefficient::Zero; n],
            declared: DeclaredLipschitz::default(),
        })
    }

    pub fn n(&self) -> usize {
        self.space.dim()
    }

    pub fn capacities(&self) -> &[f64] {
        &self.space.upper
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i < self.n() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("compartment {} out of range 1..={}", i + 1, self.n())))
        }
    }

    pub fn set_outflow(&mut self, i: usize, c: Coefficient) -> Result<()> {
        self.check_index(i)?;
        self.f0[i] = c;
        Ok(())
    }

    /// Set `f_ij`, the coefficient of the flow from `j` into `i`.
    pub fn set_flow(&mut self, i: usize, j: usize, c: Coefficient) -> Result<()> {
        self.check_index(i)?;
        self.check_index(j)?;
        if i == j {
            return Err(Error::InvalidParameter(format!("flow f_{0},{0} is not off-diagonal", i + 1)));
        }
        self.flows.retain(|(a, b, _)| (*a, *b) != (i, j));
        if !c.is_zero() {
            self.flows.push((i, j, c));
            self.flows.sort_by_key(|(a, b, _)| (*a, *b));
        }
        Ok(())
    }

    pub fn set_g(&mut self, i: usize, c: Coefficient) -> Result<()> {
        self.check_index(i)?;
        self.g[i] = c;
        Ok(())
    }

    pub fn set_inflow(&mut self, i: usize, c: Coefficient) -> Result<()> {
        self.check_index(i)?;
        self.inflow[i] = c;
        Ok(())
    }

    pub fn declare_lipschitz(&mut self, id: CoefficientId, value: f64) -> Result<()> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::InvalidParameter(format!("Lipschitz constant of {id} must be >= 0")));
        }
        self.declared.values.insert(id, value);
        Ok(())
    }

    pub fn declared_lipschitz(&self) -> &DeclaredLipschitz {
        &self.declared
    }

    pub fn outflow_coefficient(&self, i: usize) -> &Coefficient {
        &self.f0[i]
    }

    pub fn flow_coefficient(&self, i: usize, j: usize) -> Option<&Coefficient> {
        self.flows.iter().find(|(a, b, _)| (*a, *b) == (i, j)).map(|(_, _, c)| c)
    }

    /// Nonzero flows `(i, j, f_ij)`.
    pub fn flows(&self) -> impl Iterator<Item = (usize, usize, &Coefficient)> {
        self.flows.iter().map(|(i, j, c)| (*i, *j, c))
    }

    pub fn g_coefficient(&self, i: usize) -> &Coefficient {
        &self.g[i]
    }

    pub fn inflow_coefficient(&self, i: usize) -> &Coefficient {
        &self.inflow[i]
    }

    pub fn coefficient(&self, id: CoefficientId) -> Option<&Coefficient> {
        match id {
            CoefficientId::Outflow(i) => self.f0.get(i),
            CoefficientId::Flow(i, j) => self.flow_coefficient(i, j),
            CoefficientId::G(i) => self.g.get(i),
            CoefficientId::Inflow(i) => self.inflow.get(i),
        }
    }

    /// Every coefficient that is not identically zero, in a fixed order.
    pub fn coefficient_ids(&self) -> Vec<CoefficientId> {
        let n = self.n();
        let mut ids = Vec::new();
        ids.extend((0..n).filter(|&i| !self.f0[i].is_zero()).map(CoefficientId::Outflow));
        ids.extend(self.flows.iter().map(|(i, j, _)| CoefficientId::Flow(*i, *j)));
        ids.extend((0..n).map(CoefficientId::G));
        ids.extend((0..n).filter(|&i| !self.inflow[i].is_zero()).map(CoefficientId::Inflow));
        ids
    }

    /// Evaluate one coefficient at its owner's state.
    pub fn eval_coefficient(&self, id: CoefficientId, t: f64, xi: f64) -> Result<f64> {
        let c = self.capacities()[id.owner()];
        match self.coefficient(id) {
            Some(coef) => coef.eval(t, xi, c),
            None => Ok(0.0),
        }
    }

    pub fn g_vec(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.capacities();
        (0..self.n()).map(|i| self.g[i].eval(t, x[i], c[i])).collect()
    }

    pub fn inflow_vec(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.capacities();
        (0..self.n()).map(|i| self.inflow[i].eval(t, x[i], c[i])).collect()
    }

    pub fn outflow_vec(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.capacities();
        (0..self.n()).map(|i| self.f0[i].eval(t, x[i], c[i])).collect()
    }

    /// Assemble `F(t, x)`.
    pub fn assemble(&self, t: f64, x: &[f64]) -> Result<SquareMatrix> {
        let n = self.n();
        if x.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: x.len() });
        }
        let c = self.capacities();
        let mut m = SquareMatrix::zeros(n);
        for i in 0..n {
            m.set(i, i, -self.f0[i].eval(t, x[i], c[i])?);
        }
        for (i, j, coef) in &self.flows {
            let v = coef.eval(t, x[*i], c[*i])?;
            m.set(*i, *j, v);
            m.set(*j, *j, m.get(*j, *j) - v);
        }
        Ok(m)
    }

    /// Resolved Lipschitz constant of every nonzero coefficient over its
    /// compartment interval: declared values first, sampled estimates otherwise.
    pub fn lipschitz_table(&self, times: &[f64]) -> Result<LipschitzTable> {
        let mut entries = Vec::new();
        for id in self.coefficient_ids() {
            let (value, declared) = match self.declared.get(id) {
                Some(v) => (v, true),
                None => (self.estimate_lipschitz(id, times)?, false),
            };
            entries.push(LipschitzEntry { id, value, declared });
        }
        Ok(LipschitzTable { entries })
    }

    fn estimate_lipschitz(&self, id: CoefficientId, times: &[f64]) -> Result<f64> {
        let c = self.capacities()[id.owner()];
        let m = SCALAR_GRID - 1;
        let mut best: f64 = 0.0;
        for &t in times {
            let mut prev = self.eval_coefficient(id, t, 0.0)?;
            for k in 1..=m {
                let z = c * k as f64 / m as f64;
                let v = self.eval_coefficient(id, t, z)?;
                best = best.max((v - prev).abs() / (c / m as f64));
                prev = v;
            }
        }
        Ok(best * LIPSCHITZ_SAFETY)
    }

    /// Sampled checks of the structural assumptions: nonnegativity (A1), the
    /// boundary identities (A2), slope of `g` (A3), and the monotonicity of
    /// `f_ij` (A4), `f_0i` (A5) and `I_i` (A6).
    pub fn check_assumptions(&self, horizon: f64, tol: f64) -> Result<AssumptionReport> {
        let times = time_grid(horizon);
        let mut checks = Vec::new();
        for id in self.coefficient_ids() {
            let c = self.capacities()[id.owner()];
            let mut nonneg = (true, f64::INFINITY, String::new());
            let mut boundary: Option<(bool, f64, String)> = None;
            let mut mono = (true, f64::INFINITY, String::new());
            for &t in &times {
                for k in 0..SCALAR_GRID {
                    let z = c * k as f64 / (SCALAR_GRID - 1) as f64;
                    let v = self.eval_coefficient(id, t, z)?;
                    if v < nonneg.1 {
                        nonneg.1 = v;
                        if v < -tol {
                            nonneg = (false, v, format!("{id}(t = {t}, x = {z}) = {v}"));
                        }
                    }
                }
                let at = |z| self.eval_coefficient(id, t, z);
                let boundary_values: Vec<(f64, f64)> = match id {
                    CoefficientId::Flow(..) => vec![(c, at(c)?)],
                    CoefficientId::G(_) => vec![(0.0, at(0.0)?)],
                    // Only I_i(t, c_i) = 0: with A1 and A6, I_i(t, 0) = 0 would force I_i = 0.
                    CoefficientId::Inflow(_) => vec![(c, at(c)?)],
                    CoefficientId::Outflow(_) => Vec::new(),
                };
                for (z, v) in boundary_values {
                    let entry = boundary.get_or_insert((true, 0.0, String::new()));
                    if v.abs() > entry.1 {
                        entry.1 = v.abs();
                    }
                    if v.abs() > tol && entry.0 {
                        *entry = (false, v.abs(), format!("{id}(t = {t}, x = {z}) = {v}, expected 0"));
                    }
                }
                let dir = match id {
                    CoefficientId::Flow(..) | CoefficientId::Inflow(_) => Direction::Nonincreasing,
                    CoefficientId::Outflow(_) => Direction::Nondecreasing,
                    CoefficientId::G(_) => Direction::SlopeAtLeast(1.0),
                };
                match check_monotone(|z| self.eval_coefficient(id, t, z), 0.0, c, dir, SCALAR_GRID, tol)? {
                    MonotonicityVerdict::PassedAtSamples { worst_margin, .. } => mono.1 = mono.1.min(worst_margin),
                    MonotonicityVerdict::Violated { x1, x2, f1, f2 } => {
                        let m = -(f2 - f1).abs();
                        if mono.0 {
                            mono.2 = format!("{id} at t = {t}: f({x1}) = {f1}, f({x2}) = {f2}");
                        }
                        mono = (false, mono.1.min(m), std::mem::take(&mut mono.2));
                    }
                }
            }
            let mono_tag = match id {
                CoefficientId::Flow(..) => "A4",
                CoefficientId::Outflow(_) => "A5",
                CoefficientId::G(_) => "A3",
                CoefficientId::Inflow(_) => "A6",
            };
            checks.push(AssumptionCheck::new("A1", id, nonneg));
            if let Some(b) = boundary {
                checks.push(AssumptionCheck::new("A2", id, b));
            }
            checks.push(AssumptionCheck::new(mono_tag, id, mono));
        }
        Ok(AssumptionReport {
            passed: checks.iter().all(|c| c.passed),
            time_samples: times.len(),
            grid: SCALAR_GRID,
            checks,
        })
    }
}

pub(crate) fn time_grid(horizon: f64) -> Vec<f64> {
    if horizon > 0.0 {
        (0..TIME_GRID).map(|k| horizon * k as f64 / (TIME_GRID - 1) as f64).collect()
    } else {
        vec![0.0]
    }
}

impl Dynamics for StructuredSystem {
    fn space(&self) -> &BoxSpace {
        &self.space
    }

    /// Flux form: every flow is added to its receiver and removed from its
    /// source, so mass balance holds up to rounding.
    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let c = self.capacities();
        let mut g = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            g.push(self.g[i].eval(t, x[i], c[i])?);
        }
        for i in 0..x.len() {
            out[i] = self.inflow[i].eval(t, x[i], c[i])? - self.f0[i].eval(t, x[i], c[i])? * g[i];
        }
        for (i, j, coef) in &self.flows {
            let flow = coef.eval(t, x[*i], c[*i])? * g[*j];
            out[*i] += flow;
            out[*j] -= flow;
        }
        Ok(())
    }
}

impl CompartmentalSystem for StructuredSystem {
    fn f_matrix(&self, t: f64, x: &[f64]) -> Result<SquareMatrix> {
        self.assemble(t, x)
    }

    fn g(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.g_vec(t, x)
    }

    fn inflow(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.inflow_vec(t, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzEntry {
    pub id: CoefficientId,
    pub value: f64,
    pub declared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzTable {
    pub entries: Vec<LipschitzEntry>,
}

impl LipschitzTable {
    pub fn get(&self, id: CoefficientId) -> f64 {
        self.entries.iter().find(|e| e.id == id).map_or(0.0, |e| e.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub assumption: &'static str,
    pub coefficient: CoefficientId,
    pub passed: bool,
    /// Smallest value (A1), largest boundary magnitude (A2) or worst
    /// monotonicity margin (A3 to A6) seen.
    pub worst: f64,
    pub detail: Option<String>,
}

impl AssumptionCheck {
    fn new(assumption: &'static str, id: CoefficientId, (passed, worst, detail): (bool, f64, String)) -> Self {
        Self {
            assumption,
            coefficient: id,
            passed,
            worst: if worst.is_finite() { worst } else { 0.0 },
            detail: (!detail.is_empty()).then_some(detail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub passed: bool,
    pub time_samples: usize,
    pub grid: usize,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Lipschitz declarations as written in a system description. Compartment
/// indices in keys are 1-based.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzDescription {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub f0: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub f: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub g: Vec<Option<f64>>,
    #[serde(default, rename = "I", skip_serializing_if = "Vec::is_empty")]
    pub inflow: Vec<Option<f64>>,
}

/// JSON description of a structured system.
///
/// `f` maps `"j,i"` (1-based) to the coefficient of the flow from `i` into
/// `j`, a function of `x_j`. Inside every expression `x` is the own
/// compartment's state and `c` its capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDescription {
    pub n: usize,
    pub capacities: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f0: Option<Vec<Expression>>,
    #[serde(default)]
    pub f: BTreeMap<String, Expression>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Expression>>,
    #[serde(default, rename = "I", skip_serializing_if = "Option::is_none")]
    pub inflow: Option<Vec<Expression>>,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
    #[serde(default)]
    pub declared_lipschitz: LipschitzDescription,
}

/// Parse a `"j,i"` key into 0-based `(j, i)`.
pub fn parse_pair_key(key: &str, n: usize) -> Result<(usize, usize)> {
    let bad = || Error::Input(format!("flow key `{key}` must be \"j,i\" with 1 <= j, i <= {n} and j != i"));
    let (a, b) = key.split_once(',').ok_or_else(bad)?;
    let j: usize = a.trim().parse().map_err(|_| bad())?;
    let i: usize = b.trim().parse().map_err(|_| bad())?;
    if j == 0 || i == 0 || j > n || i > n || i == j {
        return Err(bad());
    }
    Ok((j - 1, i - 1))
}

impl SystemDescription {
    pub fn from_json(src: &str) -> Result<Self> {
        Ok(serde_json::from_str(src)?)
    }

    pub fn build(&self) -> Result<StructuredSystem> {
        let n = self.n;
        let len_check = |what: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::Input(format!("`{what}` has {len} entries, expected n = {n}")))
            }
        };
        len_check("capacities", self.capacities.len())?;
        let mut sys = StructuredSystem::new(&self.capacities)?;
        let bind = |e: &Expression| -> Result<Coefficient> {
            let b = e.bind(&self.constants)?;
            Ok(if b.is_zero() { Coefficient::Zero } else { Coefficient::Expr(b) })
        };
        if let Some(f0) = &self.f0 {
            len_check("f0", f0.len())?;
            for (i, e) in f0.iter().enumerate() {
                sys.set_outflow(i, bind(e)?)?;
            }
        }
        for (key, e) in &self.f {
            let (j, i) = parse_pair_key(key, n)?;
            if sys.flow_coefficient(j, i).is_some() {
                return Err(Error::Input(format!("flow key `{key}` appears twice")));
            }
            sys.set_flow(j, i, bind(e)?)?;
        }
        if let Some(g) = &self.g {
            len_check("g", g.len())?;
            for (i, e) in g.iter().enumerate() {
                sys.set_g(i, bind(e)?)?;
            }
        }
        if let Some(inflow) = &self.inflow {
            len_check("I", inflow.len())?;
            for (i, e) in inflow.iter().enumerate() {
                sys.set_inflow(i, bind(e)?)?;
            }
        }
        let d = &self.declared_lipschitz;
        let mut declare_vec = |v: &[Option<f64>], what: &str, mk: fn(usize) -> CoefficientId| -> Result<()> {
            if !v.is_empty() {
                len_check(what, v.len())?;
            }
            for (i, l) in v.iter().enumerate() {
                if let Some(l) = l {
                    sys.declare_lipschitz(mk(i), *l)?;
                }
            }
            Ok(())
        };
        declare_vec(&d.f0, "declared_lipschitz.f0", CoefficientId::Outflow)?;
        declare_vec(&d.g, "declared_lipschitz.g", CoefficientId::G)?;
        declare_vec(&d.inflow, "declared_lipschitz.I", CoefficientId::Inflow)?;
        for (key, l) in &d.f {
            let (j, i) = parse_pair_key(key, n)?;
            sys.declare_lipschitz(CoefficientId::Flow(j, i), *l)?;
        }
        Ok(sys)
    }
}

/// Where a sampled check failed or came closest to failing. Component is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub t: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    #[serde(with = "crate::one_based::opt_index")]
    pub component: Option<usize>,
    pub margin: f64,
}

/// Outcome of a sampled check. A pass holds at the listed samples only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledVerdict {
    pub check: &'static str,
    pub basis: &'static str,
    pub passed: bool,
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
    pub worst_margin: f64,
    /// The failing sample, or the closest call when passed.
    pub witness: Option<Witness>,
}

/// Sampled ordered pairs `a <= b` and times `t in [0, horizon]`.
pub(crate) fn ordered_pairs(space: &BoxSpace, plan: &SamplePlan, horizon: f64) -> Result<Vec<(f64, Vec<f64>, Vec<f64>)>> {
    space.require_bounded()?;
    let n = space.dim();
    let mut lo = vec![0.0];
    lo.extend(&space.lower);
    lo.extend(&space.lower);
    let mut hi = vec![horizon.max(0.0)];
    hi.extend(&space.upper);
    hi.extend(&space.upper);
    let raw = box_points(&lo, &hi, &SamplePlan {
        include_corners: false,
        ..*plan
    });
    let mut out: Vec<(f64, Vec<f64>, Vec<f64>)> = raw
        .into_iter()
        .map(|p| {
            let (a, b): (Vec<f64>, Vec<f64>) = (0..n).map(|i| {
                let (u, v) = (p[1 + i], p[1 + n + i]);
                (u.min(v), u.max(v))
            }).unzip();
            (p[0], a, b)
        })
        .collect();
    if plan.include_corners {
        for c in corners(&space.lower, &space.upper, plan.seed) {
            out.push((0.0, space.lower.clone(), c.clone()));
            out.push((0.0, c, space.upper.clone()));
        }
    }
    Ok(out)
}

/// Run `margin` on every sample in parallel and merge in index order. The
/// first sample with the smallest margin is the witness.
fn run_check<T: Sync>(
    check: &'static str,
    samples: &[T],
    plan: &SamplePlan,
    tol: f64,
    margin: impl Fn(&T) -> Result<(f64, Witness)> + Sync,
) -> Result<SampledVerdict> {
    let results: Vec<Result<(f64, Witness)>> = samples.par_iter().map(&margin).collect();
    let mut worst: Option<(f64, Witness)> = None;
    for r in results {
        let (m, w) = r?;
        if worst.as_ref().is_none_or(|(wm, _)| m < *wm) {
            worst = Some((m, w));
        }
    }
    let (worst_margin, witness) = match worst {
        Some((m, w)) => (m, Some(w)),
        None => (0.0, None),
    };
    Ok(SampledVerdict {
        check,
        basis: "at-samples",
        passed: worst_margin >= -tol,
        samples: samples.len(),
        seed: plan.seed,
        tol,
        worst_margin,
        witness,
    })
}

/// Type K at samples: for ordered pairs `a <= b` and each `i`, raise `a_i` to
/// `b_i` and check `Q_i(t, a) <= Q_i(t, b) + tol`.
pub fn check_type_k(sys: &dyn Dynamics, plan: &SamplePlan, horizon: f64, tol: f64) -> Result<SampledVerdict> {
    let pairs = ordered_pairs(sys.space(), plan, horizon)?;
    let n = sys.dim();
    run_check("type_k", &pairs, plan, tol, |(t, a, b)| {
        let qb = sys.eval(*t, b)?;
        let mut best = (f64::INFINITY, None);
        for i in 0..n {
            let mut ai = a.clone();
            ai[i] = b[i];
            let qa = sys.eval(*t, &ai)?;
            let m = qb[i] - qa[i];
            if m < best.0 {
                best = (m, Some((i, ai)));
            }
        }
        let (m, which) = best;
        let (component, a_used) = match which {
            Some((i, ai)) => (Some(i), ai),
            None => (None, a.clone()),
        };
        Ok((
            if m.is_finite() { m } else { 0.0 },
            Witness {
                t: *t,
                a: a_used,
                b: b.clone(),
                component,
                margin: m,
            },
        ))
    })
}

/// `sum_i Q_i(t, b) - Q_i(t, a) <= tol` for ordered pairs `a <= b`.
pub fn check_nonexpansive_condition(
    sys: &dyn Dynamics,
    plan: &SamplePlan,
    horizon: f64,
    tol: f64,
) -> Result<SampledVerdict> {
    let pairs = ordered_pairs(sys.space(), plan, horizon)?;
    run_check("nonexpansive", &pairs, plan, tol, |(t, a, b)| {
        let qa = sys.eval(*t, a)?;
        let qb = sys.eval(*t, b)?;
        let m = -qb.iter().zip(&qa).map(|(y, x)| y - x).sum::<f64>();
        Ok((
            m,
            Witness {
                t: *t,
                a: a.clone(),
                b: b.clone(),
                component: None,
                margin: m,
            },
        ))
    })
}

/// Sampled system invariants: `F(t, x)` compartmental, `g_i >= x_i` with
/// `g_i = 0` where `x_i = 0`, and `I >= 0`. The margin is the most negative
/// slack among those conditions.
pub fn check_compartmental_samples(
    sys: &dyn CompartmentalSystem,
    plan: &SamplePlan,
    horizon: f64,
    tol: f64,
) -> Result<SampledVerdict> {
    let space = sys.space();
    space.require_bounded()?;
    let mut lo = vec![0.0];
    lo.extend(&space.lower);
    let mut hi = vec![horizon.max(0.0)];
    hi.extend(&space.upper);
    let pts = box_points(&lo, &hi, plan);
    run_check("compartmental", &pts, plan, tol, |p| {
        let (t, x) = (p[0], &p[1..]);
        let f = sys.f_matrix(t, x)?;
        let g = sys.g(t, x)?;
        let inflow = sys.inflow(t, x)?;
        let mut worst = (f64::INFINITY, None);
        let mut take = |m: f64, i: usize| {
            if m < worst.0 {
                worst = (m, Some(i));
            }
        };
        for j in 0..f.n() {
            for i in 0..f.n() {
                if i != j {
                    take(f.get(i, j), i);
                }
            }
            take(-f.column_sum(j), j);
            take(g[j] - x[j], j);
            if x[j] == 0.0 {
                take(-g[j].abs(), j);
            }
            take(inflow[j], j);
        }
        Ok((
            worst.0,
            Witness {
                t,
                a: x.to_vec(),
                b: x.to_vec(),
                component: worst.1,
                margin: worst.0,
            },
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expression;

    fn expr(src: &str) -> Coefficient {
        Coefficient::Expr(Expression::parse(src).unwrap().bind(&BTreeMap::new()).unwrap())
    }

    /// The two-compartment example `F(x) = [[-(1 - x2), 0], [1 - x2, -1]]`.
    pub(crate) fn bottleneck() -> StructuredSystem {
        let mut s = StructuredSystem::new(&[1.0, 1.0]).unwrap();
        s.set_flow(1, 0, expr("1 - x")).unwrap();
        s.set_outflow(1, Coefficient::Constant(1.0)).unwrap();
        s
    }

    #[test]
    fn assembly_matches_closed_form() {
        let s = bottleneck();
        let f = s.assemble(0.0, &[0.3, 0.25]).unwrap();
        assert_eq!(f.rows(), vec![vec![-0.75, 0.0], vec![0.75, -1.0]]);
        let q = s.eval(0.0, &[0.3, 0.25]).unwrap();
        assert_eq!(q, f.mul_vec(&[0.3, 0.25]));
    }

    #[test]
    fn description_round_trip() {
        let src = r#"{
            "n": 2, "capacities": [1, 1],
            "f0": ["0", "k"],
            "f": {"2,1": "1 - x"},
            "constants": {"k": 1},
            "declared_lipschitz": {"f": {"2,1": 1.0}}
        }"#;
        let d = SystemDescription::from_json(src).unwrap();
        let s = d.build().unwrap();
        let f = s.assemble(0.0, &[0.3, 0.25]).unwrap();
        assert_eq!(f, bottleneck().assemble(0.0, &[0.3, 0.25]).unwrap());
        assert_eq!(s.declared_lipschitz().get(CoefficientId::Flow(1, 0)), Some(1.0));
        let back: SystemDescription = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn description_errors() {
        let bad_key = r#"{"n": 2, "capacities": [1, 1], "f": {"2,2": "1"}}"#;
        assert!(matches!(SystemDescription::from_json(bad_key).unwrap().build(), Err(Error::Input(_))));
        let unknown = r#"{"n": 1, "capacities": [1], "f0": ["k * x"]}"#;
        assert!(matches!(
            SystemDescription::from_json(unknown).unwrap().build(),
            Err(Error::UnknownIdentifier(_))
        ));
        let short = r#"{"n": 2, "capacities": [1]}"#;
        assert!(SystemDescription::from_json(short).unwrap().build().is_err());
        assert!(SystemDescription::from_json(r#"{"n": 1, "capacities": [1], "x": 1}"#).is_err());
    }

    #[test]
    fn lipschitz_estimates_and_declarations() {
        let mut s = bottleneck();
        let table = s.lipschitz_table(&[0.0]).unwrap();
        let l = table.get(CoefficientId::Flow(1, 0));
        assert!((l - 1.25).abs() < 1e-9, "{l}");
        assert_eq!(table.get(CoefficientId::Outflow(1)), 0.0);
        s.declare_lipschitz(CoefficientId::Flow(1, 0), 1.0).unwrap();
        assert_eq!(s.lipschitz_table(&[0.0]).unwrap().get(CoefficientId::Flow(1, 0)), 1.0);
    }

    #[test]
    fn assumptions_hold_for_bottleneck() {
        let r = bottleneck().check_assumptions(1.0, 1e-12).unwrap();
        assert!(r.passed, "{:?}", r.failures().collect::<Vec<_>>());
        assert!(r.checks.iter().any(|c| c.assumption == "A2"));
    }

    #[test]
    fn inflow_must_vanish_at_capacity() {
        let mut s = bottleneck();
        s.set_inflow(0, expr("0.5 * (1 - x)")).unwrap();
        assert!(s.check_assumptions(0.0, 1e-12).unwrap().passed);
        s.set_inflow(0, Coefficient::Constant(0.5)).unwrap();
        let r = s.check_assumptions(0.0, 1e-12).unwrap();
        let failed: Vec<&str> = r.failures().map(|c| c.assumption).collect();
        assert_eq!(failed, vec!["A2"]);
    }

    #[test]
    fn increasing_flow_violates_a4() {
        let mut s = StructuredSystem::new(&[1.0, 1.0]).unwrap();
        s.set_flow(1, 0, expr("x")).unwrap();
        let r = s.check_assumptions(0.0, 1e-12).unwrap();
        let failed: Vec<&str> = r.failures().map(|c| c.assumption).collect();
        assert!(failed.contains(&"A4"));
        assert!(failed.contains(&"A2"));
    }

    #[test]
    fn type_k_and_nonexpansive() {
        let plan = SamplePlan::new(512, 7);
        let s = bottleneck();
        assert!(check_type_k(&s, &plan, 0.0, 1e-12).unwrap().passed);
        assert!(check_nonexpansive_condition(&s, &plan, 0.0, 1e-12).unwrap().passed);

        // f_21 increasing in x_2 negates A4 and breaks type K.
        let mut bad = StructuredSystem::new(&[1.0, 1.0]).unwrap();
        bad.set_flow(1, 0, expr("x")).unwrap();
        bad.set_flow(0, 1, expr("1 - x")).unwrap();
        let v = check_type_k(&bad, &plan, 0.0, 1e-12).unwrap();
        assert!(!v.passed);
        assert!(v.witness.unwrap().margin < 0.0);
    }

    #[test]
    fn scalar_system_is_type_k_vacuously() {
        let mut s = StructuredSystem::new(&[1.0]).unwrap();
        s.set_outflow(0, Coefficient::Constant(1.0)).unwrap();
        let v = check_type_k(&s, &SamplePlan::new(64, 0), 0.0, 0.0).unwrap();
        assert!(v.passed);
        assert_eq!(v.worst_margin, 0.0);
    }

    #[test]
    fn increasing_inflow_is_expansive() {
        let space = BoxSpace::capacities(&[1.0]).unwrap();
        let sys = FnDynamics::new(space, |_, x, out| {
            out[0] = 1.0 + x[0];
            Ok(())
        });
        let v = check_nonexpansive_condition(&sys, &SamplePlan::new(64, 0), 0.0, 1e-12).unwrap();
        assert!(!v.passed);

        let zero = FnDynamics::new(BoxSpace::capacities(&[1.0, 1.0]).unwrap(), |_, _, out| {
            out.fill(0.0);
            Ok(())
        });
        let v = check_nonexpansive_condition(&zero, &SamplePlan::new(64, 0), 0.0, 0.0).unwrap();
        assert!(v.passed);
        assert_eq!(v.worst_margin, 0.0);
    }

    #[test]
    fn sampled_invariants_and_determinism() {
        let plan = SamplePlan::new(256, 3);
        let s = bottleneck();
        let a = check_compartmental_samples(&s, &plan, 1.0, 1e-12).unwrap();
        assert!(a.passed);
        assert_eq!(a, check_compartmental_samples(&s, &plan, 1.0, 1e-12).unwrap());
        let lin = LinearSystem::new(CompartmentalMatrix::from_rows(&[vec![-1.0]]).unwrap());
        assert!(check_compartmental_samples(&lin, &plan, 1.0, 0.0).is_err());
    }
}
