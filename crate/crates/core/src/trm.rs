//! Traffic Reaction Model: `rho_i' = rho_{i-1} h(rho_i) - rho_i h(rho_{i+1})`
//! on `n` unit-length segments, as a structured compartmental system, plus
//! the state-estimator demonstration.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{check_monotone, BoundExpr, Direction, Expression, MonotonicityVerdict};
use crate::ode::{integrate_many, pairwise_distance, DistanceSeries, IntegrateOptions, Trajectory};
use crate::stability::{certify_ies, IesOptions, IesReport, IesVerdict};
use crate::system::{Coefficient, CoefficientId, StructuredSystem};

/// Tolerance on `h(rho_max) = 0`.
pub const H_ZERO_TOL: f64 = 1e-9;
/// Points per unit of horizon when sampling boundary signals.
const SIGNAL_DENSITY: usize = 100;
const SIGNAL_MIN_SAMPLES: usize = 1001;
const H_GRID: usize = 1025;

/// Measured density series `t,rho`, linearly interpolated and held constant
/// outside its range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub rho: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct SeriesRow {
    t: f64,
    rho: f64,
}

impl TimeSeries {
    pub fn new(t: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if t.is_empty() || t.len() != rho.len() {
            return Err(Error::Input(format!(
                "time series needs matching nonempty columns, got {} times and {} values",
                t.len(),
                rho.len()
            )));
        }
        if t.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Input("time series times must be strictly increasing".into()));
        }
        if t.iter().chain(&rho).any(|v| !v.is_finite()) {
            return Err(Error::Input("time series contains a non-finite value".into()));
        }
        Ok(Self { t, rho })
    }

    /// CSV with header `t,rho`.
    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "rho"] {
            return Err(Error::Input(format!("expected CSV header `t,rho`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
        }
        let (mut t, mut rho) = (Vec::new(), Vec::new());
        for row in rd.deserialize() {
            let row: SeriesRow = row?;
            t.push(row.t);
            rho.push(row.rho);
        }
        Self::new(t, rho)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.t.partition_point(|s| *s <= t);
        if k == 0 {
            return self.rho[0];
        }
        if k == self.t.len() {
            return self.rho[k - 1];
        }
        let (t0, t1) = (self.t[k - 1], self.t[k]);
        let w = (t - t0) / (t1 - t0);
        self.rho[k - 1] + w * (self.rho[k] - self.rho[k - 1])
    }
}

/// Boundary density `rho_0(t)` or `rho_{n+1}(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Signal {
    /// Expression in `t`, evaluated with `c = rho_max`.
    Expr(BoundExpr),
    Series(TimeSeries),
}

impl Signal {
    pub fn constant(value: f64) -> Self {
        Signal::Series(TimeSeries {
            t: vec![0.0],
            rho: vec![value],
        })
    }

    /// Parse an expression in `t` with the given constants.
    pub fn parse(src: &str, constants: &BTreeMap<String, f64>) -> Result<Self> {
        Ok(Signal::Expr(Expression::parse(src)?.bind(constants)?))
    }

    pub fn eval(&self, t: f64, rho_max: f64) -> Result<f64> {
        match self {
            Signal::Expr(e) => Ok(e.eval(t, 0.0, rho_max)?),
            Signal::Series(s) => Ok(s.eval(t)),
        }
    }

    fn label(&self) -> String {
        match self {
            Signal::Expr(e) => e.text().to_string(),
            Signal::Series(s) if s.t.len() == 1 => format!("{:?}", s.rho[0]),
            Signal::Series(s) => format!("series[{} points]", s.t.len()),
        }
    }

    /// Times at which the signal is sampled over `[0, horizon]`, including
    /// every series knot in range.
    fn sample_times(&self, horizon: f64) -> Vec<f64> {
        let m = (SIGNAL_DENSITY as f64 * horizon).ceil() as usize;
        let m = m.max(SIGNAL_MIN_SAMPLES);
        let mut ts: Vec<f64> = if horizon > 0.0 {
            (0..m).map(|k| horizon * k as f64 / (m - 1) as f64).collect()
        } else {
            vec![0.0]
        };
        if let Signal::Series(s) = self {
            ts.extend(s.t.iter().copied().filter(|t| (0.0..=horizon).contains(t)));
        }
        ts
    }

    /// `(min, max)` at samples over `[0, horizon]`.
    pub fn range(&self, horizon: f64, rho_max: f64) -> Result<(f64, f64)> {
        let mut r = (f64::INFINITY, f64::NEG_INFINITY);
        for t in self.sample_times(horizon) {
            let v = self.eval(t, rho_max)?;
            r = (r.0.min(v), r.1.max(v));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrmConfig {
    /// Number of interior segments (length 1 each).
    pub n: usize,
    pub rho_max: f64,
    /// Speed factor `h(x)`; `c` and the constant `rho_max` both denote the capacity.
    pub h: Expression,
    pub constants: BTreeMap<String, f64>,
    pub boundary_in: Signal,
    pub boundary_out: Signal,
    /// Declared Lipschitz constant of `h`; estimated by sampling when absent.
    pub h_lipschitz: Option<f64>,
    /// Time range over which time-varying boundaries are sampled.
    pub horizon: f64,
}

impl TrmConfig {
    /// `h(z) = vf (1 - z / rho_max)` with constant boundary densities.
    pub fn greenshields(n: usize, rho_max: f64, vf: f64, rho_in: f64, rho_out: f64) -> Result<Self> {
        Ok(Self {
            n,
            rho_max,
            h: Expression::parse("vf * (1 - x / rho_max)")?,
            constants: BTreeMap::from([("vf".to_string(), vf)]),
            boundary_in: Signal::constant(rho_in),
            boundary_out: Signal::constant(rho_out),
            h_lipschitz: Some(vf / rho_max),
            horizon: 0.0,
        })
    }

    /// User constants plus `rho_max`.
    pub fn resolved_constants(&self) -> BTreeMap<String, f64> {
        let mut c = self.constants.clone();
        c.insert("rho_max".into(), self.rho_max);
        c
    }

    pub fn bound_h(&self) -> Result<BoundExpr> {
        self.h.bind(&self.resolved_constants())
    }

    /// Invariants: `h >= 0`, nonincreasing, `h(rho_max) = 0`, boundaries in
    /// `[0, rho_max]`, all at samples.
    pub fn validate(&self) -> Result<BoundExpr> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("need at least one segment".into()));
        }
        if !(self.rho_max > 0.0 && self.rho_max.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho_max = {} must be positive", self.rho_max)));
        }
        let h = self.bound_h()?;
        let rm = self.rho_max;
        let at_max = h.eval(0.0, rm, rm)?;
        if at_max.abs() > H_ZERO_TOL {
            return Err(Error::InvalidParameter(format!("h(rho_max) = {at_max}, expected 0")));
        }
        match check_monotone(|z| Ok(h.eval(0.0, z, rm)?), 0.0, rm, Direction::Nonincreasing, H_GRID, 1e-12)? {
            MonotonicityVerdict::PassedAtSamples { .. } => {}
            MonotonicityVerdict::Violated { x1, x2, f1, f2 } => {
                return Err(Error::InvalidParameter(format!(
                    "h is not nonincreasing: h({x1}) = {f1} < h({x2}) = {f2}"
                )))
            }
        }
        // Nonincreasing with h(rho_max) = 0 already gives h >= 0 up to rounding.
        for (name, s) in [("rho_0", &self.boundary_in), ("rho_n+1", &self.boundary_out)] {
            let (lo, hi) = s.range(self.horizon, rm)?;
            if lo < 0.0 || hi > rm {
                return Err(Error::InvalidParameter(format!(
                    "boundary {name} takes values in [{lo}, {hi}], outside [0, {rm}]"
                )));
            }
        }
        Ok(h)
    }
}

/// The structured system of a TRM configuration. Compartment `i` is segment
/// `i`; `g = x`, `f_{i,i-1} = h(x_i)`, `f_0n = h(rho_{n+1}(t))` and
/// `I_1 = rho_0(t) h(x_1)`.
pub fn build_trm(cfg: &TrmConfig) -> Result<StructuredSystem> {
    let h = cfg.validate()?;
    let n = cfg.n;
    let rm = cfg.rho_max;
    let mut sys = StructuredSystem::new(&vec![rm; n])?;
    for i in 1..n {
        sys.set_flow(i, i - 1, Coefficient::Expr(h.clone()))?;
    }
    let h = Arc::new(h);
    let out = Arc::new(cfg.boundary_out.clone());
    {
        let (h, out) = (h.clone(), out.clone());
        sys.set_outflow(
            n - 1,
            Coefficient::native(format!("h({})", out.label()), move |t, _| {
                Ok(h.eval(t, out.eval(t, rm)?, rm)?)
            }),
        )?;
    }
    let inflow = Arc::new(cfg.boundary_in.clone());
    {
        let (h, inflow) = (h.clone(), inflow.clone());
        sys.set_inflow(
            0,
            Coefficient::native(format!("({}) * h(x)", inflow.label()), move |t, x| {
                Ok(inflow.eval(t, rm)? * h.eval(t, x, rm)?)
            }),
        )?;
    }
    if let Some(l) = cfg.h_lipschitz {
        for i in 1..n {
            sys.declare_lipschitz(CoefficientId::Flow(i, i - 1), l)?;
        }
        let (_, sup_in) = cfg.boundary_in.range(cfg.horizon, rm)?;
        sys.declare_lipschitz(CoefficientId::Inflow(0), sup_in * l)?;
        sys.declare_lipschitz(CoefficientId::Outflow(n - 1), 0.0)?;
    }
    Ok(sys)
}

/// Sampled check of `rho_{n+1}(t) <= rho_max - epsilon` and `h > 0` on `[0, rho_max)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IesConditions {
    pub passed: bool,
    pub epsilon: f64,
    pub boundary_ok: bool,
    pub max_boundary_out: f64,
    pub h_positive: bool,
    /// `h(rho_max - epsilon)`, the lower bound of the last outflow coefficient.
    pub a_n: Option<f64>,
    pub detail: Vec<String>,
}

pub fn check_ies_conditions(cfg: &TrmConfig, epsilon: f64) -> Result<IesConditions> {
    let h = cfg.bound_h()?;
    let rm = cfg.rho_max;
    let (_, max_out) = cfg.boundary_out.range(cfg.horizon, rm)?;
    let mut detail = Vec::new();
    let boundary_ok = epsilon > 0.0 && max_out <= rm - epsilon;
    if !boundary_ok {
        detail.push(format!(
            "rho_n+1 reaches {max_out}, above rho_max - epsilon = {}",
            rm - epsilon
        ));
    }
    let mut h_positive = true;
    for k in 0..H_GRID - 1 {
        let z = rm * k as f64 / (H_GRID - 1) as f64;
        let v = h.eval(0.0, z, rm)?;
        if !(v > 0.0) {
            h_positive = false;
            detail.push(format!("h({z}) = {v} is not positive"));
            break;
        }
    }
    let passed = boundary_ok && h_positive;
    let a_n = if passed { Some(h.eval(0.0, rm - epsilon, rm)?) } else { None };
    Ok(IesConditions {
        passed,
        epsilon,
        boundary_ok,
        max_boundary_out: max_out,
        h_positive,
        a_n,
        detail,
    })
}

/// Largest admissible `epsilon = rho_max - max rho_{n+1}` at samples.
pub fn max_epsilon(cfg: &TrmConfig) -> Result<f64> {
    Ok(cfg.rho_max - cfg.boundary_out.range(cfg.horizon, cfg.rho_max)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOptions {
    pub truth_seed: u64,
    /// Initial estimate; all zeros when absent.
    pub estimate_init: Option<Vec<f64>>,
    pub horizon: f64,
    pub integrate: IntegrateOptions,
    pub ies: IesOptions,
    /// Skip certification and only simulate.
    pub certify: bool,
    /// Margin in `rho_{n+1} <= rho_max - epsilon`; the largest admissible when absent.
    pub epsilon: Option<f64>,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            truth_seed: 0,
            estimate_init: None,
            horizon: 100.0,
            integrate: IntegrateOptions::default(),
            ies: IesOptions::default(),
            certify: true,
            epsilon: None,
        }
    }
}

/// Certified decay `gamma e^{-lambda t}` of the estimation error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CertifiedRate {
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl CertifiedRate {
    pub fn envelope(&self, t: f64, initial: f64) -> f64 {
        self.gamma * (-self.lambda * t).exp() * initial
    }

    /// Time after which the envelope is below `ratio` times the initial error.
    pub fn time_bound(&self, ratio: f64) -> f64 {
        (self.gamma / ratio).ln() / self.lambda
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorRun {
    pub truth_seed: u64,
    pub truth_init: Vec<f64>,
    pub estimate_init: Vec<f64>,
    #[serde(skip)]
    pub truth: Trajectory,
    #[serde(skip)]
    pub estimate: Trajectory,
    /// `|xhat(t) - x(t)|_1` on the truth grid.
    pub error: DistanceSeries,
    pub conditions: IesConditions,
    pub certified: Option<CertifiedRate>,
    #[serde(skip)]
    pub ies: Option<IesReport>,
    /// Envelope on the error grid, when certified.
    pub envelope: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl EstimatorRun {
    pub fn initial_error(&self) -> f64 {
        self.error.values.first().copied().unwrap_or(0.0)
    }

    /// First grid time with error below `ratio` times the initial error.
    pub fn crossing_time(&self, ratio: f64) -> Option<f64> {
        let target = ratio * self.initial_error();
        self.error
            .times
            .iter()
            .zip(&self.error.values)
            .find(|(_, v)| **v < target)
            .map(|(t, _)| *t)
    }

    /// `t,error[,envelope]` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        if self.envelope.is_some() {
            wr.write_record(["t", "error", "envelope"])?;
        } else {
            wr.write_record(["t", "error"])?;
        }
        for (k, (t, e)) in self.error.times.iter().zip(&self.error.values).enumerate() {
            let mut rec = vec![t.to_string(), e.to_string()];
            if let Some(env) = &self.envelope {
                rec.push(env[k].to_string());
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Simulate the truth from a seeded random state and the estimate from
/// `estimate_init`, both driven by the same boundary signals, and overlay the
/// certified envelope when certification succeeds.
pub fn run_estimator(cfg: &TrmConfig, opts: &EstimatorOptions) -> Result<EstimatorRun> {
    let sys = build_trm(cfg)?;
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.truth_seed);
    let truth_init: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * cfg.rho_max).collect();
    let estimate_init = opts.estimate_init.clone().unwrap_or_else(|| vec![0.0; n]);
    if estimate_init.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: estimate_init.len(),
        });
    }
    let eps = match opts.epsilon {
        Some(e) => e,
        None => max_epsilon(cfg)?,
    };
    let conditions = check_ies_conditions(cfg, eps)?;
    let mut warnings = Vec::new();
    let mut certified = None;
    let mut ies = None;
    if !conditions.passed {
        warnings.push(format!(
            "IES conditions fail ({}); convergence is not certified",
            conditions.detail.join("; ")
        ));
    } else if opts.certify {
        let rep = certify_ies(&sys, &opts.ies)?;
        if rep.verdict == IesVerdict::CertifiedIes {
            certified = Some(CertifiedRate {
                lambda: rep.lambda.unwrap_or(0.0),
                gamma: rep.gamma.unwrap_or(f64::INFINITY),
                tau: rep.tau,
            });
        } else {
            warnings.push(format!(
                "certification {:?} at stage {}: {}",
                rep.verdict,
                rep.stage.unwrap_or("-"),
                rep.reason.clone().unwrap_or_default()
            ));
        }
        ies = Some(rep);
    }
    let mut runs = integrate_many(
        &sys,
        &[truth_init.clone(), estimate_init.clone()],
        0.0,
        opts.horizon,
        &opts.integrate,
    )?;
    let estimate = runs.pop().expect("two runs");
    let truth = runs.pop().expect("two runs");
    let error = pairwise_distance(&truth, &estimate)?;
    let initial = error.values.first().copied().unwrap_or(0.0);
    let envelope = certified.map(|c| error.times.iter().map(|t| c.envelope(*t, initial)).collect());
    Ok(EstimatorRun {
        truth_seed: opts.truth_seed,
        truth_init,
        estimate_init,
        truth,
        estimate,
        error,
        conditions,
        certified,
        ies,
        envelope,
        warnings,
    })
}
