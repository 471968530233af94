//! Integration of [`Dynamics`] on their box, plus trajectory measurements:
//! decay fits, pairwise distances and ordering checks.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::Dynamics;

/// Largest default step.
pub const DEFAULT_MAX_STEP: f64 = 0.01;
pub const DEFAULT_PROJ_TOL: f64 = 1e-9;
pub const DEFAULT_MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    /// Classical fixed-step Runge-Kutta of order 4.
    Rk4,
    /// Dormand-Prince 5(4) with error control.
    Dopri5 { rtol: f64, atol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub method: Method,
    /// Fixed step (RK4) or initial step (DOPRI5). `None` picks
    /// `min(0.01, 0.1 / L)` with `L` a sampled Lipschitz estimate of the rhs.
    pub step: Option<f64>,
    /// Exits from the box up to this distance are projected back.
    pub proj_tol: f64,
    /// Halving below this step is an underflow error.
    pub min_step: f64,
    /// Keep every k-th grid point (the final point is always kept).
    pub record_every: usize,
    /// Substeps allowed inside one nominal step before giving up with
    /// [`Error::StepUnderflow`]. Bounds the work when the field points out of
    /// the box and every halved step still exits.
    pub max_substeps: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            step: None,
            proj_tol: DEFAULT_PROJ_TOL,
            min_step: DEFAULT_MIN_STEP,
            record_every: 1,
            max_substeps: 1024,
        }
    }
}

impl IntegrateOptions {
    pub fn rk4(step: f64) -> Self {
        Self {
            step: Some(step),
            ..Self::default()
        }
    }
}

/// A component moved back onto the box. Component is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionEvent {
    pub t: f64,
    #[serde(with = "crate::one_based::index")]
    pub component: usize,
    pub from: f64,
    pub to: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub method: Method,
    pub step: f64,
    pub proj_tol: f64,
    pub projections: Vec<ProjectionEvent>,
    /// Total `|from - to|` over all projections.
    pub projected_mass: f64,
    pub halvings: usize,
    pub rejected: usize,
}

impl TrajectoryMeta {
    fn new(opts: &IntegrateOptions, step: f64) -> Self {
        Self {
            method: opts.method,
            step,
            proj_tol: opts.proj_tol,
            projections: Vec::new(),
            projected_mass: 0.0,
            halvings: 0,
            rejected: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    /// Right-hand side at each stored point, for Hermite interpolation.
    derivs: Option<Vec<Vec<f64>>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    /// Trajectory from raw samples; interpolation is then linear.
    pub fn from_samples(times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != states.len() {
            return Err(Error::Input("need as many states as times, at least one".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input("times must be strictly increasing".into()));
        }
        let n = states[0].len();
        if let Some(s) = states.iter().find(|s| s.len() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: s.len() });
        }
        Ok(Self {
            times,
            states,
            derivs: None,
            meta: TrajectoryMeta::new(&IntegrateOptions::default(), 0.0),
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn first(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("nonempty trajectory")
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("nonempty trajectory")
    }

    /// Series of `sum_i w_i x_i(t)`.
    pub fn weighted_sum(&self, w: &[f64]) -> Vec<f64> {
        self.states
            .iter()
            .map(|x| x.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Cubic Hermite interpolation (linear for raw samples), clamped to the
    /// stored time range.
    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        let k = match self.times.partition_point(|&s| s <= t) {
            0 => return self.states[0].clone(),
            k if k >= self.times.len() => return self.last().to_vec(),
            k => k - 1,
        };
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (x0, x1) = (&self.states[k], &self.states[k + 1]);
        match &self.derivs {
            None => x0.iter().zip(x1).map(|(a, b)| a + s * (b - a)).collect(),
            Some(d) => {
                let (d0, d1) = (&d[k], &d[k + 1]);
                let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
                let h10 = s * (1.0 - s) * (1.0 - s);
                let h01 = s * s * (3.0 - 2.0 * s);
                let h11 = s * s * (s - 1.0);
                (0..x0.len())
                    .map(|i| h00 * x0[i] + h10 * h * d0[i] + h01 * x1[i] + h11 * h * d1[i])
                    .collect()
            }
        }
    }

    /// CSV with header `t,x1,...,xn`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("x{i}")));
        wr.write_record(&header)?;
        for (t, x) in self.times.iter().zip(&self.states) {
            let mut rec = vec![t.to_string()];
            rec.extend(x.iter().map(f64::to_string));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Sampled 1-norm Lipschitz estimate of the rhs near `t0`, times 1.25.
pub fn estimate_rhs_lipschitz(sys: &dyn Dynamics, t0: f64) -> Result<f64> {
    let space = sys.space();
    let n = sys.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x11b5);
    let width: Vec<f64> = (0..n)
        .map(|i| {
            let w = space.upper[i] - space.lower[i];
            if w.is_finite() { w } else { 1.0 }
        })
        .collect();
    let mut best: f64 = 0.0;
    for _ in 0..32 {
        let x: Vec<f64> = (0..n).map(|i| space.lower[i] + rng.random::<f64>() * width[i]).collect();
        let dir: Vec<f64> = (0..n).map(|i| (rng.random::<f64>() - 0.5) * width[i]).collect();
        let norm: f64 = dir.iter().map(|d| d.abs()).sum();
        if norm == 0.0 {
            continue;
        }
        let eps = 1e-6;
        let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + eps * d / norm).collect();
        let qx = sys.eval(t0, &x)?;
        let qy = sys.eval(t0, &y)?;
        let dq: f64 = qx.iter().zip(&qy).map(|(a, b)| (a - b).abs()).sum();
        let dx: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
        if dx > 0.0 {
            best = best.max(dq / dx);
        }
    }
    Ok(best * 1.25)
}

/// Default step `min(0.01, 0.1 / L)`.
pub fn default_step(sys: &dyn Dynamics, t0: f64) -> Result<f64> {
    let l = estimate_rhs_lipschitz(sys, t0)?;
    Ok(if l > 0.0 { DEFAULT_MAX_STEP.min(0.1 / l) } else { DEFAULT_MAX_STEP })
}

struct Stepper<'a> {
    sys: &'a dyn Dynamics,
    opts: &'a IntegrateOptions,
    meta: TrajectoryMeta,
    substeps: usize,
}

impl Stepper<'_> {
    fn f(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let q = self.sys.eval(t, x)?;
        if let Some(i) = q.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t, component: i + 1 });
        }
        Ok(q)
    }

    /// First component leaving the box by more than `proj_tol`.
    fn escape(&self, y: &[f64]) -> Option<(usize, f64)> {
        let space = self.sys.space();
        let tol = self.opts.proj_tol;
        y.iter()
            .enumerate()
            .find(|(i, v)| !(**v >= space.lower[*i] - tol && **v <= space.upper[*i] + tol))
            .map(|(i, v)| (i, *v))
    }

    fn project(&mut self, t: f64, y: &mut [f64]) {
        let space = self.sys.space();
        for (i, v) in y.iter_mut().enumerate() {
            let p = v.clamp(space.lower[i], space.upper[i]);
            if p != *v {
                self.meta.projected_mass += (p - *v).abs();
                self.meta.projections.push(ProjectionEvent {
                    t,
                    component: i,
                    from: *v,
                    to: p,
                });
                *v = p;
            }
        }
    }

    fn rk4_raw(&self, t: f64, x: &[f64], k1: &[f64], h: f64) -> Result<Vec<f64>> {
        let n = x.len();
        let stage = |k: &[f64], c: f64| -> Vec<f64> { (0..n).map(|i| x[i] + c * h * k[i]).collect() };
        let k2 = self.f(t + 0.5 * h, &stage(k1, 0.5))?;
        let k3 = self.f(t + 0.5 * h, &stage(&k2, 0.5))?;
        let k4 = self.f(t + h, &stage(&k3, 1.0))?;
        Ok((0..n)
            .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect())
    }

    /// One RK4 step of size `h`, halved recursively while the result leaves the box.
    fn rk4_step(&mut self, t: f64, x: &[f64], k1: &[f64], h: f64) -> Result<Vec<f64>> {
        let mut y = self.rk4_raw(t, x, k1, h)?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: t + h, component: i + 1 });
        }
        if let Some((i, v)) = self.escape(&y) {
            let half = 0.5 * h;
            self.substeps += 2;
            if half < self.opts.min_step || self.substeps > self.opts.max_substeps {
                return Err(Error::StepUnderflow {
                    t,
                    component: i + 1,
                    value: v,
                });
            }
            self.meta.halvings += 1;
            let mid = self.rk4_step(t, x, k1, half)?;
            let k1_mid = self.f(t + half, &mid)?;
            return self.rk4_step(t + half, &mid, &k1_mid, half);
        }
        self.project(t + h, &mut y);
        Ok(y)
    }
}

/// Integrate from `xi` at `t0` to `t1`.
pub fn integrate(sys: &dyn Dynamics, xi: &[f64], t0: f64, t1: f64, opts: &IntegrateOptions) -> Result<Trajectory> {
    let n = sys.dim();
    if xi.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: xi.len() });
    }
    if !(t1 > t0) {
        return Err(Error::InvalidParameter(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    if !sys.space().contains(xi, 0.0) {
        return Err(Error::InvalidParameter(format!("initial state {xi:?} is outside the box")));
    }
    if opts.record_every == 0 {
        return Err(Error::InvalidParameter("record_every must be >= 1".into()));
    }
    let step = match opts.step {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::InvalidParameter(format!("step {h} must be positive"))),
        None => default_step(sys, t0)?,
    };
    match opts.method {
        Method::Rk4 => integrate_rk4(sys, xi, t0, t1, step, opts),
        Method::Dopri5 { rtol, atol } => integrate_dopri5(sys, xi, t0, t1, step, rtol, atol, opts),
    }
}

fn integrate_rk4(
    sys: &dyn Dynamics,
    xi: &[f64],
    t0: f64,
    t1: f64,
    step: f64,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    let steps = ((t1 - t0) / step).ceil().max(1.0) as usize;
    let h = (t1 - t0) / steps as f64;
    let mut st = Stepper {
        sys,
        opts,
        meta: TrajectoryMeta::new(opts, h),
        substeps: 0,
    };
    let cap = steps / opts.record_every + 2;
    let mut times = Vec::with_capacity(cap);
    let mut states = Vec::with_capacity(cap);
    let mut derivs = Vec::with_capacity(cap);
    let mut x = xi.to_vec();
    let mut k1 = st.f(t0, &x)?;
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        if k % opts.record_every == 0 {
            times.push(t);
            states.push(x.clone());
            derivs.push(k1.clone());
        }
        st.substeps = 1;
        x = st.rk4_step(t, &x, &k1, h)?;
        let t_next = if k + 1 == steps { t1 } else { t0 + (k + 1) as f64 * h };
        k1 = st.f(t_next, &x)?;
    }
    times.push(t1);
    states.push(x);
    derivs.push(k1);
    Ok(Trajectory {
        times,
        states,
        derivs: Some(derivs),
        meta: st.meta,
    })
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[allow(clippy::too_many_arguments)]
fn integrate_dopri5(
    sys: &dyn Dynamics,
    xi: &[f64],
    t0: f64,
    t1: f64,
    step: f64,
    rtol: f64,
    atol: f64,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    if !(rtol > 0.0 && atol > 0.0) {
        return Err(Error::InvalidParameter("DOPRI5 tolerances must be positive".into()));
    }
    let n = xi.len();
    let mut st = Stepper {
        sys,
        opts,
        meta: TrajectoryMeta::new(opts, step),
        substeps: 0,
    };
    let mut t = t0;
    let mut x = xi.to_vec();
    let mut k1 = st.f(t, &x)?;
    let mut times = vec![t];
    let mut states = vec![x.clone()];
    let mut derivs = vec![k1.clone()];
    let mut h = step.min(t1 - t0);
    let mut accepted = 0usize;
    while t < t1 {
        if t + h > t1 {
            h = t1 - t;
        }
        if h < opts.min_step {
            let (i, v) = st.escape(&x).unwrap_or((0, x[0]));
            return Err(Error::StepUnderflow { t, component: i + 1, value: v });
        }
        let mut k = vec![k1.clone()];
        for s in 1..7 {
            let xs: Vec<f64> = (0..n)
                .map(|i| x[i] + h * (0..s).map(|j| DP_A[s][j] * k[j][i]).sum::<f64>())
                .collect();
            k.push(st.f(t + DP_C[s] * h, &xs)?);
        }
        let y: Vec<f64> = (0..n)
            .map(|i| x[i] + h * (0..7).map(|j| DP_B[j] * k[j][i]).sum::<f64>())
            .collect();
        let err = (0..n)
            .map(|i| {
                let e = h * (0..7).map(|j| DP_E[j] * k[j][i]).sum::<f64>();
                let sc = atol + rtol * x[i].abs().max(y[i].abs());
                (e / sc).powi(2)
            })
            .sum::<f64>()
            / n as f64;
        let err = err.sqrt();
        if !err.is_finite() {
            return Err(Error::NonFiniteState { t: t + h, component: 1 });
        }
        if err > 1.0 {
            st.meta.rejected += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            continue;
        }
        if st.escape(&y).is_some() {
            st.meta.halvings += 1;
            h *= 0.5;
            continue;
        }
        let mut y = y;
        t = if t1 - (t + h) < 1e-14 * t1.abs().max(1.0) { t1 } else { t + h };
        st.project(t, &mut y);
        x = y;
        k1 = st.f(t, &x)?;
        accepted += 1;
        if accepted % opts.record_every == 0 || t == t1 {
            times.push(t);
            states.push(x.clone());
            derivs.push(k1.clone());
        }
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= fac;
    }
    Ok(Trajectory {
        times,
        states,
        derivs: Some(derivs),
        meta: st.meta,
    })
}

/// Integrate several initial states concurrently; results keep input order.
pub fn integrate_many(
    sys: &dyn Dynamics,
    inits: &[Vec<f64>],
    t0: f64,
    t1: f64,
    opts: &IntegrateOptions,
) -> Result<Vec<Trajectory>> {
    inits.par_iter().map(|xi| integrate(sys, xi, t0, t1, opts)).collect()
}

/// Log-linear fit `m(t) ~ gamma_hat * exp(-lambda_hat (t - t0)) * m(t0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub gamma_hat: f64,
    pub lambda_hat: f64,
    /// Root mean square of the log residuals.
    pub residual: f64,
    pub window: (f64, f64),
    pub points: usize,
    /// The measure reached exactly zero; the fit uses the prefix before it.
    pub exact_zero: bool,
    /// No fit was possible (zero initial measure or too few points).
    pub degenerate: bool,
}

/// Fit the decay of `sum_i v_i x_i(t)`; `v` defaults to all ones. The window
/// defaults to `[t0 + 0.2 T, t0 + T]` with `T` the trajectory length.
pub fn measure_norm_decay(traj: &Trajectory, weights: Option<&[f64]>, window: Option<(f64, f64)>) -> Result<DecayFit> {
    let n = traj.dim();
    let ones = vec![1.0; n];
    let v = weights.unwrap_or(&ones);
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: v.len() });
    }
    let t0 = traj.t0();
    let span = traj.t_end() - t0;
    let (w0, w1) = window.unwrap_or((t0 + 0.2 * span, t0 + span));
    let m = traj.weighted_sum(v);
    let degenerate = |exact_zero| DecayFit {
        gamma_hat: 0.0,
        lambda_hat: 0.0,
        residual: 0.0,
        window: (w0, w1),
        points: 0,
        exact_zero,
        degenerate: true,
    };
    if m[0] <= 0.0 {
        return Ok(degenerate(m[0] == 0.0));
    }
    let zero_at = m.iter().position(|&y| y <= 0.0);
    let prefix = zero_at.unwrap_or(m.len());
    let times = &traj.times()[..prefix];
    let mut idx: Vec<usize> = (0..prefix).filter(|&k| times[k] >= w0 && times[k] <= w1).collect();
    if idx.len() < 2 {
        idx = (0..prefix).collect();
    }
    if idx.len() < 2 {
        return Ok(degenerate(zero_at.is_some()));
    }
    let xs: Vec<f64> = idx.iter().map(|&k| times[k] - t0).collect();
    let ys: Vec<f64> = idx.iter().map(|&k| m[k].ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / k)
        .sqrt();
    Ok(DecayFit {
        gamma_hat: (intercept - m[0].ln()).exp(),
        lambda_hat: -slope,
        residual,
        window: (xs[0] + t0, xs[xs.len() - 1] + t0),
        points: xs.len(),
        exact_zero: zero_at.is_some(),
        degenerate: false,
    })
}

/// `|x^1(t) - x^2(t)|_1` on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl DistanceSeries {
    /// Largest increase between consecutive points and where it starts.
    pub fn max_increase(&self) -> (f64, Option<f64>) {
        let mut worst = (0.0, None);
        for k in 1..self.values.len() {
            let d = self.values[k] - self.values[k - 1];
            if d > worst.0 {
                worst = (d, Some(self.times[k - 1]));
            }
        }
        worst
    }

    pub fn is_nonincreasing(&self, slack: f64) -> bool {
        self.max_increase().0 <= slack
    }

    /// Two whitespace-separated columns with a comment header.
    pub fn write_gnuplot<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# t distance")?;
        for (t, d) in self.times.iter().zip(&self.values) {
            writeln!(w, "{t} {d}")?;
        }
        Ok(())
    }
}

/// Distances on the grid of `a`; `b` is interpolated when the grids differ.
pub fn pairwise_distance(a: &Trajectory, b: &Trajectory) -> Result<DistanceSeries> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let same_grid = a.times() == b.times();
    let values = a
        .times()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let xb = if same_grid { b.state(k).to_vec() } else { b.interpolate(t) };
            a.state(k).iter().zip(&xb).map(|(p, q)| (p - q).abs()).sum()
        })
        .collect();
    Ok(DistanceSeries {
        times: a.times().to_vec(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingVerdict {
    pub passed: bool,
    /// `min_{t, i} (b_i(t) - a_i(t))`.
    pub worst_margin: f64,
    pub witness_time: Option<f64>,
    #[serde(with = "crate::one_based::opt_index")]
    pub component: Option<usize>,
}

/// Does `a(t) <= b(t) + tol` hold componentwise at every grid point of `a`?
pub fn check_ordering(a: &Trajectory, b: &Trajectory, tol: f64) -> Result<OrderingVerdict> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let same_grid = a.times() == b.times();
    let mut worst = (f64::INFINITY, None, None);
    for (k, &t) in a.times().iter().enumerate() {
        let xb = if same_grid { b.state(k).to_vec() } else { b.interpolate(t) };
        for (i, (p, q)) in a.state(k).iter().zip(&xb).enumerate() {
            if q - p < worst.0 {
                worst = (q - p, Some(t), Some(i));
            }
        }
    }
    let passed = worst.0 >= -tol;
    Ok(OrderingVerdict {
        passed,
        worst_margin: worst.0,
        witness_time: if passed { None } else { worst.1 },
        component: if passed { None } else { worst.2 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::CompartmentalMatrix;
    use crate::system::{BoxSpace, FnDynamics, LinearSystem};

    fn f1_system() -> LinearSystem {
        LinearSystem::new(CompartmentalMatrix::from_rows(&[vec![-1.0, 0.0], vec![1.0, -1.0]]).unwrap())
    }

    /// Closed form for `F^1` from `(a, b)`: `q1 = a e^-t`, `q2 = (b + a t) e^-t`.
    fn f1_exact(a: f64, b: f64, t: f64) -> [f64; 2] {
        [a * (-t).exp(), (b + a * t) * (-t).exp()]
    }

    fn err_at_one(h: f64) -> f64 {
        let tr = integrate(&f1_system(), &[1.0, 1.0], 0.0, 1.0, &IntegrateOptions::rk4(h)).unwrap();
        let e = f1_exact(1.0, 1.0, 1.0);
        (tr.last()[0] - e[0]).abs() + (tr.last()[1] - e[1]).abs()
    }

    #[test]
    fn rk4_matches_closed_form() {
        assert!(err_at_one(1e-3) < 1e-6);
        let ratio = err_at_one(0.1) / err_at_one(0.05);
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn dopri5_matches_closed_form() {
        let opts = IntegrateOptions {
            method: Method::Dopri5 { rtol: 1e-10, atol: 1e-12 },
            step: Some(0.1),
            ..Default::default()
        };
        let tr = integrate(&f1_system(), &[1.0, 1.0], 0.0, 2.0, &opts).unwrap();
        let e = f1_exact(1.0, 1.0, 2.0);
        assert_eq!(tr.t_end(), 2.0);
        assert!((tr.last()[0] - e[0]).abs() < 1e-8 && (tr.last()[1] - e[1]).abs() < 1e-8);
    }

    #[test]
    fn hermite_output_is_accurate_between_grid_points() {
        let tr = integrate(&f1_system(), &[1.0, 1.0], 0.0, 1.0, &IntegrateOptions::rk4(0.01)).unwrap();
        let x = tr.interpolate(0.505);
        let e = f1_exact(1.0, 1.0, 0.505);
        assert!((x[0] - e[0]).abs() < 1e-8 && (x[1] - e[1]).abs() < 1e-8);
        assert_eq!(tr.interpolate(-1.0), tr.first());
        assert_eq!(tr.interpolate(9.0), tr.last());
    }

    #[test]
    fn zero_dynamics_is_constant() {
        let sys = FnDynamics::new(BoxSpace::capacities(&[1.0, 1.0]).unwrap(), |_, _, out| {
            out.fill(0.0);
            Ok(())
        });
        let tr = integrate(&sys, &[0.3, 0.7], 0.0, 1.0, &IntegrateOptions::default()).unwrap();
        assert!(tr.states().iter().all(|x| x == &vec![0.3, 0.7]));
        assert_eq!(tr.meta.step, DEFAULT_MAX_STEP);
    }

    #[test]
    fn small_exits_are_projected_and_large_ones_underflow() {
        // x' = -1 on [0, 1] leaves the box at the bottom.
        let space = BoxSpace::capacities(&[1.0]).unwrap();
        let sys = FnDynamics::new(space.clone(), |_, _, out| {
            out[0] = -1.0;
            Ok(())
        });
        match integrate(&sys, &[0.5], 0.0, 1.0, &IntegrateOptions::rk4(0.01)) {
            Err(Error::StepUnderflow { component, .. }) => assert_eq!(component, 1),
            other => panic!("unexpected {other:?}"),
        }
        // x' = -x - 1e-10 drifts just below zero late in the run: projected.
        let sys = FnDynamics::new(space, |_, x, out| {
            out[0] = -10.0 * x[0] - 1e-11;
            Ok(())
        });
        let tr = integrate(&sys, &[1.0], 0.0, 5.0, &IntegrateOptions::rk4(0.01)).unwrap();
        assert!(!tr.meta.projections.is_empty());
        assert!(tr.states().iter().all(|x| x[0] >= 0.0));
        assert!(tr.meta.projected_mass < 1e-6 * 5.0);
    }

    #[test]
    fn decay_fit_of_synthetic_exponential() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.05).collect();
        let states = times.iter().map(|t| vec![3.0 * (-2.0 * t).exp()]).collect();
        let tr = Trajectory::from_samples(times, states).unwrap();
        let fit = measure_norm_decay(&tr, None, None).unwrap();
        assert!((fit.lambda_hat - 2.0).abs() < 1e-6, "{fit:?}");
        assert!((fit.gamma_hat - 1.0).abs() < 1e-6);
        assert!(!fit.degenerate && !fit.exact_zero);
    }

    #[test]
    fn decay_fit_edge_cases() {
        let tr = Trajectory::from_samples(vec![0.0, 1.0], vec![vec![0.0], vec![0.0]]).unwrap();
        let fit = measure_norm_decay(&tr, None, None).unwrap();
        assert!(fit.degenerate && fit.exact_zero);
        assert_eq!(fit.lambda_hat, 0.0);

        let times: Vec<f64> = (0..=10).map(f64::from).collect();
        let states = times
            .iter()
            .map(|&t| vec![if t < 6.0 { (-t).exp() } else { 0.0 }])
            .collect();
        let fit = measure_norm_decay(&Trajectory::from_samples(times, states).unwrap(), None, None).unwrap();
        assert!(fit.exact_zero && !fit.degenerate);
        assert!((fit.lambda_hat - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weighted_decay_of_f1() {
        let tr = integrate(&f1_system(), &[1.0, 1.0], 0.0, 10.0, &IntegrateOptions::rk4(0.01)).unwrap();
        let fit = measure_norm_decay(&tr, Some(&[2.0, 1.0]), None).unwrap();
        assert!(fit.lambda_hat >= 0.45, "{fit:?}");
    }

    #[test]
    fn distances_and_ordering() {
        let sys = f1_system();
        let opts = IntegrateOptions::rk4(0.01);
        let a = integrate(&sys, &[1.0, 0.0], 0.0, 2.0, &opts).unwrap();
        let b = integrate(&sys, &[0.0, 1.0], 0.0, 2.0, &opts).unwrap();
        let d = pairwise_distance(&a, &b).unwrap();
        for (t, v) in d.times.iter().zip(&d.values) {
            let (p, q) = (f1_exact(1.0, 0.0, *t), f1_exact(0.0, 1.0, *t));
            let exact = (p[0] - q[0]).abs() + (p[1] - q[1]).abs();
            assert!((v - exact).abs() < 1e-9);
        }
        let same = pairwise_distance(&a, &a).unwrap();
        assert!(same.values.iter().all(|&v| v == 0.0));
        assert!(check_ordering(&a, &a, 0.0).unwrap().passed);

        let lo = integrate(&sys, &[0.2, 0.1], 0.0, 2.0, &opts).unwrap();
        let hi = integrate(&sys, &[0.4, 0.3], 0.0, 2.0, &opts).unwrap();
        assert!(check_ordering(&lo, &hi, 1e-12).unwrap().passed);

        let mut out = Vec::new();
        d.write_gnuplot(&mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("# t distance\n0 2\n"));
    }

    #[test]
    fn sign_flipped_coupling_breaks_ordering() {
        // x1' = -x2, x2' = -x1: off-diagonal coupling is negative.
        let sys = FnDynamics::new(BoxSpace::new(vec![-10.0; 2], vec![10.0; 2]).unwrap(), |_, x, out| {
            out[0] = -x[1];
            out[1] = -x[0];
            Ok(())
        });
        let opts = IntegrateOptions::rk4(0.01);
        let a = integrate(&sys, &[0.0, 0.0], 0.0, 1.0, &opts).unwrap();
        let b = integrate(&sys, &[0.0, 1.0], 0.0, 1.0, &opts).unwrap();
        let v = check_ordering(&a, &b, 1e-9).unwrap();
        assert!(!v.passed);
        assert_eq!(v.component, Some(0));
        assert!(v.witness_time.unwrap() > 0.0);
    }

    #[test]
    fn csv_export() {
        let tr = Trajectory::from_samples(vec![0.0, 0.5], vec![vec![1.0, 2.0], vec![0.5, 1.5]]).unwrap();
        let mut out = Vec::new();
        tr.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "t,x1,x2\n0,1,2\n0.5,0.5,1.5\n");
    }

    #[test]
    fn rejects_bad_input() {
        let sys = f1_system();
        assert!(integrate(&sys, &[1.0], 0.0, 1.0, &IntegrateOptions::default()).is_err());
        assert!(integrate(&sys, &[1.0, 1.0], 1.0, 1.0, &IntegrateOptions::default()).is_err());
        assert!(integrate(&sys, &[-1.0, 1.0], 0.0, 1.0, &IntegrateOptions::default()).is_err());
        assert!(Trajectory::from_samples(vec![1.0, 0.0], vec![vec![0.0], vec![0.0]]).is_err());
    }
}
