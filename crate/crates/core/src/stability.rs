//! Certification pipelines: exponential stability of the null solution for
//! time-varying compartmental systems, and incremental exponential stability
//! for the structured class via an absorbing box and the `D` factorization.
//!
//! Every "certified" verdict is a certification at the listed samples.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::{canonicalize, check_canonical};
use crate::certificate::{
    family_membership_matrix, fit_tight_family, theorem1_certificate, verify_on_matrix, CertificateSource, FamilyParams,
    FamilyViolation, LyapunovCertificate, SigmaPolicy,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, check_outflow_connected, minimal_traps};
use crate::matrix::{validate_compartmental, CompartmentalMatrix, Permutation, SquareMatrix};
use crate::ode::{integrate, integrate_many, IntegrateOptions, Trajectory};
use crate::sampling::{box_points, SamplePlan};
use crate::system::{
    check_nonexpansive_condition, check_type_k, ordered_pairs, time_grid, AssumptionReport, BoxSpace, CoefficientId,
    CompartmentalSystem, LipschitzTable, SampledVerdict, StructuredSystem,
};
use crate::DEFAULT_STRICT_TOL;

/// Absolute tolerance of the certificate inequality at unit scale (`max v = 1`).
pub const VERIFY_TOL: f64 = 1e-9;
/// Largest accepted residual of the `D` factorization.
pub const D_RESIDUAL_MAX: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EsVerdict {
    CertifiedEs,
    CertifiedNotAs,
    Inconclusive,
}

impl EsVerdict {
    /// 0 certified, 2 inconclusive, 3 refuted.
    pub fn exit_code(self) -> i32 {
        match self {
            EsVerdict::CertifiedEs => 0,
            EsVerdict::Inconclusive => 2,
            EsVerdict::CertifiedNotAs => 3,
        }
    }
}

/// A sample `(t, x)` where family membership failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MembershipWitness {
    pub t: f64,
    pub x: Vec<f64>,
    pub violations: Vec<FamilyViolation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EsReport {
    pub verdict: EsVerdict,
    pub basis: &'static str,
    pub certificate: Option<LyapunovCertificate>,
    pub family: Option<FamilyParams>,
    /// Permutation into canonical form, when one was used.
    pub permutation: Option<Permutation>,
    /// Maximal trap (1-based in JSON).
    #[serde(with = "crate::one_based::opt_vec")]
    pub trap: Option<Vec<usize>>,
    #[serde(with = "crate::one_based::nested")]
    pub minimal_traps: Vec<Vec<usize>>,
    /// Smallest family margin over the samples.
    pub worst_membership_margin: Option<f64>,
    /// Smallest certificate margin (normalized `v`) over the samples.
    pub worst_certificate_margin: Option<f64>,
    pub witness: Option<MembershipWitness>,
    pub samples: usize,
    pub seed: u64,
    pub assumptions_log: Vec<String>,
}

impl EsReport {
    fn empty(verdict: EsVerdict, plan: &SamplePlan) -> Self {
        Self {
            verdict,
            basis: "at-samples",
            certificate: None,
            family: None,
            permutation: None,
            trap: None,
            minimal_traps: Vec::new(),
            worst_membership_margin: None,
            worst_certificate_margin: None,
            witness: None,
            samples: 0,
            seed: plan.seed,
            assumptions_log: Vec::new(),
        }
    }
}

/// Finite sampling box: infinite upper bounds are replaced by `lower + 1`.
fn sampling_box(space: &BoxSpace) -> (Vec<f64>, Vec<f64>, bool) {
    let mut truncated = false;
    let upper = space
        .lower
        .iter()
        .zip(&space.upper)
        .map(|(l, u)| {
            if u.is_finite() {
                *u
            } else {
                truncated = true;
                l + 1.0
            }
        })
        .collect();
    (space.lower.clone(), upper, truncated)
}

/// Sampled `(t, x)` points over `[0, horizon] x X`.
fn time_state_points(space: &BoxSpace, plan: &SamplePlan, horizon: f64) -> (Vec<(f64, Vec<f64>)>, bool) {
    let (lo, hi, truncated) = sampling_box(space);
    let mut l = vec![0.0];
    l.extend(lo);
    let mut h = vec![horizon.max(0.0)];
    h.extend(hi);
    let pts = box_points(&l, &h, plan)
        .into_iter()
        .map(|p| (p[0], p[1..].to_vec()))
        .collect();
    (pts, truncated)
}

fn min_margin(m: &crate::certificate::Membership) -> f64 {
    m.column_margins.iter().copied().fold(m.b_margin, f64::min)
}

/// Null-solution ES for `q' = F(t, q) g(t, q)`: check `F(t, x) in F(a, b, l)`
/// at samples and emit the family certificate.
pub fn certify_null_es(
    sys: &dyn CompartmentalSystem,
    fam: &FamilyParams,
    sigma: &SigmaPolicy,
    plan: &SamplePlan,
    horizon: f64,
) -> Result<EsReport> {
    if fam.n != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: fam.n,
        });
    }
    let (pts, truncated) = time_state_points(sys.space(), plan, horizon);
    let mut report = EsReport::empty(EsVerdict::Inconclusive, plan);
    report.samples = pts.len();
    report.family = Some(fam.clone());
    if truncated {
        report
            .assumptions_log
            .push("unbounded components sampled on [lower, lower + 1]".into());
    }
    report.assumptions_log.push(format!(
        "I = 0, g_i >= x_i and g_i = 0 at x_i = 0 checked at {} samples over t in [0, {horizon}]",
        pts.len()
    ));

    let rows: Vec<Result<(f64, Option<MembershipWitness>, SquareMatrix)>> = pts
        .par_iter()
        .map(|(t, x)| {
            let inflow = sys.inflow(*t, x)?;
            if let Some(i) = inflow.iter().position(|v| *v != 0.0) {
                return Err(Error::AssumptionViolated {
                    assumption: "I = 0",
                    component: i + 1,
                    detail: format!("I_{}(t = {t}, x = {x:?}) = {}", i + 1, inflow[i]),
                });
            }
            let g = sys.g(*t, x)?;
            for i in 0..x.len() {
                if g[i] < x[i] || (x[i] == 0.0 && g[i] != 0.0) {
                    return Err(Error::AssumptionViolated {
                        assumption: "g_i >= x_i, g_i(0) = 0",
                        component: i + 1,
                        detail: format!("g_{}(t = {t}, x = {x:?}) = {}", i + 1, g[i]),
                    });
                }
            }
            let m = sys.f_matrix(*t, x)?;
            let sums = m.column_sums();
            let mem = family_membership_matrix(&m, &sums, fam, DEFAULT_STRICT_TOL);
            let witness = (!mem.is_member).then(|| MembershipWitness {
                t: *t,
                x: x.clone(),
                violations: mem.violations.clone(),
            });
            Ok((min_margin(&mem), witness, m))
        })
        .collect();
    let mut worst = f64::INFINITY;
    let mut mats = Vec::with_capacity(rows.len());
    for r in rows {
        let (margin, witness, m) = r?;
        worst = worst.min(margin);
        if report.witness.is_none() {
            report.witness = witness;
        }
        mats.push(m);
    }
    report.worst_membership_margin = Some(worst);
    if report.witness.is_some() {
        report
            .assumptions_log
            .push("membership failed at a sample; the family may be wrong, this is not a refutation".into());
        return Ok(report);
    }
    let cert = theorem1_certificate(fam, &sigma.sigma(fam))?;
    let unit = cert.normalized();
    let worst_cert = mats
        .par_iter()
        .map(|m| verify_on_matrix(m, &unit.v, unit.lambda, VERIFY_TOL).worst_margin)
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    report.worst_certificate_margin = Some(worst_cert);
    if worst_cert >= -VERIFY_TOL {
        report.verdict = EsVerdict::CertifiedEs;
    }
    report.certificate = Some(cert);
    Ok(report)
}

/// Declared range of a coefficient: identically zero (`None`) or
/// `0 < inf <= sup < inf`.
pub type Bound = Option<(f64, f64)>;

/// Declared bounds for `F_ij = f_ij` (off-diagonal) and the outflows `f_0i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBounds {
    pub n: usize,
    pub f0: Vec<Bound>,
    /// `(i, j) -> (inf, sup)` for `F_ij`, 0-based.
    pub f: BTreeMap<(usize, usize), (f64, f64)>,
    /// Bounds were estimated by sampling rather than declared.
    pub estimated: bool,
}

/// JSON form: `{"n": 2, "f0": [null, [1, 1]], "f": {"2,1": [1, 2]}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsDescription {
    pub n: usize,
    #[serde(default)]
    pub f0: Vec<Option<[f64; 2]>>,
    #[serde(default)]
    pub f: BTreeMap<String, [f64; 2]>,
}

impl BoundsDescription {
    pub fn build(&self) -> Result<CoefficientBounds> {
        let n = self.n;
        let mut f0 = vec![None; n];
        if !self.f0.is_empty() {
            if self.f0.len() != n {
                return Err(Error::Input(format!("`f0` has {} entries, expected n = {n}", self.f0.len())));
            }
            for (i, b) in self.f0.iter().enumerate() {
                f0[i] = b.map(|[lo, hi]| (lo, hi));
            }
        }
        let mut f = BTreeMap::new();
        for (key, [lo, hi]) in &self.f {
            let (j, i) = crate::system::parse_pair_key(key, n)?;
            f.insert((j, i), (*lo, *hi));
        }
        let b = CoefficientBounds {
            n,
            f0,
            f,
            estimated: false,
        };
        b.validate()?;
        Ok(b)
    }
}

impl CoefficientBounds {
    pub fn validate(&self) -> Result<()> {
        let check = |what: String, (lo, hi): (f64, f64)| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::InvalidParameter(format!("{what}: bounds must be finite")));
            }
            if lo > hi {
                return Err(Error::InvalidParameter(format!("{what}: inf {lo} > sup {hi}")));
            }
            if !(lo > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{what}: a coefficient is either identically zero or has a positive infimum, got {lo}"
                )));
            }
            Ok(())
        };
        if self.f0.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: self.f0.len(),
            });
        }
        for (i, b) in self.f0.iter().enumerate() {
            if let Some(b) = b {
                check(format!("f_0{}", i + 1), *b)?;
            }
        }
        for (&(i, j), b) in &self.f {
            if i >= self.n || j >= self.n || i == j {
                return Err(Error::InvalidParameter(format!("bad coefficient index ({}, {})", i + 1, j + 1)));
            }
            check(format!("f_{},{}", i + 1, j + 1), *b)?;
        }
        Ok(())
    }

    fn matrix(&self, pick: fn((f64, f64)) -> f64) -> SquareMatrix {
        let mut m = SquareMatrix::zeros(self.n);
        for (i, b) in self.f0.iter().enumerate() {
            if let Some(b) = b {
                m.set(i, i, -pick(*b));
            }
        }
        for (&(i, j), b) in &self.f {
            let v = pick(*b);
            m.set(i, j, v);
            m.set(j, j, m.get(j, j) - v);
        }
        m
    }

    /// `G` built from the infima.
    pub fn g_matrix(&self) -> Result<CompartmentalMatrix> {
        validate_compartmental(self.matrix(|b| b.0), DEFAULT_STRICT_TOL)
    }

    /// Off-diagonal suprema (diagonal unused).
    pub fn sup_matrix(&self) -> SquareMatrix {
        self.matrix(|b| b.1)
    }
}

/// Sampled fallback: estimate bounds for a structured system. Coefficients
/// vanishing at every sample are treated as identically zero.
pub fn estimate_bounds(sys: &StructuredSystem, horizon: f64) -> Result<CoefficientBounds> {
    let times = time_grid(horizon);
    let range = |id: CoefficientId| -> Result<Option<(f64, f64)>> {
        let c = sys.capacities()[id.owner()];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &t in &times {
            for k in 0..crate::system::SCALAR_GRID {
                let z = c * k as f64 / (crate::system::SCALAR_GRID - 1) as f64;
                let v = sys.eval_coefficient(id, t, z)?;
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        Ok((hi != 0.0 || lo != 0.0).then_some((lo, hi)))
    };
    let n = sys.n();
    let f0 = (0..n)
        .map(|i| range(CoefficientId::Outflow(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut f = BTreeMap::new();
    for (i, j, _) in sys.flows() {
        if let Some(b) = range(CoefficientId::Flow(i, j))? {
            f.insert((i, j), b);
        }
    }
    Ok(CoefficientBounds {
        n,
        f0,
        f,
        estimated: true,
    })
}

/// Classify a system whose coefficients are identically zero or bounded away
/// from zero: `G` from the infima decides. Outflow-connected `G` yields a
/// family certificate valid for every `F` within the bounds; a trap of `G` is
/// a trap of every `F(t, x)`, so mass in it never decreases.
///
/// When `sys` is given, the bounds are cross-checked at samples.
pub fn classify_bounded_coefficients(
    sys: Option<&dyn CompartmentalSystem>,
    bounds: &CoefficientBounds,
    plan: &SamplePlan,
    horizon: f64,
) -> Result<EsReport> {
    bounds.validate()?;
    let mut report = EsReport::empty(EsVerdict::Inconclusive, plan);
    if bounds.estimated {
        report
            .assumptions_log
            .push("coefficient bounds were estimated by sampling, not declared".into());
    }
    let g = bounds.g_matrix()?;
    let graph = build_graph(&g, DEFAULT_STRICT_TOL);
    let traps = check_outflow_connected(&graph);
    if let Some(sys) = sys {
        if sys.dim() != bounds.n {
            return Err(Error::DimensionMismatch {
                expected: bounds.n,
                got: sys.dim(),
            });
        }
        let (pts, _) = time_state_points(sys.space(), plan, horizon);
        report.samples = pts.len();
        let sup = bounds.sup_matrix();
        let inf = g.matrix();
        let checked: Vec<Result<Option<MembershipWitness>>> = pts
            .par_iter()
            .map(|(t, x)| {
                let m = sys.f_matrix(*t, x)?;
                let sums = m.column_sums();
                for j in 0..bounds.n {
                    let out = -sums[j];
                    let (lo, hi) = bounds.f0[j].unwrap_or((0.0, 0.0));
                    let mut bad = !(out >= lo - DEFAULT_STRICT_TOL && out <= hi + DEFAULT_STRICT_TOL);
                    for i in (0..bounds.n).filter(|&i| i != j) {
                        let v = m.get(i, j);
                        bad |= !(v >= inf.get(i, j) - DEFAULT_STRICT_TOL && v <= sup.get(i, j) + DEFAULT_STRICT_TOL);
                    }
                    if bad {
                        return Ok(Some(MembershipWitness {
                            t: *t,
                            x: x.clone(),
                            violations: Vec::new(),
                        }));
                    }
                }
                Ok(None)
            })
            .collect();
        for c in checked {
            if let Some(w) = c? {
                report
                    .assumptions_log
                    .push(format!("F(t = {}, x) leaves the declared bounds in some column", w.t));
                report.witness = Some(w);
                return Ok(report);
            }
        }
    }
    if !traps.is_outflow_connected {
        report.verdict = EsVerdict::CertifiedNotAs;
        report.trap = traps.trap.clone();
        report.minimal_traps = minimal_traps(&graph);
        let k: Vec<String> = traps
            .trap
            .iter()
            .flatten()
            .map(|i| (i + 1).to_string())
            .collect();
        report.assumptions_log.push(
            "every coefficient is identically zero or has a positive infimum, so F(t, x) has the edges of G".into(),
        );
        report.assumptions_log.push(format!(
            "K = {{{}}} is a trap of F(t, x) for all (t, x): sum over K of q_i(t) >= sum over K of q_i(0), so the null solution is not asymptotically stable",
            k.join(", ")
        ));
        return Ok(report);
    }
    let canon = canonicalize(&g)?;
    let tight = fit_tight_family(&canon.a, canon.l())?;
    let sup_canon = canon.r.conjugate(&bounds.sup_matrix());
    let b = tight.b.max(sup_canon.max_above_diagonal()).max(0.0);
    let fam = FamilyParams::new(tight.n, tight.l, tight.a.clone(), b)?;
    let cert = theorem1_certificate(&fam, &SigmaPolicy::Ones.sigma(&fam))?;
    let v = canon.pull_back(&cert.v);
    report.certificate = Some(LyapunovCertificate::new(v, cert.lambda, CertificateSource::Theorem1)?);
    report.assumptions_log.push(format!(
        "G is outflow connected; every F with entries in the declared ranges lies in F(a, b, {}) after permutation",
        fam.l
    ));
    report.family = Some(fam);
    report.permutation = Some(canon.r);
    report.verdict = EsVerdict::CertifiedEs;
    Ok(report)
}

/// `F(t, y) g(t, y) - F(t, x) g(t, x) = (F(t, y) + D) (g(t, y) - g(t, x))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DMatrixFactorization {
    pub d: SquareMatrix,
    pub b_tilde: f64,
    /// Max-norm residual of the factorization.
    pub residual: f64,
}

/// Uniform bound on the above-diagonal entries of `D`:
/// `max_{i<j} gbar_i * Lip(f_ji)` with `gbar_i = sup g_i`.
pub fn b_tilde(sys: &StructuredSystem, lip: &LipschitzTable, horizon: f64) -> Result<f64> {
    Ok(d_bound_matrix(sys, lip, horizon)?.max_above_diagonal().max(0.0))
}

/// `Dbar_ij = gbar_i * Lip(f_ji)` for `i != j`.
fn d_bound_matrix(sys: &StructuredSystem, lip: &LipschitzTable, horizon: f64) -> Result<SquareMatrix> {
    let n = sys.n();
    let gbar = g_sup(sys, horizon)?;
    let mut m = SquareMatrix::zeros(n);
    for (j, i, _) in sys.flows() {
        m.set(i, j, gbar[i] * lip.get(CoefficientId::Flow(j, i)));
    }
    Ok(m)
}

/// `sup_t g_i(t, c_i)`; `g_i` is nondecreasing.
fn g_sup(sys: &StructuredSystem, horizon: f64) -> Result<Vec<f64>> {
    let times = time_grid(horizon);
    (0..sys.n())
        .map(|i| {
            let c = sys.capacities()[i];
            times.iter().try_fold(0.0f64, |acc, &t| {
                Ok(acc.max(sys.eval_coefficient(CoefficientId::G(i), t, c)?))
            })
        })
        .collect()
}

/// The matrix `D(t, x, y)` for `x <= y`, with the factorization residual.
pub fn build_d(sys: &StructuredSystem, t: f64, x: &[f64], y: &[f64], b_tilde: f64) -> Result<DMatrixFactorization> {
    let n = sys.n();
    for v in [x, y] {
        if v.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: v.len() });
        }
    }
    if let Some(i) = (0..n).find(|&i| x[i] > y[i]) {
        return Err(Error::InvalidParameter(format!("need x <= y, component {} is not ordered", i + 1)));
    }
    let c = sys.capacities();
    let gx = sys.g_vec(t, x)?;
    let gy = sys.g_vec(t, y)?;
    let dg: Vec<f64> = gy.iter().zip(&gx).map(|(a, b)| a - b).collect();
    // Entries more negative than this are assumption violations, not rounding.
    let neg_tol = 1e-9;
    let mut d = SquareMatrix::zeros(n);
    for j in 0..n {
        if x[j] == y[j] {
            continue;
        }
        if !(dg[j] > 0.0) || dg[j] < (y[j] - x[j]) * (1.0 - 1e-9) {
            return Err(Error::AssumptionViolated {
                assumption: "A3",
                component: j + 1,
                detail: format!("g_{0}(y) - g_{0}(x) = {1} < y - x = {2}", j + 1, dg[j], y[j] - x[j]),
            });
        }
        let f0 = sys.outflow_coefficient(j);
        let d0 = gx[j] * (f0.eval(t, y[j], c[j])? - f0.eval(t, x[j], c[j])?) / dg[j];
        if d0 < -neg_tol {
            return Err(Error::AssumptionViolated {
                assumption: "A5",
                component: j + 1,
                detail: format!("f_0{} decreases between x and y (d_0 = {d0})", j + 1),
            });
        }
        let mut diag = -d0;
        for (row, col, coef) in sys.flows() {
            if row == j {
                // f_jk at x_j: feeds D_kj and the diagonal.
                let k = col;
                let e = gx[k] * (coef.eval(t, x[j], c[j])? - coef.eval(t, y[j], c[j])?) / dg[j];
                if e < -neg_tol {
                    return Err(Error::AssumptionViolated {
                        assumption: "A4",
                        component: j + 1,
                        detail: format!("f_{},{} increases between x and y", j + 1, k + 1),
                    });
                }
                d.set(k, j, d.get(k, j) + e);
                diag -= e;
            }
        }
        d.set(j, j, diag);
    }
    // D_kj above used g_k(x_k) (source-side g) as required.
    let fy = sys.assemble(t, y)?;
    let fx = sys.assemble(t, x)?;
    let lhs: Vec<f64> = fy
        .mul_vec(&gy)
        .iter()
        .zip(fx.mul_vec(&gx))
        .map(|(a, b)| a - b)
        .collect();
    let rhs = fy.add(&d).mul_vec(&dg);
    let residual = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(DMatrixFactorization { d, b_tilde, residual })
}

/// Bounds used by the absorbing-box construction. Index 0 of `l` is unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorbingBounds {
    /// `L_i = Lip(I_i) + sum_{j != i} Lip(f_ij) gbar_j`.
    pub l: Vec<f64>,
    /// Lower bound of `f_0n`.
    pub a_n: f64,
    /// Times over which `h_i(z) = min_t f_{i,i-1}(t, z)` is taken.
    pub times: Vec<f64>,
}

impl AbsorbingBounds {
    /// Bounds from Lipschitz constants and sampled infima.
    pub fn derive(sys: &StructuredSystem, lip: &LipschitzTable, horizon: f64) -> Result<Self> {
        let n = sys.n();
        let times = time_grid(horizon);
        let gbar = g_sup(sys, horizon)?;
        let mut l = vec![0.0; n];
        for (i, li) in l.iter_mut().enumerate() {
            *li = lip.get(CoefficientId::Inflow(i));
        }
        for (i, j, _) in sys.flows() {
            l[i] += lip.get(CoefficientId::Flow(i, j)) * gbar[j];
        }
        let mut a_n = f64::INFINITY;
        for &t in &times {
            a_n = a_n.min(sys.eval_coefficient(CoefficientId::Outflow(n - 1), t, 0.0)?);
        }
        Ok(Self { l, a_n, times })
    }

    /// `h_i(z) = min_t f_{i,i-1}(t, z)`, zero when the coefficient is absent.
    pub fn h(&self, sys: &StructuredSystem, i: usize, z: f64) -> Result<f64> {
        if sys.flow_coefficient(i, i - 1).is_none() {
            return Ok(0.0);
        }
        self.times.iter().try_fold(f64::INFINITY, |acc, &t| {
            Ok(acc.min(sys.eval_coefficient(CoefficientId::Flow(i, i - 1), t, z)?))
        })
    }

    /// Chain structure required by the construction: `a_n > 0` and
    /// `h_i > 0` on `[0, c_i)` at grid points. Returns the reason when not.
    pub fn chain_failure(&self, sys: &StructuredSystem) -> Result<Option<String>> {
        if !(self.a_n > 0.0) {
            return Ok(Some(format!("a_n = inf f_0n = {} is not positive", self.a_n)));
        }
        let grid = 64;
        for i in 1..sys.n() {
            let c = sys.capacities()[i];
            for k in 0..grid {
                let z = c * k as f64 / grid as f64;
                let h = self.h(sys, i, z)?;
                if !(h > 0.0) {
                    return Ok(Some(format!("h_{}({z}) = {h} is not positive", i + 1)));
                }
            }
        }
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsorbingBoxOptions {
    /// Position of `s_i` inside the admissible interval `(lo, c_i)`.
    pub theta: f64,
    /// Random initial states checked in addition to the corner.
    pub ensemble: usize,
    pub seed: u64,
    /// Length of the check after `tau`.
    pub verify_span: f64,
    pub integrate: IntegrateOptions,
}

impl Default for AbsorbingBoxOptions {
    fn default() -> Self {
        Self {
            theta: 0.5,
            ensemble: 16,
            seed: 0,
            verify_span: 20.0,
            integrate: IntegrateOptions::default(),
        }
    }
}

/// `S = [0, c_1] x [0, s_2] x ... x [0, s_n]`, entered by time `tau`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbsorbingBox {
    /// Upper corner of `S` (`s_1 = c_1`).
    pub s: Vec<f64>,
    pub tau: f64,
    /// Thresholds `b_i` (index 0 unused).
    pub b: Vec<f64>,
    /// The corner trajectory at `tau`.
    pub corner_at_tau: Vec<f64>,
    pub verified: bool,
    /// `min_{t >= tau, i >= 2} s_i - phi_i(t)` over the ensemble.
    pub worst_margin: f64,
    pub ensemble: usize,
    pub log: Vec<String>,
}

/// Backward construction of `s_n, ..., s_2` from the corner trajectory at `tau`.
fn thresholds(
    sys: &StructuredSystem,
    bounds: &AbsorbingBounds,
    y_tau: &[f64],
    theta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = sys.n();
    let c = sys.capacities();
    let mut s = c.to_vec();
    let mut b = vec![0.0; n];
    for i in (1..n).rev() {
        let drain = if i == n - 1 { bounds.a_n } else { bounds.h(sys, i + 1, s[i + 1])? };
        if !(drain > 0.0) {
            return Err(Error::TauTooSmall(format!(
                "outflow bound for component {} is {drain}",
                i + 1
            )));
        }
        let li = bounds.l[i];
        b[i] = if li == 0.0 { 0.0 } else { c[i] * li / (li + drain) };
        let lo = b[i].max(y_tau[i]);
        if !(lo < c[i] * (1.0 - 1e-9)) {
            return Err(Error::TauTooSmall(format!(
                "component {}: corner trajectory at {} and threshold b = {} leave no room below c = {}",
                i + 1,
                y_tau[i],
                b[i],
                c[i]
            )));
        }
        s[i] = lo + theta * (c[i] - lo);
    }
    Ok((s, b))
}

/// Compute `S` for a given `tau` and check it on an ensemble.
pub fn compute_absorbing_box(
    sys: &StructuredSystem,
    tau: f64,
    bounds: &AbsorbingBounds,
    opts: &AbsorbingBoxOptions,
) -> Result<AbsorbingBox> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau = {tau} must be positive")));
    }
    let c = sys.capacities().to_vec();
    let corner = integrate(sys, &c, 0.0, tau, &opts.integrate)?;
    absorbing_box_from_corner(sys, tau, bounds, opts, &corner)
}

fn absorbing_box_from_corner(
    sys: &StructuredSystem,
    tau: f64,
    bounds: &AbsorbingBounds,
    opts: &AbsorbingBoxOptions,
    corner: &Trajectory,
) -> Result<AbsorbingBox> {
    let n = sys.n();
    let y_tau = corner.interpolate(tau);
    let (s, b) = thresholds(sys, bounds, &y_tau, opts.theta)?;
    let c = sys.capacities().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut inits = vec![c.clone()];
    for _ in 0..opts.ensemble {
        inits.push(c.iter().map(|ci| rng.random::<f64>() * ci).collect());
    }
    let runs = integrate_many(sys, &inits, 0.0, tau + opts.verify_span, &opts.integrate)?;
    let mut worst = f64::INFINITY;
    for tr in &runs {
        for (k, &t) in tr.times().iter().enumerate() {
            if t < tau {
                continue;
            }
            for i in 1..n {
                worst = worst.min(s[i] - tr.state(k)[i]);
            }
        }
    }
    let worst = if worst.is_finite() { worst } else { 0.0 };
    let tol = opts.integrate.proj_tol.max(1e-9);
    Ok(AbsorbingBox {
        verified: worst >= -tol,
        worst_margin: worst,
        ensemble: runs.len(),
        log: vec![
            "the corner trajectory from c dominates every solution by the ordering of cooperative systems; the ensemble re-checks this".into(),
            format!("s_i placed at fraction {} of the admissible interval", opts.theta),
        ],
        s,
        tau,
        b,
        corner_at_tau: y_tau,
    })
}

/// Smallest `tau` in `1, 2, 4, ...` (up to `tau_max`) at which the corner
/// trajectory sits within 10% of the way from `b_i` to `c_i` for all `i >= 2`.
pub fn auto_absorbing_box(
    sys: &StructuredSystem,
    bounds: &AbsorbingBounds,
    tau_max: f64,
    opts: &AbsorbingBoxOptions,
) -> Result<AbsorbingBox> {
    let c = sys.capacities().to_vec();
    let corner = integrate(sys, &c, 0.0, tau_max, &opts.integrate)?;
    let mut tau = 1.0f64.min(tau_max);
    loop {
        let y = corner.interpolate(tau);
        let close = match thresholds(sys, bounds, &y, opts.theta) {
            Ok((_, b)) => (1..sys.n()).all(|i| y[i] <= b[i] + 0.1 * (c[i] - b[i])),
            Err(Error::TauTooSmall(_)) => false,
            Err(e) => return Err(e),
        };
        if close || tau >= tau_max {
            return absorbing_box_from_corner(sys, tau, bounds, opts, &corner);
        }
        tau = (2.0 * tau).min(tau_max);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IesVerdict {
    CertifiedIes,
    Inconclusive,
    Refuted,
}

impl IesVerdict {
    pub fn exit_code(self) -> i32 {
        match self {
            IesVerdict::CertifiedIes => 0,
            IesVerdict::Inconclusive => 2,
            IesVerdict::Refuted => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IesOptions {
    /// Entry time of the absorbing box; `None` selects it automatically.
    pub tau: Option<f64>,
    pub tau_max: f64,
    /// Time range sampled for time-varying coefficients.
    pub horizon: f64,
    pub plan: SamplePlan,
    pub sigma: SigmaPolicy,
    pub absorbing: AbsorbingBoxOptions,
    /// Tolerance of the sampled structural checks.
    pub check_tol: f64,
}

impl Default for IesOptions {
    fn default() -> Self {
        Self {
            tau: None,
            tau_max: 1024.0,
            horizon: 0.0,
            plan: SamplePlan::default(),
            sigma: SigmaPolicy::Ones,
            absorbing: AbsorbingBoxOptions::default(),
            check_tol: 1e-12,
        }
    }
}

/// Worst results of checking `v^T (F(t, y) + D) <= -lambda v^T` on pairs in `S`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairVerification {
    pub samples: usize,
    pub worst_membership_margin: f64,
    pub worst_certificate_margin: f64,
    pub worst_residual: f64,
    pub max_d_above_diagonal: f64,
    pub witness: Option<crate::system::Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IesReport {
    pub verdict: IesVerdict,
    pub basis: &'static str,
    /// Pipeline stage that stopped certification.
    pub stage: Option<&'static str>,
    pub reason: Option<String>,
    pub type_k: Option<SampledVerdict>,
    pub nonexpansive: Option<SampledVerdict>,
    pub assumptions: Option<AssumptionReport>,
    pub lipschitz: Option<LipschitzTable>,
    pub absorbing_box: Option<AbsorbingBox>,
    /// Upper corner of `S`.
    pub s: Vec<f64>,
    pub tau: f64,
    pub permutation: Option<Permutation>,
    pub family: Option<FamilyParams>,
    /// Above-diagonal bound of `F` on `S` before adding `b_tilde`.
    pub b_f: Option<f64>,
    pub b_tilde: Option<f64>,
    pub certificate: Option<LyapunovCertificate>,
    pub lambda: Option<f64>,
    /// `e^{lambda tau} max v / min v`.
    pub gamma: Option<f64>,
    pub verification: Option<PairVerification>,
    pub seed: u64,
    pub log: Vec<String>,
}

impl IesReport {
    fn new(sys: &StructuredSystem, opts: &IesOptions) -> Self {
        Self {
            verdict: IesVerdict::Inconclusive,
            basis: "at-samples",
            stage: None,
            reason: None,
            type_k: None,
            nonexpansive: None,
            assumptions: None,
            lipschitz: None,
            absorbing_box: None,
            s: sys.capacities().to_vec(),
            tau: 0.0,
            permutation: None,
            family: None,
            b_f: None,
            b_tilde: None,
            certificate: None,
            lambda: None,
            gamma: None,
            verification: None,
            seed: opts.plan.seed,
            log: Vec::new(),
        }
    }

    fn stop(mut self, verdict: IesVerdict, stage: &'static str, reason: impl Into<String>) -> Self {
        self.verdict = verdict;
        self.stage = Some(stage);
        self.reason = Some(reason.into());
        self
    }

    /// `(1 / lambda) ln(gamma / ratio)`: time after which the certified
    /// envelope is below `ratio` times the initial distance.
    pub fn time_bound(&self, ratio: f64) -> Option<f64> {
        Some((self.gamma? / ratio).ln() / self.lambda?)
    }

    /// Envelope `gamma e^{-lambda t} r`.
    pub fn envelope(&self, t: f64, r: f64) -> Option<f64> {
        Some(self.gamma? * (-self.lambda? * t).exp() * r)
    }
}

/// Incremental exponential stability for a structured system.
pub fn certify_ies(sys: &StructuredSystem, opts: &IesOptions) -> Result<IesReport> {
    let n = sys.n();
    let mut rep = IesReport::new(sys, opts);
    let plan = &opts.plan;

    // Stage 1: cooperativity and nonexpansiveness.
    let tk = check_type_k(sys, plan, opts.horizon, opts.check_tol)?;
    let ne = check_nonexpansive_condition(sys, plan, opts.horizon, opts.check_tol)?;
    let (tk_ok, ne_ok) = (tk.passed, ne.passed);
    rep.type_k = Some(tk);
    rep.nonexpansive = Some(ne);
    if !tk_ok {
        return Ok(rep.stop(IesVerdict::Refuted, "type_k", "type K condition fails at a sample"));
    }
    if !ne_ok {
        return Ok(rep.stop(IesVerdict::Refuted, "nonexpansive", "sum condition fails at a sample"));
    }
    let assumptions = sys.check_assumptions(opts.horizon, 1e-9)?;
    let failed: Vec<String> = assumptions
        .failures()
        .map(|c| format!("{} on {}", c.assumption, c.coefficient))
        .collect();
    rep.assumptions = Some(assumptions);
    if !failed.is_empty() {
        return Ok(rep.stop(IesVerdict::Inconclusive, "assumptions", failed.join("; ")));
    }
    let times = time_grid(opts.horizon);
    let lip = sys.lipschitz_table(&times)?;
    rep.lipschitz = Some(lip.clone());

    // Stage 2: absorbing box.
    let bounds = AbsorbingBounds::derive(sys, &lip, opts.horizon)?;
    let chain = if n >= 2 { bounds.chain_failure(sys)? } else { Some("n = 1".into()) };
    match chain {
        None => {
            let mut ab_opts = opts.absorbing;
            ab_opts.seed = plan.seed;
            let ab = match opts.tau {
                Some(tau) => compute_absorbing_box(sys, tau, &bounds, &ab_opts),
                None => auto_absorbing_box(sys, &bounds, opts.tau_max, &ab_opts),
            };
            let ab = match ab {
                Ok(ab) => ab,
                Err(Error::TauTooSmall(msg)) => {
                    return Ok(rep.stop(IesVerdict::Inconclusive, "absorbing_box", format!("tau too small: {msg}")))
                }
                Err(e) => return Err(e),
            };
            rep.s = ab.s.clone();
            rep.tau = ab.tau;
            let verified = ab.verified;
            rep.absorbing_box = Some(ab);
            if !verified {
                return Ok(rep.stop(
                    IesVerdict::Inconclusive,
                    "absorbing_box",
                    "an ensemble trajectory exceeds s_i after tau",
                ));
            }
        }
        Some(why) => rep
            .log
            .push(format!("no absorbing box ({why}); certifying on the whole box with tau = 0")),
    }

    // Stage 3: family on S from the s-corner.
    let s = rep.s.clone();
    let mut w = SquareMatrix::zeros(n);
    let mut fmax = SquareMatrix::zeros(n);
    for i in 0..n {
        let mut out = f64::INFINITY;
        for &t in &times {
            out = out.min(sys.eval_coefficient(CoefficientId::Outflow(i), t, 0.0)?);
        }
        w.set(i, i, -out);
    }
    for (i, j, _) in sys.flows() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &t in &times {
            lo = lo.min(sys.eval_coefficient(CoefficientId::Flow(i, j), t, s[i])?);
            hi = hi.max(sys.eval_coefficient(CoefficientId::Flow(i, j), t, 0.0)?);
        }
        w.set(i, j, lo);
        w.set(j, j, w.get(j, j) - lo);
        fmax.set(i, j, hi);
    }
    let w = validate_compartmental(w, DEFAULT_STRICT_TOL)?;
    let perm = if check_canonical(&w).is_canonical {
        Permutation::identity(n)
    } else {
        match canonicalize(&w) {
            Ok(canon) => canon.r,
            Err(Error::NotOutflowConnected(t)) => {
                let k: Vec<usize> = t.trap.iter().flatten().map(|i| i + 1).collect();
                return Ok(rep.stop(
                    IesVerdict::Inconclusive,
                    "family",
                    format!("worst-case matrix on S is not outflow connected (trap {k:?})"),
                ));
            }
            Err(e) => return Err(e),
        }
    };
    let w_canon = crate::matrix::conjugate_by_permutation(&w, &perm)?;
    let l = check_canonical(&w_canon).l.unwrap_or(1);
    let tight = fit_tight_family(&w_canon, l)?;
    let b_f = perm.conjugate(&fmax).max_above_diagonal().max(0.0);
    let dbar = d_bound_matrix(sys, &lip, opts.horizon)?;
    let bt = perm.conjugate(&dbar).max_above_diagonal().max(0.0);
    let fam = FamilyParams::new(n, l, tight.a.clone(), b_f + bt)?;
    rep.b_f = Some(b_f);
    rep.b_tilde = Some(bt);
    rep.permutation = Some(perm.clone());
    rep.family = Some(fam.clone());

    // Stage 4: certificate.
    let cert = theorem1_certificate(&fam, &opts.sigma.sigma(&fam))?;
    let mut v = vec![0.0; n];
    for (k, vk) in cert.v.iter().enumerate() {
        v[perm.apply(k)] = *vk;
    }
    let cert = LyapunovCertificate::new(v, cert.lambda, CertificateSource::Theorem1)?;
    let unit = cert.normalized();

    // Stage 5: sampled ordered pairs in S.
    let s_space = BoxSpace::capacities(&s)?;
    let pairs = ordered_pairs(&s_space, plan, opts.horizon)?;
    let checked: Vec<Result<(f64, f64, f64, f64)>> = pairs
        .par_iter()
        .map(|(t, x, y)| {
            let dm = build_d(sys, *t, x, y, bt)?;
            let fy = sys.assemble(*t, y)?;
            let m = fy.add(&dm.d);
            let mc = perm.conjugate(&m);
            let sums = mc.column_sums();
            let mem = family_membership_matrix(&mc, &sums, &fam, 1e-9);
            let ver = verify_on_matrix(&m, &unit.v, unit.lambda, VERIFY_TOL);
            let above = perm.conjugate(&dm.d).max_above_diagonal();
            Ok((min_margin(&mem), ver.worst_margin, dm.residual, above))
        })
        .collect();
    let mut pv = PairVerification {
        samples: pairs.len(),
        worst_membership_margin: f64::INFINITY,
        worst_certificate_margin: f64::INFINITY,
        worst_residual: 0.0,
        max_d_above_diagonal: 0.0,
        witness: None,
    };
    for (k, r) in checked.into_iter().enumerate() {
        let (mm, cm, res, above) = match r {
            Ok(v) => v,
            Err(e @ Error::AssumptionViolated { .. }) => {
                return Ok(rep.stop(IesVerdict::Inconclusive, "d_matrix", e.to_string()));
            }
            Err(e) => return Err(e),
        };
        if cm < pv.worst_certificate_margin {
            let (t, x, y) = &pairs[k];
            pv.witness = Some(crate::system::Witness {
                t: *t,
                a: x.clone(),
                b: y.clone(),
                component: None,
                margin: cm,
            });
        }
        pv.worst_membership_margin = pv.worst_membership_margin.min(mm);
        pv.worst_certificate_margin = pv.worst_certificate_margin.min(cm);
        pv.worst_residual = pv.worst_residual.max(res);
        pv.max_d_above_diagonal = pv.max_d_above_diagonal.max(above);
    }
    let ok = pv.worst_membership_margin >= -1e-9
        && pv.worst_certificate_margin >= -VERIFY_TOL
        && pv.worst_residual < D_RESIDUAL_MAX;
    rep.verification = Some(pv);
    let lambda = cert.lambda;
    let gamma = (lambda * rep.tau).exp() * cert.gamma;
    rep.certificate = Some(cert);
    if !ok {
        return Ok(rep.stop(
            IesVerdict::Inconclusive,
            "verification",
            "F(t, y) + D fails the family bounds or the certificate at a sampled pair in S",
        ));
    }
    rep.lambda = Some(lambda);
    rep.gamma = Some(gamma);
    rep.verdict = IesVerdict::CertifiedIes;
    rep.log.push(format!(
        "family F(a, {} + {}, {l}) on S; lambda = {lambda:e}, gamma = {gamma:e}",
        b_f, bt
    ));
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expression;
    use crate::system::{Coefficient, GeneralSystem, LinearSystem};

    fn cm(rows: &[Vec<f64>]) -> CompartmentalMatrix {
        CompartmentalMatrix::from_rows(rows).unwrap()
    }

    fn expr(src: &str) -> Coefficient {
        Coefficient::Expr(Expression::parse(src).unwrap().bind(&BTreeMap::new()).unwrap())
    }

    fn bottleneck() -> StructuredSystem {
        let mut s = StructuredSystem::new(&[1.0, 1.0]).unwrap();
        s.set_flow(1, 0, expr("1 - x")).unwrap();
        s.set_outflow(1, Coefficient::Constant(1.0)).unwrap();
        s
    }

    fn small_plan() -> SamplePlan {
        SamplePlan::new(256, 5)
    }

    #[test]
    fn time_varying_family_member_is_certified() {
        let sys = GeneralSystem::new(BoxSpace::capacities(&[1.0, 1.0]).unwrap(), |t, _| {
            let s = 0.5 * t.sin().powi(2);
            SquareMatrix::from_rows(&[vec![-1.0 - s, 0.0], vec![1.0 + s, -1.0]])
        });
        let fam = FamilyParams::new(2, 2, vec![1.0, 1.0], 0.0).unwrap();
        let rep = certify_null_es(&sys, &fam, &SigmaPolicy::Ones, &small_plan(), 10.0).unwrap();
        assert_eq!(rep.verdict, EsVerdict::CertifiedEs);
        let cert = rep.certificate.unwrap();
        assert_eq!(cert.v, vec![2.0, 1.0]);
        assert_eq!(cert.lambda, 0.5);
    }

    #[test]
    fn f2_is_never_in_an_l2_family() {
        let sys = LinearSystem::new(cm(&[vec![-1.0, 1.0], vec![0.0, -1.0]]));
        for a in [0.1, 1.0] {
            for b in [0.0, 1.0, 5.0] {
                let fam = FamilyParams::new(2, 2, vec![a, a], b).unwrap();
                let rep = certify_null_es(&sys, &fam, &SigmaPolicy::Ones, &small_plan(), 0.0).unwrap();
                assert_eq!(rep.verdict, EsVerdict::Inconclusive);
                assert!(rep.witness.is_some());
            }
        }
    }

    #[test]
    fn negative_identity_uses_l_one() {
        let sys = LinearSystem::new(cm(&[vec![-1.0, 0.0], vec![0.0, -1.0]]));
        let fam = FamilyParams::new(2, 1, vec![1.0], 0.0).unwrap();
        let rep = certify_null_es(&sys, &fam, &SigmaPolicy::Ones, &small_plan(), 0.0).unwrap();
        assert_eq!(rep.verdict, EsVerdict::CertifiedEs);
        assert_eq!(rep.certificate.unwrap().v, vec![1.0, 1.0]);
    }

    #[test]
    fn nonzero_inflow_is_rejected() {
        let sys = GeneralSystem::new(BoxSpace::capacities(&[1.0]).unwrap(), |_, _| {
            SquareMatrix::from_rows(&[vec![-1.0]])
        })
        .with_inflow(|_, _| Ok(vec![0.5]));
        let fam = FamilyParams::new(1, 1, vec![1.0], 0.0).unwrap();
        assert!(matches!(
            certify_null_es(&sys, &fam, &SigmaPolicy::Ones, &small_plan(), 0.0),
            Err(Error::AssumptionViolated { .. })
        ));
    }

    fn bounds(n: usize, f0: Vec<Bound>, f: &[((usize, usize), (f64, f64))]) -> CoefficientBounds {
        CoefficientBounds {
            n,
            f0,
            f: f.iter().copied().collect(),
            estimated: false,
        }
    }

    #[test]
    fn bounded_coefficients_with_connected_g() {
        let b = bounds(2, vec![None, Some((1.0, 1.0))], &[((1, 0), (1.0, 2.0))]);
        assert_eq!(b.g_matrix().unwrap(), cm(&[vec![-1.0, 0.0], vec![1.0, -1.0]]));
        let rep = classify_bounded_coefficients(None, &b, &small_plan(), 0.0).unwrap();
        assert_eq!(rep.verdict, EsVerdict::CertifiedEs);
        let cert = rep.certificate.unwrap();
        assert_eq!(cert.v, vec![2.0, 1.0]);
        // Every matrix inside the bounds satisfies the certificate.
        for f21 in [1.0, 1.5, 2.0] {
            let m = cm(&[vec![-f21, 0.0], vec![f21, -1.0]]);
            assert!(verify_on_matrix(m.matrix(), &cert.v, cert.lambda, 1e-12).holds);
        }
    }

    #[test]
    fn bounded_coefficients_with_trap() {
        let b = bounds(2, vec![None, None], &[((1, 0), (1.0, 1.0))]);
        let rep = classify_bounded_coefficients(None, &b, &small_plan(), 0.0).unwrap();
        assert_eq!(rep.verdict, EsVerdict::CertifiedNotAs);
        assert_eq!(rep.trap, Some(vec![0, 1]));
        assert_eq!(rep.minimal_traps, vec![vec![1]]);
        assert!(rep.assumptions_log.iter().any(|l| l.contains("trap")));

        let zero = bounds(3, vec![None; 3], &[]);
        let rep = classify_bounded_coefficients(None, &zero, &small_plan(), 0.0).unwrap();
        assert_eq!(rep.trap, Some(vec![0, 1, 2]));
        assert_eq!(rep.verdict.exit_code(), 3);
    }

    #[test]
    fn inconsistent_bounds_are_errors() {
        let b = bounds(2, vec![None, Some((2.0, 1.0))], &[]);
        assert!(classify_bounded_coefficients(None, &b, &small_plan(), 0.0).is_err());
        let b = bounds(2, vec![None, Some((0.0, 1.0))], &[]);
        assert!(b.validate().is_err());
        let d: BoundsDescription = serde_json::from_str(r#"{"n": 2, "f0": [null, [1, 1]], "f": {"2,1": [1, 2]}}"#).unwrap();
        assert_eq!(d.build().unwrap().f.get(&(1, 0)), Some(&(1.0, 2.0)));
    }

    #[test]
    fn declared_bounds_are_cross_checked() {
        let sys = bottleneck();
        let b = bounds(2, vec![None, Some((1.0, 1.0))], &[((1, 0), (0.5, 1.0))]);
        let rep = classify_bounded_coefficients(Some(&sys), &b, &small_plan(), 0.0).unwrap();
        assert_eq!(rep.verdict, EsVerdict::Inconclusive);
        assert!(rep.witness.is_some());
    }

    #[test]
    fn d_matrix_for_bottleneck() {
        let sys = bottleneck();
        let x = [0.2, 0.3];
        let y = [0.6, 0.7];
        let dm = build_d(&sys, 0.0, &x, &y, 1.0).unwrap();
        // D_12 = x_1 (f_21(x_2) - f_21(y_2)) / (y_2 - x_2) = x_1.
        assert!((dm.d.get(0, 1) - 0.2).abs() < 1e-15);
        assert!(dm.residual < 1e-15);
        assert_eq!(dm.d.column_sums(), vec![0.0, 0.0]);
        let same = build_d(&sys, 0.0, &x, &x, 1.0).unwrap();
        assert_eq!(same.d, SquareMatrix::zeros(2));
        assert_eq!(same.residual, 0.0);
        let lip = sys.lipschitz_table(&[0.0]).unwrap();
        assert!((b_tilde(&sys, &lip, 0.0).unwrap() - 1.25).abs() < 1e-9);
    }

    #[test]
    fn d_matrix_reports_violated_assumption() {
        let mut sys = StructuredSystem::new(&[1.0, 1.0]).unwrap();
        sys.set_flow(1, 0, expr("x")).unwrap();
        match build_d(&sys, 0.0, &[0.5, 0.1], &[0.5, 0.9], 0.0) {
            Err(Error::AssumptionViolated { assumption, .. }) => assert_eq!(assumption, "A4"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn absorbing_box_for_bottleneck() {
        let mut sys = bottleneck();
        sys.declare_lipschitz(CoefficientId::Flow(1, 0), 1.0).unwrap();
        let lip = sys.lipschitz_table(&[0.0]).unwrap();
        let bounds = AbsorbingBounds::derive(&sys, &lip, 0.0).unwrap();
        assert_eq!(bounds.l, vec![0.0, 1.0]);
        assert_eq!(bounds.a_n, 1.0);
        let ab = compute_absorbing_box(&sys, 5.0, &bounds, &AbsorbingBoxOptions::default()).unwrap();
        assert_eq!(ab.b[1], 0.5);
        assert!(ab.s[1] > 0.5 && ab.s[1] < 1.0);
        assert!(ab.verified, "{ab:?}");

        // A vanishing outflow pushes b_n to c_n.
        let tiny = AbsorbingBounds { a_n: 1e-12, ..bounds.clone() };
        assert!(matches!(
            compute_absorbing_box(&sys, 5.0, &tiny, &AbsorbingBoxOptions::default()),
            Err(Error::TauTooSmall(_))
        ));
        // No coupling at all: b = 0.
        let free = AbsorbingBounds {
            l: vec![0.0, 0.0],
            ..bounds
        };
        let ab = compute_absorbing_box(&sys, 5.0, &free, &AbsorbingBoxOptions::default()).unwrap();
        assert_eq!(ab.b[1], 0.0);
    }

    #[test]
    fn bottleneck_is_certified_ies() {
        let mut sys = bottleneck();
        sys.declare_lipschitz(CoefficientId::Flow(1, 0), 1.0).unwrap();
        let opts = IesOptions {
            plan: SamplePlan::new(512, 1),
            ..Default::default()
        };
        let rep = certify_ies(&sys, &opts).unwrap();
        assert_eq!(rep.verdict, IesVerdict::CertifiedIes, "{:?} {:?}", rep.stage, rep.reason);
        assert!(rep.s[1] < 1.0);
        assert_eq!(rep.family.as_ref().unwrap().l, 2);
        assert_eq!(rep.b_tilde, Some(1.0));
        let lambda = rep.lambda.unwrap();
        // v = (3, 2) for a = (1 - s_2, 1), b = 1, sigma = 1.
        let a1 = 1.0 - rep.s[1];
        assert!((lambda - a1 / 3.0).abs() < 1e-12, "{lambda} {a1}");
        assert!(rep.gamma.unwrap() >= 1.5);
    }
}
