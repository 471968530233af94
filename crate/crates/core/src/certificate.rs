//! Linear Lyapunov certificates `v^T F <= -lambda v^T`.
//!
//! Two constructions are provided: explicit weights valid for a whole family
//! `F(a, b, l)` of canonical-form matrices, and the weights `v^T = -1^T F^-1`
//! for a single nonsingular matrix.

use serde::{Deserialize, Serialize};

use crate::canonical::{canonicalize, Canonicalization};
use crate::error::{Error, Result};
use crate::matrix::{exact_sum, CompartmentalMatrix, LuDecomposition, SquareMatrix};

/// Reciprocal condition number below which a linear solve is refused.
pub const RCOND_MIN: f64 = 1e-12;

/// Parameters of the family `F(a, b, l)`.
///
/// `l` is 1-based; `a` has length `l` and `a[l-1]` is the tail outflow bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    pub n: usize,
    pub l: usize,
    pub a: Vec<f64>,
    pub b: f64,
}

impl FamilyParams {
    pub fn new(n: usize, l: usize, a: Vec<f64>, b: f64) -> Result<Self> {
        if n == 0 || l == 0 || l > n {
            return Err(Error::InvalidParameter(format!("need 1 <= l <= n, got l = {l}, n = {n}")));
        }
        if a.len() != l {
            return Err(Error::InvalidParameter(format!("a has length {}, expected l = {l}", a.len())));
        }
        if let Some(i) = a.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidParameter(format!("a_{} = {} must be positive", i + 1, a[i])));
        }
        if !(b >= 0.0 && b.is_finite()) {
            return Err(Error::InvalidParameter(format!("b = {b} must be nonnegative")));
        }
        Ok(Self { n, l, a, b })
    }
}

/// One failed bound of the family definition. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyViolation {
    AboveDiagonal { row: usize, col: usize, value: f64, bound: f64 },
    BelowDiagonalMass { col: usize, mass: f64, bound: f64 },
    TailColumnSum { col: usize, sum: f64, bound: f64 },
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub is_member: bool,
    /// `b - max_{i<j} F[i][j]`.
    pub b_margin: f64,
    /// Per column: below-diagonal mass minus `a_i` for `i < l`, and
    /// `-a_l - colsum_i` for `i >= l`.
    pub column_margins: Vec<f64>,
    /// Columns (1-based) whose margin is within `tol` of zero.
    pub binding: Vec<usize>,
    pub violations: Vec<FamilyViolation>,
}

pub fn family_membership(f: &CompartmentalMatrix, fam: &FamilyParams, tol: f64) -> Membership {
    family_membership_matrix(f.matrix(), f.column_sums(), fam, tol)
}

pub(crate) fn family_membership_matrix(
    m: &SquareMatrix,
    colsums: &[f64],
    fam: &FamilyParams,
    tol: f64,
) -> Membership {
    let n = m.n();
    if n != fam.n {
        return Membership {
            is_member: false,
            b_margin: f64::NAN,
            column_margins: Vec::new(),
            binding: Vec::new(),
            violations: vec![FamilyViolation::Dimension { expected: fam.n, got: n }],
        };
    }
    let mut violations = Vec::new();
    let mut b_margin = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = m.get(i, j);
            b_margin = b_margin.min(fam.b - v);
            if v > fam.b + tol {
                violations.push(FamilyViolation::AboveDiagonal {
                    row: i + 1,
                    col: j + 1,
                    value: v,
                    bound: fam.b,
                });
            }
        }
    }
    if n == 1 {
        b_margin = fam.b;
    }
    let l = fam.l;
    let a_tail = fam.a[l - 1];
    let mut column_margins = Vec::with_capacity(n);
    for i in 0..n {
        let margin = if i + 1 < l {
            let mass = exact_sum(((i + 1)..n).map(|k| m.get(k, i)));
            if mass < fam.a[i] - tol {
                violations.push(FamilyViolation::BelowDiagonalMass {
                    col: i + 1,
                    mass,
                    bound: fam.a[i],
                });
            }
            mass - fam.a[i]
        } else {
            let sum = colsums[i];
            if sum > -a_tail + tol {
                violations.push(FamilyViolation::TailColumnSum {
                    col: i + 1,
                    sum,
                    bound: -a_tail,
                });
            }
            -a_tail - sum
        };
        column_margins.push(margin);
    }
    let binding = column_margins
        .iter()
        .enumerate()
        .filter(|(_, &mg)| mg.abs() <= tol)
        .map(|(i, _)| i + 1)
        .collect();
    Membership {
        is_member: violations.is_empty(),
        b_margin,
        column_margins,
        binding,
        violations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateSource {
    Theorem1,
    LinearInverse,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCertificate {
    pub v: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub source: CertificateSource,
}

impl LyapunovCertificate {
    pub fn new(v: Vec<f64>, lambda: f64, source: CertificateSource) -> Result<Self> {
        if v.is_empty() || v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidParameter("certificate weights must be positive and finite".into()));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("decay rate {lambda} must be positive")));
        }
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            v,
            lambda,
            gamma: max / min,
            source,
        })
    }

    pub fn n(&self) -> usize {
        self.v.len()
    }

    /// Same certificate with `v` rescaled so that `max v = 1`. The inequality
    /// is homogeneous in `v`, so this only changes the scale at which an
    /// absolute verification tolerance applies.
    pub fn normalized(&self) -> Self {
        let max = self.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            v: self.v.iter().map(|x| x / max).collect(),
            ..self.clone()
        }
    }
}

/// The auxiliary sequence `p`: `p_1 = sigma_1`,
/// `p_i = sigma_i + (b / a_i) * sum_{j<i} j p_j`.
pub fn theorem1_p(fam: &FamilyParams, sigma: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != fam.l {
        return Err(Error::DimensionMismatch {
            expected: fam.l,
            got: sigma.len(),
        });
    }
    if let Some(i) = sigma.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidParameter(format!("sigma_{} = {} must be positive", i + 1, sigma[i])));
    }
    let mut p = Vec::with_capacity(fam.l);
    let mut weighted = 0.0;
    for i in 0..fam.l {
        let pi = if i == 0 {
            sigma[0]
        } else {
            sigma[i] + fam.b / fam.a[i] * weighted
        };
        weighted += (i + 1) as f64 * pi;
        p.push(pi);
    }
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("weights overflow; family too large for f64".into()));
    }
    Ok(p)
}

/// Weights and rate certified for every member of `F(a, b, l)`.
pub fn theorem1_certificate(fam: &FamilyParams, sigma: &[f64]) -> Result<LyapunovCertificate> {
    let p = theorem1_p(fam, sigma)?;
    let l = fam.l;
    let mut v = vec![p[l - 1]; fam.n];
    for i in (0..l.saturating_sub(1)).rev() {
        v[i] = p[i] + v[i + 1];
    }
    let total = v[0];
    let min_as = (0..l).map(|i| fam.a[i] * sigma[i]).fold(f64::INFINITY, f64::min);
    LyapunovCertificate::new(v, min_as / total, CertificateSource::Theorem1)
}

/// Outcome of checking `(v^T F)_k <= -lambda v_k + tol` for all columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub holds: bool,
    /// `-lambda v_k - (v^T F)_k` per column; negative means violated.
    pub margins: Vec<f64>,
    pub worst_margin: f64,
    /// 1-based column attaining the worst margin.
    pub worst_column: usize,
}

pub fn verify_certificate(f: &CompartmentalMatrix, cert: &LyapunovCertificate, tol: f64) -> Verification {
    verify_on_matrix(f.matrix(), &cert.v, cert.lambda, tol)
}

/// Same check for an arbitrary square matrix (e.g. `F + D`).
pub fn verify_on_matrix(m: &SquareMatrix, v: &[f64], lambda: f64, tol: f64) -> Verification {
    assert_eq!(m.n(), v.len(), "certificate dimension must match the matrix");
    let n = m.n();
    let margins: Vec<f64> = (0..n)
        .map(|k| {
            let d = exact_sum((0..n).map(|i| v[i] * m.get(i, k)));
            -lambda * v[k] - d
        })
        .collect();
    let (worst_column, worst_margin) = margins
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, mg)| if mg < acc.1 { (k, mg) } else { acc });
    Verification {
        holds: worst_margin >= -tol,
        margins,
        worst_margin,
        worst_column: worst_column + 1,
    }
}

/// `v^T = -(1, ..., 1) F^-1`, `lambda = 1 / max v`.
pub fn linear_inverse_certificate(f: &CompartmentalMatrix) -> Result<LyapunovCertificate> {
    let lu = LuDecomposition::new(f.matrix());
    let rhs = vec![-1.0; f.n()];
    let v = lu.solve_transpose(&rhs, RCOND_MIN)?;
    if v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Singular { rcond: lu.rcond() });
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    LyapunovCertificate::new(v, 1.0 / max, CertificateSource::LinearInverse)
}

/// How the free parameter `sigma` of the family construction is chosen.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum SigmaPolicy {
    #[default]
    Ones,
    /// `sigma_i = 1 / a_i`, equalizing the terms `a_i sigma_i`.
    InverseA,
    Custom(Vec<f64>),
}

impl SigmaPolicy {
    pub fn sigma(&self, fam: &FamilyParams) -> Vec<f64> {
        match self {
            SigmaPolicy::Ones => vec![1.0; fam.l],
            SigmaPolicy::InverseA => fam.a.iter().map(|a| 1.0 / a).collect(),
            SigmaPolicy::Custom(s) => s.clone(),
        }
    }
}

/// Tightest family containing a canonical-form matrix `a` with index `l`:
/// `a_i` are the attained below-diagonal masses, `a_l` the smallest tail
/// outflow and `b` the largest above-diagonal entry.
pub fn fit_tight_family(a: &CompartmentalMatrix, l: usize) -> Result<FamilyParams> {
    let n = a.n();
    let mut params: Vec<f64> = (0..l - 1)
        .map(|i| exact_sum(((i + 1)..n).map(|k| a.get(k, i))))
        .collect();
    let tail = (l - 1..n).map(|i| -a.column_sums()[i]).fold(f64::INFINITY, f64::min);
    params.push(tail);
    FamilyParams::new(n, l, params, a.matrix().max_above_diagonal().max(0.0))
}

/// Family certificate for a single outflow-connected matrix, in its original
/// coordinates, together with the canonicalization and fitted family.
#[derive(Debug, Clone)]
pub struct CanonicalCertificate {
    pub certificate: LyapunovCertificate,
    pub canonicalization: Canonicalization,
    pub family: FamilyParams,
    /// Weights in canonical coordinates.
    pub canonical_v: Vec<f64>,
}

pub fn certify_via_canonical(f: &CompartmentalMatrix, policy: &SigmaPolicy) -> Result<LyapunovCertificate> {
    Ok(certify_via_canonical_detailed(f, policy)?.certificate)
}

pub fn certify_via_canonical_detailed(f: &CompartmentalMatrix, policy: &SigmaPolicy) -> Result<CanonicalCertificate> {
    let canon = canonicalize(f)?;
    let family = fit_tight_family(&canon.a, canon.l())?;
    let cert = theorem1_certificate(&family, &policy.sigma(&family))?;
    let v = canon.pull_back(&cert.v);
    Ok(CanonicalCertificate {
        certificate: LyapunovCertificate::new(v, cert.lambda, CertificateSource::Theorem1)?,
        canonicalization: canon,
        canonical_v: cert.v,
        family,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, check_outflow_connected};
    use crate::random::{random_compartmental, random_family, random_family_member, random_outflow_connected, MatrixShape};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cm(rows: &[Vec<f64>]) -> CompartmentalMatrix {
        CompartmentalMatrix::from_rows(rows).unwrap()
    }

    fn f1() -> CompartmentalMatrix {
        cm(&[vec![-1.0, 0.0], vec![1.0, -1.0]])
    }

    fn f2() -> CompartmentalMatrix {
        cm(&[vec![-1.0, 1.0], vec![0.0, -1.0]])
    }

    /// Hand-rolled oracle for the p recursion, written as nested sums.
    fn p_oracle(a: &[f64], b: f64, sigma: &[f64]) -> Vec<f64> {
        let mut p: Vec<f64> = Vec::new();
        for i in 1..=sigma.len() {
            let mut s = 0.0;
            for j in 1..i {
                s += j as f64 * p[j - 1];
            }
            p.push(if i == 1 { sigma[0] } else { sigma[i - 1] + b / a[i - 1] * s });
        }
        p
    }

    #[test]
    fn membership_examples() {
        let fam = FamilyParams::new(2, 2, vec![1.0, 1.0], 0.0).unwrap();
        let m = family_membership(&f1(), &fam, 1e-12);
        assert!(m.is_member);
        assert_eq!(m.binding, vec![1, 2]);
        let m = family_membership(&f2(), &fam, 1e-12);
        assert!(!m.is_member);
        assert!(m
            .violations
            .iter()
            .any(|v| matches!(v, FamilyViolation::TailColumnSum { col: 2, .. })));
        let m = family_membership(&CompartmentalMatrix::zeros(2), &fam, 1e-12);
        assert!(!m.is_member);
        assert!(FamilyParams::new(2, 2, vec![0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn theorem1_examples() {
        let fam = FamilyParams::new(2, 2, vec![1.0, 1.0], 0.0).unwrap();
        let c = theorem1_certificate(&fam, &[1.0, 1.0]).unwrap();
        assert_eq!(c.v, vec![2.0, 1.0]);
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.gamma, 2.0);
        assert!(verify_certificate(&f1(), &c, 1e-12).holds);

        let fam = FamilyParams::new(3, 3, vec![1.0, 1.0, 1.0], 1.0).unwrap();
        assert_eq!(theorem1_p(&fam, &[1.0, 1.0, 1.0]).unwrap(), vec![1.0, 2.0, 6.0]);
        let c = theorem1_certificate(&fam, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(c.v, vec![9.0, 8.0, 6.0]);
        assert!((c.lambda - 1.0 / 9.0).abs() < 1e-15);

        let fam = FamilyParams::new(3, 2, vec![2.0, 3.0], 0.0).unwrap();
        assert_eq!(theorem1_p(&fam, &[0.5, 4.0]).unwrap(), vec![0.5, 4.0]);
        assert!(theorem1_certificate(&fam, &[1.0, 0.0]).is_err());
        assert!(theorem1_certificate(&fam, &[1.0]).is_err());
    }

    #[test]
    fn l_one_gives_uniform_weights() {
        let fam = FamilyParams::new(3, 1, vec![0.5], 2.0).unwrap();
        let c = theorem1_certificate(&fam, &[3.0]).unwrap();
        assert_eq!(c.v, vec![3.0; 3]);
        assert_eq!(c.lambda, 0.5);
        let neg_i = cm(&[vec![-1.0, 0.0], vec![0.0, -1.0]]);
        let c = certify_via_canonical(&neg_i, &SigmaPolicy::Ones).unwrap();
        assert_eq!(c.v, vec![1.0, 1.0]);
        assert_eq!(c.lambda, 1.0);
    }

    #[test]
    fn verification_examples() {
        let ok = LyapunovCertificate::new(vec![2.0, 1.0], 0.5, CertificateSource::User).unwrap();
        let r = verify_certificate(&f1(), &ok, 0.0);
        assert!(r.holds);
        assert_eq!(r.margins, vec![0.0, 0.5]);
        let bad = LyapunovCertificate::new(vec![1.0, 1.0], 1.0, CertificateSource::User).unwrap();
        let r = verify_certificate(&f1(), &bad, 1e-9);
        assert!(!r.holds);
        assert_eq!(r.worst_column, 1);
        assert!(!verify_certificate(&CompartmentalMatrix::zeros(2), &ok, 1e-9).holds);
        let json = serde_json::to_string(&ok).unwrap();
        assert_eq!(json, r#"{"v":[2.0,1.0],"lambda":0.5,"gamma":2.0,"source":"user"}"#);
    }

    #[test]
    fn linear_inverse_examples() {
        let c = linear_inverse_certificate(&f1()).unwrap();
        assert!((c.v[0] - 2.0).abs() < 1e-14 && (c.v[1] - 1.0).abs() < 1e-14);
        assert!((c.lambda - 0.5).abs() < 1e-14);
        assert_eq!(c.source, CertificateSource::LinearInverse);
        let c = linear_inverse_certificate(&cm(&[vec![-1.0, 0.0], vec![0.0, -1.0]])).unwrap();
        assert_eq!(c.v, vec![1.0, 1.0]);
        assert_eq!(c.lambda, 1.0);
        let trapped = cm(&[vec![-1.0, 0.0], vec![1.0, 0.0]]);
        let err = linear_inverse_certificate(&trapped).unwrap_err();
        assert!(err.to_string().contains("trap detection"));
    }

    #[test]
    fn via_canonical_examples() {
        let c = certify_via_canonical(&f2(), &SigmaPolicy::Ones).unwrap();
        assert_eq!(c.v, vec![1.0, 2.0]);
        assert_eq!(c.lambda, 0.5);
        assert!(verify_certificate(&f2(), &c, 1e-12).holds);
        let direct = theorem1_certificate(&FamilyParams::new(2, 2, vec![1.0, 1.0], 0.0).unwrap(), &[1.0, 1.0]).unwrap();
        assert_eq!(certify_via_canonical(&f1(), &SigmaPolicy::Ones).unwrap(), direct);
        let rev_chain = cm(&[vec![-1.0, 1.0, 0.0], vec![0.0, -1.0, 1.0], vec![0.0, 0.0, -1.0]]);
        let c = certify_via_canonical(&rev_chain, &SigmaPolicy::InverseA).unwrap();
        assert!(verify_certificate(&rev_chain, &c, 1e-12).holds);
    }

    #[test]
    fn theorem1_sound_on_random_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..=8);
            let fam = random_family(&mut rng, n);
            let sigma: Vec<f64> = (0..fam.l).map(|_| rng.random_range(0.5..2.0)).collect();
            let cert = theorem1_certificate(&fam, &sigma).unwrap().normalized();
            for _ in 0..200 {
                let f = random_family_member(&mut rng, &fam);
                let r = verify_certificate(&f, &cert, 1e-9);
                assert!(r.holds, "fam {fam:?} F {f:?} margins {:?}", r.margins);
            }
        }
    }

    use rand::Rng;

    proptest! {
        #[test]
        fn p_matches_oracle_and_v_is_ordered(seed in any::<u64>(), n in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fam = random_family(&mut rng, n);
            let sigma: Vec<f64> = (0..fam.l).map(|_| rng.random_range(0.1..3.0)).collect();
            let p = theorem1_p(&fam, &sigma).unwrap();
            let oracle = p_oracle(&fam.a, fam.b, &sigma);
            for (x, y) in p.iter().zip(&oracle) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs());
            }
            let c = theorem1_certificate(&fam, &sigma).unwrap();
            for k in 0..n - 1 {
                prop_assert!(c.v[k] >= c.v[k + 1]);
            }
            for k in 0..fam.l - 1 {
                prop_assert_eq!(c.v[k], p[k] + c.v[k + 1]);
            }
            for k in fam.l - 1..n {
                prop_assert_eq!(c.v[k], p[fam.l - 1]);
            }
        }

        #[test]
        fn linear_inverse_solves_exactly(seed in any::<u64>(), n in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_outflow_connected(&mut rng, n, &MatrixShape::default());
            let c = linear_inverse_certificate(&f).unwrap();
            let vf = f.matrix().vec_mul(&c.v);
            let scale = c.v.iter().copied().fold(1.0, f64::max);
            for x in vf {
                prop_assert!((x + 1.0).abs() <= 1e-10 * scale);
            }
            prop_assert!(verify_certificate(&f, &c, 1e-9).holds);
        }

        #[test]
        fn perturbation_closure(seed in any::<u64>(), n in 2usize..=7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fam = random_family(&mut rng, n);
            let a = random_family_member(&mut rng, &fam);
            let b = random_compartmental(&mut rng, n, &MatrixShape::default());
            let eps = b.matrix().max_above_diagonal().max(0.0);
            let widened = FamilyParams::new(n, fam.l, fam.a.clone(), fam.b + eps).unwrap();
            prop_assert!(family_membership(&a.add(&b).unwrap(), &widened, 1e-9).is_member);
        }

        #[test]
        fn via_canonical_verifies_in_original_coordinates(seed in any::<u64>(), n in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_outflow_connected(&mut rng, n, &MatrixShape::default());
            prop_assume!(check_outflow_connected(&build_graph(&f, 1e-12)).is_outflow_connected);
            let d = certify_via_canonical_detailed(&f, &SigmaPolicy::Ones).unwrap();
            prop_assert!(family_membership(&d.canonicalization.a, &d.family, 1e-12).is_member);
            prop_assert!(verify_certificate(&f, &d.certificate, 1e-9).holds);
        }
    }
}
