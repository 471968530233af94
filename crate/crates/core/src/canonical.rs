//! Outflow canonical form: detection and the layer-based permutation that
//! brings an outflow-connected matrix into it.

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, layer_decomposition};
use crate::matrix::{conjugate_by_permutation, CompartmentalMatrix, Permutation, SquareMatrix};
use crate::DEFAULT_STRICT_TOL;

/// Evidence for (or against) outflow canonical form.
///
/// `l` is the canonical index in the 1-based sense: columns `l..=n` have
/// strictly negative sums and every column `i < l` feeds a later compartment.
/// `l = 1` encodes the case where every column sum is negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalWitness {
    pub is_canonical: bool,
    pub l: Option<usize>,
    /// Columns with strictly negative sum.
    #[serde(with = "crate::one_based::vec")]
    pub negative_columns: Vec<usize>,
    /// For each column `i < l`, a row `j > i` with `F[j][i] > tol`, when one exists.
    pub feeders: Vec<Option<usize>>,
    /// Reason for rejection, when not canonical.
    pub reason: Option<String>,
}

pub fn check_canonical(f: &CompartmentalMatrix) -> CanonicalWitness {
    check_canonical_with_tol(f, DEFAULT_STRICT_TOL)
}

pub fn check_canonical_with_tol(f: &CompartmentalMatrix, tol: f64) -> CanonicalWitness {
    let n = f.n();
    let sums = f.column_sums();
    let negative_columns: Vec<usize> = (0..n).filter(|&i| sums[i] < -tol).collect();
    // Smallest candidate: one past the last column whose sum is not negative.
    // Larger l only adds feeder obligations, so it is the only one worth testing.
    let l0 = match (0..n).rev().find(|&i| sums[i] >= -tol) {
        None => 1,
        Some(last) => last + 2,
    };
    if l0 > n {
        return CanonicalWitness {
            is_canonical: false,
            l: None,
            negative_columns,
            feeders: Vec::new(),
            reason: Some(format!("column {n} sum {} is not negative", sums[n - 1])),
        };
    }
    // 1-based feeder rows reported for columns 1..l0-1.
    let feeders: Vec<Option<usize>> = (0..l0 - 1)
        .map(|i| ((i + 1)..n).find(|&j| f.get(j, i) > tol).map(|j| j + 1))
        .collect();
    match feeders.iter().position(Option::is_none) {
        Some(i) => CanonicalWitness {
            is_canonical: false,
            l: None,
            negative_columns,
            feeders,
            reason: Some(format!("column {} has no flow into a later compartment", i + 1)),
        },
        None => CanonicalWitness {
            is_canonical: true,
            l: Some(l0),
            negative_columns,
            feeders,
            reason: None,
        },
    }
}

/// Permutation `r`, its matrix `P` and `A = P F P^-1` on canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct Canonicalization {
    pub r: Permutation,
    pub a: CompartmentalMatrix,
    pub witness: CanonicalWitness,
}

impl Canonicalization {
    pub fn l(&self) -> usize {
        self.witness.l.unwrap_or(1)
    }

    /// `P[i][k] = 1` iff `k = r(i)`.
    pub fn p(&self) -> SquareMatrix {
        self.r.matrix()
    }

    /// Pull a vector in canonical coordinates back to the original ones:
    /// `out[r(i)] = v[i]`.
    pub fn pull_back(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (i, &vi) in v.iter().enumerate() {
            out[self.r.apply(i)] = vi;
        }
        out
    }
}

impl Serialize for Canonicalization {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Canonicalization", 3)?;
        st.serialize_field("r", &self.r)?;
        st.serialize_field("l", &self.l())?;
        st.serialize_field("A", self.a.matrix())?;
        st.end()
    }
}

pub fn canonicalize(f: &CompartmentalMatrix) -> Result<Canonicalization> {
    canonicalize_with_tol(f, DEFAULT_STRICT_TOL)
}

pub fn canonicalize_with_tol(f: &CompartmentalMatrix, tol: f64) -> Result<Canonicalization> {
    let layers = layer_decomposition(&build_graph(f, tol))?;
    let witness = check_canonical_with_tol(f, tol);
    if witness.is_canonical {
        return Ok(Canonicalization {
            r: Permutation::identity(f.n()),
            a: f.clone(),
            witness,
        });
    }
    // Deepest layer first, outflow layer last, ascending inside each layer.
    let order: Vec<usize> = layers.layers.iter().rev().flatten().copied().collect();
    let r = Permutation::new(order)?;
    let a = conjugate_by_permutation(f, &r)?;
    let witness = check_canonical_with_tol(&a, tol);
    let expected_l = f.n() + 1 - layers.layers[0].len();
    if !witness.is_canonical || witness.l != Some(expected_l) {
        return Err(Error::InvalidParameter(format!(
            "layer permutation did not reach canonical form (l = {:?}, expected {expected_l})",
            witness.l
        )));
    }
    Ok(Canonicalization { r, a, witness })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::check_outflow_connected;
    use crate::random::{random_outflow_connected, MatrixShape};
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

    #[test]
    fn worked_pair() {
        let w = check_canonical(&f1());
        assert!(w.is_canonical);
        assert_eq!(w.l, Some(2));
        assert_eq!(w.feeders, vec![Some(2)]);
        let w = check_canonical(&f2());
        assert!(!w.is_canonical);
        assert!(w.reason.unwrap().contains("column 2"));

        let c = canonicalize(&f2()).unwrap();
        assert_eq!(c.r.to_one_based(), vec![2, 1]);
        assert_eq!(c.a, f1());
        assert_eq!(c.l(), 2);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, r#"{"r":[2,1],"l":2,"A":{"n":2,"entries":[[-1.0,0.0],[1.0,-1.0]]}}"#);

        let c = canonicalize(&f1()).unwrap();
        assert!(c.r.is_identity());
        assert_eq!(c.a, f1());
    }

    #[test]
    fn all_negative_columns_give_l_one() {
        let f = cm(&[vec![-2.0, 1.0], vec![1.0, -2.0]]);
        let w = check_canonical(&f);
        assert!(w.is_canonical);
        assert_eq!(w.l, Some(1));
        assert!(w.feeders.is_empty());
    }

    #[test]
    fn chain_is_reversed() {
        // flows 1 -> 2 -> 3, outflow only at 3, listed in reverse index order
        let f = cm(&[vec![-1.0, 0.0, 0.0], vec![1.0, -1.0, 0.0], vec![0.0, 1.0, -1.0]]);
        assert!(check_canonical(&f).is_canonical);
        let rev = cm(&[vec![-1.0, 1.0, 0.0], vec![0.0, -1.0, 1.0], vec![0.0, 0.0, -1.0]]);
        let c = canonicalize(&rev).unwrap();
        assert_eq!(c.r.to_one_based(), vec![3, 2, 1]);
        assert!(check_canonical(&c.a).is_canonical);
        assert_eq!(c.a, f);
    }

    #[test]
    fn trapped_matrix_is_rejected() {
        let f = cm(&[vec![-1.0, 0.0], vec![1.0, 0.0]]);
        match canonicalize(&f) {
            Err(Error::NotOutflowConnected(rep)) => assert_eq!(rep.trap, Some(vec![0, 1])),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pull_back_inverts_conjugation() {
        let c = canonicalize(&f2()).unwrap();
        assert_eq!(c.pull_back(&[2.0, 1.0]), vec![1.0, 2.0]);
        assert_eq!(c.p().matmul(f2().matrix()).matmul(&c.p().transpose()), *c.a.matrix());
    }

    proptest! {
        #[test]
        fn random_connected_matrices_canonicalize(seed in any::<u64>(), n in 2usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_outflow_connected(&mut rng, n, &MatrixShape::default());
            let c = canonicalize(&f).unwrap();
            prop_assert!(c.witness.is_canonical);
            prop_assert!(check_canonical(&c.a).is_canonical);
            prop_assert!(check_outflow_connected(&build_graph(&c.a, DEFAULT_STRICT_TOL)).is_outflow_connected);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(c.a.get(i, j), f.get(c.r.apply(i), c.r.apply(j)));
                }
            }
        }
    }
}
