//! Seeded generators for random compartmental matrices and family members.
//! Used by tests, benches and the acceptance harness.

use rand::Rng;

use crate::certificate::FamilyParams;
use crate::graph::{build_graph, check_outflow_connected, minimal_traps};
use crate::matrix::{exact_sum, validate_compartmental, CompartmentalMatrix, SquareMatrix};
use crate::DEFAULT_STRICT_TOL;

/// Sparsity and magnitude knobs for random matrices.
#[derive(Debug, Clone)]
pub struct MatrixShape {
    /// Probability that a given off-diagonal flow is present.
    pub edge_prob: f64,
    /// Probability that a compartment leaks to the environment.
    pub outflow_prob: f64,
    /// Flow coefficients are drawn from `[min_entry, max_entry)`.
    pub min_entry: f64,
    pub max_entry: f64,
}

impl Default for MatrixShape {
    fn default() -> Self {
        Self {
            edge_prob: 0.35,
            outflow_prob: 0.3,
            min_entry: 0.05,
            max_entry: 2.0,
        }
    }
}

fn coefficient<R: Rng + ?Sized>(rng: &mut R, shape: &MatrixShape) -> f64 {
    rng.random_range(shape.min_entry..shape.max_entry)
}

/// Assemble `F` from flows `f[j][i]` (from `i` into `j`) and outflows `f0`.
fn assemble(f: &[Vec<f64>], f0: &[f64]) -> CompartmentalMatrix {
    let n = f0.len();
    let mut m = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m.set(j, i, f[j][i]);
            }
        }
        let out = exact_sum(std::iter::once(f0[i]).chain((0..n).filter(|&j| j != i).map(|j| f[j][i])));
        m.set(i, i, -out);
    }
    validate_compartmental(m, DEFAULT_STRICT_TOL).expect("assembled matrix is compartmental")
}

pub fn random_compartmental<R: Rng + ?Sized>(rng: &mut R, n: usize, shape: &MatrixShape) -> CompartmentalMatrix {
    let mut f = vec![vec![0.0; n]; n];
    let mut f0 = vec![0.0; n];
    for i in 0..n {
        for (j, row) in f.iter_mut().enumerate() {
            if i != j && rng.random_bool(shape.edge_prob) {
                row[i] = coefficient(rng, shape);
            }
        }
        if rng.random_bool(shape.outflow_prob) {
            f0[i] = coefficient(rng, shape);
        }
    }
    assemble(&f, &f0)
}

/// Random matrix, repaired until outflow connected by opening an outflow in
/// one vertex of every closed component that lacks one.
pub fn random_outflow_connected<R: Rng + ?Sized>(rng: &mut R, n: usize, shape: &MatrixShape) -> CompartmentalMatrix {
    let mut f = random_compartmental(rng, n, shape);
    loop {
        let g = build_graph(&f, DEFAULT_STRICT_TOL);
        if check_outflow_connected(&g).is_outflow_connected {
            return f;
        }
        let mut m = f.matrix().clone();
        for trap in minimal_traps(&g) {
            let v = trap[rng.random_range(0..trap.len())];
            m.set(v, v, m.get(v, v) - coefficient(rng, shape));
        }
        f = validate_compartmental(m, 0.0).expect("extra outflow keeps the matrix compartmental");
    }
}

/// Random matrix with a planted trap: a random nonempty vertex set with no
/// outflow and no edge leaving it. Returns the matrix and the planted set.
pub fn random_trapped<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    shape: &MatrixShape,
) -> (CompartmentalMatrix, Vec<usize>) {
    let base = random_compartmental(rng, n, shape);
    let mut inside = vec![false; n];
    let size = rng.random_range(1..=n);
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..size {
        let pick = rng.random_range(k..n);
        order.swap(k, pick);
        inside[order[k]] = true;
    }
    let mut f = vec![vec![0.0; n]; n];
    let mut f0 = vec![0.0; n];
    for i in 0..n {
        for (j, row) in f.iter_mut().enumerate() {
            if i != j && !(inside[i] && !inside[j]) {
                row[i] = base.get(j, i);
            }
        }
        if !inside[i] {
            f0[i] = -base.column_sums()[i];
        }
    }
    let mut k: Vec<usize> = order[..size].to_vec();
    k.sort_unstable();
    (assemble(&f, &f0), k)
}

/// Random family parameters of dimension `n` with `a_i` in `[0.2, 2)` and
/// `b` in `[0, 1.5)`; `l` ranges over `1..=n`.
pub fn random_family<R: Rng + ?Sized>(rng: &mut R, n: usize) -> FamilyParams {
    let l = rng.random_range(1..=n);
    let a = (0..l).map(|_| rng.random_range(0.2..2.0)).collect();
    let b = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.5) };
    FamilyParams::new(n, l, a, b).expect("generated parameters are valid")
}

/// Random member of `F(a, b, l)`: starts from a matrix attaining the bounds
/// and adds nonnegative below-diagonal mass, above-diagonal entries `<= b`
/// and extra outflow, each column's diagonal compensating.
pub fn random_family_member<R: Rng + ?Sized>(rng: &mut R, fam: &FamilyParams) -> CompartmentalMatrix {
    let n = fam.n;
    let l = fam.l;
    let mut f = vec![vec![0.0; n]; n];
    let mut f0 = vec![0.0; n];
    // Draws either the bound itself (tight) or something inside it.
    let slack = |rng: &mut R, scale: f64| -> f64 {
        if rng.random_bool(0.3) {
            0.0
        } else {
            rng.random_range(0.0..scale)
        }
    };
    for i in 0..n {
        for row in f.iter_mut().take(i) {
            row[i] = match rng.random_range(0..4) {
                0 => 0.0,
                1 => fam.b,
                _ => rng.random_range(0.0..=fam.b),
            };
        }
        if i + 1 < l {
            // Spread at least a_i of mass over the rows below.
            let total = fam.a[i] + slack(rng, fam.a[i]);
            let weights: Vec<f64> = ((i + 1)..n)
                .map(|_| if rng.random_bool(0.5) { rng.random::<f64>() } else { 0.0 })
                .collect();
            let wsum: f64 = weights.iter().sum();
            if wsum == 0.0 {
                let j = rng.random_range((i + 1)..n);
                f[j][i] = total;
            } else {
                for (k, w) in weights.iter().enumerate() {
                    f[i + 1 + k][i] = total * w / wsum;
                }
            }
            // Make sure rounding in the split never undercuts a_i.
            let got = exact_sum(((i + 1)..n).map(|j| f[j][i]));
            if got < fam.a[i] {
                let j = ((i + 1)..n).find(|&j| f[j][i] > 0.0).unwrap_or(i + 1);
                f[j][i] += fam.a[i] - got;
            }
            f0[i] = slack(rng, 1.0);
        } else {
            for row in f.iter_mut().skip(i + 1) {
                if rng.random_bool(0.4) {
                    row[i] = rng.random_range(0.0..2.0);
                }
            }
            f0[i] = fam.a[l - 1] + slack(rng, 1.0);
        }
    }
    assemble(&f, &f0)
}

/// Uniform random vector with entries in `[lo, hi)`.
pub fn random_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
