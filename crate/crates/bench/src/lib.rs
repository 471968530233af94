//! Seeded fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use comportal_core::certificate::FamilyParams;
use comportal_core::matrix::CompartmentalMatrix;
use comportal_core::random::{random_family, random_family_member, random_outflow_connected, MatrixShape};
use comportal_core::trm::TrmConfig;

pub const SEED: u64 = 0x5eed;

pub fn rng(salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(SEED ^ salt)
}

/// `count` outflow-connected matrices of size `n`.
pub fn outflow_connected(n: usize, count: usize) -> Vec<CompartmentalMatrix> {
    let mut r = rng(n as u64);
    let shape = MatrixShape::default();
    (0..count).map(|_| random_outflow_connected(&mut r, n, &shape)).collect()
}

/// A family with `l = n` layers and `count` of its members.
pub fn family_with_members(n: usize, count: usize) -> (FamilyParams, Vec<CompartmentalMatrix>) {
    let mut r = rng(1000 + n as u64);
    let fam = loop {
        let f = random_family(&mut r, n);
        if f.l == n {
            break f;
        }
    };
    let members = (0..count).map(|_| random_family_member(&mut r, &fam)).collect();
    (fam, members)
}

/// Greenshields road with unit free speed and jam density.
pub fn greenshields(n: usize) -> TrmConfig {
    TrmConfig::greenshields(n, 1.0, 1.0, 0.2, 0.5).expect("valid parameters")
}

/// Deterministic initial densities in `[0, 1]`.
pub fn densities(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_reproducible() {
        assert_eq!(outflow_connected(4, 3), outflow_connected(4, 3));
        let (fam, members) = family_with_members(5, 2);
        assert_eq!(fam.l, 5);
        assert_eq!(members.len(), 2);
        assert!(densities(12).iter().all(|d| (0.0..=1.0).contains(d)));
    }
}
