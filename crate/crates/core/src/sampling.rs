//! Deterministic low-discrepancy sampling of boxes.
//!
//! Points come from a Halton sequence with a seeded Cranley-Patterson
//! rotation, followed by the box corners (all of them when there are at most
//! [`MAX_CORNERS`], otherwise a seeded subset).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SAMPLES: usize = 4096;
pub const MAX_CORNERS: usize = 4096;

const PRIMES: [u32; 64] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107,
    109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229,
    233, 239, 241, 251, 257, 263, 269, 271, 277, 281, 283, 293, 307, 311,
];

fn radical_inverse(mut k: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while k > 0 {
        r += (k % b) as f64 * f;
        k /= b;
        f *= inv;
    }
    r
}

fn prime(d: usize) -> u32 {
    if d < PRIMES.len() {
        return PRIMES[d];
    }
    // Dimensions beyond the table are rare; find the next primes by trial division.
    let mut count = PRIMES.len() - 1;
    let mut p = PRIMES[count];
    while count < d {
        p += 2;
        if (3..).step_by(2).take_while(|q| q * q <= p).all(|q| p % q != 0) {
            count += 1;
        }
    }
    p
}

/// How many points to draw and from which seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub samples: usize,
    pub seed: u64,
    pub include_corners: bool,
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            include_corners: true,
        }
    }
}

impl SamplePlan {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            include_corners: true,
        }
    }
}

/// Rotated Halton points in `[0, 1)^dim`.
pub fn unit_points(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random()).collect();
    let bases: Vec<u32> = (0..dim).map(prime).collect();
    (0..count)
        .map(|k| {
            bases
                .iter()
                .zip(&shift)
                .map(|(&b, &s)| {
                    // Skip index 0, which is the origin in every dimension.
                    let u = radical_inverse(k as u64 + 1, b) + s;
                    u - u.floor()
                })
                .collect()
        })
        .collect()
}

/// Corners of `[lower, upper]`, all of them or a seeded subset of `MAX_CORNERS`.
pub fn corners(lower: &[f64], upper: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let n = lower.len();
    let pick = |bits: &dyn Fn(usize) -> bool| -> Vec<f64> {
        (0..n).map(|i| if bits(i) { upper[i] } else { lower[i] }).collect()
    };
    if n < 63 && (1usize << n) <= MAX_CORNERS {
        (0..(1usize << n)).map(|m| pick(&|i| m >> i & 1 == 1)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut out = vec![lower.to_vec(), upper.to_vec()];
        while out.len() < MAX_CORNERS {
            let bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            out.push(pick(&|i| bits[i]));
        }
        out
    }
}

/// Points of the box `[lower, upper]` following `plan`. Infinite bounds are
/// not allowed.
pub fn box_points(lower: &[f64], upper: &[f64], plan: &SamplePlan) -> Vec<Vec<f64>> {
    assert_eq!(lower.len(), upper.len());
    let mut pts: Vec<Vec<f64>> = unit_points(lower.len(), plan.samples, plan.seed)
        .into_iter()
        .map(|u| {
            u.iter()
                .enumerate()
                .map(|(i, ui)| lower[i] + ui * (upper[i] - lower[i]))
                .collect()
        })
        .collect();
    if plan.include_corners {
        pts.extend(corners(lower, upper, plan.seed));
    }
    pts
}
