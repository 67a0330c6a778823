//! Seed derivation and the seeded generators shared by every sampling path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// SplitMix64 finalizer. Used to derive independent sub-seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Stable 64-bit FNV-1a hash, used to seed per-request work from string ids.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n` Gaussian points around `center` with per-coordinate standard deviation
/// `scale`. This is the local neighborhood used by the sampling explainers,
/// by fidelity estimation and by verification.
pub fn local_probes(center: &[f64], n: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            center
                .iter()
                .map(|c| c + scale * standard_normal(&mut rng))
                .collect()
        })
        .collect()
}

/// `n` points around `center` whose offsets are each marginally
/// `N(0, scale^2 I)` but jointly structured to cut the variance of
/// neighborhood averages: offsets come in antithetic pairs `+v, -v`, and the
/// pair directions within a block of up to `d` pairs are orthogonal, each
/// with an independent chi-distributed radius. An odd `n` ends with one
/// plain Gaussian point.
pub fn orthogonal_probes(center: &[f64], n: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let d = center.len();
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(n);
    if n % 2 == 1 {
        out.push(center.to_vec());
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    for _ in 0..n / 2 {
        if basis.len() == d {
            basis.clear();
        }
        let mut u: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        for b in &basis {
            let dot: f64 = u.iter().zip(b).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-12 {
            basis.clear();
            continue;
        }
        u.iter_mut().for_each(|a| *a /= norm);
        let radius = (0..d).map(|_| standard_normal(&mut rng).powi(2)).sum::<f64>().sqrt();
        let step = scale * radius;
        out.push(center.iter().zip(&u).map(|(c, v)| c + step * v).collect());
        out.push(center.iter().zip(&u).map(|(c, v)| c - step * v).collect());
        basis.push(u);
    }
    while out.len() < n {
        out.push(center.iter().map(|c| c + scale * standard_normal(&mut rng)).collect());
    }
    out
}
