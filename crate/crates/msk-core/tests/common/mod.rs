//! Random system and measure generators shared by the integration tests.
#![allow(dead_code)]

use msk_core::model::SpeciesSystem;
use msk_core::parisi::DiscreteOrderedMeasure;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Species ratios drawn uniformly from the simplex, kept away from zero.
pub fn random_lambda(rng: &mut ChaCha8Rng, species: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..species).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut lambda: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let head: f64 = lambda[..species - 1].iter().sum();
    lambda[species - 1] = 1.0 - head;
    lambda
}

/// Symmetric `Δ²` with every entry in `[lo, hi]`, hence irreducible.
pub fn random_delta2(rng: &mut ChaCha8Rng, species: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; species]; species];
    for i in 0..species {
        for j in 0..=i {
            let v = rng.gen_range(lo..hi);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// An irreducible system with 2 or 3 species and a nonzero field.
pub fn random_field_system(rng: &mut ChaCha8Rng) -> SpeciesSystem {
    let species = rng.gen_range(2..=3);
    let lambda = random_lambda(rng, species);
    let delta2 = random_delta2(rng, species, 0.05, 1.5);
    let tau2: Vec<f64> = (0..species).map(|_| rng.gen_range(0.05..1.0)).collect();
    SpeciesSystem::new(lambda, delta2, tau2).unwrap()
}

/// An irreducible zero-field system with 2 or 3 species.
pub fn random_zero_field_system(rng: &mut ChaCha8Rng, delta_hi: f64) -> SpeciesSystem {
    let species = rng.gen_range(2..=3);
    let lambda = random_lambda(rng, species);
    let delta2 = random_delta2(rng, species, 0.05, delta_hi);
    SpeciesSystem::new(lambda, delta2, vec![0.0; species]).unwrap()
}

/// An irreducible system with `species` species, field entries possibly zero.
pub fn random_system(rng: &mut ChaCha8Rng, species: usize) -> SpeciesSystem {
    let lambda = random_lambda(rng, species);
    let delta2 = random_delta2(rng, species, 0.05, 1.5);
    let tau2: Vec<f64> = (0..species)
        .map(|_| {
            if rng.gen_bool(0.2) {
                0.0
            } else {
                rng.gen_range(0.0..1.0)
            }
        })
        .collect();
    SpeciesSystem::new(lambda, delta2, tau2).unwrap()
}

/// A random point of `[0, 1]^S`.
pub fn random_overlap(rng: &mut ChaCha8Rng, species: usize) -> Vec<f64> {
    (0..species).map(|_| rng.gen::<f64>()).collect()
}

/// A random measure with `levels` ζ values, `ζ₀ = 0`, and entrywise ordered
/// interior levels kept `margin` away from each other and from the ends.
pub fn random_measure(
    rng: &mut ChaCha8Rng,
    levels: usize,
    species: usize,
    margin: f64,
) -> DiscreteOrderedMeasure {
    let mut zeta: Vec<f64> = (1..levels).map(|_| rng.gen_range(0.05..0.95)).collect();
    zeta.sort_by(f64::total_cmp);
    zeta.insert(0, 0.0);
    for k in 1..zeta.len() {
        if zeta[k] <= zeta[k - 1] + 0.02 {
            zeta[k] = zeta[k - 1] + 0.02;
        }
    }
    let interior = levels - 1;
    let mut q = vec![vec![0.0; species]; interior];
    for s in 0..species {
        let mut col: Vec<f64> = (0..interior)
            .map(|_| rng.gen_range(margin..1.0 - margin))
            .collect();
        col.sort_by(f64::total_cmp);
        for k in 1..interior {
            if col[k] < col[k - 1] + margin {
                col[k] = col[k - 1] + margin;
            }
        }
        for (l, v) in col.into_iter().enumerate() {
            q[l][s] = v.min(1.0 - margin);
        }
    }
    DiscreteOrderedMeasure::new(zeta, q).unwrap()
}

/// A random admissible perturbation of `sys` with the same species count.
pub fn perturbed_system(rng: &mut ChaCha8Rng, sys: &SpeciesSystem, size: f64) -> SpeciesSystem {
    let n = sys.species_count();
    let lambda = if n > 1 && rng.gen_bool(0.5) {
        let mut l: Vec<f64> = sys
            .lambda()
            .iter()
            .map(|v| (v * (1.0 + rng.gen_range(-size..size))).max(1e-3))
            .collect();
        let total: f64 = l.iter().sum();
        l.iter_mut().for_each(|v| *v /= total);
        let head: f64 = l[..n - 1].iter().sum();
        l[n - 1] = 1.0 - head;
        l
    } else {
        sys.lambda().to_vec()
    };
    let mut delta2 = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let v = (sys.delta2()[(i, j)] + rng.gen_range(-size..size)).max(0.0);
            delta2[i][j] = v;
            delta2[j][i] = v;
        }
    }
    let tau2: Vec<f64> = sys
        .tau2()
        .iter()
        .map(|t| (t + rng.gen_range(-size..size)).max(0.0))
        .collect();
    SpeciesSystem::new(lambda, delta2, tau2).unwrap()
}
