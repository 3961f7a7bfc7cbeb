//! Exact enumeration of small systems along the interpolation
//!
//! ```text
//! H_{N,t}(σ) = √t/√N Σ_{i,j} J_ij σ_i σ_j
//!            + √(1−t) Σ_s sqrt(2(Δ²Λq*)_s) Σ_{i∈I_s} z_i σ_i + Σ_i h_i σ_i
//! ```
//!
//! over all `1 ≤ i, j ≤ N` (diagonal included), with independent
//! `J_ij ~ N(0, Δ²_{s(i)s(j)})`, `h_i ~ N(0, τ²_{s(i)})` and standard `z_i`.
//! The species ratios are the empirical `λ_{s,N} = |I_s|/N`, and `q*` is the
//! maximal fixed point of the system with those ratios, so the Gaussian
//! integration-by-parts identity for `d/dt E F_N` holds exactly at finite `N`.
//!
//! Configurations are bitmasks: bit `i` set means `σ_i = −1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{MskError, Result};
use crate::fixedpoint;
use crate::gauss::{McEstimate, QuadratureSpec, RunningStats};
use crate::model::SpeciesSystem;

/// Largest total site count for enumeration.
pub const MAX_SITES: usize = 24;
/// Largest total site count for the full two-replica overlap law.
pub const MAX_PAIR_LAW_SITES: usize = 16;
/// Largest total site count for the constrained two-replica free energy.
pub const MAX_CONSTRAINED_SITES: usize = 12;

const STREAM_COUPLINGS: u64 = 0;
const STREAM_FIELDS: u64 = 1;
const STREAM_CAVITY: u64 = 2;

/// Species layout, empirical system and `q*` shared by every disorder sample.
#[derive(Debug, Clone)]
pub struct FiniteModel {
    system: SpeciesSystem,
    sites: Vec<usize>,
    species_of: Vec<usize>,
    q_star: Vec<f64>,
    cavity_scale: Vec<f64>,
}

impl FiniteModel {
    /// Lays out `sites[s]` consecutive sites per species and solves for `q*`
    /// of the system with the empirical ratios. A reducible system gets the
    /// maximal fixed point of each block.
    pub fn new(sys: &SpeciesSystem, sites: &[usize], spec: &QuadratureSpec) -> Result<Self> {
        if sites.len() != sys.species_count() {
            return Err(MskError::Dimension(format!(
                "{} site counts for {} species",
                sites.len(),
                sys.species_count()
            )));
        }
        if sites.iter().any(|&n| n == 0) {
            return Err(MskError::InvalidParameter(
                "every species needs at least one site".into(),
            ));
        }
        let n: usize = sites.iter().sum();
        if n > MAX_SITES {
            return Err(MskError::TooLarge(format!(
                "{n} sites exceed the enumeration cap of {MAX_SITES}"
            )));
        }
        let lambda_n: Vec<f64> = sites.iter().map(|&k| k as f64 / n as f64).collect();
        let system = sys.with_lambda(lambda_n)?;
        let q_star = if system.is_irreducible() {
            fixedpoint::solve_qstar(&system, spec, fixedpoint::DEFAULT_TOL)?.q_star
        } else {
            fixedpoint::maximal_fixed_point(&system, spec, &fixedpoint::SolverOptions::default())?.0
        };
        let cavity_scale = system
            .cavity_variances(&q_star)
            .into_iter()
            .map(|v| v.max(0.0).sqrt())
            .collect();
        let species_of = sites
            .iter()
            .enumerate()
            .flat_map(|(s, &k)| std::iter::repeat(s).take(k))
            .collect();
        Ok(Self {
            system,
            sites: sites.to_vec(),
            species_of,
            q_star,
            cavity_scale,
        })
    }

    /// The system with the empirical ratios.
    pub fn system(&self) -> &SpeciesSystem {
        &self.system
    }

    /// Empirical ratios `λ_{s,N}`.
    pub fn lambda_n(&self) -> &[f64] {
        self.system.lambda()
    }

    /// `q*` of the empirical system.
    pub fn q_star(&self) -> &[f64] {
        &self.q_star
    }

    /// Total site count.
    pub fn sites(&self) -> usize {
        self.species_of.len()
    }

    /// Draws the disorder for `seed` and fixes the interpolation time.
    ///
    /// Couplings, fields and cavity fields come from separate streams of one
    /// seeded generator, so the same seed gives the same Gaussians at every
    /// `t`.
    pub fn sample(&self, t: f64, seed: u64) -> Result<FiniteInstance> {
        check_time(t)?;
        let n = self.sites();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_COUPLINGS);
        let delta2 = self.system.delta2();
        let mut j = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                let g: f64 = StandardNormal.sample(&mut rng);
                j.push(g * delta2[(self.species_of[a], self.species_of[b])].sqrt());
            }
        }
        rng.set_stream(STREAM_FIELDS);
        rng.set_word_pos(0);
        let tau2 = self.system.tau2();
        let h = (0..n)
            .map(|a| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * tau2[self.species_of[a]].sqrt()
            })
            .collect();
        rng.set_stream(STREAM_CAVITY);
        rng.set_word_pos(0);
        let z = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(FiniteInstance {
            sites_per_species: self.sites.clone(),
            species_of: self.species_of.clone(),
            lambda_n: self.lambda_n().to_vec(),
            t,
            seed,
            j,
            h,
            z,
            cavity_scale: self.cavity_scale.clone(),
            q_star: self.q_star.clone(),
            system: self.system.clone(),
        })
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(MskError::InvalidParameter(format!(
            "interpolation time {t} outside [0, 1]"
        )));
    }
    Ok(())
}

/// One disorder realization at a fixed interpolation time.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteInstance {
    /// `|I_s|`.
    pub sites_per_species: Vec<usize>,
    /// Species of each site.
    pub species_of: Vec<usize>,
    /// `λ_{s,N} = |I_s| / N`.
    pub lambda_n: Vec<f64>,
    /// Interpolation time.
    pub t: f64,
    /// Seed of the disorder.
    pub seed: u64,
    /// Couplings `J_ij`, row-major `N × N`, with their variances applied.
    pub j: Vec<f64>,
    /// External fields `h_i`.
    pub h: Vec<f64>,
    /// Standard Gaussians `z_i` of the cavity field.
    pub z: Vec<f64>,
    /// `sqrt(2(Δ²Λq*)_s)` per species.
    pub cavity_scale: Vec<f64>,
    /// `q*` of the empirical system.
    pub q_star: Vec<f64>,
    /// The system with the empirical ratios.
    pub system: SpeciesSystem,
}

/// Builds the model for `sites` and samples one instance.
pub fn sample_instance(
    sys: &SpeciesSystem,
    sites: &[usize],
    t: f64,
    seed: u64,
    spec: &QuadratureSpec,
) -> Result<FiniteInstance> {
    FiniteModel::new(sys, sites, spec)?.sample(t, seed)
}

impl FiniteInstance {
    /// Total site count `N`.
    pub fn sites(&self) -> usize {
        self.h.len()
    }

    /// The same Gaussians at another interpolation time.
    pub fn at_time(&self, t: f64) -> Result<Self> {
        check_time(t)?;
        Ok(Self { t, ..self.clone() })
    }

    /// The instance with every external field `h_i` negated.
    pub fn with_flipped_fields(&self) -> Self {
        Self {
            h: self.h.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }

    /// Coefficient of `z_i σ_i` in the Hamiltonian: `√(1−t)·sqrt(2(Δ²Λq*)_s)`.
    pub fn cavity_coefficient(&self, site: usize) -> f64 {
        (1.0 - self.t).sqrt() * self.cavity_scale[self.species_of[site]]
    }

    fn linear_fields(&self) -> Vec<f64> {
        (0..self.sites())
            .map(|i| self.h[i] + self.cavity_coefficient(i) * self.z[i])
            .collect()
    }

    /// `H_{N,t}` of one configuration, by direct summation.
    pub fn hamiltonian(&self, config: usize) -> f64 {
        let n = self.sites();
        let spin = |i: usize| if config >> i & 1 == 1 { -1.0 } else { 1.0 };
        let scale = (self.t / n as f64).sqrt();
        let mut quad = 0.0;
        for a in 0..n {
            for b in 0..n {
                quad += self.j[a * n + b] * spin(a) * spin(b);
            }
        }
        let lin: f64 = self
            .linear_fields()
            .iter()
            .enumerate()
            .map(|(i, f)| f * spin(i))
            .sum();
        scale * quad + lin
    }

    /// `H_{N,t}` of every configuration, indexed by bitmask, in `O(N·2^N)`
    /// by walking a Gray code and updating local fields.
    pub fn energies(&self) -> Vec<f64> {
        let n = self.sites();
        let scale = (self.t / n as f64).sqrt();
        let fields = self.linear_fields();
        // sym[a][b] = (J_ab + J_ba)·scale off the diagonal.
        let mut sym = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    sym[a * n + b] = (self.j[a * n + b] + self.j[b * n + a]) * scale;
                }
            }
        }
        let mut spins = vec![1.0; n];
        let mut local: Vec<f64> = (0..n)
            .map(|a| sym[a * n..(a + 1) * n].iter().sum())
            .collect();
        let mut energy = scale * self.j.iter().sum::<f64>() + fields.iter().sum::<f64>();
        let mut out = vec![0.0; 1usize << n];
        out[0] = energy;
        let mut mask = 0usize;
        for step in 1..(1usize << n) {
            let k = step.trailing_zeros() as usize;
            let s = spins[k];
            energy -= 2.0 * s * (local[k] + fields[k]);
            for a in 0..n {
                local[a] -= 2.0 * s * sym[a * n + k];
            }
            spins[k] = -s;
            mask ^= 1 << k;
            out[mask] = energy;
        }
        out
    }

    /// Bitmask of the sites of each species.
    fn species_masks(&self) -> Vec<usize> {
        let mut masks = vec![0usize; self.sites_per_species.len()];
        for (i, &s) in self.species_of.iter().enumerate() {
            masks[s] |= 1 << i;
        }
        masks
    }

    /// Overlap vector `R(σ¹, σ²)`.
    pub fn overlap_vector(&self, a: usize, b: usize) -> Vec<f64> {
        let diff = a ^ b;
        self.species_masks()
            .iter()
            .zip(&self.sites_per_species)
            .map(|(m, &k)| 1.0 - 2.0 * (diff & m).count_ones() as f64 / k as f64)
            .collect()
    }

    /// Lattice cell of a configuration difference, in mixed radix over the
    /// per-species disagreement counts.
    fn cell_of(&self, masks: &[usize], diff: usize) -> usize {
        let mut idx = 0;
        for (m, &k) in masks.iter().zip(&self.sites_per_species) {
            idx = idx * (k + 1) + (diff & m).count_ones() as usize;
        }
        idx
    }

    /// Overlap vector of a lattice cell.
    fn cell_overlap(&self, mut idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.sites_per_species.len()];
        for (s, &k) in self.sites_per_species.iter().enumerate().rev() {
            let d = idx % (k + 1);
            idx /= k + 1;
            out[s] = 1.0 - 2.0 * d as f64 / k as f64;
        }
        out
    }

    fn cell_count(&self) -> usize {
        self.sites_per_species.iter().map(|k| k + 1).product()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `F_N = (1/N) log Σ_σ exp H_{N,t}(σ)`.
pub fn exact_free_energy(inst: &FiniteInstance) -> f64 {
    log_sum_exp(&inst.energies()) / inst.sites() as f64
}

/// In-place Walsh-Hadamard transform, unnormalized.
fn walsh_hadamard(v: &mut [f64]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(2 * h) {
            for i in block..block + h {
                let (a, b) = (v[i], v[i + h]);
                v[i] = a + b;
                v[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Probability of one lattice point of the two-replica overlap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapMass {
    /// Overlap vector.
    pub r: Vec<f64>,
    /// Probability under the product Gibbs measure.
    pub mass: f64,
}

/// Gibbs moments of the two-replica overlap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapMoments {
    /// `⟨R_s⟩`.
    pub mean: Vec<f64>,
    /// `⟨R_s R_t⟩`.
    pub second: Vec<Vec<f64>>,
    /// `⟨B_N(R − q*)⟩` with the empirical ratios.
    pub b_centered: f64,
}

/// Result of [`overlap_statistics`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapStatistics {
    /// Moments of `R₁₂`.
    pub moments: OverlapMoments,
    /// Law of `R₁₂` on the lattice, present for `N ≤ MAX_PAIR_LAW_SITES`.
    pub pair_law: Option<Vec<OverlapMass>>,
}

/// Gibbs weights `G(σ)`, indexed by bitmask.
fn gibbs_weights(inst: &FiniteInstance) -> Vec<f64> {
    let energies = inst.energies();
    let log_z = log_sum_exp(&energies);
    energies.into_iter().map(|e| (e - log_z).exp()).collect()
}

/// Exact two-replica overlap statistics.
///
/// The Walsh-Hadamard transform of the Gibbs weights gives every correlation
/// `⟨Π_{i∈A} σ_i⟩` at once; the moments use the one- and two-point ones. The
/// law of `σ¹ ⊕ σ²` is the inverse transform of the squared spectrum.
pub fn overlap_statistics(inst: &FiniteInstance) -> Result<OverlapStatistics> {
    let n = inst.sites();
    let mut spectrum = gibbs_weights(inst);
    walsh_hadamard(&mut spectrum);
    let species = inst.sites_per_species.len();
    let mut mean = vec![0.0; species];
    let mut second = vec![vec![0.0; species]; species];
    for a in 0..n {
        let sa = inst.species_of[a];
        mean[sa] += spectrum[1 << a].powi(2);
        for b in 0..n {
            let sb = inst.species_of[b];
            let c = if a == b {
                1.0
            } else {
                spectrum[(1 << a) | (1 << b)]
            };
            second[sa][sb] += c * c;
        }
    }
    for s in 0..species {
        let ks = inst.sites_per_species[s] as f64;
        mean[s] /= ks;
        for t in 0..species {
            second[s][t] /= ks * inst.sites_per_species[t] as f64;
        }
    }
    let coupling = inst.system.coupling();
    let q = &inst.q_star;
    let mut b_centered = 0.0;
    for s in 0..species {
        for t in 0..species {
            b_centered +=
                coupling[(s, t)] * (second[s][t] - q[t] * mean[s] - q[s] * mean[t] + q[s] * q[t]);
        }
    }
    let pair_law = if n <= MAX_PAIR_LAW_SITES {
        let mut law = spectrum;
        for v in law.iter_mut() {
            *v *= *v;
        }
        walsh_hadamard(&mut law);
        let norm = (1usize << n) as f64;
        let masks = inst.species_masks();
        let mut cells = vec![0.0; inst.cell_count()];
        for (diff, v) in law.iter().enumerate() {
            cells[inst.cell_of(&masks, diff)] += v / norm;
        }
        Some(
            cells
                .into_iter()
                .enumerate()
                .map(|(idx, mass)| OverlapMass {
                    r: inst.cell_overlap(idx),
                    mass: mass.max(0.0),
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(OverlapStatistics {
        moments: OverlapMoments {
            mean,
            second,
            b_centered,
        },
        pair_law,
    })
}

/// `ψ_N(t, u) = (1/N) log Σ_{R(σ¹,σ²)=u} exp(H(σ¹) + H(σ²))` for every
/// lattice point `u`, by direct enumeration of the pairs.
pub fn constrained_psi_all(inst: &FiniteInstance) -> Result<Vec<(Vec<f64>, f64)>> {
    let n = inst.sites();
    if n > MAX_CONSTRAINED_SITES {
        return Err(MskError::TooLarge(format!(
            "pair enumeration is capped at {MAX_CONSTRAINED_SITES} sites, got {n}"
        )));
    }
    let energies = inst.energies();
    let masks = inst.species_masks();
    let cells = inst.cell_count();
    let size = 1usize << n;
    let cell_of: Vec<usize> = (0..size).map(|d| inst.cell_of(&masks, d)).collect();
    let mut max = vec![f64::NEG_INFINITY; cells];
    for diff in 0..size {
        let c = cell_of[diff];
        for a in 0..size {
            max[c] = max[c].max(energies[a] + energies[a ^ diff]);
        }
    }
    let mut sum = vec![0.0; cells];
    for diff in 0..size {
        let c = cell_of[diff];
        let shift = max[c];
        for a in 0..size {
            sum[c] += (energies[a] + energies[a ^ diff] - shift).exp();
        }
    }
    Ok((0..cells)
        .map(|c| (inst.cell_overlap(c), (max[c] + sum[c].ln()) / n as f64))
        .collect())
}

/// [`constrained_psi_all`] at one lattice point.
pub fn constrained_psi(inst: &FiniteInstance, u: &[f64]) -> Result<f64> {
    if u.len() != inst.sites_per_species.len() {
        return Err(MskError::Dimension(
            "overlap has the wrong number of species".into(),
        ));
    }
    let mut idx = 0;
    for (&v, &k) in u.iter().zip(&inst.sites_per_species) {
        let d = (1.0 - v) * k as f64 / 2.0;
        let rounded = d.round();
        if (d - rounded).abs() > 1e-9 || rounded < 0.0 || rounded > k as f64 {
            return Err(MskError::Constraint(format!(
                "{u:?} is not on the overlap lattice, so the constraint set is empty"
            )));
        }
        idx = idx * (k + 1) + rounded as usize;
    }
    Ok(constrained_psi_all(inst)?.swap_remove(idx).1)
}

/// Per-seed output record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    /// Disorder seed.
    pub seed: u64,
    /// Interpolation time.
    pub t: f64,
    /// Free energy `F_N`.
    #[serde(rename = "F_N")]
    pub free_energy: f64,
    /// Overlap moments.
    pub overlap_moments: OverlapMoments,
}

/// Free energy and overlap moments for each seed, in seed order.
pub fn sample_records(model: &FiniteModel, t: f64, seeds: &[u64]) -> Result<Vec<SampleRecord>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let inst = model.sample(t, seed)?;
            let stats = overlap_statistics(&inst)?;
            Ok(SampleRecord {
                seed,
                t,
                free_energy: exact_free_energy(&inst),
                overlap_moments: stats.moments,
            })
        })
        .collect()
}

/// Disorder averages over a seed list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DisorderAverage {
    /// `E F_N`.
    pub free_energy: McEstimate,
    /// `E⟨B_N(R₁₂ − q*)⟩`.
    pub b_centered: McEstimate,
}

/// Averages [`sample_records`] over the seeds.
pub fn disorder_average(records: &[SampleRecord]) -> DisorderAverage {
    let mut f = RunningStats::default();
    let mut b = RunningStats::default();
    for r in records {
        f.push(r.free_energy);
        b.push(r.overlap_moments.b_centered);
    }
    DisorderAverage {
        free_energy: f.estimate(),
        b_centered: b.estimate(),
    }
}

/// Comparison of the numerical `d/dt E F_N` with the integration-by-parts
/// prediction `½[B_N(𝟙 − q*) − E⟨B_N(R₁₂ − q*)⟩]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IbpReport {
    /// Interpolation time.
    pub t: f64,
    /// Central-difference derivative averaged over seeds.
    pub derivative: McEstimate,
    /// Prediction averaged over seeds.
    pub predicted: McEstimate,
    /// `derivative − predicted`.
    pub difference: f64,
    /// `sqrt(se₁² + se₂²)`.
    pub combined_std_error: f64,
}

impl IbpReport {
    /// Whether the difference is within `k` combined standard errors.
    pub fn within(&self, k: f64) -> bool {
        self.difference.abs() <= k * self.combined_std_error
    }
}

/// Evaluates the derivative identity at `t ∈ (0, 1)` with a central
/// difference of step `step` on shared Gaussians.
pub fn ibp_check(model: &FiniteModel, t: f64, step: f64, seeds: &[u64]) -> Result<IbpReport> {
    if !(step > 0.0 && t - step >= 0.0 && t + step <= 1.0) {
        return Err(MskError::InvalidParameter(format!(
            "central difference at t = {t} with step {step} leaves [0, 1]"
        )));
    }
    let one_minus: Vec<f64> = model.q_star.iter().map(|q| 1.0 - q).collect();
    let base = model.system.b2(&one_minus);
    let pairs: Vec<(f64, f64)> = seeds
        .par_iter()
        .map(|&seed| {
            let inst = model.sample(t, seed)?;
            let up = exact_free_energy(&inst.at_time(t + step)?);
            let dn = exact_free_energy(&inst.at_time(t - step)?);
            let stats = overlap_statistics(&inst)?;
            Ok((
                (up - dn) / (2.0 * step),
                0.5 * (base - stats.moments.b_centered),
            ))
        })
        .collect::<Result<_>>()?;
    let mut d = RunningStats::default();
    let mut p = RunningStats::default();
    for (a, b) in pairs {
        d.push(a);
        p.push(b);
    }
    let derivative = d.estimate();
    let predicted = p.estimate();
    Ok(IbpReport {
        t,
        derivative,
        predicted,
        difference: derivative.mean - predicted.mean,
        combined_std_error: derivative.std_error.hypot(predicted.std_error),
    })
}

/// Bound on `limsup |E F_N − E F̃_N|` for two parameter sets:
/// `max|Δ² − Δ̃²| + max(Δ² ∨ Δ̃²)·Σ|λ_sλ_t − λ̃_sλ̃_t| + max|τ² − τ̃²| + max(τ² ∨ τ̃²)·Σ|λ_s − λ̃_s|`.
pub fn free_energy_parameter_bound(a: &SpeciesSystem, b: &SpeciesSystem) -> Result<f64> {
    let n = a.species_count();
    if b.species_count() != n {
        return Err(MskError::Dimension(
            "systems have different species counts".into(),
        ));
    }
    let (la, lb) = (a.lambda(), b.lambda());
    let (da, db) = (a.delta2(), b.delta2());
    let (ta, tb) = (a.tau2(), b.tau2());
    let mut delta_diff: f64 = 0.0;
    let mut delta_max: f64 = 0.0;
    let mut pair_l1 = 0.0;
    for s in 0..n {
        for t in 0..n {
            delta_diff = delta_diff.max((da[(s, t)] - db[(s, t)]).abs());
            delta_max = delta_max.max(da[(s, t)].max(db[(s, t)]));
            pair_l1 += (la[s] * la[t] - lb[s] * lb[t]).abs();
        }
    }
    let tau_diff = (0..n).map(|s| (ta[s] - tb[s]).abs()).fold(0.0, f64::max);
    let tau_max = (0..n).map(|s| ta[s].max(tb[s])).fold(0.0, f64::max);
    let lambda_l1: f64 = (0..n).map(|s| (la[s] - lb[s]).abs()).sum();
    Ok(delta_diff + delta_max * pair_l1 + tau_diff + tau_max * lambda_l1)
}
