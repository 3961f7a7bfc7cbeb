//! Exact-enumeration checks on small disordered systems.

use msk_core::finite_n::{
    self, constrained_psi_all, exact_free_energy, free_energy_parameter_bound, FiniteModel,
};
use msk_core::gauss::{QuadratureSpec, RunningStats};
use msk_core::model::SpeciesSystem;

fn single(d2: f64, t2: f64) -> SpeciesSystem {
    SpeciesSystem::new(vec![1.0], vec![vec![d2]], vec![t2]).unwrap()
}

fn two_species(scale: f64, t2: [f64; 2]) -> SpeciesSystem {
    SpeciesSystem::new(
        vec![0.5, 0.5],
        vec![
            vec![0.5 * scale, 0.3 * scale],
            vec![0.3 * scale, 0.4 * scale],
        ],
        t2.to_vec(),
    )
    .unwrap()
}

#[test]
fn overlap_concentrates_as_sites_grow() {
    let spec = QuadratureSpec::default();
    let sys = single(0.3, 0.5);
    let seeds: Vec<u64> = (0..200).collect();
    let spread: Vec<f64> = [8, 10, 12]
        .iter()
        .map(|&n| {
            let model = FiniteModel::new(&sys, &[n], &spec).unwrap();
            let records = finite_n::sample_records(&model, 1.0, &seeds).unwrap();
            finite_n::disorder_average(&records).b_centered.mean
        })
        .collect();
    assert!(
        spread[0] > spread[1] && spread[1] > spread[2],
        "E⟨B(R − q*)⟩ does not decrease with N: {spread:?}"
    );
}

#[test]
fn constrained_free_energies_recombine_to_twice_the_free_energy() {
    let spec = QuadratureSpec::default();
    let sys = two_species(1.0, [0.2, 0.1]);
    let model = FiniteModel::new(&sys, &[3, 3], &spec).unwrap();
    for seed in 0..5 {
        let inst = model.sample(1.0, seed).unwrap();
        let n = inst.sites() as f64;
        let two_f = 2.0 * exact_free_energy(&inst);
        let psi = constrained_psi_all(&inst).unwrap();
        let top = psi
            .iter()
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(top <= two_f + 1e-12, "ψ = {top} above 2F = {two_f}");
        let sum: f64 = psi.iter().map(|(_, v)| (n * (v - top)).exp()).sum();
        let recombined = top + sum.ln() / n;
        assert!(
            (recombined - two_f).abs() < 1e-10,
            "{recombined} vs {two_f}"
        );
    }
}

#[test]
fn free_energy_respects_the_parameter_bound_with_shared_disorder() {
    let spec = QuadratureSpec::default();
    let seeds: Vec<u64> = (0..300).collect();
    for (a, b) in [
        (two_species(1.0, [0.2, 0.1]), two_species(1.3, [0.2, 0.1])),
        (two_species(1.0, [0.2, 0.1]), two_species(1.0, [0.6, 0.1])),
        (two_species(0.8, [0.0, 0.3]), two_species(1.5, [0.4, 0.0])),
    ] {
        let bound = free_energy_parameter_bound(&a, &b).unwrap();
        let ma = FiniteModel::new(&a, &[5, 5], &spec).unwrap();
        let mb = FiniteModel::new(&b, &[5, 5], &spec).unwrap();
        let mut diff = RunningStats::default();
        for &seed in &seeds {
            let fa = exact_free_energy(&ma.sample(1.0, seed).unwrap());
            let fb = exact_free_energy(&mb.sample(1.0, seed).unwrap());
            diff.push(fa - fb);
        }
        let gap = diff.mean().abs();
        assert!(
            gap <= bound + 3.0 * diff.std_error(),
            "|ΔF| = {gap} exceeds bound {bound} (se {})",
            diff.std_error()
        );
    }
}

#[test]
fn flipping_the_direct_field_is_a_symmetry_in_distribution() {
    let spec = QuadratureSpec::default();
    let sys = two_species(1.0, [0.4, 0.2]);
    let model = FiniteModel::new(&sys, &[5, 5], &spec).unwrap();
    let mut diff = RunningStats::default();
    for seed in 0..300 {
        let inst = model.sample(0.5, seed).unwrap();
        diff.push(exact_free_energy(&inst) - exact_free_energy(&inst.with_flipped_fields()));
    }
    assert!(
        diff.std_error() > 0.0,
        "flipping h alone should change single instances at t < 1"
    );
    assert!(
        diff.mean().abs() <= 4.0 * diff.std_error(),
        "mean difference {} with se {}",
        diff.mean(),
        diff.std_error()
    );
}
