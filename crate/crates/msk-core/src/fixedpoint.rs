//! The overlap fixed-point map `F(p)_s = E tanh²(z·sqrt(τ²_s + 2(Δ²Λp)_s))`,
//! its maximal fixed point `q*`, the classification of fixed points, and the
//! sign regions of `G(q) = F(q) − q`.

use nalgebra::{DMatrix, DVector};

use crate::error::{MskError, Result};
use crate::gauss::QuadratureSpec;
use crate::model::{spectral_radius, SpeciesSystem};
use crate::special::sech;

/// Default sup-norm tolerance on the solver step.
pub const DEFAULT_TOL: f64 = 1e-11;
/// Default iteration cap.
pub const DEFAULT_MAX_ITERATIONS: usize = 50_000;
/// Plain monotone iterations performed before switching to Newton steps.
const PLAIN_ITERATIONS: usize = 200;
/// Rounding slack allowed when checking monotonicity of the iterates.
const MONOTONE_SLACK: f64 = 1e-14;
/// Extra Newton steps taken after the step criterion is met.
const POLISH_STEPS: usize = 2;

/// Structure of the fixed-point set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FixedPointClass {
    /// `τ² ≠ 0`: a unique fixed point, strictly positive.
    UniqueInterior,
    /// `τ² = 0` and `ρ(Δ²Λ) ≤ 1/2`: zero is the only fixed point.
    ZeroOnly,
    /// `τ² = 0` and `ρ(Δ²Λ) > 1/2`: zero and one strictly positive fixed point.
    ZeroAndInterior,
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Sup-norm tolerance on the step.
    pub tol: f64,
    /// Total iteration cap (plain and Newton steps).
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

/// Result of [`solve_qstar`].
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FixedPointReport {
    /// Maximal fixed point, reached from `𝟙`.
    pub q_star: Vec<f64>,
    /// Fixed point reached from `𝟘`.
    pub q_min: Vec<f64>,
    /// Iterations used by both runs together.
    pub iterations: usize,
    /// `‖F(q*) − q*‖∞`.
    pub residual: f64,
    /// Structure of the fixed-point set, from `τ²` and `ρ(Δ²Λ)`.
    pub classification: FixedPointClass,
    /// `ρ(Δ²Λ)`.
    pub rho_delta2_lambda: f64,
    /// Whether the numerical gap `‖q* − q_min‖∞` agrees with `classification`
    /// (gap above `100·tol` exactly when two fixed points are expected).
    pub gap_consistent: bool,
    /// Whether both plain iteration phases were monotone step by step.
    pub monotone: bool,
}

/// `F(p)` for `p ∈ [0, 1]^S`.
pub fn f_map(sys: &SpeciesSystem, p: &[f64], spec: &QuadratureSpec) -> Result<Vec<f64>> {
    sys.check_overlap(p)?;
    let out = f_map_unchecked(sys, p, spec);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(MskError::NonFinite("fixed-point map".into()));
    }
    Ok(out)
}

pub(crate) fn f_map_unchecked(sys: &SpeciesSystem, p: &[f64], spec: &QuadratureSpec) -> Vec<f64> {
    sys.field_variances(p)
        .into_iter()
        .map(|v| spec.expect(v.max(0.0).sqrt(), |x| x.tanh().powi(2)))
        .collect()
}

/// Jacobian of `F` at `p`: `∂F_s/∂p_t = E[sech²(1 − 3tanh²)] · 2Δ²_st λ_t`,
/// using `d/dv E f(√v z) = ½ E f''(√v z)`.
pub fn f_jacobian(sys: &SpeciesSystem, p: &[f64], spec: &QuadratureSpec) -> DMatrix<f64> {
    let n = sys.species_count();
    let slopes: Vec<f64> = sys
        .field_variances(p)
        .into_iter()
        .map(|v| {
            spec.expect(v.max(0.0).sqrt(), |x| {
                let s2 = sech(x).powi(2);
                let t2 = 1.0 - s2;
                s2 * (1.0 - 3.0 * t2)
            })
        })
        .collect();
    let dl = sys.delta2_lambda();
    DMatrix::from_fn(n, n, |s, t| 2.0 * slopes[s] * dl[(s, t)])
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Direction of a monotone run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    FromAbove,
    FromBelow,
}

struct RunOutcome {
    q: Vec<f64>,
    iterations: usize,
    residual: f64,
    monotone: bool,
}

/// The first `steps` plain iterates `F^k(start)`, `k = 0..=steps`.
pub fn fixed_point_trajectory(
    sys: &SpeciesSystem,
    start: &[f64],
    spec: &QuadratureSpec,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    sys.check_overlap(start)?;
    let mut out = vec![start.to_vec()];
    for _ in 0..steps {
        let next = f_map_unchecked(sys, out.last().expect("nonempty"), spec);
        out.push(next);
    }
    Ok(out)
}

fn run(
    sys: &SpeciesSystem,
    start: Vec<f64>,
    direction: Direction,
    spec: &QuadratureSpec,
    opts: &SolverOptions,
) -> Result<RunOutcome> {
    let mut q = start;
    let mut monotone = true;
    let mut iterations = 0;
    let plain = PLAIN_ITERATIONS.min(opts.max_iterations);
    while iterations < plain {
        let next = f_map_unchecked(sys, &q, spec);
        iterations += 1;
        let ordered = match direction {
            Direction::FromAbove => next.iter().zip(&q).all(|(a, b)| *a <= b + MONOTONE_SLACK),
            Direction::FromBelow => next.iter().zip(&q).all(|(a, b)| *a >= b - MONOTONE_SLACK),
        };
        monotone &= ordered;
        let step = sup_diff(&next, &q);
        q = next;
        if step < opts.tol {
            let residual = sup_diff(&f_map_unchecked(sys, &q, spec), &q);
            return Ok(RunOutcome {
                q,
                iterations,
                residual,
                monotone,
            });
        }
    }
    let n = sys.species_count();
    let mut fq = f_map_unchecked(sys, &q, spec);
    let mut residual = sup_diff(&fq, &q);
    let mut polish = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let jac = f_jacobian(sys, &q, spec);
        let lhs = DMatrix::identity(n, n) - jac;
        let rhs = DVector::from_iterator(n, fq.iter().zip(&q).map(|(f, x)| f - x));
        let delta = match lhs.lu().solve(&rhs) {
            Some(d) => d,
            None => rhs.clone(),
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = q
                .iter()
                .zip(delta.iter())
                .map(|(x, d)| (x + scale * d).clamp(0.0, 1.0))
                .collect();
            let fc = f_map_unchecked(sys, &cand, spec);
            let rc = sup_diff(&fc, &cand);
            if rc <= residual {
                accepted = Some((cand, fc, rc));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, fc, rc)) = accepted else {
            // No decrease is possible at this precision: the iterate is converged.
            break;
        };
        let step = sup_diff(&cand, &q);
        q = cand;
        fq = fc;
        residual = rc;
        if step < opts.tol {
            polish += 1;
            if polish > POLISH_STEPS {
                break;
            }
        }
    }
    if residual > opts.tol.max(1e-13) {
        return Err(MskError::NonConvergence {
            iterations,
            residual,
        });
    }
    Ok(RunOutcome {
        q,
        iterations,
        residual,
        monotone,
    })
}

/// Solves for the maximal fixed point `q*` (iterating from `𝟙`) and the fixed
/// point reached from `𝟘`, and classifies the fixed-point set.
///
/// The first phase is plain iteration of `F`, which is monotone from either
/// end. It is followed by damped Newton steps, which keep convergence fast
/// near criticality where plain iteration slows to a crawl.
pub fn solve_qstar(
    sys: &SpeciesSystem,
    spec: &QuadratureSpec,
    tol: f64,
) -> Result<FixedPointReport> {
    solve_qstar_with(
        sys,
        spec,
        &SolverOptions {
            tol,
            ..SolverOptions::default()
        },
    )
}

/// [`solve_qstar`] with explicit [`SolverOptions`].
pub fn solve_qstar_with(
    sys: &SpeciesSystem,
    spec: &QuadratureSpec,
    opts: &SolverOptions,
) -> Result<FixedPointReport> {
    sys.require_irreducible()?;
    spec.validate()?;
    if !(opts.tol > 0.0) {
        return Err(MskError::InvalidParameter(
            "solver tolerance must be positive".into(),
        ));
    }
    let n = sys.species_count();
    let rho = spectral_radius(&sys.delta2_lambda())?.rho;
    let zero_field = sys.is_zero_field();
    let classification = if !zero_field {
        FixedPointClass::UniqueInterior
    } else if rho <= 0.5 {
        FixedPointClass::ZeroOnly
    } else {
        FixedPointClass::ZeroAndInterior
    };

    let above = run(sys, vec![1.0; n], Direction::FromAbove, spec, opts)?;
    let below = if zero_field {
        // F(0) = 0 exactly when there is no external field.
        RunOutcome {
            q: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            monotone: true,
        }
    } else {
        run(sys, vec![0.0; n], Direction::FromBelow, spec, opts)?
    };
    let gap = sup_diff(&above.q, &below.q);
    let two_points = gap > 100.0 * opts.tol;
    let gap_consistent = two_points == (classification == FixedPointClass::ZeroAndInterior);

    let mut q_star = above.q;
    let mut residual = above.residual;
    if classification == FixedPointClass::ZeroOnly && !two_points {
        // Zero is the unique fixed point here; remove the iteration's remainder.
        q_star = vec![0.0; n];
        residual = 0.0;
    }
    Ok(FixedPointReport {
        q_star,
        q_min: below.q,
        iterations: above.iterations + below.iterations,
        residual,
        classification,
        rho_delta2_lambda: rho,
        gap_consistent,
        monotone: above.monotone && below.monotone,
    })
}

/// The limit of the iteration from `𝟙` without the irreducibility gate,
/// returned with its residual. For a reducible system this is the maximal
/// fixed point of each irreducible block side by side.
pub fn maximal_fixed_point(
    sys: &SpeciesSystem,
    spec: &QuadratureSpec,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, f64)> {
    spec.validate()?;
    let out = run(
        sys,
        vec![1.0; sys.species_count()],
        Direction::FromAbove,
        spec,
        opts,
    )?;
    Ok((out.q, out.residual))
}

/// Values of `G(q) = F(q) − q` and membership in the monotone regions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionReport {
    /// `G_s(q)` per species.
    pub g: Vec<f64>,
    /// All `G_s ≥ 0`.
    pub in_r1: bool,
    /// All `G_s ≤ 0` and `q ≠ 0`.
    pub in_r2: bool,
}

/// Evaluates `G(q)` and the region flags.
pub fn region_sign(sys: &SpeciesSystem, q: &[f64], spec: &QuadratureSpec) -> Result<RegionReport> {
    let f = f_map(sys, q, spec)?;
    let g: Vec<f64> = f.iter().zip(q).map(|(a, b)| a - b).collect();
    let in_r1 = g.iter().all(|&v| v >= 0.0);
    let in_r2 = g.iter().all(|&v| v <= 0.0) && q.iter().any(|&v| v != 0.0);
    Ok(RegionReport { g, in_r1, in_r2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(d2: f64, t2: f64) -> SpeciesSystem {
        SpeciesSystem::new(vec![1.0], vec![vec![d2]], vec![t2]).unwrap()
    }

    /// Independent oracle: bisection on `q ↦ E tanh²(z√(aq)) − q` over
    /// `[lo, 1]`, with the expectation evaluated by a fine midpoint rule.
    fn bisect_single(a: f64, lo: f64) -> f64 {
        let expect = |q: f64| {
            let s = (a * q).sqrt();
            let m = 20000;
            let h = 20.0 / m as f64;
            let mut tot = 0.0;
            let mut norm = 0.0;
            for k in 0..m {
                let z = -10.0 + (k as f64 + 0.5) * h;
                let w = (-0.5 * z * z).exp();
                tot += w * (s * z).tanh().powi(2);
                norm += w;
            }
            tot / norm
        };
        let (mut l, mut h) = (lo, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (l + h);
            if expect(mid) - mid > 0.0 {
                l = mid;
            } else {
                h = mid;
            }
        }
        0.5 * (l + h)
    }

    #[test]
    fn zero_field_at_zero_is_zero() {
        let s = single(0.7, 0.0);
        assert_eq!(
            f_map(&s, &[0.0], &QuadratureSpec::default()).unwrap(),
            vec![0.0]
        );
    }

    #[test]
    fn critical_single_species_is_zero_only() {
        let r = solve_qstar(&single(0.5, 0.0), &QuadratureSpec::default(), DEFAULT_TOL).unwrap();
        assert_eq!(r.classification, FixedPointClass::ZeroOnly);
        assert_eq!(r.q_star, vec![0.0]);
        assert!(r.gap_consistent);
    }

    #[test]
    fn supercritical_single_species_matches_bisection() {
        let r = solve_qstar(&single(0.75, 0.0), &QuadratureSpec::default(), DEFAULT_TOL).unwrap();
        assert_eq!(r.classification, FixedPointClass::ZeroAndInterior);
        let oracle = bisect_single(1.5, 1e-3);
        assert!(
            (r.q_star[0] - oracle).abs() < 1e-9,
            "{} vs {oracle}",
            r.q_star[0]
        );
        assert!(r.monotone && r.gap_consistent);
    }

    #[test]
    fn zero_interaction_matches_one_dimensional_expectation() {
        let s = SpeciesSystem::new(vec![1.0], vec![vec![0.0]], vec![0.64]).unwrap();
        let f = f_map(&s, &[0.3], &QuadratureSpec::default()).unwrap();
        // Oracle: fine midpoint rule for E tanh²(0.8 z).
        let m = 40000;
        let h = 20.0 / m as f64;
        let (mut tot, mut norm) = (0.0, 0.0);
        for k in 0..m {
            let z = -10.0 + (k as f64 + 0.5) * h;
            let w = (-0.5 * z * z).exp();
            tot += w * (0.8 * z).tanh().powi(2);
            norm += w;
        }
        assert!((f[0] - tot / norm).abs() < 1e-12);
    }

    #[test]
    fn two_species_with_field_agree_from_both_ends() {
        let s = SpeciesSystem::new(
            vec![0.4, 0.6],
            vec![vec![1.2, 0.7], vec![0.7, 0.9]],
            vec![1.0, 1.0],
        )
        .unwrap();
        let r = solve_qstar(&s, &QuadratureSpec::default(), DEFAULT_TOL).unwrap();
        assert_eq!(r.classification, FixedPointClass::UniqueInterior);
        assert!(sup_diff(&r.q_star, &r.q_min) < 1e-9);
        assert!(r.residual < 1e-11);
    }

    #[test]
    fn near_critical_zero_field_converges() {
        let s = single(0.5 + 1e-7, 0.0);
        let r = solve_qstar(&s, &QuadratureSpec::default(), DEFAULT_TOL).unwrap();
        assert_eq!(r.classification, FixedPointClass::ZeroAndInterior);
        assert!(r.q_star[0] > 0.0);
        // Leading order: q* ≈ (a − 1)/(2a²) with a = 2Δ².
        let a = 2.0 * (0.5 + 1e-7);
        let approx = (a - 1.0) / (2.0 * a * a);
        assert!((r.q_star[0] / approx - 1.0).abs() < 1e-5);
    }

    #[test]
    fn reducible_system_is_rejected() {
        let s = SpeciesSystem::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![1.0, 1.0],
        )
        .unwrap();
        assert!(matches!(
            solve_qstar(&s, &QuadratureSpec::default(), DEFAULT_TOL),
            Err(MskError::NotIrreducible)
        ));
    }

    #[test]
    fn region_examples() {
        let s = SpeciesSystem::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.5], vec![0.5, 1.0]],
            vec![0.3, 0.2],
        )
        .unwrap();
        let spec = QuadratureSpec::default();
        let r0 = region_sign(&s, &[0.0, 0.0], &spec).unwrap();
        assert!(r0.in_r1 && !r0.in_r2 && r0.g.iter().all(|&g| g > 0.0));
        let fp = solve_qstar(&s, &spec, DEFAULT_TOL).unwrap();
        let rq = region_sign(&s, &fp.q_star, &spec).unwrap();
        assert!(rq.g.iter().all(|g| g.abs() < 1e-10));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = SpeciesSystem::new(
            vec![0.3, 0.7],
            vec![vec![0.8, 0.4], vec![0.4, 1.1]],
            vec![0.2, 0.5],
        )
        .unwrap();
        let spec = QuadratureSpec::default();
        let p = [0.35, 0.6];
        let j = f_jacobian(&s, &p, &spec);
        let h = 1e-6;
        for t in 0..2 {
            let mut up = p;
            let mut dn = p;
            up[t] += h;
            dn[t] -= h;
            let fu = f_map(&s, &up, &spec).unwrap();
            let fd = f_map(&s, &dn, &spec).unwrap();
            for sp in 0..2 {
                let fdv = (fu[sp] - fd[sp]) / (2.0 * h);
                assert!((fdv - j[(sp, t)]).abs() < 1e-8);
            }
        }
    }
}
