//! The replica-symmetric functional `RS(q)`, its vector field, the stability
//! matrix `Γ`, the de Almeida-Thouless criterion `ρ(ΓΔ²Λ)` against `1/2`, and
//! the interpolation path `(tΔ², τ² + (1 − t)2Δ²Λq*)`.

use std::f64::consts::LN_2;
use std::fmt;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{MskError, Result};
use crate::fixedpoint::{self, FixedPointClass, FixedPointReport};
use crate::gauss::QuadratureSpec;
use crate::model::{spectral_radius, SpeciesSystem};
use crate::special::{log_cosh, sech, stability_excess, tanh_sq_over_x_slope};

/// Below this distance from `1/2`, a zero-field system with a positive fixed
/// point has its AT excess evaluated by [`near_critical_excess`].
pub const NEAR_CRITICAL_BAND: f64 = 1e-6;

/// `RS(q)` together with its three terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RsValue {
    /// `log 2 + entropy + quadratic`.
    pub value: f64,
    /// `log 2`.
    pub log2: f64,
    /// `Σ_s λ_s E log cosh(z·sqrt(τ²_s + 2(Δ²Λq)_s))`.
    pub entropy: f64,
    /// `½ B(𝟙 − q, 𝟙 − q)`.
    pub quadratic: f64,
}

/// Evaluates `RS(q)`.
pub fn rs_value(sys: &SpeciesSystem, q: &[f64], spec: &QuadratureSpec) -> Result<RsValue> {
    sys.check_overlap(q)?;
    let entropy = log_cosh_term(sys, q, spec);
    let one_minus: Vec<f64> = q.iter().map(|v| 1.0 - v).collect();
    let quadratic = 0.5 * sys.b2(&one_minus);
    let value = LN_2 + entropy + quadratic;
    if !value.is_finite() {
        return Err(MskError::NonFinite("RS functional".into()));
    }
    Ok(RsValue {
        value,
        log2: LN_2,
        entropy,
        quadratic,
    })
}

/// `Σ_s λ_s E log cosh(z·sqrt(τ²_s + 2(Δ²Λq)_s))`.
pub(crate) fn log_cosh_term(sys: &SpeciesSystem, q: &[f64], spec: &QuadratureSpec) -> f64 {
    sys.field_variances(q)
        .iter()
        .zip(sys.lambda())
        .map(|(v, l)| l * spec.expect(v.max(0.0).sqrt(), log_cosh))
        .sum()
}

/// The RS vector field at a point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RsVectorField {
    /// `u(q) = F(q) − q`.
    pub u: Vec<f64>,
    /// Derivative of `RS` along `u`: `−B(u, u)`.
    pub directional_derivative: f64,
}

/// Evaluates `u(q) = F(q) − q` and the derivative of `RS` in direction `u`.
pub fn rs_vectorfield(
    sys: &SpeciesSystem,
    q: &[f64],
    spec: &QuadratureSpec,
) -> Result<RsVectorField> {
    let f = fixedpoint::f_map(sys, q, spec)?;
    let u: Vec<f64> = f.iter().zip(q).map(|(a, b)| a - b).collect();
    let directional_derivative = -sys.b2(&u);
    Ok(RsVectorField {
        u,
        directional_derivative,
    })
}

/// `Γ_ss = E sech⁴(z·sqrt(τ²_s + 2(Δ²Λq)_s))` at an arbitrary `q`.
pub fn gamma_at(sys: &SpeciesSystem, q: &[f64], spec: &QuadratureSpec) -> Vec<f64> {
    sys.field_variances(q)
        .into_iter()
        .map(|v| spec.expect(v.max(0.0).sqrt(), |x| sech(x).powi(4)))
        .collect()
}

/// RS or RSB verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    /// `ρ(ΓΔ²Λ) ≤ 1/2`.
    #[serde(rename = "RS")]
    Rs,
    /// `ρ(ΓΔ²Λ) > 1/2`.
    #[serde(rename = "RSB")]
    Rsb,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Rs => "RS",
            Phase::Rsb => "RSB",
        })
    }
}

/// Result of [`gamma_and_at`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ATReport {
    /// Maximal fixed point `q*`.
    pub q_star: Vec<f64>,
    /// Diagonal of `Γ` at `q*`.
    pub gamma_diag: Vec<f64>,
    /// `ρ(ΓΔ²Λ)`.
    pub rho: f64,
    /// `ρ(ΓΔ²Λ) − 1/2`, accurate even when it is far below the resolution of
    /// `rho` itself. The phase is decided by its sign.
    pub rho_excess: f64,
    /// Whether `rho_excess` came from the near-critical expansion.
    pub excess_from_expansion: bool,
    /// Phase verdict.
    pub phase: Phase,
    /// `RS(q*)`, the minimum of the RS functional.
    pub rs_min_value: f64,
    /// `ρ(Δ²Λ)`, reported alongside `rho` and never used to infer it.
    pub rho_delta2_lambda: f64,
    /// The fixed-point solve that produced `q*`.
    pub fixed_point: FixedPointReport,
}

/// Solves for `q*`, forms `Γ`, and evaluates the AT criterion.
pub fn gamma_and_at(sys: &SpeciesSystem, spec: &QuadratureSpec) -> Result<ATReport> {
    gamma_and_at_with(sys, spec, fixedpoint::DEFAULT_TOL)
}

/// [`gamma_and_at`] with an explicit fixed-point tolerance.
pub fn gamma_and_at_with(sys: &SpeciesSystem, spec: &QuadratureSpec, tol: f64) -> Result<ATReport> {
    let fp = fixedpoint::solve_qstar(sys, spec, tol)?;
    let q_star = fp.q_star.clone();
    let gamma_diag = gamma_at(sys, &q_star, spec);
    let mut m: DMatrix<f64> = sys.delta2_lambda();
    for (s, g) in gamma_diag.iter().enumerate() {
        m.row_mut(s).scale_mut(*g);
    }
    let rho = spectral_radius(&m)?.rho;
    let direct = rho - 0.5;
    let use_expansion = sys.is_zero_field()
        && fp.classification == FixedPointClass::ZeroAndInterior
        && q_star.iter().all(|&v| v > 0.0)
        && direct.abs() < NEAR_CRITICAL_BAND;
    let rho_excess = if use_expansion {
        near_critical_excess(sys, &q_star, spec)
    } else {
        direct
    };
    let phase = if rho_excess > 0.0 {
        Phase::Rsb
    } else {
        Phase::Rs
    };
    let rs_min_value = rs_value(sys, &q_star, spec)?.value;
    Ok(ATReport {
        q_star,
        gamma_diag,
        rho,
        rho_excess,
        excess_from_expansion: use_expansion,
        phase,
        rs_min_value,
        rho_delta2_lambda: fp.rho_delta2_lambda,
        fixed_point: fp,
    })
}

/// First-order evaluation of `ρ(ΓΔ²Λ) − 1/2` at a positive zero-field fixed
/// point `q`, free of the cancellation that ruins `ρ − 1/2` near criticality.
///
/// With `σ²_s = 2(Δ²Λq)_s` and `a_s = E tanh²(σ_s z)/σ²_s`, the fixed-point
/// equation says `q` is the Perron vector of `diag(2a)Δ²Λ` with eigenvalue 1,
/// and `λ_s q_s / a_s` is the matching left vector. `Γ − a` is then a diagonal
/// perturbation, and Gaussian integration by parts gives
/// `a_s = E g'(σ_s z)` with `g(x) = tanh²(x)/x`, so
/// `φ_s = Γ_s − a_s = E[sech⁴ − g'](σ_s z)` is computed without subtracting
/// nearly equal numbers. The result is
/// `½ Σ λ_s q_s² φ_s / a_s² / Σ λ_s q_s² / a_s`, exact for one species.
pub fn near_critical_excess(sys: &SpeciesSystem, q: &[f64], spec: &QuadratureSpec) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((v, l), qs) in sys.cavity_variances(q).into_iter().zip(sys.lambda()).zip(q) {
        let sigma = v.max(0.0).sqrt();
        let phi = spec.expect(sigma, stability_excess);
        let a = spec.expect(sigma, tanh_sq_over_x_slope);
        num += l * qs * qs * phi / (a * a);
        den += l * qs * qs / a;
    }
    0.5 * num / den
}

/// A point on the interpolation path.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatedProfile {
    /// Interpolation time.
    pub t: f64,
    /// `tΔ²`.
    pub delta2_t: DMatrix<f64>,
    /// `τ² + (1 − t)·2Δ²Λq*`.
    pub tau2_t: Vec<f64>,
    /// `RS*(t)`.
    pub rs_star_t: f64,
    /// `q*` of the original system.
    pub q_star: Vec<f64>,
    /// The interpolated system (same `λ`).
    pub system: SpeciesSystem,
}

/// Builds the interpolated profile at time `t`.
pub fn interpolate_profile(
    sys: &SpeciesSystem,
    t: f64,
    spec: &QuadratureSpec,
) -> Result<InterpolatedProfile> {
    if !(0.0..=1.0).contains(&t) {
        return Err(MskError::InvalidParameter(format!(
            "interpolation time {t} outside [0, 1]"
        )));
    }
    let fp = fixedpoint::solve_qstar(sys, spec, fixedpoint::DEFAULT_TOL)?;
    profile_at(sys, &fp.q_star, t, spec)
}

/// [`interpolate_profile`] with a precomputed `q*`.
pub fn profile_at(
    sys: &SpeciesSystem,
    q_star: &[f64],
    t: f64,
    spec: &QuadratureSpec,
) -> Result<InterpolatedProfile> {
    sys.check_overlap(q_star)?;
    let delta2_t = sys.delta2() * t;
    let tau2_t: Vec<f64> = sys
        .cavity_variances(q_star)
        .into_iter()
        .zip(sys.tau2())
        .map(|(c, tau)| tau + (1.0 - t) * c)
        .collect();
    let system = if t == 1.0 {
        sys.clone()
    } else {
        sys.with_profile(delta2_t.clone(), tau2_t.clone())?
    };
    Ok(InterpolatedProfile {
        t,
        delta2_t,
        tau2_t,
        rs_star_t: rs_star(sys, q_star, t, spec),
        q_star: q_star.to_vec(),
        system,
    })
}

/// `RS*(t) = log 2 + Σ λ_s E log cosh(z·sqrt(τ²_s + 2(Δ²Λq*)_s)) + (t/2)B(𝟙 − q*)`.
pub fn rs_star(sys: &SpeciesSystem, q_star: &[f64], t: f64, spec: &QuadratureSpec) -> f64 {
    let one_minus: Vec<f64> = q_star.iter().map(|v| 1.0 - v).collect();
    LN_2 + log_cosh_term(sys, q_star, spec) + 0.5 * t * sys.b2(&one_minus)
}
