//! The two-replica Guerra-Talagrand 1-RSB upper bound on the coupled free
//! energy, its two specializations near `q*`, the `b`-gradient `W(u)` and the
//! resulting free-energy cost of forcing the replica overlap to `u`.
//!
//! With replica fields
//! `Y_{s,j} = h_s + z_{s,j}·sqrt(2(Δ²Λq₁)_s) + z′_{s,j}·sqrt(2(Δ²Λ(q₂−q₁))_s)`,
//! where `corr(z_{s,1}, z_{s,2}) = c_s` and `corr(z′_{s,1}, z′_{s,2}) = c′_s`,
//! the bound reads
//!
//! ```text
//! U = 2 log 2 + B(𝟙−q₂) − m(B(q₂) − B(q₁) + B(u) − B(c∘q₁)) − Σ λ_s b_s u_s
//!     + (1/m) Σ λ_s E log E′(cosh Y₁ cosh Y₂ cosh b_s + sinh Y₁ sinh Y₂ sinh b_s)^m
//! ```
//!
//! with `u = c∘q₁ + c′∘(q₂ − q₁)` and `B(x) = B(x, x)`. `E′` integrates the
//! inner pair `z′` with `h` and `z` held fixed, and `m = 0` is the limit
//! `E E′ log(…)`.
//!
//! Two parameter choices reproduce `2·RS*(1)` at `b = 0`:
//!
//! * [`Branch::Upper`]: `c = c′ = 𝟙`, `m = 1/2`, `q₁ = q*`, `q₂ = u`, for
//!   `Δ²Λ(u − q*) ⪰ 0`;
//! * [`Branch::Lower`]: `c = 𝟙`, `c′ = 𝟘`, `m = 0`, `q₁ = u`, `q₂ = q*`, for
//!   `Δ²Λ(u − q*) ⪯ 0`.
//!
//! In both cases the Hessian in `b` is diagonal with entries in `[0, λ_s]`, so
//! `b = −½Λ⁻¹W(u)` gives `U ≤ 2·RS*(1) − ¼ WᵀΛ⁻¹W`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{MskError, Result};
use crate::fixedpoint;
use crate::gauss::QuadratureSpec;
use crate::model::{check_unit_interval, spectral_radius, SpeciesSystem};
use crate::rs_at::{gamma_at, rs_star};
use crate::special::{log_cosh, sech};

/// Slack allowed in the ordering constraints on `Δ²Λq`.
const ORDER_SLACK: f64 = 1e-12;
/// Panels of the composite rule in `t` for the integral representation.
const T_PANELS: usize = 8;
/// Four-point Gauss-Legendre rule on `[−1, 1]`.
const GL4_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL4_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];
/// Golden-section iterations of the optional numerical minimization in `b`.
const GOLDEN_ITERATIONS: usize = 90;

/// Parameters `(c, c′; q₁, q₂; m, b)` of the bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GTParams {
    /// Outer replica correlations `c_s ∈ [−1, 1]`.
    pub c: Vec<f64>,
    /// Inner replica correlations `c′_s ∈ [−1, 1]`.
    pub c_prime: Vec<f64>,
    /// First overlap level.
    pub q1: Vec<f64>,
    /// Second overlap level, with `Δ²Λq₁ ⪯ Δ²Λq₂`.
    pub q2: Vec<f64>,
    /// Parisi parameter in `[0, 1]`.
    pub m: f64,
    /// Lagrange parameters.
    pub b: Vec<f64>,
}

impl GTParams {
    /// The choice of [`Branch::Upper`] at overlap `u`.
    pub fn upper(q_star: &[f64], u: &[f64], b: Vec<f64>) -> Self {
        let n = q_star.len();
        Self {
            c: vec![1.0; n],
            c_prime: vec![1.0; n],
            q1: q_star.to_vec(),
            q2: u.to_vec(),
            m: 0.5,
            b,
        }
    }

    /// The choice of [`Branch::Lower`] at overlap `u`.
    pub fn lower(q_star: &[f64], u: &[f64], b: Vec<f64>) -> Self {
        let n = q_star.len();
        Self {
            c: vec![1.0; n],
            c_prime: vec![0.0; n],
            q1: u.to_vec(),
            q2: q_star.to_vec(),
            m: 0.0,
            b,
        }
    }

    /// The constrained overlap `u = c∘q₁ + c′∘(q₂ − q₁)`.
    pub fn u(&self) -> Vec<f64> {
        (0..self.q1.len())
            .map(|s| self.c[s] * self.q1[s] + self.c_prime[s] * (self.q2[s] - self.q1[s]))
            .collect()
    }

    /// Checks dimensions, ranges and the ordering constraint.
    pub fn validate(&self, sys: &SpeciesSystem) -> Result<()> {
        let n = sys.species_count();
        for (name, v) in [
            ("c", &self.c),
            ("c_prime", &self.c_prime),
            ("q1", &self.q1),
            ("q2", &self.q2),
            ("b", &self.b),
        ] {
            if v.len() != n {
                return Err(MskError::Dimension(format!(
                    "{name} has {} entries, expected {n}",
                    v.len()
                )));
            }
        }
        if self
            .c
            .iter()
            .chain(&self.c_prime)
            .any(|v| !(v.abs() <= 1.0))
        {
            return Err(MskError::InvalidParameter(
                "correlations must lie in [-1, 1]".into(),
            ));
        }
        check_unit_interval(&self.q1)?;
        check_unit_interval(&self.q2)?;
        if !(0.0..=1.0).contains(&self.m) {
            return Err(MskError::InvalidParameter(format!(
                "m = {} outside [0, 1]",
                self.m
            )));
        }
        if self.b.iter().any(|v| !v.is_finite()) {
            return Err(MskError::NonFinite("Lagrange parameters".into()));
        }
        let gap = order_gap(sys, &self.q2, &self.q1);
        if gap.iter().any(|&g| g < -ORDER_SLACK) {
            return Err(MskError::Constraint(
                "the ordering Δ²Λq₁ ⪯ Δ²Λq₂ is violated".into(),
            ));
        }
        if self.u().iter().any(|v| !(v.abs() <= 1.0 + 1e-15)) {
            return Err(MskError::Constraint("the overlap u leaves [-1, 1]".into()));
        }
        Ok(())
    }
}

/// `(Δ²Λ(x − y))_s`.
fn order_gap(sys: &SpeciesSystem, x: &[f64], y: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let dl = sys.delta2_lambda();
    (0..d.len())
        .map(|s| (0..d.len()).map(|t| dl[(s, t)] * d[t]).sum())
        .collect()
}

/// Nodes `(x₁, x₂, w)` for a centered Gaussian pair with common variance
/// `var` and correlation `corr`.
fn pair_nodes(var: f64, corr: f64, spec: &QuadratureSpec) -> Vec<(f64, f64, f64)> {
    if var <= 0.0 {
        return vec![(0.0, 0.0, 1.0)];
    }
    let sigma = var.sqrt();
    let outer = spec.rule_for(sigma);
    if corr.abs() == 1.0 {
        return outer
            .nodes
            .iter()
            .zip(&outer.weights)
            .map(|(&z, &w)| (sigma * z, corr * sigma * z, w))
            .collect();
    }
    let rest = (1.0 - corr * corr).sqrt();
    let inner = spec.rule_for(sigma * rest);
    let mut out = Vec::with_capacity(outer.len() * inner.len());
    for (&z, &w) in outer.nodes.iter().zip(&outer.weights) {
        for (&y, &v) in inner.nodes.iter().zip(&inner.weights) {
            out.push((sigma * z, sigma * (corr * z + rest * y), w * v));
        }
    }
    out
}

/// `log(cosh y₁ cosh y₂ cosh b + sinh y₁ sinh y₂ sinh b)`, without overflow.
fn log_pair_weight(y1: f64, y2: f64, b: f64) -> f64 {
    log_cosh(y1) + log_cosh(y2) + log_cosh(b) + (y1.tanh() * y2.tanh() * b.tanh()).ln_1p()
}

/// The per-species expectation term
/// `(1/m) E log E′(cosh Y₁ cosh Y₂ cosh b + sinh Y₁ sinh Y₂ sinh b)^m`.
fn species_term(sys: &SpeciesSystem, p: &GTParams, s: usize, b: f64, spec: &QuadratureSpec) -> f64 {
    let tau2 = sys.tau2()[s];
    let outer_var = sys.cavity_variances(&p.q1)[s].max(0.0);
    let inner_var = (2.0 * order_gap(sys, &p.q2, &p.q1)[s]).max(0.0);
    let total = tau2 + outer_var;
    // The field h_s is shared by both replicas.
    let outer_corr = if p.c[s] == 1.0 || total == 0.0 {
        1.0
    } else {
        ((tau2 + p.c[s] * outer_var) / total).clamp(-1.0, 1.0)
    };
    let m = p.m;
    if m == 0.0 {
        // E E′ L is a single expectation over the summed pair.
        let var = total + inner_var;
        let corr = if var == 0.0 || (outer_corr == 1.0 && (inner_var == 0.0 || p.c_prime[s] == 1.0))
        {
            1.0
        } else {
            ((outer_corr * total + p.c_prime[s] * inner_var) / var).clamp(-1.0, 1.0)
        };
        return pair_nodes(var, corr, spec)
            .into_iter()
            .map(|(y1, y2, w)| w * log_pair_weight(y1, y2, b))
            .sum();
    }
    let outer = pair_nodes(total, outer_corr, spec);
    let inner = pair_nodes(inner_var, p.c_prime[s], spec);
    let mut logs = vec![0.0; inner.len()];
    let mut acc = 0.0;
    for &(a1, a2, w) in &outer {
        let mut mean = 0.0;
        for (slot, &(b1, b2, v)) in logs.iter_mut().zip(&inner) {
            *slot = log_pair_weight(a1 + b1, a2 + b2, b);
            mean += v * *slot;
        }
        // (1/m) log E′ e^{mL} = E′L + (1/m) log E′ e^{m(L − E′L)}.
        let excess: f64 = logs
            .iter()
            .zip(&inner)
            .map(|(l, &(_, _, v))| v * (m * (l - mean)).exp_m1())
            .sum();
        let value = mean + excess.ln_1p() / m;
        acc += w * value;
    }
    acc
}

/// The part of `U` that does not depend on `b`: the constant and the
/// quadratic terms.
fn quadratic_part(sys: &SpeciesSystem, p: &GTParams) -> f64 {
    let one_minus: Vec<f64> = p.q2.iter().map(|v| 1.0 - v).collect();
    let cq1: Vec<f64> = p.c.iter().zip(&p.q1).map(|(c, q)| c * q).collect();
    let u = p.u();
    2.0 * std::f64::consts::LN_2 + sys.b2(&one_minus)
        - p.m * (sys.b2(&p.q2) - sys.b2(&p.q1) + sys.b2(&u) - sys.b2(&cq1))
}

/// The bound `U(c, c′; q₁, q₂; m, b)` with `Λ` in place of its finite-size
/// values.
pub fn gt_upper_bound(sys: &SpeciesSystem, p: &GTParams, spec: &QuadratureSpec) -> Result<f64> {
    spec.validate()?;
    p.validate(sys)?;
    let u = p.u();
    let mut value = quadratic_part(sys, p);
    for s in 0..sys.species_count() {
        let l = sys.lambda()[s];
        value += l * (species_term(sys, p, s, p.b[s], spec) - p.b[s] * u[s]);
    }
    if !value.is_finite() {
        return Err(MskError::NonFinite("Guerra-Talagrand bound".into()));
    }
    Ok(value)
}

/// The side of `q*` on which the constrained overlap lies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Branch {
    /// `Δ²Λ(u − q*) ⪰ 0`, bounded with `m = 1/2`.
    Upper,
    /// `Δ²Λ(u − q*) ⪯ 0`, bounded with `m = 0`.
    Lower,
}

impl Branch {
    /// The specialized parameters of this branch at `u` and `b`.
    pub fn params(self, q_star: &[f64], u: &[f64], b: Vec<f64>) -> GTParams {
        match self {
            Branch::Upper => GTParams::upper(q_star, u, b),
            Branch::Lower => GTParams::lower(q_star, u, b),
        }
    }
}

/// Result of [`gt_b_gradient_at_zero`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    /// Branch used.
    pub branch: Branch,
    /// `W(u) = ∂U/∂b` at `b = 0`, from the direct formula.
    pub w: Vec<f64>,
    /// `(2Γ̂ΛΔ²Λ − Λ)(u − q*)` with `Γ̂ = ∫₀¹ Γ(q* + t(u − q*)) dt`.
    pub w_integral: Vec<f64>,
    /// `Γ(u)`, the diagonal weight of the branch at `u`.
    pub gamma_u: Vec<f64>,
}

/// One point of the cost curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostPoint {
    /// Constrained overlap.
    pub u: Vec<f64>,
    /// Branch used.
    pub branch: Branch,
    /// `W(u)`.
    pub w: Vec<f64>,
    /// `b = −½Λ⁻¹W(u)`.
    pub b: Vec<f64>,
    /// `U` at the branch parameters and this `b`.
    pub bound: f64,
    /// `2·RS*(1) − bound`.
    pub cost: f64,
    /// `B(u − q*)`.
    pub b_distance: f64,
    /// `cost / B(u − q*)`, absent when `B(u − q*) = 0`.
    pub ratio: Option<f64>,
    /// `inf_b U` by direct minimization, when requested.
    pub numerical_inf_bound: Option<f64>,
}

/// Cost curve over a set of overlaps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostCurve {
    /// `q*`.
    pub q_star: Vec<f64>,
    /// `ρ(ΓΔ²Λ)` at `q*`.
    pub rho: f64,
    /// Points in input order.
    pub points: Vec<CostPoint>,
    /// Smallest `cost / B(u − q*)` over the points, the fitted constant `c₀`.
    pub c0: Option<f64>,
}

/// Precomputed `q*`, `Γ` and `2·RS*(1)` for repeated bound evaluations.
#[derive(Debug, Clone)]
pub struct GtContext {
    sys: SpeciesSystem,
    spec: QuadratureSpec,
    q_star: Vec<f64>,
    gamma: Vec<f64>,
    two_rs_star: f64,
}

impl GtContext {
    /// Solves for `q*` and prepares the context.
    pub fn new(sys: &SpeciesSystem, spec: &QuadratureSpec) -> Result<Self> {
        spec.validate()?;
        let fp = fixedpoint::solve_qstar(sys, spec, fixedpoint::DEFAULT_TOL)?;
        let gamma = gamma_at(sys, &fp.q_star, spec);
        let two_rs_star = 2.0 * rs_star(sys, &fp.q_star, 1.0, spec);
        Ok(Self {
            sys: sys.clone(),
            spec: *spec,
            q_star: fp.q_star,
            gamma,
            two_rs_star,
        })
    }

    /// `q*`.
    pub fn q_star(&self) -> &[f64] {
        &self.q_star
    }

    /// `Γ` at `q*`.
    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// `2·RS*(1)`.
    pub fn two_rs_star(&self) -> f64 {
        self.two_rs_star
    }

    /// `ρ(ΓΔ²Λ)` and its Perron vector (unit maximum).
    pub fn perron(&self) -> Result<(f64, Vec<f64>)> {
        let mut m: DMatrix<f64> = self.sys.delta2_lambda();
        for (s, g) in self.gamma.iter().enumerate() {
            m.row_mut(s).scale_mut(*g);
        }
        let report = spectral_radius(&m)?;
        let v = report.vector.ok_or(MskError::NotIrreducible)?;
        Ok((report.rho, v))
    }

    /// The branch containing `u`, preferring [`Branch::Upper`] at `u = q*`.
    pub fn branch_of(&self, u: &[f64]) -> Result<Branch> {
        self.sys.check_overlap(u)?;
        let gap = order_gap(&self.sys, u, &self.q_star);
        if gap.iter().all(|&g| g >= -ORDER_SLACK) {
            Ok(Branch::Upper)
        } else if gap.iter().all(|&g| g <= ORDER_SLACK) {
            Ok(Branch::Lower)
        } else {
            Err(MskError::Constraint(
                "Δ²Λ(u − q*) has entries of both signs".into(),
            ))
        }
    }

    fn check_branch(&self, u: &[f64], branch: Branch) -> Result<()> {
        self.sys.check_overlap(u)?;
        let gap = order_gap(&self.sys, u, &self.q_star);
        let ok = match branch {
            Branch::Upper => gap.iter().all(|&g| g >= -ORDER_SLACK),
            Branch::Lower => gap.iter().all(|&g| g <= ORDER_SLACK),
        };
        if ok {
            Ok(())
        } else {
            Err(MskError::Constraint(format!(
                "u is not on the {branch:?} side of q*"
            )))
        }
    }

    /// Outer variance and inner variance of the branch at `u`, per species.
    fn branch_variances(&self, u: &[f64], branch: Branch) -> Vec<(f64, f64)> {
        let (q1, q2) = match branch {
            Branch::Upper => (&self.q_star[..], u),
            Branch::Lower => (u, &self.q_star[..]),
        };
        let outer = self.sys.field_variances(q1);
        let inner = order_gap(&self.sys, q2, q1);
        outer
            .into_iter()
            .zip(inner)
            .map(|(o, i)| (o.max(0.0), (2.0 * i).max(0.0)))
            .collect()
    }

    /// `W(u)` from the direct formulas, and `Γ(u)`.
    fn direct(&self, u: &[f64], branch: Branch) -> (Vec<f64>, Vec<f64>) {
        let spec = &self.spec;
        let mut w = Vec::with_capacity(u.len());
        let mut gamma = Vec::with_capacity(u.len());
        for (s, (outer, inner)) in self.branch_variances(u, branch).into_iter().enumerate() {
            let l = self.sys.lambda()[s];
            let so = outer.sqrt();
            let si = inner.sqrt();
            let rule = spec.rule_for(si);
            match branch {
                Branch::Upper => {
                    // E′ cosh(X + σ′z′) = cosh X · e^{σ′²/2}, and
                    // tanh² y cosh y = cosh y − sech y.
                    let damp = (-0.5 * inner).exp();
                    let mut sech1 = 0.0;
                    let mut sech3 = 0.0;
                    let outer_rule = spec.rule_for(so);
                    let mut add = |x: f64, wt: f64| {
                        let (mut e1, mut e3) = (0.0, 0.0);
                        if si == 0.0 {
                            e1 = sech(x);
                            e3 = e1.powi(3);
                        } else {
                            for (&z, &v) in rule.nodes.iter().zip(&rule.weights) {
                                let sy = sech(x + si * z);
                                e1 += v * sy;
                                e3 += v * sy * sy * sy;
                            }
                        }
                        let sx = sech(x);
                        sech1 += wt * sx * e1;
                        sech3 += wt * sx * e3;
                    };
                    if so == 0.0 {
                        add(0.0, 1.0);
                    } else {
                        for (&z, &wt) in outer_rule.nodes.iter().zip(&outer_rule.weights) {
                            add(so * z, wt);
                        }
                    }
                    w.push(l * (1.0 - u[s] - damp * sech1));
                    gamma.push(damp * sech3);
                }
                Branch::Lower => {
                    let inner_mean = |x: f64, f: fn(f64) -> f64| -> f64 {
                        if si == 0.0 {
                            f(x)
                        } else {
                            rule.expect(si, |y| f(x + y))
                        }
                    };
                    let tt = spec.expect(so, |x| inner_mean(x, f64::tanh).powi(2));
                    let ss = spec.expect(so, |x| inner_mean(x, |y| sech(y).powi(2)).powi(2));
                    w.push(l * (tt - u[s]));
                    gamma.push(ss);
                }
            }
        }
        (w, gamma)
    }

    /// `Γ(u)` of the branch.
    pub fn gamma_u(&self, u: &[f64], branch: Branch) -> Result<Vec<f64>> {
        self.check_branch(u, branch)?;
        Ok(self.direct(u, branch).1)
    }

    /// `W(u)` with its integral-representation check value.
    pub fn gradient(&self, u: &[f64], branch: Branch) -> Result<GradientReport> {
        self.check_branch(u, branch)?;
        let (w, gamma_u) = self.direct(u, branch);
        let n = u.len();
        let diff: Vec<f64> = u.iter().zip(&self.q_star).map(|(a, b)| a - b).collect();
        let mut gamma_hat = vec![0.0; n];
        let h = 1.0 / T_PANELS as f64;
        for panel in 0..T_PANELS {
            for (x, wt) in GL4_NODES.iter().zip(GL4_WEIGHTS) {
                let t = h * (panel as f64 + 0.5 * (x + 1.0));
                let ut: Vec<f64> = self
                    .q_star
                    .iter()
                    .zip(&diff)
                    .map(|(q, d)| (q + t * d).clamp(0.0, 1.0))
                    .collect();
                let g = self.direct(&ut, branch).1;
                for s in 0..n {
                    gamma_hat[s] += 0.5 * h * wt * g[s];
                }
            }
        }
        let coupling = self.sys.coupling();
        let lambda = self.sys.lambda();
        let w_integral = (0..n)
            .map(|s| {
                let cross: f64 = (0..n).map(|t| coupling[(s, t)] * diff[t]).sum();
                2.0 * gamma_hat[s] * cross - lambda[s] * diff[s]
            })
            .collect();
        Ok(GradientReport {
            branch,
            w,
            w_integral,
            gamma_u,
        })
    }

    /// The cost at `u` with `b = −½Λ⁻¹W(u)`, optionally with a numerical
    /// minimization over `b` as a cross-check.
    pub fn cost_point(&self, u: &[f64], numerical_inf: bool) -> Result<CostPoint> {
        let branch = self.branch_of(u)?;
        let (w, _) = self.direct(u, branch);
        let lambda = self.sys.lambda();
        let b: Vec<f64> = w.iter().zip(lambda).map(|(w, l)| -0.5 * w / l).collect();
        let params = branch.params(&self.q_star, u, b.clone());
        let bound = gt_upper_bound(&self.sys, &params, &self.spec)?;
        let cost = self.two_rs_star - bound;
        let diff: Vec<f64> = u.iter().zip(&self.q_star).map(|(a, b)| a - b).collect();
        let b_distance = self.sys.b2(&diff);
        let ratio = (b_distance > 0.0).then(|| cost / b_distance);
        let numerical_inf_bound = if numerical_inf {
            Some(self.minimize_over_b(&params))
        } else {
            None
        };
        Ok(CostPoint {
            u: u.to_vec(),
            branch,
            w,
            b,
            bound,
            cost,
            b_distance,
            ratio,
            numerical_inf_bound,
        })
    }

    /// `inf_b U` by golden-section search per species; `U` is convex and
    /// separable in `b`.
    fn minimize_over_b(&self, params: &GTParams) -> f64 {
        let u = params.u();
        let mut value = quadratic_part(&self.sys, params);
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        for s in 0..self.sys.species_count() {
            let l = self.sys.lambda()[s];
            let g = |b: f64| species_term(&self.sys, params, s, b, &self.spec) - b * u[s];
            let centre = params.b[s];
            let (mut lo, mut hi) = (centre - 4.0, centre + 4.0);
            let mut x1 = hi - inv_phi * (hi - lo);
            let mut x2 = lo + inv_phi * (hi - lo);
            let (mut f1, mut f2) = (g(x1), g(x2));
            for _ in 0..GOLDEN_ITERATIONS {
                if f1 <= f2 {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - inv_phi * (hi - lo);
                    f1 = g(x1);
                } else {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + inv_phi * (hi - lo);
                    f2 = g(x2);
                }
            }
            value += l * f1.min(f2).min(g(centre));
        }
        value
    }

    /// Overlaps `q* + εv` along the Perron vector `v` of `ΓΔ²Λ`, with `count`
    /// values of `ε ≠ 0` spread evenly over the range that keeps `u` in
    /// `[0, 1]^S`.
    pub fn perron_grid(&self, count: usize) -> Result<Vec<Vec<f64>>> {
        let (_, v) = self.perron()?;
        let lo = self
            .q_star
            .iter()
            .zip(&v)
            .map(|(q, v)| q / v)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .q_star
            .iter()
            .zip(&v)
            .map(|(q, v)| (1.0 - q) / v)
            .fold(f64::INFINITY, f64::min);
        let total = lo + hi;
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            // Cell midpoints, so that ε = 0 and the endpoints are excluded.
            let eps = -lo + total * (k as f64 + 0.5) / count as f64;
            if eps == 0.0 {
                continue;
            }
            out.push(
                self.q_star
                    .iter()
                    .zip(&v)
                    .map(|(q, v)| (q + eps * v).clamp(0.0, 1.0))
                    .collect(),
            );
        }
        Ok(out)
    }

    /// Cost points for every `u`, evaluated in parallel.
    pub fn cost_curve(&self, us: &[Vec<f64>], numerical_inf: bool) -> Result<CostCurve> {
        let (rho, _) = self.perron()?;
        let points: Vec<CostPoint> = us
            .par_iter()
            .map(|u| self.cost_point(u, numerical_inf))
            .collect::<Result<_>>()?;
        let c0 = points
            .iter()
            .filter_map(|p| p.ratio)
            .fold(None, |acc: Option<f64>, r| {
                Some(acc.map_or(r, |a| a.min(r)))
            });
        Ok(CostCurve {
            q_star: self.q_star.clone(),
            rho,
            points,
            c0,
        })
    }
}

/// `W(u)` on the given branch, with the integral-representation check value.
pub fn gt_b_gradient_at_zero(
    sys: &SpeciesSystem,
    u: &[f64],
    branch: Branch,
    spec: &QuadratureSpec,
) -> Result<GradientReport> {
    GtContext::new(sys, spec)?.gradient(u, branch)
}

/// Bound and cost at `u` with `b = −½Λ⁻¹W(u)` on the branch containing `u`.
pub fn gt_cost_curve(sys: &SpeciesSystem, u: &[f64], spec: &QuadratureSpec) -> Result<CostPoint> {
    GtContext::new(sys, spec)?.cost_point(u, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_species() -> SpeciesSystem {
        SpeciesSystem::new(
            vec![0.4, 0.6],
            vec![vec![0.5, 0.3], vec![0.3, 0.4]],
            vec![0.3, 0.6],
        )
        .unwrap()
    }

    fn single(d2: f64, t2: f64) -> SpeciesSystem {
        SpeciesSystem::new(vec![1.0], vec![vec![d2]], vec![t2]).unwrap()
    }

    /// A `u` with `Δ²Λ(u − q*) ⪰ 0`: `q*` plus a nonnegative step.
    fn upper_point(ctx: &GtContext, rng: &mut ChaCha8Rng) -> Vec<f64> {
        ctx.q_star()
            .iter()
            .map(|q| q + rng.gen::<f64>() * 0.6 * (1.0 - q))
            .collect()
    }

    fn lower_point(ctx: &GtContext, rng: &mut ChaCha8Rng) -> Vec<f64> {
        ctx.q_star()
            .iter()
            .map(|q| q * (1.0 - 0.6 * rng.gen::<f64>()))
            .collect()
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        let sys = two_species();
        let spec = QuadratureSpec::default();
        let mut p = GTParams::upper(&[0.5, 0.5], &[0.6, 0.6], vec![0.0, 0.0]);
        assert!(gt_upper_bound(&sys, &p, &spec).is_ok());
        p.m = 1.5;
        assert!(matches!(
            gt_upper_bound(&sys, &p, &spec),
            Err(MskError::InvalidParameter(_))
        ));
        let p = GTParams::upper(&[0.5, 0.5], &[0.2, 0.2], vec![0.0, 0.0]);
        assert!(matches!(
            gt_upper_bound(&sys, &p, &spec),
            Err(MskError::Constraint(_))
        ));
    }

    #[test]
    fn zero_temperature_specialization_is_twice_rs() {
        let sys = two_species();
        let spec = QuadratureSpec::default();
        let ctx = GtContext::new(&sys, &spec).unwrap();
        let q = ctx.q_star().to_vec();
        let p = GTParams {
            c: vec![0.3, -0.4],
            c_prime: vec![0.7, 0.2],
            q1: vec![0.5 * q[0], 0.5 * q[1]],
            q2: q.clone(),
            m: 0.0,
            b: vec![0.0, 0.0],
        };
        let v = gt_upper_bound(&sys, &p, &spec).unwrap();
        assert!(
            (v - ctx.two_rs_star()).abs() < 1e-10,
            "{v} vs {}",
            ctx.two_rs_star()
        );
    }

    #[test]
    fn half_specialization_does_not_exceed_twice_rs() {
        let sys = two_species();
        let spec = QuadratureSpec::default();
        let ctx = GtContext::new(&sys, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let u = upper_point(&ctx, &mut rng);
            let p = GTParams::upper(ctx.q_star(), &u, vec![0.0, 0.0]);
            let v = gt_upper_bound(&sys, &p, &spec).unwrap();
            assert!(
                v <= ctx.two_rs_star() + 1e-8,
                "{v} vs {}",
                ctx.two_rs_star()
            );
        }
    }

    #[test]
    fn zero_interaction_matches_one_dimensional_integral() {
        let sys = SpeciesSystem::new(
            vec![0.5, 0.5],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![0.49, 1.44],
        )
        .unwrap();
        let spec = QuadratureSpec::default();
        let p = GTParams {
            c: vec![0.2, 0.5],
            c_prime: vec![-0.3, 0.9],
            q1: vec![0.1, 0.3],
            q2: vec![0.4, 0.8],
            m: 0.3,
            b: vec![0.4, -0.2],
        };
        let u = p.u();
        // Oracle: both replica fields equal h, E′ is trivial and B vanishes.
        let mut expected = 2.0 * std::f64::consts::LN_2;
        for s in 0..2 {
            let tau = sys.tau2()[s].sqrt();
            let b = p.b[s];
            let (mut tot, mut norm) = (0.0, 0.0);
            let n = 40000;
            let h = 20.0 / n as f64;
            for k in 0..n {
                let z = -10.0 + (k as f64 + 0.5) * h;
                let wt = (-0.5 * z * z).exp();
                let y = tau * z;
                let x = y.cosh().powi(2) * b.cosh() + y.sinh().powi(2) * b.sinh();
                tot += wt * x.ln();
                norm += wt;
            }
            expected += 0.5 * (tot / norm - b * u[s]);
        }
        let v = gt_upper_bound(&sys, &p, &spec).unwrap();
        assert!((v - expected).abs() < 1e-10, "{v} vs {expected}");
    }

    #[test]
    fn gradient_vanishes_at_fixed_point() {
        let sys = two_species();
        let spec = QuadratureSpec::default();
        let ctx = GtContext::new(&sys, &spec).unwrap();
        let q = ctx.q_star().to_vec();
        for branch in [Branch::Upper, Branch::Lower] {
            let r = ctx.gradient(&q, branch).unwrap();
            assert!(r.w.iter().all(|w| w.abs() < 1e-10), "{:?}", r.w);
            assert!(r.w_integral.iter().all(|w| w.abs() < 1e-15));
        }
        let c = ctx.cost_point(&q, false).unwrap();
        assert!(c.cost.abs() <= 1e-8);
    }

    #[test]
    fn gradient_matches_integral_representation() {
        let sys = two_species();
        let spec = QuadratureSpec::default();
        let ctx = GtContext::new(&sys, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..4 {
            for branch in [Branch::Upper, Branch::Lower] {
                let u = match branch {
                    Branch::Upper => upper_point(&ctx, &mut rng),
                    Branch::Lower => lower_point(&ctx, &mut rng),
                };
                let r = ctx.gradient(&u, branch).unwrap();
                for (a, b) in r.w.iter().zip(&r.w_integral) {
                    assert!((a - b).abs() < 1e-6, "{branch:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_in_b() {
        let sys = two_species();
        let spec = QuadratureSpec::default();
        let ctx = GtContext::new(&sys, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for branch in [Branch::Upper, Branch::Lower] {
            let u = match branch {
                Branch::Upper => upper_point(&ctx, &mut rng),
                Branch::Lower => lower_point(&ctx, &mut rng),
            };
            let w = ctx.gradient(&u, branch).unwrap().w;
            for s in 0..2 {
                let mut bp = vec![0.0; 2];
                let mut bm = vec![0.0; 2];
                bp[s] = h;
                bm[s] = -h;
                let up = gt_upper_bound(&sys, &branch.params(ctx.q_star(), &u, bp), &spec).unwrap();
                let dn = gt_upper_bound(&sys, &branch.params(ctx.q_star(), &u, bm), &spec).unwrap();
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - w[s]).abs() < 1e-5,
                    "{branch:?} s={s}: {fd} vs {}",
                    w[s]
                );
            }
        }
    }

    #[test]
    fn hessian_in_b_is_bounded_by_lambda() {
        let sys = two_species();
        let spec = QuadratureSpec::default();
        let ctx = GtContext::new(&sys, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-3;
        for _ in 0..3 {
            for branch in [Branch::Upper, Branch::Lower] {
                let u = match branch {
                    Branch::Upper => upper_point(&ctx, &mut rng),
                    Branch::Lower => lower_point(&ctx, &mut rng),
                };
                let b0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let eval = |b: Vec<f64>| {
                    gt_upper_bound(&sys, &branch.params(ctx.q_star(), &u, b), &spec).unwrap()
                };
                let centre = eval(b0.clone());
                for s in 0..2 {
                    let mut bp = b0.clone();
                    let mut bm = b0.clone();
                    bp[s] += h;
                    bm[s] -= h;
                    let second = (eval(bp) - 2.0 * centre + eval(bm)) / (h * h);
                    let l = sys.lambda()[s];
                    assert!(
                        (-1e-6..=l + 1e-6).contains(&second),
                        "{branch:?} s={s}: {second} not in [0, {l}]"
                    );
                }
            }
        }
    }

    #[test]
    fn branch_weight_is_dominated_by_gamma() {
        let sys = two_species();
        let spec = QuadratureSpec::default();
        let ctx = GtContext::new(&sys, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..6 {
            let u = upper_point(&ctx, &mut rng);
            let g = ctx.gamma_u(&u, Branch::Upper).unwrap();
            for (a, b) in g.iter().zip(ctx.gamma()) {
                assert!(*a <= b + 1e-12, "{a} > {b}");
            }
        }
    }

    #[test]
    fn small_m_approaches_zero_limit() {
        let sys = two_species();
        let spec = QuadratureSpec::default();
        let mut p = GTParams {
            c: vec![0.6, -0.2],
            c_prime: vec![0.3, 0.5],
            q1: vec![0.2, 0.1],
            q2: vec![0.5, 0.4],
            m: 0.0,
            b: vec![0.3, -0.5],
        };
        let limit = gt_upper_bound(&sys, &p, &spec).unwrap();
        p.m = 1e-6;
        let near = gt_upper_bound(&sys, &p, &spec).unwrap();
        assert!((near - limit).abs() < 1e-5, "{near} vs {limit}");
    }

    /// Independent single-species evaluation of the bound: a direct
    /// five-dimensional midpoint rule over `(h, z₁, z₂, z′₁, z′₂)` with the
    /// correlations built by Cholesky factors, and the quadratic terms written
    /// out with `B(x) = Δ²x²`.
    fn single_species_bound(d2: f64, t2: f64, p: &GTParams) -> f64 {
        let (c, cp, q1, q2, m, b) = (p.c[0], p.c_prime[0], p.q1[0], p.q2[0], p.m, p.b[0]);
        let u = c * q1 + cp * (q2 - q1);
        let n = 28;
        let step = 12.6 / n as f64;
        let grid: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let z = -6.3 + (k as f64 + 0.5) * step;
                (z, (-0.5 * z * z).exp())
            })
            .collect();
        let norm: f64 = grid.iter().map(|g| g.1).sum();
        let so = (2.0 * d2 * q1).sqrt();
        let si = (2.0 * d2 * (q2 - q1)).sqrt();
        let tau = t2.sqrt();
        let mut outer = 0.0;
        for &(h, wh) in &grid {
            for &(z1, w1) in &grid {
                for &(y, w2) in &grid {
                    let z2 = c * z1 + (1.0 - c * c).sqrt() * y;
                    let a1 = tau * h + so * z1;
                    let a2 = tau * h + so * z2;
                    let mut inner = 0.0;
                    let mut inner_log = 0.0;
                    for &(x1, v1) in &grid {
                        for &(x, v2) in &grid {
                            let x2 = cp * x1 + (1.0 - cp * cp).sqrt() * x;
                            let y1 = a1 + si * x1;
                            let y2 = a2 + si * x2;
                            let val =
                                y1.cosh() * y2.cosh() * b.cosh() + y1.sinh() * y2.sinh() * b.sinh();
                            let wt = v1 * v2 / (norm * norm);
                            inner += wt * val.powf(m);
                            inner_log += wt * val.ln();
                        }
                    }
                    let term = if m == 0.0 { inner_log } else { inner.ln() / m };
                    outer += wh * w1 * w2 * term;
                }
            }
        }
        outer /= norm * norm * norm;
        2.0 * std::f64::consts::LN_2 + d2 * (1.0 - q2).powi(2)
            - m * d2 * (q2 * q2 - q1 * q1 + u * u - (c * q1).powi(2))
            - b * u
            + outer
    }

    #[test]
    fn single_species_branches_match_direct_evaluation() {
        let (d2, t2) = (0.4, 0.3);
        let sys = single(d2, t2);
        let spec = QuadratureSpec::default();
        let ctx = GtContext::new(&sys, &spec).unwrap();
        let q = ctx.q_star()[0];
        let cases = [
            GTParams::upper(&[q], &[q + 0.2], vec![0.3]),
            GTParams::lower(&[q], &[0.5 * q], vec![-0.25]),
            GTParams {
                c: vec![0.5],
                c_prime: vec![-0.3],
                q1: vec![0.3],
                q2: vec![0.6],
                m: 0.4,
                b: vec![0.2],
            },
        ];
        for p in &cases {
            let direct = single_species_bound(d2, t2, p);
            let v = gt_upper_bound(&sys, p, &spec).unwrap();
            assert!((v - direct).abs() < 1e-7, "{v} vs {direct}");
        }
        // At u = q* both branches give 2·RS*(1).
        for branch in [Branch::Upper, Branch::Lower] {
            let v = gt_upper_bound(&sys, &branch.params(&[q], &[q], vec![0.0]), &spec).unwrap();
            assert!((v - ctx.two_rs_star()).abs() < 1e-10);
        }
    }

    #[test]
    fn numerical_inf_does_not_exceed_closed_form_choice() {
        let sys = two_species();
        let spec = QuadratureSpec::default();
        let ctx = GtContext::new(&sys, &spec).unwrap();
        let grid = ctx.perron_grid(4).unwrap();
        let curve = ctx.cost_curve(&grid, true).unwrap();
        assert!(curve.rho < 0.5);
        for p in &curve.points {
            let inf = p.numerical_inf_bound.unwrap();
            assert!(inf <= p.bound + 1e-12);
            assert!(p.cost >= 0.0 && p.ratio.unwrap() > 0.0);
        }
        assert!(curve.c0.unwrap() > 0.0);
    }
}
