//! Model parameters of the multi-species system and the matrix utilities the
//! rest of the crate is built on: validation, the Perron root of nonnegative
//! matrices, the bilinear form `B(x, y) = xᵀΛΔ²Λy`, and the bounding-box
//! ratio of the unit `B`-ellipsoid.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MskError, Result};

/// Tolerance on `Σ λ_s = 1`.
const LAMBDA_SUM_TOL: f64 = 1e-12;
/// Relative tolerance on the symmetry of `Δ²`.
const SYMMETRY_TOL: f64 = 1e-14;
/// Relative tolerance on the smallest eigenvalue in the semidefiniteness test.
const PSD_TOL: f64 = 1e-10;
/// Slack allowed on overlap entries outside `[0, 1]`.
pub const OVERLAP_SLACK: f64 = 1e-12;
/// Largest species count accepted by [`bounding_box_ratio`].
pub const BOUNDING_BOX_MAX_SPECIES: usize = 20;

/// Raw, unvalidated model parameters as they appear in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSystem {
    pub lambda: Vec<f64>,
    pub delta2: Vec<Vec<f64>>,
    pub tau2: Vec<f64>,
}

/// Validated parameters `(Λ, Δ², τ²)` together with structural flags.
///
/// Instances are immutable; the flags record whether the coupling graph is
/// connected and whether `Δ²` is positive semidefinite. Neither property is
/// required at construction, operations that need them check the flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesSystem {
    lambda: Vec<f64>,
    delta2: DMatrix<f64>,
    tau2: Vec<f64>,
    irreducible: bool,
    psd: bool,
}

impl SpeciesSystem {
    /// Validates raw parameters given as nested rows.
    pub fn new(lambda: Vec<f64>, delta2: Vec<Vec<f64>>, tau2: Vec<f64>) -> Result<Self> {
        let n = delta2.len();
        if delta2.iter().any(|row| row.len() != n) {
            return Err(MskError::Dimension("delta2 must be square".into()));
        }
        let flat: Vec<f64> = delta2.iter().flatten().copied().collect();
        Self::from_matrix(lambda, DMatrix::from_row_slice(n, n, &flat), tau2)
    }

    /// Validates raw parameters with `Δ²` already in matrix form.
    pub fn from_matrix(lambda: Vec<f64>, delta2: DMatrix<f64>, tau2: Vec<f64>) -> Result<Self> {
        let n = lambda.len();
        if n == 0 {
            return Err(MskError::Dimension(
                "at least one species is required".into(),
            ));
        }
        if delta2.nrows() != delta2.ncols() {
            return Err(MskError::Dimension("delta2 must be square".into()));
        }
        if delta2.nrows() != n || tau2.len() != n {
            return Err(MskError::Dimension(format!(
                "lambda has {} entries, delta2 is {}x{}, tau2 has {}",
                n,
                delta2.nrows(),
                delta2.ncols(),
                tau2.len()
            )));
        }
        if lambda
            .iter()
            .any(|&l| !l.is_finite() || l <= 0.0 || l > 1.0)
        {
            return Err(MskError::InvalidParameter(
                "species ratios must lie in (0, 1]".into(),
            ));
        }
        let total: f64 = lambda.iter().sum();
        if (total - 1.0).abs() > LAMBDA_SUM_TOL {
            return Err(MskError::InvalidParameter(format!(
                "species ratios sum to {total}, not 1"
            )));
        }
        if delta2.iter().any(|&d| !d.is_finite() || d < 0.0) {
            return Err(MskError::InvalidParameter(
                "delta2 entries must be finite and nonnegative".into(),
            ));
        }
        if tau2.iter().any(|&t| !t.is_finite() || t < 0.0) {
            return Err(MskError::InvalidParameter(
                "tau2 entries must be finite and nonnegative".into(),
            ));
        }
        let scale = delta2.amax();
        for i in 0..n {
            for j in 0..i {
                if (delta2[(i, j)] - delta2[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(MskError::InvalidParameter(format!(
                        "delta2 is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let irreducible = positivity_graph_connected(&delta2);
        let psd = is_positive_semidefinite(&delta2);
        Ok(Self {
            lambda,
            delta2,
            tau2,
            irreducible,
            psd,
        })
    }

    /// Validates a [`RawSystem`].
    pub fn from_raw(raw: &RawSystem) -> Result<Self> {
        Self::new(raw.lambda.clone(), raw.delta2.clone(), raw.tau2.clone())
    }

    /// Converts back to nested rows.
    pub fn to_raw(&self) -> RawSystem {
        let n = self.species_count();
        RawSystem {
            lambda: self.lambda.clone(),
            delta2: (0..n)
                .map(|i| (0..n).map(|j| self.delta2[(i, j)]).collect())
                .collect(),
            tau2: self.tau2.clone(),
        }
    }

    /// Number of species `|S|`.
    pub fn species_count(&self) -> usize {
        self.lambda.len()
    }

    /// Species ratios `λ`.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Interaction variances `Δ²`.
    pub fn delta2(&self) -> &DMatrix<f64> {
        &self.delta2
    }

    /// External-field variances `τ²`.
    pub fn tau2(&self) -> &[f64] {
        &self.tau2
    }

    /// Whether the positivity graph of `Δ²` is connected (and, for a single
    /// species, whether `Δ²` is nonzero).
    pub fn is_irreducible(&self) -> bool {
        self.irreducible
    }

    /// Whether `Δ²` is positive semidefinite.
    pub fn is_psd(&self) -> bool {
        self.psd
    }

    /// True when every field variance is exactly zero.
    pub fn is_zero_field(&self) -> bool {
        self.tau2.iter().all(|&t| t == 0.0)
    }

    /// Errors unless the system is irreducible.
    pub fn require_irreducible(&self) -> Result<()> {
        if self.irreducible {
            Ok(())
        } else {
            Err(MskError::NotIrreducible)
        }
    }

    /// The matrix `Δ²Λ`.
    pub fn delta2_lambda(&self) -> DMatrix<f64> {
        let mut m = self.delta2.clone();
        for j in 0..self.species_count() {
            m.column_mut(j).scale_mut(self.lambda[j]);
        }
        m
    }

    /// The matrix `ΛΔ²Λ` of the bilinear form `B`.
    pub fn coupling(&self) -> DMatrix<f64> {
        let mut m = self.delta2_lambda();
        for i in 0..self.species_count() {
            m.row_mut(i).scale_mut(self.lambda[i]);
        }
        m
    }

    /// The per-species cavity variances `2(Δ²Λq)_s`.
    pub fn cavity_variances(&self, q: &[f64]) -> Vec<f64> {
        let n = self.species_count();
        (0..n)
            .map(|s| {
                2.0 * (0..n)
                    .map(|t| self.delta2[(s, t)] * self.lambda[t] * q[t])
                    .sum::<f64>()
            })
            .collect()
    }

    /// The per-species field variances `τ²_s + 2(Δ²Λq)_s`.
    pub fn field_variances(&self, q: &[f64]) -> Vec<f64> {
        self.cavity_variances(q)
            .into_iter()
            .zip(&self.tau2)
            .map(|(c, t)| c + t)
            .collect()
    }

    /// `B(x, y) = xᵀΛΔ²Λy` with dimension checks.
    pub fn bilinear_b(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let n = self.species_count();
        if x.len() != n || y.len() != n {
            return Err(MskError::Dimension(format!(
                "bilinear form expects vectors of length {n}"
            )));
        }
        Ok(self.b(x, y))
    }

    /// `B(x, y)` without dimension checks, for internal hot paths.
    pub(crate) fn b(&self, x: &[f64], y: &[f64]) -> f64 {
        let n = self.species_count();
        let mut total = 0.0;
        for s in 0..n {
            let mut row = 0.0;
            for t in 0..n {
                row += self.delta2[(s, t)] * self.lambda[t] * y[t];
            }
            total += x[s] * self.lambda[s] * row;
        }
        total
    }

    /// `B(x, x)`.
    pub(crate) fn b2(&self, x: &[f64]) -> f64 {
        self.b(x, x)
    }

    /// Same `Δ²` and `τ²` with different species ratios.
    pub fn with_lambda(&self, lambda: Vec<f64>) -> Result<Self> {
        Self::from_matrix(lambda, self.delta2.clone(), self.tau2.clone())
    }

    /// Same species ratios with a different variance profile.
    pub fn with_profile(&self, delta2: DMatrix<f64>, tau2: Vec<f64>) -> Result<Self> {
        Self::from_matrix(self.lambda.clone(), delta2, tau2)
    }

    /// Checks that `q` has one entry per species and lies in `[0, 1]`.
    pub fn check_overlap(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.species_count() {
            return Err(MskError::Dimension(format!(
                "overlap has {} entries, expected {}",
                q.len(),
                self.species_count()
            )));
        }
        check_unit_interval(q)
    }
}

/// Checks that every entry of `q` lies in `[0, 1]` up to [`OVERLAP_SLACK`].
pub fn check_unit_interval(q: &[f64]) -> Result<()> {
    if q.iter()
        .any(|&v| !v.is_finite() || v < -OVERLAP_SLACK || v > 1.0 + OVERLAP_SLACK)
    {
        return Err(MskError::InvalidParameter(format!(
            "overlap {q:?} leaves [0, 1]"
        )));
    }
    Ok(())
}

/// Connectivity of the undirected graph with an edge wherever `Δ²_st > 0`.
/// A single species counts as connected only when its self-coupling is positive.
fn positivity_graph_connected(delta2: &DMatrix<f64>) -> bool {
    let n = delta2.nrows();
    if n == 1 {
        return delta2[(0, 0)] > 0.0;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(s) = stack.pop() {
        for t in 0..n {
            if !seen[t] && (delta2[(s, t)] > 0.0 || delta2[(t, s)] > 0.0) {
                seen[t] = true;
                stack.push(t);
            }
        }
    }
    seen.into_iter().all(|v| v)
}

fn is_positive_semidefinite(delta2: &DMatrix<f64>) -> bool {
    let sym = (delta2 + delta2.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    min >= -PSD_TOL * max.max(0.0)
}

/// Which algorithm produced a [`PerronReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerronMethod {
    /// Power iteration with Collatz-Wielandt bounds on an irreducible matrix.
    Power,
    /// Maximum over the irreducible diagonal blocks of a reducible matrix.
    Blocks,
    /// Dense eigenvalue computation.
    Dense,
}

/// Spectral radius of a nonnegative matrix with its certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct PerronReport {
    /// The spectral radius.
    pub rho: f64,
    /// Collatz-Wielandt lower bound (equal to `rho` for dense results).
    pub lower: f64,
    /// Collatz-Wielandt upper bound (equal to `rho` for dense results).
    pub upper: f64,
    /// Positive Perron vector normalized to unit maximum, when the matrix is irreducible.
    pub vector: Option<Vec<f64>>,
    /// Method that produced the result.
    pub method: PerronMethod,
}

/// Relative width of the Collatz-Wielandt bracket accepted by the power method.
const PERRON_REL_TOL: f64 = 1e-14;
/// Number of repeated squarings used to approximate the Perron vector.
const PERRON_SQUARINGS: usize = 64;
/// Dimension up to which a dense eigensolve is allowed as a fallback.
const DENSE_FALLBACK_MAX: usize = 16;

/// Spectral radius `ρ(M)` of a square nonnegative matrix.
///
/// For irreducible `M` the Perron vector is obtained from repeated squaring
/// of `M + cI` (which is primitive, so the iteration converges even for
/// periodic `M`), and `ρ` is pinned between the Collatz-Wielandt bounds
/// `min_i (Mv)_i / v_i ≤ ρ ≤ max_i (Mv)_i / v_i` computed from `M` itself.
/// Reducible matrices are split into strongly connected blocks.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<PerronReport> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(MskError::Dimension(
            "spectral radius needs a nonempty square matrix".into(),
        ));
    }
    if m.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(MskError::InvalidParameter(
            "spectral radius is only defined here for finite nonnegative matrices".into(),
        ));
    }
    let components = strongly_connected_components(m);
    if components.len() == 1 && (n > 1 || m[(0, 0)] > 0.0) {
        if let Some(report) = perron_power(m) {
            return Ok(report);
        }
        return dense_radius(m);
    }
    let mut rho: f64 = 0.0;
    for comp in &components {
        let k = comp.len();
        let block = DMatrix::from_fn(k, k, |i, j| m[(comp[i], comp[j])]);
        let r = if k == 1 {
            block[(0, 0)]
        } else {
            spectral_radius(&block)?.rho
        };
        rho = rho.max(r);
    }
    Ok(PerronReport {
        rho,
        lower: rho,
        upper: rho,
        vector: None,
        method: PerronMethod::Blocks,
    })
}

fn perron_power(m: &DMatrix<f64>) -> Option<PerronReport> {
    let n = m.nrows();
    let shift = m.amax();
    let mut a = m + DMatrix::identity(n, n) * shift;
    for _ in 0..PERRON_SQUARINGS {
        a = &a * &a;
        let top = a.amax();
        if !(top.is_finite() && top > 0.0) {
            return None;
        }
        a /= top;
    }
    let mut v = &a * DVector::from_element(n, 1.0);
    let mut best: Option<PerronReport> = None;
    // A few plain power steps polish the vector obtained from the squarings.
    for _ in 0..8 {
        let vmax = v.amax();
        if !(vmax > 0.0) || v.iter().any(|&x| !(x > 0.0)) {
            return best;
        }
        v /= vmax;
        let mv = m * &v;
        let ratios = mv.component_div(&v);
        let lower = ratios.min();
        let upper = ratios.max();
        let report = PerronReport {
            rho: 0.5 * (lower + upper),
            lower,
            upper,
            vector: Some(v.iter().copied().collect()),
            method: PerronMethod::Power,
        };
        let width = upper - lower;
        let better = best.as_ref().map_or(true, |b| width < b.upper - b.lower);
        if better {
            best = Some(report);
        }
        if width <= PERRON_REL_TOL * upper {
            break;
        }
        v = &mv + &v * shift;
    }
    best.filter(|b| b.upper - b.lower <= 1e-12 * b.upper)
}

fn dense_radius(m: &DMatrix<f64>) -> Result<PerronReport> {
    let n = m.nrows();
    if n > DENSE_FALLBACK_MAX {
        return Err(MskError::NonConvergence {
            iterations: PERRON_SQUARINGS,
            residual: f64::NAN,
        });
    }
    let rho = m
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    Ok(PerronReport {
        rho,
        lower: rho,
        upper: rho,
        vector: None,
        method: PerronMethod::Dense,
    })
}

/// Strongly connected components of the digraph `i → j` iff `M_ij > 0`,
/// from the transitive closure of the adjacency relation.
fn strongly_connected_components(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        reach[i][i] = true;
        for j in 0..n {
            if m[(i, j)] > 0.0 {
                reach[i][j] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let mut assigned = vec![false; n];
    let mut comps = Vec::new();
    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let comp: Vec<usize> = (0..n).filter(|&j| reach[i][j] && reach[j][i]).collect();
        for &j in &comp {
            assigned[j] = true;
        }
        comps.push(comp);
    }
    comps
}

/// The bounding-box ratio `R = max_v B(v)` over the corners
/// `v_i = ±sqrt((M⁻¹)_ii)` of the smallest axis-aligned box containing the
/// ellipsoid `{x : B(x) ≤ 1}`, where `M = ΛΔ²Λ`.
///
/// `B` is convex, so its maximum over the box is attained at a corner.
pub fn bounding_box_ratio(sys: &SpeciesSystem) -> Result<f64> {
    let n = sys.species_count();
    if n > BOUNDING_BOX_MAX_SPECIES {
        return Err(MskError::TooLarge(format!(
            "bounding box enumeration is capped at {BOUNDING_BOX_MAX_SPECIES} species"
        )));
    }
    let m = sys.coupling();
    let chol = Cholesky::new(m.clone())
        .ok_or_else(|| MskError::Singular("ΛΔ²Λ is not positive definite".into()))?;
    let inv = chol.inverse();
    let half: Vec<f64> = (0..n).map(|i| inv[(i, i)].sqrt()).collect();
    let mut best: f64 = 0.0;
    // B(v) = B(−v), so the sign of the last coordinate can be fixed.
    let corners = 1usize << (n - 1);
    let mut v = vec![0.0; n];
    for mask in 0..corners {
        for i in 0..n {
            let negative = i + 1 < n && (mask >> i) & 1 == 1;
            v[i] = if negative { -half[i] } else { half[i] };
        }
        best = best.max(sys.b2(&v));
    }
    Ok(best)
}

/// Induced `∞`-norm (maximum absolute row sum) of `ΛΔ²Λ`.
///
/// This is the constant in `|P(μ₁) − P(μ₂)| ≤ ‖ΛΔ²Λ‖∞ · W1(μ₁, μ₂)` for the
/// `L¹` transport distance, since `|xᵀMy| ≤ ‖x‖₁ · ‖M‖∞ · ‖y‖∞`.
pub fn coupling_norm(sys: &SpeciesSystem) -> f64 {
    let m = sys.coupling();
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Bound on `|P_a(μ) − P_b(μ)|` for the same measure `μ` under two systems,
/// uniform in the measure (and hence also a bound on the difference of the
/// infima).
pub fn parameter_lipschitz_bound(a: &SpeciesSystem, b: &SpeciesSystem) -> Result<f64> {
    let n = a.species_count();
    if b.species_count() != n {
        return Err(MskError::Dimension(
            "systems have different species counts".into(),
        ));
    }
    let lambda_l1: f64 = a
        .lambda
        .iter()
        .zip(&b.lambda)
        .map(|(x, y)| (x - y).abs())
        .sum();
    let dl = a.delta2_lambda();
    let field_scale = (0..n)
        .map(|s| 0.5 * a.tau2[s] + dl.row(s).sum())
        .fold(0.0, f64::max);
    let tau_diff = (0..n)
        .map(|s| 0.5 * (a.tau2[s] - b.tau2[s]).abs())
        .fold(0.0, f64::max);
    let delta_rows = (0..n)
        .map(|s| {
            (0..n)
                .map(|t| (a.delta2[(s, t)] - b.delta2[(s, t)]).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let delta_max = a
        .delta2
        .iter()
        .zip(b.delta2.iter())
        .map(|(x, y)| x.max(*y))
        .fold(0.0, f64::max);
    let coupling_l1: f64 = (a.coupling() - b.coupling()).iter().map(|v| v.abs()).sum();
    Ok(field_scale * lambda_l1 + tau_diff + delta_rows + delta_max * lambda_l1 + 0.5 * coupling_l1)
}
