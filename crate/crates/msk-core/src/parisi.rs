//! Discrete Parisi measures, the Parisi functional by backward Gaussian
//! recursion, its exact gradient in the overlap levels, the ordered `L¹`
//! transport distance between measures, and a numerical minimizer that
//! detects replica symmetry breaking.
//!
//! A measure with `r` levels is stored as `zeta = [ζ₀, …, ζ_{r−1}]` and
//! `q = [q₁, …, q_{r−1}]`. The conventions `ζ₋₁ = 0`, `ζ_r = 1`, `q₀ = 𝟘` and
//! `q_r = 𝟙` are implicit, and the measure puts mass `ζ_l − ζ_{l−1}` on `q_l`
//! for `l = 0, …, r`.

use std::f64::consts::LN_2;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MskError, Result};
use crate::fixedpoint::{self, SolverOptions};
use crate::gauss::{NodeSet, QuadratureSpec};
use crate::model::{check_unit_interval, SpeciesSystem};
use crate::rs_at::rs_value;
use crate::special::log_cosh;

/// Largest `r` evaluated by nested quadrature.
pub const MAX_QUADRATURE_LEVELS: usize = 5;
/// Largest `r` accepted by the Monte Carlo evaluator.
pub const MAX_MC_LEVELS: usize = 8;
/// Largest `r` accepted by [`minimize_rsb`].
pub const MAX_OPTIMIZER_LEVELS: usize = 4;
/// Slack allowed in the entrywise ordering of the overlap levels.
const ORDER_SLACK: f64 = 1e-12;
/// Most negative variance increment tolerated before reporting an ordering violation.
const VARIANCE_SLACK: f64 = 1e-12;

/// An `r`-level discrete measure with entrywise ordered support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureFields", into = "MeasureFields")]
pub struct DiscreteOrderedMeasure {
    zeta: Vec<f64>,
    q: Vec<Vec<f64>>,
}

/// Serialized form `{"zeta": [...], "q": [[...], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MeasureFields {
    zeta: Vec<f64>,
    q: Vec<Vec<f64>>,
}

impl TryFrom<MeasureFields> for DiscreteOrderedMeasure {
    type Error = MskError;
    fn try_from(f: MeasureFields) -> Result<Self> {
        Self::new(f.zeta, f.q)
    }
}

impl From<DiscreteOrderedMeasure> for MeasureFields {
    fn from(m: DiscreteOrderedMeasure) -> Self {
        Self {
            zeta: m.zeta,
            q: m.q,
        }
    }
}

/// One atom of a measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    /// Probability mass (possibly zero for the implicit end points).
    pub mass: f64,
    /// Location in `[0, 1]^S`.
    pub point: Vec<f64>,
}

impl DiscreteOrderedMeasure {
    /// Validates and builds a measure from `ζ₀, …, ζ_{r−1}` and `q₁, …, q_{r−1}`.
    pub fn new(zeta: Vec<f64>, q: Vec<Vec<f64>>) -> Result<Self> {
        if zeta.is_empty() {
            return Err(MskError::InvalidParameter(
                "a measure needs at least one ζ value".into(),
            ));
        }
        if zeta.iter().any(|z| !z.is_finite()) {
            return Err(MskError::NonFinite("ζ sequence".into()));
        }
        if zeta[0] < 0.0 || *zeta.last().expect("nonempty") > 1.0 {
            return Err(MskError::InvalidParameter(
                "ζ values must lie in [0, 1]".into(),
            ));
        }
        if zeta.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MskError::InvalidParameter(
                "ζ values must be strictly increasing".into(),
            ));
        }
        if q.len() + 1 != zeta.len() {
            return Err(MskError::Dimension(format!(
                "{} ζ values need {} overlap levels, got {}",
                zeta.len(),
                zeta.len() - 1,
                q.len()
            )));
        }
        if let Some(first) = q.first() {
            let n = first.len();
            if n == 0 || q.iter().any(|l| l.len() != n) {
                return Err(MskError::Dimension(
                    "overlap levels must share a nonzero length".into(),
                ));
            }
        }
        for level in &q {
            check_unit_interval(level)?;
        }
        for w in q.windows(2) {
            if w[0].iter().zip(&w[1]).any(|(a, b)| *a > b + ORDER_SLACK) {
                return Err(MskError::Constraint(
                    "overlap levels are not entrywise ordered".into(),
                ));
            }
        }
        Ok(Self { zeta, q })
    }

    /// The replica-symmetric measure `ζ = (0, 1)`, `q₁ = p` (a Dirac mass at `p`).
    pub fn replica_symmetric(p: Vec<f64>) -> Result<Self> {
        Self::new(vec![0.0, 1.0], vec![p])
    }

    /// Number of levels `r`.
    pub fn levels(&self) -> usize {
        self.zeta.len()
    }

    /// `ζ₀, …, ζ_{r−1}`.
    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    /// `q₁, …, q_{r−1}`.
    pub fn q(&self) -> &[Vec<f64>] {
        &self.q
    }

    /// Species count, when the measure has an interior level.
    pub fn species_count(&self) -> Option<usize> {
        self.q.first().map(Vec::len)
    }

    /// The `r + 1` atoms `q₀ = 𝟘, q₁, …, q_{r−1}, q_r = 𝟙` with their masses.
    pub fn atoms(&self, species: usize) -> Vec<Atom> {
        let r = self.levels();
        let mut out = Vec::with_capacity(r + 1);
        out.push(Atom {
            mass: self.zeta[0],
            point: vec![0.0; species],
        });
        for l in 1..r {
            out.push(Atom {
                mass: self.zeta[l] - self.zeta[l - 1],
                point: self.q[l - 1].clone(),
            });
        }
        out.push(Atom {
            mass: 1.0 - self.zeta[r - 1],
            point: vec![1.0; species],
        });
        out
    }

    /// The overlap level `q_l` for `l = 0, …, r`, including the implicit ends.
    fn level(&self, l: usize, species: usize) -> Vec<f64> {
        if l == 0 {
            vec![0.0; species]
        } else if l == self.levels() {
            vec![1.0; species]
        } else {
            self.q[l - 1].clone()
        }
    }

    fn check_species(&self, sys: &SpeciesSystem) -> Result<()> {
        match self.species_count() {
            Some(n) if n != sys.species_count() => Err(MskError::Dimension(format!(
                "measure has {n} species, system has {}",
                sys.species_count()
            ))),
            _ => Ok(()),
        }
    }
}

/// Result of a Parisi functional evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParisiEvaluation {
    /// The functional value.
    pub value: f64,
    /// `Q_l = B(q_l, q_l)` for `l = 0, …, r`.
    pub q_levels: Vec<f64>,
    /// `Q_l^s = 2(Δ²Λq_l)_s`, indexed `[l][s]` for `l = 0, …, r`.
    pub q_levels_species: Vec<Vec<f64>>,
    /// `E_h X₀^s` per species.
    pub per_species_x0: Vec<f64>,
    /// `a_l = E[W₁⋯W_l (M_l)²]` per species, indexed `[l − 1][s]` for
    /// `l = 1, …, r − 1`; `M_l` is the tilted conditional mean of `tanh`.
    pub a_levels: Vec<Vec<f64>>,
    /// Gradient in the interior levels, indexed `[l − 1][s]`, when requested.
    pub gradient_q: Option<Vec<Vec<f64>>>,
    /// Largest deviation of `Σ_j w_j W_j` from one over all grid points.
    pub weight_normalization_error: f64,
}

/// Where the per-level Gaussian rules come from.
#[derive(Clone, Copy)]
enum RuleSource<'a> {
    Quadrature(&'a QuadratureSpec),
    /// Equal-weight random nodes, reused across parents of the same level.
    MonteCarlo {
        per_level: usize,
        seed: u64,
    },
}

impl RuleSource<'_> {
    fn rule(&self, sigma: f64, level: usize) -> Arc<NodeSet> {
        match *self {
            RuleSource::Quadrature(spec) => spec.rule_for(sigma),
            RuleSource::MonteCarlo { per_level, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(level as u64);
                let nodes: Vec<f64> = (0..per_level).map(|_| rng.sample(StandardNormal)).collect();
                Arc::new(NodeSet {
                    nodes,
                    weights: vec![1.0 / per_level as f64; per_level],
                })
            }
        }
    }
}

#[derive(Clone, Copy)]
struct NodeOut {
    x: f64,
    m: f64,
    a: [f64; MAX_MC_LEVELS],
}

/// Backward recursion for one species.
struct SpeciesRecursion<'a> {
    zeta: &'a [f64],
    r: usize,
    /// `sd[l] = sqrt(Q_l − Q_{l−1})` for `l = 1, …, r`; `sd[0]` is `τ_s`.
    sd: Vec<f64>,
    /// `rules[l]` integrates the Gaussian entering at level `l`.
    rules: Vec<Arc<NodeSet>>,
    root_rule: Arc<NodeSet>,
    root_sd: f64,
    merged_root: bool,
}

impl SpeciesRecursion<'_> {
    /// `X_l`, the tilted mean `M_l` and the accumulated `A_k` (`k ≥ l`) at the
    /// field value `y`.
    fn node(&self, l: usize, y: f64, norm_err: &mut f64) -> NodeOut {
        let r = self.r;
        let mut out = NodeOut {
            x: 0.0,
            m: 0.0,
            a: [0.0; MAX_MC_LEVELS],
        };
        if l == r {
            out.x = log_cosh(y);
            out.m = y.tanh();
            return out;
        }
        if l + 1 == r && self.zeta[l] == 1.0 {
            // E_r cosh(y + σz) = cosh(y)e^{σ²/2} and E_r sinh / E_r cosh = tanh(y).
            out.x = log_cosh(y) + 0.5 * self.sd[r] * self.sd[r];
            out.m = y.tanh();
            if l >= 1 {
                out.a[l] = out.m * out.m;
            }
            return out;
        }
        let sd = self.sd[l + 1];
        if sd == 0.0 {
            let mut child = self.node(l + 1, y, norm_err);
            if l >= 1 {
                child.a[l] = child.m * child.m;
            }
            return child;
        }
        let rule = &self.rules[l + 1];
        let children: Vec<NodeOut> = rule
            .nodes
            .iter()
            .map(|z| self.node(l + 1, y + sd * z, norm_err))
            .collect();
        let zeta = self.zeta[l];
        let tilts: Vec<f64> = if zeta > 0.0 {
            let mx = children
                .iter()
                .map(|c| zeta * c.x)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = children.iter().map(|c| (zeta * c.x - mx).exp()).collect();
            let total: f64 = e.iter().zip(&rule.weights).map(|(e, w)| e * w).sum();
            out.x = (mx + total.ln()) / zeta;
            e.into_iter().map(|v| v / total).collect()
        } else {
            out.x = children
                .iter()
                .zip(&rule.weights)
                .map(|(c, w)| w * c.x)
                .sum();
            vec![1.0; children.len()]
        };
        let mut mass = 0.0;
        for ((c, w), t) in children.iter().zip(&rule.weights).zip(&tilts) {
            let wt = w * t;
            mass += wt;
            out.m += wt * c.m;
            for k in (l + 1)..r {
                out.a[k] += wt * c.a[k];
            }
        }
        *norm_err = norm_err.max((mass - 1.0).abs());
        if l >= 1 {
            out.a[l] = out.m * out.m;
        }
        out
    }

    /// `E_h X₀` and `a_k = E_h A_k` for `k = 1, …, r − 1`.
    fn root(&self, norm_err: &mut f64) -> (f64, Vec<f64>) {
        // With ζ₀ = 0, X₀ = E₁X₁, so h and z₁ merge into one Gaussian.
        let level = if self.merged_root { 1 } else { 0 };
        let mut x = 0.0;
        let mut a = vec![0.0; self.r.saturating_sub(1)];
        if self.root_sd == 0.0 {
            let out = self.node(level, 0.0, norm_err);
            x = out.x;
            for (k, ak) in a.iter_mut().enumerate() {
                *ak = out.a[k + 1];
            }
            return (x, a);
        }
        for (z, w) in self.root_rule.nodes.iter().zip(&self.root_rule.weights) {
            let out = self.node(level, self.root_sd * z, norm_err);
            x += w * out.x;
            for (k, ak) in a.iter_mut().enumerate() {
                *ak += w * out.a[k + 1];
            }
        }
        (x, a)
    }
}

fn evaluate(
    sys: &SpeciesSystem,
    mu: &DiscreteOrderedMeasure,
    source: RuleSource<'_>,
    with_gradient: bool,
) -> Result<ParisiEvaluation> {
    mu.check_species(sys)?;
    let n = sys.species_count();
    let r = mu.levels();
    let levels: Vec<Vec<f64>> = (0..=r).map(|l| mu.level(l, n)).collect();
    let q_levels: Vec<f64> = levels.iter().map(|q| sys.b2(q)).collect();
    let q_levels_species: Vec<Vec<f64>> = levels.iter().map(|q| sys.cavity_variances(q)).collect();
    let zeta = mu.zeta();

    let mut per_species_x0 = Vec::with_capacity(n);
    let mut a_levels = vec![vec![0.0; n]; r - 1];
    let mut norm_err: f64 = 0.0;
    for s in 0..n {
        let mut sd = vec![0.0; r + 1];
        sd[0] = sys.tau2()[s].sqrt();
        for l in 1..=r {
            let inc = q_levels_species[l][s] - q_levels_species[l - 1][s];
            if inc < -VARIANCE_SLACK {
                return Err(MskError::Constraint(format!(
                    "negative variance increment {inc:e} at level {l}, species {s}"
                )));
            }
            sd[l] = inc.max(0.0).sqrt();
        }
        let merged_root = zeta[0] == 0.0;
        let root_sd = if merged_root {
            (sd[0] * sd[0] + sd[1] * sd[1]).sqrt()
        } else {
            sd[0]
        };
        let rules: Vec<Arc<NodeSet>> = (0..=r).map(|l| source.rule(sd[l], l)).collect();
        let rec = SpeciesRecursion {
            zeta,
            r,
            root_rule: source.rule(root_sd, 0),
            root_sd,
            sd,
            rules,
            merged_root,
        };
        let (x0, a) = rec.root(&mut norm_err);
        per_species_x0.push(x0);
        for (l, al) in a.into_iter().enumerate() {
            a_levels[l][s] = al;
        }
    }

    let entropy: f64 = per_species_x0
        .iter()
        .zip(sys.lambda())
        .map(|(x, l)| l * x)
        .sum();
    let penalty: f64 = (0..r)
        .map(|l| zeta[l] * (q_levels[l + 1] - q_levels[l]))
        .sum();
    let value = LN_2 + entropy - 0.5 * penalty;
    if !value.is_finite() {
        return Err(MskError::NonFinite("Parisi functional".into()));
    }
    let gradient_q = with_gradient.then(|| gradient_from(sys, mu, &a_levels));
    Ok(ParisiEvaluation {
        value,
        q_levels,
        q_levels_species,
        per_species_x0,
        a_levels,
        gradient_q,
        weight_normalization_error: norm_err,
    })
}

/// `∂P/∂q_l^s = (ζ_l − ζ_{l−1}) (ΛΔ²Λ(q_l − a_l))_s`.
fn gradient_from(
    sys: &SpeciesSystem,
    mu: &DiscreteOrderedMeasure,
    a_levels: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let m = sys.coupling();
    let n = sys.species_count();
    (1..mu.levels())
        .map(|l| {
            let weight = mu.zeta[l] - mu.zeta[l - 1];
            let diff: Vec<f64> = mu.q[l - 1]
                .iter()
                .zip(&a_levels[l - 1])
                .map(|(q, a)| q - a)
                .collect();
            (0..n)
                .map(|s| weight * (0..n).map(|t| m[(s, t)] * diff[t]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn check_quadrature_levels(mu: &DiscreteOrderedMeasure) -> Result<()> {
    if mu.levels() > MAX_QUADRATURE_LEVELS {
        return Err(MskError::TooLarge(format!(
            "nested quadrature supports at most {MAX_QUADRATURE_LEVELS} levels, got {}",
            mu.levels()
        )));
    }
    Ok(())
}

/// Evaluates the Parisi functional by nested quadrature.
pub fn parisi_value(
    sys: &SpeciesSystem,
    mu: &DiscreteOrderedMeasure,
    spec: &QuadratureSpec,
) -> Result<ParisiEvaluation> {
    check_quadrature_levels(mu)?;
    spec.validate()?;
    evaluate(sys, mu, RuleSource::Quadrature(spec), false)
}

/// Evaluates the Parisi functional and its gradient in the interior levels.
pub fn parisi_evaluate_with_gradient(
    sys: &SpeciesSystem,
    mu: &DiscreteOrderedMeasure,
    spec: &QuadratureSpec,
) -> Result<ParisiEvaluation> {
    check_quadrature_levels(mu)?;
    spec.validate()?;
    evaluate(sys, mu, RuleSource::Quadrature(spec), true)
}

/// Gradient of the Parisi functional in `q₁, …, q_{r−1}`, indexed `[l − 1][s]`.
pub fn parisi_gradient_q(
    sys: &SpeciesSystem,
    mu: &DiscreteOrderedMeasure,
    spec: &QuadratureSpec,
) -> Result<Vec<Vec<f64>>> {
    Ok(parisi_evaluate_with_gradient(sys, mu, spec)?
        .gradient_q
        .expect("gradient requested"))
}

/// Monte Carlo evaluation for diagnostics, including `r` beyond the nested
/// quadrature limit. Each level uses `⌈mc_samples^{1/r}⌉` shared Gaussian
/// draws (common random numbers), so the estimate carries a small bias from
/// the `log E` nonlinearity.
pub fn parisi_value_mc(
    sys: &SpeciesSystem,
    mu: &DiscreteOrderedMeasure,
    spec: &QuadratureSpec,
) -> Result<ParisiEvaluation> {
    spec.validate()?;
    if mu.levels() > MAX_MC_LEVELS {
        return Err(MskError::TooLarge(format!(
            "the Monte Carlo evaluator supports at most {MAX_MC_LEVELS} levels"
        )));
    }
    let per_level = ((spec.mc_samples as f64)
        .powf(1.0 / mu.levels() as f64)
        .ceil() as usize)
        .max(2);
    evaluate(
        sys,
        mu,
        RuleSource::MonteCarlo {
            per_level,
            seed: spec.seed,
        },
        false,
    )
}

/// Optimal `L¹` transport cost between two measures with totally ordered
/// supports, by pairing quantiles on the merged ζ grid.
pub fn w1_ordered(mu1: &DiscreteOrderedMeasure, mu2: &DiscreteOrderedMeasure) -> Result<f64> {
    let n = match (mu1.species_count(), mu2.species_count()) {
        (Some(a), Some(b)) if a != b => {
            return Err(MskError::Dimension(
                "measures have different species counts".into(),
            ))
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => {
            return Err(MskError::Dimension(
                "species count is undetermined for two measures without interior levels".into(),
            ))
        }
    };
    let atoms1 = mu1.atoms(n);
    let atoms2 = mu2.atoms(n);
    let cum = |atoms: &[Atom]| -> Vec<f64> {
        let mut acc = 0.0;
        let mut out: Vec<f64> = atoms
            .iter()
            .map(|a| {
                acc += a.mass;
                acc
            })
            .collect();
        *out.last_mut().expect("nonempty") = 1.0;
        out
    };
    let c1 = cum(&atoms1);
    let c2 = cum(&atoms2);
    let mut breaks: Vec<f64> = std::iter::once(0.0)
        .chain(c1.iter().copied())
        .chain(c2.iter().copied())
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let locate = |c: &[f64], u: f64| c.iter().position(|&v| u < v).unwrap_or(c.len() - 1);
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let len = w[1] - w[0];
        if len <= 0.0 {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let p = &atoms1[locate(&c1, mid)].point;
        let q = &atoms2[locate(&c2, mid)].point;
        total += len * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total)
}

/// Euclidean projection of `values` onto non-decreasing sequences (pool
/// adjacent violators).
pub fn isotonic_projection(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().expect("two blocks");
            *last = (
                (m1 * n1 as f64 + m2 * n2 as f64) / (n1 + n2) as f64,
                n1 + n2,
            );
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, k)| std::iter::repeat(m).take(k))
        .collect()
}

/// Projects overlap levels `[l][s]` onto the ordered chain inside `[0, 1]^S`:
/// isotonic regression in `l` per species, then clamping.
pub fn project_levels(levels: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if levels.is_empty() {
        return Vec::new();
    }
    let n = levels[0].len();
    let mut out = levels.to_vec();
    for s in 0..n {
        let column: Vec<f64> = levels.iter().map(|l| l[s]).collect();
        for (l, v) in isotonic_projection(&column).into_iter().enumerate() {
            out[l][s] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Settings of [`minimize_rsb`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RsbOptions {
    /// Iteration cap of each projected-gradient run.
    pub max_iterations: usize,
    /// Stop when the projected-gradient sup-norm falls below this.
    pub grad_tol: f64,
    /// Number of multi-start runs.
    pub starts: usize,
    /// Seed of the start perturbations.
    pub seed: u64,
    /// Coarse grid size for each interior ζ before golden-section refinement.
    pub zeta_grid: usize,
    /// Final bracket width of the golden-section search on ζ.
    pub zeta_tol: f64,
}

impl Default for RsbOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            grad_tol: 1e-7,
            starts: 4,
            seed: 0,
            zeta_grid: 9,
            zeta_tol: 1e-3,
        }
    }
}

/// Result of [`minimize_rsb`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RsbResult {
    /// Best measure found.
    pub measure: DiscreteOrderedMeasure,
    /// Its Parisi value.
    pub value: f64,
    /// `RS(q*)`, the replica-symmetric reference.
    pub rs_value: f64,
    /// `RS(q*) − value`; positive values mean an RSB measure beats RS.
    pub rs_gap: f64,
    /// Estimated quadrature error of `rs_gap`, from a refined re-evaluation.
    pub quadrature_error: f64,
    /// Maximal fixed point used for the reference and the starts.
    pub q_star: Vec<f64>,
    /// Whether the final projected-gradient run met `grad_tol`.
    pub converged: bool,
    /// Projected-gradient sup-norm at the returned measure.
    pub projected_gradient: f64,
    /// Total projected-gradient iterations over all runs.
    pub iterations: usize,
}

struct LevelRun {
    q: Vec<Vec<f64>>,
    value: f64,
    projected_gradient: f64,
    iterations: usize,
    converged: bool,
}

fn sup_norm(rows: &[Vec<f64>]) -> f64 {
    rows.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

fn dot(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| x * y)
        .sum()
}

/// Projected descent on the levels for fixed ζ.
///
/// For positive-semidefinite `Δ²` the step direction is `a_l − q_l`, the
/// gradient preconditioned by `((ζ_l − ζ_{l−1})ΛΔ²Λ)⁻¹`, which is always a
/// descent direction there. The plain gradient is the fallback.
fn optimize_levels(
    sys: &SpeciesSystem,
    zeta: &[f64],
    start: Vec<Vec<f64>>,
    spec: &QuadratureSpec,
    opts: &RsbOptions,
) -> Result<LevelRun> {
    let eval_at = |q: &[Vec<f64>]| -> Result<(DiscreteOrderedMeasure, ParisiEvaluation)> {
        let mu = DiscreteOrderedMeasure::new(zeta.to_vec(), q.to_vec())?;
        let ev = evaluate(sys, &mu, RuleSource::Quadrature(spec), true)?;
        Ok((mu, ev))
    };
    let norm = crate::model::coupling_norm(sys).max(f64::MIN_POSITIVE);
    let mut q = project_levels(&start);
    let (_, mut ev) = eval_at(&q)?;
    let mut step: f64 = 1.0;
    let mut iterations = 0;
    let mut pg = f64::INFINITY;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let grad = ev.gradient_q.clone().expect("gradient requested");
        let trial: Vec<Vec<f64>> = q
            .iter()
            .zip(&grad)
            .map(|(ql, gl)| ql.iter().zip(gl).map(|(a, b)| a - b).collect())
            .collect();
        let projected = project_levels(&trial);
        pg = q
            .iter()
            .flatten()
            .zip(projected.iter().flatten())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()));
        if pg < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut directions: Vec<Vec<Vec<f64>>> = Vec::with_capacity(2);
        if sys.is_psd() {
            directions.push(
                q.iter()
                    .zip(&ev.a_levels)
                    .map(|(ql, al)| ql.iter().zip(al).map(|(q, a)| a - q).collect())
                    .collect(),
            );
        }
        directions.push(
            grad.iter()
                .enumerate()
                .map(|(l, gl)| {
                    let w = (zeta[l + 1] - zeta[l]) * norm;
                    gl.iter().map(|g| -g / w).collect()
                })
                .collect(),
        );
        let mut accepted = None;
        'dirs: for dir in &directions {
            let mut t = (2.0 * step).min(8.0);
            for _ in 0..50 {
                let cand: Vec<Vec<f64>> = project_levels(
                    &q.iter()
                        .zip(dir)
                        .map(|(ql, dl)| ql.iter().zip(dl).map(|(a, d)| a + t * d).collect())
                        .collect::<Vec<Vec<f64>>>(),
                );
                let delta: Vec<Vec<f64>> = cand
                    .iter()
                    .zip(&q)
                    .map(|(c, ql)| c.iter().zip(ql).map(|(a, b)| a - b).collect())
                    .collect();
                let decrease = dot(&grad, &delta);
                if decrease >= 0.0 || sup_norm(&delta) == 0.0 {
                    t *= 0.5;
                    continue;
                }
                let (_, cev) = eval_at(&cand)?;
                if cev.value <= ev.value + 1e-4 * decrease {
                    accepted = Some((cand, cev, t));
                    break 'dirs;
                }
                t *= 0.5;
            }
        }
        match accepted {
            Some((cand, cev, t)) => {
                q = cand;
                ev = cev;
                step = t;
            }
            // No descent is available at working precision.
            None => break,
        }
    }
    Ok(LevelRun {
        q,
        value: ev.value,
        projected_gradient: pg,
        iterations,
        converged,
    })
}

struct ZetaRun {
    zeta: Vec<f64>,
    level: LevelRun,
    iterations: usize,
}

/// Minimizes over interior ζ values by coordinate search (coarse grid, then
/// golden section), with the levels re-optimized for every trial ζ.
fn optimize_start(
    sys: &SpeciesSystem,
    r: usize,
    start: Vec<Vec<f64>>,
    spec: &QuadratureSpec,
    opts: &RsbOptions,
) -> Result<ZetaRun> {
    let mut zeta: Vec<f64> = (0..r)
        .map(|l| {
            if l == 0 {
                0.0
            } else {
                l as f64 / (r - 1) as f64
            }
        })
        .collect();
    let mut best = optimize_levels(sys, &zeta, start, spec, opts)?;
    let mut iterations = best.iterations;
    let interior = r.saturating_sub(2);
    let cycles = if interior > 1 { 2 } else { 1 };
    for _ in 0..cycles {
        for j in 1..=interior {
            let lo = zeta[j - 1];
            let hi = zeta[j + 1];
            let mut try_zeta = |z: f64, warm: &[Vec<f64>]| -> Result<LevelRun> {
                let mut trial = zeta.clone();
                trial[j] = z;
                let run = optimize_levels(sys, &trial, warm.to_vec(), spec, opts)?;
                iterations += run.iterations;
                Ok(run)
            };
            let grid = opts.zeta_grid.max(2);
            let points: Vec<f64> = (1..=grid)
                .map(|k| lo + (hi - lo) * k as f64 / (grid + 1) as f64)
                .collect();
            let mut values = Vec::with_capacity(grid);
            let mut best_k = 0;
            let mut best_run: Option<LevelRun> = None;
            for (k, &z) in points.iter().enumerate() {
                let run = try_zeta(z, &best.q)?;
                values.push(run.value);
                if best_run.as_ref().map_or(true, |b| run.value < b.value) {
                    best_k = k;
                    best_run = Some(run);
                }
            }
            let mut a = if best_k == 0 { lo } else { points[best_k - 1] };
            let mut b = if best_k + 1 == grid {
                hi
            } else {
                points[best_k + 1]
            };
            let mut best_z = points[best_k];
            let mut best_run = best_run.expect("nonempty grid");
            let golden = 0.5 * (5f64.sqrt() - 1.0);
            let mut c = b - golden * (b - a);
            let mut d = a + golden * (b - a);
            let mut fc = try_zeta(c, &best_run.q)?;
            let mut fd = try_zeta(d, &best_run.q)?;
            while b - a > opts.zeta_tol {
                if fc.value < fd.value {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - golden * (b - a);
                    fc = try_zeta(c, &best_run.q)?;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + golden * (b - a);
                    fd = try_zeta(d, &best_run.q)?;
                }
                for (z, run) in [(c, &fc), (d, &fd)] {
                    if run.value < best_run.value {
                        best_z = z;
                        best_run = LevelRun {
                            q: run.q.clone(),
                            value: run.value,
                            projected_gradient: run.projected_gradient,
                            iterations: run.iterations,
                            converged: run.converged,
                        };
                    }
                }
            }
            if best_run.value < best.value {
                zeta[j] = best_z;
                best = best_run;
            }
        }
    }
    Ok(ZetaRun {
        zeta,
        level: best,
        iterations,
    })
}

/// Searches `r`-level measures with `ζ₀ = 0` and `ζ_{r−1} = 1` for a value
/// below the replica-symmetric minimum.
///
/// Starts are spread around `q*` with deterministic perturbations; the
/// replica-symmetric measure itself is always among the candidates, so
/// `rs_gap ≥ 0` up to rounding. The comparison with the RS minimum is only
/// meaningful for positive-semidefinite `Δ²`; with an indefinite `Δ²` the
/// search can run to the corners of the box.
pub fn minimize_rsb(
    sys: &SpeciesSystem,
    r: usize,
    spec: &QuadratureSpec,
    opts: &RsbOptions,
) -> Result<RsbResult> {
    spec.validate()?;
    if !(2..=MAX_OPTIMIZER_LEVELS).contains(&r) {
        return Err(MskError::InvalidParameter(format!(
            "the optimizer supports 2 to {MAX_OPTIMIZER_LEVELS} levels, got {r}"
        )));
    }
    let n = sys.species_count();
    let (q_star, _) = fixedpoint::maximal_fixed_point(sys, spec, &SolverOptions::default())?;
    let rs_ref = rs_value(sys, &q_star, spec)?.value;

    let starts: Vec<Vec<Vec<f64>>> = (0..opts.starts.max(1))
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            let spread = 0.05 * (i + 1) as f64;
            (1..r)
                .map(|l| {
                    let frac = if r > 2 {
                        (l - 1) as f64 / (r - 2) as f64 * 2.0 - 1.0
                    } else {
                        0.0
                    };
                    q_star
                        .iter()
                        .map(|&q| {
                            let jitter: f64 = rng.gen_range(-0.01..0.01);
                            (q + spread * frac + jitter).clamp(0.0, 1.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let runs: Vec<Result<ZetaRun>> = starts
        .into_par_iter()
        .map(|s| optimize_start(sys, r, s, spec, opts))
        .collect();

    let rs_zeta: Vec<f64> = (0..r)
        .map(|l| {
            if l == 0 {
                0.0
            } else {
                l as f64 / (r - 1) as f64
            }
        })
        .collect();
    let rs_measure = DiscreteOrderedMeasure::new(rs_zeta, vec![q_star.clone(); r - 1])?;
    let rs_eval = evaluate(sys, &rs_measure, RuleSource::Quadrature(spec), true)?;
    let mut best_measure = rs_measure;
    let mut best_value = rs_eval.value;
    let mut best_pg = {
        let g = rs_eval.gradient_q.expect("gradient requested");
        sup_norm(&g)
    };
    let mut converged = best_pg < opts.grad_tol;
    let mut iterations = 0;
    for run in runs {
        let run = run?;
        iterations += run.iterations;
        if run.level.value < best_value {
            best_value = run.level.value;
            best_measure = DiscreteOrderedMeasure::new(run.zeta, run.level.q)?;
            best_pg = run.level.projected_gradient;
            converged = run.level.converged;
        }
    }

    let refined = spec.refined();
    let p_ref = parisi_value(sys, &best_measure, &refined)?.value;
    let rs_refined = rs_value(sys, &q_star, &refined)?.value;
    let rounding = 64.0 * f64::EPSILON * best_value.abs().max(1.0);
    let quadrature_error = (p_ref - best_value).abs() + (rs_refined - rs_ref).abs() + rounding;
    debug_assert_eq!(best_measure.species_count(), Some(n));
    Ok(RsbResult {
        measure: best_measure,
        value: best_value,
        rs_value: rs_ref,
        rs_gap: rs_ref - best_value,
        quadrature_error,
        q_star,
        converged,
        projected_gradient: best_pg,
        iterations,
    })
}

/// Support summary of a measure relative to `q*`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportReport {
    /// Smallest support point.
    pub q_min: Vec<f64>,
    /// Largest support point.
    pub q_max: Vec<f64>,
    /// `q_min ⪯ q* ⪯ q_max` entrywise within the tolerance.
    pub brackets_q_star: bool,
    /// Distinct support levels per species, merging levels closer than the tolerance.
    pub level_counts: Vec<usize>,
    /// Whether every species has the same count.
    pub equal_counts: bool,
}

/// Support diagnostics: extreme points, ordering against `q*`, and per-species
/// level counts.
pub fn support_diagnostics(
    mu: &DiscreteOrderedMeasure,
    q_star: &[f64],
    tol: f64,
) -> Result<SupportReport> {
    let n = q_star.len();
    if let Some(m) = mu.species_count() {
        if m != n {
            return Err(MskError::Dimension(
                "measure and q* have different species counts".into(),
            ));
        }
    }
    let support: Vec<Atom> = mu.atoms(n).into_iter().filter(|a| a.mass > 0.0).collect();
    let q_min = support.first().expect("total mass is one").point.clone();
    let q_max = support.last().expect("total mass is one").point.clone();
    let brackets_q_star =
        (0..n).all(|s| q_min[s] <= q_star[s] + tol && q_star[s] <= q_max[s] + tol);
    let level_counts: Vec<usize> = (0..n)
        .map(|s| {
            let mut count = 0;
            let mut last = f64::NEG_INFINITY;
            for a in &support {
                if count == 0 || a.point[s] - last > tol {
                    count += 1;
                }
                last = a.point[s];
            }
            count
        })
        .collect();
    let equal_counts = level_counts.windows(2).all(|w| w[0] == w[1]);
    Ok(SupportReport {
        q_min,
        q_max,
        brackets_q_star,
        level_counts,
        equal_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn two_species() -> SpeciesSystem {
        SpeciesSystem::new(
            vec![0.45, 0.55],
            vec![vec![1.1, 0.7], vec![0.7, 0.8]],
            vec![0.3, 0.1],
        )
        .unwrap()
    }

    fn measure(zeta: &[f64], q: &[&[f64]]) -> DiscreteOrderedMeasure {
        DiscreteOrderedMeasure::new(zeta.to_vec(), q.iter().map(|l| l.to_vec()).collect()).unwrap()
    }

    #[test]
    fn validation_rejects_bad_chains() {
        assert!(DiscreteOrderedMeasure::new(vec![0.0, 0.0], vec![vec![0.1]]).is_err());
        assert!(DiscreteOrderedMeasure::new(
            vec![0.0, 0.5, 1.0],
            vec![vec![0.5, 0.2], vec![0.4, 0.3]]
        )
        .is_err());
        assert!(DiscreteOrderedMeasure::new(vec![0.0, 1.0], vec![vec![1.2]]).is_err());
        assert!(DiscreteOrderedMeasure::new(vec![0.0, 1.0], vec![]).is_err());
        assert!(DiscreteOrderedMeasure::new(vec![-0.1, 1.0], vec![vec![0.2]]).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mu = measure(&[0.0, 0.4, 1.0], &[&[0.2, 0.3], &[0.6, 0.7]]);
        let text = serde_json::to_string(&mu).unwrap();
        assert_eq!(text, r#"{"zeta":[0.0,0.4,1.0],"q":[[0.2,0.3],[0.6,0.7]]}"#);
        let back: DiscreteOrderedMeasure = serde_json::from_str(&text).unwrap();
        assert_eq!(back, mu);
        let bad = r#"{"zeta":[0.0,0.4,1.0],"q":[[0.6,0.3],[0.2,0.7]]}"#;
        assert!(serde_json::from_str::<DiscreteOrderedMeasure>(bad).is_err());
    }

    #[test]
    fn rs_measure_matches_rs_functional() {
        let s = two_species();
        let spec = QuadratureSpec::default();
        for q in [[0.0, 0.0], [0.3, 0.8], [1.0, 1.0], [0.55, 0.12]] {
            let mu = DiscreteOrderedMeasure::replica_symmetric(q.to_vec()).unwrap();
            let p = parisi_value(&s, &mu, &spec).unwrap().value;
            let rs = rs_value(&s, &q, &spec).unwrap().value;
            assert!((p - rs).abs() < 1e-12, "{p} vs {rs}");
        }
    }

    #[test]
    fn zero_overlap_single_species() {
        let beta2: f64 = 0.9;
        let s = SpeciesSystem::new(vec![1.0], vec![vec![beta2]], vec![0.0]).unwrap();
        let mu = DiscreteOrderedMeasure::replica_symmetric(vec![0.0]).unwrap();
        let p = parisi_value(&s, &mu, &QuadratureSpec::default())
            .unwrap()
            .value;
        assert!((p - (LN_2 + beta2 / 2.0)).abs() < 1e-14);
    }

    #[test]
    fn degenerate_level_collapses() {
        let s = two_species();
        let spec = QuadratureSpec::default();
        let three = measure(&[0.0, 0.37, 1.0], &[&[0.4, 0.5], &[0.4, 0.5]]);
        let two = measure(&[0.0, 1.0], &[&[0.4, 0.5]]);
        let a = parisi_value(&s, &three, &spec).unwrap().value;
        let b = parisi_value(&s, &two, &spec).unwrap().value;
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn splitting_a_level_is_invariant() {
        let s = two_species();
        let spec = QuadratureSpec::default();
        let coarse = measure(&[0.0, 0.5, 1.0], &[&[0.2, 0.3], &[0.7, 0.6]]);
        let fine = measure(
            &[0.0, 0.3, 0.5, 1.0],
            &[&[0.2, 0.3], &[0.2, 0.3], &[0.7, 0.6]],
        );
        let a = parisi_value(&s, &coarse, &spec).unwrap().value;
        let b = parisi_value(&s, &fine, &spec).unwrap().value;
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn positive_first_zeta_uses_tilted_field_level() {
        // With ζ₀ > 0 the field h enters through a tilted expectation; splitting
        // the bottom level must still leave the value unchanged.
        let s = two_species();
        let spec = QuadratureSpec::default();
        let a = measure(&[0.2, 0.6, 1.0], &[&[0.3, 0.2], &[0.5, 0.6]]);
        let b = measure(
            &[0.2, 0.4, 0.6, 1.0],
            &[&[0.3, 0.2], &[0.3, 0.2], &[0.5, 0.6]],
        );
        let va = parisi_value(&s, &a, &spec).unwrap().value;
        let vb = parisi_value(&s, &b, &spec).unwrap().value;
        assert!((va - vb).abs() < 1e-9);
    }

    fn finite_difference_gradient(
        s: &SpeciesSystem,
        mu: &DiscreteOrderedMeasure,
        spec: &QuadratureSpec,
        h: f64,
    ) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; s.species_count()]; mu.levels() - 1];
        for l in 0..mu.levels() - 1 {
            for sp in 0..s.species_count() {
                let mut up = mu.q().to_vec();
                let mut dn = mu.q().to_vec();
                up[l][sp] += h;
                dn[l][sp] -= h;
                let pu = parisi_value(
                    s,
                    &DiscreteOrderedMeasure::new(mu.zeta().to_vec(), up).unwrap(),
                    spec,
                )
                .unwrap()
                .value;
                let pd = parisi_value(
                    s,
                    &DiscreteOrderedMeasure::new(mu.zeta().to_vec(), dn).unwrap(),
                    spec,
                )
                .unwrap()
                .value;
                out[l][sp] = (pu - pd) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = two_species();
        let spec = QuadratureSpec::default();
        for mu in [
            measure(&[0.0, 0.4, 1.0], &[&[0.2, 0.3], &[0.6, 0.7]]),
            measure(&[0.1, 0.55, 0.9], &[&[0.35, 0.1], &[0.5, 0.45]]),
            measure(
                &[0.0, 0.3, 0.6, 1.0],
                &[&[0.1, 0.2], &[0.4, 0.4], &[0.8, 0.7]],
            ),
        ] {
            let g = parisi_gradient_q(&s, &mu, &spec).unwrap();
            let fd = finite_difference_gradient(&s, &mu, &spec, 1e-4);
            for (gl, fl) in g.iter().zip(&fd) {
                for (a, b) in gl.iter().zip(fl) {
                    assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-3), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn rs_gradient_is_coupling_times_vector_field() {
        let s = two_species();
        let spec = QuadratureSpec::default();
        let q = [0.35, 0.6];
        let g = parisi_gradient_q(
            &s,
            &DiscreteOrderedMeasure::replica_symmetric(q.to_vec()).unwrap(),
            &spec,
        )
        .unwrap();
        let f = fixedpoint::f_map(&s, &q, &spec).unwrap();
        let m = s.coupling();
        for sp in 0..2 {
            let expected: f64 = (0..2).map(|t| m[(sp, t)] * (q[t] - f[t])).sum();
            assert!((g[0][sp] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_normalized() {
        let s = two_species();
        let mu = measure(&[0.2, 0.5, 0.8], &[&[0.3, 0.2], &[0.6, 0.5]]);
        let ev = parisi_value(&s, &mu, &QuadratureSpec::default()).unwrap();
        assert!(ev.weight_normalization_error < 1e-10);
        assert!(ev.q_levels.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn level_caps_are_enforced() {
        let s = SpeciesSystem::new(vec![1.0], vec![vec![1.0]], vec![0.0]).unwrap();
        let zeta: Vec<f64> = (0..6).map(|l| l as f64 / 6.0).collect();
        let q: Vec<Vec<f64>> = (1..6).map(|l| vec![l as f64 / 6.0]).collect();
        let mu = DiscreteOrderedMeasure::new(zeta, q).unwrap();
        assert!(matches!(
            parisi_value(&s, &mu, &QuadratureSpec::default()),
            Err(MskError::TooLarge(_))
        ));
        let spec = QuadratureSpec {
            mc_samples: 4096,
            ..QuadratureSpec::default()
        };
        assert!(parisi_value_mc(&s, &mu, &spec).is_ok());
    }

    #[test]
    fn monte_carlo_evaluator_is_close_to_quadrature() {
        let s = two_species();
        let mu = measure(&[0.0, 0.4, 1.0], &[&[0.2, 0.3], &[0.6, 0.7]]);
        let spec = QuadratureSpec {
            mc_samples: 1_000_000,
            seed: 3,
            ..QuadratureSpec::default()
        };
        let quad = parisi_value(&s, &mu, &spec).unwrap().value;
        let mc = parisi_value_mc(&s, &mu, &spec).unwrap().value;
        assert!((quad - mc).abs() < 2e-2, "{quad} vs {mc}");
    }

    #[test]
    fn w1_trivial_cases() {
        let a = measure(&[0.0, 0.4, 1.0], &[&[0.2, 0.3], &[0.6, 0.7]]);
        assert_eq!(w1_ordered(&a, &a).unwrap(), 0.0);
        let p = DiscreteOrderedMeasure::replica_symmetric(vec![0.1, 0.9]).unwrap();
        let q = DiscreteOrderedMeasure::replica_symmetric(vec![0.4, 0.2]).unwrap();
        assert!((w1_ordered(&p, &q).unwrap() - 1.0).abs() < 1e-15);
    }

    /// Exhaustive matching oracle: with all masses multiples of `1/K`, both
    /// measures are uniform over `K` (repeated) points, and optimal transport
    /// between uniform measures is attained at a permutation.
    fn permutation_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let k = a.len();
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = f64::INFINITY;
        fn heap(k: usize, perm: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
            if k == 1 {
                visit(perm);
                return;
            }
            for i in 0..k {
                heap(k - 1, perm, visit);
                if k % 2 == 0 {
                    perm.swap(i, k - 1);
                } else {
                    perm.swap(0, k - 1);
                }
            }
        }
        heap(k, &mut perm, &mut |p: &[usize]| {
            let cost: f64 = p
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    a[i].iter()
                        .zip(&b[j])
                        .map(|(x, y)| (x - y).abs())
                        .sum::<f64>()
                })
                .sum();
            best = best.min(cost);
        });
        best / k as f64
    }

    fn random_grid_measure(
        rng: &mut ChaCha8Rng,
        k: usize,
        species: usize,
    ) -> DiscreteOrderedMeasure {
        let mut cuts: Vec<usize> = (0..k).filter(|_| rng.gen_bool(0.5)).collect();
        if cuts.is_empty() || cuts[0] != 0 && rng.gen_bool(0.5) {
            cuts.insert(0, 0);
        }
        if *cuts.last().unwrap() != k && rng.gen_bool(0.5) {
            cuts.push(k);
        }
        let zeta: Vec<f64> = cuts.iter().map(|&c| c as f64 / k as f64).collect();
        let mut levels: Vec<Vec<f64>> = (1..zeta.len())
            .map(|_| (0..species).map(|_| rng.gen::<f64>()).collect())
            .collect();
        for s in 0..species {
            let mut col: Vec<f64> = levels.iter().map(|l| l[s]).collect();
            col.sort_by(f64::total_cmp);
            for (l, v) in col.into_iter().enumerate() {
                levels[l][s] = v;
            }
        }
        DiscreteOrderedMeasure::new(zeta, levels).unwrap()
    }

    fn expand(mu: &DiscreteOrderedMeasure, k: usize, species: usize) -> Vec<Vec<f64>> {
        mu.atoms(species)
            .into_iter()
            .flat_map(|a| {
                let copies = (a.mass * k as f64).round() as usize;
                std::iter::repeat(a.point).take(copies)
            })
            .collect()
    }

    #[test]
    fn w1_matches_exhaustive_matching() {
        let k = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let a = random_grid_measure(&mut rng, k, 2);
            let b = random_grid_measure(&mut rng, k, 2);
            if a.species_count().is_none() && b.species_count().is_none() {
                continue;
            }
            let ea = expand(&a, k, 2);
            let eb = expand(&b, k, 2);
            assert_eq!(ea.len(), k);
            assert_eq!(eb.len(), k);
            let oracle = permutation_oracle(&ea, &eb);
            let fast = w1_ordered(&a, &b).unwrap();
            assert!((oracle - fast).abs() < 1e-10, "{oracle} vs {fast}");
        }
    }

    #[test]
    fn isotonic_projection_examples() {
        assert_eq!(isotonic_projection(&[1.0, 3.0, 2.0]), vec![1.0, 2.5, 2.5]);
        assert_eq!(isotonic_projection(&[3.0, 2.0, 1.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(isotonic_projection(&[0.1, 0.2]), vec![0.1, 0.2]);
        let p = project_levels(&[vec![0.9, -0.2], vec![0.5, 0.4], vec![1.3, 0.1]]);
        assert_eq!(p, vec![vec![0.7, 0.0], vec![0.7, 0.25], vec![1.0, 0.25]]);
    }

    #[test]
    fn support_diagnostics_examples() {
        let q_star = [0.4, 0.6];
        let dirac = DiscreteOrderedMeasure::replica_symmetric(q_star.to_vec()).unwrap();
        let r = support_diagnostics(&dirac, &q_star, 1e-9).unwrap();
        assert_eq!(r.q_min, q_star.to_vec());
        assert_eq!(r.q_max, q_star.to_vec());
        assert_eq!(r.level_counts, vec![1, 1]);
        assert!(r.brackets_q_star && r.equal_counts);
        let shifted = measure(&[0.0, 0.5, 1.0], &[&[0.5, 0.61], &[0.7, 0.8]]);
        let r = support_diagnostics(&shifted, &q_star, 1e-9).unwrap();
        assert!(!r.brackets_q_star);
        let uneven = measure(&[0.0, 0.5, 1.0], &[&[0.3, 0.6], &[0.5, 0.6]]);
        let r = support_diagnostics(&uneven, &q_star, 1e-9).unwrap();
        assert_eq!(r.level_counts, vec![2, 1]);
        assert!(!r.equal_counts);
    }

    #[test]
    fn no_interaction_optimizer_returns_rs_value() {
        let s = SpeciesSystem::new(vec![1.0], vec![vec![0.0]], vec![0.5]).unwrap();
        let spec = QuadratureSpec::default();
        let res = minimize_rsb(&s, 3, &spec, &RsbOptions::default()).unwrap();
        assert!(res.rs_gap.abs() < 1e-14, "{}", res.rs_gap);
        let g = parisi_gradient_q(&s, &res.measure, &spec).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }
}
