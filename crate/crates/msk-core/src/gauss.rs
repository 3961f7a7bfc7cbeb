//! Gaussian expectations by deterministic quadrature, with a Monte Carlo
//! fallback for cross-checks.
//!
//! Two rules for the standard normal law are available, both of the form
//! `E f(σz) ≈ Σ w_i f(σ z_i)` with weights summing to one:
//!
//! * [`RuleKind::Trapezoid`] (default): equally spaced nodes on
//!   `[−8.5, 8.5]` weighted by the Gaussian density. The spacing in the
//!   physical variable `x = σz` is capped at [`MAX_SPACING`], so the node count
//!   grows linearly with `σ`. Hyperbolic integrands such as `tanh²`, `sech⁴`
//!   and `log cosh` are analytic in the strip `|Im x| < π/2`, where this rule
//!   converges geometrically in `1/spacing`.
//! * [`RuleKind::GaussHermite`]: the classical rule with a fixed node count.
//!   Its accuracy on the same integrands degrades quickly with `σ` because the
//!   poles at `±iπ/2` sit at distance `π/(2σ)` from the real axis in `z`.
//!
//! Node tables are computed once per node count and shared read-only between
//! threads.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MskError, Result};

/// Default base node count.
pub const DEFAULT_NODES: usize = 40;
/// Largest Gauss-Hermite rule whose Newton iteration is reliable in double precision.
pub const MAX_HERMITE_NODES: usize = 150;
/// Default number of Monte Carlo samples.
pub const DEFAULT_MC_SAMPLES: usize = 200_000;
/// Half-width, in standard deviations, of the trapezoid rule's support.
pub const TRUNCATION: f64 = 8.5;
/// Largest node spacing of the trapezoid rule in the physical variable `σz`.
pub const MAX_SPACING: f64 = 0.2;

/// Which deterministic rule evaluates Gaussian expectations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// Truncated trapezoid rule with spacing adapted to the standard deviation.
    #[default]
    Trapezoid,
    /// Gauss-Hermite rule with exactly `nodes` points.
    GaussHermite,
}

/// Quadrature configuration shared by every Gaussian expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureSpec {
    /// Base node count per Gaussian coordinate. The trapezoid rule uses at
    /// least this many nodes and more when `σ` is large.
    pub nodes: usize,
    /// Sample count for the Monte Carlo fallback.
    pub mc_samples: usize,
    /// Seed of the Monte Carlo fallback.
    pub seed: u64,
    /// Deterministic rule.
    pub rule: RuleKind,
    /// Divisor applied to [`MAX_SPACING`] by the trapezoid rule.
    pub refinement: u32,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            nodes: DEFAULT_NODES,
            mc_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
            rule: RuleKind::Trapezoid,
            refinement: 1,
        }
    }
}

impl QuadratureSpec {
    /// A default spec with a different base node count.
    pub fn with_nodes(nodes: usize) -> Self {
        Self {
            nodes,
            ..Self::default()
        }
    }

    /// The same spec with twice the base node count and half the trapezoid
    /// spacing. Gauss-Hermite node counts are capped at [`MAX_HERMITE_NODES`].
    pub fn refined(&self) -> Self {
        let nodes = match self.rule {
            RuleKind::GaussHermite => (2 * self.nodes).min(MAX_HERMITE_NODES),
            RuleKind::Trapezoid => 2 * self.nodes,
        };
        Self {
            nodes,
            refinement: 2 * self.refinement.max(1),
            ..*self
        }
    }

    /// Checks `nodes ≥ 2`, `mc_samples ≥ 1000` and `refinement ≥ 1`.
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 {
            return Err(MskError::InvalidParameter(
                "at least 2 quadrature nodes are required".into(),
            ));
        }
        if self.refinement == 0 {
            return Err(MskError::InvalidParameter(
                "quadrature refinement must be at least 1".into(),
            ));
        }
        if self.rule == RuleKind::GaussHermite && self.nodes > MAX_HERMITE_NODES {
            return Err(MskError::InvalidParameter(format!(
                "Gauss-Hermite rules are limited to {MAX_HERMITE_NODES} nodes"
            )));
        }
        if self.mc_samples < 1000 {
            return Err(MskError::InvalidParameter(
                "at least 1000 Monte Carlo samples are required".into(),
            ));
        }
        Ok(())
    }

    /// The rule, in standard units, used for a Gaussian of standard deviation `sigma`.
    pub fn rule_for(&self, sigma: f64) -> Arc<NodeSet> {
        match self.rule {
            RuleKind::GaussHermite => NodeSet::hermite(self.nodes),
            RuleKind::Trapezoid => {
                let spacing = MAX_SPACING / f64::from(self.refinement.max(1));
                let needed = (2.0 * TRUNCATION * sigma / spacing).ceil();
                let count = if needed.is_finite() && needed > self.nodes as f64 {
                    // Round up to a multiple of 8 to keep the table cache small.
                    ((needed as usize + 7) / 8) * 8
                } else {
                    self.nodes
                };
                NodeSet::trapezoid(count)
            }
        }
    }

    /// `E f(σz)` without validation, for internal hot paths. `σ = 0`
    /// evaluates `f(0)` once.
    pub fn expect<F: FnMut(f64) -> f64>(&self, sigma: f64, f: F) -> f64 {
        if sigma == 0.0 {
            let mut f = f;
            return f(0.0);
        }
        self.rule_for(sigma).expect(sigma, f)
    }
}

/// Nodes and weights of a rule for the standard normal law.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    /// Abscissas in standard units.
    pub nodes: Vec<f64>,
    /// Weights, summing to one.
    pub weights: Vec<f64>,
}

type RuleCache = RwLock<HashMap<(RuleKind, usize), Arc<NodeSet>>>;
static RULES: OnceLock<RuleCache> = OnceLock::new();

fn cached(kind: RuleKind, n: usize, build: fn(usize) -> NodeSet) -> Arc<NodeSet> {
    let table = RULES.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(rule) = table.read().expect("rule table poisoned").get(&(kind, n)) {
        return Arc::clone(rule);
    }
    let rule = Arc::new(build(n));
    table
        .write()
        .expect("rule table poisoned")
        .entry((kind, n))
        .or_insert(rule)
        .clone()
}

impl NodeSet {
    /// Shared Gauss-Hermite rule with `n` nodes.
    pub fn hermite(n: usize) -> Arc<Self> {
        cached(RuleKind::GaussHermite, n, Self::compute_hermite)
    }

    /// Shared trapezoid rule with `n` intervals (`n + 1` nodes).
    pub fn trapezoid(n: usize) -> Arc<Self> {
        cached(RuleKind::Trapezoid, n, Self::compute_trapezoid)
    }

    /// Equally spaced nodes on `[−TRUNCATION, TRUNCATION]` with normalized
    /// Gaussian weights.
    pub fn compute_trapezoid(n: usize) -> Self {
        assert!(n >= 1, "a quadrature rule needs at least one interval");
        let h = 2.0 * TRUNCATION / n as f64;
        let nodes: Vec<f64> = (0..=n).map(|k| -TRUNCATION + h * k as f64).collect();
        let raw: Vec<f64> = nodes.iter().map(|z| (-0.5 * z * z).exp()).collect();
        let total: f64 = raw.iter().sum();
        Self {
            nodes,
            weights: raw.iter().map(|w| w / total).collect(),
        }
    }

    /// Computes the Gauss-Hermite rule by Newton iteration on orthonormal
    /// Hermite polynomials, then rescales from the weight `e^{-x²}` to the
    /// standard normal density.
    pub fn compute_hermite(n: usize) -> Self {
        assert!(
            (1..=MAX_HERMITE_NODES).contains(&n),
            "Gauss-Hermite rules are supported for 1..={MAX_HERMITE_NODES} nodes"
        );
        const PI_M4: f64 = 0.751_125_544_464_942_5; // π^(-1/4)
        let nf = n as f64;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let half = (n + 1) / 2;
        let mut z: f64 = 0.0;
        for i in 0..half {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            for _ in 0..100 {
                let (p1, p2) = orthonormal_hermite(n, z, PI_M4);
                let step = p1 / ((2.0 * nf).sqrt() * p2);
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            let (_, p2) = orthonormal_hermite(n, z, PI_M4);
            let pp = (2.0 * nf).sqrt() * p2;
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[half - 1] = 0.0;
        }
        let sqrt2 = std::f64::consts::SQRT_2;
        let total: f64 = w.iter().sum();
        Self {
            nodes: x.iter().map(|v| v * sqrt2).collect(),
            weights: w.iter().map(|v| v / total).collect(),
        }
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True for an empty rule (never produced by the constructors).
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Σ w_i f(σ z_i)`, returning `f(0)` exactly when `σ = 0`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, sigma: f64, mut f: F) -> f64 {
        if sigma == 0.0 {
            return f(0.0);
        }
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(sigma * x))
            .sum()
    }
}

/// Values `(p_n(z), p_{n-1}(z))` of the orthonormal Hermite recurrence.
fn orthonormal_hermite(n: usize, z: f64, p0: f64) -> (f64, f64) {
    let mut p1 = p0;
    let mut p2 = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, p2)
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(MskError::NonFinite(what.to_string()))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(MskError::InvalidParameter(format!(
            "standard deviation must be finite and nonnegative, got {sigma}"
        )));
    }
    Ok(())
}

/// `E f(σz)` for a standard Gaussian `z`; `σ = 0` returns `f(0)` exactly.
pub fn expect_1d<F: Fn(f64) -> f64>(f: F, sigma: f64, spec: &QuadratureSpec) -> Result<f64> {
    spec.validate()?;
    check_sigma(sigma)?;
    let mut bad = false;
    let value = spec.expect(sigma, |x| {
        let v = f(x);
        bad |= !v.is_finite();
        v
    });
    if bad {
        return Err(MskError::NonFinite("one-dimensional expectation".into()));
    }
    finite(value, "one-dimensional expectation")
}

/// `E f(σz₁, σz₂)` for standard Gaussians with correlation `corr`, via
/// `z₂ = corr·z₁ + sqrt(1 − corr²)·w` on a tensor grid. `|corr| = 1` uses the
/// one-dimensional rule.
pub fn expect_pair<F: Fn(f64, f64) -> f64>(
    f: F,
    sigma: f64,
    corr: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    spec.validate()?;
    check_sigma(sigma)?;
    if !(corr.abs() <= 1.0) {
        return Err(MskError::InvalidParameter(format!(
            "correlation must lie in [-1, 1], got {corr}"
        )));
    }
    let mut bad = false;
    let mut eval = |a: f64, b: f64| {
        let v = f(a, b);
        bad |= !v.is_finite();
        v
    };
    let value = if corr.abs() == 1.0 {
        spec.expect(sigma, |a| eval(a, corr * a))
    } else {
        let c = (1.0 - corr * corr).sqrt();
        let inner_rule = spec.rule_for(sigma * c);
        spec.expect(sigma, |a| {
            inner_rule.expect(sigma * c, |w| eval(a, corr * a + w))
        })
    };
    if bad {
        return Err(MskError::NonFinite("pair expectation".into()));
    }
    finite(value, "pair expectation")
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    /// Sample mean.
    pub mean: f64,
    /// Standard error of the mean.
    pub std_error: f64,
    /// Number of samples.
    pub samples: usize,
}

/// Streaming mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    /// Adds one observation.
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Merges another accumulator into this one.
    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    /// Number of observations.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Sample mean.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }

    /// Snapshot as an [`McEstimate`].
    pub fn estimate(&self) -> McEstimate {
        McEstimate {
            mean: self.mean(),
            std_error: self.std_error(),
            samples: self.count,
        }
    }
}

/// Monte Carlo estimate of `E f(σz)` with `spec.mc_samples` draws.
pub fn expect_1d_mc<F: Fn(f64) -> f64>(
    f: F,
    sigma: f64,
    spec: &QuadratureSpec,
) -> Result<McEstimate> {
    spec.validate()?;
    check_sigma(sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stats = RunningStats::default();
    for _ in 0..spec.mc_samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        stats.push(f(sigma * z));
    }
    finite(stats.mean(), "Monte Carlo expectation")?;
    Ok(stats.estimate())
}

/// Monte Carlo estimate of `E f(σz₁, σz₂)` with `corr(z₁, z₂) = corr`.
pub fn expect_pair_mc<F: Fn(f64, f64) -> f64>(
    f: F,
    sigma: f64,
    corr: f64,
    spec: &QuadratureSpec,
) -> Result<McEstimate> {
    spec.validate()?;
    check_sigma(sigma)?;
    if !(corr.abs() <= 1.0) {
        return Err(MskError::InvalidParameter(format!(
            "correlation must lie in [-1, 1], got {corr}"
        )));
    }
    let c = (1.0 - corr * corr).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stats = RunningStats::default();
    for _ in 0..spec.mc_samples {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        stats.push(f(sigma * a, sigma * (corr * a + c * b)));
    }
    finite(stats.mean(), "Monte Carlo expectation")?;
    Ok(stats.estimate())
}
