//! Parameter sweeps over a two-axis grid, AT-surface tracing along a ray, and
//! construction of systems with a prescribed `ρ(ΓΔ²Λ)`.
//!
//! An axis maps a scalar `x` to a modified system. `delta2` and `tau2` axes
//! scale the current matrix or vector by `x` (so `x` plays the role of `β²` or
//! `h²`); an `affine` axis adds `x` times a direction to either or both.
//! Axis 1 is applied to the base system first, then axis 2.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MskError, Result};
use crate::gauss::QuadratureSpec;
use crate::gtbound::GtContext;
use crate::model::{RawSystem, SpeciesSystem};
use crate::parisi::{minimize_rsb, RsbOptions};
use crate::rs_at::{gamma_and_at, Phase};

/// Evenly spaced samples used to check the monotonicity of `ρ` along a ray.
const TRACE_SCAN_POINTS: usize = 17;
/// Bisection steps allowed when matching a target `ρ`.
const TARGET_STEPS: usize = 200;

/// What an axis modifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisTarget {
    /// `Δ² ← x·Δ²`.
    Delta2,
    /// `τ² ← x·τ²`.
    Tau2,
    /// `Δ² ← Δ² + x·direction_delta2`, `τ² ← τ² + x·direction_tau2`.
    Affine,
}

/// One grid axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    /// Label used in reports.
    #[serde(default)]
    pub name: String,
    /// What the axis modifies.
    pub target: AxisTarget,
    /// First value.
    pub min: f64,
    /// Last value.
    pub max: f64,
    /// Number of values, `min` and `max` included.
    pub count: usize,
    /// Direction added to `Δ²` per unit of `x` (affine axes).
    #[serde(default)]
    pub direction_delta2: Option<Vec<Vec<f64>>>,
    /// Direction added to `τ²` per unit of `x` (affine axes).
    #[serde(default)]
    pub direction_tau2: Option<Vec<f64>>,
}

impl AxisSpec {
    /// A single-point axis that leaves the system unchanged.
    pub fn fixed() -> Self {
        Self {
            name: String::new(),
            target: AxisTarget::Affine,
            min: 0.0,
            max: 0.0,
            count: 1,
            direction_delta2: None,
            direction_tau2: None,
        }
    }

    /// The axis values in order.
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.min];
        }
        let span = self.max - self.min;
        let last = (self.count - 1) as f64;
        (0..self.count)
            .map(|k| {
                if k + 1 == self.count {
                    self.max
                } else {
                    self.min + span * k as f64 / last
                }
            })
            .collect()
    }

    fn validate(&self, species: usize) -> Result<()> {
        if self.count == 0 {
            return Err(MskError::Config(format!(
                "axis '{}' has no grid points",
                self.name
            )));
        }
        if !(self.min.is_finite() && self.max.is_finite()) || self.min < 0.0 || self.max < self.min
        {
            return Err(MskError::Config(format!(
                "axis '{}' needs 0 ≤ min ≤ max, got [{}, {}]",
                self.name, self.min, self.max
            )));
        }
        if let Some(d) = &self.direction_delta2 {
            if d.len() != species || d.iter().any(|r| r.len() != species) {
                return Err(MskError::Config(format!(
                    "axis '{}' has a Δ² direction of the wrong shape",
                    self.name
                )));
            }
        }
        if let Some(d) = &self.direction_tau2 {
            if d.len() != species {
                return Err(MskError::Config(format!(
                    "axis '{}' has a τ² direction of the wrong length",
                    self.name
                )));
            }
        }
        if self.target != AxisTarget::Affine
            && (self.direction_delta2.is_some() || self.direction_tau2.is_some())
        {
            return Err(MskError::Config(format!(
                "axis '{}' sets directions but is not affine",
                self.name
            )));
        }
        Ok(())
    }

    /// Applies the axis at value `x`.
    pub fn apply(&self, sys: &SpeciesSystem, x: f64) -> Result<SpeciesSystem> {
        let n = sys.species_count();
        let (delta2, tau2) = match self.target {
            AxisTarget::Delta2 => (sys.delta2() * x, sys.tau2().to_vec()),
            AxisTarget::Tau2 => (
                sys.delta2().clone(),
                sys.tau2().iter().map(|t| t * x).collect(),
            ),
            AxisTarget::Affine => {
                let mut d = sys.delta2().clone();
                if let Some(dir) = &self.direction_delta2 {
                    d += DMatrix::from_fn(n, n, |i, j| dir[i][j]) * x;
                }
                let mut t = sys.tau2().to_vec();
                if let Some(dir) = &self.direction_tau2 {
                    for (a, b) in t.iter_mut().zip(dir) {
                        *a += x * b;
                    }
                }
                (d, t)
            }
        };
        sys.with_profile(delta2, tau2)
    }
}

/// The two grid axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axes {
    /// First axis.
    pub axis1: AxisSpec,
    /// Second axis; a fixed single point when omitted.
    #[serde(default = "AxisSpec::fixed")]
    pub axis2: AxisSpec,
}

impl Default for Axes {
    /// A single cell at the base system.
    fn default() -> Self {
        Self {
            axis1: AxisSpec::fixed(),
            axis2: AxisSpec::fixed(),
        }
    }
}

/// Which computations run in each grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tasks {
    /// `q*`, `Γ`, `ρ(ΓΔ²Λ)` and the phase. These fill the fixed CSV columns
    /// and are computed in every cell whatever the flag says.
    pub at: bool,
    /// Run the Parisi optimizer and report the gap to the RS value.
    pub rsb: bool,
    /// Levels of the Parisi optimizer.
    pub rsb_levels: usize,
    /// Multi-start count of the Parisi optimizer.
    pub rsb_starts: usize,
    /// Evaluate the Guerra-Talagrand cost curve along the Perron direction.
    pub gt: bool,
    /// Overlaps on the cost curve.
    pub gt_u_grid: usize,
    /// Run the exact finite-size enumeration.
    pub finite_n: bool,
    /// Sites per species for the enumeration.
    pub finite_n_sites: Vec<usize>,
    /// Disorder samples.
    pub finite_n_samples: usize,
    /// Interpolation time.
    pub finite_n_t: f64,
    /// First disorder seed; sample `k` uses `seed + k`.
    pub finite_n_seed: u64,
}

impl Default for Tasks {
    fn default() -> Self {
        Self {
            at: true,
            rsb: false,
            rsb_levels: 3,
            rsb_starts: RsbOptions::default().starts,
            gt: false,
            gt_u_grid: 20,
            finite_n: false,
            finite_n_sites: Vec::new(),
            finite_n_samples: 100,
            finite_n_t: 1.0,
            finite_n_seed: 0,
        }
    }
}

/// Output locations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Output {
    /// CSV table of the grid.
    pub csv: Option<PathBuf>,
    /// JSON array with the per-cell results of the optional tasks.
    pub json: Option<PathBuf>,
}

/// A complete sweep configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Base system.
    pub system: RawSystem,
    /// Grid axes; a single cell at the base system when omitted.
    #[serde(default)]
    pub axes: Axes,
    /// Quadrature used everywhere.
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    /// Computations per cell.
    #[serde(default)]
    pub tasks: Tasks,
    /// Output paths.
    #[serde(default)]
    pub output: Output,
}

impl SweepConfig {
    /// Parses TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MskError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| MskError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    /// The validated base system.
    pub fn base_system(&self) -> Result<SpeciesSystem> {
        SpeciesSystem::from_raw(&self.system).map_err(|e| MskError::Config(e.to_string()))
    }

    /// Checks the system, axes, quadrature and tasks.
    pub fn validate(&self) -> Result<()> {
        let sys = self.base_system()?;
        let n = sys.species_count();
        self.axes.axis1.validate(n)?;
        self.axes.axis2.validate(n)?;
        self.quadrature
            .validate()
            .map_err(|e| MskError::Config(e.to_string()))?;
        let t = &self.tasks;
        if t.rsb && !(2..=4).contains(&t.rsb_levels) {
            return Err(MskError::Config("rsb_levels must be 2, 3 or 4".into()));
        }
        if t.gt && t.gt_u_grid == 0 {
            return Err(MskError::Config("gt_u_grid must be positive".into()));
        }
        if t.finite_n {
            if t.finite_n_sites.len() != n || t.finite_n_samples == 0 {
                return Err(MskError::Config(
                    "finite_n needs one site count per species and at least one sample".into(),
                ));
            }
            if !(0.0..=1.0).contains(&t.finite_n_t) {
                return Err(MskError::Config("finite_n_t must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// The system at grid values `(x1, x2)`.
    pub fn system_at(&self, x1: f64, x2: f64) -> Result<SpeciesSystem> {
        let base = self.base_system()?;
        let s1 = self.axes.axis1.apply(&base, x1)?;
        self.axes.axis2.apply(&s1, x2)
    }
}

/// Results of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    /// `ρ(ΓΔ²Λ)`.
    pub rho: f64,
    /// `ρ(ΓΔ²Λ) − 1/2`, which decides the phase.
    pub rho_excess: f64,
    /// Phase verdict.
    pub phase: Phase,
    /// `q*`.
    pub q_star: Vec<f64>,
    /// Diagonal of `Γ`.
    pub gamma: Vec<f64>,
    /// `RS(q*)`.
    pub rs_value: f64,
    /// `RS(q*) − inf P` from the Parisi optimizer.
    pub rsb_gap: Option<f64>,
    /// Quadrature-error estimate of `rsb_gap`.
    pub rsb_quadrature_error: Option<f64>,
    /// Smallest `cost / B(u − q*)` on the Guerra-Talagrand cost curve.
    pub gt_c0: Option<f64>,
    /// Mean finite-size free energy.
    pub finite_n_free_energy: Option<f64>,
    /// Its standard error.
    pub finite_n_std_error: Option<f64>,
}

/// One grid cell with its axis values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// Axis 1 value.
    pub axis1: f64,
    /// Axis 2 value.
    pub axis2: f64,
    /// The cell's results, or the error message.
    pub result: std::result::Result<CellResult, String>,
    /// Whether the error was a numerical non-convergence.
    pub nonconvergence: bool,
}

/// All rows in grid order (axis 1 outer, axis 2 inner).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutcome {
    /// Species count, which fixes the CSV header.
    pub species: usize,
    /// Rows.
    pub rows: Vec<SweepRow>,
}

impl SweepOutcome {
    /// Whether any cell failed to converge.
    pub fn any_nonconvergence(&self) -> bool {
        self.rows.iter().any(|r| r.nonconvergence)
    }
}

fn evaluate_cell(cfg: &SweepConfig, x1: f64, x2: f64) -> Result<CellResult> {
    let sys = cfg.system_at(x1, x2)?;
    let spec = &cfg.quadrature;
    let tasks = &cfg.tasks;
    let at = gamma_and_at(&sys, spec)?;
    let (rsb_gap, rsb_quadrature_error) = if tasks.rsb {
        let opts = RsbOptions {
            starts: tasks.rsb_starts,
            ..RsbOptions::default()
        };
        let r = minimize_rsb(&sys, tasks.rsb_levels, spec, &opts)?;
        (Some(r.rs_gap), Some(r.quadrature_error))
    } else {
        (None, None)
    };
    let gt_c0 = if tasks.gt {
        let ctx = GtContext::new(&sys, spec)?;
        let grid = ctx.perron_grid(tasks.gt_u_grid)?;
        ctx.cost_curve(&grid, false)?.c0
    } else {
        None
    };
    let (finite_n_free_energy, finite_n_std_error) = if tasks.finite_n {
        let model = crate::finite_n::FiniteModel::new(&sys, &tasks.finite_n_sites, spec)?;
        let seeds: Vec<u64> = (0..tasks.finite_n_samples as u64)
            .map(|k| tasks.finite_n_seed.wrapping_add(k))
            .collect();
        let records = crate::finite_n::sample_records(&model, tasks.finite_n_t, &seeds)?;
        let avg = crate::finite_n::disorder_average(&records);
        (Some(avg.free_energy.mean), Some(avg.free_energy.std_error))
    } else {
        (None, None)
    };
    Ok(CellResult {
        rho: at.rho,
        rho_excess: at.rho_excess,
        phase: at.phase,
        q_star: at.q_star,
        gamma: at.gamma_diag,
        rs_value: at.rs_min_value,
        rsb_gap,
        rsb_quadrature_error,
        gt_c0,
        finite_n_free_energy,
        finite_n_std_error,
    })
}

/// Evaluates every grid cell in parallel; rows come back in grid order.
/// Cell failures are recorded in the row rather than aborting the sweep.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let species = cfg.system.lambda.len();
    let cells: Vec<(f64, f64)> = cfg
        .axes
        .axis1
        .values()
        .into_iter()
        .flat_map(|x1| cfg.axes.axis2.values().into_iter().map(move |x2| (x1, x2)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(axis1, axis2)| {
            let result = evaluate_cell(cfg, axis1, axis2);
            let nonconvergence = matches!(result, Err(MskError::NonConvergence { .. }));
            SweepRow {
                axis1,
                axis2,
                result: result.map_err(|e| e.to_string()),
                nonconvergence,
            }
        })
        .collect();
    Ok(SweepOutcome { species, rows })
}

/// The fixed CSV header for `species` species.
pub fn csv_header(species: usize) -> Vec<String> {
    let mut h = vec![
        "axis1".to_string(),
        "axis2".into(),
        "rho".into(),
        "phase".into(),
    ];
    h.extend((1..=species).map(|s| format!("qstar_s{s}")));
    h.extend((1..=species).map(|s| format!("gamma_s{s}")));
    h.push("rsb_gap".into());
    h.push("error".into());
    h
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Renders the sweep as CSV text.
pub fn to_csv(outcome: &SweepOutcome) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| MskError::Io(std::io::Error::other(e.to_string()));
    w.write_record(csv_header(outcome.species)).map_err(io)?;
    for row in &outcome.rows {
        let mut rec = vec![num(row.axis1), num(row.axis2)];
        match &row.result {
            Ok(c) => {
                rec.push(num(c.rho));
                rec.push(c.phase.to_string());
                rec.extend(c.q_star.iter().map(|v| num(*v)));
                rec.extend(c.gamma.iter().map(|v| num(*v)));
                rec.push(c.rsb_gap.map(num).unwrap_or_default());
                rec.push(String::new());
            }
            Err(msg) => {
                rec.extend(std::iter::repeat(String::new()).take(2 + 2 * outcome.species + 1));
                rec.push(msg.clone());
            }
        }
        w.write_record(&rec).map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| MskError::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| MskError::Io(std::io::Error::other(e.to_string())))
}

/// Writes the CSV to `path`.
pub fn write_csv(outcome: &SweepOutcome, path: &Path) -> Result<()> {
    fs::write(path, to_csv(outcome)?)?;
    Ok(())
}

/// Writes every row, including the optional task results, as a JSON array.
pub fn write_json(outcome: &SweepOutcome, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&outcome.rows)
        .map_err(|e| MskError::Io(std::io::Error::other(e.to_string())))?;
    fs::write(path, text)?;
    Ok(())
}

/// Which axis a trace moves along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisId {
    /// Axis 1.
    First,
    /// Axis 2.
    Second,
}

/// A ray through the configured grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ray {
    /// Axis that varies.
    pub along: AxisId,
    /// Value held by the other axis.
    pub other: f64,
    /// Start of the ray parameter.
    pub lo: f64,
    /// End of the ray parameter.
    pub hi: f64,
}

/// Outcome of [`trace_at_surface`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TraceOutcome {
    /// The phase changes inside `[lo, hi]`.
    Crossing {
        /// Last parameter found on the side of the ray start.
        lo: f64,
        /// First parameter found on the other side.
        hi: f64,
        /// `ρ(ΓΔ²Λ)` at `lo`.
        rho_lo: f64,
        /// `ρ(ΓΔ²Λ)` at `hi`.
        rho_hi: f64,
        /// Phase at `lo`.
        phase_lo: Phase,
    },
    /// No phase change among the scan points.
    NoCrossing {
        /// Smallest `ρ − 1/2` seen.
        min_excess: f64,
        /// Largest `ρ − 1/2` seen.
        max_excess: f64,
    },
}

/// Result of [`trace_at_surface`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    /// Bracket or no-crossing summary.
    pub outcome: TraceOutcome,
    /// Whether `ρ` was monotone over the scan points.
    pub monotone: bool,
    /// `(parameter, ρ)` at the scan points.
    pub scan: Vec<(f64, f64)>,
    /// Number of AT evaluations.
    pub evaluations: usize,
}

/// Locates the phase change along a ray by bisection to width `tol`.
///
/// A coarse scan first checks whether `ρ` is monotone along the ray (reported,
/// not assumed) and picks the first scan interval where the phase changes.
pub fn trace_at_surface(cfg: &SweepConfig, ray: &Ray, tol: f64) -> Result<TraceReport> {
    cfg.validate()?;
    if !(tol > 0.0) || !(ray.hi > ray.lo) {
        return Err(MskError::InvalidParameter(
            "trace needs tol > 0 and hi > lo".into(),
        ));
    }
    let eval = |x: f64| -> Result<(f64, f64)> {
        let sys = match ray.along {
            AxisId::First => cfg.system_at(x, ray.other)?,
            AxisId::Second => cfg.system_at(ray.other, x)?,
        };
        let at = gamma_and_at(&sys, &cfg.quadrature)?;
        Ok((at.rho, at.rho_excess))
    };
    let params: Vec<f64> = (0..TRACE_SCAN_POINTS)
        .map(|k| ray.lo + (ray.hi - ray.lo) * k as f64 / (TRACE_SCAN_POINTS - 1) as f64)
        .collect();
    let values: Vec<(f64, f64)> = params.par_iter().map(|&x| eval(x)).collect::<Result<_>>()?;
    let mut evaluations = values.len();
    let rhos: Vec<f64> = values.iter().map(|v| v.0).collect();
    let monotone = rhos.windows(2).all(|w| w[1] >= w[0]) || rhos.windows(2).all(|w| w[1] <= w[0]);
    let scan: Vec<(f64, f64)> = params.iter().copied().zip(rhos.iter().copied()).collect();
    let rsb = |excess: f64| excess > 0.0;
    let Some(k) = (0..values.len() - 1).find(|&k| rsb(values[k].1) != rsb(values[k + 1].1)) else {
        let excess = values.iter().map(|v| v.1);
        return Ok(TraceReport {
            outcome: TraceOutcome::NoCrossing {
                min_excess: excess.clone().fold(f64::INFINITY, f64::min),
                max_excess: excess.fold(f64::NEG_INFINITY, f64::max),
            },
            monotone,
            scan,
            evaluations,
        });
    };
    let (mut lo, mut hi) = (params[k], params[k + 1]);
    let (mut at_lo, mut at_hi) = (values[k], values[k + 1]);
    let side = rsb(at_lo.1);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = eval(mid)?;
        evaluations += 1;
        if rsb(v.1) == side {
            lo = mid;
            at_lo = v;
        } else {
            hi = mid;
            at_hi = v;
        }
    }
    Ok(TraceReport {
        outcome: TraceOutcome::Crossing {
            lo,
            hi,
            rho_lo: at_lo.0,
            rho_hi: at_hi.0,
            phase_lo: if side { Phase::Rsb } else { Phase::Rs },
        },
        monotone,
        scan,
        evaluations,
    })
}

/// Finds `β² > 0` with `ρ(Γ(β²Δ²)β²Δ²Λ) = target` for the fixed field
/// profile of `sys`, by bracketing and bisection on `β²`.
///
/// Returns the scale and the scaled system. The scaled system's `ρ` matches
/// `target` to about `1e-10`.
pub fn scale_for_target_rho(
    sys: &SpeciesSystem,
    target: f64,
    spec: &QuadratureSpec,
) -> Result<(f64, SpeciesSystem)> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(MskError::InvalidParameter(format!(
            "target ρ must be positive, got {target}"
        )));
    }
    let rho_at = |scale: f64| -> Result<(f64, SpeciesSystem)> {
        let s = sys.with_profile(sys.delta2() * scale, sys.tau2().to_vec())?;
        Ok((gamma_and_at(&s, spec)?.rho, s))
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut grow = 0;
    while rho_at(hi)?.0 < target {
        lo = hi;
        hi *= 2.0;
        grow += 1;
        if grow > 60 {
            return Err(MskError::NonConvergence {
                iterations: grow,
                residual: f64::NAN,
            });
        }
    }
    for _ in 0..TARGET_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if rho_at(mid)?.0 < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (rho, s) = rho_at(hi)?;
    if (rho - target).abs() > 1e-9 {
        return Err(MskError::NonConvergence {
            iterations: TARGET_STEPS,
            residual: (rho - target).abs(),
        });
    }
    Ok((hi, s))
}

/// A human-readable summary of a trace.
pub fn describe_trace(report: &TraceReport) -> String {
    let mut out = String::new();
    match &report.outcome {
        TraceOutcome::Crossing {
            lo,
            hi,
            rho_lo,
            rho_hi,
            phase_lo,
        } => {
            let _ = write!(
                out,
                "crossing in [{lo}, {hi}] (width {:.3e}); rho = {rho_lo} -> {rho_hi}; {phase_lo} below",
                hi - lo
            );
        }
        TraceOutcome::NoCrossing {
            min_excess,
            max_excess,
        } => {
            let _ = write!(
                out,
                "no crossing; rho - 1/2 ranges over [{min_excess:.6e}, {max_excess:.6e}]"
            );
        }
    }
    let _ = write!(
        out,
        "; rho {} along the scan",
        if report.monotone {
            "monotone"
        } else {
            "NOT monotone"
        }
    );
    out
}
