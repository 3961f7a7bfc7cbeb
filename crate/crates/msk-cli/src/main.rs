use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msk_core::finite_n::{self, FiniteModel};
use msk_core::gtbound::GtContext;
use msk_core::parisi::{self, DiscreteOrderedMeasure, RsbOptions};
use msk_core::rs_at;
use msk_core::sweep::{self, AxisId, Ray, SweepConfig, Tasks};
use msk_core::MskError;

/// Exit code for configuration and input errors.
const EXIT_CONFIG: u8 = 2;
/// Exit code for file-system errors.
const EXIT_IO: u8 = 3;
/// Exit code for numerical failures.
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "msk", version, about = "Multi-species SK spin glass numerics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate q*, Γ, ρ(ΓΔ²Λ) and the phase over the configured grid.
    At {
        #[arg(long, default_value = "msk.toml")]
        config: PathBuf,
        /// CSV destination; defaults to the configured path, then stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also bisect for the phase change along axis 1 at the first axis-2 value.
        #[arg(long)]
        trace: bool,
        /// Bracket width of the trace.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Solve for q* of the base system and evaluate the stability criterion.
    Qstar {
        #[arg(long, default_value = "msk.toml")]
        config: PathBuf,
    },
    /// Evaluate the Parisi functional at a measure, or minimize it over r levels.
    Parisi {
        #[arg(long, default_value = "msk.toml")]
        config: PathBuf,
        /// Number of levels r for the minimization.
        #[arg(long, default_value_t = 3)]
        levels: usize,
        /// JSON measure {"zeta": [...], "q": [[...], ...]} to evaluate instead.
        #[arg(long)]
        measure: Option<PathBuf>,
    },
    /// Guerra-Talagrand cost curve along the Perron direction at q*.
    Gt {
        #[arg(long, default_value = "msk.toml")]
        config: PathBuf,
        /// Number of overlaps on the curve.
        #[arg(long, default_value_t = 50)]
        u_grid: usize,
        /// Also minimize the bound over b numerically.
        #[arg(long)]
        numerical_inf: bool,
    },
    /// Exact enumeration of small disordered systems.
    FiniteN {
        #[arg(long, default_value = "msk.toml")]
        config: PathBuf,
        /// Sites per species, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        sites: Vec<usize>,
        /// Disorder samples.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Interpolation time.
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        /// First seed; sample k uses seed + k.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON-lines file for the per-seed records.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also check the t-derivative identity with this central-difference step.
        #[arg(long)]
        ibp_step: Option<f64>,
    },
    /// Run every configured task over the grid.
    Sweep {
        #[arg(long, default_value = "msk.toml")]
        config: PathBuf,
        /// CSV destination; defaults to the configured path, then stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &MskError) -> u8 {
    match err {
        MskError::Io(_) => EXIT_IO,
        MskError::NonConvergence { .. } | MskError::NonFinite(_) | MskError::Singular(_) => {
            EXIT_NUMERICAL
        }
        _ => EXIT_CONFIG,
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), MskError> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn emit(text: &str) -> Result<(), MskError> {
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(text.as_bytes())?;
    stdout.write_all(b"\n")?;
    Ok(())
}

fn run_grid(cfg: &SweepConfig, out: Option<PathBuf>) -> Result<u8, MskError> {
    let outcome = sweep::run_sweep(cfg)?;
    let csv_path = out.or_else(|| cfg.output.csv.clone());
    write_or_print(csv_path.as_deref(), &sweep::to_csv(&outcome)?)?;
    if let Some(json) = &cfg.output.json {
        sweep::write_json(&outcome, json)?;
    }
    for row in &outcome.rows {
        if let Err(msg) = &row.result {
            eprintln!("cell ({}, {}): {msg}", row.axis1, row.axis2);
        }
    }
    Ok(if outcome.any_nonconvergence() {
        EXIT_NUMERICAL
    } else {
        0
    })
}

fn run(cli: Cli) -> Result<u8, MskError> {
    match cli.command {
        Command::At {
            config,
            out,
            trace,
            tol,
        } => {
            let mut cfg = SweepConfig::from_path(&config)?;
            cfg.tasks = Tasks::default();
            let code = run_grid(&cfg, out)?;
            if trace {
                let ray = Ray {
                    along: AxisId::First,
                    other: cfg.axes.axis2.min,
                    lo: cfg.axes.axis1.min,
                    hi: cfg.axes.axis1.max,
                };
                let report = sweep::trace_at_surface(&cfg, &ray, tol)?;
                eprintln!("{}", sweep::describe_trace(&report));
            }
            Ok(code)
        }
        Command::Qstar { config } => {
            let cfg = SweepConfig::from_path(&config)?;
            let report = rs_at::gamma_and_at(&cfg.base_system()?, &cfg.quadrature)?;
            emit(&to_json(&report))?;
            Ok(0)
        }
        Command::Parisi {
            config,
            levels,
            measure,
        } => {
            let cfg = SweepConfig::from_path(&config)?;
            let sys = cfg.base_system()?;
            match measure {
                Some(path) => {
                    let text = fs::read_to_string(&path)?;
                    let mu: DiscreteOrderedMeasure =
                        serde_json::from_str(&text).map_err(|e| MskError::Config(e.to_string()))?;
                    let eval = parisi::parisi_evaluate_with_gradient(&sys, &mu, &cfg.quadrature)?;
                    emit(&to_json(&eval))?;
                }
                None => {
                    let result = parisi::minimize_rsb(
                        &sys,
                        levels,
                        &cfg.quadrature,
                        &RsbOptions::default(),
                    )?;
                    let support =
                        parisi::support_diagnostics(&result.measure, &result.q_star, 1e-6)?;
                    emit(&to_json(
                        &serde_json::json!({ "result": result, "support": support }),
                    ))?;
                }
            }
            Ok(0)
        }
        Command::Gt {
            config,
            u_grid,
            numerical_inf,
        } => {
            let cfg = SweepConfig::from_path(&config)?;
            let ctx = GtContext::new(&cfg.base_system()?, &cfg.quadrature)?;
            let grid = ctx.perron_grid(u_grid)?;
            let curve = ctx.cost_curve(&grid, numerical_inf)?;
            emit(&to_json(&curve))?;
            Ok(0)
        }
        Command::FiniteN {
            config,
            sites,
            samples,
            t,
            seed,
            out,
            ibp_step,
        } => {
            let cfg = SweepConfig::from_path(&config)?;
            let model = FiniteModel::new(&cfg.base_system()?, &sites, &cfg.quadrature)?;
            let seeds: Vec<u64> = (0..samples as u64).map(|k| seed.wrapping_add(k)).collect();
            let records = finite_n::sample_records(&model, t, &seeds)?;
            if let Some(path) = &out {
                let mut text = String::new();
                for r in &records {
                    text.push_str(&serde_json::to_string(r).expect("records serialize"));
                    text.push('\n');
                }
                fs::write(path, text)?;
            }
            let ibp = match ibp_step {
                Some(step) => Some(finite_n::ibp_check(&model, t, step, &seeds)?),
                None => None,
            };
            let summary = serde_json::json!({
                "sites": sites,
                "lambda_n": model.lambda_n(),
                "q_star": model.q_star(),
                "t": t,
                "average": finite_n::disorder_average(&records),
                "ibp": ibp,
            });
            emit(&to_json(&summary))?;
            Ok(0)
        }
        Command::Sweep { config, out } => {
            let cfg = SweepConfig::from_path(&config)?;
            run_grid(&cfg, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
