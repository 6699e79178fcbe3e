//! Command-line surface: single runs, resumable sweeps, collapse/fit
//! post-processing, and a numerics self-check.
//!
//! Every subcommand prints `key = value` lines on stdout so results can
//! be scraped; human prose goes to stderr. Exit code 0 on success,
//! nonzero with a one-line diagnostic otherwise.

use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::diagnostics::GCurve;
use crate::experiments::{self, run_point, run_sweep, SweepPlan};
use crate::io::{self, RunConfig, SnapshotMode, SweepPlanConfig};
use crate::propagator::suggest_dt_for;

type CliResult = Result<(), Box<dyn Error>>;

#[derive(Parser)]
#[command(
    name = "wignersim",
    about = "Phase-space simulator for a driven Duffing oscillator in a diffusive environment",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve a single (hbar, D) point and write its G(t) curve.
    Run(RunArgs),
    /// Run every point of a sweep plan; existing outputs are reused.
    Sweep(SweepArgs),
    /// Normalize curves by their maxima and tabulate max G per zeta0.
    Collapse(CollapseArgs),
    /// Fit a (1 - exp(-b zeta0^2)) to a max-G table.
    Fit(FitArgs),
    /// dt- and resolution-convergence study for a config.
    Check(CheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply for omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Effective Planck constant (overrides the config).
    #[arg(long)]
    hbar: Option<f64>,
    /// Momentum diffusion coefficient (overrides the config).
    #[arg(long)]
    diffusion: Option<f64>,
    #[arg(long)]
    label: Option<String>,
    /// Output directory (default: config, then $WIGNERSIM_OUT, then ".").
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    t_final: Option<f64>,
    /// Snapshot times, comma separated (e.g. --snapshots 5,20).
    #[arg(long, value_delimiter = ',')]
    snapshots: Option<Vec<f64>>,
    /// Store snapshots signed (default) or as absolute values.
    #[arg(long, default_value = "signed")]
    snapshot_mode: String,
    /// Permit an initial state narrower than the resolvability bound.
    #[arg(long)]
    allow_under_resolved: bool,
    /// Also export the curves as CSV.
    #[arg(long)]
    csv: bool,
    /// Also write gnuplot-ready columnar files.
    #[arg(long)]
    plot_data: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML sweep plan.
    #[arg(long)]
    plan: PathBuf,
    /// Output directory (default: plan, then $WIGNERSIM_OUT/<label>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse existing curve files (this is the default behavior).
    #[arg(long)]
    resume: bool,
    /// Re-run everything, replacing existing curve files.
    #[arg(long, conflicts_with = "resume")]
    force: bool,
}

#[derive(Args)]
struct CollapseArgs {
    /// Curve files to collapse (raw curves are period-averaged first).
    #[arg(required = true)]
    curves: Vec<PathBuf>,
    /// Output directory for normalized curves and the max-G table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// CSV max-G table (columns zeta0,max_g), as written by `collapse`.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Acceptance threshold on the relative G(t) change.
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Collapse(a) => cmd_collapse(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_run_config(args: &RunArgs) -> Result<RunConfig, Box<dyn Error>> {
    let mut rc = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(h) = args.hbar {
        rc.hbar = Some(h);
    }
    if let Some(d) = args.diffusion {
        rc.diffusion = Some(d);
    }
    if let Some(l) = &args.label {
        rc.label = l.clone();
    }
    if let Some(t) = args.t_final {
        rc.solver.t_final = t;
    }
    if let Some(s) = &args.snapshots {
        rc.solver.snapshot_times = s.clone();
    }
    if args.allow_under_resolved {
        rc.initial.allow_under_resolved = true;
    }
    if let Some(out) = &args.out {
        rc.output_dir = Some(out.clone());
    }
    Ok(rc)
}

fn cmd_run(args: RunArgs) -> CliResult {
    let mode = match args.snapshot_mode.as_str() {
        "signed" => SnapshotMode::Signed,
        "abs" => SnapshotMode::Abs,
        other => return Err(format!("--snapshot-mode must be signed or abs, got {other}").into()),
    };
    let rc = load_run_config(&args)?;
    let resolved = rc.resolve()?;
    let out_dir = resolved.echo.output_dir.clone().unwrap_or_else(io::default_output_root);
    std::fs::create_dir_all(&out_dir)?;
    let shared = resolved.shared();
    let label = &resolved.echo.label;

    println!("zeta0 = {}", resolved.zeta0());
    println!("dt = {}", shared.solver.dt);
    println!("sample_every = {}", shared.solver.sample_every);

    let result = run_point(
        resolved.params.bath.hbar,
        resolved.params.bath.diffusion,
        &shared,
    )?;

    let curve_path = out_dir.join(format!("{label}.wcurve"));
    io::write_curve(&result.raw, &resolved.echo, &curve_path)?;
    let avg_path = out_dir.join(format!("{label}.avg.wcurve"));
    io::write_curve(&result.averaged, &resolved.echo, &avg_path)?;
    println!("samples = {}", result.raw.samples.len());
    println!("max_g_avg = {}", result.averaged.max_g());
    println!("curve = {}", curve_path.display());
    println!("curve_avg = {}", avg_path.display());

    if args.csv {
        let p = out_dir.join(format!("{label}.csv"));
        io::write_curve_csv(&result.raw, &p)?;
        println!("csv = {}", p.display());
    }
    if args.plot_data {
        let p = out_dir.join(format!("{label}.avg.dat"));
        io::write_curve_plot(&result.averaged, &p)?;
        println!("plot_data = {}", p.display());
    }
    for (t, field) in &result.snapshots {
        let state = crate::grid::WignerState::from_parts(field.clone(), *t, 1.0);
        let p = out_dir.join(format!("{label}_t{t}.wsnap"));
        io::write_snapshot(&state, mode, &resolved.echo, &p)?;
        println!("snapshot = {}", p.display());
        if args.plot_data {
            let dp = out_dir.join(format!("{label}_t{t}.dat"));
            io::write_snapshot_plot(field, &dp)?;
            println!("snapshot_plot = {}", dp.display());
        }
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> CliResult {
    let plan_cfg = SweepPlanConfig::load(&args.plan)?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| plan_cfg.output_dir.clone())
        .unwrap_or_else(|| io::default_output_root().join(&plan_cfg.label));
    let plan: SweepPlan = plan_cfg.resolve()?;
    if args.force && out_dir.exists() {
        for point in &plan.points {
            let p = out_dir.join(format!("{}_{}.wcurve", plan.shared.label, point.file_stem()));
            if p.exists() {
                std::fs::remove_file(&p)?;
            }
        }
    }
    let outcome = run_sweep(&plan, Some(&out_dir));
    println!("jobs_run = {}", outcome.executed);
    println!("jobs_skipped = {}", outcome.skipped);
    println!("out_dir = {}", out_dir.display());
    for (zeta0, curves) in &outcome.groups {
        println!("group zeta0 = {zeta0}: curves = {}", curves.len());
    }
    eprintln!("{} jobs run, {} skipped", outcome.executed, outcome.skipped);
    if !outcome.failures.is_empty() {
        for (point, msg) in &outcome.failures {
            eprintln!(
                "failed: hbar = {}, diffusion = {}: {msg}",
                point.hbar, point.diffusion
            );
        }
        return Err(format!("{} sweep point(s) failed", outcome.failures.len()).into());
    }
    Ok(())
}

fn cmd_collapse(args: CollapseArgs) -> CliResult {
    let out_dir = args.out.clone().unwrap_or_else(io::default_output_root);
    std::fs::create_dir_all(&out_dir)?;
    let mut curves: Vec<GCurve> = Vec::new();
    for path in &args.curves {
        let (curve, _) = io::read_curve(path)?;
        let curve = if curve.averaged {
            curve
        } else {
            crate::diagnostics::period_average(&curve, curve.params.duffing.drive_period())?
        };
        curves.push(curve);
    }
    let (normalized, max_values) = experiments::collapse_curves(&curves)?;
    for (curve, src) in normalized.iter().zip(&args.curves) {
        let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
        let p = out_dir.join(format!("{stem}.collapsed.csv"));
        io::write_curve_csv(curve, &p)?;
        println!("normalized = {}", p.display());
    }
    let table = out_dir.join("max_g.csv");
    io::write_max_table(&max_values, &table)?;
    println!("max_table = {}", table.display());
    for (z, m) in &max_values {
        println!("max_g zeta0 = {z}: {m}");
    }
    Ok(())
}

fn cmd_fit(args: FitArgs) -> CliResult {
    let table = io::read_max_table(&args.input)?;
    let fit = experiments::fit_saturation(&table)?;
    println!("a = {}", fit.a);
    println!("b = {}", fit.b);
    println!("residual = {}", fit.residual);
    Ok(())
}

/// Largest relative G(t) deviation between two curves on their shared
/// sample times, measured against the peak of the reference curve.
fn g_deviation(reference: &GCurve, other: &GCurve) -> f64 {
    let peak = reference.max_g().abs().max(f64::MIN_POSITIVE);
    let n = reference.samples.len().min(other.samples.len());
    let mut worst = 0.0_f64;
    for k in 0..n {
        let a = &reference.samples[k];
        let b = &other.samples[k];
        debug_assert!((a.t - b.t).abs() <= 1e-9 * a.t.max(1.0));
        worst = worst.max((a.g - b.g).abs() / peak);
    }
    worst
}

fn cmd_check(args: CheckArgs) -> CliResult {
    let rc = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            hbar: Some(0.125),
            diffusion: Some(1.5625e-3),
            ..RunConfig::default()
        },
    };
    let resolved = rc.resolve()?;
    let shared = resolved.shared();
    let (hbar, diffusion) = (resolved.params.bath.hbar, resolved.params.bath.diffusion);
    eprintln!("base run: dt = {}, grid {} x {}", shared.solver.dt, shared.grid.n_q(), shared.grid.n_p());
    let base = run_point(hbar, diffusion, &shared)?;

    // halved dt on the same grid, same sample times
    let mut fine_dt = shared.clone();
    fine_dt.solver.dt /= 2.0;
    fine_dt.solver.sample_every *= 2;
    eprintln!("dt study: dt = {}", fine_dt.solver.dt);
    let halved = run_point(hbar, diffusion, &fine_dt)?;
    let dev_dt = g_deviation(&base.averaged, &halved.averaged);
    println!("dt_halving_max_rel_dg = {dev_dt}");

    // doubled resolution; dt divided by an integer factor that restores
    // stability, cadence scaled to keep sample times aligned
    let mut fine_grid = shared.clone();
    fine_grid.grid = crate::grid::PhaseSpaceGrid::new(
        shared.grid.q_min(),
        shared.grid.q_max(),
        shared.grid.p_min(),
        shared.grid.p_max(),
        shared.grid.n_q() * 2,
        shared.grid.n_p() * 2,
    )?;
    let stable = suggest_dt_for(&fine_grid.grid, &resolved.params, fine_grid.solver.scheme);
    let factor = (shared.solver.dt / stable).ceil().max(1.0) as usize;
    fine_grid.solver.dt = shared.solver.dt / factor as f64;
    fine_grid.solver.sample_every = shared.solver.sample_every * factor;
    eprintln!(
        "resolution study: grid {} x {}, dt = {}",
        fine_grid.grid.n_q(),
        fine_grid.grid.n_p(),
        fine_grid.solver.dt
    );
    let refined = run_point(hbar, diffusion, &fine_grid)?;
    let dev_res = g_deviation(&base.averaged, &refined.averaged);
    println!("resolution_doubling_max_rel_dg = {dev_res}");

    let pass = dev_dt < args.threshold && dev_res < args.threshold;
    println!("threshold = {}", args.threshold);
    println!("converged = {pass}");
    if !pass {
        return Err(format!(
            "not converged: dt study {dev_dt:.3e}, resolution study {dev_res:.3e} \
             (threshold {})",
            args.threshold
        )
        .into());
    }
    Ok(())
}
