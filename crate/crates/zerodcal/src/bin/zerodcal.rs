//! Command-line front end: forward simulation, element-parameter fitting,
//! two-run Windkessel calibration, grid posteriors, and error metrics.
//!
//! Exit codes: 0 on success, 2 when a calibration pauses at the
//! high-fidelity hand-off, 1 on any error (including bad arguments).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zerodcal::forward::{simulate_model, IntegratorConfig};
use zerodcal::inverse::{lm_optimize, LmConfig, ObservationSet};
use zerodcal::model::{LpnModel, Trajectory};
use zerodcal::obs::error_metrics;
use zerodcal::pipeline::{
    grid_posterior, run_calibration, write_grid_csv, CalibrationCase, CalibrationOutcome,
    OutletResistanceModel, SimSettings,
};
use zerodcal::Result;

const EXIT_AWAITING_HANDOFF: u8 = 2;

#[derive(Parser)]
#[command(
    name = "zerodcal",
    about = "Lumped-parameter blood-flow simulation and Windkessel calibration",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a model to a periodic cycle and write the trajectory CSV.
    Simulate(SimulateArgs),
    /// Fit all element parameters of a model to a trajectory.
    Optimize(OptimizeArgs),
    /// Run the two-run Windkessel calibration workflow for a case file.
    Calibrate(CalibrateArgs),
    /// Evaluate the posterior pointwise on the case's coupled grid.
    GridPosterior(GridArgs),
    /// Compare two trajectories with the normalized cap error metrics.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SimArgs {
    /// Time steps per cardiac cycle.
    #[arg(long)]
    steps_per_cycle: Option<usize>,
    /// Maximum number of cycles to try for periodicity.
    #[arg(long)]
    cycles_max: Option<usize>,
    /// Relative cycle-to-cycle tolerance that defines periodicity.
    #[arg(long)]
    periodicity_tol: Option<f64>,
}

impl SimArgs {
    fn apply(&self, settings: &mut SimSettings) {
        if let Some(n) = self.steps_per_cycle {
            settings.steps_per_cycle = n;
        }
        if let Some(n) = self.cycles_max {
            settings.cycles_max = n;
        }
        if let Some(tol) = self.periodicity_tol {
            settings.periodicity_tol = tol;
        }
    }

    fn config(&self) -> IntegratorConfig {
        let mut settings = SimSettings {
            steps_per_cycle: 1000,
            reuse_iteration_matrix: false,
            ..SimSettings::default()
        };
        self.apply(&mut settings);
        settings.to_config()
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Model JSON file.
    model: PathBuf,
    /// Output trajectory CSV.
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the time derivatives next to the values.
    #[arg(long)]
    derivatives: Option<PathBuf>,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Model JSON file providing the starting parameters.
    model: PathBuf,
    /// Observed trajectory CSV covering one cycle.
    trajectory: PathBuf,
    /// Output model JSON with the fitted parameters.
    #[arg(short, long)]
    output: PathBuf,
    /// Evenly spaced samples the trajectory is resampled to before fitting.
    #[arg(long, default_value_t = 128)]
    n_resample: usize,
    /// Initial damping factor.
    #[arg(long, default_value_t = 1.0)]
    damping: f64,
    /// Gradient-norm tolerance.
    #[arg(long, default_value_t = 1e-5)]
    tol_grad: f64,
    /// Increment-norm tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tol_inc: f64,
    /// Iteration budget.
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Allow negative fitted parameters instead of projecting onto [0, inf).
    #[arg(long)]
    allow_negative: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Calibration case JSON file.
    case: PathBuf,
    /// Continue a workflow that paused at the high-fidelity hand-off.
    #[arg(long)]
    resume: bool,
    /// Let this model JSON play the external high-fidelity solver so the
    /// workflow runs end to end in one invocation.
    #[arg(long, value_name = "MODEL_JSON")]
    surrogate_hifi: Option<PathBuf>,
    /// Override the case's run-1 sampler seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the case's particle count.
    #[arg(long)]
    particles: Option<usize>,
    /// Override the case's minimum effective sample size.
    #[arg(long)]
    ess_min: Option<f64>,
    /// Override the case's workspace directory.
    #[arg(long)]
    workspace: Option<PathBuf>,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Args)]
struct GridArgs {
    /// Calibration case JSON file with a `grid` section.
    case: PathBuf,
    /// Output CSV of cell centres and masses.
    #[arg(short, long)]
    output: PathBuf,
    /// Override the number of cells per axis.
    #[arg(long)]
    cells: Option<usize>,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Args)]
struct MetricsArgs {
    /// Reduced-order trajectory CSV.
    reduced: PathBuf,
    /// Reference trajectory CSV.
    reference: PathBuf,
    /// Model JSON naming the inlet and outlets.
    #[arg(short, long)]
    model: PathBuf,
    /// Write the report as JSON here instead of pretty-printing it.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    // Clap's own exit code for bad arguments collides with the hand-off
    // code, so argument errors are mapped onto the plain error exit.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                // --help and --version are successful exits.
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Optimize(args) => optimize(args),
        Command::Calibrate(args) => calibrate(args),
        Command::GridPosterior(args) => grid(args),
        Command::Metrics(args) => metrics(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<ExitCode> {
    let model = LpnModel::from_json_file(&args.model)?;
    let sim = simulate_model(&model, &args.sim.config())?;
    sim.trajectory.write_csv(&args.output)?;
    if let Some(dpath) = &args.derivatives {
        sim.trajectory.write_derivatives_csv(dpath)?;
    }
    if sim.periodic {
        println!(
            "periodic after {} cycles; wrote {}",
            sim.cycles,
            args.output.display()
        );
    } else {
        eprintln!(
            "warning: not periodic within {} cycles; wrote the last cycle anyway",
            sim.cycles
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn optimize(args: OptimizeArgs) -> Result<ExitCode> {
    let model = LpnModel::from_json_file(&args.model)?;
    let traj = Trajectory::read_csv(&args.trajectory, None)?;
    let obs = ObservationSet::resampled(&traj, args.n_resample, model.period())?;
    let alpha0: Vec<f64> = model.parameter_vector().iter().cloned().collect();
    let config = LmConfig {
        initial_damping: args.damping,
        tol_grad: args.tol_grad,
        tol_inc: args.tol_inc,
        max_iters: args.max_iters,
        lower_bounds: if args.allow_negative {
            None
        } else {
            Some(vec![0.0; alpha0.len()])
        },
        frozen: Vec::new(),
    };
    let report = lm_optimize(&model, &alpha0, &obs, &config)?;
    let fitted = model.with_parameters(&report.alpha)?;
    let mut value: serde_json::Value = serde_json::from_str(&fitted.to_json_string()?)?;
    value["lm_report"] = serde_json::to_value(&report)?;
    std::fs::write(&args.output, serde_json::to_string_pretty(&value)?)?;
    println!(
        "{} after {} iterations (residual sum {:.6e}); wrote {}",
        if report.converged { "converged" } else { "stopped" },
        report.iterations,
        report.residual_sum,
        args.output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn calibrate(args: CalibrateArgs) -> Result<ExitCode> {
    let mut case = CalibrationCase::from_json_file(&args.case)?;
    if let Some(seed) = args.seed {
        case.smc.seed = seed;
    }
    if let Some(k) = args.particles {
        case.smc.particle_count = k;
    }
    if let Some(e) = args.ess_min {
        case.smc.ess_min = e;
    }
    if let Some(ws) = args.workspace {
        case.workspace = ws;
    }
    args.sim.apply(&mut case.simulation);

    match run_calibration(&case, args.resume, args.surrogate_hifi.as_deref())? {
        CalibrationOutcome::AwaitingHandoff { request } => {
            println!(
                "run 1 complete; awaiting the high-fidelity response described by {}",
                request.display()
            );
            println!("rerun with --resume once the response trajectory is in place");
            Ok(ExitCode::from(EXIT_AWAITING_HANDOFF))
        }
        CalibrationOutcome::Complete(report) => {
            println!("calibration complete; artifacts in {}", report.workspace.display());
            println!(
                "  fit: {} after {} iterations{}",
                if report.lm.converged { "converged" } else { "stopped" },
                report.lm.iterations,
                if report.lm.stenosis_refrozen {
                    " (stenosis coefficients kept at their starting values)"
                } else {
                    ""
                }
            );
            println!(
                "  training errors: pressure {:.3e}, flow {:.3e}",
                report.training_errors.max_pressure_error, report.training_errors.max_flow_error
            );
            let mean = report.run2.posterior.weighted_mean();
            println!("  posterior mean (log total resistance per outlet): {mean:?}");
            println!("  posterior MAP: {:?}", report.run2.map);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn grid(args: GridArgs) -> Result<ExitCode> {
    let mut case = CalibrationCase::from_json_file(&args.case)?;
    args.sim.apply(&mut case.simulation);
    let mut spec = case.grid.clone().ok_or_else(|| {
        zerodcal::Error::Workspace("the case file has no `grid` section".into())
    })?;
    if let Some(cells) = args.cells {
        spec.cells = cells;
    }
    let inputs = case.load_inputs()?;
    let n_out = inputs.model.windkessel_bcs().len();
    if spec.theta_dim() != n_out {
        return Err(zerodcal::Error::DimensionMismatch(format!(
            "grid couples {} components but the model has {n_out} outlets",
            spec.theta_dim()
        )));
    }
    // The case prior applies when it matches; otherwise the axes' bounds
    // define a uniform prior.
    let prior = match &case.prior {
        Some(_) => inputs.prior.clone(),
        None => spec.default_prior()?,
    };
    let evaluator = OutletResistanceModel::new(inputs.model, case.simulation.to_config());
    let grid = grid_posterior(&evaluator, &prior, &inputs.noise, &spec)?;
    write_grid_csv(&args.output, &grid, &spec)?;
    println!(
        "wrote {} ({} cells, {} failures); argmax cell centre {:?}",
        args.output.display(),
        grid.masses.len(),
        grid.failures,
        grid.argmax_center()
    );
    Ok(ExitCode::SUCCESS)
}

fn metrics(args: MetricsArgs) -> Result<ExitCode> {
    let model = LpnModel::from_json_file(&args.model)?;
    let reduced = Trajectory::read_csv(&args.reduced, None)?;
    let reference = Trajectory::read_csv(&args.reference, None)?;
    let report = error_metrics(&reduced, &reference, &model)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.output {
        Some(path) => {
            std::fs::write(path, &json)?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    println!(
        "pressure error {:.6e}, flow error {:.6e}",
        report.max_pressure_error, report.max_flow_error
    );
    Ok(ExitCode::SUCCESS)
}
