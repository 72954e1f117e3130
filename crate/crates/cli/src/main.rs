//! `driftlab`: batch front end for field generation, simulation, training,
//! evaluation and inversion.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use driftlab_core::{DriftError, Integrator};
use serde_json::json;

use crate::commands::Ctx;
use crate::config::{InversionMethod, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "driftlab", version, about = "Lagrangian drift simulation, DriftNet training and velocity inversion")]
struct Cli {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true, env = "DRIFTLAB_THREADS")]
    threads: Option<usize>,
    /// Overrides `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    k_steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the configured flow as `field.drft` plus vorticity exports.
    GenField {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Advects seeds through a field; writes `ensemble.dtrj` and CSV.
    Simulate {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long, value_parser = parse_integrator)]
        integrator: Option<Integrator>,
        #[arg(long)]
        substeps: Option<usize>,
        #[arg(long)]
        radius_km: Option<f64>,
        #[arg(long)]
        n_per_seed: Option<usize>,
        /// Also propagate the density of the first seed.
        #[arg(long)]
        density: bool,
    },
    /// Generates a reference trajectory dataset.
    GenDataset {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        n_traj: Option<usize>,
    },
    /// Trains DriftNet; writes `model/` and `train_log.csv`.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Compares two ensembles, or a model against a dataset's test split.
    Evaluate {
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        simulated: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Retrieves a velocity anomaly from a target trajectory.
    Invert {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_parser = parse_method)]
        method: Option<InversionMethod>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        time_constant: bool,
    },
    /// Runs the built-in invariant suite.
    Selftest,
}

fn parse_integrator(s: &str) -> Result<Integrator, String> {
    match s {
        "rk4" => Ok(Integrator::Rk4),
        "euler" => Ok(Integrator::Euler),
        _ => Err(format!("unknown integrator {s:?} (rk4, euler)")),
    }
}

fn parse_method(s: &str) -> Result<InversionMethod, String> {
    match s {
        "oracle" => Ok(InversionMethod::Oracle),
        "network" => Ok(InversionMethod::Network),
        _ => Err(format!("unknown method {s:?} (oracle, network)")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl GridArgs {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.grid.nx, self.nx);
        set(&mut c.grid.ny, self.ny);
        set(&mut c.grid.k_steps, self.k_steps);
    }
}

#[derive(Clone, Copy, Debug)]
enum Action {
    GenField,
    Simulate,
    GenDataset,
    Train,
    Evaluate,
    Invert,
    Selftest,
}

fn apply_overrides(cli: Cli) -> Result<(RunConfig, Action), DriftError> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut c.seed, cli.seed);
    set(&mut c.out, cli.out);
    let some = |p: Option<PathBuf>| p.map(Some);
    let action = match cli.command {
        Command::GenField { grid } => {
            grid.apply(&mut c);
            Action::GenField
        }
        Command::Simulate {
            grid,
            field,
            integrator,
            substeps,
            radius_km,
            n_per_seed,
            density,
        } => {
            grid.apply(&mut c);
            set(&mut c.inputs.field, some(field));
            set(&mut c.simulate.integrator, integrator);
            set(&mut c.simulate.substeps, substeps);
            set(&mut c.simulate.perturb_radius_km, radius_km);
            set(&mut c.simulate.n_per_seed, n_per_seed);
            c.simulate.density |= density;
            Action::Simulate
        }
        Command::GenDataset { grid, field, n_traj } => {
            grid.apply(&mut c);
            set(&mut c.inputs.field, some(field));
            set(&mut c.dataset.n_traj, n_traj);
            Action::GenDataset
        }
        Command::Train { dataset, epochs, lr, batch_size } => {
            set(&mut c.inputs.dataset, some(dataset));
            set(&mut c.train.epochs, epochs);
            set(&mut c.train.learning_rate, lr);
            set(&mut c.train.batch_size, batch_size);
            Action::Train
        }
        Command::Evaluate { reference, simulated, model, dataset } => {
            set(&mut c.inputs.reference, some(reference));
            set(&mut c.inputs.simulated, some(simulated));
            set(&mut c.inputs.model, some(model));
            set(&mut c.inputs.dataset, some(dataset));
            Action::Evaluate
        }
        Command::Invert {
            grid,
            field,
            target,
            model,
            method,
            steps,
            step_size,
            time_constant,
        } => {
            grid.apply(&mut c);
            if model.is_some() && method.is_none() {
                c.inversion.method = InversionMethod::Network;
            }
            set(&mut c.inputs.field, some(field));
            set(&mut c.inputs.target, some(target));
            set(&mut c.inputs.model, some(model));
            set(&mut c.inversion.method, method);
            set(&mut c.inversion.descent.n_steps, steps);
            set(&mut c.inversion.descent.step_size, step_size);
            c.inversion.descent.time_constant |= time_constant;
            Action::Invert
        }
        Command::Selftest => Action::Selftest,
    };
    c.resolve()?;
    Ok((c, action))
}

fn exit_code(e: &DriftError) -> (u8, &'static str) {
    match e {
        DriftError::MissingFile(_) => (2, "missing_file"),
        DriftError::Json(_) => (3, "malformed_config"),
        DriftError::InvalidGrid(_)
        | DriftError::InvalidArgument(_)
        | DriftError::ShapeMismatch(_)
        | DriftError::TimeOutOfRange { .. }
        | DriftError::Format { .. } => (3, "invalid_input"),
        DriftError::NumericalBlowup { .. }
        | DriftError::NonFiniteLoss { .. }
        | DriftError::DegenerateDensity(_)
        | DriftError::UndefinedLiuIndex { .. } => (4, "numerical_abort"),
        DriftError::Io(_) => (1, "io"),
    }
}

fn fail(code: u8, kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message, "exit_code": code}}));
    ExitCode::from(code)
}

fn run(cli: Cli) -> Result<usize, DriftError> {
    let threads = cli.threads;
    let (config, action) = apply_overrides(cli)?;
    let threads = match threads {
        Some(0) => return Err(DriftError::InvalidArgument("--threads must be >= 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| DriftError::InvalidArgument(format!("thread pool: {e}")))?;
    let ctx = Ctx { config, parallel: threads > 1 };
    match action {
        Action::GenField => ctx.gen_field()?,
        Action::Simulate => ctx.simulate()?,
        Action::GenDataset => ctx.gen_dataset()?,
        Action::Train => ctx.train()?,
        Action::Evaluate => ctx.evaluate()?,
        Action::Invert => ctx.invert()?,
        Action::Selftest => return ctx.selftest(),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            return fail(64, "usage", message.trim_end().to_string());
        }
    };
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failed) => fail(1, "selftest_failed", format!("{failed} self-test check(s) failed")),
        Err(e) => {
            let (code, kind) = exit_code(&e);
            fail(code, kind, e.to_string())
        }
    }
}
