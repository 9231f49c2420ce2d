use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use freeflyer::dynamics::Dynamics;
use freeflyer::harness::{
    export_run, load_scenario, read_trajectory_csv, report_hash, run_assembly, trajectory_csv, AssemblyPhase,
    AssemblyRun, ScenarioConfig,
};
use freeflyer::nmpc::run_receding_horizon;
use freeflyer::planner::plan;
use freeflyer::smoother::{retime, shortcut, GeometricPath, SmootherConfig};
use freeflyer::{Error, Trajectory};
use nalgebra::DVector;

/// Planning, tracking and assembly simulation for a free-flying robot with an arm.
#[derive(Debug, Parser)]
#[command(name = "freeflyer", version)]
struct Cli {
    /// Scenario file.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the scenario's, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stop at the first failure.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Motion {
    MoveToPrinter,
    MoveToGoal,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plans a path with LQR-RRT* and writes `plan.csv`.
    ///
    /// The target is a part's motion-phase target when `--part` is given,
    /// otherwise the scenario goal.
    Plan {
        #[arg(long)]
        part: Option<usize>,
        #[arg(long, value_enum, default_value = "move-to-printer")]
        phase: Motion,
        /// Start from the last knot of this trajectory instead of the scenario start.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Shortcuts a planned trajectory and writes the knots to `smoothed.csv`.
    Smooth {
        #[arg(long)]
        input: PathBuf,
    },
    /// Re-times a path with LQR tracking and writes `reference.csv`.
    Track {
        #[arg(long)]
        input: PathBuf,
    },
    /// Tracks a reference with the receding-horizon controller and writes
    /// `executed.csv` and `mpc_diagnostics.csv`.
    Mpc {
        #[arg(long)]
        input: PathBuf,
    },
    /// Runs the whole assembly and exports every table plus `run.json`.
    Simulate,
    /// Re-exports the tables of a saved `run.json`.
    Export {
        #[arg(long)]
        input: PathBuf,
    },
}

/// Failures split by exit code.
enum Failure {
    /// Bad configuration or input artifact (exit 2).
    Input(Error),
    /// The computation ran and failed (exit 1).
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } | Error::Validation(_) | Error::InvalidDescription(_) => {
                Failure::Input(e)
            }
            e => Failure::Run(e.to_string()),
        }
    }
}

fn input(e: Error) -> Failure {
    Failure::Input(e)
}

fn unreadable(path: &Path, e: std::io::Error) -> Failure {
    input(Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn scenario(cli: &Cli) -> Result<ScenarioConfig, Failure> {
    let path = cli
        .scenario
        .as_ref()
        .ok_or_else(|| Failure::Input(Error::Config("--scenario is required".into())))?;
    let mut config = load_scenario(path).map_err(|e| match e {
        Error::Io(e) => Error::Config(format!("cannot read {}: {e}", path.display())),
        e => e,
    })?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_dir(cli: &Cli, config: Option<&ScenarioConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| config.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn read_table(path: &Path, config: &ScenarioConfig) -> Result<Trajectory, Failure> {
    let sys = config.system().map_err(input)?;
    let text = fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
    read_trajectory_csv(&text, sys.state_dim(), sys.control_dim()).map_err(input)
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    let p = dir.join(name);
    fs::write(&p, body).map_err(Error::from)?;
    println!("wrote {}", p.display());
    Ok(p)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Plan { part, phase, from } => {
            let c = scenario(cli)?;
            let sys = c.system()?;
            let start = match from {
                Some(p) => read_table(p, &c)?.last().clone(),
                None => c.start_state()?,
            };
            let target = match part {
                Some(i) if *i < c.parts.len() => {
                    let phase = match phase {
                        Motion::MoveToPrinter => AssemblyPhase::MoveToPrinter,
                        Motion::MoveToGoal => AssemblyPhase::MoveToGoal,
                    };
                    c.phase_target(*i, phase)?
                }
                Some(i) => return Err(input(Error::Config(format!("part {i} does not exist")))),
                None => c
                    .goal_state()?
                    .ok_or_else(|| input(Error::Config("the scenario has no goal; pass --part".into())))?,
            };
            let pc = c.planner.config(c.planner_bounds(&target), c.seed, cli.strict);
            let result = plan(&sys, &start, &target, &c.initial_field()?, &pc)?;
            println!(
                "cost {:.6} after {} iterations, {} knots",
                result.cost,
                result.iterations,
                result.trajectory.len()
            );
            write(
                &out_dir(cli, Some(&c)),
                "plan.csv",
                &trajectory_csv(&result.trajectory, sys.joint_count(), 0.0),
            )?;
        }
        Command::Smooth { input: path } => {
            let c = scenario(cli)?;
            let sys = c.system()?;
            let traj = read_table(path, &c)?;
            let cd = sys.state_dim() / 2;
            let sc = SmootherConfig {
                seed: c.seed,
                strict: cli.strict,
                ..c.smoother.clone()
            };
            let raw = GeometricPath::from_trajectory(&traj, cd)?;
            let result = shortcut(&raw, &c.initial_field()?, &sc)?;
            println!(
                "length {:.6} -> {:.6} with {} shortcuts",
                raw.length(),
                result.path.length(),
                result.accepted_lengths.len()
            );
            // knots only: the time column counts knots
            let knots = result.path.states().to_vec();
            let controls = vec![DVector::zeros(sys.control_dim()); knots.len()];
            let table = Trajectory::new(1.0, knots, controls)?;
            write(
                &out_dir(cli, Some(&c)),
                "smoothed.csv",
                &trajectory_csv(&table, sys.joint_count(), 0.0),
            )?;
        }
        Command::Track { input: path } => {
            let c = scenario(cli)?;
            let sys = c.system()?;
            let traj = read_table(path, &c)?;
            let path = GeometricPath::from_trajectory(&traj, sys.state_dim() / 2)?;
            let reference = retime(&sys, &path, &c.tracking.cost()?, &c.retime, c.mpc.h)?;
            println!("{} steps of {} s", reference.steps(), reference.h);
            write(
                &out_dir(cli, Some(&c)),
                "reference.csv",
                &trajectory_csv(&reference, sys.joint_count(), 0.0),
            )?;
        }
        Command::Mpc { input: path } => {
            let c = scenario(cli)?;
            let sys = c.system()?;
            let reference = read_table(path, &c)?;
            let result = run_receding_horizon(&sys, reference.first(), &reference, &c.initial_field()?, &c.mpc)?;
            let mut diag =
                "step,inner_iterations,outer_iterations,residual,max_violation,converged,infeasible,solve_ms\n"
                    .to_string();
            for d in &result.diagnostics {
                let _ = writeln!(
                    diag,
                    "{},{},{},{},{},{},{},{}",
                    d.step,
                    d.inner_iterations,
                    d.outer_iterations,
                    d.residual,
                    d.max_violation,
                    d.converged,
                    d.infeasible,
                    d.solve_ms
                );
            }
            println!(
                "{} steps, mean solve {:.2} ms",
                result.diagnostics.len(),
                result.mean_solve_ms()
            );
            let dir = out_dir(cli, Some(&c));
            write(
                &dir,
                "executed.csv",
                &trajectory_csv(&result.trajectory, sys.joint_count(), 0.0),
            )?;
            write(&dir, "mpc_diagnostics.csv", &diag)?;
            let audit = c
                .initial_field()?
                .audit(&result.trajectory.positions(), c.planner.h_check);
            if !audit.passed() {
                return Err(Failure::Run(format!(
                    "collision audit failed at knot {}",
                    audit.worst_knot
                )));
            }
        }
        Command::Simulate => {
            let c = scenario(cli)?;
            let run = run_assembly(&c, cli.strict)?;
            let dir = out_dir(cli, Some(&c));
            export_run(&run, &dir)?;
            let json = serde_json::to_string(&run).map_err(|e| Failure::Run(e.to_string()))?;
            write(&dir, "run.json", &json)?;
            summarize(&run)?;
            if !run.report.success {
                return Err(Failure::Run(format!(
                    "{} of {} parts placed",
                    run.report.parts_placed, run.report.parts_total
                )));
            }
        }
        Command::Export { input: path } => {
            let text = fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
            let run: AssemblyRun = serde_json::from_str(&text).map_err(|e| {
                input(Error::Parse {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            })?;
            let dir = out_dir(cli, Some(&run.config));
            for p in export_run(&run, &dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn summarize(run: &AssemblyRun) -> Result<(), Failure> {
    let r = &run.report;
    println!("scenario {} seed {}", r.scenario, r.seed);
    for p in &r.phases {
        let status = p.failure.as_deref().unwrap_or("ok");
        println!(
            "  part {:>2} {:<16} {:>4} steps  {}",
            p.part_name,
            p.phase.name(),
            p.steps,
            status
        );
    }
    println!(
        "placed {}/{}  steps {}  mean solve {:.2} ms  max {:.2} ms",
        r.parts_placed, r.parts_total, r.total_steps, r.mean_solve_ms, r.max_solve_ms
    );
    if let Some(c) = r.min_clearance {
        println!("min clearance {c:.4}");
    }
    println!("hash {}", report_hash(run)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
