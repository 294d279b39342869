use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lagros::simbench::PlannerKind;
use lagros::Error;
use lagros_cli::{configure_jobs, load_config, Pipeline};

/// Robust guidance pipeline: synthesize a contraction metric, plan
/// tube-eroded trajectories, sample expert demonstrations, train the
/// one-evaluation policy, and benchmark it in disturbed closed loop.
///
/// Configuration is a key-value file with [section] headers (see
/// `configs/`); every key has a default, `--set section.key=value` overrides
/// individual entries, and the LAGROS_SEED environment variable overrides
/// the seed. Exit codes: 0 success, 2 infeasible, 1 error.
#[derive(Parser)]
#[command(name = "lagros", version, about)]
struct Cli {
    /// Configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration entry: section.key=value (repeatable).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Seed override (also LAGROS_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for environment- and trial-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory for artifacts and manifests.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the contraction metric over a sampled grid.
    SynthesizeMetric,
    /// Plan one tube-eroded nominal trajectory.
    Plan {
        /// Environment file; a random environment is sampled when omitted.
        #[arg(long)]
        env: Option<PathBuf>,
    },
    /// Generate the imitation dataset (requires the metric).
    GenDemos,
    /// Train the policy and the naive baseline (requires the dataset).
    Train,
    /// One disturbed closed-loop rollout against the stored nominal.
    Rollout {
        /// expert | lagros | naive
        #[arg(long, default_value = "lagros")]
        source: String,
    },
    /// Disturbed closed-loop comparison of the planner family.
    Bench {
        /// Comma list from {naive, online-mp, lagros}.
        #[arg(long, default_value = "naive,online-mp,lagros")]
        planners: String,
    },
    /// Verify the tube on a stored rollout and export bound curves.
    VerifyBounds {
        #[arg(long, default_value = "lagros")]
        source: String,
    },
}

fn run(cli: Cli) -> lagros::Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides, cli.seed, cli.jobs)?;
    configure_jobs(cfg.jobs);
    let pipeline = Pipeline::new(cfg, &cli.out);
    match cli.command {
        Command::SynthesizeMetric => {
            let table = pipeline.synthesize_metric()?;
            println!(
                "metric: {} grid points, chi = {:.6}, sqrt(chi) = {:.6}, nu = {:.6e}",
                table.samples.len(),
                table.chi,
                table.chi.sqrt(),
                table.nu
            );
        }
        Command::Plan { env } => {
            let env = match env {
                Some(p) => Some(lagros::planner::Environment::from_text(
                    &std::fs::read_to_string(&p)?,
                )?),
                None => None,
            };
            let traj = pipeline.plan_nominal(env)?;
            println!(
                "plan: {} knots, dt = {}, cost = {:.6}",
                traj.knots(),
                traj.dt,
                traj.cost
            );
        }
        Command::GenDemos => {
            let ds = pipeline.gen_demos()?;
            println!(
                "dataset: {} samples over {} environments ({} resampled)",
                ds.samples.len(),
                pipeline.cfg.demos.n_envs,
                ds.resampled_envs
            );
        }
        Command::Train => {
            let (_, _, eps_hat) = pipeline.train()?;
            println!("trained: eps_hat = {eps_hat:.6}");
        }
        Command::Rollout { source } => {
            let violation = pipeline.run_rollout(&source)?;
            println!("rollout[{source}]: max tube violation = {violation:.6}");
        }
        Command::Bench { planners } => {
            let kinds: Vec<PlannerKind> = planners
                .split(',')
                .map(|p| match p.trim() {
                    "naive" => Ok(PlannerKind::NaivePolicy),
                    "online-mp" => Ok(PlannerKind::OnlineMp),
                    "lagros" => Ok(PlannerKind::LagRos),
                    other => Err(Error::Config(format!("unknown planner `{other}`"))),
                })
                .collect::<lagros::Result<_>>()?;
            let report = pipeline.run_bench(&kinds)?;
            for row in &report.rows {
                println!(
                    "{}: d_bar = {:.3}, success = {:.1}%, effort = {:.3e}, dt = {:.2e}s",
                    row.planner.label(),
                    row.d_bar,
                    100.0 * row.success_rate,
                    row.mean_effort,
                    row.mean_dt
                );
            }
        }
        Command::VerifyBounds { source } => {
            let violation = pipeline.verify_bounds(&source)?;
            println!("verify-bounds[{source}]: max violation = {violation:.6}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::PlanningInfeasible(_)
                | Error::SdpInfeasible(_)
                | Error::SynthesisInfeasible { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
