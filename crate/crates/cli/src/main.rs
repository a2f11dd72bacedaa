use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use safekernel::commands;
use safekernel::quadrotor::TiltCoupling;
use safekernel::{Error, RunConfig, Variant};

const EXIT_CONFIG: u8 = 1;
const EXIT_INFEASIBLE_PARTITION: u8 = 2;
const EXIT_EMPTY_KERNEL: u8 = 3;
const EXIT_SAFETY: u8 = 4;

#[derive(Parser)]
#[command(name = "safekernel", version, about = "Piecewise-ellipsoidal discriminating kernels and hybrid safety control")]
struct Cli {
    /// Worker threads for the direction chains (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Offline phase: compute the kernel approximation and write its artifacts.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Online phase: simulate the configured runs against stored artifacts.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding kernel.json and the tube files (default: the output directory).
        #[arg(long)]
        analysis_dir: Option<PathBuf>,
    },
    /// Time the offline phase on random stable systems of growing dimension.
    BenchScaling {
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,12")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        partition: usize,
        #[arg(long, default_value = "out/bench")]
        output_dir: PathBuf,
    },
    /// Print a built-in configuration as JSON.
    Preset {
        name: Preset,
        /// Quadrotor only: flip the sign of the tilt-to-acceleration coupling.
        #[arg(long)]
        mirrored_tilt: bool,
        /// Write to this file instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Planar,
    Quadrotor,
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaPolicy {
    /// Pseudo-time stands still in the performance mode.
    Freeze,
    /// Pseudo-time follows real time in the performance mode.
    Track,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Finite,
    Infinite,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory (default: out/<config name>).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the direction and disturbance seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of random terminal directions.
    #[arg(long)]
    directions: Option<usize>,
    /// Override the number of partition sub-intervals.
    #[arg(long)]
    partition: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    sigma_policy: Option<SigmaPolicy>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf), Error> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        if let Some(n) = self.directions {
            cfg.override_directions(n);
        }
        if let Some(p) = self.partition {
            cfg.partition = p;
        }
        if let Some(alpha) = self.alpha {
            cfg.controller.alpha = alpha;
        }
        if let Some(policy) = self.sigma_policy {
            cfg.controller.sigma_rate_perf = match policy {
                SigmaPolicy::Freeze => 0.0,
                SigmaPolicy::Track => 1.0,
            };
        }
        if let Some(v) = self.variant {
            cfg.controller.variant = match v {
                VariantArg::Finite => Variant::FiniteH,
                VariantArg::Infinite => Variant::InfiniteH,
            };
        }
        cfg.validate()?;
        let out = self.output_dir.clone().unwrap_or_else(|| commands::default_output_dir(&cfg));
        Ok((cfg, out))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InfeasiblePartition { .. } => EXIT_INFEASIBLE_PARTITION,
        Error::EmptyKernel => EXIT_EMPTY_KERNEL,
        Error::NotInKernel | Error::SafetyViolationImminent { .. } => EXIT_SAFETY,
        _ => EXIT_CONFIG,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Analyze { run } => {
            let (cfg, out) = run.load()?;
            let summary = commands::cmd_analyze(&cfg, &out)?;
            println!(
                "M = {:.6}, |P| = {}, surviving directions {}/{}, invariance records {}, {:.2} s",
                summary.m_bound,
                summary.n_intervals,
                summary.surviving.len(),
                summary.n_directions,
                summary.invariance.len(),
                summary.timing.total_s
            );
            for r in &summary.invariance {
                println!("  direction {} invariant at k = {}", r.direction_id, r.k);
            }
            info!("artifacts written to {}", out.display());
            Ok(0)
        }
        Command::Simulate { run, analysis_dir } => {
            let (cfg, out) = run.load()?;
            let analysis_dir = analysis_dir.unwrap_or_else(|| out.clone());
            let report = commands::cmd_simulate(&cfg, &analysis_dir, &out)?;
            for r in &report.runs {
                let verdict = match (r.all_safe, r.first_violation) {
                    (true, _) => "safe".to_string(),
                    (false, Some(t)) => format!("left K at t = {t:.3}"),
                    (false, None) => "unsafe".to_string(),
                };
                println!(
                    "x0[{}] {:<11} {} steps, {verdict}, {} mode switches{}{}",
                    r.x0_index,
                    r.policy,
                    r.steps,
                    r.mode_switches,
                    if r.init_best_effort { ", best effort" } else { "" },
                    r.error.as_deref().map(|e| format!(", error: {e}")).unwrap_or_default()
                );
            }
            if report.guarantee_violated() {
                warn!("a supervised run failed while its guarantee applied");
                return Ok(EXIT_SAFETY);
            }
            Ok(0)
        }
        Command::BenchScaling { dims, repetitions, seed, partition, output_dir } => {
            let report = commands::cmd_bench_scaling(&dims, repetitions, seed, partition, &output_dir)?;
            for p in &report.points {
                println!("n = {:>3}: {:.4} s", p.dim, p.mean_s);
            }
            println!("fitted exponent {:.3}", report.exponent);
            Ok(0)
        }
        Command::Preset { name, mirrored_tilt, output } => {
            let tilt = if mirrored_tilt { TiltCoupling::Mirrored } else { TiltCoupling::Standard };
            let cfg = match name {
                Preset::Planar => RunConfig::planar(),
                Preset::Quadrotor => RunConfig::quadrotor(tilt),
            };
            let json = cfg.to_json() + "\n";
            match output {
                Some(path) => std::fs::write(path, json)?,
                None => print!("{json}"),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
