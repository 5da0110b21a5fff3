use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use qeihan_cli::{
    cmd_analyze, cmd_simulate, cmd_sweep, error_line, parse_machines, parse_overrides, ActSource,
    RunSpec,
};

#[derive(Parser)]
#[command(
    name = "qeihan",
    version,
    about = "Simulate LOG2-quantized DNN inference on 3D-stacked DRAM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Histogram the activation exponents and estimate memory savings.
    Analyze(Common),
    /// Run machines on a network and compare them.
    Simulate(Common),
    /// Sweep a single-exponent workload from 0 down to -7.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Network descriptor (JSON).
    #[arg(long)]
    network: Option<PathBuf>,
    /// Comma-separated machines, or `all`.
    #[arg(long, default_value = "QeiHaN,NaHiD")]
    machines: String,
    /// Memory geometry: a JSON file or `key=value,...` overrides.
    #[arg(long)]
    geometry: Option<String>,
    /// PE configuration: a JSON file or `key=value,...` overrides.
    #[arg(long)]
    pe: Option<String>,
    /// Energy constants (JSON).
    #[arg(long)]
    energy: Option<PathBuf>,
    /// Activation tensor file.
    #[arg(long, conflicts_with = "acts_dist")]
    acts_tensor: Option<PathBuf>,
    /// Exponent distribution to sample activations from.
    #[arg(long)]
    acts_dist: Option<PathBuf>,
    /// Number of sampled activations (defaults to the network input size).
    #[arg(long, requires = "acts_dist")]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-beat weight traces.
    #[arg(long)]
    trace: bool,
}

impl Common {
    /// `sweep` builds its own activations and needs no source.
    fn into_spec(self, needs_acts: bool) -> Result<RunSpec> {
        let acts = match (self.acts_tensor, self.acts_dist) {
            (Some(path), _) => ActSource::Tensor(path),
            (None, Some(path)) => ActSource::Dist {
                path,
                count: self.count,
            },
            (None, None) if needs_acts => {
                anyhow::bail!("one of --acts-tensor or --acts-dist is required")
            }
            (None, None) => ActSource::Tensor(PathBuf::new()),
        };
        let mut spec = RunSpec::new(acts, self.out);
        spec.network = self.network;
        spec.machines = parse_machines(&self.machines)?;
        if let Some(g) = self.geometry {
            spec.geometry = parse_overrides(&g).context("--geometry")?;
        }
        if let Some(p) = self.pe {
            spec.pe = parse_overrides(&p).context("--pe")?;
        }
        if let Some(e) = self.energy {
            spec.energy = qeihan::metrics::EnergyConfig::load(&e)?;
        }
        spec.seed = self.seed;
        spec.trace = self.trace;
        Ok(spec)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(c) => {
            for f in cmd_analyze(&c.into_spec(true)?)? {
                println!("{}", f.display());
            }
        }
        Command::Simulate(c) => {
            let out = cmd_simulate(&c.into_spec(true)?)?;
            for r in out.runs.iter().map(|r| &r.report) {
                log::info!(
                    "{}: {} cycles, {} beats, {:.4e} J",
                    r.machine,
                    r.cycles,
                    r.beats.total(),
                    r.energy.total
                );
            }
            for f in &out.files {
                println!("{}", f.display());
            }
        }
        Command::Sweep(c) => {
            let (_, path) = cmd_sweep(&c.into_spec(false)?)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QEIHAN_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
