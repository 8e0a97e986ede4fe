use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use soc_kit::{PipelineError, Runner, Stage};

/// Separated open-loop / closed-loop stochastic control pipeline.
#[derive(Parser, Debug)]
#[command(name = "soc-kit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every stage, or resume from `--stage` using cached artifacts.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: Option<Stage>,
    },
    /// Open-loop belief-space optimization.
    Optimize(Common),
    /// Impulse experiments and ERA on the cached nominal.
    Identify(Common),
    /// LQG synthesis on the cached model.
    Synthesize(Common),
    /// Monte Carlo evaluation of the cached controller.
    Evaluate(Common),
    /// Check the configuration and print the resolved parameters.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let (common, from, to) = match cli.command {
        Command::Validate { config, seed } => {
            let runner = Runner::from_path(&config, seed, None)?;
            let rows = runner.config.table();
            let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            for (k, v) in rows {
                println!("{k:<width$} = {v}");
            }
            return Ok(());
        }
        Command::Pipeline { common, stage } => (common, stage.unwrap_or(Stage::Optimize), Stage::Evaluate),
        Command::Optimize(c) => (c, Stage::Optimize, Stage::Optimize),
        Command::Identify(c) => (c, Stage::Identify, Stage::Identify),
        Command::Synthesize(c) => (c, Stage::Synthesize, Stage::Synthesize),
        Command::Evaluate(c) => (c, Stage::Evaluate, Stage::Evaluate),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
    let mut runner = Runner::from_path(&common.config, common.seed, common.out)?;
    if let Some(summary) = runner.run(from, to)? {
        println!("n_r = {}, complexity ratio = {:.3e}", summary.n_r, summary.complexity_ratio);
        for p in &summary.probes {
            println!("probe {}: closed-loop RMS {:.4}, open-loop RMS {:.4}", p.name, p.closed_loop_rms, p.open_loop_rms);
        }
        for b in &summary.band {
            println!("t = {}: {:.1}% of nodes in band (open loop {:.1}%)", b.time, 100.0 * b.closed_loop_fraction, 100.0 * b.open_loop_fraction);
        }
        println!("mean delta J = {:.4e} (SE {:.2e})", summary.mean_delta_cost, summary.std_error_delta_cost);
    }
    println!("artifacts in {}", runner.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
