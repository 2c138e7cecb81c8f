use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forge_cli::{run_experiment, Preset, RunConfig, Stage};

#[derive(Parser)]
#[command(
    name = "forge",
    version,
    about = "Robust trajectory synthesis and inverse constraint learning"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory (default `out`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Assert each stage's correctness properties and fail on the first violation.
    #[arg(long, global = true)]
    check: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Robust forward synthesis.
    Forward,
    /// Forward, then closed-loop demonstrations.
    Demos,
    /// Through gain and nominal recovery.
    Recover,
    /// Through constraint-parameter inference.
    Infer,
    /// Through guaranteed safe/unsafe grid classification.
    Classify,
    /// Through the transmission-error sweep.
    Sweep,
    /// Full pipeline of a preset (default: the config's preset).
    Run {
        #[arg(long)]
        preset: Option<Preset>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FORGE_LOG", "warn")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    let Some(config_path) = &g.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(2);
    };
    let mut cfg = match RunConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let target = match cli.command {
        Command::Forward => Stage::Forward,
        Command::Demos => Stage::Demos,
        Command::Recover => Stage::Recover,
        Command::Infer => Stage::Infer,
        Command::Classify => Stage::Classify,
        Command::Sweep => Stage::Sweep,
        Command::Run { preset } => {
            if preset.is_some() {
                cfg.preset = preset;
            }
            match cfg.preset {
                Some(p) => p.final_stage(),
                None => {
                    eprintln!("error: run needs --preset or a \"preset\" entry in the config");
                    return ExitCode::from(2);
                }
            }
        }
    };
    if let Some(j) = g.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(2);
        }
    }
    let out_dir = g
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(|d| cfg.resolve(d)))
        .unwrap_or_else(|| PathBuf::from("out"));
    match run_experiment(&cfg, target, &out_dir, g.check) {
        Ok(m) => match &m.failure {
            None => {
                for s in &m.stages {
                    for f in &s.outputs {
                        println!("{}", out_dir.join(&f.name).display());
                    }
                }
                ExitCode::SUCCESS
            }
            Some(f) => {
                eprintln!("stage {} failed: {}", f.stage, f.message);
                ExitCode::FAILURE
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
