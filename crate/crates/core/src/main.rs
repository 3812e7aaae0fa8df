use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::error;
use pvm::pipeline::{emit_reports, run_pvm_until, stage_inputs, stage_scenarios, PipelineError, PvmConfig, Stage};

#[derive(Parser)]
#[command(name = "pvm", version, about = "Voltage screening and storage planning for EV-loaded feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit charging-event distributions, draw annual scenarios and write the loaded profiles.
    Scenarios(Common),
    /// Screen the year for voltage violations.
    Vva(Common),
    /// Score days, rank critical windows and select candidate buses.
    Stat(Common),
    /// Plan storage over the top-ranked window.
    Plan(Common),
    /// Plan, validate over the year and backtrack on failure.
    Validate(Common),
    /// Plan over the top-ranked window and compare operating cost and losses.
    Economics(Common),
    /// Full pipeline with all reports.
    Run(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

fn load(common: &Common) -> Result<PvmConfig, PipelineError> {
    let mut cfg = PvmConfig::from_file(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    Ok(cfg)
}

fn scenarios(cfg: &PvmConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let (dist, set, _) = stage_scenarios(cfg)?;
    dist.write_snapshot(BufWriter::new(File::create(cfg.output_dir.join("event_distributions.json"))?))?;
    set.write_csv(BufWriter::new(File::create(cfg.output_dir.join("scenarios.csv"))?))?;
    let inputs = stage_inputs(cfg)?;
    inputs
        .profiles
        .write_csv(BufWriter::new(File::create(cfg.output_dir.join("profiles.csv"))?))
        .context("writing profiles")?;
    Ok(())
}

fn execute(command: Command) -> Result<i32, PipelineError> {
    let (common, stage) = match &command {
        Command::Scenarios(c) => (c, None),
        Command::Vva(c) => (c, Some(Stage::Vva)),
        Command::Stat(c) => (c, Some(Stage::Stat)),
        Command::Plan(c) => (c, Some(Stage::Plan)),
        Command::Validate(c) => (c, Some(Stage::Validate)),
        Command::Economics(c) => (c, Some(Stage::Economics)),
        Command::Run(c) => (c, Some(Stage::Run)),
    };
    let cfg = load(common)?;
    let Some(stage) = stage else {
        return match scenarios(&cfg) {
            Ok(()) => Ok(0),
            Err(e) => match e.downcast::<PipelineError>() {
                Ok(p) => Err(p),
                Err(e) => Err(PipelineError::Config(format!("{:#}", e))),
            },
        };
    };
    let report = run_pvm_until(&cfg, stage)?;
    emit_reports(&report, &cfg.output_dir)?;
    println!("{:?}: reports in {}", report.outcome, cfg.output_dir.display());
    Ok(report.outcome.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            error!("{}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
