use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unmask::io::RunConfig;
use unmask::pipeline::{self, Command};
use unmask::Error;

#[derive(Parser)]
#[command(name = "unmask", version, about = "Masked diffusion decoding lab")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory shared by all commands.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured worker count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/test task instances.
    GenTasks(Common),
    /// Train the denoiser backbone.
    TrainBackbone(Common),
    /// Sample first-step candidate sets and label them by outcome.
    GenPlannerData(Common),
    /// Train the first-step planner.
    TrainPlanner(Common),
    /// Decode the evaluation instances and store trajectories.
    Decode(Common),
    /// Score stored trajectories.
    Eval(Common),
    /// Trace diagnostics over stored trajectories.
    Analyze(Common),
    /// pass@k curves for the randomness variants.
    Passk(Common),
    /// Two-stage trajectory anchoring.
    Anchor(Common),
    /// Ablation sweep along the configured axis.
    Ablate(Common),
    /// gen-tasks, train-backbone, gen-planner-data, train-planner, decode, eval.
    Quickstart(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Integrity(_) | Error::Format(_) => 3,
        Error::AtStep { source, .. } => exit_code(source),
        _ => 4,
    }
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| Error::Config(format!("{}: {e}", common.config.display())))?;
    let mut cfg = RunConfig::from_toml_str(&text)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("out: no run directory (set `out` or pass --out)".into()))?;
    Ok((cfg, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmds, common): (Vec<Command>, &Common) = match &cli.command {
        Cmd::GenTasks(c) => (vec![Command::GenTasks], c),
        Cmd::TrainBackbone(c) => (vec![Command::TrainBackbone], c),
        Cmd::GenPlannerData(c) => (vec![Command::GenPlannerData], c),
        Cmd::TrainPlanner(c) => (vec![Command::TrainPlanner], c),
        Cmd::Decode(c) => (vec![Command::Decode], c),
        Cmd::Eval(c) => (vec![Command::Eval], c),
        Cmd::Analyze(c) => (vec![Command::Analyze], c),
        Cmd::Passk(c) => (vec![Command::PassAtK], c),
        Cmd::Anchor(c) => (vec![Command::Anchor], c),
        Cmd::Ablate(c) => (vec![Command::Ablate], c),
        Cmd::Quickstart(c) => (pipeline::QUICKSTART.to_vec(), c),
    };
    let (cfg, out) = match load(common) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("unmask: {e}");
            return ExitCode::from(2);
        }
    };
    for cmd in cmds {
        match pipeline::run(cmd, &cfg, &out) {
            Ok(m) => eprintln!(
                "{}: wrote {} file(s) under {}",
                cmd.name(),
                m.outputs.len(),
                out.join(cmd.dir()).display()
            ),
            Err(e) => {
                eprintln!("unmask {}: {e}", cmd.name());
                return ExitCode::from(exit_code(&e));
            }
        }
    }
    if matches!(cli.command, Cmd::Eval(_) | Cmd::Quickstart(_)) {
        if let Ok(s) = pipeline::read_eval(&out) {
            println!(
                "accuracy {:.4} [{:.4}, {:.4}] over {} instances",
                s.accuracy, s.estimate.lo, s.estimate.hi, s.instances
            );
        }
    }
    ExitCode::SUCCESS
}
