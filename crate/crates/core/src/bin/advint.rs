use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advint::attacks::AttackKind;
use advint::config::{parse_gamma_list, Overrides, RunConfig};
use advint::error::{Error, Result};
use advint::report;

#[derive(Parser)]
#[command(name = "advint", version, about = "Channel-level adversarial intervention analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model and write `model.netw` plus the training log.
    Train(Common),
    /// Attack correctly classified test samples and write one cache per attack.
    Attack(Common),
    /// Sweep channel swaps over the configured gamma levels.
    Intervene(Common),
    /// Derive marginals, rankings, p-values, kernel and cross-attack tables.
    Analyze(Common),
    /// Validate the bundle and write plot data and the manifest.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Gamma levels, e.g. `1,3,5-7`.
    #[arg(long)]
    gamma: Option<String>,
    /// Restricts attack/intervene to one attack; selects the analyzed attack.
    #[arg(long)]
    attack_kind: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 lets the runtime decide.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, Option<AttackKind>)> {
        let mut cfg = RunConfig::load(&self.config)?;
        let attack_kind = self.attack_kind.as_deref().map(AttackKind::parse).transpose()?;
        let out_dir = match &self.out_dir {
            Some(d) if d.is_relative() => {
                let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
                Some(cwd.join(d))
            }
            other => other.clone(),
        };
        cfg.apply(&Overrides {
            gammas: self.gamma.as_deref().map(parse_gamma_list).transpose()?,
            attack_kind,
            out_dir,
            seed: self.seed,
            workers: self.workers,
        })?;
        Ok((cfg, attack_kind))
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => print_json(&report::cmd_train(&c.load()?.0)?),
        Command::Attack(c) => {
            let (cfg, kind) = c.load()?;
            print_json(&report::cmd_attack(&cfg, kind.as_slice())?)
        }
        Command::Intervene(c) => {
            let (cfg, kind) = c.load()?;
            print_json(&report::cmd_intervene(&cfg, kind.as_slice())?)
        }
        Command::Analyze(c) => print_json(&report::cmd_analyze(&c.load()?.0)?),
        Command::Report(c) => {
            let m = report::cmd_report(&c.load()?.0)?;
            print_json(&serde_json::json!({
                "config_hash": m.config_hash,
                "model_hash": m.model_hash,
                "files": m.files.len(),
            }))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
