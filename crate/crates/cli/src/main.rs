use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use cossl_cli::run::{self, RunOptions};
use cossl_cli::{compare, config_io, DEFAULT_OUT};
use cossl_core::{Ablation, Mode, TrainConfig};

/// Co-learning of representation and classifier on synthetic long-tailed data.
#[derive(Parser)]
#[command(name = "cossl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Run {
        #[command(flatten)]
        common: Common,
        /// Trained model to start from; required with `--mode crt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrain a fresh classifier on the frozen encoder of a trained model.
    Crt {
        #[command(flatten)]
        common: Common,
        /// `model.ckpt` of the run whose encoder is reused.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a finished run on shifted test distributions.
    Sweep {
        /// Run directory holding `config.toml` and `model.ckpt`.
        #[arg(long)]
        run: PathBuf,
        /// `section.key=value` overrides, e.g. `eval.sweep_cap=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the method and its ablations side by side.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Ablations to run; all of them when omitted.
        #[arg(long = "ablation", value_name = "TAG")]
        ablations: Vec<Ablation>,
    },
    /// Mean ± std of run summaries, grouped by mode.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    PrintDefaults {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Total training steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Also evaluate on shifted test distributions.
    #[arg(long)]
    sweep: bool,
    /// Output root.
    #[arg(long, env = "COSSL_OUT", default_value = DEFAULT_OUT)]
    out: PathBuf,
    /// Run directory name under the output root; `<mode>-seed<seed>` by default.
    #[arg(long)]
    name: Option<String>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

impl Common {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = config_io::resolve(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.cossl.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.cossl.mode = m;
        }
        if let Some(t) = self.steps {
            cfg.cossl.total_steps = t;
        }
        if self.sweep {
            cfg.eval.sweep = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn run_dir(&self, cfg: &TrainConfig) -> PathBuf {
        let name = self
            .name
            .clone()
            .unwrap_or_else(|| format!("{}-seed{}", cfg.cossl.mode, cfg.cossl.seed));
        self.out.join(name)
    }
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(ErrorKind::MissingRequiredArgument, msg).exit()
}

fn report(dir: &Path, s: &run::RunSummary) {
    println!(
        "{}: avg class recall {:.2}, tail recall {:.2} (last {} epochs) -> {}",
        s.mode,
        100.0 * s.avg_class_recall,
        100.0 * s.tail_recall,
        s.tail_epochs,
        dir.display()
    );
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, checkpoint } => {
            let cfg = common.resolve()?;
            if cfg.cossl.mode == Mode::Crt && checkpoint.is_none() {
                usage_error("mode `crt` retrains a trained model's classifier; pass --checkpoint <model.ckpt>");
            }
            let dir = common.run_dir(&cfg);
            let opts = RunOptions {
                quiet: common.quiet,
                checkpoint,
            };
            report(&dir, &run::execute(&cfg, &dir, &opts)?);
        }
        Command::Crt { common, checkpoint } => {
            let mut cfg = common.resolve()?;
            cfg.cossl.mode = Mode::Crt;
            let dir = common.run_dir(&cfg);
            let opts = RunOptions {
                quiet: common.quiet,
                checkpoint: Some(checkpoint),
            };
            report(&dir, &run::execute(&cfg, &dir, &opts)?);
        }
        Command::Sweep { run: dir, overrides } => {
            let (unknown, known) = run::sweep_run_dir(&dir, &overrides)?;
            println!(
                "sweep mean accuracy: unknown prior {:.2}, known prior {:.2} -> {}",
                100.0 * unknown,
                100.0 * known,
                dir.join(run::SWEEP).display()
            );
        }
        Command::Ablate { common, ablations } => {
            let cfg = common.resolve()?;
            let ablations = if ablations.is_empty() {
                Ablation::ALL.to_vec()
            } else {
                ablations
            };
            let root = common.out.join(common.name.clone().unwrap_or_else(|| format!("ablate-seed{}", cfg.cossl.seed)));
            let opts = RunOptions {
                quiet: common.quiet,
                checkpoint: None,
            };
            let results = run::ablate(&cfg, &root, &ablations, &opts)?;
            let base = results[0].1.avg_class_recall;
            for (label, s) in &results {
                println!(
                    "{label:<26} avg class recall {:>6.2}  ({:+.2} vs cossl)  tail {:>6.2}",
                    100.0 * s.avg_class_recall,
                    100.0 * (s.avg_class_recall - base),
                    100.0 * s.tail_recall
                );
            }
        }
        Command::Compare { runs } => {
            let summaries = compare::load(&runs)?;
            print!("{}", compare::render(&compare::group(&summaries)));
        }
        Command::PrintDefaults { config, overrides } => {
            let cfg = config_io::resolve(config.as_deref(), &overrides)?;
            print!("{}", config_io::to_toml(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
