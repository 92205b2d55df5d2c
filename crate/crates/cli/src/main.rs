use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jsa_tod_cli::{
    cmd_ablate_mis, cmd_eval, cmd_gen, cmd_oracle_check, cmd_train, load_dataset, CliError, ExperimentConfig,
    TrainOverrides,
};

#[derive(Parser)]
#[command(name = "jsa-tod", version, about = "Semi-supervised training of latent-state dialog models on MiniTOD")]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, replacing the config's `out_dir` (or `data_dir` for `gen`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(flatten)]
    train: TrainOverrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/valid/test splits with full labels.
    Gen,
    /// Train one model pair and evaluate it on the test split.
    Train {
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Re-evaluate the best checkpoint of a run on the test split.
    Eval {
        /// Run directory; defaults to the one implied by the config.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Train JSA with each latent sampler and tabulate the results.
    AblateMis,
    /// Run the exact-inference checks on small random instances.
    OracleCheck {
        /// Break the Markov property of the generative factors by this bonus.
        #[arg(long, value_name = "BONUS", num_args = 0..=1, default_missing_value = "1.5")]
        inject_non_markov: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    cli.train.apply(&mut cfg.train)?;
    match cli.command {
        Command::Gen => {
            cfg.validate()?;
            let out = cli.out.unwrap_or_else(|| cfg.data_dir.clone());
            cmd_gen(&cfg, &out)?;
        }
        Command::Train { resume } => {
            cfg.validate()?;
            if let Some(out) = cli.out {
                cfg.out_dir = out;
            }
            let data = load_dataset(&cfg)?;
            cmd_train(&cfg, &data, &cfg.run_dir(), resume)?;
        }
        Command::Eval { run } => {
            if let Some(out) = cli.out {
                cfg.out_dir = out;
            }
            let data = load_dataset(&cfg)?;
            let dir = run.unwrap_or_else(|| cfg.run_dir());
            let row = cmd_eval(&cfg, &data, &dir)?;
            println!("{}", serde_json::to_string_pretty(&row)?);
        }
        Command::AblateMis => {
            cfg.validate()?;
            let out = cli.out.unwrap_or_else(|| cfg.out_dir.clone());
            let data = load_dataset(&cfg)?;
            cmd_ablate_mis(&cfg, &data, &out)?;
        }
        Command::OracleCheck { inject_non_markov } => {
            let report = cmd_oracle_check(cfg.train.seed, inject_non_markov, cli.out.as_deref())?;
            for c in &report.checks {
                println!(
                    "{:<28} {:>12.4e} <= {:<10.3e} {}",
                    c.name,
                    c.value,
                    c.threshold,
                    if c.passed { "pass" } else { "FAIL" }
                );
            }
            if !report.passed {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(CliError::Oracle(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
