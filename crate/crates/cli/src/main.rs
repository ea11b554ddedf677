//! Command-line front end for desk-scale transducer experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rnnt_core::workbench::config::{ExperimentConfig, SweepSection};
use rnnt_core::workbench::experiment::{
    read_report, render_report, run_experiment, score_nbest_file, stage_decode, stage_generate, stage_rescore, stage_score, stage_train, verify, RunLayout, RunStatus,
};
use rnnt_core::Error;

#[derive(Parser)]
#[command(name = "rnnt-workbench", version, about = "Train, decode, fuse and score RNN-Transducers on synthetic tasks")]
struct Cli {
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding all artifacts of one experiment.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Experiment config (TOML). Defaults to <run-dir>/config.toml, then to
    /// the built-in reference experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Plain synthetic task, additive and multiplicative joints.
    Reference,
    /// Domain-shift task with source and external LMs.
    Fusion,
    /// Reference task plus the optimizer x schedule sweep.
    Sweep,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset config as TOML.
    Config {
        #[arg(value_enum, default_value = "reference")]
        preset: Preset,
    },
    /// Generate the synthetic dataset into the run directory.
    Generate,
    /// Train every transducer (and the LMs for domain-shift runs).
    Train,
    /// Beam-decode dev and test with every trained transducer.
    Decode,
    /// Tune fusion and combination weights on dev, rescore dev and test.
    Rescore,
    /// Score the rescored lists and write the report. With --nbest and
    /// --reference, score that pair of files instead.
    Score {
        #[arg(long, requires = "reference")]
        nbest: Option<PathBuf>,
        #[arg(long, requires = "nbest")]
        reference: Option<PathBuf>,
    },
    /// Recompute every reported WER from the stored files.
    Verify,
    /// Print the report.
    Report {
        /// Print the raw JSON document.
        #[arg(long)]
        json: bool,
    },
    /// Run every stage.
    Run,
}

fn preset(p: Preset) -> ExperimentConfig {
    match p {
        Preset::Reference => ExperimentConfig::default(),
        Preset::Fusion => ExperimentConfig::fusion_reference(),
        Preset::Sweep => {
            let mut c = ExperimentConfig {
                optimizer_sweep: Some(SweepSection::default()),
                ..ExperimentConfig::default()
            };
            c.experiment.name = "sweep".into();
            c
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let stored = cli.run_dir.join("config.toml");
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if stored.exists() => ExperimentConfig::load(&stored)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Records the resolved config so later stages see the same settings.
fn store_config(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<(), Error> {
    layout.create()?;
    std::fs::write(layout.config(), cfg.to_toml()?)?;
    Ok(())
}

enum Outcome {
    Ok,
    /// Stored artifacts disagree with the report.
    Invalid(String),
    /// A stage failed; the partial report is on disk.
    Failed(String),
}

fn execute(cli: &Cli) -> Result<Outcome, Error> {
    let layout = RunLayout::new(&cli.run_dir);
    match &cli.command {
        Command::Config { preset: p } => {
            print!("{}", preset(*p).to_toml()?);
        }
        Command::Generate => {
            let cfg = load_config(cli)?;
            store_config(&cfg, &layout)?;
            stage_generate(&cfg, &layout)?;
            println!("wrote dataset to {}", layout.data().display());
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            store_config(&cfg, &layout)?;
            for m in stage_train(&cfg, &layout)? {
                match &m.aborted {
                    Some(a) => println!("{}: aborted ({a})", m.name),
                    None => println!("{}: trained", m.name),
                }
            }
        }
        Command::Decode => {
            let cfg = load_config(cli)?;
            stage_decode(&cfg, &layout)?;
            println!("wrote n-best lists to {}", layout.root().join("nbest").display());
        }
        Command::Rescore => {
            let cfg = load_config(cli)?;
            for s in stage_rescore(&cfg, &layout)? {
                println!("{:<36} dev WER {:6.2}%  {:?}", s.name, 100.0 * s.dev_tuning_wer, s.weights);
            }
        }
        Command::Score { nbest, reference } => match (nbest, reference) {
            (Some(n), Some(r)) => {
                let c = score_nbest_file(n, r)?;
                println!(
                    "WER {:.2}% ({} errors / {} words: {} sub, {} del, {} ins)",
                    100.0 * c.rate(),
                    c.errors(),
                    c.reference_length,
                    c.substitutions,
                    c.deletions,
                    c.insertions
                );
            }
            _ => {
                let cfg = load_config(cli)?;
                print!("{}", render_report(&stage_score(&cfg, &layout)?));
            }
        },
        Command::Verify => {
            let v = verify(&layout)?;
            if !v.mismatches.is_empty() {
                return Ok(Outcome::Invalid(v.mismatches.join("\n")));
            }
            println!("verified {} WER values", v.checked);
        }
        Command::Report { json } => {
            if *json {
                print!("{}", std::fs::read_to_string(layout.report())?);
            } else {
                print!("{}", render_report(&read_report(&layout)?));
            }
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let report = run_experiment(&cfg, &layout)?;
            print!("{}", render_report(&report));
            if report.status == RunStatus::Failed {
                return Ok(Outcome::Failed(format!(
                    "stage {} failed: {}",
                    report.failed_stage.unwrap_or_default(),
                    report.error.unwrap_or_default()
                )));
            }
        }
    }
    Ok(Outcome::Ok)
}

fn is_validation(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Ingest(_) | Error::Checkpoint(_) | Error::Vocabulary { .. })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Invalid(msg)) => {
            eprintln!("verification failed:\n{msg}");
            ExitCode::from(1)
        }
        Ok(Outcome::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) if is_validation(&e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
