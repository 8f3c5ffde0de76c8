//! `bgslot`: generate synthetic data, train, evaluate and run the experiment
//! suites.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for numeric
//! failures during training, 1 for anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bgslot_core::runner::{
    emit_report, evaluate_checkpoint, run_suite, train, EvalMode, ExperimentData, ReportBundle, Suite, TrainConfig,
    EVAL_SEED,
};
use bgslot_core::scenegen::{generate_sequence, read_dataset, spec_family, write_dataset};
use bgslot_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bgslot", version, about = "Motion-guided object discovery with a background slot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        /// Scene preset: easy, urban-toy or desk.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        num_seqs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a preset training configuration as JSON.
    Config {
        #[arg(long)]
        preset: String,
    },
    /// Train one model and evaluate it.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key.path=value`, applied before validation. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// windowed or per_frame.
        #[arg(long, default_value = "windowed")]
        mode: String,
        /// Window length; defaults to the clip length the model was trained with.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment suite over several seeds and write its report.
    Ablate {
        /// table5 (objective ablation and baseline) or table6 (label noise).
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Regenerate report files from a suite's report.json.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidSpec(_) => 2,
        Error::Numeric { .. } => 3,
        _ => 1,
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Error> {
    serde_json::to_string_pretty(value).map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate {
            preset,
            num_seqs,
            seed,
            out,
        } => {
            let scene = TrainConfig::preset(&preset)?.data.scene;
            let samples = spec_family(&scene, num_seqs, seed)
                .iter()
                .map(generate_sequence)
                .collect::<Result<Vec<_>, _>>()?;
            let manifest = write_dataset(&samples, &out)?;
            println!("wrote {} sequences to {}", manifest.num_sequences, out.display());
        }
        Command::Config { preset } => println!("{}", to_json(&TrainConfig::preset(&preset)?)?),
        Command::Train { config, overrides } => {
            let config = TrainConfig::from_file(&config, &overrides)?;
            let result = train(&config)?;
            if let Some(ckpt) = &result.checkpoint {
                eprintln!("checkpoint: {}", ckpt.display());
            }
            eprintln!("trained {} steps in {:.1}s", config.steps, result.wall_clock_secs);
            println!("{}", to_json(&result.report)?);
        }
        Command::Eval {
            ckpt,
            data,
            mode,
            window,
            out,
        } => {
            let mode: EvalMode = mode.parse()?;
            let data = read_dataset(&data)?;
            let report = evaluate_checkpoint(&ckpt, &data, mode, window, EVAL_SEED)?;
            write(&out, &to_json(&report)?)?;
            println!(
                "fg_ari {:.4}  all_ari {:.4}  j_fg {:.4}  j_bg {:.4}",
                report.fg_ari, report.all_ari, report.jaccard_fg, report.jaccard_bg
            );
        }
        Command::Ablate {
            suite,
            config,
            out,
            seeds,
            overrides,
        } => {
            let suite: Suite = suite.parse()?;
            let base = TrainConfig::from_file(&config, &overrides)?;
            let data = ExperimentData::load(&base)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let bundle = run_suite(suite, &base, &data, &seeds, Some(&out))?;
            emit_report(&bundle, &out)?;
            for row in &bundle.summary {
                println!(
                    "{:<20} fg_ari {:.4}  all_ari {:.4}  j_fg {:.4}  j_bg {:.4}",
                    row.name, row.fg_ari, row.all_ari, row.jaccard_fg, row.jaccard_bg
                );
            }
        }
        Command::Report { input, out } => {
            let bundle = ReportBundle::read(&input)?;
            let written = emit_report(&bundle, &out)?;
            println!("wrote {} files to {}", written.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
