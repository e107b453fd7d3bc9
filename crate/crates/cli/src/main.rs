use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmdlab::lab::{self, ExperimentPreset, RunConfig, TeacherJob};
use dmdlab::Error;

/// Desk-scale distribution matching distillation lab.
#[derive(Parser)]
#[command(name = "lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a conditional flow-matching teacher and report its quality.
    TrainTeacher { config: PathBuf },
    /// Run one distillation experiment from a JSON config.
    Run {
        config: PathBuf,
        /// Artifact directory; defaults to the config's `out_dir` or runs/<config stem>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named experiment sweep.
    Preset {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(lab::PRESETS))]
        name: String,
        /// `key=value` applied to the base config; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Root directory; the sweep writes into <out>/<name>.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Render SVG plots for a run or preset directory.
    Plot { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::TrainingAborted { .. } => 3,
        Error::PlotInput(_) => 4,
        _ => 1,
    }
}

fn execute(command: Command) -> dmdlab::Result<()> {
    match command {
        Command::TrainTeacher { config } => {
            let mut job = TeacherJob::load(&config)?;
            if let Some(seed) = lab::seed_from_env()? {
                job.teacher.seed = seed;
            }
            let (_, report) = lab::run_teacher_job(&job)?;
            println!(
                "teacher written to {}: sw2 {:.5} (noise floor {:.5}), modes {}/{}, gate {}",
                job.out_dir.join("teacher.dmdl").display(),
                report.sw2,
                report.noise_floor,
                report.modes_hit,
                report.modes_total,
                if report.passes_gate() { "passed" } else { "FAILED" }
            );
        }
        Command::Run { config, out } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_seed_env()?;
            let dir = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| lab::default_out_dir(&config));
            let artifacts = lab::run(&cfg, &dir)?;
            if let Some(last) = artifacts.records.last() {
                println!(
                    "{}: {} updates, sw2 {:.5}, mean variance {:.5}, coverage {:.3}",
                    dir.display(),
                    last.iteration,
                    last.sw2,
                    last.mean_of_vars,
                    last.mode_coverage
                );
            }
        }
        Command::Preset { name, overrides, out } => {
            let preset = ExperimentPreset::new(&name, &overrides)?;
            let outcome = lab::run_preset(&preset, &out)?;
            print!("{}", std::fs::read_to_string(&outcome.summary)?);
            println!("summary written to {}", outcome.summary.display());
        }
        Command::Plot { dir } => {
            for p in lab::plot_dir(&dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
