//! Experiment runner: JSON run configs, presets, artifact directories and
//! SVG plots.
//!
//! A run directory holds `config.json` (a complete, re-runnable snapshot),
//! `metrics.csv`, per-evaluation sample dumps under `samples/`, final
//! checkpoints and `manifest.json`, the only file with wall-clock content.

mod config;
mod plot;
mod preset;
mod probe;
mod run;
mod teacher;

pub use config::{seed_from_env, RunConfig, SEED_ENV};
pub use plot::{line_chart, plot_dir, scatter_plot, Series};
pub use preset::{base_config, run_preset, ExperimentPreset, PointOutcome, PresetOutcome, SweepPoint, ALPHA_SWEEP, PRESETS, SUMMARY_HEADER, TAU_PROBE_RANGES};
pub use probe::{bias_probe, probe_csv, BiasProbe, BiasProbeReport, PROBE_HEADER};
pub use run::{default_out_dir, read_metrics, resolve_teacher, run, RunArtifacts};
pub use teacher::{evaluate_teacher, load_or_train, run_teacher_job, TeacherJob, TeacherReport};
