use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::probe::{bias_probe, probe_csv, BiasProbe};
use super::run::{run, RunArtifacts};
use super::teacher::load_or_train;
use crate::distill::{Mode, Regularizer, SchedulePolicy};
use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::tensor::Real;

pub const PRESETS: [&str; 6] = ["decompose", "regularizers", "tau-probe", "observer", "schedule-ablation", "alpha-sweep"];

/// Re-noising ranges swept by `tau-probe`, from the noisiest end outwards
/// plus the clean-only collapse case.
pub const TAU_PROBE_RANGES: [(Real, Real); 5] = [(0.0, 0.05), (0.0, 0.25), (0.0, 0.5), (0.0, 1.0), (0.7, 1.0)];

pub const ALPHA_SWEEP: [Real; 4] = [1.0, 2.0, 4.0, 8.0];

/// A named family of runs sharing one teacher.
#[derive(Debug, Clone)]
pub struct ExperimentPreset {
    pub name: &'static str,
    pub base: RunConfig,
    /// `(tag, label, config)` per sweep point, in summary order.
    pub points: Vec<SweepPoint>,
    /// Extra diagnostic run after the sweep.
    pub bias_probe: Option<BiasProbe>,
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    /// Directory-safe identifier.
    pub tag: String,
    /// Row label for the summary table.
    pub label: String,
    pub config: RunConfig,
}

/// Shared starting point for every preset.
pub fn base_config() -> RunConfig {
    RunConfig {
        mode: Mode::FullDmd,
        schedule_policy: SchedulePolicy::CoupledShared,
        alpha: 4.0,
        lambda: 1.0,
        n_steps: 4,
        seed: 0,
        iterations: 5000,
        batch: 256,
        ttur_ratio: 5,
        regularizer: Regularizer::None,
        w_gan: 1e-2,
        w_kl: 300.0,
        kl_mu_target: None,
        kl_var_target: None,
        normalizer_on: true,
        observer_mode: false,
        deterministic_backsim: false,
        tau_ca_range: None,
        tau_dm_range: None,
        gen_lr: 1e-4,
        fake_lr: 1e-4,
        disc_lr: 1e-4,
        eval_every: 100,
        eval_samples: 500,
        dump_samples: true,
        dataset: None,
        teacher_checkpoint: None,
        teacher: None,
        out_dir: None,
    }
}

fn point(tag: impl Into<String>, label: impl Into<String>, config: RunConfig) -> SweepPoint {
    SweepPoint {
        tag: tag.into(),
        label: label.into(),
        config,
    }
}

impl ExperimentPreset {
    /// Builds a preset; overrides are applied to the base before the sweep
    /// axis is set on each point.
    pub fn new(name: &str, overrides: &[String]) -> Result<Self> {
        let name = PRESETS
            .iter()
            .find(|p| **p == name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown preset `{name}`; known: {}", PRESETS.join(", "))))?;
        let mut base = base_config();
        match name {
            "tau-probe" => {
                base.mode = Mode::CaOnly;
                base.n_steps = 1;
            }
            "observer" => {
                base.mode = Mode::CaOnly;
                base.observer_mode = true;
            }
            _ => {}
        }
        let mut base = base.with_overrides(overrides)?;
        base.apply_seed_env()?;

        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        let points = match name {
            "decompose" => [Mode::FullDmd, Mode::CaOnly, Mode::DmOnly]
                .into_iter()
                .map(|m| point(m.name().to_lowercase(), m.name(), with(&|c| c.mode = m)))
                .collect(),
            "regularizers" => [
                ("ca_only", "CA", Regularizer::None),
                ("ca_dm", "CA+DM", Regularizer::Dm),
                ("ca_meanvar_kl", "CA+MEANVAR_KL", Regularizer::MeanvarKl),
                ("ca_gan", "CA+GAN", Regularizer::Gan),
            ]
            .into_iter()
            .map(|(tag, label, r)| {
                point(
                    tag,
                    label,
                    with(&|c| {
                        c.mode = Mode::CaOnly;
                        c.regularizer = r;
                    }),
                )
            })
            .collect(),
            "tau-probe" => TAU_PROBE_RANGES
                .into_iter()
                .map(|r| point(format!("tau_{}_{}", r.0, r.1), format!("tau_ca in [{}..{}]", r.0, r.1), with(&|c| c.tau_ca_range = Some(r))))
                .collect(),
            "observer" => vec![point("ca_observer", "CA+observer", base.clone())],
            "schedule-ablation" => SchedulePolicy::ALL
                .into_iter()
                .map(|p| point(format!("{}_{}", ablation_index(p), p.name()), format!("{} {}", p.marker(), p.name()), with(&|c| c.schedule_policy = p)))
                .collect(),
            "alpha-sweep" => ALPHA_SWEEP
                .into_iter()
                .map(|a| point(format!("alpha_{a}"), format!("alpha={a}"), with(&|c| c.alpha = a)))
                .collect(),
            _ => unreachable!(),
        };
        let bias_probe = (name == "observer").then(BiasProbe::default);
        Ok(ExperimentPreset {
            name,
            base,
            points,
            bias_probe,
        })
    }
}

fn ablation_index(p: SchedulePolicy) -> usize {
    SchedulePolicy::ALL.iter().position(|q| *q == p).expect("listed") + 1
}

/// Outcome of one sweep point.
#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub tag: String,
    pub label: String,
    pub dir: PathBuf,
    pub records: Vec<MetricRecord>,
    /// Abort message when the run stopped early.
    pub aborted: Option<String>,
    pub artifacts: Option<RunArtifacts>,
}

#[derive(Debug, Clone)]
pub struct PresetOutcome {
    pub dir: PathBuf,
    pub points: Vec<PointOutcome>,
    pub summary: PathBuf,
}

#[derive(Serialize)]
struct PresetSnapshot<'a> {
    preset: &'a str,
    points: Vec<(&'a str, &'a str)>,
}

/// Runs every sweep point under `root/<preset>` and writes `summary.csv`.
///
/// The teacher is trained once into `root/<preset>/teacher/teacher.dmdl`
/// unless the base config names a checkpoint. Aborted points are recorded in
/// the summary and do not stop the sweep.
pub fn run_preset(preset: &ExperimentPreset, root: &Path) -> Result<PresetOutcome> {
    let dir = root.join(preset.name);
    std::fs::create_dir_all(&dir)?;
    let spec = preset.base.dataset_spec()?;
    let teacher_path = match &preset.base.teacher_checkpoint {
        Some(p) => p.clone(),
        None => dir.join("teacher").join("teacher.dmdl"),
    };
    let teacher = load_or_train(&teacher_path, &spec, &preset.base.teacher.clone().unwrap_or_default())?;
    let snapshot = PresetSnapshot {
        preset: preset.name,
        points: preset.points.iter().map(|p| (p.tag.as_str(), p.label.as_str())).collect(),
    };
    std::fs::write(dir.join("preset.json"), serde_json::to_string_pretty(&snapshot)? + "\n")?;

    let mut outcomes = Vec::new();
    for p in &preset.points {
        let mut cfg = p.config.clone();
        cfg.teacher_checkpoint = Some(teacher_path.clone());
        let run_dir = dir.join("runs").join(&p.tag);
        log::info!("{}: running {}", preset.name, p.label);
        let outcome = match run(&cfg, &run_dir) {
            Ok(a) => PointOutcome {
                tag: p.tag.clone(),
                label: p.label.clone(),
                dir: run_dir,
                records: a.records.clone(),
                aborted: None,
                artifacts: Some(a),
            },
            Err(Error::TrainingAborted { message, .. }) => {
                log::warn!("{}: {} aborted: {message}", preset.name, p.label);
                let records = super::run::read_metrics(&run_dir.join("metrics.csv")).unwrap_or_default();
                PointOutcome {
                    tag: p.tag.clone(),
                    label: p.label.clone(),
                    dir: run_dir,
                    records,
                    aborted: Some(message),
                    artifacts: None,
                }
            }
            Err(e) => return Err(e),
        };
        outcomes.push(outcome);
    }

    if let Some(probe) = &preset.bias_probe {
        let mut probe = probe.clone();
        probe.batch = preset.base.batch;
        probe.fake_lr = preset.base.fake_lr;
        let report = bias_probe(&teacher, &spec, &probe, preset.base.seed)?;
        std::fs::write(dir.join("bias_probe.csv"), probe_csv(&report))?;
    }

    let summary = dir.join("summary.csv");
    write_summary(&summary, &outcomes)?;
    Ok(PresetOutcome {
        dir,
        points: outcomes,
        summary,
    })
}

pub const SUMMARY_HEADER: &str =
    "tag,label,status,updates,final_sw2,min_sw2,final_mean_of_vars,max_mean_of_vars,final_mode_coverage";

fn write_summary(path: &Path, outcomes: &[PointOutcome]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{SUMMARY_HEADER}")?;
    for o in outcomes {
        let last = o.records.last();
        let fmt = |v: Option<Real>| v.map(|x| x.to_string()).unwrap_or_default();
        let min_sw = o.records.iter().map(|r| r.sw2).reduce(Real::min);
        let max_var = o.records.iter().map(|r| r.mean_of_vars).reduce(Real::max);
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            o.tag,
            o.label,
            if o.aborted.is_some() { "aborted" } else { "completed" },
            last.map(|r| r.iteration).unwrap_or(0),
            fmt(last.map(|r| r.sw2)),
            fmt(min_sw),
            fmt(last.map(|r| r.mean_of_vars)),
            fmt(max_var),
            fmt(last.map(|r| r.mode_coverage)),
        )?;
    }
    Ok(())
}
