use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::parse_keyed;
use crate::checkpoint;
use crate::data::{sample_label, MixtureSpec};
use crate::error::Result;
use crate::flowsim::{loss_log_csv, sample_teacher, train_teacher, TeacherConfig};
use crate::metrics::{mode_coverage, random_projections, sliced_wasserstein2_with};
use crate::nn::{Cond, NetParams};
use crate::rng::{self, stream};
use crate::tensor::Real;

/// Config file for `lab train-teacher`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherJob {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub teacher: TeacherConfig,
    pub out_dir: PathBuf,
    /// Sampler steps used for the quality report.
    #[serde(default = "default_eval_steps")]
    pub eval_steps: usize,
    /// Points per label for the quality report.
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
}

fn default_eval_steps() -> usize {
    50
}

fn default_eval_points() -> usize {
    2500
}

impl TeacherJob {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        parse_keyed(&std::fs::read_to_string(path)?)
    }

    pub fn dataset_spec(&self) -> Result<MixtureSpec> {
        match &self.dataset {
            Some(p) => MixtureSpec::load(p),
            None => Ok(MixtureSpec::gmm8()),
        }
    }
}

/// How closely a teacher's guided sampler reproduces the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    /// Label-averaged sliced W2 between sampler output and data.
    pub sw2: Real,
    /// Label-averaged sliced W2 between two independent data draws.
    pub noise_floor: Real,
    /// Fraction of all mixture components hit by the sampler.
    pub mode_coverage: Real,
    pub modes_hit: usize,
    pub modes_total: usize,
    pub steps: usize,
    pub points_per_label: usize,
}

impl TeacherReport {
    /// Sampler within twice the data noise floor and at least 7/8 of modes hit.
    pub fn passes_gate(&self) -> bool {
        self.sw2 <= 2.0 * self.noise_floor && self.mode_coverage >= 7.0 / 8.0
    }
}

/// Compares `steps`-step unguided samples against fresh data, label by label.
pub fn evaluate_teacher(teacher: &NetParams, spec: &MixtureSpec, steps: usize, points_per_label: usize, seed: u64) -> Result<TeacherReport> {
    let mut r = rng::seeded(seed, stream::EVAL);
    let proj = random_projections(spec.dim, crate::metrics::DEFAULT_PROJECTIONS, &mut r);
    let (mut sw, mut floor, mut hit, mut total) = (0.0, 0.0, 0usize, 0usize);
    let labels = spec.label_count as Real;
    for l in 0..spec.label_count {
        let a = sample_label(spec, l, points_per_label, &mut r)?;
        let b = sample_label(spec, l, points_per_label, &mut r)?;
        let g = sample_teacher(teacher, steps, 1.0, Cond::Label(l), points_per_label, spec.dim, &mut r)?;
        sw += sliced_wasserstein2_with(&g, &a, &proj)? / labels;
        floor += sliced_wasserstein2_with(&b, &a, &proj)? / labels;
        let k = spec.components_of(l).len();
        hit += (mode_coverage(&g, spec, l, 3.0)? * k as Real).round() as usize;
        total += k;
    }
    Ok(TeacherReport {
        sw2: sw,
        noise_floor: floor,
        mode_coverage: hit as Real / total.max(1) as Real,
        modes_hit: hit,
        modes_total: total,
        steps,
        points_per_label,
    })
}

/// Trains, saves `teacher.dmdl`, the loss log, the config and a quality report.
pub fn run_teacher_job(job: &TeacherJob) -> Result<(NetParams, TeacherReport)> {
    let spec = job.dataset_spec()?;
    std::fs::create_dir_all(&job.out_dir)?;
    let (teacher, log) = train_teacher(&spec, &job.teacher)?;
    checkpoint::save(job.out_dir.join("teacher.dmdl"), &teacher)?;
    std::fs::write(job.out_dir.join("teacher_loss.csv"), loss_log_csv(&log))?;
    std::fs::write(job.out_dir.join("teacher_config.json"), serde_json::to_string_pretty(job)? + "\n")?;
    let report = evaluate_teacher(&teacher, &spec, job.eval_steps, job.eval_points, job.teacher.seed)?;
    std::fs::write(job.out_dir.join("teacher_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok((teacher, report))
}

/// Loads the checkpoint when it exists, otherwise trains and saves it there.
pub fn load_or_train(path: &Path, spec: &MixtureSpec, config: &TeacherConfig) -> Result<NetParams> {
    if path.exists() {
        return checkpoint::load(path);
    }
    log::info!("training teacher for {} iterations into {}", config.iterations, path.display());
    let (teacher, log) = train_teacher(spec, config)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    checkpoint::save(path, &teacher)?;
    std::fs::write(path.with_extension("loss.csv"), loss_log_csv(&log))?;
    Ok(teacher)
}
