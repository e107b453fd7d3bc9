use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::config::RunConfig;
use super::teacher::load_or_train;
use crate::checkpoint;
use crate::data::{sample_label, MixtureSpec};
use crate::distill::{generate, generator_update, DistillState, StepStats};
use crate::error::{Error, Result};
use crate::flowsim::train_teacher;
use crate::metrics::{batch_sample_stats, mode_coverage, random_projections, sliced_wasserstein2_with, MetricRecord, DEFAULT_PROJECTIONS};
use crate::nn::{Cond, NetParams};
use crate::rng::{self, stream};
use crate::tensor::{Real, Tensor};

/// Files produced by one run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub samples: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub records: Vec<MetricRecord>,
}

/// Held-out data and projections shared by every evaluation of a run.
struct Evaluator {
    heldout: Vec<Tensor>,
    projections: Vec<Vec<Real>>,
    seed: u64,
    per_label: usize,
}

impl Evaluator {
    fn new(spec: &MixtureSpec, per_label: usize, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed, stream::DATA);
        let heldout = (0..spec.label_count)
            .map(|l| sample_label(spec, l, per_label, &mut r))
            .collect::<Result<_>>()?;
        let projections = random_projections(spec.dim, DEFAULT_PROJECTIONS, &mut r);
        Ok(Evaluator {
            heldout,
            projections,
            seed,
            per_label,
        })
    }

    /// Generated points per label, from the same noise at every evaluation.
    fn samples(&self, state: &DistillState) -> Result<Vec<Tensor>> {
        let mut r = rng::seeded(self.seed, stream::EVAL);
        let grid = state.grid();
        (0..self.heldout.len())
            .map(|l| {
                generate(
                    &state.generator,
                    &grid,
                    &vec![Cond::Label(l); self.per_label],
                    state.config.deterministic_backsim,
                    &mut r,
                )
            })
            .collect()
    }

    fn record(&self, spec: &MixtureSpec, samples: &[Tensor], iteration: usize, window: &Window) -> Result<MetricRecord> {
        let labels = samples.len() as Real;
        let (mut sw2, mut cov, mut means, mut vars, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for (l, s) in samples.iter().enumerate() {
            s.check_finite("generated samples")?;
            sw2 += sliced_wasserstein2_with(s, &self.heldout[l], &self.projections)? / labels;
            cov += mode_coverage(s, spec, l, 3.0)? / labels;
            if spec.dim >= 2 {
                let (m, v) = batch_sample_stats(s)?;
                means += m.iter().sum::<Real>();
                vars += v.iter().sum::<Real>();
                n += m.len();
            }
        }
        let n = n.max(1) as Real;
        let w = window.count.max(1) as Real;
        Ok(MetricRecord {
            iteration,
            sw2,
            mean_of_means: means / n,
            mean_of_vars: vars / n,
            mode_coverage: cov,
            loss_proxy: window.loss_proxy / w,
            loss_fake: window.loss_fake / w,
            loss_reg: window.loss_reg / w,
            tau_ca: window.tau_ca / w,
            tau_dm: window.tau_dm / w,
            t: window.t / w,
        })
    }
}

/// Running sums of step statistics between evaluations.
#[derive(Default)]
struct Window {
    count: usize,
    loss_proxy: Real,
    loss_fake: Real,
    loss_reg: Real,
    tau_ca: Real,
    tau_dm: Real,
    t: Real,
}

impl Window {
    fn push(&mut self, s: &StepStats) {
        self.count += 1;
        self.loss_proxy += s.loss_proxy;
        self.loss_fake += s.loss_fake;
        self.loss_reg += s.loss_reg;
        self.tau_ca += s.tau_ca;
        self.tau_dm += s.tau_dm;
        self.t += s.t;
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    crate_version: &'a str,
    started_unix: u64,
    finished_unix: u64,
    elapsed_seconds: f64,
    status: &'a str,
    teacher: Option<String>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Where a run writes when its config names no directory.
pub fn default_out_dir(config_path: &Path) -> PathBuf {
    let stem = config_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    PathBuf::from("runs").join(stem)
}

fn write_samples(path: &Path, samples: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dim = samples.first().map(|s| s.cols()).unwrap_or(0);
    let header: Vec<String> = std::iter::once("label".to_string()).chain((0..dim).map(|j| format!("x{j}"))).collect();
    writeln!(w, "{}", header.join(","))?;
    for (l, s) in samples.iter().enumerate() {
        for i in 0..s.rows() {
            write!(w, "{l}")?;
            for v in s.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Resolves the teacher for a run.
pub fn resolve_teacher(config: &RunConfig, spec: &MixtureSpec, dir: &Path) -> Result<(NetParams, PathBuf)> {
    let tcfg = config.teacher.clone().unwrap_or_default();
    match &config.teacher_checkpoint {
        Some(p) => Ok((load_or_train(p, spec, &tcfg)?, p.clone())),
        None => {
            let path = dir.join("teacher.dmdl");
            let (teacher, log) = train_teacher(spec, &tcfg)?;
            checkpoint::save(&path, &teacher)?;
            std::fs::write(dir.join("teacher_loss.csv"), crate::flowsim::loss_log_csv(&log))?;
            Ok((teacher, path))
        }
    }
}

/// Executes one distillation run into `dir`.
///
/// Everything except `manifest.json` is a function of the config alone.
/// A non-finite update or metric stops the run, leaves the metrics written
/// so far in place and dumps the current networks under `abort/`.
pub fn run(config: &RunConfig, dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    let started = unix_now();
    let clock = Instant::now();
    std::fs::create_dir_all(dir)?;
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, config.to_json())?;
    let spec = config.dataset_spec()?;
    let (teacher, teacher_path) = resolve_teacher(config, &spec, dir)?;

    let result = distill_loop(config, &spec, &teacher, dir);
    let status = match &result {
        Ok(_) => "completed".to_string(),
        Err(e) => format!("failed: {e}"),
    };
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: unix_now(),
        elapsed_seconds: clock.elapsed().as_secs_f64(),
        status: &status,
        teacher: Some(teacher_path.display().to_string()),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let (records, checkpoints) = result?;
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        config: config_path,
        metrics: dir.join("metrics.csv"),
        samples: config.dump_samples.then(|| dir.join("samples")),
        checkpoints,
        records,
    })
}

type LoopOutput = (Vec<MetricRecord>, Vec<PathBuf>);

fn distill_loop(config: &RunConfig, spec: &MixtureSpec, teacher: &NetParams, dir: &Path) -> Result<LoopOutput> {
    let mut state = DistillState::new(teacher, spec, config.distill_config(), config.seed)?;
    let eval = Evaluator::new(spec, config.eval_samples, config.seed)?;
    let samples_dir = dir.join("samples");
    if config.dump_samples {
        std::fs::create_dir_all(&samples_dir)?;
    }
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    writeln!(metrics, "{}", MetricRecord::CSV_HEADER)?;
    metrics.flush()?;

    let mut records = Vec::new();
    let mut window = Window::default();
    for it in 1..=config.iterations {
        let stats = match generator_update(&mut state, teacher) {
            Ok(s) => s,
            Err(e @ Error::NonFinite(_)) => return Err(abort(dir, &state, e)),
            Err(e) => return Err(e),
        };
        window.push(&stats);
        if it % config.eval_every == 0 || it == config.iterations {
            let samples = eval.samples(&state);
            let record = samples.and_then(|s| eval.record(spec, &s, it, &window).map(|r| (s, r)));
            let (samples, record) = match record {
                Ok(ok) if ok.1.is_finite() => ok,
                Ok(_) => return Err(abort(dir, &state, Error::NonFinite(format!("metrics at update {it}")))),
                Err(e @ (Error::NonFinite(_) | Error::InvalidArgument(_))) => return Err(abort(dir, &state, e)),
                Err(e) => return Err(e),
            };
            writeln!(metrics, "{}", record.csv_row())?;
            metrics.flush()?;
            if config.dump_samples {
                write_samples(&samples_dir.join(format!("iter_{it:06}.csv")), &samples)?;
            }
            log::debug!("update {it}: sw2 {:.4} var {:.4}", record.sw2, record.mean_of_vars);
            records.push(record);
            window = Window::default();
        }
    }
    let mut checkpoints = vec![dir.join("generator.dmdl"), dir.join("fake.dmdl")];
    checkpoint::save(&checkpoints[0], &state.generator)?;
    checkpoint::save(&checkpoints[1], &state.fake)?;
    if let Some(d) = &state.discriminator {
        let p = dir.join("discriminator.dmdl");
        checkpoint::save(&p, d)?;
        checkpoints.push(p);
    }
    Ok((records, checkpoints))
}

#[derive(Serialize)]
struct AbortInfo {
    iteration: u64,
    message: String,
}

fn abort(dir: &Path, state: &DistillState, cause: Error) -> Error {
    let dump = dir.join("abort");
    let message = cause.to_string();
    let written = (|| -> Result<()> {
        std::fs::create_dir_all(&dump)?;
        checkpoint::save(dump.join("generator.dmdl"), &state.generator)?;
        checkpoint::save(dump.join("fake.dmdl"), &state.fake)?;
        let info = AbortInfo {
            iteration: state.iteration,
            message: message.clone(),
        };
        std::fs::write(dump.join("abort.json"), serde_json::to_string_pretty(&info)? + "\n")?;
        Ok(())
    })();
    if let Err(e) = written {
        log::error!("could not write abort dump: {e}");
    }
    Error::TrainingAborted { message, dump }
}

/// Reads a `metrics.csv` back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MetricRecord::CSV_HEADER => {}
        _ => return Err(Error::PlotInput(format!("{} has no metrics header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricRecord::parse_csv_row).collect()
}
