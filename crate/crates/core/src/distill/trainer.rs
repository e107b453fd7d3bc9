use rand::Rng;
use serde::{Deserialize, Serialize};

use super::direction::{dmd_direction_coupled, dmd_direction_decoupled, proxy_loss_and_grad, UpdateDirection};
use super::regularizer::{gan_losses, meanvar_kl_loss_per_sample};
use super::schedule::{step_grid, ScheduleConfig};
use crate::data::{per_sample_targets, MixtureSpec, RegularizerTargets};
use crate::error::{Error, Result};
use crate::flowsim::{denoise_loss, renoise};
use crate::nn::{Cond, NetConfig, NetParams};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, stream, LabRng};
use crate::tensor::{Real, Tensor};

/// Which components of the decomposed direction drive the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// `delta_dm + delta_ca`.
    FullDmd,
    /// `delta_ca` only.
    CaOnly,
    /// `delta_dm` only, at the configured guidance scale.
    DmOnly,
    /// `delta_dm` only; the guidance term is dropped as if `alpha = 1`.
    TheoryDmd,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::FullDmd => "FULL_DMD",
            Mode::CaOnly => "CA_ONLY",
            Mode::DmOnly => "DM_ONLY",
            Mode::TheoryDmd => "THEORY_DMD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regularizer {
    None,
    /// Adds the distribution-matching term; turns `CA_ONLY` into the full objective.
    Dm,
    MeanvarKl,
    Gan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub alpha: Real,
    pub lambda: Real,
    pub n_steps: usize,
    pub ttur_ratio: usize,
    pub mode: Mode,
    pub regularizer: Regularizer,
    pub w_gan: Real,
    pub w_kl: Real,
    /// Global KL targets; per-label analytic targets when absent.
    pub kl_targets: Option<RegularizerTargets>,
    pub normalizer_on: bool,
    /// Train the fake model under `CA_ONLY` without using it.
    pub observer_mode: bool,
    /// Deterministic Euler interpolation instead of fresh-noise re-noising
    /// during backward simulation.
    pub deterministic_backsim: bool,
    pub batch: usize,
    pub gen_lr: Real,
    pub fake_lr: Real,
    pub disc_lr: Real,
    pub schedule: ScheduleConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 4.0,
            lambda: 1.0,
            n_steps: 1,
            ttur_ratio: 5,
            mode: Mode::FullDmd,
            regularizer: Regularizer::None,
            w_gan: 1e-2,
            w_kl: 300.0,
            kl_targets: None,
            normalizer_on: true,
            observer_mode: false,
            deterministic_backsim: false,
            batch: 256,
            gen_lr: 1e-4,
            fake_lr: 1e-4,
            disc_lr: 1e-4,
            schedule: ScheduleConfig::new(super::schedule::SchedulePolicy::CoupledShared),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda {} must be finite and > 0", self.lambda)));
        }
        step_grid(self.n_steps)?;
        if self.batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        for (name, v) in [("gen_lr", self.gen_lr), ("fake_lr", self.fake_lr), ("disc_lr", self.disc_lr)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} {v} must be finite and > 0")));
            }
        }
        for (name, v) in [("w_gan", self.w_gan), ("w_kl", self.w_kl)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} {v} must be finite and >= 0")));
            }
        }
        if let Some(t) = self.kl_targets {
            if !(t.var_target > 0.0) {
                return Err(Error::invalid("kl target variance must be > 0"));
            }
        }
        self.schedule.validate()
    }

    /// Mode after folding in a `DM` regularizer.
    pub fn effective_mode(&self) -> Mode {
        match (self.mode, self.regularizer) {
            (Mode::CaOnly, Regularizer::Dm) => Mode::FullDmd,
            (m, _) => m,
        }
    }

    /// Whether the fake model is trained at all.
    pub fn trains_fake(&self) -> bool {
        self.effective_mode() != Mode::CaOnly || self.observer_mode
    }
}

/// Everything mutated by the training loop.
///
/// Each consumer of randomness owns its own stream, so the fake and
/// discriminator updates never shift the generator's draws.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub generator: NetParams,
    pub fake: NetParams,
    pub discriminator: Option<NetParams>,
    pub gen_adam: AdamState,
    pub fake_adam: AdamState,
    pub disc_adam: Option<AdamState>,
    pub iteration: u64,
    pub gen_rng: LabRng,
    pub fake_rng: LabRng,
    pub disc_rng: LabRng,
    pub config: DistillConfig,
    spec: MixtureSpec,
    kl_targets: Vec<RegularizerTargets>,
}

impl DistillState {
    /// Generator and fake model start as copies of the teacher.
    pub fn new(teacher: &NetParams, spec: &MixtureSpec, config: DistillConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let tc = teacher.config();
        if tc.data_dim != spec.dim || tc.label_count != spec.label_count {
            return Err(Error::invalid("teacher does not match the dataset dimension or labels"));
        }
        let (discriminator, disc_adam) = if config.regularizer == Regularizer::Gan {
            let mut init = rng::seeded(seed, stream::INIT);
            let d = NetParams::init(NetConfig::discriminator(spec.dim, spec.label_count), &mut init)?;
            let a = AdamState::new(&d, AdamConfig::with_lr(config.disc_lr));
            (Some(d), Some(a))
        } else {
            (None, None)
        };
        let kl_targets = (0..spec.label_count)
            .map(|l| match config.kl_targets {
                Some(t) => Ok(t),
                None => per_sample_targets(spec, l),
            })
            .collect::<Result<_>>()?;
        Ok(DistillState {
            generator: teacher.clone(),
            fake: teacher.clone(),
            discriminator,
            gen_adam: AdamState::new(teacher, AdamConfig::with_lr(config.gen_lr)),
            fake_adam: AdamState::new(teacher, AdamConfig::with_lr(config.fake_lr)),
            disc_adam,
            iteration: 0,
            gen_rng: rng::seeded(seed, stream::GENERATOR),
            fake_rng: rng::seeded(seed, stream::FAKE),
            disc_rng: rng::seeded(seed, stream::DISCRIMINATOR),
            config,
            spec: spec.clone(),
            kl_targets,
        })
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn grid(&self) -> Vec<Real> {
        step_grid(self.config.n_steps).expect("validated at construction")
    }
}

/// Summary of one generator update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub t: Real,
    pub tau_ca: Real,
    pub tau_dm: Real,
    /// Proxy loss per sample.
    pub loss_proxy: Real,
    /// Mean denoising loss over this update's fake steps; `0` when skipped.
    pub loss_fake: Real,
    /// Weighted regularizer loss.
    pub loss_reg: Real,
    pub disc_loss: Option<Real>,
    pub mean_abs_dm: Real,
    pub mean_abs_ca: Real,
}

/// Noise at `grid[step]` for a generator that has already run the earlier
/// steps.
///
/// `step = 0` returns fresh standard-normal noise. Every intermediate
/// generator call is gradient-free.
pub fn backward_simulate(
    generator: &NetParams,
    grid: &[Real],
    step: usize,
    cond: &[Cond],
    deterministic: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if step >= grid.len() {
        return Err(Error::invalid(format!("step {step} outside a {}-step grid", grid.len())));
    }
    let (n, d) = (cond.len(), generator.config().data_dim);
    let mut z = rng::normal_tensor(rng, n, d);
    for j in 0..step {
        let (t, next) = (grid[j], grid[j + 1]);
        let x_hat = generator.forward(&z, &vec![t; n], cond)?;
        z = if deterministic {
            let k = (next - t) / (1.0 - t);
            z.zip_map(&x_hat, "backsim", |zv, xv| zv + k * (xv - zv))?
        } else {
            let eps = rng::normal_tensor(rng, n, d);
            renoise(&x_hat, &vec![next; n], &eps)?
        };
    }
    Ok(z)
}

/// Runs all generator steps and returns the final prediction.
pub fn generate(
    generator: &NetParams,
    grid: &[Real],
    cond: &[Cond],
    deterministic: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let last = grid
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::invalid("empty step grid"))?;
    let z = backward_simulate(generator, grid, last, cond, deterministic, rng)?;
    generator.forward(&z, &vec![grid[last]; cond.len()], cond)
}

/// One denoising step of the fake model toward the generator's samples.
///
/// Draws `tau' ~ U(0, 1)` and a noise tensor from the state's fake stream.
pub fn fake_model_update(state: &mut DistillState, gen_samples: &Tensor, cond: &[Cond]) -> Result<Real> {
    let (n, d) = (gen_samples.rows(), gen_samples.cols());
    let tau: Vec<Real> = (0..n).map(|_| state.fake_rng.random::<Real>()).collect();
    let eps = rng::normal_tensor(&mut state.fake_rng, n, d);
    let (loss, grads) = denoise_loss(&state.fake, gen_samples, &tau, &eps, cond)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("fake model loss".into()));
    }
    state.fake_adam.step(&mut state.fake, &grads)?;
    Ok(loss)
}

fn mean_abs(t: &Tensor) -> Real {
    if t.is_empty() {
        0.0
    } else {
        t.data().iter().map(|v| v.abs()).sum::<Real>() / t.len() as Real
    }
}

fn sample_conds(spec: &MixtureSpec, n: usize, rng: &mut impl Rng) -> Vec<Cond> {
    (0..n).map(|_| Cond::Label(spec.sample_label(rng))).collect()
}

/// One generator update followed by the fake-model (and discriminator)
/// updates.
pub fn generator_update(state: &mut DistillState, teacher: &NetParams) -> Result<StepStats> {
    let cfg = state.config.clone();
    let grid = state.grid();
    let b = cfg.batch;
    let mode = cfg.effective_mode();

    let k = state.gen_rng.random_range(0..grid.len());
    let t = grid[k];
    let cond = sample_conds(&state.spec, b, &mut state.gen_rng);
    let z = backward_simulate(&state.generator, &grid, k, &cond, cfg.deterministic_backsim, &mut state.gen_rng)?;
    let cache = state.generator.forward_cached(&z, &vec![t; b], &cond)?;
    let gen_out = cache.output.clone();

    let dir: UpdateDirection = if cfg.schedule.policy.is_coupled() && cfg.schedule.tau_ca_range.is_none() {
        dmd_direction_coupled(teacher, &state.fake, &gen_out, t, &cond, cfg.alpha, mode, cfg.normalizer_on, &mut state.gen_rng)
    } else {
        dmd_direction_decoupled(
            teacher,
            &state.fake,
            &gen_out,
            t,
            &cond,
            cfg.alpha,
            mode,
            cfg.normalizer_on,
            &cfg.schedule,
            &mut state.gen_rng,
        )
    }
    .map_err(|e| abort(state.iteration, e))?;

    let (proxy, mut upstream) = proxy_loss_and_grad(&gen_out, &dir.delta_total, cfg.lambda)?;
    let bf = b as Real;
    let mut loss_reg = 0.0;
    let mut disc_loss = None;
    match cfg.regularizer {
        Regularizer::MeanvarKl => {
            let targets: Vec<_> = cond
                .iter()
                .map(|c| state.kl_targets[c.label().expect("generator conds are labelled")])
                .collect();
            let kl = meanvar_kl_loss_per_sample(&gen_out, &targets)?;
            loss_reg = cfg.w_kl * kl.loss;
            add_scaled(&mut upstream, &kl.grad, cfg.w_kl * bf);
        }
        Regularizer::Gan => {
            let real = real_batch(&state.spec, &cond, &mut state.disc_rng)?;
            let disc = state.discriminator.as_mut().expect("discriminator exists for GAN");
            let g = gan_losses(disc, &real, &cond, &gen_out, &cond)?;
            loss_reg = cfg.w_gan * g.gen_loss;
            add_scaled(&mut upstream, &g.gen_grad, cfg.w_gan * bf);
            state
                .disc_adam
                .as_mut()
                .expect("discriminator optimizer exists for GAN")
                .step(disc, &g.disc_grads)?;
            disc_loss = Some(g.disc_loss);
        }
        Regularizer::None | Regularizer::Dm => {}
    }
    upstream.check_finite("generator upstream").map_err(|e| abort(state.iteration, e))?;

    let grads = state.generator.backward(&cache, &upstream)?.grads;
    state.gen_adam.step(&mut state.generator, &grads)?;

    let mut loss_fake = 0.0;
    if cfg.trains_fake() && cfg.ttur_ratio > 0 {
        let fresh = state.generator.forward(&z, &vec![t; b], &cond)?;
        for _ in 0..cfg.ttur_ratio {
            loss_fake += fake_model_update(state, &fresh, &cond).map_err(|e| abort(state.iteration, e))?;
        }
        loss_fake /= cfg.ttur_ratio as Real;
    }

    state.iteration += 1;
    Ok(StepStats {
        iteration: state.iteration,
        t,
        tau_ca: dir.draw.mean_tau_ca(),
        tau_dm: dir.draw.mean_tau_dm(),
        loss_proxy: proxy / bf,
        loss_fake,
        loss_reg,
        disc_loss,
        mean_abs_dm: mean_abs(&dir.delta_dm),
        mean_abs_ca: mean_abs(&dir.delta_ca),
    })
}

fn abort(iteration: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at generator update {}", iteration + 1)),
        other => other,
    }
}

fn add_scaled(acc: &mut Tensor, g: &Tensor, w: Real) {
    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += w * v);
}

fn real_batch(spec: &MixtureSpec, cond: &[Cond], rng: &mut impl Rng) -> Result<Tensor> {
    let mut out = Tensor::zeros(vec![cond.len(), spec.dim]);
    for (i, c) in cond.iter().enumerate() {
        let l = c.label().ok_or(Error::invalid("real batch needs labelled conditions"))?;
        spec.sample_point(l, rng, out.row_mut(i));
    }
    Ok(out)
}

/// One row of [`observer_probe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub tau: Real,
    pub mean_abs_dm: Real,
    /// Mean over samples of `<delta_dm_i, direction>`.
    pub mean_alignment: Real,
}

/// Evaluates `delta_dm` on re-noised probe points at each `tau` and
/// measures its alignment with a known artifact direction.
pub fn observer_probe(
    teacher: &NetParams,
    fake: &NetParams,
    probe_points: &Tensor,
    taus: &[Real],
    cond: &[Cond],
    direction: &[Real],
    rng: &mut impl Rng,
) -> Result<Vec<ProbeRow>> {
    let (n, d) = (probe_points.rows(), probe_points.cols());
    if direction.len() != d {
        return Err(Error::ShapeMismatch {
            context: "observer direction",
            expected: vec![d],
            got: vec![direction.len()],
        });
    }
    taus.iter()
        .map(|&tau| {
            let eps = rng::normal_tensor(rng, n, d);
            let tv = vec![tau; n];
            let x = renoise(probe_points, &tv, &eps)?;
            let dm = super::direction::delta_dm(teacher, fake, &x, &tv, cond)?;
            let align = (0..n)
                .map(|i| dm.row(i).iter().zip(direction).map(|(a, v)| a * v).sum::<Real>())
                .sum::<Real>()
                / n.max(1) as Real;
            Ok(ProbeRow {
                tau,
                mean_abs_dm: mean_abs(&dm),
                mean_alignment: align,
            })
        })
        .collect()
}
