//! Flow-matching mechanics under the `t = 0` noise / `t = 1` data convention.
//!
//! Re-noising is the linear path `x_t = (1 - t) * eps + t * x`. Networks
//! predict the clean point; the sampler turns that into the velocity
//! `(x_hat - z) / (1 - t)` and integrates with forward Euler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_dataset, LabeledBatch, MixtureSpec};
use crate::error::{Error, Result};
use crate::nn::{Cond, Denoiser, Gradients, NetConfig, NetParams};
use crate::optim::{ema_update, AdamConfig, AdamState};
use crate::rng::{self, stream};
use crate::tensor::{Real, Tensor};

/// A noise level in `[0, 1]`; `0` is pure noise and `1` is clean data.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct NoiseLevel(Real);

impl NoiseLevel {
    pub fn new(v: Real) -> Result<Self> {
        if (0.0..=1.0).contains(&v) {
            Ok(NoiseLevel(v))
        } else {
            Err(Error::invalid(format!("noise level {v} outside [0, 1]")))
        }
    }

    pub fn value(self) -> Real {
        self.0
    }
}

/// `x_tau = (1 - tau) * eps + tau * x`, one `tau` per row.
pub fn renoise(x: &Tensor, tau: &[Real], eps: &Tensor) -> Result<Tensor> {
    x.same_shape(eps, "renoise")?;
    if tau.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            context: "renoise tau",
            expected: vec![x.rows()],
            got: vec![tau.len()],
        });
    }
    if let Some(t) = tau.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("noise level {t} outside [0, 1]")));
    }
    let cols = x.cols();
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&xv, &ev))| {
            let t = tau[i / cols];
            (1.0 - t) * ev + t * xv
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Classifier-free guidance `s_uncond + alpha * (s_cond - s_uncond)`.
///
/// `alpha = 1` and `alpha = 0` return the conditional and unconditional
/// inputs exactly.
pub fn cfg_combine(s_cond: &Tensor, s_uncond: &Tensor, alpha: Real) -> Result<Tensor> {
    s_cond.same_shape(s_uncond, "cfg_combine")?;
    if alpha == 1.0 {
        return Ok(s_cond.clone());
    }
    if alpha == 0.0 {
        return Ok(s_uncond.clone());
    }
    s_cond.zip_map(s_uncond, "cfg_combine", |c, u| u + alpha * (c - u))
}

/// Guided prediction; skips the unconditional call when `alpha == 1`.
pub fn guided_prediction(
    model: &impl Denoiser,
    x: &Tensor,
    noise: &[Real],
    cond: &[Cond],
    alpha: Real,
) -> Result<Tensor> {
    let c = model.predict(x, noise, cond)?;
    if alpha == 1.0 {
        return Ok(c);
    }
    let u = model.predict(x, noise, &vec![Cond::Null; cond.len()])?;
    cfg_combine(&c, &u, alpha)
}

/// Mean squared x0-regression loss at explicit noise levels and noise draws.
///
/// Shared by teacher training and the fake-model update:
/// `mean_b || net(renoise(x_b, tau_b, eps_b), tau_b, cond_b) - x_b ||^2`.
pub fn denoise_loss(
    params: &NetParams,
    clean: &Tensor,
    tau: &[Real],
    eps: &Tensor,
    cond: &[Cond],
) -> Result<(Real, Gradients)> {
    let x_tau = renoise(clean, tau, eps)?;
    let cache = params.forward_cached(&x_tau, tau, cond)?;
    let batch = clean.rows().max(1) as Real;
    let resid = cache.output.sub(clean)?;
    let loss = resid.sum_sq() / batch;
    let upstream = resid.scale(2.0 / batch);
    let back = params.backward(&cache, &upstream)?;
    Ok((loss, back.grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: Real,
    /// Cosine-decayed learning rate floor.
    pub lr_min: Real,
    pub p_uncond: Real,
    pub ema_decay: Real,
    pub log_every: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            iterations: 20_000,
            batch: 256,
            lr: 1e-3,
            lr_min: 1e-5,
            p_uncond: 0.1,
            ema_decay: 0.999,
            log_every: 100,
            seed: 0,
            hidden: vec![128; 4],
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_uncond > 0.0 && self.p_uncond < 1.0) {
            return Err(Error::invalid("p_uncond must lie in (0, 1)"));
        }
        if self.iterations == 0 || self.batch == 0 || self.log_every == 0 {
            return Err(Error::invalid("teacher counts must be positive"));
        }
        if !(self.lr > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(Error::invalid("teacher learning rates must satisfy 0 <= lr_min <= lr, lr > 0"));
        }
        Ok(())
    }
}

/// Flow-matching loss with condition dropout; `tau ~ U(0, 1)` per sample.
pub fn teacher_loss(
    params: &NetParams,
    batch: &LabeledBatch,
    p_uncond: Real,
    rng: &mut impl Rng,
) -> Result<(Real, Gradients)> {
    let n = batch.len();
    let tau: Vec<Real> = (0..n).map(|_| rng.random::<Real>()).collect();
    let eps = rng::normal_tensor(rng, n, batch.points.cols());
    let cond: Vec<Cond> = batch
        .labels
        .iter()
        .map(|&l| if rng.random::<Real>() < p_uncond { Cond::Null } else { Cond::Label(l) })
        .collect();
    denoise_loss(params, &batch.points, &tau, &eps, &cond)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub loss: Real,
}

/// Trains a teacher from scratch and returns its EMA weights with the loss log.
///
/// Each log row is the mean training loss over the preceding `log_every`
/// iterations.
pub fn train_teacher(spec: &MixtureSpec, config: &TeacherConfig) -> Result<(NetParams, Vec<LossRow>)> {
    config.validate()?;
    spec.validate()?;
    let mut init_rng = rng::seeded(config.seed, stream::INIT);
    let mut rng = rng::seeded(config.seed, stream::TEACHER);
    let mut net_cfg = NetConfig::denoiser(spec.dim, spec.label_count);
    net_cfg.hidden = config.hidden.clone();
    let mut params = NetParams::init(net_cfg, &mut init_rng)?;
    let mut ema = params.clone();
    let mut adam = AdamState::new(&params, AdamConfig::with_lr(config.lr));
    let mut log = Vec::new();
    let mut acc = 0.0;
    for it in 1..=config.iterations {
        let progress = (it - 1) as Real / config.iterations as Real;
        adam.config.lr = config.lr_min
            + 0.5 * (config.lr - config.lr_min) * (1.0 + (std::f64::consts::PI as Real * progress).cos());
        let batch = sample_dataset(spec, config.batch, &mut rng)?;
        let (loss, grads) = teacher_loss(&params, &batch, config.p_uncond, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("teacher loss at iteration {it}")));
        }
        adam.step(&mut params, &grads)?;
        // Warm-started EMA so early checkpoints are not dominated by the init.
        let decay = config.ema_decay.min((1 + it) as Real / (10 + it) as Real);
        ema_update(&mut ema, &params, decay)?;
        acc += loss;
        if it % config.log_every == 0 {
            log.push(LossRow {
                iteration: it,
                loss: acc / config.log_every as Real,
            });
            acc = 0.0;
        }
    }
    Ok((ema, log))
}

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("iteration,loss\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.iteration, r.loss));
    }
    out
}

/// Euler sampler from pure noise on the uniform grid `t_k = k / n_steps`.
pub fn sample_teacher(
    model: &impl Denoiser,
    n_steps: usize,
    alpha: Real,
    cond: Cond,
    n: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    sample_teacher_conds(model, n_steps, alpha, &vec![cond; n], dim, rng)
}

/// [`sample_teacher`] with one condition per chain.
pub fn sample_teacher_conds(
    model: &impl Denoiser,
    n_steps: usize,
    alpha: Real,
    cond: &[Cond],
    dim: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    let n = cond.len();
    let mut z = rng::normal_tensor(rng, n, dim);
    let dt = 1.0 / n_steps as Real;
    for k in 0..n_steps {
        let t = k as Real / n_steps as Real;
        let x_hat = guided_prediction(model, &z, &vec![t; n], cond, alpha)?;
        if k + 1 == n_steps || 1.0 - t < 1e-9 {
            z = x_hat;
            continue;
        }
        let inv = 1.0 / (1.0 - t);
        for (zv, &xv) in z.data_mut().iter_mut().zip(x_hat.data()) {
            *zv += dt * (xv - *zv) * inv;
        }
    }
    z.check_finite("sample_teacher output")?;
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Posterior mean `E[x | x_tau]` for data `N(m, s2 I)` on the linear path.
    pub(crate) struct GaussianOracle {
        pub mean: Vec<Real>,
        pub var: Real,
    }

    impl Denoiser for GaussianOracle {
        fn predict(&self, x: &Tensor, noise: &[Real], _cond: &[Cond]) -> Result<Tensor> {
            let mut out = x.clone();
            for i in 0..x.rows() {
                let t = noise[i];
                let gain = t * self.var / (t * t * self.var + (1.0 - t) * (1.0 - t));
                for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                    *v = self.mean[j] + gain * (*v - t * self.mean[j]);
                }
            }
            Ok(out)
        }
    }

    struct PointMass(Vec<Real>);

    impl Denoiser for PointMass {
        fn predict(&self, x: &Tensor, _: &[Real], _: &[Cond]) -> Result<Tensor> {
            let rows: Vec<Vec<Real>> = (0..x.rows()).map(|_| self.0.clone()).collect();
            Tensor::from_rows(&rows)
        }
    }

    #[test]
    fn renoise_endpoints_and_midpoint() {
        let x = Tensor::matrix(2, 2, vec![2.0, 0.0, -1.0, 5.0]).unwrap();
        let eps = Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        assert_eq!(renoise(&x, &[1.0, 1.0], &eps).unwrap(), x);
        assert_eq!(renoise(&x, &[0.0, 0.0], &eps).unwrap(), eps);
        let zero = Tensor::zeros(vec![2, 2]);
        let mid = renoise(&x, &[0.5, 0.5], &zero).unwrap();
        assert_eq!(mid.row(0), &[1.0, 0.0]);
        assert!(renoise(&x, &[0.5], &eps).is_err());
        assert!(renoise(&x, &[0.5, 0.5], &Tensor::zeros(vec![2, 3])).is_err());
    }

    #[test]
    fn renoise_is_affine_in_x() {
        let mut rng = seeded(2, 0);
        let eps = rng::normal_tensor(&mut rng, 1, 3);
        for &t in &[0.0, 0.2, 0.77, 1.0] {
            let base = renoise(&Tensor::zeros(vec![1, 3]), &[t], &eps).unwrap();
            let unit = renoise(&Tensor::filled(vec![1, 3], 1.0), &[t], &eps).unwrap();
            for j in 0..3 {
                let offset = base.data()[j];
                let slope = unit.data()[j] - offset;
                assert!((slope - t).abs() < 1e-15);
                assert!((offset - (1.0 - t) * eps.data()[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cfg_combine_cases() {
        let c = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let u = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &u, 7.5).unwrap().data(), &[7.5]);
        assert!(cfg_combine(&c, &Tensor::zeros(vec![1, 2]), 2.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cfg_of_equal_inputs_is_identity(v in proptest::collection::vec(-1e3..1e3f64, 1..8), alpha in 0.0..20.0f64) {
            let s = Tensor::matrix(1, v.len(), v.iter().map(|&x| x as Real).collect()).unwrap();
            let out = cfg_combine(&s, &s, alpha as Real).unwrap();
            proptest::prop_assert!(out.bit_eq(&s));
        }
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        // At tau = 1 the input is the clean point, so an identity network is a
        // perfect denoiser.
        let cfg = NetConfig { data_dim: 2, out_dim: 2, label_count: 1, hidden: vec![], n_freqs: 1, time_dim: 1, cond_dim: 1 };
        let mut p = NetParams::zeros(cfg.clone()).unwrap();
        let w = p.layer_weight_mut(0);
        w.data_mut()[0] = 1.0;
        w.data_mut()[cfg.input_dim() + 1] = 1.0;
        let clean = Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 0.5, 0.0, 4.0]).unwrap();
        let eps = Tensor::filled(vec![3, 2], 9.0);
        let (loss, grads) = denoise_loss(&p, &clean, &[1.0; 3], &eps, &[Cond::Label(0); 3]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.is_zero());
    }

    #[test]
    fn degenerate_point_data_optimum() {
        // Constant output c at tau = 1 on data {c}: the bias-only network is optimal.
        let cfg = NetConfig { data_dim: 2, out_dim: 2, label_count: 1, hidden: vec![], n_freqs: 1, time_dim: 1, cond_dim: 1 };
        let mut p = NetParams::zeros(cfg).unwrap();
        p.layer_bias_mut(0).data_mut().copy_from_slice(&[0.4, -1.2]);
        let clean = Tensor::matrix(2, 2, vec![0.4, -1.2, 0.4, -1.2]).unwrap();
        let eps = Tensor::zeros(vec![2, 2]);
        let (loss, grads) = denoise_loss(&p, &clean, &[1.0; 2], &eps, &[Cond::Label(0); 2]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.is_zero());
    }

    #[test]
    fn one_step_sampler_is_a_single_jump() {
        let mut rng = seeded(4, 0);
        let oracle = GaussianOracle { mean: vec![1.0, -1.0], var: 0.25 };
        let out = sample_teacher(&oracle, 1, 1.0, Cond::Label(0), 5, 2, &mut rng).unwrap();
        let mut rng = seeded(4, 0);
        let z = rng::normal_tensor(&mut rng, 5, 2);
        let want = oracle.predict(&z, &[0.0; 5], &[Cond::Label(0); 5]).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn point_mass_is_a_fixed_point() {
        let c = vec![0.7, -2.0];
        for steps in [1, 2, 7, 50] {
            let out = sample_teacher(&PointMass(c.clone()), steps, 3.0, Cond::Label(0), 4, 2, &mut seeded(1, 0)).unwrap();
            for i in 0..4 {
                assert_eq!(out.row(i), c.as_slice());
            }
        }
        assert!(sample_teacher(&PointMass(c), 0, 1.0, Cond::Null, 1, 2, &mut seeded(1, 0)).is_err());
    }

    /// Mean and variance of the Euler sampler's output under the Gaussian
    /// oracle, by pushing the affine per-step map through the recursion.
    fn euler_moments(mean: Real, var: Real, steps: usize) -> (Real, Real) {
        let (mut m, mut v) = (0.0, 1.0);
        let dt = 1.0 / steps as Real;
        for k in 0..steps {
            let t = k as Real * dt;
            let gain = t * var / (t * t * var + (1.0 - t) * (1.0 - t));
            // x_hat = gain * z + (1 - gain * t) * mean
            let (a, b) = (gain, (1.0 - gain * t) * mean);
            if k + 1 == steps {
                m = a * m + b;
                v *= a * a;
            } else {
                let s = dt / (1.0 - t);
                let coef = 1.0 + s * (a - 1.0);
                m = coef * m + s * b;
                v *= coef * coef;
            }
        }
        (m, v)
    }

    #[test]
    fn sampler_matches_gaussian_target_with_analytic_denoiser() {
        let (mean, var) = ([1.5, -0.5], 0.09);
        let oracle = GaussianOracle { mean: mean.to_vec(), var };
        let n = 20_000;
        let out = sample_teacher(&oracle, 50, 1.0, Cond::Label(0), n, 2, &mut seeded(6, 0)).unwrap();
        for j in 0..2 {
            let m = (0..n).map(|i| out.row(i)[j]).sum::<Real>() / n as Real;
            let v = (0..n).map(|i| (out.row(i)[j] - m).powi(2)).sum::<Real>() / n as Real;
            let (em, ev) = euler_moments(mean[j], var, 50);
            // Monte-Carlo tolerances: 5 SE of the mean and of the variance.
            let n = n as Real;
            assert!((m - em).abs() < 5.0 * (ev / n).sqrt(), "mean {m} vs {em}");
            assert!((v - ev).abs() < 5.0 * ev * (2.0 / n).sqrt(), "var {v} vs {ev}");
            // The target mean is reproduced; the variance carries the Euler
            // discretization bias, which shrinks with the step count.
            assert!((em - mean[j]).abs() < 1e-9);
            assert!((ev - var).abs() / var < 0.08);
        }
        assert!((euler_moments(0.0, var, 500).1 - var).abs() / var < 0.01);
    }

    #[test]
    fn teacher_training_reduces_loss() {
        let spec = MixtureSpec::gmm8();
        let cfg = TeacherConfig { iterations: 1500, batch: 128, hidden: vec![64, 64], log_every: 100, ..Default::default() };
        let (_, log) = train_teacher(&spec, &cfg).unwrap();
        let first = log[0].loss;
        let last_avg = log[log.len() - 3..].iter().map(|r| r.loss).sum::<Real>() / 3.0;
        assert!(last_avg < first, "{first} -> {last_avg}");
        assert!(loss_log_csv(&log).starts_with("iteration,loss\n100,"));
    }

    #[test]
    fn teacher_config_validation() {
        let bad = TeacherConfig { p_uncond: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(TeacherConfig::default().validate().is_ok());
    }
}
