use rand::Rng;

use super::schedule::{sample_tau, ScheduleConfig, SchedulePolicy};
use super::trainer::Mode;
use crate::error::{Error, Result};
use crate::flowsim::{cfg_combine, renoise};
use crate::nn::{Cond, Denoiser};
use crate::rng;
use crate::tensor::{Real, Tensor};

const NORMALIZER_EPS: Real = 1e-8;

/// The two components of one update and the combination the mode selects.
///
/// `delta_ca` already carries the `(alpha - 1)` factor. `delta_total` is
/// `delta_dm + delta_ca` for the full objective and a single component for
/// the ablation modes.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDirection {
    pub delta_dm: Tensor,
    pub delta_ca: Tensor,
    pub delta_total: Tensor,
    pub draw: DirectionDraw,
}

/// Per-sample noise levels used by one direction evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionDraw {
    pub tau_ca: Vec<Real>,
    pub tau_dm: Vec<Real>,
    pub shared_eps: bool,
}

impl DirectionDraw {
    pub fn mean_tau_ca(&self) -> Real {
        mean(&self.tau_ca)
    }

    pub fn mean_tau_dm(&self) -> Real {
        mean(&self.tau_dm)
    }
}

fn mean(v: &[Real]) -> Real {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<Real>() / v.len() as Real
    }
}

/// `real(x_tau, cond) - fake(x_tau, cond)`.
pub fn delta_dm(
    real: &impl Denoiser,
    fake: &impl Denoiser,
    x_tau: &Tensor,
    tau: &[Real],
    cond: &[Cond],
) -> Result<Tensor> {
    let r = real.predict(x_tau, tau, cond)?;
    let f = fake.predict(x_tau, tau, cond)?;
    r.sub(&f)
}

/// `(alpha - 1) * (real(x_tau, cond) - real(x_tau, null))`.
pub fn delta_ca(real: &impl Denoiser, x_tau: &Tensor, tau: &[Real], cond: &[Cond], alpha: Real) -> Result<Tensor> {
    check_alpha(alpha)?;
    let c = real.predict(x_tau, tau, cond)?;
    ca_from_cond(real, &c, x_tau, tau, cond, alpha)
}

fn ca_from_cond(
    real: &impl Denoiser,
    real_cond: &Tensor,
    x_tau: &Tensor,
    tau: &[Real],
    cond: &[Cond],
    alpha: Real,
) -> Result<Tensor> {
    if alpha == 1.0 {
        return Ok(Tensor::zeros(real_cond.shape().to_vec()));
    }
    let u = real.predict(x_tau, tau, &vec![Cond::Null; cond.len()])?;
    real_cond.zip_map(&u, "delta_ca", |c, u| (alpha - 1.0) * (c - u))
}

fn check_alpha(alpha: Real) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("guidance scale {alpha} must be finite and >= 0")));
    }
    Ok(())
}

/// The undecomposed form `cfg(real_cond, real_uncond, alpha) - fake_cond`.
pub fn dmd_eq3_direction(
    real: &impl Denoiser,
    fake: &impl Denoiser,
    x_tau: &Tensor,
    tau: &[Real],
    cond: &[Cond],
    alpha: Real,
) -> Result<Tensor> {
    check_alpha(alpha)?;
    let c = real.predict(x_tau, tau, cond)?;
    let u = real.predict(x_tau, tau, &vec![Cond::Null; cond.len()])?;
    let f = fake.predict(x_tau, tau, cond)?;
    cfg_combine(&c, &u, alpha)?.sub(&f)
}

/// Draws one `(tau, eps)` per sample and evaluates both components on the
/// same re-noised point.
///
/// Randomness is consumed as all `tau` draws first, then one noise tensor.
#[allow(clippy::too_many_arguments)]
pub fn dmd_direction_coupled(
    real: &impl Denoiser,
    fake: &impl Denoiser,
    gen_out: &Tensor,
    t: Real,
    cond: &[Cond],
    alpha: Real,
    mode: Mode,
    normalizer_on: bool,
    rng: &mut impl Rng,
) -> Result<UpdateDirection> {
    check_alpha(alpha)?;
    let schedule = ScheduleConfig::new(SchedulePolicy::CoupledShared);
    let taus = draw_taus(&schedule, t, gen_out.rows(), rng)?;
    let tau = taus.tau_dm.clone();
    let eps = rng::normal_tensor(rng, gen_out.rows(), gen_out.cols());
    let x_tau = renoise(gen_out, &tau, &eps)?;

    let real_cond = real.predict(&x_tau, &tau, cond)?;
    let fake_cond = fake.predict(&x_tau, &tau, cond)?;
    let dm = real_cond.sub(&fake_cond)?;
    let ca = match mode {
        Mode::TheoryDmd | Mode::DmOnly => Tensor::zeros(dm.shape().to_vec()),
        _ => ca_from_cond(real, &real_cond, &x_tau, &tau, cond, alpha)?,
    };
    assemble(dm, ca, mode, normalizer_on.then_some((gen_out, &real_cond)), taus)
}

/// Evaluates the DM and CA components at independently drawn noise levels.
///
/// Under the coupled policy the two branches share one draw and one noise
/// tensor, which reproduces [`dmd_direction_coupled`] bit for bit. Otherwise
/// the CA noise tensor is drawn before the DM one.
#[allow(clippy::too_many_arguments)]
pub fn dmd_direction_decoupled(
    real: &impl Denoiser,
    fake: &impl Denoiser,
    gen_out: &Tensor,
    t: Real,
    cond: &[Cond],
    alpha: Real,
    mode: Mode,
    normalizer_on: bool,
    schedule: &ScheduleConfig,
    rng: &mut impl Rng,
) -> Result<UpdateDirection> {
    check_alpha(alpha)?;
    let (b, d) = (gen_out.rows(), gen_out.cols());
    let taus = draw_taus(schedule, t, b, rng)?;
    let eps_ca = rng::normal_tensor(rng, b, d);
    let eps_dm = if taus.shared_eps { eps_ca.clone() } else { rng::normal_tensor(rng, b, d) };

    let x_dm = renoise(gen_out, &taus.tau_dm, &eps_dm)?;
    let real_dm = real.predict(&x_dm, &taus.tau_dm, cond)?;
    let dm = real_dm.sub(&fake.predict(&x_dm, &taus.tau_dm, cond)?)?;

    let ca = match mode {
        Mode::TheoryDmd | Mode::DmOnly => Tensor::zeros(vec![b, d]),
        _ => {
            let x_ca = renoise(gen_out, &taus.tau_ca, &eps_ca)?;
            let real_ca = real.predict(&x_ca, &taus.tau_ca, cond)?;
            ca_from_cond(real, &real_ca, &x_ca, &taus.tau_ca, cond, alpha)?
        }
    };
    assemble(dm, ca, mode, normalizer_on.then_some((gen_out, &real_dm)), taus)
}

fn draw_taus(schedule: &ScheduleConfig, t: Real, n: usize, rng: &mut impl Rng) -> Result<DirectionDraw> {
    let mut draw = DirectionDraw {
        tau_ca: Vec::with_capacity(n),
        tau_dm: Vec::with_capacity(n),
        shared_eps: schedule.policy.is_coupled(),
    };
    for _ in 0..n {
        let d = sample_tau(schedule, t, rng)?;
        draw.tau_ca.push(d.tau_ca);
        draw.tau_dm.push(d.tau_dm);
    }
    Ok(draw)
}

fn assemble(
    dm: Tensor,
    ca: Tensor,
    mode: Mode,
    normalize: Option<(&Tensor, &Tensor)>,
    draw: DirectionDraw,
) -> Result<UpdateDirection> {
    let (dm, ca) = match normalize {
        Some((gen_out, real_pred)) => {
            let scale = normalizer_scales(gen_out, real_pred)?;
            (scale_rows(&dm, &scale), scale_rows(&ca, &scale))
        }
        None => (dm, ca),
    };
    let total = match mode {
        Mode::FullDmd => dm.add(&ca)?,
        Mode::TheoryDmd | Mode::DmOnly => dm.clone(),
        Mode::CaOnly => ca.clone(),
    };
    total.check_finite("update direction")?;
    Ok(UpdateDirection {
        delta_dm: dm,
        delta_ca: ca,
        delta_total: total,
        draw,
    })
}

/// `1 / (mean_j |gen_out - real_pred| + 1e-8)` per row.
fn normalizer_scales(gen_out: &Tensor, real_pred: &Tensor) -> Result<Vec<Real>> {
    gen_out.same_shape(real_pred, "normalizer")?;
    let d = gen_out.cols().max(1) as Real;
    Ok((0..gen_out.rows())
        .map(|i| {
            let mad: Real = gen_out
                .row(i)
                .iter()
                .zip(real_pred.row(i))
                .map(|(g, r)| (g - r).abs())
                .sum::<Real>()
                / d;
            1.0 / (mad + NORMALIZER_EPS)
        })
        .collect())
}

fn scale_rows(x: &Tensor, scale: &[Real]) -> Tensor {
    let mut out = x.clone();
    for (i, &s) in scale.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Proxy loss `|| G - stop_grad(G + lambda * delta) ||^2` summed over the
/// batch, and its gradient `-2 lambda delta` with respect to `G`.
pub fn proxy_loss_and_grad(gen_out: &Tensor, delta_total: &Tensor, lambda: Real) -> Result<(Real, Tensor)> {
    gen_out.same_shape(delta_total, "proxy loss")?;
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("proxy weight {lambda} must be > 0")));
    }
    let loss = lambda * lambda * delta_total.sum_sq();
    Ok((loss, delta_total.scale(-2.0 * lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NetConfig, NetParams};
    use crate::rng::seeded;

    /// Returns fixed rows regardless of input, one row per condition kind.
    struct Fixed {
        cond: Vec<Real>,
        null: Vec<Real>,
    }

    impl Denoiser for Fixed {
        fn predict(&self, x: &Tensor, _: &[Real], cond: &[Cond]) -> Result<Tensor> {
            let rows: Vec<Vec<Real>> = cond
                .iter()
                .map(|c| match c {
                    Cond::Null => self.null.clone(),
                    Cond::Label(_) => self.cond.clone(),
                })
                .collect();
            assert_eq!(rows.len(), x.rows());
            Tensor::from_rows(&rows)
        }
    }

    /// Wraps a model and adds a constant offset to its output.
    struct Offset<'a>(&'a NetParams, Vec<Real>);

    impl Denoiser for Offset<'_> {
        fn predict(&self, x: &Tensor, n: &[Real], c: &[Cond]) -> Result<Tensor> {
            let mut out = self.0.forward(x, n, c)?;
            for i in 0..out.rows() {
                out.row_mut(i).iter_mut().zip(&self.1).for_each(|(o, v)| *o += v);
            }
            Ok(out)
        }
    }

    fn net(seed: u64) -> NetParams {
        let cfg = NetConfig {
            hidden: vec![16, 16],
            ..NetConfig::denoiser(2, 3)
        };
        NetParams::init(cfg, &mut seeded(seed, 9)).unwrap()
    }

    fn inputs(seed: u64, b: usize) -> (Tensor, Vec<Real>, Vec<Cond>) {
        let mut r = seeded(seed, 10);
        let x = rng::normal_tensor(&mut r, b, 2);
        let tau = (0..b).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect();
        let cond = (0..b).map(|i| Cond::Label(i % 3)).collect();
        (x, tau, cond)
    }

    #[test]
    fn dm_of_identical_models_is_zero() {
        let real = net(1);
        let fake = real.clone();
        let (x, tau, cond) = inputs(2, 8);
        let d = delta_dm(&real, &fake, &x, &tau, &cond).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dm_of_offset_fake_is_minus_offset() {
        let real = net(3);
        let fake = Offset(&real, vec![0.25, -1.5]);
        let (x, tau, cond) = inputs(4, 5);
        let d = delta_dm(&real, &fake, &x, &tau, &cond).unwrap();
        for i in 0..5 {
            assert!((d.row(i)[0] + 0.25).abs() < 1e-12);
            assert!((d.row(i)[1] - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn dm_matches_two_raw_forwards() {
        let (real, fake) = (net(5), net(6));
        let (x, tau, cond) = inputs(7, 16);
        let d = delta_dm(&real, &fake, &x, &tau, &cond).unwrap();
        let r = real.forward(&x, &tau, &cond).unwrap();
        let f = fake.forward(&x, &tau, &cond).unwrap();
        let expect: Vec<Real> = r.data().iter().zip(f.data()).map(|(a, b)| a - b).collect();
        assert!(d.bit_eq(&Tensor::new(vec![16, 2], expect).unwrap()));
    }

    #[test]
    fn ca_vanishes_at_unit_scale_and_null_embedding() {
        let mut real = net(8);
        let (x, tau, cond) = inputs(9, 6);
        let d = delta_ca(&real, &x, &tau, &cond, 1.0).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));

        let null = real.embedding_row(real.config().null_row()).to_vec();
        for l in 0..3 {
            real.embedding_row_mut(l).copy_from_slice(&null);
        }
        let d = delta_ca(&real, &x, &tau, &cond, 4.0).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ca_direct_evaluation() {
        let real = Fixed {
            cond: vec![1.0, 0.0],
            null: vec![0.2, 0.0],
        };
        let x = Tensor::zeros(vec![1, 2]);
        let d = delta_ca(&real, &x, &[0.5], &[Cond::Label(0)], 5.0).unwrap();
        assert!((d.data()[0] - 3.2).abs() < 1e-12);
        assert_eq!(d.data()[1], 0.0);
        assert!(delta_ca(&real, &x, &[0.5], &[Cond::Label(0)], -1.0).is_err());
    }

    #[test]
    fn full_matches_undecomposed_worked_value() {
        let real = Fixed {
            cond: vec![1.0],
            null: vec![0.2],
        };
        let fake = Fixed {
            cond: vec![0.4],
            null: vec![0.4],
        };
        let gen = Tensor::zeros(vec![1, 1]);
        let dir = dmd_direction_coupled(&real, &fake, &gen, 0.0, &[Cond::Label(0)], 5.0, Mode::FullDmd, false, &mut seeded(0, 0))
            .unwrap();
        let eq3 = dmd_eq3_direction(&real, &fake, &gen, &[0.5], &[Cond::Label(0)], 5.0).unwrap();
        assert!((dir.delta_total.data()[0] - 3.8).abs() < 1e-12);
        assert!((eq3.data()[0] - 3.8).abs() < 1e-12);
    }

    #[test]
    fn unit_scale_full_equals_theory() {
        let (real, fake) = (net(10), net(11));
        let (gen, _, cond) = inputs(12, 32);
        for seed in 0..10 {
            let a = dmd_direction_coupled(&real, &fake, &gen, 0.0, &cond, 1.0, Mode::FullDmd, true, &mut seeded(seed, 1)).unwrap();
            let b = dmd_direction_coupled(&real, &fake, &gen, 0.0, &cond, 1.0, Mode::TheoryDmd, true, &mut seeded(seed, 1)).unwrap();
            let c = dmd_direction_coupled(&real, &fake, &gen, 0.0, &cond, 1.0, Mode::DmOnly, true, &mut seeded(seed, 1)).unwrap();
            assert!(a.delta_total.bit_eq(&b.delta_total));
            assert!(a.delta_total.bit_eq(&c.delta_total));
        }
    }

    #[test]
    fn ablation_modes_sum_to_full() {
        let (real, fake) = (net(13), net(14));
        let (gen, _, cond) = inputs(15, 32);
        let run = |mode| dmd_direction_coupled(&real, &fake, &gen, 0.0, &cond, 4.0, mode, false, &mut seeded(3, 1)).unwrap();
        let full = run(Mode::FullDmd).delta_total;
        let sum = run(Mode::CaOnly).delta_total.add(&run(Mode::DmOnly).delta_total).unwrap();
        assert!(full.max_abs_diff(&sum).unwrap() < 1e-12);
    }

    #[test]
    fn decoupled_coupled_policy_matches_coupled_path() {
        let (real, fake) = (net(16), net(17));
        let (gen, _, cond) = inputs(18, 32);
        let s = ScheduleConfig::new(SchedulePolicy::CoupledShared);
        for mode in [Mode::FullDmd, Mode::CaOnly, Mode::DmOnly, Mode::TheoryDmd] {
            for norm in [false, true] {
                let a = dmd_direction_coupled(&real, &fake, &gen, 0.5, &cond, 3.0, mode, norm, &mut seeded(1, 1)).unwrap();
                let b = dmd_direction_decoupled(&real, &fake, &gen, 0.5, &cond, 3.0, mode, norm, &s, &mut seeded(1, 1)).unwrap();
                assert!(a.delta_total.bit_eq(&b.delta_total));
                assert!(a.delta_dm.bit_eq(&b.delta_dm) && a.delta_ca.bit_eq(&b.delta_ca));
                assert_eq!(a.draw, b.draw);
            }
        }
    }

    #[test]
    fn decoupled_unit_scale_keeps_only_dm_branch() {
        let (real, fake) = (net(19), net(20));
        let (gen, _, cond) = inputs(21, 16);
        let s = ScheduleConfig::new(SchedulePolicy::DecoupledFull);
        let dir = dmd_direction_decoupled(&real, &fake, &gen, 0.0, &cond, 1.0, Mode::FullDmd, false, &s, &mut seeded(2, 2)).unwrap();
        let mut r = seeded(2, 2);
        let draw = draw_taus(&s, 0.0, 16, &mut r).unwrap();
        let _eps_ca = rng::normal_tensor(&mut r, 16, 2);
        let eps_dm = rng::normal_tensor(&mut r, 16, 2);
        let x_dm = renoise(&gen, &draw.tau_dm, &eps_dm).unwrap();
        let expect = delta_dm(&real, &fake, &x_dm, &draw.tau_dm, &cond).unwrap();
        assert!(dir.delta_total.bit_eq(&expect));
    }

    #[test]
    fn hybrid_logs_ca_above_step() {
        let (real, fake) = (net(22), net(23));
        let (gen, _, cond) = inputs(24, 4);
        let s = ScheduleConfig::new(SchedulePolicy::DecoupledHybrid);
        let mut r = seeded(5, 5);
        for _ in 0..1000 {
            let dir = dmd_direction_decoupled(&real, &fake, &gen, 0.75, &cond, 4.0, Mode::FullDmd, true, &s, &mut r).unwrap();
            assert!(dir.draw.tau_ca.iter().all(|&t| t >= 0.75));
        }
    }

    #[test]
    fn normalizer_rescales_rows() {
        let real = Fixed {
            cond: vec![1.0, 1.0],
            null: vec![0.0, 0.0],
        };
        let fake = Fixed {
            cond: vec![0.5, 0.5],
            null: vec![0.0, 0.0],
        };
        let gen = Tensor::from_rows(&[vec![3.0, 3.0]]).unwrap();
        let dir = dmd_direction_coupled(&real, &fake, &gen, 0.0, &[Cond::Label(0)], 2.0, Mode::FullDmd, true, &mut seeded(0, 0)).unwrap();
        // |gen - real| = 2, raw total = 0.5 + 1.0
        assert!((dir.delta_total.data()[0] - 1.5 / (2.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn proxy_cases() {
        let g = Tensor::zeros(vec![2, 2]);
        let (l, grad) = proxy_loss_and_grad(&g, &Tensor::zeros(vec![2, 2]), 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));

        let g = Tensor::zeros(vec![1, 1]);
        let (l, grad) = proxy_loss_and_grad(&g, &Tensor::filled(vec![1, 1], 2.0), 0.5).unwrap();
        assert_eq!(grad.data(), &[-2.0]);
        assert_eq!(l, 1.0);
        assert!(proxy_loss_and_grad(&g, &Tensor::zeros(vec![1, 2]), 1.0).is_err());
        assert!(proxy_loss_and_grad(&g, &Tensor::zeros(vec![1, 1]), 0.0).is_err());
    }

    #[test]
    fn proxy_gradient_matches_finite_differences() {
        let mut r = seeded(30, 0);
        let g = rng::normal_tensor(&mut r, 4, 3);
        let delta = rng::normal_tensor(&mut r, 4, 3);
        let lambda = 0.7;
        let target = g.zip_map(&delta, "t", |a, b| a + lambda * b).unwrap();
        let loss = |x: &Tensor| x.sub(&target).unwrap().sum_sq();
        let (_, grad) = proxy_loss_and_grad(&g, &delta, lambda).unwrap();
        let h = 1e-6;
        for i in 0..g.len() {
            let mut p = g.clone();
            p.data_mut()[i] += h;
            let mut m = g.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let a = grad.data()[i];
            assert!((fd - a).abs() / a.abs().max(1e-8) < 1e-6, "{fd} vs {a}");
        }
    }
}
