use rand::Rng;

use crate::data::MixtureSpec;
use crate::distill::{fake_model_update, observer_probe, DistillConfig, DistillState, ProbeRow};
use crate::error::{Error, Result};
use crate::flowsim::sample_teacher_conds;
use crate::nn::{Cond, NetParams};
use crate::rng::{self, stream};
use crate::tensor::{Real, Tensor};

/// A fake model trained on deliberately shifted teacher samples, then asked
/// which way the distribution-matching term would push them.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasProbe {
    /// Artifact direction added to every generated sample.
    pub bias: Vec<Real>,
    pub fake_steps: usize,
    pub batch: usize,
    pub fake_lr: Real,
    /// Teacher samples drawn once and re-used for fake training.
    pub pool: usize,
    /// Sampler steps for the pool.
    pub sampler_steps: usize,
    pub probe_points: usize,
    pub taus: Vec<Real>,
}

impl Default for BiasProbe {
    fn default() -> Self {
        BiasProbe {
            bias: vec![0.5, 0.5],
            fake_steps: 2000,
            batch: 256,
            fake_lr: 1e-4,
            pool: 8192,
            sampler_steps: 50,
            probe_points: 2048,
            taus: vec![0.1, 0.5, 0.9],
        }
    }
}

/// Probe rows for the trained observer and for `fake == real`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasProbeReport {
    pub trained: Vec<ProbeRow>,
    pub identical: Vec<ProbeRow>,
    pub final_fake_loss: Real,
}

fn biased_pool(teacher: &NetParams, spec: &MixtureSpec, n: usize, steps: usize, bias: &[Real], rng: &mut impl Rng) -> Result<(Tensor, Vec<Cond>)> {
    let cond: Vec<Cond> = (0..n).map(|_| Cond::Label(spec.sample_label(rng))).collect();
    let mut x = sample_teacher_conds(teacher, steps, 1.0, &cond, spec.dim, rng)?;
    for i in 0..n {
        x.row_mut(i).iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    Ok((x, cond))
}

pub fn bias_probe(teacher: &NetParams, spec: &MixtureSpec, probe: &BiasProbe, seed: u64) -> Result<BiasProbeReport> {
    if probe.bias.len() != spec.dim {
        return Err(Error::invalid(format!("bias has {} coordinates, data has {}", probe.bias.len(), spec.dim)));
    }
    if probe.batch == 0 || probe.pool == 0 {
        return Err(Error::invalid("probe batch and pool must be positive"));
    }
    let mut r = rng::seeded(seed, stream::PROBE);
    let (pool, pool_cond) = biased_pool(teacher, spec, probe.pool, probe.sampler_steps, &probe.bias, &mut r)?;
    let cfg = DistillConfig {
        mode: crate::distill::Mode::CaOnly,
        observer_mode: true,
        fake_lr: probe.fake_lr,
        batch: probe.batch,
        ..Default::default()
    };
    let mut state = DistillState::new(teacher, spec, cfg, seed)?;
    let mut last = 0.0;
    for _ in 0..probe.fake_steps {
        let idx: Vec<usize> = (0..probe.batch).map(|_| r.random_range(0..probe.pool)).collect();
        let batch = pool.gather_rows(&idx);
        let cond: Vec<Cond> = idx.iter().map(|&i| pool_cond[i]).collect();
        last = fake_model_update(&mut state, &batch, &cond)?;
    }
    let (points, cond) = biased_pool(teacher, spec, probe.probe_points, probe.sampler_steps, &probe.bias, &mut r)?;
    let mut pr = r.clone();
    let trained = observer_probe(teacher, &state.fake, &points, &probe.taus, &cond, &probe.bias, &mut r)?;
    let identical = observer_probe(teacher, teacher, &points, &probe.taus, &cond, &probe.bias, &mut pr)?;
    Ok(BiasProbeReport {
        trained,
        identical,
        final_fake_loss: last,
    })
}

pub const PROBE_HEADER: &str = "fake,tau,mean_abs_dm,mean_alignment";

pub fn probe_csv(report: &BiasProbeReport) -> String {
    let mut out = format!("{PROBE_HEADER}\n");
    for (name, rows) in [("trained", &report.trained), ("identical", &report.identical)] {
        for r in rows {
            out.push_str(&format!("{name},{},{},{}\n", r.tau, r.mean_abs_dm, r.mean_alignment));
        }
    }
    out
}
