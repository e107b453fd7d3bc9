use crate::data::RegularizerTargets;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Cond, Gradients, NetParams};
use crate::tensor::{Real, Tensor};

const VAR_FLOOR: Real = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KlLoss {
    /// Batch mean of the per-sample Gaussian KL.
    pub loss: Real,
    /// Gradient of `loss` with respect to the batch.
    pub grad: Tensor,
    /// Samples whose variance was clamped to the floor.
    pub clamped: usize,
}

/// Per-sample mean/variance KL against one shared target.
pub fn meanvar_kl_loss(batch: &Tensor, targets: &RegularizerTargets) -> Result<KlLoss> {
    meanvar_kl_loss_per_sample(batch, &vec![*targets; batch.rows()])
}

/// Per-sample KL `0.5 * ((s2 + (mu - mu_t)^2) / s2_t - 1 - ln(s2 / s2_t))`
/// of `N(mu_i, s2_i)` against `N(mu_t, s2_t)`, with one target per row.
pub fn meanvar_kl_loss_per_sample(batch: &Tensor, targets: &[RegularizerTargets]) -> Result<KlLoss> {
    let (b, d) = (batch.rows(), batch.cols());
    if d < 2 {
        return Err(Error::invalid("per-sample variance needs at least 2 coordinates"));
    }
    if targets.len() != b {
        return Err(Error::ShapeMismatch {
            context: "meanvar targets",
            expected: vec![b],
            got: vec![targets.len()],
        });
    }
    if let Some(t) = targets.iter().find(|t| !(t.var_target > 0.0)) {
        return Err(Error::invalid(format!("target variance {} must be > 0", t.var_target)));
    }
    let (bf, df) = (b.max(1) as Real, d as Real);
    let mut grad = Tensor::zeros(vec![b, d]);
    let mut loss = 0.0;
    let mut clamped = 0;
    for (i, tg) in targets.iter().enumerate() {
        let row = batch.row(i);
        let mu = row.iter().sum::<Real>() / df;
        let mut var = row.iter().map(|v| (v - mu).powi(2)).sum::<Real>() / df;
        if var < VAR_FLOOR {
            var = VAR_FLOOR;
            clamped += 1;
        }
        let (mt, vt) = (tg.mu_target, tg.var_target);
        loss += 0.5 * ((var + (mu - mt).powi(2)) / vt - 1.0 - (var / vt).ln());
        let d_mu = (mu - mt) / vt;
        let d_var = 0.5 * (1.0 / vt - 1.0 / var);
        for (g, &x) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (d_mu + 2.0 * d_var * (x - mu)) / (df * bf);
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} samples with near-zero variance clamped to {VAR_FLOOR}");
    }
    Ok(KlLoss {
        loss: loss / bf,
        grad,
        clamped,
    })
}

#[derive(Debug, Clone)]
pub struct GanLosses {
    /// `mean softplus(-D(real)) + mean softplus(D(fake))`.
    pub disc_loss: Real,
    pub disc_grads: Gradients,
    /// `mean -log sigmoid(D(fake))`.
    pub gen_loss: Real,
    /// Gradient of `gen_loss` with respect to the fake batch.
    pub gen_grad: Tensor,
}

fn softplus(v: Real) -> Real {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Non-saturating GAN losses for a logit discriminator on `(point, cond)`.
///
/// The discriminator's noise-level input is pinned at `1`.
pub fn gan_losses(
    disc: &NetParams,
    real_batch: &Tensor,
    real_cond: &[Cond],
    fake_batch: &Tensor,
    fake_cond: &[Cond],
) -> Result<GanLosses> {
    if disc.config().out_dim != 1 {
        return Err(Error::invalid("discriminator must output one logit"));
    }
    let (nr, nf) = (real_batch.rows(), fake_batch.rows());
    let real = disc.forward_cached(real_batch, &vec![1.0; nr], real_cond)?;
    let fake = disc.forward_cached(fake_batch, &vec![1.0; nf], fake_cond)?;
    let (nrf, nff) = (nr.max(1) as Real, nf.max(1) as Real);
    let lr = real.output.data();
    let lf = fake.output.data();

    let disc_loss = lr.iter().map(|&v| softplus(-v)).sum::<Real>() / nrf + lf.iter().map(|&v| softplus(v)).sum::<Real>() / nff;
    let up_real = real.output.map(|v| (sigmoid(v) - 1.0) / nrf);
    let up_fake = fake.output.map(|v| sigmoid(v) / nff);
    let mut disc_grads = disc.backward(&real, &up_real)?.grads;
    let gf = disc.backward(&fake, &up_fake)?.grads;
    for (a, b) in disc_grads.slots.iter_mut().zip(&gf.slots) {
        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
    }

    let gen_loss = lf.iter().map(|&v| softplus(-v)).sum::<Real>() / nff;
    let up_gen = fake.output.map(|v| (sigmoid(v) - 1.0) / nff);
    let gen_grad = disc.backward(&fake, &up_gen)?.d_input;
    Ok(GanLosses {
        disc_loss,
        disc_grads,
        gen_loss,
        gen_grad,
    })
}
