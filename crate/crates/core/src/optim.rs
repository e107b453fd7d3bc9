//! Adam with bias correction, and exponential moving averages of parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, NetParams};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl AdamConfig {
    pub fn with_lr(lr: Real) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetParams, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .slots()
                .iter()
                .map(|s| Tensor::zeros(s.shape().to_vec()))
                .collect()
        };
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params`.
    pub fn step(&mut self, params: &mut NetParams, grads: &Gradients) -> Result<()> {
        if !params.congruent(grads) || self.m.len() != grads.slots.len() {
            return Err(Error::invalid("adam_step: gradients not congruent with parameters"));
        }
        grads.check_finite()?;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .slots_mut()
            .iter_mut()
            .zip(&grads.slots)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `ema <- decay * ema + (1 - decay) * live`, elementwise.
pub fn ema_update(ema: &mut NetParams, live: &NetParams, decay: Real) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("ema decay {decay} outside [0, 1]")));
    }
    if !ema.same_shape_family(live) {
        return Err(Error::invalid("ema_update: parameter shapes differ"));
    }
    if decay == 1.0 {
        return Ok(());
    }
    for (e, l) in ema.slots_mut().iter_mut().zip(live.slots()) {
        for (e, &l) in e.data_mut().iter_mut().zip(l.data()) {
            *e = if decay == 0.0 { l } else { decay * *e + (1.0 - decay) * l };
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetConfig;

    fn scalar_net() -> NetParams {
        let cfg = NetConfig {
            data_dim: 1,
            out_dim: 1,
            label_count: 1,
            hidden: vec![],
            n_freqs: 0,
            time_dim: 0,
            cond_dim: 0,
        };
        NetParams::zeros(cfg).unwrap()
    }

    fn grads_filled(p: &NetParams, g: Real) -> Gradients {
        let mut grads = Gradients::zeros_like(p);
        for s in &mut grads.slots {
            s.data_mut().iter_mut().for_each(|v| *v = g);
        }
        grads
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut rng = crate::rng::seeded(0, 0);
        let mut p = NetParams::init(NetConfig::denoiser(2, 4), &mut rng).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let zero = Gradients::zeros_like(&p);
        adam.step(&mut p, &zero).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar_net();
        let mut adam = AdamState::new(&p, AdamConfig::with_lr(1e-3));
        let g = grads_filled(&p, 0.5);
        adam.step(&mut p, &g).unwrap();
        let delta = p.slots()[3].data()[0];
        let want = -1e-3 * (0.5 / (0.5 + 1e-8));
        assert!((delta - want).abs() < 1e-18, "{delta} vs {want}");
        assert!((delta - -9.9999998e-4).abs() < 1e-15);
    }

    #[test]
    fn moments_follow_geometric_sums() {
        let mut p = scalar_net();
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(&p, cfg);
        let g = 0.3;
        let grads = grads_filled(&p, g);
        adam.step(&mut p, &grads).unwrap();
        adam.step(&mut p, &grads).unwrap();
        // m_2 = (1 - b1)(1 + b1) g, v_2 = (1 - b2)(1 + b2) g^2.
        let m_want = (1.0 - cfg.beta1) * (1.0 + cfg.beta1) * g;
        let v_want = (1.0 - cfg.beta2) * (1.0 + cfg.beta2) * g * g;
        assert!((adam.m[3].data()[0] - m_want).abs() < 1e-15);
        assert!((adam.v[3].data()[0] - v_want).abs() < 1e-15);
        // Both steps see the same bias-corrected ratio g/|g|.
        let p_want = -2.0 * cfg.lr * g / (g + cfg.eps);
        assert!((p.slots()[3].data()[0] - p_want).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = scalar_net();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let g = grads_filled(&p, Real::NAN);
        assert!(matches!(adam.step(&mut p, &g), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ema_limits_and_midpoint() {
        let mut ema = scalar_net();
        let mut live = scalar_net();
        live.slots_mut()[3].data_mut()[0] = 2.0;
        let orig = ema.clone();
        ema_update(&mut ema, &live, 1.0).unwrap();
        assert_eq!(ema, orig);
        ema_update(&mut ema, &live, 0.5).unwrap();
        assert_eq!(ema.slots()[3].data()[0], 1.0);
        ema_update(&mut ema, &live, 0.0).unwrap();
        assert_eq!(ema, live);
        assert!(ema_update(&mut ema, &live, 1.5).is_err());
        assert!(ema_update(&mut ema, &live, -0.1).is_err());
    }
}
