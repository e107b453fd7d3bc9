//! Distribution matching distillation, split into its two directions.
//!
//! For a generated point `x`, re-noised to `x_tau`, the practical DMD update
//! direction is `cfg(real)(x_tau) - fake_cond(x_tau)`. Expanding the guidance
//! term splits it exactly into
//!
//! ```text
//! delta_dm = real_cond - fake_cond                       (distribution matching)
//! delta_ca = (alpha - 1) * (real_cond - real_uncond)     (CFG augmentation)
//! ```
//!
//! The decoupled variant evaluates the two parts at independently drawn
//! noise levels `tau_dm` and `tau_ca`. Generator parameters are updated
//! through the proxy loss `|| G - stop_grad(G + lambda * delta) ||^2`, whose
//! gradient on the generator output is `-2 lambda delta`.

mod direction;
mod regularizer;
mod schedule;
mod trainer;

pub use direction::{
    delta_ca, delta_dm, dmd_direction_coupled, dmd_direction_decoupled, dmd_eq3_direction,
    proxy_loss_and_grad, DirectionDraw, UpdateDirection,
};
pub use regularizer::{gan_losses, meanvar_kl_loss, meanvar_kl_loss_per_sample, GanLosses, KlLoss};
pub use schedule::{sample_tau, step_grid, ScheduleConfig, SchedulePolicy, TauDraw};
pub use trainer::{
    backward_simulate, fake_model_update, generate, generator_update, observer_probe, DistillConfig,
    DistillState, Mode, ProbeRow, Regularizer, StepStats,
};
