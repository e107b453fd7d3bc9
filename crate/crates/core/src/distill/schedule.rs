use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Real;

/// Re-noising schedule policies for the CA and DM branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SchedulePolicy {
    /// `tau_ca = tau_dm ~ U(0, 1)` with one shared noise draw.
    CoupledShared,
    /// Independent `U(0, 1)` draws.
    DecoupledFull,
    /// Independent `U(t, 1)` draws.
    DecoupledConstrained,
    /// `tau_ca ~ U(t, 1)`, `tau_dm ~ U(0, 1)`.
    DecoupledHybrid,
}

impl SchedulePolicy {
    pub const ALL: [SchedulePolicy; 4] = [
        SchedulePolicy::CoupledShared,
        SchedulePolicy::DecoupledFull,
        SchedulePolicy::DecoupledConstrained,
        SchedulePolicy::DecoupledHybrid,
    ];

    /// Circled row marker used in summary tables.
    pub fn marker(self) -> &'static str {
        match self {
            SchedulePolicy::CoupledShared => "①",
            SchedulePolicy::DecoupledFull => "②",
            SchedulePolicy::DecoupledConstrained => "③",
            SchedulePolicy::DecoupledHybrid => "④",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SchedulePolicy::CoupledShared => "coupled_shared",
            SchedulePolicy::DecoupledFull => "decoupled_full",
            SchedulePolicy::DecoupledConstrained => "decoupled_constrained",
            SchedulePolicy::DecoupledHybrid => "decoupled_hybrid",
        }
    }

    pub fn is_coupled(self) -> bool {
        self == SchedulePolicy::CoupledShared
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub policy: SchedulePolicy,
    /// Replaces the policy's CA (or shared) range when set.
    pub tau_ca_range: Option<(Real, Real)>,
    /// Replaces the policy's DM range when set.
    pub tau_dm_range: Option<(Real, Real)>,
}

impl ScheduleConfig {
    pub fn new(policy: SchedulePolicy) -> Self {
        ScheduleConfig {
            policy,
            tau_ca_range: None,
            tau_dm_range: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.tau_ca_range, self.tau_dm_range].into_iter().flatten() {
            check_range(r)?;
        }
        Ok(())
    }

    /// `(ca, dm)` sampling ranges at generator step `t`.
    pub fn ranges(&self, t: Real) -> ((Real, Real), (Real, Real)) {
        let (ca, dm) = match self.policy {
            SchedulePolicy::CoupledShared | SchedulePolicy::DecoupledFull => ((0.0, 1.0), (0.0, 1.0)),
            SchedulePolicy::DecoupledConstrained => ((t, 1.0), (t, 1.0)),
            SchedulePolicy::DecoupledHybrid => ((t, 1.0), (0.0, 1.0)),
        };
        let ca = self.tau_ca_range.unwrap_or(ca);
        let dm = if self.policy.is_coupled() { ca } else { self.tau_dm_range.unwrap_or(dm) };
        (ca, dm)
    }
}

fn check_range((lo, hi): (Real, Real)) -> Result<()> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || !(lo < hi) {
        return Err(Error::invalid(format!("empty or out-of-bounds tau range [{lo}, {hi}]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauDraw {
    pub tau_ca: Real,
    pub tau_dm: Real,
    pub shared_eps: bool,
}

/// One draw of `(tau_ca, tau_dm)` for a sample at generator step `t`.
///
/// The coupled policy consumes one uniform; decoupled policies consume two,
/// CA first.
pub fn sample_tau(schedule: &ScheduleConfig, t: Real, rng: &mut impl Rng) -> Result<TauDraw> {
    let (ca, dm) = schedule.ranges(t);
    check_range(ca)?;
    check_range(dm)?;
    if schedule.policy.is_coupled() {
        let tau = rng::uniform(rng, ca.0, ca.1);
        return Ok(TauDraw {
            tau_ca: tau,
            tau_dm: tau,
            shared_eps: true,
        });
    }
    let tau_ca = rng::uniform(rng, ca.0, ca.1);
    let tau_dm = rng::uniform(rng, dm.0, dm.1);
    Ok(TauDraw {
        tau_ca,
        tau_dm,
        shared_eps: false,
    })
}

/// Uniform few-step grid `{0, 1/N, ..., (N-1)/N}`.
pub fn step_grid(n_steps: usize) -> Result<Vec<Real>> {
    if n_steps == 0 {
        return Err(Error::invalid("generator needs at least one step"));
    }
    Ok((0..n_steps).map(|k| k as Real / n_steps as Real).collect())
}
