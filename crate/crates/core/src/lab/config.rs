use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{MixtureSpec, RegularizerTargets};
use crate::distill::{DistillConfig, Mode, Regularizer, ScheduleConfig, SchedulePolicy};
use crate::error::{Error, Result};
use crate::flowsim::TeacherConfig;
use crate::tensor::Real;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "LAB_SEED";

/// A distillation run as written in a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub schedule_policy: SchedulePolicy,
    pub alpha: Real,
    pub lambda: Real,
    pub n_steps: usize,
    pub seed: u64,
    pub iterations: usize,
    pub batch: usize,
    #[serde(default = "defaults::ttur_ratio")]
    pub ttur_ratio: usize,
    #[serde(default = "defaults::regularizer")]
    pub regularizer: Regularizer,
    #[serde(default = "defaults::w_gan")]
    pub w_gan: Real,
    #[serde(default = "defaults::w_kl")]
    pub w_kl: Real,
    /// Global KL targets; both or neither.
    #[serde(default)]
    pub kl_mu_target: Option<Real>,
    #[serde(default)]
    pub kl_var_target: Option<Real>,
    #[serde(default = "defaults::yes")]
    pub normalizer_on: bool,
    #[serde(default)]
    pub observer_mode: bool,
    #[serde(default)]
    pub deterministic_backsim: bool,
    #[serde(default)]
    pub tau_ca_range: Option<(Real, Real)>,
    #[serde(default)]
    pub tau_dm_range: Option<(Real, Real)>,
    #[serde(default = "defaults::gen_lr")]
    pub gen_lr: Real,
    #[serde(default = "defaults::fake_lr")]
    pub fake_lr: Real,
    #[serde(default = "defaults::disc_lr")]
    pub disc_lr: Real,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    /// Generated and held-out points per label at each evaluation.
    #[serde(default = "defaults::eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "defaults::yes")]
    pub dump_samples: bool,
    /// Mixture spec file; the built-in eight-mode mixture when absent.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Loaded when the file exists, trained and written there otherwise.
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

mod defaults {
    use crate::distill::Regularizer;
    use crate::tensor::Real;

    pub fn ttur_ratio() -> usize {
        5
    }
    pub fn regularizer() -> Regularizer {
        Regularizer::None
    }
    pub fn w_gan() -> Real {
        1e-2
    }
    pub fn w_kl() -> Real {
        300.0
    }
    pub fn yes() -> bool {
        true
    }
    pub fn gen_lr() -> Real {
        1e-4
    }
    pub fn fake_lr() -> Real {
        1e-4
    }
    pub fn disc_lr() -> Real {
        1e-4
    }
    pub fn eval_every() -> usize {
        100
    }
    pub fn eval_samples() -> usize {
        500
    }
}

impl RunConfig {
    /// Parses and validates; errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_keyed(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(keyed_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config {
            key: key.into(),
            message,
        });
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha", format!("must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return bad("lambda", format!("must be finite and > 0, got {}", self.lambda));
        }
        for (key, v) in [("n_steps", self.n_steps), ("iterations", self.iterations), ("batch", self.batch), ("eval_every", self.eval_every), ("eval_samples", self.eval_samples)] {
            if v == 0 {
                return bad(key, "must be positive".into());
            }
        }
        for (key, v) in [("gen_lr", self.gen_lr), ("fake_lr", self.fake_lr), ("disc_lr", self.disc_lr)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(key, format!("must be finite and > 0, got {v}"));
            }
        }
        for (key, v) in [("w_gan", self.w_gan), ("w_kl", self.w_kl)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(key, format!("must be finite and >= 0, got {v}"));
            }
        }
        match (self.kl_mu_target, self.kl_var_target) {
            (Some(_), None) => return bad("kl_var_target", "required when kl_mu_target is set".into()),
            (None, Some(_)) => return bad("kl_mu_target", "required when kl_var_target is set".into()),
            (_, Some(v)) if !(v > 0.0) => return bad("kl_var_target", format!("must be > 0, got {v}")),
            _ => {}
        }
        for (key, r) in [("tau_ca_range", self.tau_ca_range), ("tau_dm_range", self.tau_dm_range)] {
            if let Some((lo, hi)) = r {
                if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || !(lo < hi) {
                    return bad(key, format!("[{lo}, {hi}] is not a non-empty range inside [0, 1]"));
                }
            }
        }
        if let Some(t) = &self.teacher {
            t.validate().map_err(|e| Error::Config {
                key: "teacher".into(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Replaces the seed with `LAB_SEED` when it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Some(seed) = seed_from_env()? {
            self.seed = seed;
        }
        Ok(())
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            alpha: self.alpha,
            lambda: self.lambda,
            n_steps: self.n_steps,
            ttur_ratio: self.ttur_ratio,
            mode: self.mode,
            regularizer: self.regularizer,
            w_gan: self.w_gan,
            w_kl: self.w_kl,
            kl_targets: self.kl_mu_target.zip(self.kl_var_target).map(|(mu, var)| RegularizerTargets {
                mu_target: mu,
                var_target: var,
            }),
            normalizer_on: self.normalizer_on,
            observer_mode: self.observer_mode,
            deterministic_backsim: self.deterministic_backsim,
            batch: self.batch,
            gen_lr: self.gen_lr,
            fake_lr: self.fake_lr,
            disc_lr: self.disc_lr,
            schedule: ScheduleConfig {
                policy: self.schedule_policy,
                tau_ca_range: self.tau_ca_range,
                tau_dm_range: self.tau_dm_range,
            },
        }
    }

    pub fn dataset_spec(&self) -> Result<MixtureSpec> {
        match &self.dataset {
            Some(p) => MixtureSpec::load(p),
            None => Ok(MixtureSpec::gmm8()),
        }
    }

    /// Applies `key=value` overrides; values parse as JSON and fall back to
    /// plain strings. Dotted keys reach into nested objects.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }
}

/// The `LAB_SEED` value, if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| Error::Config {
            key: SEED_ENV.into(),
            message: format!("`{s}` is not an unsigned integer"),
        }),
        Err(_) => Ok(None),
    }
}

pub(crate) fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        key: spec.into(),
        message: "override must look like key=value".into(),
    })?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
    let mut slot = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if slot.is_null() {
            *slot = serde_json::Value::Object(Default::default());
        }
        let obj = slot.as_object_mut().ok_or_else(|| Error::Config {
            key: key.into(),
            message: format!("`{}` is not an object", parts[..i].join(".")),
        })?;
        slot = obj.entry(part.to_string()).or_insert(serde_json::Value::Null);
    }
    *slot = parsed;
    Ok(())
}

pub(crate) fn parse_keyed<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(keyed_error)
}

fn keyed_error<E: std::fmt::Display>(e: serde_path_to_error::Error<E>) -> Error {
    let path = e.path().to_string();
    let message = e.into_inner().to_string();
    let named = message
        .split_once("missing field `")
        .and_then(|(_, rest)| rest.split_once('`'))
        .map(|(k, _)| k.to_string());
    let key = match named {
        Some(k) if path == "." => k,
        Some(k) => format!("{path}.{k}"),
        None => path,
    };
    Error::Config { key, message }
}
