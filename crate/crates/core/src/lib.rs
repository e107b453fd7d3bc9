//! A desk-scale laboratory for distribution matching distillation (DMD).
//!
//! The crate trains a small conditional flow-matching teacher on synthetic
//! low-dimensional mixtures, distills it into few-step generators and measures
//! what happens. The DMD update is split into its two parts:
//!
//! - the *distribution matching* direction `real_cond - fake_cond`,
//! - the *CFG augmentation* direction `(alpha - 1) * (real_cond - real_uncond)`,
//!
//! which can be driven independently, re-noised on independent schedules, or
//! replaced by other regularizers.
//!
//! Module map:
//!
//! - [`tensor`], [`nn`], [`optim`], [`checkpoint`]: numerical substrate.
//! - [`data`]: conditional Gaussian mixtures with exact statistics.
//! - [`flowsim`]: re-noising, guidance, teacher training and sampling.
//! - [`distill`]: update directions, schedules, regularizers, training step.
//! - [`metrics`]: sliced Wasserstein, per-sample statistics, coverage, IKL.
//! - [`lab`]: run configs, presets, artifacts and SVG plots.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod flowsim;
pub mod lab;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

// Book chapters are compiled as doc-tests so the snippets cannot drift.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/substrate.md")]
    mod substrate {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/decomposition.md")]
    mod decomposition {}
    #[doc = include_str!("../../../book/src/schedules.md")]
    mod schedules {}
    #[doc = include_str!("../../../book/src/regularizers.md")]
    mod regularizers {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
