//! Organ-level vision-language pretraining on synthetic CT-like volumes.
//!
//! The crate is organized as a library with runnable examples under
//! `examples/` (one per capability) plus a thin `ctglip` binary that
//! exposes the same entry points as subcommands.

pub mod abnodict;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod reportproc;
pub mod seeding;
pub mod synthdata;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};
