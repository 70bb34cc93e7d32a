//! Experiment harness around the rectified block-sparse attention engine.

pub mod error;
pub mod experiment;
pub mod io;
pub mod plot;
pub mod runner;
pub mod synth;
pub mod verify;

pub use error::{HarnessError, Result};
