//! DiffEnc: variational diffusion models with a time-dependent encoder.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod io;
pub mod nn;
pub mod objective;
pub mod predictor;
pub mod process;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod verify;

pub use encoder::{EncoderKind, EncoderSpec};
pub use error::{Error, Result};
pub use predictor::Denoiser;
pub use process::GaussianParams;
pub use schedule::{LogLinearSchedule, SchedulePoint};
