pub mod cli;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod evalsuite;
pub mod matcher;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod relvocab;
pub mod sampler;
pub mod schedule;
pub mod selftest;
pub mod synthworld;
pub mod train;

pub use error::{Error, Result};
