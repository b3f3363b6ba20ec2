//! Simulated SSVEP brain-computer interface command loop.
//!
//! Synthetic EEG ([`synth`]) is preprocessed ([`dsp`]), decoded with
//! filter-bank canonical correlation analysis ([`fbcca`]), mapped to agent
//! commands ([`codec`]), carried over a lossy framed link ([`link`]) to a
//! simulated reconnaissance agent ([`agent`]), and the agent's execution
//! status comes back as a red / yellow / green flashing block.
//! [`session`] runs and scores the closed loop; [`gateway`] exposes it live.

pub mod agent;
pub mod cli;
pub mod codec;
pub mod config;
pub mod dsp;
pub mod error;
pub mod fbcca;
pub mod gateway;
pub mod link;
pub mod session;
pub mod spectrum;
pub mod synth;

pub use error::{Error, Result};
