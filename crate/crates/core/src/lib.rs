//! Zero-shot cognitive diagnosis for a newly launched domain.
//!
//! The pipeline pre-trains a cognitive diagnosis model over several source
//! domains while splitting each student's state into a domain-shared and a
//! domain-specific part, transfers the shared parts to the new domain, warms
//! up cold-start students with practice logs copied from similar early-bird
//! students, and finally evaluates and recommends questions.

pub mod adapt;
pub mod cdm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod pretrain;
pub mod recommend;
pub mod synth;

pub use error::{Error, Result};
