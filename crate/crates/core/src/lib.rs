//! Cooperative multi-agent cross-domain recommendation for cold-start users.
//!
//! The crate is organised bottom-up: [`numerics`] provides matrices and a
//! reverse-mode gradient engine, [`data`] models multi-domain rating data and
//! cold-start splits, [`mf`] pretrains per-domain embeddings, [`bridge`]
//! transforms source embeddings into the target space, [`marl`] learns the
//! per-domain integration weights with MAPPO, and [`eval`] runs the
//! cold-start protocol and experiment drivers.

pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod marl;
pub mod data;
pub mod mf;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
