//! Part-aware bottom-up group reasoning for `<individual, group, interaction>`
//! triplet detection.

pub mod error;
pub mod data;
pub mod evaluation;
pub mod geometry;
pub mod harness;
pub mod inference;
pub mod kv;
pub mod losses;
pub mod matching;
pub mod network;
pub mod partmask;

pub use error::{Error, Result};
