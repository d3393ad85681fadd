//! Single-image reflection separation.
//!
//! An input photograph `I` is modeled as the sum of a transmission layer `T`
//! (the scene behind the glass) and a reflection layer `R`. This crate holds
//! everything needed to learn `I -> (T, R)`: image utilities and metrics, a
//! synthetic-data compositor, dataset ingestion, a frozen VGG-19 perception
//! network, the dilated generator and patch discriminator, the training
//! objectives, the optimization loop, and an evaluation harness.

pub mod checkpoint;
pub mod compositor;
pub mod datapipe;
pub mod error;
pub mod harness;
pub mod imagecore;
pub mod losses;
pub mod model;
pub mod nn;
pub mod perception;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
