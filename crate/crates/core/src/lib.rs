//! Adversarial tumor synthesis on organ-labeled volumes.
//!
//! A segmentation network trained on labeled tumors acts as the
//! discriminator for a generator that darkens organ tissue under a sampled
//! mask. The same network gates synthetic cases by the fraction of the mask
//! it segments, and accepted cases augment segmentation training online.

pub mod adversarial;
pub mod benchmark;
pub mod components;
pub mod error;
pub mod filter;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod quality;
pub mod synthesis;
pub mod tumor_mask;
pub mod volume;

pub use error::{Error, Result};
pub use grid::Grid;
pub use volume::{Case, HuWindow, LabelMap, Volume};
