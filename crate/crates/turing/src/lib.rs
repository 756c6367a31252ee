//! Blinded reader study: readers label tumors as real or synthetic.
//!
//! Case sets are assembled and rendered offline; sessions capture
//! verdicts through an HTTP JSON API and persist as append-only event logs.

pub mod api;
pub mod cases;
pub mod design;
pub mod error;
pub mod reference;
pub mod render;
pub mod report;
pub mod session;
pub mod store;

pub use design::{ReaderLevel, Truth, TumorType, TuringDesign, Verdict};
pub use error::{Error, Result};
