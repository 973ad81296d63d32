//! Source-free domain adaptation with spectral neighbourhood clustering,
//! implicit feature augmentation and feature disentanglement, on small dense
//! networks.

pub mod adapt;
pub mod banks;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
