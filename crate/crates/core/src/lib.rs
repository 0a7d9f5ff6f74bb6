//! Label-aligned transfer of object-detection annotations across datasets
//! with heterogeneous label spaces.

pub mod annot;
pub mod bench;
pub mod checkpoint;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod featsim;
pub mod labelspace;
pub mod latcore;
pub mod numerics;
pub mod pipeline;
pub mod ppg;
pub mod sff;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
