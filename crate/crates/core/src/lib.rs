pub mod autodiff;
pub mod checkpoint;
pub mod conformer;
pub mod error;
pub mod losses;
pub mod molgraph;
pub mod net2d;
pub mod net3d;
pub mod nn;
pub mod selftest;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
