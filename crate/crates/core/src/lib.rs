//! Multispectral canopy trait estimation: vegetation indices, stratified
//! splitting, the VI-SABlock regression network, VICReg pretraining,
//! fine-tuning and Grad-CAM attribution.

pub mod error;
pub mod explain;
pub mod io;
pub mod net;
pub mod partition;
pub mod spectral;
pub mod ssl;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
