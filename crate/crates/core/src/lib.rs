//! Point-cloud learning engine built around a hierarchical selective
//! state-space encoder: deterministic geometry kernels, a minimal
//! reverse-mode autodiff tape, PSSM blocks, task decoders for
//! classification, completion and segmentation, and the synthetic
//! nested-anatomy data generators used to train and verify everything at
//! desk scale on a CPU.

pub mod autodiff;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod mat;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod ssm;

pub use error::{Error, Result};
pub use mat::Mat;
