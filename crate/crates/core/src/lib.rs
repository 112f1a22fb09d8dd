//! Simulation and correction of susceptibility-induced distortion in
//! EPI-style brain volumes.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`nifti`]: single-file NIfTI-1 reader/writer (optionally gzipped)
//! - [`volume`]: image containers, masks, interpolation, normalization
//! - [`unwarp`]: field-map conversion, displacement warping, Jacobian
//!   intensity modulation, forward distortion simulation
//! - [`measures`]: similarity metrics (L1, gradient L2, SSIM, mutual
//!   information), the composite training loss, RMSE and paired t-test
//! - [`net`]: a 2.5D residual U-Net with reverse-mode differentiation,
//!   Adam, plateau scheduling and checkpointing
//! - [`data`]: 2.5D sample assembly, augmentations, subject-level splits
//! - [`phantom`]: synthetic co-registered T1w/b0/displacement quadruples
//! - [`train`] / [`infer`]: training loop and slice-wise inference

pub mod data;
pub mod error;
pub mod infer;
pub mod measures;
pub mod net;
pub mod nifti;
pub mod phantom;
pub mod train;
pub mod unwarp;
pub mod volume;

pub use error::{Error, Result};
