//! Motion-compensated reconstruction of dynamic (CINE) MR image sequences
//! from undersampled multi-coil k-space.
//!
//! The pipeline alternates group-wise dense motion estimation with
//! motion-compensated conjugate-gradient SENSE blocks, starting from a
//! zero-filled initialization and a motion-free first SENSE block. A
//! synthetic dynamic phantom with analytic ground-truth motion, k-t
//! undersampling mask generation, and PSNR/SSIM/EPE metrics make the whole
//! loop testable end to end.

pub mod cg;
pub mod container;
pub mod fft;
pub mod metrics;
pub mod motion;
pub mod operators;
pub mod phantom;
pub mod pipeline;
pub mod types;

pub mod cli;

pub use num_complex::Complex64;
