//! Exposure-fusion laboratory.
//!
//! * [`image`]: pixel containers, file I/O, exposure stacks and the
//!   fused/measurement index sets.
//! * [`weights`]: contrast·saturation·exposedness weights and guided
//!   filtering.
//! * [`pyramid`]: Gaussian/Laplacian pyramids and classical pyramid fusion.
//! * [`mef_ssim`]: the MEF-SSIM index and the decoupled training losses.
//! * [`autodiff`]: a small reverse-mode differentiation engine.
//! * [`msfnet`]: the multi-scale attention fusion network.
//! * [`training`]: set construction, optimization and evaluation harnesses.
//! * [`synth`]: deterministic synthetic HDR scenes and brackets.

pub mod autodiff;
pub mod error;
pub mod image;
pub mod mef_ssim;
pub mod msfnet;
pub mod par;
pub mod pyramid;
pub mod synth;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
