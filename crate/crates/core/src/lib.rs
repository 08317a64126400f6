//! Spectral-spatial structure (S3) loss for pan-sharpening.
//!
//! The crate provides:
//!
//! * [`raster`]: planar images, normalization, graying and clipped-window
//!   statistics backed by integral images;
//! * [`corrmap`]: the correlation map `S` between grayed MS and PAN;
//! * [`s3loss`]: the correlation-weighted spectral term, the normalized
//!   gradient spatial term, their sum and the analytic gradient;
//! * [`scalepipe`]: Gaussian degradation, bicubic upsampling, training-pair
//!   construction and a synthetic misaligned-scene generator;
//! * [`metrics`]: ERGAS, SCC and the translation-searched n-ERGAS;
//! * [`toytrain`]: a small differentiable sharpener trained with either a
//!   plain L2 objective or the S3 loss.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod corrmap;
pub mod error;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod s3loss;
pub mod scalar;
pub mod scalepipe;
pub mod toytrain;

pub use corrmap::{corr_map, correlation, CorrMap, CorrParams};
pub use error::{Error, Result};
pub use raster::{gray, normalize, window_cov, window_mean, window_std, Level, Plane, Raster, StatConfig};
pub use s3loss::{grad_map, s3_loss, s3_loss_grad, spatial_loss, spectral_loss, LossBreakdown, LossConfig, LossGrad};
pub use scalar::Scalar;

pub type Plane32 = Plane<f32>;
pub type Plane64 = Plane<f64>;
pub type Raster32 = Raster<f32>;
pub type Raster64 = Raster<f64>;
pub type CorrMap32 = CorrMap<f32>;
pub type CorrMap64 = CorrMap<f64>;
