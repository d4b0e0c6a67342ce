//! Loss-function laboratory for angular-margin softmax heads with hard-sample
//! mining and closed-set label self-correction.
//!
//! The pieces, bottom up:
//!
//! - [`hypersphere`]: unit vectors, clamped cosine matrices, `cos(θ + m)`.
//! - [`heads`]: forward and hand-derived backward passes for NormFace,
//!   ArcFace, CosFace, Focal, MV-Arc, Curricular, BoundaryF1 and BoundaryFace.
//! - [`noisegen`]: clustered hypersphere datasets with closed-set label flips
//!   and open-set input replacement, plus a ground-truth ledger.
//! - [`model`] and [`trainer`]: a small embedding network trained with
//!   momentum SGD, warm-up and a step learning-rate schedule.
//! - [`audit`]: central finite differences in double-double precision.
//! - [`eval`]: verification accuracy and noise-detection curves.
//! - [`io`]: text formats for datasets, ledgers, checkpoints and metrics.

pub mod audit;
pub mod error;
pub mod eval;
pub mod heads;
pub mod hypersphere;
pub mod io;
pub mod model;
pub mod noisegen;
pub mod numeric;
pub mod trainer;

pub use error::{Error, Result};
