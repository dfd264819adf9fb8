//! Scalar abstraction over the two supported storage precisions.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Storage scalar for matrices, adapters and model weights.
///
/// Only `f32` and `f64` implement it. Kernels that need a wide accumulator
/// go through [`Real::as_f64`] / [`Real::of`].
pub trait Real:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Short name used in diagnostics and manifests.
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Numeric precision selected at the command line or in a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}
