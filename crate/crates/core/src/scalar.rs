//! Scalar abstraction for the geometry and optimization code.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// floating point: f32 or f64
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    /// Lossy conversion to `f64`, used for reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Step used for central-difference derivatives.
    fn fd_step() -> Self;

    /// Below this rotation angle the closed-form SO(3)/SE(3) series switch to Taylor expansions.
    fn small_angle() -> Self;
}

impl Real for f32 {
    fn fd_step() -> Self {
        1e-3
    }
    fn small_angle() -> Self {
        1e-2
    }
}

impl Real for f64 {
    fn fd_step() -> Self {
        1e-6
    }
    fn small_angle() -> Self {
        1e-4
    }
}
