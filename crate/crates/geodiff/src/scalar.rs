//! Floating point abstraction shared by the generic numerical kernels.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive};

/// Real scalar usable by the models, the external flows and the integrators.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    /// Lossy conversion used at I/O boundaries.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn two_pi() -> Self {
        Self::TAU()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Reduces a periodic coordinate to `[0, 1)`.
#[inline]
pub fn wrap_unit<S: Scalar>(x: S) -> S {
    let r = x - x.floor();
    // `x - floor(x)` can round up to exactly 1 for tiny negative inputs.
    if r >= S::one() {
        S::zero()
    } else {
        r
    }
}

/// Signed representative of a periodic difference in `[-1/2, 1/2)`.
#[inline]
pub fn wrap_centered<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    wrap_unit(x + half) - half
}
