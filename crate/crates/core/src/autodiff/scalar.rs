use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Scalar element type for tensors: `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Default + 'static {
    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts to scalar")
    }

    fn into_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
