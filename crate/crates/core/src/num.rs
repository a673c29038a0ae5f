//! Scalar abstraction for the numeric routines (least squares, interpolation,
//! percentiles). Everything downstream of the oracle is written against
//! [`Scalar`] so it can run in `f32` or `f64`; the crate root re-exports `f64`
//! instantiations.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to every float type")
    }

    fn of_u64(x: u64) -> Self {
        Self::from_u64(x).expect("u64 converts to every float type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// Relative tolerance used for rank decisions.
    fn rank_eps() -> Self {
        Self::epsilon().sqrt()
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
}
