use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

/// Element type of every tensor: `f32` for training, `f64` for verification.
pub trait Scalar: Float + Debug + Default + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Raw bits widened to 64, for bitwise comparisons.
    fn to_bits64(self) -> u64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn to_bits64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn to_bits64(self) -> u64 {
        self.to_bits()
    }
}
