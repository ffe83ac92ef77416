//! Network building blocks: 3D convolution, instance normalization,
//! trilinear upsampling and the residual encoder-decoder assembly, all
//! implemented directly on ndarray buffers.
//!
//! Everything is generic over the element type so training runs in f32
//! while gradient checks run the exact same code paths in f64. All
//! accumulation orders are fixed, which makes forward and backward passes
//! bit-deterministic regardless of thread count.

pub mod conv;
pub mod norm;
pub mod segresnet;
pub mod upsample;
pub mod weights;

use ndarray::Array4;

/// Element type for network math.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// y = max(0, x)
pub fn relu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through relu given the *post*-activation values.
pub fn relu_backward<T: Scalar>(y: &Array4<T>, gy: &Array4<T>) -> Array4<T> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| {
        if v <= T::zero() {
            *g = T::zero();
        }
    });
    gx
}

/// A named, flattened view of one parameter tensor and its gradient buffer.
pub struct ParamView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}
