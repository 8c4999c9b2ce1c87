//! Dense tensors and the training primitives built on them: 3x3 convolution
//! with zero padding, ReLU, Adam, and He-normal initialization.
//!
//! Everything is generic over [`Scalar`] so the training loops can run in
//! single precision while tests and gradient checks run in double precision.

mod adam;
mod conv;
mod init;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, relu_backward, relu_forward, ConvGrads};
pub use init::init_conv;

use crate::{Error, Result};

/// Floating-point element type: `f32` for fast training, `f64` for tests,
/// gradient checks, and checkpoint storage.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + std::fmt::Display
    + std::fmt::LowerExp
    + Default
    + rustfft::FftNum
{
    /// Type tag recorded in manifests ("f32" / "f64").
    const NAME: &'static str;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn of_f64(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn of_f64(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense rank-4 tensor in (batch, channel, row, column) order, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Tensor4 { n, c, h, w, data }
    }

    /// (batch, channels, rows, cols)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[((b * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline(always)]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        self.data[((b * self.c + c) * self.h + y) * self.w + x] = v;
    }

    /// Contiguous (h*w) slice of one channel plane.
    #[inline(always)]
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let start = (b * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    #[inline(always)]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let start = (b * self.c + c) * self.h * self.w;
        &mut self.data[start..start + self.h * self.w]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Same shape, every element mapped.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor4<T>) {
        assert_eq!(self.dims(), other.dims(), "tensor shape mismatch in add");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Error unless all elements are finite; `what` names the tensor.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.first_non_finite() {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what} (flat index {i})"))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

/// Parameters of one 3x3 convolution layer. Weights are stored
/// (out_ch, in_ch, 3, 3) row-major; the same struct carries gradients,
/// which share the layout of the parameters they correspond to.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// out_ch * in_ch * 9 kernel coefficients.
    pub weights: Vec<T>,
    /// One bias per output channel.
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        ConvParams {
            in_ch,
            out_ch,
            weights: vec![T::zero(); out_ch * in_ch * 9],
            bias: vec![T::zero(); out_ch],
        }
    }

    #[inline(always)]
    pub fn w_idx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.in_ch + ci) * 3 + ky) * 3 + kx
    }

    /// Trainable scalars in this layer: out*in*9 weights + out biases.
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_is_contiguous_row_major() {
        let mut t = Tensor4::<f64>::zeros(2, 3, 4, 5);
        t.set(1, 2, 3, 4, 7.0);
        assert_eq!(t.plane(1, 2)[3 * 5 + 4], 7.0);
        assert_eq!(t.at(1, 2, 3, 4), 7.0);
        assert_eq!(t.as_slice()[((1 * 3 + 2) * 4 + 3) * 5 + 4], 7.0);
    }

    #[test]
    fn non_finite_detection() {
        let mut t = Tensor4::<f32>::zeros(1, 1, 2, 2);
        assert!(t.ensure_finite("x").is_ok());
        t.set(0, 0, 1, 1, f32::NAN);
        assert_eq!(t.first_non_finite(), Some(3));
        assert!(t.ensure_finite("x").is_err());
    }

    #[test]
    fn param_count_formula() {
        let p = ConvParams::<f64>::zeros(32, 32);
        assert_eq!(p.param_count(), 32 * 32 * 9 + 32);
    }
}
