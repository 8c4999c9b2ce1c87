//! Weight initialization for the 3x3 convolution layers.
//!
//! He-normal: weights ~ N(0, 2 / fan_in) with fan_in = in_ch * 9, biases
//! zero. Samples are always drawn in f64 and then cast to the working scalar
//! type, so f32 and f64 models built from the same stream start from the same
//! values (up to the cast).

use super::{ConvParams, Scalar};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// Initialize one conv layer in place from `rng`.
pub fn init_conv<T: Scalar>(p: &mut ConvParams<T>, rng: &mut ChaCha12Rng) {
    let std = (2.0 / (p.in_ch as f64 * 9.0)).sqrt();
    let dist = Normal::new(0.0, std).expect("std is positive and finite");
    for w in p.weights.iter_mut() {
        *w = T::of_f64(dist.sample(rng));
    }
    for b in p.bias.iter_mut() {
        *b = T::zero();
    }
}
