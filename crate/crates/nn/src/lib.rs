//! Minimal differentiable-computation substrate.
//!
//! Dense `f64` tensors, a recording [`Graph`] with exact reverse-mode
//! gradients for the primitives the encoders and the causal decoder need,
//! an [`Adam`] optimizer, named parameter storage with a bit-exact binary
//! checkpoint format, and central finite-difference gradient verification.

mod error;
mod graph;
mod gradcheck;
mod optim;
mod params;
mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_fn, grad_check_inputs, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub use optim::Adam;
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{dot, norm2, Tensor};

/// Layer-norm epsilon used throughout.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Floor for L2-normalization denominators.
pub const L2_EPS: f64 = 1e-12;

/// Draws a tensor with i.i.d. `N(0, std²)` entries.
pub fn gaussian<R: rand::Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Glorot-uniform initialization for a `[fan_in, fan_out]` weight.
pub fn glorot<R: rand::Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
}
