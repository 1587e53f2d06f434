//! Seeded weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// He-style uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in.max(1) as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit)).expect("valid init shape")
}
