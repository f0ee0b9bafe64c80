//! Deterministic parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

/// Zero-mean Gaussian init via Box-Muller on the seeded stream.
pub fn gaussian<E: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], sigma: f64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(E::from_f64(sigma * r * theta.cos()));
        if data.len() < n {
            data.push(E::from_f64(sigma * r * theta.sin()));
        }
    }
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

pub fn ones<E: Scalar>(shape: &[usize]) -> Tensor<E> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![E::one(); n]).expect("shape/data agree by construction")
}
