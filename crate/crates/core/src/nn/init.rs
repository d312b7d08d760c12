use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// He (Kaiming) normal initialization: `N(0, 2 / fan_in)`.
pub fn he_init<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    he_init_with(shape, fan_in, &mut Pcg64::seed_from_u64(seed))
}

/// [`he_init`] drawing from a caller-owned generator.
pub fn he_init_with<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64_lossy(z * std)
    })
}
