use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Normal(0, std) samples redrawn until they fall within two standard
/// deviations.
pub(crate) fn trunc_normal<R: Rng>(rng: &mut R, n: usize, std: f32) -> Vec<f32> {
    let normal = Normal::new(0.0f32, std).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}
