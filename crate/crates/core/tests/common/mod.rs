//! Procedural fixtures shared by the integration tests.

#![allow(dead_code)]

use palette_styler::imaging::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth sinusoidal image; low frequencies keep activation patterns stable
/// under small parameter perturbations.
pub fn smooth_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: Vec<f32> = (0..9).map(|_| rng.random_range(0.5..3.0)).collect();
    ImageTensor::from_fn(size, size, |y, x| {
        let (u, v) = (y as f32 / size as f32, x as f32 / size as f32);
        [0, 1, 2]
            .map(|c| 0.5 + 0.4 * (f[3 * c] * u + f[3 * c + 1] * v + f[3 * c + 2] * u * v).sin())
    })
    .unwrap()
}

/// Textured image with higher, per-seed frequencies.
pub fn toy_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: Vec<f32> = (0..12).map(|_| rng.random_range(1.0..12.0)).collect();
    ImageTensor::from_fn(size, size, |y, x| {
        let (u, v) = (y as f32 / size as f32, x as f32 / size as f32);
        [0, 1, 2].map(|c| {
            0.5 + 0.45
                * (f[4 * c] * u + f[4 * c + 1] * v + f[4 * c + 2] * (u * f[4 * c + 3]).sin()).sin()
        })
    })
    .unwrap()
}
