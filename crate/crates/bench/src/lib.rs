//! Shared fixtures for the criterion benches.

use hmoe_core::config::{GroupSpec, MoeConfig};
use hmoe_core::{ExperimentConfig, HmoeHead, ImagePlane};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn features(channels: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((channels, h, w), || rng.random_range(-1.0..1.0))
}

pub fn image(h: usize, w: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImagePlane::new(Array3::from_shape_simple_fn((h, w, 3), || rng.random_range(0.0..1.0))).unwrap()
}

/// Two groups (1×1 and 3×3) of `experts` each.
pub fn head(channels: usize, experts: usize, scale: usize) -> HmoeHead {
    let cfg = MoeConfig {
        groups: vec![GroupSpec { kernel: 1, experts }, GroupSpec { kernel: 3, experts }],
        scale,
        ..ExperimentConfig::default().moe
    };
    HmoeHead::new(channels, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
}
