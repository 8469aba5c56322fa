//! Deterministic synthetic images for tests, examples and the grid-search
//! validation set. Every generator draws from the `Fixture` stream.

use rand::Rng;

use crate::field_ops::RealImage;
use crate::rng::{stream, StreamTag};

/// A few overlapping constant rectangles on a zero background, levels in
/// `[0.3, 1)`. Rectangles start in the upper-left quadrant so the object
/// never wraps.
pub fn piecewise_constant(side: usize, seed: u64) -> RealImage {
    assert!(side >= 4, "fixture side must be at least 4");
    let mut rng = stream(seed, StreamTag::Fixture, 0);
    let mut data = vec![0.0; side * side];
    for _ in 0..3 {
        let (r0, c0) = (rng.random_range(0..side / 2), rng.random_range(0..side / 2));
        let (h, w) = (rng.random_range(2..=side / 2), rng.random_range(2..=side / 2));
        let v: f64 = rng.random_range(0.3..1.0);
        for r in r0..(r0 + h).min(side) {
            for c in c0..(c0 + w).min(side) {
                data[r * side + c] = v;
            }
        }
    }
    RealImage::gray(side, side, data).expect("square fixture")
}

/// Independent uniform pixels in `[0, 1)`.
pub fn uniform_noise(height: usize, width: usize, seed: u64) -> RealImage {
    let mut rng = stream(seed, StreamTag::Fixture, 1);
    let data = (0..height * width).map(|_| rng.random_range(0.0..1.0)).collect();
    RealImage::gray(height, width, data).expect("sized fixture")
}
