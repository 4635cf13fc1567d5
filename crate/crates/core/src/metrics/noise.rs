//! Pixel-removal noise for robustness sweeps.
//!
//! Pixels are removed along one seeded permutation, so for a fixed seed the
//! set removed at ratio `r1` is a prefix of the set removed at any `r2 > r1`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Spatial positions in removal order for an image with `pixels` positions.
pub fn removal_order(pixels: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut order: Vec<usize> = (0..pixels).collect();
    order.shuffle(&mut rng);
    order
}

/// Number of positions removed at `ratio`.
pub fn removed_count(ratio: f64, pixels: usize) -> usize {
    ((ratio.clamp(0.0, 1.0) * pixels as f64).round() as usize).min(pixels)
}

/// Zeroes exactly `round(ratio * h * w)` spatial positions (all channels) of
/// every sample. Sample `n` draws from stream `n` of the seed.
pub fn apply_noise(image: &Tensor, ratio: f64, seed: u64) -> Tensor {
    let s = image.shape;
    let plane = s.plane();
    let k = removed_count(ratio, plane);
    let mut out = image.clone();
    if k == 0 {
        return out;
    }
    for n in 0..s.n {
        let order = removal_order(plane, seed, n as u64);
        let sample = out.sample_mut(n);
        for &p in &order[..k] {
            for c in 0..s.c {
                sample[c * plane + p] = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TensorShape;

    fn ones(h: usize, w: usize) -> Tensor {
        let shape = TensorShape::new(1, 1, h, w).unwrap();
        Tensor::new(shape, vec![1.0; h * w]).unwrap()
    }

    #[test]
    fn exact_counts() {
        let img = ones(10, 10);
        assert_eq!(apply_noise(&img, 0.0, 1), img);
        assert!(apply_noise(&img, 1.0, 1).data.iter().all(|v| *v == 0.0));
        let z = apply_noise(&img, 0.25, 1).data.iter().filter(|v| **v == 0.0).count();
        assert_eq!(z, 25);
    }

    #[test]
    fn removals_nest() {
        let img = ones(8, 8);
        let lo = apply_noise(&img, 0.2, 9);
        let hi = apply_noise(&img, 0.6, 9);
        assert!(lo.data.iter().zip(&hi.data).all(|(l, h)| *l != 0.0 || *h == 0.0));
    }
}
