use rand::Rng;
use rand_distr::StandardNormal;

use super::{PatchFilter, PatchShape};
use crate::seed;

/// Additive i.i.d. Gaussian noise. The mask holds standard-normal draws and
/// is scaled by `std` at application time.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    std: f32,
}

impl GaussianNoise {
    pub fn new(std: f64) -> Self {
        Self { std: std as f32 }
    }
}

impl PatchFilter for GaussianNoise {
    fn name(&self) -> &str {
        "gaussian_noise"
    }

    fn mask(&self, shape: PatchShape, seed: u64) -> Vec<f32> {
        let mut rng = seed::rng(seed);
        (0..shape.len())
            .map(|_| rng.sample(StandardNormal))
            .collect()
    }

    fn apply(&self, patch: &mut [f32], _shape: PatchShape, mask: &[f32]) {
        for (p, z) in patch.iter_mut().zip(mask) {
            *p += self.std * z;
        }
    }
}

/// Patch-local Gaussian blur with edge replication at the patch border.
/// `blend` scales the blur residual (`1.0` is a plain blur).
#[derive(Debug, Clone)]
pub struct GaussianBlur {
    kernel: Vec<f32>,
    blend: f32,
}

impl GaussianBlur {
    pub fn new(std: f64, blend: f64) -> Self {
        let radius = (3.0 * std).ceil().max(1.0) as i64;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|x| (-(x * x) as f64 / (2.0 * std * std)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        Self {
            kernel: kernel.into_iter().map(|k| k as f32).collect(),
            blend: blend as f32,
        }
    }

    fn radius(&self) -> i64 {
        (self.kernel.len() / 2) as i64
    }
}

impl PatchFilter for GaussianBlur {
    fn name(&self) -> &str {
        "gaussian_blur"
    }

    fn apply(&self, patch: &mut [f32], shape: PatchShape, _mask: &[f32]) {
        let n = shape.size;
        let last = n as i64 - 1;
        let r = self.radius();
        let mut tmp = vec![0.0f32; n * n];
        let mut out = vec![0.0f32; n * n];
        for plane in patch.chunks_exact_mut(n * n) {
            for y in 0..n {
                for x in 0..n {
                    tmp[y * n + x] = self
                        .kernel
                        .iter()
                        .enumerate()
                        .map(|(k, w)| {
                            let xx = (x as i64 + k as i64 - r).clamp(0, last) as usize;
                            w * plane[y * n + xx]
                        })
                        .sum();
                }
            }
            for y in 0..n {
                for x in 0..n {
                    out[y * n + x] = self
                        .kernel
                        .iter()
                        .enumerate()
                        .map(|(k, w)| {
                            let yy = (y as i64 + k as i64 - r).clamp(0, last) as usize;
                            w * tmp[yy * n + x]
                        })
                        .sum();
                }
            }
            for (p, b) in plane.iter_mut().zip(&out) {
                *p += self.blend * (b - *p);
            }
        }
    }
}

/// Uniform additive brightness shift.
#[derive(Debug, Clone)]
pub struct Brightness {
    intensity: f32,
}

impl Brightness {
    pub fn new(intensity: f64) -> Self {
        Self {
            intensity: intensity as f32,
        }
    }
}

impl PatchFilter for Brightness {
    fn name(&self) -> &str {
        "brightness"
    }

    fn apply(&self, patch: &mut [f32], _shape: PatchShape, _mask: &[f32]) {
        patch.iter_mut().for_each(|p| *p += self.intensity);
    }
}

/// Zeroes a random subset of pixel locations across all channels. Each
/// location is dropped independently with probability `fraction`.
#[derive(Debug, Clone)]
pub struct DeadPixel {
    fraction: f32,
}

impl DeadPixel {
    pub fn new(fraction: f64) -> Self {
        Self {
            fraction: fraction as f32,
        }
    }
}

impl PatchFilter for DeadPixel {
    fn name(&self) -> &str {
        "dead_pixel"
    }

    fn mask(&self, shape: PatchShape, seed: u64) -> Vec<f32> {
        let mut rng = seed::rng(seed);
        (0..shape.pixels()).map(|_| rng.gen::<f32>()).collect()
    }

    fn apply(&self, patch: &mut [f32], shape: PatchShape, mask: &[f32]) {
        let pixels = shape.pixels();
        for (i, &u) in mask.iter().enumerate() {
            if u < self.fraction {
                for c in 0..shape.channels {
                    patch[c * pixels + i] = 0.0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPE: PatchShape = PatchShape {
        channels: 3,
        size: 2,
    };

    #[test]
    fn zero_variance_noise_is_identity() {
        let f = GaussianNoise::new(0.0);
        let mut p = vec![0.3f32; 12];
        f.apply(&mut p, SHAPE, &f.mask(SHAPE, 9));
        assert!(p.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn blur_preserves_constant_patches() {
        let f = GaussianBlur::new(1.0, 1.0);
        let mut p = vec![0.4f32; 12];
        f.apply(&mut p, SHAPE, &[]);
        assert!(p.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn blur_kernel_is_normalized_and_smooths() {
        let f = GaussianBlur::new(1.0, 1.0);
        assert!((f.kernel.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let shape = PatchShape {
            channels: 1,
            size: 4,
        };
        let mut p = vec![0.0f32; 16];
        p[5] = 1.0;
        f.apply(&mut p, shape, &[]);
        assert!(p[5] < 1.0 && p[5] > p[0]);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 0.5);
    }

    #[test]
    fn dead_pixel_full_drop() {
        let f = DeadPixel::new(1.0);
        let mut p = vec![1.0f32; 12];
        f.apply(&mut p, SHAPE, &f.mask(SHAPE, 3));
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dead_pixel_drops_whole_locations() {
        let f = DeadPixel::new(0.5);
        let mut p = vec![1.0f32; 12];
        f.apply(&mut p, SHAPE, &f.mask(SHAPE, 11));
        for i in 0..4 {
            let col: Vec<f32> = (0..3).map(|c| p[c * 4 + i]).collect();
            assert!(col.iter().all(|&v| v == col[0]));
        }
    }
}
