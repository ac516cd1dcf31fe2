//! Float image tensors, patch geometry and distance metrics.
//!
//! Every image in the engine is a channel-major (`c`, then row, then column)
//! buffer of `f32` values in the unit interval. The same layout is used by the
//! raw tensor file format and the HTTP classify payload.

use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("buffer of length {len} does not match shape {channels}x{height}x{width}")]
    BadLength {
        len: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("image {height}x{width} is not divisible into {patch}x{patch} patches")]
    NotDivisible {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("patch size must be at least 1")]
    ZeroPatch,
    #[error("patch index {index} out of range for grid of {count} patches")]
    PatchOutOfRange { index: usize, count: usize },
}

/// A channel-major image with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ImageTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self, ImageError> {
        if values.len() != channels * height * width {
            return Err(ImageError::BadLength {
                len: values.len(),
                channels,
                height,
                width,
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        let value = value.clamp(0.0, 1.0);
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.values[self.index(c, row, col)]
    }

    /// Writes a value, clamping it into `[0, 1]`. NaN is written as 0.
    #[inline]
    pub fn set_clamped(&mut self, c: usize, row: usize, col: usize, value: f32) {
        let i = self.index(c, row, col);
        self.values[i] = clamp_unit(value);
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), ImageError> {
        if self.shape() != other.shape() {
            return Err(ImageError::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Euclidean norm of the elementwise difference.
pub fn l2_distance(a: &ImageTensor, b: &ImageTensor) -> Result<f64, ImageError> {
    a.check_same_shape(b)?;
    let sum: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum.sqrt())
}

/// Maximum absolute elementwise difference.
pub fn linf_distance(a: &ImageTensor, b: &ImageTensor) -> Result<f64, ImageError> {
    a.check_same_shape(b)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max))
}

/// Signed difference between an adversarial image and its original.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    shape: (usize, usize, usize),
    delta: Vec<f64>,
}

impl Perturbation {
    pub fn between(original: &ImageTensor, adversarial: &ImageTensor) -> Result<Self, ImageError> {
        original.check_same_shape(adversarial)?;
        let delta = adversarial
            .values
            .iter()
            .zip(&original.values)
            .map(|(&a, &o)| a as f64 - o as f64)
            .collect();
        Ok(Self {
            shape: original.shape(),
            delta,
        })
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    /// Adds the perturbation to `original` and clamps to `[0, 1]`.
    pub fn apply(&self, original: &ImageTensor) -> Result<ImageTensor, ImageError> {
        if original.shape() != self.shape {
            return Err(ImageError::ShapeMismatch {
                left: original.shape(),
                right: self.shape,
            });
        }
        let values = original
            .values
            .iter()
            .zip(&self.delta)
            .map(|(&o, &d)| clamp_unit((o as f64 + d) as f32))
            .collect();
        let (c, h, w) = self.shape;
        Ok(ImageTensor {
            channels: c,
            height: h,
            width: w,
            values,
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.delta.iter().map(|&d| d * d).sum::<f64>().sqrt()
    }
}

/// Pixel rectangle covered by one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl PatchRect {
    pub fn rows(&self) -> Range<usize> {
        self.row..self.row + self.size
    }

    pub fn cols(&self) -> Range<usize> {
        self.col..self.col + self.size
    }
}

/// Square patch tiling of an image whose sides are multiples of the patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    patch_size: usize,
    rows: usize,
    cols: usize,
    channels: usize,
}

impl PatchGrid {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        patch_size: usize,
    ) -> Result<Self, ImageError> {
        if patch_size == 0 {
            return Err(ImageError::ZeroPatch);
        }
        if height % patch_size != 0 || width % patch_size != 0 {
            return Err(ImageError::NotDivisible {
                height,
                width,
                patch: patch_size,
            });
        }
        Ok(Self {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
            channels,
        })
    }

    pub fn for_image(image: &ImageTensor, patch_size: usize) -> Result<Self, ImageError> {
        Self::new(image.channels, image.height, image.width, patch_size)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Number of values (all channels) inside one patch.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn fits(&self, image: &ImageTensor) -> bool {
        image.channels == self.channels
            && image.height == self.rows * self.patch_size
            && image.width == self.cols * self.patch_size
    }

    pub fn check_index(&self, index: usize) -> Result<(), ImageError> {
        if index >= self.patch_count() {
            return Err(ImageError::PatchOutOfRange {
                index,
                count: self.patch_count(),
            });
        }
        Ok(())
    }

    /// Grid position `(row, col)` of patch `index`, in patch units.
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn rect(&self, index: usize) -> Result<PatchRect, ImageError> {
        self.check_index(index)?;
        let (r, c) = self.position(index);
        Ok(PatchRect {
            row: r * self.patch_size,
            col: c * self.patch_size,
            size: self.patch_size,
        })
    }

    /// Copies a patch out of `image` in channel-major order.
    pub fn extract(&self, image: &ImageTensor, index: usize) -> Result<Vec<f32>, ImageError> {
        let rect = self.rect(index)?;
        let mut out = Vec::with_capacity(self.patch_len());
        for c in 0..self.channels {
            for row in rect.rows() {
                let start = image.index(c, row, rect.col);
                out.extend_from_slice(&image.values[start..start + rect.size]);
            }
        }
        Ok(out)
    }

    /// Writes `patch` (channel-major) back into `image`, clamping each value.
    pub fn write(
        &self,
        image: &mut ImageTensor,
        index: usize,
        patch: &[f32],
    ) -> Result<(), ImageError> {
        let rect = self.rect(index)?;
        debug_assert_eq!(patch.len(), self.patch_len());
        let mut k = 0;
        for c in 0..self.channels {
            for row in rect.rows() {
                let start = image.index(c, row, rect.col);
                for v in &mut image.values[start..start + rect.size] {
                    *v = clamp_unit(patch[k]);
                    k += 1;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(values: Vec<f32>) -> ImageTensor {
        let n = values.len();
        ImageTensor::new(1, 1, n, values).unwrap()
    }

    #[test]
    fn l2_examples() {
        let a = img(vec![0.2, 0.4, 0.6]);
        assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);
        let b = img(vec![0.7, 0.4, 0.6]);
        assert!((l2_distance(&a, &b).unwrap() - 0.5).abs() < 1e-7);
        let a = img(vec![0.0, 0.0, 0.5]);
        let b = img(vec![0.3, 0.4, 0.5]);
        assert!((l2_distance(&a, &b).unwrap() - 0.5).abs() < 1e-7);
    }

    #[test]
    fn linf_examples() {
        let a = img(vec![0.5, 0.5, 0.5]);
        assert_eq!(linf_distance(&a, &a).unwrap(), 0.0);
        let b = img(vec![0.52, 0.57, 0.51]);
        assert!((linf_distance(&a, &b).unwrap() - 0.07).abs() < 1e-6);
        let a = img(vec![0.1, 0.2, 0.8]);
        let b = img(vec![0.2, 0.3, 0.9]);
        assert!((linf_distance(&a, &b).unwrap() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn distance_shape_mismatch() {
        let a = ImageTensor::zeros(1, 2, 2);
        let b = ImageTensor::zeros(1, 2, 3);
        assert!(matches!(
            l2_distance(&a, &b),
            Err(ImageError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            linf_distance(&a, &b),
            Err(ImageError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_out_of_range_and_bad_length() {
        assert!(matches!(
            ImageTensor::new(1, 1, 2, vec![0.5, 1.5]),
            Err(ImageError::OutOfRange { index: 1, .. })
        ));
        assert!(matches!(
            ImageTensor::new(1, 2, 2, vec![0.5; 3]),
            Err(ImageError::BadLength { .. })
        ));
    }

    #[test]
    fn patch_grid_examples() {
        let g = PatchGrid::for_image(&ImageTensor::zeros(3, 32, 32), 2).unwrap();
        assert_eq!(g.patch_count(), 256);
        let g = PatchGrid::for_image(&ImageTensor::zeros(3, 224, 224), 2).unwrap();
        assert_eq!(g.patch_count(), 12544);
        assert_eq!(
            PatchGrid::for_image(&ImageTensor::zeros(1, 10, 10), 3),
            Err(ImageError::NotDivisible {
                height: 10,
                width: 10,
                patch: 3
            })
        );
        assert_eq!(PatchGrid::new(1, 4, 4, 0), Err(ImageError::ZeroPatch));
        assert!(matches!(
            g.rect(12544),
            Err(ImageError::PatchOutOfRange { .. })
        ));
    }

    #[test]
    fn perturbation_reproduces_adversarial() {
        let o = ImageTensor::new(1, 1, 4, vec![0.1, 0.9, 0.333, 1.0]).unwrap();
        let a = ImageTensor::new(1, 1, 4, vec![0.15, 0.0, 0.7, 1.0]).unwrap();
        let p = Perturbation::between(&o, &a).unwrap();
        assert_eq!(p.apply(&o).unwrap(), a);
        assert!((p.l2_norm() - l2_distance(&o, &a).unwrap()).abs() < 1e-12);
    }

    fn image_pair() -> impl Strategy<Value = (ImageTensor, ImageTensor)> {
        (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            let n = c * h * w;
            (
                prop::collection::vec(0.0f32..=1.0, n),
                prop::collection::vec(0.0f32..=1.0, n),
            )
                .prop_map(move |(a, b)| {
                    (
                        ImageTensor::new(c, h, w, a).unwrap(),
                        ImageTensor::new(c, h, w, b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn distances_are_metrics((a, b) in image_pair()) {
            let l2 = l2_distance(&a, &b).unwrap();
            let linf = linf_distance(&a, &b).unwrap();
            prop_assert!(l2 >= 0.0 && linf >= 0.0);
            prop_assert_eq!(l2, l2_distance(&b, &a).unwrap());
            prop_assert_eq!(linf, linf_distance(&b, &a).unwrap());
            prop_assert_eq!(l2 == 0.0, a == b);
            prop_assert_eq!(linf == 0.0, a == b);
            prop_assert!(linf <= l2 + 1e-12);
        }

        #[test]
        fn patches_tile_exactly(c in 1usize..4, rows in 1usize..5, cols in 1usize..5, n in 1usize..4) {
            let grid = PatchGrid::new(c, rows * n, cols * n, n).unwrap();
            let mut hits = vec![0u8; rows * n * cols * n];
            for i in 0..grid.patch_count() {
                let r = grid.rect(i).unwrap();
                for y in r.rows() {
                    for x in r.cols() {
                        hits[y * cols * n + x] += 1;
                    }
                }
            }
            prop_assert!(hits.iter().all(|&h| h == 1));
        }

        #[test]
        fn extract_write_round_trip((a, _b) in image_pair(), n in 1usize..3) {
            prop_assume!(a.height() % n == 0 && a.width() % n == 0);
            let grid = PatchGrid::for_image(&a, n).unwrap();
            let mut copy = ImageTensor::zeros(a.channels(), a.height(), a.width());
            for i in 0..grid.patch_count() {
                let p = grid.extract(&a, i).unwrap();
                grid.write(&mut copy, i, &p).unwrap();
            }
            prop_assert_eq!(copy, a);
        }
    }
}
