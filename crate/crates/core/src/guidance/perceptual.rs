//! Feature-space image distance used to anchor regions during optimization.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::tensor::{check_same_resolution, ImageTensor, PixelMask};

/// Deterministic map from an image to an ordered list of feature tensors
/// (`height × width × channels` each, typically of decreasing resolution).
///
/// Pretrained extractors (for example VGG-16 at relu1_2, relu2_2, relu3_3)
/// implement this trait outside the crate.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    fn extract(&self, image: &ImageTensor) -> Result<Vec<Array3<f64>>>;

    /// Vector-Jacobian product: maps per-level feature gradients back to an
    /// image gradient at `image`.
    fn pullback(&self, image: &ImageTensor, feature_grads: &[Array3<f64>]) -> Result<ImageTensor>;
}

/// Identity features followed by a fixed box-blur pyramid (3×3 kernel,
/// stride 2, clamped borders).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyPyramid {
    pub blur_levels: usize,
}

impl Default for ToyPyramid {
    fn default() -> Self {
        Self { blur_levels: 3 }
    }
}

fn blur_down(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    Array3::from_shape_fn((oh, ow, c), |(i, j, ch)| {
        let mut acc = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let y = (2 * i as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (2 * j as i64 + dx).clamp(0, w as i64 - 1) as usize;
                acc += x[[y, xx, ch]];
            }
        }
        acc / 9.0
    })
}

/// Adjoint of [`blur_down`] for an input of resolution `(h, w)`.
fn blur_down_adjoint(g: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (oh, ow, c) = g.dim();
    let mut out = Array3::zeros((h, w, c));
    for i in 0..oh {
        for j in 0..ow {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let y = (2 * i as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let x = (2 * j as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    for ch in 0..c {
                        out[[y, x, ch]] += g[[i, j, ch]] / 9.0;
                    }
                }
            }
        }
    }
    out
}

impl FeatureExtractor for ToyPyramid {
    fn name(&self) -> &str {
        "toy-pyramid"
    }

    fn extract(&self, image: &ImageTensor) -> Result<Vec<Array3<f64>>> {
        let mut levels = vec![image.data.clone()];
        for _ in 0..self.blur_levels {
            let next = blur_down(levels.last().expect("non-empty"));
            levels.push(next);
        }
        Ok(levels)
    }

    fn pullback(&self, image: &ImageTensor, feature_grads: &[Array3<f64>]) -> Result<ImageTensor> {
        if feature_grads.len() != self.blur_levels + 1 {
            return Err(Error::Shape(format!(
                "expected {} feature gradients, got {}",
                self.blur_levels + 1,
                feature_grads.len()
            )));
        }
        let mut dims = vec![image.data.dim()];
        for _ in 0..self.blur_levels {
            let (h, w, c) = *dims.last().expect("non-empty");
            dims.push((h.div_ceil(2), w.div_ceil(2), c));
        }
        // accumulate from the coarsest level down
        let mut acc = feature_grads[self.blur_levels].clone();
        for level in (0..self.blur_levels).rev() {
            let (h, w, _) = dims[level];
            acc = blur_down_adjoint(&acc, h, w) + &feature_grads[level];
        }
        ImageTensor::new(acc)
    }
}

fn masked_pair(
    a: &ImageTensor,
    b: &ImageTensor,
    mask: Option<&PixelMask>,
) -> Result<(ImageTensor, ImageTensor)> {
    check_same_resolution(a.resolution(), b.resolution(), "perceptual inputs")?;
    match mask {
        Some(m) => Ok((a.masked(m)?, b.masked(m)?)),
        None => Ok((a.clone(), b.clone())),
    }
}

/// Squared feature difference between `a ⊗ M` and `b ⊗ M`, averaged over
/// channels and summed over positions and feature levels.
pub fn perceptual_loss(
    a: &ImageTensor,
    b: &ImageTensor,
    fx: &dyn FeatureExtractor,
    mask: Option<&PixelMask>,
) -> Result<f64> {
    let (a, b) = masked_pair(a, b, mask)?;
    let fa = fx.extract(&a)?;
    let fb = fx.extract(&b)?;
    Ok(fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            let n = x.dim().2.max(1) as f64;
            (x - y).mapv(|d| d * d).sum() / n
        })
        .sum())
}

/// Loss value and its gradient with respect to the second image `b`.
pub fn perceptual_loss_and_grad(
    a: &ImageTensor,
    b: &ImageTensor,
    fx: &dyn FeatureExtractor,
    mask: Option<&PixelMask>,
) -> Result<(f64, ImageTensor)> {
    let (am, bm) = masked_pair(a, b, mask)?;
    let fa = fx.extract(&am)?;
    let fb = fx.extract(&bm)?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(fa.len());
    for (x, y) in fa.iter().zip(&fb) {
        let n = x.dim().2.max(1) as f64;
        let diff = y - x;
        loss += diff.mapv(|d| d * d).sum() / n;
        grads.push(diff * (2.0 / n));
    }
    let grad = fx.pullback(&bm, &grads)?;
    let grad = match mask {
        Some(m) => grad.masked(m)?,
        None => grad,
    };
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
        let data = Array3::from_shape_simple_fn((h, w, 3), || rng.random::<f64>());
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(9, 7, &mut rng);
        assert_eq!(perceptual_loss(&a, &a, &ToyPyramid::default(), None).unwrap(), 0.0);
    }

    #[test]
    fn constant_images_hand_evaluated() {
        // Every pyramid level of a constant image is the same constant, so
        // each position contributes 1: 64 + 16 + 4 + 1.
        let a = ImageTensor::zeros(8, 8);
        let b = ImageTensor::from_fn(8, 8, |_, _, _| 1.0);
        let loss = perceptual_loss(&a, &b, &ToyPyramid::default(), None).unwrap();
        assert!((loss - 85.0).abs() < 1e-12);
        // amplitude 0.5 on a 5×3 image: (15 + 6 + 2 + 1) × 0.25
        let c = ImageTensor::from_fn(5, 3, |_, _, _| 0.5);
        let loss = perceptual_loss(&ImageTensor::zeros(5, 3), &c, &ToyPyramid::default(), None).unwrap();
        assert!((loss - 6.0).abs() < 1e-12);
    }

    #[test]
    fn differences_outside_mask_are_erased() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(8, 8, &mut rng);
        let mask = PixelMask::from_fn(8, 8, |y, x| y < 4 || x < 2);
        let mut b = a.clone();
        b.data[[6, 6, 0]] += 0.7;
        b.data[[7, 3, 2]] -= 0.2;
        let fx = ToyPyramid::default();
        assert_eq!(perceptual_loss(&a, &b, &fx, Some(&mask)).unwrap(), 0.0);
    }

    #[test]
    fn resolution_mismatch_is_shape_error() {
        let a = ImageTensor::zeros(4, 4);
        let b = ImageTensor::zeros(4, 5);
        assert!(matches!(
            perceptual_loss(&a, &b, &ToyPyramid::default(), None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(7, 6, &mut rng);
        let b = random_image(7, 6, &mut rng);
        let mask = PixelMask::from_fn(7, 6, |y, x| (y + x) % 3 != 0);
        let fx = ToyPyramid::default();
        let (_, g) = perceptual_loss_and_grad(&a, &b, &fx, Some(&mask)).unwrap();
        let h = 1e-5;
        for _ in 0..25 {
            let idx = (rng.random_range(0..7), rng.random_range(0..6), rng.random_range(0..3));
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp.data[[idx.0, idx.1, idx.2]] += h;
            bm.data[[idx.0, idx.1, idx.2]] -= h;
            let fd = (perceptual_loss(&a, &bp, &fx, Some(&mask)).unwrap()
                - perceptual_loss(&a, &bm, &fx, Some(&mask)).unwrap())
                / (2.0 * h);
            let an = g.data[[idx.0, idx.1, idx.2]];
            assert!((fd - an).abs() <= 1e-7 * (1.0 + an.abs()), "{fd} vs {an}");
        }
    }
}
