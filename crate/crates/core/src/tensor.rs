//! Dense image, mask and latent containers plus the resampling helpers shared
//! by masks, codecs and compositing.

use ndarray::{Array2, Array3, Zip};

use crate::error::{Error, Result};

/// RGB image stored as `height × width × 3`. Values are nominally in [0, 1];
/// intermediate images inside a loss may leave that range, so clamping is
/// applied explicitly at load, save and phase outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Shape(format!(
                "image must have 3 channels, got {:?}",
                data.dim()
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        Self {
            data: Array3::from_shape_fn((height, width, 3), |(y, x, c)| f(y, x, c)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Hadamard product with a single-channel mask broadcast over RGB.
    pub fn masked(&self, mask: &PixelMask) -> Result<Self> {
        check_same_resolution(self.resolution(), mask.resolution(), "masked image")?;
        let mut data = self.data.clone();
        Zip::indexed(&mut data).for_each(|(y, x, _), v| *v *= mask.data[[y, x]]);
        Ok(Self { data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        let n = self.data.len().max(1) as f64;
        Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0, |acc, a, b| acc + (a - b).abs())
            / n
    }
}

/// Single-channel region selector. Loaded masks are binary; derived masks
/// (resized, complemented) may hold fractional values.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub data: Array2<f64>,
}

impl PixelMask {
    pub fn new(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            data: Array2::from_shape_fn((height, width), |(y, x)| if f(y, x) { 1.0 } else { 0.0 }),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// The reversed mask `1 − M`.
    pub fn complement(&self) -> Self {
        Self {
            data: self.data.mapv(|v| 1.0 - v),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v <= 0.0)
    }

    pub fn area(&self) -> f64 {
        self.data.sum()
    }

    /// Tight bounding box of the non-zero pixels.
    pub fn bbox(&self) -> Option<BBox> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for ((y, x), &v) in self.data.indexed_iter() {
            if v > 0.0 {
                bounds = Some(match bounds {
                    None => (y, x, y, x),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                });
            }
        }
        bounds.map(|(y0, x0, y1, x1)| BBox {
            y: y0,
            x: x0,
            height: y1 - y0 + 1,
            width: x1 - x0 + 1,
        })
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

/// Storage layout of a latent: identity codecs keep pixel resolution,
/// compressed codecs reduce it by their factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSpace {
    PixelIdentity,
    Compressed,
}

/// The optimized variable, stored `channels × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Array3<f64>,
    pub space: LatentSpace,
}

impl Latent {
    pub fn new(data: Array3<f64>, space: LatentSpace) -> Self {
        Self { data, space }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: Array3::zeros(self.data.raw_dim()),
            space: self.space,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.data.dim(),
                other.data.dim()
            )));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: &self.data * factor,
            space: self.space,
        }
    }

    /// Multiplies every channel by a spatial weight map.
    pub fn weighted(&self, weights: &Array2<f64>) -> Result<Self> {
        if self.resolution() != weights.dim() {
            return Err(Error::Shape(format!(
                "weight map {:?} vs latent {:?}",
                weights.dim(),
                self.resolution()
            )));
        }
        let mut data = self.data.clone();
        for mut plane in data.outer_iter_mut() {
            plane *= weights;
        }
        Ok(Self {
            data,
            space: self.space,
        })
    }
}

pub(crate) fn check_same_resolution(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Per-axis overlap weights for area-average resampling from `src` to `dst`
/// cells. Row `i` lists `(source index, weight)` with weights summing to one.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut k = lo.floor() as usize;
            while (k as f64) < hi && k < src {
                let overlap = (hi.min((k + 1) as f64) - lo.max(k as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((k, overlap / scale));
                }
                k += 1;
            }
            taps
        })
        .collect()
}

/// Area-average resize of a single-channel map. Exact identity when the
/// sizes already match.
pub fn resize_area(src: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    let wy = area_weights(sh, height);
    let wx = area_weights(sw, width);
    Array2::from_shape_fn((height, width), |(i, j)| {
        let mut acc = 0.0;
        for &(sy, fy) in &wy[i] {
            for &(sx, fx) in &wx[j] {
                acc += fy * fx * src[[sy, sx]];
            }
        }
        acc
    })
}

/// Nearest-neighbor index map from `dst` samples back onto `src` samples,
/// using pixel-center alignment.
pub(crate) fn nearest_index(dst_index: usize, src: usize, dst: usize) -> usize {
    let pos = (dst_index as f64 + 0.5) * src as f64 / dst as f64;
    (pos.floor() as usize).min(src - 1)
}

pub fn resize_nearest(src: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    Array2::from_shape_fn((height, width), |(i, j)| {
        src[[nearest_index(i, sh, height), nearest_index(j, sw, width)]]
    })
}

/// Bilinear sample of a `h × w × c` array at fractional pixel-center
/// coordinates with edge clamping.
pub(crate) fn bilinear_sample(src: &Array3<f64>, y: f64, x: f64, c: usize) -> f64 {
    let (h, w, _) = src.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = src[[y0, x0, c]] * (1.0 - fx) + src[[y0, x1, c]] * fx;
    let bottom = src[[y1, x0, c]] * (1.0 - fx) + src[[y1, x1, c]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize of an RGB image with pixel-center alignment. Exact
/// identity when the sizes already match.
pub fn resize_bilinear(image: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    let (sh, sw) = image.resolution();
    if (sh, sw) == (height, width) {
        return image.clone();
    }
    let sy = sh as f64 / height as f64;
    let sx = sw as f64 / width as f64;
    ImageTensor::from_fn(height, width, |y, x, c| {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        let fx = (x as f64 + 0.5) * sx - 0.5;
        bilinear_sample(&image.data, fy, fx, c)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bilinear_resize_identity_and_constant() {
        let img = ImageTensor::from_fn(5, 4, |y, x, c| (y * 7 + x * 3 + c) as f64 / 40.0);
        assert_eq!(resize_bilinear(&img, 5, 4), img);
        let flat = ImageTensor::from_fn(3, 3, |_, _, c| 0.25 * c as f64);
        let up = resize_bilinear(&flat, 7, 5);
        assert!(up.data.indexed_iter().all(|((_, _, c), v)| (v - 0.25 * c as f64).abs() < 1e-12));
        // 2× downsample of a horizontal ramp lands on the pixel-pair means
        let ramp = ImageTensor::from_fn(2, 4, |_, x, _| x as f64);
        let half = resize_bilinear(&ramp, 1, 2);
        assert!((half.data[[0, 0, 0]] - 0.5).abs() < 1e-12);
        assert!((half.data[[0, 1, 0]] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn area_resize_halves_blocks() {
        let mut m = Array2::zeros((4, 4));
        m.slice_mut(ndarray::s![0..2, 0..2]).fill(1.0);
        let r = resize_area(&m, 2, 2);
        assert_eq!(r, array![[1.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn area_resize_non_integer_ratio_preserves_mean() {
        let m = Array2::from_shape_fn((5, 7), |(y, x)| (y * 7 + x) as f64);
        let r = resize_area(&m, 3, 2);
        approx::assert_relative_eq!(r.mean().unwrap(), m.mean().unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn bbox_and_complement() {
        let m = PixelMask::from_fn(6, 6, |y, x| (2..4).contains(&y) && (1..5).contains(&x));
        assert_eq!(
            m.bbox(),
            Some(BBox {
                y: 2,
                x: 1,
                height: 2,
                width: 4
            })
        );
        assert_eq!(m.complement().area(), 36.0 - 8.0);
        assert!(PixelMask::zeros(3, 3).bbox().is_none());
    }
}
