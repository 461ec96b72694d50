use ndarray::Array2;
use rand::Rng;

use crate::backend::{add_noise, DiffusionBackend, NoiseSample, PromptEmbedding};
use crate::error::{Error, Result};
use crate::tensor::{resize_nearest, ImageTensor, Latent};

/// Per-pixel mean prediction error and its min-max normalized copy.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub raw: Array2<f64>,
    /// In [0, 1]; a constant map normalizes to 0.5 everywhere.
    pub normalized: Array2<f64>,
}

/// Mean over `n_samples` draws `(t, ε)` of the channel-averaged
/// `|ε̂(z_t, t) − ε|`. Regions the prior finds unlikely light up.
pub fn low_density_map<R: Rng + ?Sized>(
    image: &ImageTensor,
    backend: &dyn DiffusionBackend,
    emb: &PromptEmbedding,
    n_samples: usize,
    t_set: &[i64],
    rng: &mut R,
) -> Result<DensityMap> {
    let z = backend.encode(&image.clamped())?;
    let map = latent_density_map(&z, backend, emb, n_samples, t_set, rng)?;
    let (h, w) = image.resolution();
    if map.raw.dim() == (h, w) {
        return Ok(map);
    }
    Ok(DensityMap {
        raw: resize_nearest(&map.raw, h, w),
        normalized: resize_nearest(&map.normalized, h, w),
    })
}

/// [`low_density_map`] on a latent given directly, at latent resolution.
pub fn latent_density_map<R: Rng + ?Sized>(
    z: &Latent,
    backend: &dyn DiffusionBackend,
    emb: &PromptEmbedding,
    n_samples: usize,
    t_set: &[i64],
    rng: &mut R,
) -> Result<DensityMap> {
    if n_samples == 0 {
        return Err(Error::Config("low-density map needs at least one noise draw".into()));
    }
    if t_set.is_empty() {
        return Err(Error::Config("low-density map needs at least one timestep".into()));
    }
    let (c, h, w) = z.shape();
    let mut acc = Array2::<f64>::zeros((h, w));
    for _ in 0..n_samples {
        let t = t_set[rng.random_range(0..t_set.len())];
        let eps = NoiseSample::draw(z.shape(), rng.random());
        let z_t = add_noise(z, &eps, t, backend.scheduler())?;
        let pred = backend.predict_noise(&z_t, t, emb, None, None)?;
        let err = (&pred.data - &eps.data).mapv(f64::abs);
        for ch in err.outer_iter() {
            acc += &ch;
        }
    }
    let raw = acc / (n_samples * c) as f64;
    let normalized = normalize_map(&raw);
    Ok(DensityMap { raw, normalized })
}

/// Min-max scaling to [0, 1]; constant maps become 0.5.
pub fn normalize_map(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_normal() {
        return Array2::from_elem(map.dim(), 0.5);
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}
