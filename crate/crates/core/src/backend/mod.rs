//! Frozen noise-predictor abstraction.
//!
//! A backend bundles a noise schedule, a latent codec, a prompt embedding
//! provider and a conditional noise predictor. Two deterministic backends are
//! provided:
//!
//! * [`AnalyticGaussianBackend`]: the exact posterior-mean noise of a
//!   Gaussian prior with a circulant (Fourier-diagonal) covariance. Its
//!   Jacobian is available, so gradients can be back-propagated through it.
//! * [`ToyAttentionBackend`]: the Gaussian predictor plus a residual computed
//!   by a stack of genuine self-attention layers over latent tokens, which
//!   routes keys and values through the attention control hooks.
//!
//! Pretrained models plug in through [`adapter`].

pub mod adapter;
mod analytic;
mod spectral;
mod toy_attention;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use analytic::{make_analytic_backend, AnalyticGaussianBackend, AnalyticGaussianConfig, MeanSpec};
pub use toy_attention::{make_toy_attention_backend, ToyAttentionBackend, ToyAttentionConfig};

use crate::attention::{AttentionControlState, AttentionSite};
use crate::error::{Error, Result};
use crate::tensor::{resize_area, ImageTensor, Latent, LatentSpace, PixelMask};

/// Canonical number of diffusion timesteps.
pub const T_MAX_ABSOLUTE: u32 = 1000;

/// Maps integer timesteps to the cumulative signal level ᾱ_t.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheduler {
    /// ᾱ_t = 1 − t / t_max.
    Linear { t_max: u32 },
    /// Explicit ᾱ table indexed by timestep, as exposed by a pretrained model.
    Table(Vec<f64>),
}

impl Default for Scheduler {
    fn default() -> Self {
        Scheduler::Linear {
            t_max: T_MAX_ABSOLUTE,
        }
    }
}

impl Scheduler {
    /// Validates a pretrained schedule: starts at 1, stays in [0, 1], never increases.
    pub fn from_table(table: Vec<f64>) -> Result<Self> {
        if table.len() < 2 {
            return Err(Error::Config("alpha-bar table needs at least two entries".into()));
        }
        if table[0] != 1.0 {
            return Err(Error::Config("alpha-bar table must start at 1".into()));
        }
        if table.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("alpha-bar values must lie in [0, 1]".into()));
        }
        if table.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("alpha-bar table must be non-increasing".into()));
        }
        Ok(Scheduler::Table(table))
    }

    pub fn t_max(&self) -> u32 {
        match self {
            Scheduler::Linear { t_max } => *t_max,
            Scheduler::Table(table) => (table.len() - 1) as u32,
        }
    }

    pub fn alpha_bar(&self, t: i64) -> Result<f64> {
        let max = self.t_max();
        if t < 0 || t > max as i64 {
            return Err(Error::Range { t, max });
        }
        Ok(match self {
            Scheduler::Linear { t_max } => 1.0 - t as f64 / *t_max as f64,
            Scheduler::Table(table) => table[t as usize],
        })
    }
}

/// Convenience wrapper over [`Scheduler::alpha_bar`].
pub fn alpha_bar(scheduler: &Scheduler, t: i64) -> Result<f64> {
    scheduler.alpha_bar(t)
}

/// Standard-normal draw fully determined by `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub data: Array3<f64>,
    pub seed: u64,
}

impl NoiseSample {
    pub fn draw(shape: (usize, usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
        Self { data, seed }
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            data: Array3::zeros(shape),
            seed: 0,
        }
    }
}

/// Forward noising `z_t = √ᾱ_t·z + √(1−ᾱ_t)·ε`.
pub fn add_noise(z: &Latent, eps: &NoiseSample, t: i64, scheduler: &Scheduler) -> Result<Latent> {
    if z.shape() != eps.data.dim() {
        return Err(Error::Shape(format!(
            "latent {:?} vs noise {:?}",
            z.shape(),
            eps.data.dim()
        )));
    }
    let ab = scheduler.alpha_bar(t)?;
    Ok(Latent::new(
        &z.data * ab.sqrt() + &eps.data * (1.0 - ab).sqrt(),
        z.space,
    ))
}

/// Which conditioning an embedding carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingTag {
    Unconditional,
    Source,
    Target,
}

/// Role a prompt plays in a DDS pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptRole {
    Unconditional,
    Source,
    Target,
}

/// The empty prompt is the unconditional embedding whatever its role.
pub fn embedding_tag(text: &str, role: PromptRole) -> EmbeddingTag {
    if text.trim().is_empty() {
        return EmbeddingTag::Unconditional;
    }
    match role {
        PromptRole::Unconditional => EmbeddingTag::Unconditional,
        PromptRole::Source => EmbeddingTag::Source,
        PromptRole::Target => EmbeddingTag::Target,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Vec<Vec<f64>>,
    pub tag: EmbeddingTag,
    pub text: String,
}

impl PromptEmbedding {
    /// Token-wise mean vector.
    pub fn pooled(&self) -> Vec<f64> {
        let dim = self.tokens.first().map_or(0, Vec::len);
        let mut acc = vec![0.0; dim];
        for tok in &self.tokens {
            for (a, v) in acc.iter_mut().zip(tok) {
                *a += v;
            }
        }
        let n = self.tokens.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Deterministic word-hash embedding shared by the desk-scale backends:
/// each word seeds a Gaussian vector; the sequence is zero-padded to `len`.
pub(crate) fn hashed_prompt_embedding(
    text: &str,
    role: PromptRole,
    len: usize,
    dim: usize,
) -> PromptEmbedding {
    let mut tokens: Vec<Vec<f64>> = text
        .split_whitespace()
        .take(len)
        .map(|word| {
            let digest = Sha256::digest(word.to_lowercase().as_bytes());
            let mut seed = [0u8; 32];
            seed.copy_from_slice(&digest);
            let mut rng = ChaCha8Rng::from_seed(seed);
            (0..dim)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g / (dim as f64).sqrt()
                })
                .collect()
        })
        .collect();
    tokens.resize(len, vec![0.0; dim]);
    PromptEmbedding {
        tokens,
        tag: embedding_tag(text, role),
        text: text.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureProvenance {
    None,
    Sketch,
    Canny,
    External,
}

/// Per-resolution feature maps injected additively into a predictor.
/// Each level is `tokens × channels` for the matching internal resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionFeatures {
    pub levels: Vec<Array2<f64>>,
    pub provenance: FeatureProvenance,
}

/// Capabilities a backend declares to the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendInfo {
    pub name: String,
    pub compression_factor: usize,
    pub latent_channels: usize,
    pub latent_space: LatentSpace,
    pub supports_features: bool,
    pub supports_attention_hooks: bool,
    pub supports_noise_pullback: bool,
}

/// A frozen diffusion model used as a gradient source.
///
/// Implementations must be pure: identical inputs give identical outputs.
pub trait DiffusionBackend: Send + Sync {
    fn info(&self) -> BackendInfo;

    fn scheduler(&self) -> &Scheduler;

    fn embed_prompt(&self, text: &str, role: PromptRole) -> PromptEmbedding;

    fn encode(&self, image: &ImageTensor) -> Result<Latent>;

    fn decode(&self, z: &Latent) -> Result<ImageTensor>;

    /// Vector-Jacobian product of [`decode`](Self::decode) at `z`.
    fn decode_pullback(&self, z: &Latent, grad: &ImageTensor) -> Result<Latent>;

    /// Conditional noise prediction ε_θ(z_t, t, emb; features) with optional
    /// attention control.
    fn predict_noise(
        &self,
        z_t: &Latent,
        t: i64,
        emb: &PromptEmbedding,
        features: Option<&ConditionFeatures>,
        control: Option<&mut AttentionControlState>,
    ) -> Result<Latent>;

    /// Vector-Jacobian product of the noise prediction with respect to `z_t`.
    fn noise_pullback(
        &self,
        _z_t: &Latent,
        _t: i64,
        _emb: &PromptEmbedding,
        _features: Option<&ConditionFeatures>,
        _cotangent: &Latent,
    ) -> Result<Latent> {
        Err(Error::Capability(format!(
            "{} cannot back-propagate through its noise predictor",
            self.info().name
        )))
    }

    /// Self-attention layers the predictor runs for a latent of the given
    /// spatial resolution. Empty when the backend has no attention hooks.
    fn attention_sites(&self, _latent_resolution: (usize, usize)) -> Vec<AttentionSite> {
        Vec::new()
    }

    /// Translates a spatial condition (sketch, edge map) into injectable features.
    fn condition_features(
        &self,
        _condition: &ImageTensor,
        _provenance: FeatureProvenance,
        _latent_resolution: (usize, usize),
    ) -> Result<ConditionFeatures> {
        Err(Error::Capability(format!(
            "{} does not accept condition features",
            self.info().name
        )))
    }
}

/// Resizes a pixel mask to the latent grid by area averaging.
pub fn mask_to_latent(mask: &PixelMask, latent_resolution: (usize, usize)) -> PixelMask {
    PixelMask::new(resize_area(&mask.data, latent_resolution.0, latent_resolution.1))
}

/// `H × W × 3` image to a `3 × H × W` latent.
pub(crate) fn identity_encode(image: &ImageTensor) -> Result<Latent> {
    if image
        .data
        .iter()
        .any(|v| !v.is_finite() || *v < -1e-9 || *v > 1.0 + 1e-9)
    {
        return Err(Error::Shape("image values must lie in [0, 1] to encode".into()));
    }
    Ok(Latent::new(
        image.data.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned(),
        LatentSpace::PixelIdentity,
    ))
}

pub(crate) fn identity_decode(z: &Latent) -> Result<ImageTensor> {
    if z.channels() != 3 {
        return Err(Error::Shape(format!(
            "identity codec expects 3 latent channels, got {}",
            z.channels()
        )));
    }
    ImageTensor::new(z.data.view().permuted_axes([1, 2, 0]).as_standard_layout().into_owned())
}

pub(crate) fn identity_decode_pullback(z: &Latent, grad: &ImageTensor) -> Result<Latent> {
    let (c, h, w) = z.shape();
    if (h, w, c) != grad.data.dim() {
        return Err(Error::Shape(format!(
            "image gradient {:?} vs latent {:?}",
            grad.data.dim(),
            z.shape()
        )));
    }
    Ok(Latent::new(
        grad.data.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned(),
        z.space,
    ))
}
