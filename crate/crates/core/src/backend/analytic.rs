use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use log::warn;
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::spectral::{frequency_norm_sq, SpectralPlan};
use super::{
    hashed_prompt_embedding, identity_decode, identity_decode_pullback, identity_encode,
    BackendInfo, ConditionFeatures, DiffusionBackend, EmbeddingTag, FeatureProvenance,
    PromptEmbedding, PromptRole, Scheduler,
};
use crate::attention::AttentionControlState;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Latent, LatentSpace};

const EMBEDDING_LEN: usize = 8;
const EMBEDDING_DIM: usize = 16;

/// Prior mean attached to one embedding tag.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanSpec {
    Constant(f64),
    /// Full `channels × height × width` mean image.
    Field(Array3<f64>),
}

/// Gaussian prior `N(μ_tag, Σ)` per channel, with Σ circulant and
/// eigenvalues `1 / (1 + β·|k|²)` in the discrete Fourier basis.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianConfig {
    pub smoothness: f64,
    pub means: BTreeMap<EmbeddingTag, MeanSpec>,
    /// Gain applied to spatial condition images before they shift the mean.
    pub feature_scale: f64,
}

impl Default for AnalyticGaussianConfig {
    fn default() -> Self {
        let means = [
            EmbeddingTag::Unconditional,
            EmbeddingTag::Source,
            EmbeddingTag::Target,
        ]
        .into_iter()
        .map(|tag| (tag, MeanSpec::Constant(0.5)))
        .collect();
        Self {
            smoothness: 1.0,
            means,
            feature_scale: 0.5,
        }
    }
}

impl AnalyticGaussianConfig {
    pub fn with_mean(mut self, tag: EmbeddingTag, mean: MeanSpec) -> Self {
        self.means.insert(tag, mean);
        self
    }

    pub fn with_smoothness(mut self, beta: f64) -> Self {
        self.smoothness = beta;
        self
    }
}

/// Exact posterior-mean noise predictor of a Gaussian prior.
#[derive(Debug)]
pub struct AnalyticGaussianBackend {
    config: AnalyticGaussianConfig,
    scheduler: Scheduler,
    warned_control: AtomicBool,
    // plan and prior eigenvalues of the last grid size seen
    grid_cache: Mutex<Option<Arc<GridCache>>>,
}

struct GridCache {
    plan: SpectralPlan,
    eigenvalues: Array2<f64>,
}

impl std::fmt::Debug for GridCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridCache").field("dim", &self.eigenvalues.dim()).finish()
    }
}

impl AnalyticGaussianBackend {
    pub fn new(config: AnalyticGaussianConfig) -> Result<Self> {
        if !(config.smoothness >= 0.0) || !config.smoothness.is_finite() {
            return Err(Error::Config(format!(
                "smoothness must be a finite value ≥ 0, got {}",
                config.smoothness
            )));
        }
        Ok(Self {
            config,
            scheduler: Scheduler::default(),
            warned_control: AtomicBool::new(false),
            grid_cache: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &AnalyticGaussianConfig {
        &self.config
    }

    /// Prior covariance eigenvalues on an `h × w` grid.
    pub fn prior_eigenvalues(&self, h: usize, w: usize) -> Array2<f64> {
        self.grid(h, w).eigenvalues.clone()
    }

    fn grid(&self, h: usize, w: usize) -> Arc<GridCache> {
        let mut slot = self.grid_cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(c) = slot.as_ref() {
            if c.eigenvalues.dim() == (h, w) {
                return Arc::clone(c);
            }
        }
        let beta = self.config.smoothness;
        let cache = Arc::new(GridCache {
            plan: SpectralPlan::new(h, w),
            eigenvalues: frequency_norm_sq(h, w).mapv(|k2| 1.0 / (1.0 + beta * k2)),
        });
        *slot = Some(Arc::clone(&cache));
        cache
    }

    pub fn mean_for(&self, tag: EmbeddingTag, shape: (usize, usize, usize)) -> Result<Array3<f64>> {
        match self.config.means.get(&tag) {
            None => Err(Error::Config(format!("no prior mean for embedding tag {tag:?}"))),
            Some(MeanSpec::Constant(c)) => Ok(Array3::from_elem(shape, *c)),
            Some(MeanSpec::Field(f)) if f.dim() == shape => Ok(f.clone()),
            Some(MeanSpec::Field(f)) => Err(Error::Shape(format!(
                "prior mean field {:?} vs latent {:?}",
                f.dim(),
                shape
            ))),
        }
    }

    /// Applies `√(1−ᾱ)·(ᾱΣ + (1−ᾱ)I)⁻¹` channel by channel.
    pub fn posterior_operator(&self, x: &Array3<f64>, alpha_bar: f64) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let grid = self.grid(h, w);
        let noise_std = (1.0 - alpha_bar).sqrt();
        let mult = grid.eigenvalues.mapv(|l| noise_std / (alpha_bar * l + 1.0 - alpha_bar));
        Self::apply_per_channel(&grid.plan, x, &mult)
    }

    fn apply_per_channel(plan: &SpectralPlan, x: &Array3<f64>, mult: &Array2<f64>) -> Array3<f64> {
        let mut out = Array3::zeros(x.raw_dim());
        for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            dst.assign(&plan.apply(src, mult));
        }
        out
    }

    /// Draws `μ_tag + Σ^{1/2} ξ` with ξ white Gaussian noise.
    pub fn sample_prior<R: Rng + ?Sized>(
        &self,
        tag: EmbeddingTag,
        shape: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Latent> {
        let mean = self.mean_for(tag, shape)?;
        let white = Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng));
        let grid = self.grid(shape.1, shape.2);
        let sqrt_lambda = grid.eigenvalues.mapv(f64::sqrt);
        let colored = Self::apply_per_channel(&grid.plan, &white, &sqrt_lambda);
        Ok(Latent::new(mean + colored, LatentSpace::PixelIdentity))
    }

    fn conditioned_mean(
        &self,
        tag: EmbeddingTag,
        shape: (usize, usize, usize),
        features: Option<&ConditionFeatures>,
    ) -> Result<Array3<f64>> {
        let mut mean = self.mean_for(tag, shape)?;
        if let Some(f) = features {
            let (c, h, w) = shape;
            if f.levels.len() != 1 || f.levels[0].dim() != (c, h * w) {
                return Err(Error::Shape(format!(
                    "analytic backend expects one feature level of shape {:?}",
                    (c, h * w)
                )));
            }
            let shift = f.levels[0]
                .clone()
                .into_shape_with_order(shape)
                .map_err(|e| Error::Shape(e.to_string()))?;
            mean += &shift;
        }
        Ok(mean)
    }

    fn note_ignored_control(&self, control: Option<&mut AttentionControlState>) {
        if let Some(state) = control {
            if !state.is_plain() && !self.warned_control.swap(true, Ordering::Relaxed) {
                warn!("analytic backend has no attention layers; attention control is ignored");
            }
        }
    }
}

/// Builds the analytic Gaussian backend.
pub fn make_analytic_backend(config: AnalyticGaussianConfig) -> Result<AnalyticGaussianBackend> {
    AnalyticGaussianBackend::new(config)
}

impl DiffusionBackend for AnalyticGaussianBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            name: "analytic".into(),
            compression_factor: 1,
            latent_channels: 3,
            latent_space: LatentSpace::PixelIdentity,
            supports_features: true,
            supports_attention_hooks: false,
            supports_noise_pullback: true,
        }
    }

    fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    fn embed_prompt(&self, text: &str, role: PromptRole) -> PromptEmbedding {
        hashed_prompt_embedding(text, role, EMBEDDING_LEN, EMBEDDING_DIM)
    }

    fn encode(&self, image: &ImageTensor) -> Result<Latent> {
        identity_encode(image)
    }

    fn decode(&self, z: &Latent) -> Result<ImageTensor> {
        identity_decode(z)
    }

    fn decode_pullback(&self, z: &Latent, grad: &ImageTensor) -> Result<Latent> {
        identity_decode_pullback(z, grad)
    }

    fn predict_noise(
        &self,
        z_t: &Latent,
        t: i64,
        emb: &PromptEmbedding,
        features: Option<&ConditionFeatures>,
        control: Option<&mut AttentionControlState>,
    ) -> Result<Latent> {
        z_t.ensure_finite("noised latent")?;
        self.note_ignored_control(control);
        let ab = self.scheduler.alpha_bar(t)?;
        let mean = self.conditioned_mean(emb.tag, z_t.shape(), features)?;
        let centered = &z_t.data - &(mean * ab.sqrt());
        Ok(Latent::new(self.posterior_operator(&centered, ab), z_t.space))
    }

    fn noise_pullback(
        &self,
        z_t: &Latent,
        t: i64,
        emb: &PromptEmbedding,
        features: Option<&ConditionFeatures>,
        cotangent: &Latent,
    ) -> Result<Latent> {
        z_t.check_same_shape(cotangent, "noise pullback cotangent")?;
        // validates tag and features even though the Jacobian ignores them
        self.conditioned_mean(emb.tag, z_t.shape(), features)?;
        let ab = self.scheduler.alpha_bar(t)?;
        // the posterior operator is symmetric, so it is its own adjoint
        Ok(Latent::new(
            self.posterior_operator(&cotangent.data, ab),
            z_t.space,
        ))
    }

    fn condition_features(
        &self,
        condition: &ImageTensor,
        provenance: FeatureProvenance,
        latent_resolution: (usize, usize),
    ) -> Result<ConditionFeatures> {
        if condition.resolution() != latent_resolution {
            return Err(Error::Shape(format!(
                "condition {:?} vs latent {:?}",
                condition.resolution(),
                latent_resolution
            )));
        }
        let z = identity_encode(&condition.clamped())?;
        let (c, h, w) = z.shape();
        let level = (z.data - 0.5) * self.config.feature_scale;
        Ok(ConditionFeatures {
            levels: vec![level
                .into_shape_with_order((c, h * w))
                .map_err(|e| Error::Shape(e.to_string()))?],
            provenance,
        })
    }
}
