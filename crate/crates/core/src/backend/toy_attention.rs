use ndarray::{s, Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::analytic::{AnalyticGaussianBackend, AnalyticGaussianConfig};
use super::{
    hashed_prompt_embedding, identity_decode, identity_decode_pullback, identity_encode,
    BackendInfo, ConditionFeatures, DiffusionBackend, FeatureProvenance, PromptEmbedding,
    PromptRole, Scheduler,
};
use crate::attention::{
    controlled_attention, scaled_dot_attention, AttentionControlState, AttentionSite,
};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Latent, LatentSpace};

const LATENT_CHANNELS: usize = 3;
const EMBEDDING_LEN: usize = 8;
const POSITION_FREQUENCIES: usize = 4;

/// Gaussian prior denoiser plus a self-attention residual over pooled
/// latent tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAttentionConfig {
    pub seed: u64,
    pub layer_count: usize,
    /// Hidden width `d` of the attention layers.
    pub dim: usize,
    /// Latent pixels per token side, cycled over the layers. Every factor
    /// must be a multiple of the smallest one.
    pub pool_factors: Vec<usize>,
    /// Gain on the attention residual added to the Gaussian prediction.
    pub residual_scale: f64,
    /// Fraction of each attention update written back into the hidden state.
    pub mixing: f64,
    /// Query gain; larger values make attention more selective.
    pub sharpness: f64,
    pub position_scale: f64,
    pub prompt_scale: f64,
    pub feature_scale: f64,
    pub prior: AnalyticGaussianConfig,
}

impl Default for ToyAttentionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layer_count: 16,
            dim: 16,
            pool_factors: vec![4, 8],
            residual_scale: 1.0,
            mixing: 0.25,
            sharpness: 6.0,
            position_scale: 1.0,
            prompt_scale: 0.05,
            feature_scale: 1.0,
            prior: AnalyticGaussianConfig::default(),
        }
    }
}

#[derive(Debug)]
struct LayerWeights {
    query: Array2<f64>,
    key: Array2<f64>,
    value: Array2<f64>,
}

#[derive(Debug)]
pub struct ToyAttentionBackend {
    config: ToyAttentionConfig,
    prior: AnalyticGaussianBackend,
    /// `channels × d` lift with orthonormal rows; its transpose projects back.
    lift: Array2<f64>,
    position_projection: Array2<f64>,
    time_direction: Array1<f64>,
    layers: Vec<LayerWeights>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let g: f64 = StandardNormal.sample(rng);
        g * std
    })
}

/// Gram-Schmidt on the rows of a `rows × cols` Gaussian matrix.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = gaussian_matrix(rng, rows, cols, 1.0);
    for i in 0..rows {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let prev = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &prev);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}

/// Averages `r × r` token blocks of a row-major `grid` of tokens.
fn pool_tokens(tokens: &Array2<f64>, grid: (usize, usize), r: usize) -> Array2<f64> {
    if r == 1 {
        return tokens.clone();
    }
    let (gh, gw) = grid;
    let (ph, pw) = (gh / r, gw / r);
    let mut out = Array2::zeros((ph * pw, tokens.ncols()));
    let norm = (r * r) as f64;
    for y in 0..gh {
        for x in 0..gw {
            let mut dst = out.row_mut((y / r) * pw + x / r);
            dst.scaled_add(1.0 / norm, &tokens.row(y * gw + x));
        }
    }
    out
}

/// Nearest-neighbor inverse of [`pool_tokens`].
fn upsample_tokens(tokens: &Array2<f64>, fine_grid: (usize, usize), r: usize) -> Array2<f64> {
    if r == 1 {
        return tokens.clone();
    }
    let (gh, gw) = fine_grid;
    let pw = gw / r;
    let mut out = Array2::zeros((gh * gw, tokens.ncols()));
    for y in 0..gh {
        for x in 0..gw {
            out.row_mut(y * gw + x).assign(&tokens.row((y / r) * pw + x / r));
        }
    }
    out
}

/// `c × h × w` latent to `(h/r)(w/r) × c` block-mean tokens.
fn latent_tokens(z: &Array3<f64>, r: usize) -> Array2<f64> {
    let (c, h, w) = z.dim();
    let (th, tw) = (h / r, w / r);
    Array2::from_shape_fn((th * tw, c), |(i, ch)| {
        let (ty, tx) = (i / tw, i % tw);
        z.slice(s![ch, ty * r..(ty + 1) * r, tx * r..(tx + 1) * r])
            .mean()
            .unwrap_or(0.0)
    })
}

impl ToyAttentionBackend {
    pub fn new(config: ToyAttentionConfig) -> Result<Self> {
        if config.layer_count < 1 {
            return Err(Error::Config("toy attention backend needs layer_count ≥ 1".into()));
        }
        if config.dim < LATENT_CHANNELS {
            return Err(Error::Config(format!(
                "attention dim must be at least {LATENT_CHANNELS}"
            )));
        }
        let base = match config.pool_factors.iter().min() {
            Some(&b) if b >= 1 => b,
            _ => return Err(Error::Config("pool_factors must be non-empty and ≥ 1".into())),
        };
        if config.pool_factors.iter().any(|p| p % base != 0) {
            return Err(Error::Config(
                "every pool factor must be a multiple of the smallest one".into(),
            ));
        }
        let prior = AnalyticGaussianBackend::new(config.prior.clone())?;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let lift = orthonormal_rows(&mut rng, LATENT_CHANNELS, d);
        let position_projection = gaussian_matrix(
            &mut rng,
            4 * POSITION_FREQUENCIES,
            d,
            1.0 / (2.0 * POSITION_FREQUENCIES as f64).sqrt(),
        );
        let time_direction = gaussian_matrix(&mut rng, 1, d, 1.0 / (d as f64).sqrt()).row(0).to_owned();
        let jitter = 0.2 / (d as f64).sqrt();
        let eye = Array2::<f64>::eye(d);
        let layers = (0..config.layer_count)
            .map(|_| LayerWeights {
                query: &eye + &gaussian_matrix(&mut rng, d, d, jitter),
                key: &eye + &gaussian_matrix(&mut rng, d, d, jitter),
                value: &eye + &gaussian_matrix(&mut rng, d, d, jitter),
            })
            .collect();
        Ok(Self {
            config,
            prior,
            lift,
            position_projection,
            time_direction,
            layers,
        })
    }

    pub fn config(&self) -> &ToyAttentionConfig {
        &self.config
    }

    /// The Gaussian predictor the attention residual is added to.
    pub fn prior(&self) -> &AnalyticGaussianBackend {
        &self.prior
    }

    fn base_factor(&self) -> usize {
        *self.config.pool_factors.iter().min().expect("validated")
    }

    /// Distinct pool factors in ascending order; feature levels follow it.
    fn levels(&self) -> Vec<usize> {
        let mut f = self.config.pool_factors.clone();
        f.sort_unstable();
        f.dedup();
        f
    }

    fn check_resolution(&self, (h, w): (usize, usize)) -> Result<()> {
        for &p in &self.config.pool_factors {
            if h % p != 0 || w % p != 0 || h < p || w < p {
                return Err(Error::Shape(format!(
                    "latent {h}×{w} not divisible by attention pool factor {p}"
                )));
            }
        }
        Ok(())
    }

    fn position_features(&self, grid: (usize, usize)) -> Array2<f64> {
        let (gh, gw) = grid;
        let n = POSITION_FREQUENCIES;
        let raw = Array2::from_shape_fn((gh * gw, 4 * n), |(i, k)| {
            let (y, x) = (i / gw, i % gw);
            let u = (y as f64 + 0.5) / gh as f64;
            let v = (x as f64 + 0.5) / gw as f64;
            let f = (k % n + 1) as f64 * std::f64::consts::PI;
            match k / n {
                0 => (f * u).sin(),
                1 => (f * u).cos(),
                2 => (f * v).sin(),
                _ => (f * v).cos(),
            }
        });
        raw.dot(&self.position_projection) * self.config.position_scale
    }

    /// Attention residual on the base token grid, `tokens × channels`.
    fn attention_residual(
        &self,
        z_t: &Latent,
        t: i64,
        emb: &PromptEmbedding,
        features: Option<&ConditionFeatures>,
        mut control: Option<&mut AttentionControlState>,
    ) -> Result<Array2<f64>> {
        let (h, w) = z_t.resolution();
        let base = self.base_factor();
        let grid = (h / base, w / base);
        let levels = self.levels();
        if let Some(f) = features {
            if f.levels.len() != levels.len() {
                return Err(Error::Shape(format!(
                    "expected {} feature levels, got {}",
                    levels.len(),
                    f.levels.len()
                )));
            }
            for (lvl, &p) in f.levels.iter().zip(&levels) {
                let rows = (h / p) * (w / p);
                if lvl.dim() != (rows, self.config.dim) {
                    return Err(Error::Shape(format!(
                        "feature level for pool {p} has shape {:?}, expected {:?}",
                        lvl.dim(),
                        (rows, self.config.dim)
                    )));
                }
            }
        }
        let pooled = emb.pooled();
        if pooled.len() != self.config.dim {
            return Err(Error::Config(format!(
                "embedding dim {} vs attention dim {}",
                pooled.len(),
                self.config.dim
            )));
        }
        let prompt_bias = Array1::from(pooled) * self.config.prompt_scale;
        let time_bias = &self.time_direction * (t as f64 / 1000.0 - 0.5);

        // Position, prompt, time and condition features steer where a token
        // attends; only latent content is carried by the values.
        let mut context = self.position_features(grid);
        context += &prompt_bias;
        context += &time_bias;
        let mut hidden = latent_tokens(&z_t.data, base).dot(&self.lift);
        let initial = hidden.clone();

        for (layer, weights) in self.layers.iter().enumerate() {
            let p = self.config.pool_factors[layer % self.config.pool_factors.len()];
            let ratio = p / base;
            let local = pool_tokens(&hidden, grid, ratio);
            let mut steer = &local + &pool_tokens(&context, grid, ratio);
            if let Some(f) = features {
                let lvl = levels.iter().position(|&l| l == p).expect("level exists");
                steer += &f.levels[lvl];
            }
            let q = steer.dot(&weights.query) * self.config.sharpness;
            let k = steer.dot(&weights.key);
            let v = local.dot(&weights.value);
            let site = AttentionSite {
                layer,
                resolution: (h / p, w / p),
            };
            let attended = match control.as_deref_mut() {
                Some(state) => controlled_attention(state, site, q.view(), k.view(), v.view())?,
                None => scaled_dot_attention(q.view(), k.view(), v.view())?,
            };
            let update = (attended - &v) * self.config.mixing;
            hidden += &upsample_tokens(&update, grid, ratio);
        }
        Ok((initial - hidden).dot(&self.lift.t()))
    }
}

/// Builds the toy attention backend.
pub fn make_toy_attention_backend(config: ToyAttentionConfig) -> Result<ToyAttentionBackend> {
    ToyAttentionBackend::new(config)
}

impl DiffusionBackend for ToyAttentionBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            name: "toy-attention".into(),
            compression_factor: 1,
            latent_channels: LATENT_CHANNELS,
            latent_space: LatentSpace::PixelIdentity,
            supports_features: true,
            supports_attention_hooks: true,
            supports_noise_pullback: false,
        }
    }

    fn scheduler(&self) -> &Scheduler {
        self.prior.scheduler()
    }

    fn embed_prompt(&self, text: &str, role: PromptRole) -> PromptEmbedding {
        hashed_prompt_embedding(text, role, EMBEDDING_LEN, self.config.dim)
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
        if z_t.channels() != LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "toy attention backend expects {LATENT_CHANNELS} latent channels, got {}",
                z_t.channels()
            )));
        }
        self.check_resolution(z_t.resolution())?;
        let base_eps = self.prior.predict_noise(z_t, t, emb, None, None)?;
        let residual = self.attention_residual(z_t, t, emb, features, control)?;

        let (c, h, w) = z_t.shape();
        let base = self.base_factor();
        let tw = w / base;
        let gain = self.config.residual_scale;
        let mut out = base_eps.data;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ch, y, x]] += gain * residual[[(y / base) * tw + x / base, ch]];
                }
            }
        }
        Ok(Latent::new(out, z_t.space))
    }

    fn attention_sites(&self, (h, w): (usize, usize)) -> Vec<AttentionSite> {
        (0..self.config.layer_count)
            .map(|layer| {
                let p = self.config.pool_factors[layer % self.config.pool_factors.len()];
                AttentionSite {
                    layer,
                    resolution: (h / p, w / p),
                }
            })
            .collect()
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
        self.check_resolution(latent_resolution)?;
        let z = identity_encode(&condition.clamped())?;
        let levels = self
            .levels()
            .into_iter()
            .map(|p| {
                (latent_tokens(&z.data, p) - 0.5).dot(&self.lift) * self.config.feature_scale
            })
            .collect();
        Ok(ConditionFeatures { levels, provenance })
    }
}
