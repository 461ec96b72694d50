use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{cfg_combine, dds_gradient, perceptual_loss_and_grad, CfgWeight, FeatureExtractor, GradMode};
use crate::attention::{
    AttentionControlState, BranchTag, ControlMode, ExclusionMasks, ReplacementGate,
};
use crate::backend::{
    add_noise, mask_to_latent, ConditionFeatures, DiffusionBackend, NoiseSample, PromptEmbedding,
    PromptRole,
};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Latent, PixelMask};

/// Loss weights of the removal and harmonization phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseLossWeights {
    pub lambda_per: f64,
    pub lambda_bak: f64,
    pub lambda_for: f64,
    /// Multiplier on the removal DDS gradient outside the object region.
    pub background_dds_scale: f64,
}

impl Default for PhaseLossWeights {
    fn default() -> Self {
        Self {
            lambda_per: 0.3,
            lambda_bak: 0.3,
            lambda_for: 0.1,
            background_dds_scale: 0.2,
        }
    }
}

impl PhaseLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_per", self.lambda_per),
            ("lambda_bak", self.lambda_bak),
            ("lambda_for", self.lambda_for),
            ("background_dds_scale", self.background_dds_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Embeddings for one DDS evaluation: the empty prompt plus the source
/// (`P_o`) and target (`P_t`) prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub unconditional: PromptEmbedding,
    pub source: PromptEmbedding,
    pub target: PromptEmbedding,
}

impl PromptSet {
    pub fn embed(backend: &dyn DiffusionBackend, source: &str, target: &str) -> Self {
        Self {
            unconditional: backend.embed_prompt("", PromptRole::Unconditional),
            source: backend.embed_prompt(source, PromptRole::Source),
            target: backend.embed_prompt(target, PromptRole::Target),
        }
    }
}

/// Timestep and noise shared by both branches of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    /// 1-based optimization step.
    pub step: usize,
    pub t: i64,
    pub noise: NoiseSample,
}

#[derive(Clone, Copy)]
pub struct DdsInputs<'a> {
    pub backend: &'a dyn DiffusionBackend,
    pub prompts: &'a PromptSet,
    pub cfg_weight: CfgWeight,
    pub mode: GradMode,
}

/// Attention control applied to the source and target branches.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchControl {
    pub source: ControlMode,
    pub target: ControlMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdsTerm {
    pub gradient: Latent,
    /// `‖ε_src − ε_tgt‖²`.
    pub loss: f64,
    pub eps_source: Latent,
    pub eps_target: Latent,
}

/// Gradient and logged components of one phase loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub gradient: Latent,
    pub total: f64,
    pub dds: f64,
    pub per_bak: f64,
    pub per_for: f64,
}

/// CFG-combined prediction; the control state sees the unconditional call
/// tagged [`BranchTag::Unconditional`] and the conditional one
/// [`BranchTag::Conditional`].
#[allow(clippy::too_many_arguments)]
pub fn guided_noise(
    backend: &dyn DiffusionBackend,
    z_t: &Latent,
    t: i64,
    uncond: &PromptEmbedding,
    cond: &PromptEmbedding,
    w: CfgWeight,
    features: Option<&ConditionFeatures>,
    mut control: Option<&mut AttentionControlState>,
) -> Result<Latent> {
    if let Some(state) = control.as_deref_mut() {
        state.branch = BranchTag::Unconditional;
    }
    let eps_u = backend.predict_noise(z_t, t, uncond, features, control.as_deref_mut())?;
    if let Some(state) = control.as_deref_mut() {
        state.branch = BranchTag::Conditional;
    }
    let eps_c = backend.predict_noise(z_t, t, cond, features, control.as_deref_mut())?;
    cfg_combine(&eps_c, &eps_u, w)
}

/// DDS between the fixed source latent `ẑ` (source prompt) and the optimized
/// latent `z` (target prompt), both noised with the same `(t, ε)`.
pub fn dds_term(
    inputs: &DdsInputs<'_>,
    source_latent: &Latent,
    z: &Latent,
    sample: &StepSample,
    source_features: Option<&ConditionFeatures>,
    target_features: Option<&ConditionFeatures>,
    control: Option<(&mut AttentionControlState, &BranchControl)>,
) -> Result<DdsTerm> {
    source_latent.check_same_shape(z, "source and optimized latents")?;
    let backend = inputs.backend;
    let prompts = inputs.prompts;
    let w = inputs.cfg_weight;
    let t = sample.t;
    let scheduler = backend.scheduler();
    let alpha_bar = scheduler.alpha_bar(t)?;
    let src_t = add_noise(source_latent, &sample.noise, t, scheduler)?;
    let z_t = add_noise(z, &sample.noise, t, scheduler)?;

    let mut controlled = false;
    let (eps_source, eps_target) = match control {
        None => (
            guided_noise(backend, &src_t, t, &prompts.unconditional, &prompts.source, w, source_features, None)?,
            guided_noise(backend, &z_t, t, &prompts.unconditional, &prompts.target, w, target_features, None)?,
        ),
        Some((state, plan)) => {
            controlled = plan.source != ControlMode::Plain || plan.target != ControlMode::Plain;
            state.step = sample.step;
            if plan.source == ControlMode::Record {
                state.cache.begin_step(sample.step);
            }
            state.mode = plan.source.clone();
            let s = guided_noise(
                backend, &src_t, t, &prompts.unconditional, &prompts.source, w, source_features, Some(state),
            )?;
            state.mode = plan.target.clone();
            let g = guided_noise(
                backend, &z_t, t, &prompts.unconditional, &prompts.target, w, target_features, Some(state),
            )?;
            (s, g)
        }
    };

    if inputs.mode == GradMode::MseBackprop && controlled && backend.info().supports_attention_hooks {
        return Err(Error::Capability(
            "mse_backprop through controlled attention is not supported".into(),
        ));
    }
    let gradient = dds_gradient(&eps_source, &eps_target, alpha_bar, inputs.mode, |cot| {
        let ju = backend.noise_pullback(&z_t, t, &prompts.unconditional, target_features, cot)?;
        let jc = backend.noise_pullback(&z_t, t, &prompts.target, target_features, cot)?;
        let wv = w.value();
        Ok(Latent::new(ju.data * (1.0 - wv) + jc.data * wv, z.space))
    })?;
    let loss = (&eps_source.data - &eps_target.data).mapv(|d| d * d).sum();
    Ok(DdsTerm {
        gradient,
        loss,
        eps_source,
        eps_target,
    })
}

/// Fixed inputs of the object-removal loss.
#[derive(Debug, Clone)]
pub struct RemovalTerms {
    /// `I_s`, the perceptual reference.
    pub source_image: ImageTensor,
    /// `M_s′`, the region kept by the perceptual anchor.
    pub keep_mask: PixelMask,
    /// DDS gradient weights on the latent grid: 1 inside the resized `M_s`,
    /// `background_dds_scale` outside, blended on fractional cells.
    pub latent_weights: Array2<f64>,
    pub exclusion: Arc<ExclusionMasks>,
}

impl RemovalTerms {
    pub fn new(
        backend: &dyn DiffusionBackend,
        source_image: &ImageTensor,
        object_mask: &PixelMask,
        latent_resolution: (usize, usize),
        background_dds_scale: f64,
        threshold: f64,
    ) -> Result<Self> {
        if source_image.resolution() != object_mask.resolution() {
            return Err(Error::Shape(format!(
                "image {:?} vs mask {:?}",
                source_image.resolution(),
                object_mask.resolution()
            )));
        }
        if object_mask.complement().is_empty() {
            return Err(Error::EmptyContext("no pixel is left outside the mask".into()));
        }
        let resized = mask_to_latent(object_mask, latent_resolution);
        let latent_weights = resized
            .data
            .mapv(|m| background_dds_scale + (1.0 - background_dds_scale) * m.clamp(0.0, 1.0));
        let sites = backend.attention_sites(latent_resolution);
        let exclusion = ExclusionMasks::for_sites(object_mask, &sites, threshold)?;
        for tmask in exclusion.iter() {
            if tmask.selected_count() == tmask.len() {
                return Err(Error::EmptyContext(format!(
                    "token grid {:?} is fully selected",
                    tmask.resolution
                )));
            }
        }
        Ok(Self {
            source_image: source_image.clone(),
            keep_mask: object_mask.complement(),
            latent_weights,
            exclusion: Arc::new(exclusion),
        })
    }
}

/// `L_rmv`: mask-guided DDS (target branch with object tokens excluded from
/// self-attention) plus `λ_per·L_per(I_s ⊗ M_s′, Decode(z) ⊗ M_s′)`.
#[allow(clippy::too_many_arguments)]
pub fn loss_removal_gradient(
    inputs: &DdsInputs<'_>,
    extractor: &dyn FeatureExtractor,
    source_latent: &Latent,
    z: &Latent,
    terms: &RemovalTerms,
    weights: &PhaseLossWeights,
    sample: &StepSample,
    state: &mut AttentionControlState,
) -> Result<LossOutput> {
    let plan = BranchControl {
        source: ControlMode::Plain,
        target: ControlMode::Exclude(terms.exclusion.clone()),
    };
    let dds = dds_term(inputs, source_latent, z, sample, None, None, Some((state, &plan)))?;
    let dds_grad = dds.gradient.weighted(&terms.latent_weights)?;
    let backend = inputs.backend;
    let decoded = backend.decode(z)?;
    let (per, img_grad) =
        perceptual_loss_and_grad(&terms.source_image, &decoded, extractor, Some(&terms.keep_mask))?;
    let per_grad = backend.decode_pullback(z, &img_grad)?;
    let gradient = Latent::new(dds_grad.data + per_grad.data * weights.lambda_per, z.space);
    Ok(LossOutput {
        gradient,
        total: dds.loss + weights.lambda_per * per,
        dds: dds.loss,
        per_bak: per,
        per_for: 0.0,
    })
}

/// Fixed inputs of the harmonization loss.
#[derive(Debug, Clone)]
pub struct HarmonizationTerms {
    /// `I_p`, the copy-paste image.
    pub paste_image: ImageTensor,
    /// `M_p`, the pasted object footprint.
    pub object_mask: PixelMask,
    pub background_mask: PixelMask,
}

impl HarmonizationTerms {
    pub fn new(paste_image: &ImageTensor, object_mask: &PixelMask) -> Result<Self> {
        if paste_image.resolution() != object_mask.resolution() {
            return Err(Error::Shape(format!(
                "image {:?} vs mask {:?}",
                paste_image.resolution(),
                object_mask.resolution()
            )));
        }
        Ok(Self {
            paste_image: paste_image.clone(),
            object_mask: object_mask.clone(),
            background_mask: object_mask.complement(),
        })
    }
}

/// `L_har`: plain DDS plus background and foreground perceptual anchors.
pub fn loss_harmonization_gradient(
    inputs: &DdsInputs<'_>,
    extractor: &dyn FeatureExtractor,
    source_latent: &Latent,
    z: &Latent,
    terms: &HarmonizationTerms,
    weights: &PhaseLossWeights,
    sample: &StepSample,
) -> Result<LossOutput> {
    let dds = dds_term(inputs, source_latent, z, sample, None, None, None)?;
    let backend = inputs.backend;
    let decoded = backend.decode(z)?;
    let (bak, bak_grad) =
        perceptual_loss_and_grad(&terms.paste_image, &decoded, extractor, Some(&terms.background_mask))?;
    let (fore, fore_grad) =
        perceptual_loss_and_grad(&terms.paste_image, &decoded, extractor, Some(&terms.object_mask))?;
    let img_grad = ImageTensor::new(bak_grad.data * weights.lambda_bak + fore_grad.data * weights.lambda_for)?;
    let per_grad = backend.decode_pullback(z, &img_grad)?;
    Ok(LossOutput {
        gradient: Latent::new(dds.gradient.data + per_grad.data, z.space),
        total: dds.loss + weights.lambda_bak * bak + weights.lambda_for * fore,
        dds: dds.loss,
        per_bak: bak,
        per_for: fore,
    })
}

/// Fixed inputs of the semantic composition loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionTerms {
    pub source_features: Option<ConditionFeatures>,
    pub target_features: Option<ConditionFeatures>,
    pub gate: ReplacementGate,
}

/// `L_com`: DDS only. The source branch runs with `f_s` and records its
/// self-attention keys/values; the target branch runs with `f_t` and
/// attends to the recorded ones wherever the gate fires.
pub fn loss_composition_gradient(
    inputs: &DdsInputs<'_>,
    source_latent: &Latent,
    z: &Latent,
    terms: &CompositionTerms,
    sample: &StepSample,
    state: &mut AttentionControlState,
) -> Result<LossOutput> {
    let plan = BranchControl {
        source: ControlMode::Record,
        target: ControlMode::Replace(terms.gate),
    };
    let dds = dds_term(
        inputs,
        source_latent,
        z,
        sample,
        terms.source_features.as_ref(),
        terms.target_features.as_ref(),
        Some((state, &plan)),
    )?;
    Ok(LossOutput {
        gradient: dds.gradient,
        total: dds.loss,
        dds: dds.loss,
        per_bak: 0.0,
        per_for: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{
        AnalyticGaussianBackend, AnalyticGaussianConfig, ToyAttentionBackend, ToyAttentionConfig,
    };
    use crate::guidance::ToyPyramid;
    use crate::tensor::LatentSpace;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ToyAttentionBackend {
        ToyAttentionBackend::new(ToyAttentionConfig {
            layer_count: 4,
            pool_factors: vec![2, 4],
            ..ToyAttentionConfig::default()
        })
        .unwrap()
    }

    fn image(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_simple_fn((16, 16, 3), || rng.random::<f64>())).unwrap()
    }

    fn sample(step: usize, t: i64) -> StepSample {
        StepSample {
            step,
            t,
            noise: NoiseSample::draw((3, 16, 16), step as u64 * 31 + 7),
        }
    }

    fn object_mask() -> PixelMask {
        PixelMask::from_fn(16, 16, |y, x| (4..10).contains(&y) && (5..11).contains(&x))
    }

    #[test]
    fn default_weights() {
        let w = PhaseLossWeights::default();
        assert_eq!((w.lambda_per, w.lambda_bak, w.lambda_for, w.background_dds_scale), (0.3, 0.3, 0.1, 0.2));
    }

    #[test]
    fn removal_step_zero_has_zero_perceptual_term() {
        let b = toy();
        let img = image(1);
        let z = b.encode(&img).unwrap();
        let prompts = PromptSet::embed(&b, "Something in some place.", "Some place.");
        let inputs = DdsInputs { backend: &b, prompts: &prompts, cfg_weight: CfgWeight::DEFAULT, mode: GradMode::Difference };
        let terms = RemovalTerms::new(&b, &img, &object_mask(), (16, 16), 0.2, 0.5).unwrap();
        let mut state = AttentionControlState::default();
        let out = loss_removal_gradient(
            &inputs, &ToyPyramid::default(), &z, &z, &terms, &PhaseLossWeights::default(), &sample(1, 200), &mut state,
        )
        .unwrap();
        assert_eq!(out.per_bak, 0.0);
        assert!(out.dds > 0.0);
    }

    #[test]
    fn removal_gradient_decomposes_into_components() {
        let b = toy();
        let img = image(2);
        let zhat = b.encode(&img).unwrap();
        let mut z = zhat.clone();
        z.data.mapv_inplace(|v| v * 0.9 + 0.03);
        let prompts = PromptSet::embed(&b, "Something in some place.", "Some place.");
        let inputs = DdsInputs { backend: &b, prompts: &prompts, cfg_weight: CfgWeight::DEFAULT, mode: GradMode::Difference };
        let mask = object_mask();
        let weights = PhaseLossWeights::default();
        let terms = RemovalTerms::new(&b, &img, &mask, (16, 16), weights.background_dds_scale, 0.5).unwrap();
        let s = sample(3, 321);
        let mut state = AttentionControlState::default();
        let full = loss_removal_gradient(&inputs, &ToyPyramid::default(), &zhat, &z, &terms, &weights, &s, &mut state)
            .unwrap();

        // independent recomputation of each component
        let sched = b.scheduler();
        let ab = sched.alpha_bar(s.t).unwrap();
        let src_t = add_noise(&zhat, &s.noise, s.t, sched).unwrap();
        let z_t = add_noise(&z, &s.noise, s.t, sched).unwrap();
        let w = 7.5;
        let pred = |lat: &Latent, emb: &PromptEmbedding, ctl: Option<&mut AttentionControlState>| {
            b.predict_noise(lat, s.t, emb, None, ctl).unwrap().data
        };
        let eps_s = {
            let u = pred(&src_t, &prompts.unconditional, None);
            let c = pred(&src_t, &prompts.source, None);
            &u + &((&c - &u) * w)
        };
        let eps_t = {
            let mut st = AttentionControlState::new(ControlMode::Exclude(terms.exclusion.clone()));
            let u = pred(&z_t, &prompts.unconditional, Some(&mut st));
            let c = pred(&z_t, &prompts.target, Some(&mut st));
            &u + &((&c - &u) * w)
        };
        let mut expected = (&eps_t - &eps_s) * ab.sqrt();
        for mut plane in expected.outer_iter_mut() {
            plane *= &terms.latent_weights;
        }
        let (_, per_grad) = perceptual_loss_and_grad(
            &img, &b.decode(&z).unwrap(), &ToyPyramid::default(), Some(&mask.complement()),
        )
        .unwrap();
        let per_grad = per_grad.data.view().permuted_axes([2, 0, 1]).to_owned();
        expected = expected + per_grad * 0.3;
        let max_diff = full
            .gradient
            .data
            .iter()
            .zip(expected.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn all_covering_mask_is_empty_context() {
        let b = toy();
        let img = image(3);
        let full = PixelMask::from_fn(16, 16, |_, _| true);
        assert!(matches!(
            RemovalTerms::new(&b, &img, &full, (16, 16), 0.2, 0.5),
            Err(Error::EmptyContext(_))
        ));
        // no attention sites to exhaust, still rejected
        let a = AnalyticGaussianBackend::new(AnalyticGaussianConfig::default()).unwrap();
        let err = RemovalTerms::new(&a, &img, &full, (16, 16), 0.2, 0.5).unwrap_err();
        assert!(err.to_string().contains("mask covers entire image"));
    }

    #[test]
    fn harmonization_zero_perceptual_at_start_and_decomposes() {
        let b = AnalyticGaussianBackend::new(AnalyticGaussianConfig::default()).unwrap();
        let img = image(4);
        let zhat = b.encode(&img).unwrap();
        let prompts = PromptSet::embed(&b, "", "A harmonious scene.");
        let inputs = DdsInputs { backend: &b, prompts: &prompts, cfg_weight: CfgWeight::DEFAULT, mode: GradMode::Difference };
        let mask = object_mask();
        let terms = HarmonizationTerms::new(&img, &mask).unwrap();
        let weights = PhaseLossWeights::default();
        let s = sample(1, 500);
        let start = loss_harmonization_gradient(&inputs, &ToyPyramid::default(), &zhat, &zhat, &terms, &weights, &s).unwrap();
        assert_eq!((start.per_bak, start.per_for), (0.0, 0.0));

        let z = Latent::new(zhat.data.mapv(|v| v * 0.5), LatentSpace::PixelIdentity);
        let out = loss_harmonization_gradient(&inputs, &ToyPyramid::default(), &zhat, &z, &terms, &weights, &s).unwrap();
        let dds = dds_term(&inputs, &zhat, &z, &s, None, None, None).unwrap();
        let dec = b.decode(&z).unwrap();
        let (_, gb) = perceptual_loss_and_grad(&img, &dec, &ToyPyramid::default(), Some(&mask.complement())).unwrap();
        let (_, gf) = perceptual_loss_and_grad(&img, &dec, &ToyPyramid::default(), Some(&mask)).unwrap();
        let per = (gb.data * 0.3 + gf.data * 0.1).permuted_axes([2, 0, 1]);
        let expected = dds.gradient.data + per;
        let max_diff = out.gradient.data.iter().zip(expected.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_diff <= 1e-12);
    }

    #[test]
    fn composition_gate_inactive_equals_plain_dds_with_features() {
        let b = toy();
        let img = image(5);
        let zhat = b.encode(&img).unwrap();
        let z = Latent::new(zhat.data.mapv(|v| 0.8 * v + 0.1), LatentSpace::PixelIdentity);
        let cond_s = image(6);
        let cond_t = image(7);
        let fs = b.condition_features(&cond_s, crate::backend::FeatureProvenance::Sketch, (16, 16)).unwrap();
        let ft = b.condition_features(&cond_t, crate::backend::FeatureProvenance::Sketch, (16, 16)).unwrap();
        let prompts = PromptSet::embed(&b, "a dog", "a dog");
        let inputs = DdsInputs { backend: &b, prompts: &prompts, cfg_weight: CfgWeight::DEFAULT, mode: GradMode::Difference };
        let terms = CompositionTerms {
            source_features: Some(fs.clone()),
            target_features: Some(ft.clone()),
            gate: ReplacementGate { step: 400, layer: 1 },
        };
        let s = sample(400, 600);
        let mut state = AttentionControlState::default();
        let out = loss_composition_gradient(&inputs, &zhat, &z, &terms, &s, &mut state).unwrap();
        let plain = dds_term(&inputs, &zhat, &z, &s, Some(&fs), Some(&ft), None).unwrap();
        assert_eq!(out.gradient, plain.gradient);

        // once the gate fires the target branch differs from the plain one
        let s = sample(401, 600);
        let fired = loss_composition_gradient(&inputs, &zhat, &z, &terms, &s, &mut state).unwrap();
        let plain = dds_term(&inputs, &zhat, &z, &s, Some(&fs), Some(&ft), None).unwrap();
        assert_ne!(fired.gradient, plain.gradient);
    }

    #[test]
    fn composition_identical_branches_zero_gradient() {
        let b = toy();
        let img = image(8);
        let zhat = b.encode(&img).unwrap();
        let cond = image(9);
        let f = b.condition_features(&cond, crate::backend::FeatureProvenance::Canny, (16, 16)).unwrap();
        let prompts = PromptSet::embed(&b, "a cat", "a cat");
        // same text under different roles still maps to distinct tags; use
        // the target embedding on both sides for an exact null case
        let prompts = PromptSet { source: prompts.target.clone(), ..prompts };
        let inputs = DdsInputs { backend: &b, prompts: &prompts, cfg_weight: CfgWeight::DEFAULT, mode: GradMode::Difference };
        let terms = CompositionTerms {
            source_features: Some(f.clone()),
            target_features: Some(f),
            gate: ReplacementGate { step: 0, layer: 0 },
        };
        let mut state = AttentionControlState::default();
        let out = loss_composition_gradient(&inputs, &zhat, &zhat, &terms, &sample(5, 450), &mut state).unwrap();
        assert!(out.gradient.data.iter().all(|&g| g == 0.0));
        assert_eq!(out.dds, 0.0);
    }

    #[test]
    fn mse_mode_on_toy_backend_is_capability_error() {
        let b = toy();
        let img = image(10);
        let z = b.encode(&img).unwrap();
        let prompts = PromptSet::embed(&b, "", "x");
        let inputs = DdsInputs { backend: &b, prompts: &prompts, cfg_weight: CfgWeight::DEFAULT, mode: GradMode::MseBackprop };
        assert!(matches!(
            dds_term(&inputs, &z, &z, &sample(1, 100), None, None, None),
            Err(Error::Capability(_))
        ));
    }
}
