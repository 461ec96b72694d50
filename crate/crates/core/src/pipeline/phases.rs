use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::{optimize_latent, paste_object, Phase, PhaseConfig, PlacementSpec};
use crate::assets::{self, LossLog};
use crate::attention::AttentionControlState;
use crate::backend::{DiffusionBackend, FeatureProvenance};
use crate::error::{Error, Result};
use crate::guidance::{
    loss_composition_gradient, loss_harmonization_gradient, loss_removal_gradient, CompositionTerms,
    DdsInputs, FeatureExtractor, HarmonizationTerms, PromptSet, RemovalTerms,
};
use crate::tensor::{resize_bilinear, ImageTensor, Latent, PixelMask};

/// Result of one optimization phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutput {
    /// Decoded and clamped to [0, 1].
    pub image: ImageTensor,
    pub latent: Latent,
    pub log: LossLog,
}

fn finish(backend: &dyn DiffusionBackend, z: Latent, log: LossLog) -> Result<PhaseOutput> {
    let image = backend.decode(&z)?.clamped();
    Ok(PhaseOutput { image, latent: z, log })
}

fn prepare(backend: &dyn DiffusionBackend, cfg: &PhaseConfig, image: &ImageTensor) -> Result<Latent> {
    cfg.validate(backend.scheduler().t_max())?;
    let z = backend.encode(&image.clamped())?;
    z.ensure_finite("encoded latent")?;
    Ok(z)
}

/// Erases the region selected by `mask`, optimizing from `encode(source)`.
pub fn remove_object(
    backend: &dyn DiffusionBackend,
    extractor: &dyn FeatureExtractor,
    source: &ImageTensor,
    mask: &PixelMask,
    cfg: &PhaseConfig,
) -> Result<PhaseOutput> {
    let z0 = prepare(backend, cfg, source)?;
    let prompts = PromptSet::embed(backend, &cfg.source_prompt, &cfg.target_prompt);
    let terms = RemovalTerms::new(
        backend,
        source,
        mask,
        z0.resolution(),
        cfg.weights.background_dds_scale,
        cfg.mask_threshold,
    )?;
    let inputs = DdsInputs {
        backend,
        prompts: &prompts,
        cfg_weight: cfg.cfg_weight,
        mode: cfg.grad_mode,
    };
    let mut state = AttentionControlState::default();
    let (z, log) = optimize_latent(z0.clone(), cfg, |z, sample| {
        loss_removal_gradient(&inputs, extractor, &z0, z, &terms, &cfg.weights, sample, &mut state)
    })?;
    finish(backend, z, log)
}

/// Adjusts the appearance of a copy-paste composite.
pub fn harmonize(
    backend: &dyn DiffusionBackend,
    extractor: &dyn FeatureExtractor,
    paste_image: &ImageTensor,
    paste_mask: &PixelMask,
    cfg: &PhaseConfig,
) -> Result<PhaseOutput> {
    let z0 = prepare(backend, cfg, paste_image)?;
    let prompts = PromptSet::embed(backend, &cfg.source_prompt, &cfg.target_prompt);
    let terms = HarmonizationTerms::new(paste_image, paste_mask)?;
    let inputs = DdsInputs {
        backend,
        prompts: &prompts,
        cfg_weight: cfg.cfg_weight,
        mode: cfg.grad_mode,
    };
    let (z, log) = optimize_latent(z0.clone(), cfg, |z, sample| {
        loss_harmonization_gradient(&inputs, extractor, &z0, z, &terms, &cfg.weights, sample)
    })?;
    finish(backend, z, log)
}

/// Source/target conditions of the composition phase.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditions {
    /// Prompt pair `(P_o, P_t)`.
    Text { source: String, target: String },
    /// Condition images `(C_o, C_t)` translated to features by the backend;
    /// prompts come from the phase config.
    Features {
        source: ImageTensor,
        target: ImageTensor,
        provenance: FeatureProvenance,
    },
}

/// Structurally adapts `input` to the target condition while keeping the
/// source identity through gated self-attention replacement.
pub fn semantic_compose(
    backend: &dyn DiffusionBackend,
    input: &ImageTensor,
    conditions: &Conditions,
    cfg: &PhaseConfig,
) -> Result<PhaseOutput> {
    let z0 = prepare(backend, cfg, input)?;
    let gate = cfg
        .gate
        .ok_or_else(|| Error::validation("composition.gate", "composition requires a replacement gate"))?;
    let latent_res = z0.resolution();
    let (prompts, terms) = match conditions {
        Conditions::Text { source, target } => (
            PromptSet::embed(backend, source, target),
            CompositionTerms {
                source_features: None,
                target_features: None,
                gate,
            },
        ),
        Conditions::Features {
            source,
            target,
            provenance,
        } => {
            let features = |img: &ImageTensor| {
                let img = resize_bilinear(img, latent_res.0, latent_res.1);
                backend.condition_features(&img, *provenance, latent_res)
            };
            (
                PromptSet::embed(backend, &cfg.source_prompt, &cfg.target_prompt),
                CompositionTerms {
                    source_features: Some(features(source)?),
                    target_features: Some(features(target)?),
                    gate,
                },
            )
        }
    };
    let inputs = DdsInputs {
        backend,
        prompts: &prompts,
        cfg_weight: cfg.cfg_weight,
        mode: cfg.grad_mode,
    };
    let mut state = AttentionControlState::default();
    let (z, log) = optimize_latent(z0.clone(), cfg, |z, sample| {
        loss_composition_gradient(&inputs, &z0, z, &terms, sample, &mut state)
    })?;
    finish(backend, z, log)
}

/// Inputs of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionRequest {
    /// `I_s`, the background source.
    pub source_image: ImageTensor,
    /// `M_s`, the region to clear and to receive the object.
    pub source_mask: PixelMask,
    /// `I_t`, the image holding the object.
    pub object_image: ImageTensor,
    /// `M_t`, the object footprint in `I_t`.
    pub object_mask: PixelMask,
    pub conditions: Option<Conditions>,
    pub placement: PlacementSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub removal: PhaseConfig,
    pub harmonization: PhaseConfig,
    pub composition: PhaseConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            removal: PhaseConfig::removal(),
            harmonization: PhaseConfig::harmonization(),
            composition: PhaseConfig::composition(),
        }
    }
}

/// Everything a run produced; fields stay `None` for stages that did not
/// complete.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunArtifacts {
    /// `I_b`
    pub background: Option<ImageTensor>,
    /// `I_p`
    pub paste_image: Option<ImageTensor>,
    /// `M_p`
    pub paste_mask: Option<PixelMask>,
    /// `I_c`
    pub harmonized: Option<ImageTensor>,
    /// `I_res`
    pub result: Option<ImageTensor>,
    pub logs: Vec<(Phase, LossLog)>,
}

impl RunArtifacts {
    pub fn log(&self, phase: Phase) -> Option<&LossLog> {
        self.logs.iter().find(|(p, _)| *p == phase).map(|(_, l)| l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Removal,
    Paste,
    Harmonization,
    Composition,
}

/// A failed run together with whatever it produced before failing.
#[derive(Debug, thiserror::Error)]
#[error("{stage:?} stage failed: {error}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub error: Error,
    pub partial: Box<RunArtifacts>,
}

/// Removal, paste, harmonization and, when conditions are given,
/// composition. With `output_dir` set every artifact is written as soon as
/// it exists and a failure leaves an `error.json` manifest next to them.
pub fn run_pipeline(
    request: &CompositionRequest,
    cfg: &PipelineConfig,
    backend: &dyn DiffusionBackend,
    extractor: &dyn FeatureExtractor,
    output_dir: Option<&Path>,
) -> std::result::Result<RunArtifacts, PipelineError> {
    let mut artifacts = RunArtifacts::default();
    match run_stages(request, cfg, backend, extractor, output_dir, &mut artifacts) {
        Ok(()) => Ok(artifacts),
        Err((stage, error)) => {
            if let Some(dir) = output_dir {
                if let Err(e) = assets::write_error_manifest(dir, stage, &error) {
                    log::error!("could not write error manifest: {e}");
                }
            }
            Err(PipelineError {
                stage,
                error,
                partial: Box::new(artifacts),
            })
        }
    }
}

fn run_stages(
    request: &CompositionRequest,
    cfg: &PipelineConfig,
    backend: &dyn DiffusionBackend,
    extractor: &dyn FeatureExtractor,
    output_dir: Option<&Path>,
    artifacts: &mut RunArtifacts,
) -> std::result::Result<(), (Stage, Error)> {
    let save = |stage: Stage, f: &dyn Fn(&Path) -> Result<()>| match output_dir {
        Some(dir) => f(dir).map_err(|e| (stage, e)),
        None => Ok(()),
    };

    let removal = remove_object(backend, extractor, &request.source_image, &request.source_mask, &cfg.removal)
        .map_err(|e| (Stage::Removal, e))?;
    info!("removal finished: final loss {:?}", removal.log.last_total());
    save(Stage::Removal, &|dir| {
        assets::write_image(dir.join(assets::BACKGROUND_FILE), &removal.image)?;
        removal.log.flush(dir.join(assets::log_file(Phase::Removal)))
    })?;
    artifacts.background = Some(removal.image.clone());
    artifacts.logs.push((Phase::Removal, removal.log));

    let (paste_image, paste_mask) = paste_object(
        &removal.image,
        &request.object_image,
        &request.object_mask,
        &request.source_mask,
        request.placement,
    )
    .map_err(|e| (Stage::Paste, e))?;
    save(Stage::Paste, &|dir| {
        assets::write_image(dir.join(assets::PASTE_FILE), &paste_image)?;
        assets::write_mask(dir.join(assets::PASTE_MASK_FILE), &paste_mask)
    })?;
    artifacts.paste_image = Some(paste_image.clone());
    artifacts.paste_mask = Some(paste_mask.clone());

    let harmonized = harmonize(backend, extractor, &paste_image, &paste_mask, &cfg.harmonization)
        .map_err(|e| (Stage::Harmonization, e))?;
    info!("harmonization finished: final loss {:?}", harmonized.log.last_total());
    save(Stage::Harmonization, &|dir| {
        assets::write_image(dir.join(assets::HARMONIZED_FILE), &harmonized.image)?;
        harmonized.log.flush(dir.join(assets::log_file(Phase::Harmonization)))
    })?;
    artifacts.harmonized = Some(harmonized.image.clone());
    artifacts.logs.push((Phase::Harmonization, harmonized.log));

    let result = match &request.conditions {
        None => harmonized.image,
        Some(conditions) => {
            let composed = semantic_compose(backend, &harmonized.image, conditions, &cfg.composition)
                .map_err(|e| (Stage::Composition, e))?;
            info!("composition finished: final loss {:?}", composed.log.last_total());
            save(Stage::Composition, &|dir| {
                composed.log.flush(dir.join(assets::log_file(Phase::Composition)))
            })?;
            artifacts.logs.push((Phase::Composition, composed.log));
            composed.image
        }
    };
    save(Stage::Composition, &|dir| assets::write_image(dir.join(assets::RESULT_FILE), &result))?;
    artifacts.result = Some(result);
    Ok(())
}
