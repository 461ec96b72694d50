//! Phase orchestration: the adaptive-moment optimization loop, timestep
//! sampling, copy-paste compositing, the three editing phases and the
//! low-density diagnostic.

mod diagnostics;
mod paste;
mod phases;

use log::{debug, error};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use diagnostics::{latent_density_map, low_density_map, normalize_map, DensityMap};
pub use paste::{paste_object, PlacementSpec};
pub use phases::{
    harmonize, remove_object, run_pipeline, semantic_compose, CompositionRequest, Conditions,
    PhaseOutput, PipelineConfig, PipelineError, RunArtifacts, Stage,
};

use crate::assets::{LossLog, LossRow};
use crate::attention::ReplacementGate;
use crate::backend::NoiseSample;
use crate::error::{Error, Result};
use crate::guidance::{CfgWeight, GradMode, LossOutput, PhaseLossWeights, StepSample};
use crate::tensor::Latent;

pub const DEFAULT_LEARNING_RATE: f64 = 5e-2;
pub const REMOVAL_SOURCE_PROMPT: &str = "Something in some place.";
pub const REMOVAL_TARGET_PROMPT: &str = "Some place.";
pub const HARMONIZATION_TARGET_PROMPT: &str = "A harmonious scene.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Removal,
    Harmonization,
    Composition,
}

/// Inclusive timestep interval, written `[min, max]` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[i64; 2]", into = "[i64; 2]")]
pub struct TimestepRange {
    pub min: i64,
    pub max: i64,
}

impl TimestepRange {
    pub const fn new(min: i64, max: i64) -> Self {
        Self { min, max }
    }
}

impl From<[i64; 2]> for TimestepRange {
    fn from([min, max]: [i64; 2]) -> Self {
        Self { min, max }
    }
}

impl From<TimestepRange> for [i64; 2] {
    fn from(r: TimestepRange) -> Self {
        [r.min, r.max]
    }
}

/// Timestep range used for the last `final_steps` iterations of a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LateRange {
    pub final_steps: usize,
    pub range: TimestepRange,
}

/// Optimization recipe of one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub steps: usize,
    pub learning_rate: f64,
    pub timestep_range: TimestepRange,
    pub late_range: Option<LateRange>,
    pub cfg_weight: CfgWeight,
    pub weights: PhaseLossWeights,
    pub gate: Option<ReplacementGate>,
    pub grad_mode: GradMode,
    pub seed: u64,
    pub source_prompt: String,
    pub target_prompt: String,
    /// Token-mask threshold for attention exclusion.
    pub mask_threshold: f64,
}

impl PhaseConfig {
    pub fn removal() -> Self {
        Self {
            phase: Phase::Removal,
            steps: 150,
            learning_rate: DEFAULT_LEARNING_RATE,
            timestep_range: TimestepRange::new(50, 400),
            late_range: None,
            cfg_weight: CfgWeight::DEFAULT,
            weights: PhaseLossWeights::default(),
            gate: None,
            grad_mode: GradMode::Difference,
            seed: 0,
            source_prompt: REMOVAL_SOURCE_PROMPT.into(),
            target_prompt: REMOVAL_TARGET_PROMPT.into(),
            mask_threshold: 0.5,
        }
    }

    pub fn harmonization() -> Self {
        Self {
            phase: Phase::Harmonization,
            steps: 200,
            timestep_range: TimestepRange::new(50, 950),
            source_prompt: String::new(),
            target_prompt: HARMONIZATION_TARGET_PROMPT.into(),
            ..Self::removal()
        }
    }

    /// Text-conditioned composition; feature-conditioned runs use 200 steps.
    pub fn composition() -> Self {
        Self {
            phase: Phase::Composition,
            steps: 500,
            timestep_range: TimestepRange::new(50, 950),
            late_range: Some(LateRange {
                final_steps: 50,
                range: TimestepRange::new(50, 100),
            }),
            gate: Some(ReplacementGate { step: 400, layer: 10 }),
            source_prompt: String::new(),
            target_prompt: String::new(),
            ..Self::removal()
        }
    }

    pub fn validate(&self, t_max_absolute: u32) -> Result<()> {
        let section = match self.phase {
            Phase::Removal => "removal",
            Phase::Harmonization => "harmonization",
            Phase::Composition => "composition",
        };
        let key = |k: &str| format!("{section}.{k}");
        if self.steps < 1 {
            return Err(Error::validation(key("steps"), "must be ≥ 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation(key("learning_rate"), "must be > 0"));
        }
        let check_range = |name: &str, r: TimestepRange| {
            if r.min < 0 || r.min > r.max || r.max > i64::from(t_max_absolute) {
                return Err(Error::validation(
                    key(name),
                    format!("need 0 ≤ min ≤ max ≤ {t_max_absolute}, got [{}, {}]", r.min, r.max),
                ));
            }
            Ok(())
        };
        check_range("timestep_range", self.timestep_range)?;
        if let Some(late) = self.late_range {
            check_range("late_range", late.range)?;
        }
        if let Err(e) = self.weights.validate() {
            return Err(Error::validation(key("weights"), e.to_string()));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::validation(key("mask_threshold"), "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Range in effect at the 1-based `step`.
    pub fn range_for_step(&self, step: usize) -> TimestepRange {
        match self.late_range {
            Some(late) if step + late.final_steps > self.steps => late.range,
            _ => self.timestep_range,
        }
    }
}

/// Uniform integer in `[min, max]`, both ends inclusive.
pub fn sample_timestep<R: Rng + ?Sized>(range: TimestepRange, rng: &mut R) -> Result<i64> {
    if range.min > range.max {
        return Err(Error::Config(format!(
            "empty timestep range [{}, {}]",
            range.min, range.max
        )));
    }
    Ok(rng.random_range(range.min..=range.max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimized latent, moment estimates and the run's random stream.
#[derive(Debug, Clone)]
pub struct OptState {
    pub z: Latent,
    m: Array3<f64>,
    v: Array3<f64>,
    step: usize,
    rng: ChaCha8Rng,
    params: AdamParams,
}

impl OptState {
    pub fn new(z: Latent, seed: u64) -> Self {
        let shape = z.data.raw_dim();
        Self {
            z,
            m: Array3::zeros(shape.clone()),
            v: Array3::zeros(shape),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: AdamParams::default(),
        }
    }

    /// Completed iterations.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Draws the timestep and noise of the next iteration.
    pub fn next_sample(&mut self, cfg: &PhaseConfig) -> Result<StepSample> {
        let step = self.step + 1;
        let t = sample_timestep(cfg.range_for_step(step), &mut self.rng)?;
        let noise_seed: u64 = self.rng.random();
        Ok(StepSample {
            step,
            t,
            noise: NoiseSample::draw(self.z.shape(), noise_seed),
        })
    }

    /// One bias-corrected adaptive-moment update.
    pub fn apply(&mut self, grad: &Latent, learning_rate: f64) -> Result<()> {
        self.z.check_same_shape(grad, "gradient")?;
        let AdamParams { beta1, beta2, eps } = self.params;
        self.step += 1;
        let k = self.step as i32;
        let c1 = 1.0 - beta1.powi(k);
        let c2 = 1.0 - beta2.powi(k);
        ndarray::Zip::from(&mut self.z.data)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(&grad.data)
            .for_each(|z, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *z -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            });
        Ok(())
    }
}

/// Runs `cfg.steps` iterations of `step_fn` from `init`, logging one row per
/// step. Aborts on non-finite gradients or losses.
pub fn optimize_latent<F>(init: Latent, cfg: &PhaseConfig, mut step_fn: F) -> Result<(Latent, LossLog)>
where
    F: FnMut(&Latent, &StepSample) -> Result<LossOutput>,
{
    init.ensure_finite("initial latent")?;
    let mut state = OptState::new(init, cfg.seed);
    let mut log = LossLog::new();
    for _ in 0..cfg.steps {
        let sample = state.next_sample(cfg)?;
        let out = step_fn(&state.z, &sample)?;
        let grad_norm = out.gradient.norm();
        let finite = grad_norm.is_finite() && out.total.is_finite();
        if !finite {
            error!(
                "{:?} step {} (t = {}): non-finite gradient or loss (|g| = {grad_norm}, loss = {})",
                cfg.phase, sample.step, sample.t, out.total
            );
            return Err(Error::NonFinite(format!(
                "{:?} gradient at step {}",
                cfg.phase, sample.step
            )));
        }
        state.apply(&out.gradient, cfg.learning_rate)?;
        debug!(
            "{:?} step {} t={} loss={:.6} |g|={:.4e}",
            cfg.phase, sample.step, sample.t, out.total, grad_norm
        );
        log.append(LossRow {
            step: sample.step,
            t: sample.t,
            total: out.total,
            dds: out.dds,
            per_bak: out.per_bak,
            per_for: out.per_for,
            grad_norm,
        })?;
    }
    Ok((state.z, log))
}
