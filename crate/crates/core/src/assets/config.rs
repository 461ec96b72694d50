use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::ReplacementGate;
use crate::backend::{FeatureProvenance, ToyAttentionConfig, T_MAX_ABSOLUTE};
use crate::error::{Error, Result};
use crate::guidance::{CfgWeight, GradMode, PhaseLossWeights};
use crate::pipeline::{
    LateRange, PhaseConfig, PipelineConfig, PlacementSpec, TimestepRange, DEFAULT_LEARNING_RATE,
    HARMONIZATION_TARGET_PROMPT, REMOVAL_SOURCE_PROMPT, REMOVAL_TARGET_PROMPT,
};

/// `analytic`, `toy-attention` or `adapter:<spec>`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSelector {
    #[default]
    Analytic,
    ToyAttention,
    Adapter(String),
}

impl FromStr for BackendSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "toy-attention" => Ok(Self::ToyAttention),
            _ => match s.strip_prefix("adapter:") {
                Some(spec) if !spec.is_empty() => Ok(Self::Adapter(spec.to_string())),
                _ => Err(Error::validation(
                    "backend.selector",
                    format!("expected analytic, toy-attention or adapter:<spec>, got `{s}`"),
                )),
            },
        }
    }
}

impl TryFrom<String> for BackendSelector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for BackendSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Analytic => f.write_str("analytic"),
            Self::ToyAttention => f.write_str("toy-attention"),
            Self::Adapter(spec) => write!(f, "adapter:{spec}"),
        }
    }
}

impl From<BackendSelector> for String {
    fn from(s: BackendSelector) -> Self {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub selector: BackendSelector,
    /// Seed of the toy attention weights.
    pub seed: u64,
    /// Prior smoothness β of the desk-scale backends.
    pub smoothness: f64,
    pub layer_count: usize,
    pub dim: usize,
}

impl Default for BackendSection {
    fn default() -> Self {
        let toy = ToyAttentionConfig::default();
        Self {
            selector: BackendSelector::Analytic,
            seed: toy.seed,
            smoothness: toy.prior.smoothness,
            layer_count: toy.layer_count,
            dim: toy.dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemovalSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub timestep_range: TimestepRange,
    pub cfg_weight: CfgWeight,
    pub grad_mode: GradMode,
    pub lambda_per: f64,
    pub background_dds_scale: f64,
    pub mask_threshold: f64,
    pub source_prompt: String,
    pub target_prompt: String,
    pub seed: u64,
}

impl Default for RemovalSection {
    fn default() -> Self {
        let w = PhaseLossWeights::default();
        Self {
            steps: 150,
            learning_rate: DEFAULT_LEARNING_RATE,
            timestep_range: TimestepRange::new(50, 400),
            cfg_weight: CfgWeight::DEFAULT,
            grad_mode: GradMode::Difference,
            lambda_per: w.lambda_per,
            background_dds_scale: w.background_dds_scale,
            mask_threshold: 0.5,
            source_prompt: REMOVAL_SOURCE_PROMPT.into(),
            target_prompt: REMOVAL_TARGET_PROMPT.into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizationSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub timestep_range: TimestepRange,
    pub cfg_weight: CfgWeight,
    pub grad_mode: GradMode,
    pub lambda_bak: f64,
    pub lambda_for: f64,
    pub source_prompt: String,
    pub target_prompt: String,
    pub seed: u64,
}

impl Default for HarmonizationSection {
    fn default() -> Self {
        let w = PhaseLossWeights::default();
        Self {
            steps: 200,
            learning_rate: DEFAULT_LEARNING_RATE,
            timestep_range: TimestepRange::new(50, 950),
            cfg_weight: CfgWeight::DEFAULT,
            grad_mode: GradMode::Difference,
            lambda_bak: w.lambda_bak,
            lambda_for: w.lambda_for,
            source_prompt: String::new(),
            target_prompt: HARMONIZATION_TARGET_PROMPT.into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    #[default]
    Text,
    Sketch,
    Canny,
    External,
}

impl ConditionKind {
    pub fn provenance(self) -> Option<FeatureProvenance> {
        match self {
            Self::Text => None,
            Self::Sketch => Some(FeatureProvenance::Sketch),
            Self::Canny => Some(FeatureProvenance::Canny),
            Self::External => Some(FeatureProvenance::External),
        }
    }
}

/// Source and target conditions: prompts for `text`, image paths otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionsSection {
    #[serde(default)]
    pub kind: ConditionKind,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositionSection {
    /// Steps for text conditions.
    pub text_steps: usize,
    /// Steps for sketch, canny and external feature conditions.
    pub feature_steps: usize,
    pub learning_rate: f64,
    pub timestep_range: TimestepRange,
    pub late_range: TimestepRange,
    /// Number of final steps drawing from `late_range`.
    pub late_steps: usize,
    pub gate_step: usize,
    pub gate_layer: usize,
    pub cfg_weight: CfgWeight,
    pub grad_mode: GradMode,
    /// Prompts used alongside feature conditions.
    pub source_prompt: String,
    pub target_prompt: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<ConditionsSection>,
}

impl Default for CompositionSection {
    fn default() -> Self {
        Self {
            text_steps: 500,
            feature_steps: 200,
            learning_rate: DEFAULT_LEARNING_RATE,
            timestep_range: TimestepRange::new(50, 950),
            late_range: TimestepRange::new(50, 100),
            late_steps: 50,
            gate_step: 400,
            gate_layer: 10,
            cfg_weight: CfgWeight::DEFAULT,
            grad_mode: GradMode::Difference,
            source_prompt: String::new(),
            target_prompt: String::new(),
            seed: 0,
            conditions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Working resolution images are resized to on load.
    pub resolution: usize,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_image: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_mask: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_image: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_mask: Option<PathBuf>,
    pub placement: PlacementSpec,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            resolution: 512,
            output_dir: PathBuf::from("out"),
            source_image: None,
            source_mask: None,
            object_image: None,
            object_mask: None,
            placement: PlacementSpec::BboxFit,
        }
    }
}

/// Whole-run configuration file. Missing keys take the published defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backend: BackendSection,
    pub removal: RemovalSection,
    pub harmonization: HarmonizationSection,
    pub composition: CompositionSection,
    pub io: IoSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .and_then(|span| key_at(text, span.start))
                .or_else(|| backticked(e.message()))
                .unwrap_or_else(|| "<document>".into());
            Error::validation(key, e.message().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::validation(key, format!("must be ≥ 0, got {v}")))
            }
        };
        nonneg("backend.smoothness", self.backend.smoothness)?;
        if self.backend.layer_count < 1 {
            return Err(Error::validation("backend.layer_count", "must be ≥ 1"));
        }
        if self.backend.dim < 3 {
            return Err(Error::validation("backend.dim", "must be ≥ 3"));
        }
        nonneg("removal.lambda_per", self.removal.lambda_per)?;
        nonneg("removal.background_dds_scale", self.removal.background_dds_scale)?;
        nonneg("harmonization.lambda_bak", self.harmonization.lambda_bak)?;
        nonneg("harmonization.lambda_for", self.harmonization.lambda_for)?;
        let c = &self.composition;
        if c.text_steps < 1 {
            return Err(Error::validation("composition.text_steps", "must be ≥ 1"));
        }
        if c.feature_steps < 1 {
            return Err(Error::validation("composition.feature_steps", "must be ≥ 1"));
        }
        if c.late_steps > c.text_steps.min(c.feature_steps) {
            return Err(Error::validation("composition.late_steps", "exceeds the phase length"));
        }
        if self.io.resolution < 1 {
            return Err(Error::validation("io.resolution", "must be ≥ 1"));
        }
        self.removal_phase().validate(T_MAX_ABSOLUTE)?;
        self.harmonization_phase().validate(T_MAX_ABSOLUTE)?;
        self.composition_phase().validate(T_MAX_ABSOLUTE)
    }

    pub fn removal_phase(&self) -> PhaseConfig {
        let r = &self.removal;
        PhaseConfig {
            steps: r.steps,
            learning_rate: r.learning_rate,
            timestep_range: r.timestep_range,
            cfg_weight: r.cfg_weight,
            grad_mode: r.grad_mode,
            weights: PhaseLossWeights {
                lambda_per: r.lambda_per,
                background_dds_scale: r.background_dds_scale,
                ..PhaseLossWeights::default()
            },
            seed: r.seed,
            source_prompt: r.source_prompt.clone(),
            target_prompt: r.target_prompt.clone(),
            mask_threshold: r.mask_threshold,
            ..PhaseConfig::removal()
        }
    }

    pub fn harmonization_phase(&self) -> PhaseConfig {
        let h = &self.harmonization;
        PhaseConfig {
            steps: h.steps,
            learning_rate: h.learning_rate,
            timestep_range: h.timestep_range,
            cfg_weight: h.cfg_weight,
            grad_mode: h.grad_mode,
            weights: PhaseLossWeights {
                lambda_bak: h.lambda_bak,
                lambda_for: h.lambda_for,
                ..PhaseLossWeights::default()
            },
            seed: h.seed,
            source_prompt: h.source_prompt.clone(),
            target_prompt: h.target_prompt.clone(),
            ..PhaseConfig::harmonization()
        }
    }

    /// Step count follows the condition kind: text or features.
    pub fn composition_phase(&self) -> PhaseConfig {
        let c = &self.composition;
        let kind = c.conditions.as_ref().map_or(ConditionKind::Text, |cond| cond.kind);
        PhaseConfig {
            steps: if kind == ConditionKind::Text { c.text_steps } else { c.feature_steps },
            learning_rate: c.learning_rate,
            timestep_range: c.timestep_range,
            late_range: Some(LateRange {
                final_steps: c.late_steps,
                range: c.late_range,
            }),
            gate: Some(ReplacementGate {
                step: c.gate_step,
                layer: c.gate_layer,
            }),
            cfg_weight: c.cfg_weight,
            grad_mode: c.grad_mode,
            seed: c.seed,
            source_prompt: c.source_prompt.clone(),
            target_prompt: c.target_prompt.clone(),
            ..PhaseConfig::composition()
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            removal: self.removal_phase(),
            harmonization: self.harmonization_phase(),
            composition: self.composition_phase(),
        }
    }

    /// Sets every phase seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.removal.seed = seed;
        self.harmonization.seed = seed;
        self.composition.seed = seed;
    }
}

/// Dotted key of the assignment or table header covering byte `offset`.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let mut table = String::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        let end = start + line.len();
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if (start..end).contains(&offset) {
                return Some(table);
            }
        } else if (start..end).contains(&offset) {
            let key = trimmed.split('=').next()?.trim().trim_matches('"');
            if key.is_empty() {
                return None;
            }
            return Some(if table.is_empty() { key.to_string() } else { format!("{table}.{key}") });
        }
        start = end;
    }
    None
}

fn backticked(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(Error::Validation { key, .. }) => key,
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn override_touches_only_its_key() {
        let cfg = RunConfig::parse("[harmonization]\nlambda_for = 0.2\n").unwrap();
        let mut expected = RunConfig::default();
        expected.harmonization.lambda_for = 0.2;
        assert_eq!(cfg, expected);
        assert_eq!(cfg.harmonization_phase().weights.lambda_for, 0.2);
        assert_eq!(cfg.harmonization_phase().weights.lambda_bak, 0.3);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of("[removal]\nsteps = 0\n"), "removal.steps");
        assert_eq!(key_of("[removal]\nlearning_rate = \"fast\"\n"), "removal.learning_rate");
        assert_eq!(key_of("[harmonization]\nlambda_bak = -1.0\n"), "harmonization.lambda_bak");
        assert!(key_of("[composition]\nbogus = 1\n").contains("bogus"));
        assert!(key_of("[nope]\nx = 1\n").contains("nope"));
        assert_eq!(key_of("[backend]\nselector = \"gpu\"\n"), "backend.selector");
        assert_eq!(key_of("[composition]\ntext_steps = 0\n"), "composition.text_steps");
        assert_eq!(key_of("[composition]\nlate_range = [100, 50]\n"), "composition.late_range");
    }

    #[test]
    fn conditions_select_step_count() {
        let text = RunConfig::parse("[composition.conditions]\nsource = \"a dog\"\ntarget = \"a cat\"\n").unwrap();
        assert_eq!(text.composition_phase().steps, 500);
        let sketch = RunConfig::parse(
            "[composition.conditions]\nkind = \"sketch\"\nsource = \"a.png\"\ntarget = \"b.png\"\n",
        )
        .unwrap();
        assert_eq!(sketch.composition_phase().steps, 200);
    }

    #[test]
    fn selector_strings() {
        for s in ["analytic", "toy-attention", "adapter:sd21:/weights"] {
            assert_eq!(s.parse::<BackendSelector>().unwrap().to_string(), s);
        }
        assert!("adapter:".parse::<BackendSelector>().is_err());
    }

    #[test]
    fn explicit_placement_parses() {
        let cfg = RunConfig::parse("[io.placement]\nstrategy = \"explicit\"\noffset = [4, 6]\nscale = 0.5\n").unwrap();
        assert_eq!(cfg.io.placement, PlacementSpec::Explicit { offset: (4, 6), scale: 0.5 });
    }
}
