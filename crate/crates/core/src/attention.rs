//! Scaled dot-product self-attention and the two key/value control
//! mechanisms: mask-guided exclusion (object removal) and gated replacement
//! from a recorded cache (semantic composition).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::tensor::{resize_area, PixelMask};

/// Row-wise softmax of `QKᵀ/√d`.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Result<Array2<f64>> {
    let d = q.ncols();
    if d == 0 {
        return Err(Error::Shape("attention head dimension must be positive".into()));
    }
    if k.ncols() != d {
        return Err(Error::Shape(format!(
            "query dim {d} vs key dim {}",
            k.ncols()
        )));
    }
    if k.nrows() == 0 {
        return Err(Error::EmptyContext("no key tokens".into()));
    }
    let mut logits = q.dot(&k.t()) / (d as f64).sqrt();
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(logits)
}

/// `Softmax(QKᵀ/√d)·V` with the softmax taken over the key axis.
pub fn scaled_dot_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if k.nrows() != v.nrows() {
        return Err(Error::Shape(format!(
            "{} keys vs {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    Ok(attention_weights(q, k)?.dot(&v))
}

/// Flattened token-space selector: `selected[i]` marks a token inside the
/// object region, whose key/value rows are discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    pub selected: Vec<bool>,
    pub resolution: (usize, usize),
    pub threshold: f64,
}

impl TokenMask {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Area-average resize to `h × w`, row-major flatten, strict `> threshold`.
pub fn build_token_mask(mask: &PixelMask, h: usize, w: usize, threshold: f64) -> Result<TokenMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "token mask threshold {threshold} outside [0, 1]"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("token grid must be at least 1×1".into()));
    }
    let resized = resize_area(&mask.data, h, w);
    Ok(TokenMask {
        selected: resized.iter().map(|&v| v > threshold).collect(),
        resolution: (h, w),
        threshold,
    })
}

/// Keeps the key/value rows whose token is not selected, in order.
pub fn exclude_kv(
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    tmask: &TokenMask,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if tmask.len() != k.nrows() || k.nrows() != v.nrows() {
        return Err(Error::Shape(format!(
            "token mask of length {} for {} keys / {} values",
            tmask.len(),
            k.nrows(),
            v.nrows()
        )));
    }
    let kept: Vec<usize> = (0..tmask.len()).filter(|&i| !tmask.selected[i]).collect();
    if kept.is_empty() {
        return Err(Error::EmptyContext(format!(
            "all {} tokens at resolution {:?} are selected",
            tmask.len(),
            tmask.resolution
        )));
    }
    Ok((k.select(Axis(0), &kept), v.select(Axis(0), &kept)))
}

/// Step/layer thresholds for key/value replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplacementGate {
    pub step: usize,
    pub layer: usize,
}

impl ReplacementGate {
    pub fn should_replace(&self, step: usize, layer: usize) -> bool {
        should_replace(*self, step, layer)
    }
}

/// Replacement is active iff `step > T` and `layer > L`, both strict.
pub fn should_replace(gate: ReplacementGate, step: usize, layer: usize) -> bool {
    step > gate.step && layer > gate.layer
}

/// Which half of a guided prediction a predictor call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchTag {
    Unconditional,
    Conditional,
}

/// Attention layer identity as seen by the hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSite {
    pub layer: usize,
    pub resolution: (usize, usize),
}

/// Keys and values recorded from the source branch, keyed by layer and branch.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    step: Option<usize>,
    entries: HashMap<(usize, BranchTag), (Array2<f64>, Array2<f64>)>,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every entry; subsequent writes belong to `step`.
    pub fn begin_step(&mut self, step: usize) {
        self.step = Some(step);
        self.entries.clear();
    }

    pub fn step(&self) -> Option<usize> {
        self.step
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(
        &mut self,
        layer: usize,
        tag: BranchTag,
        k: ArrayView2<f64>,
        v: ArrayView2<f64>,
    ) -> Result<()> {
        if self.entries.contains_key(&(layer, tag)) {
            return Err(Error::Logic(format!(
                "layer {layer} ({tag:?}) recorded twice in step {:?}",
                self.step
            )));
        }
        self.entries.insert((layer, tag), (k.to_owned(), v.to_owned()));
        Ok(())
    }

    pub fn get(&self, layer: usize, tag: BranchTag) -> Result<(&Array2<f64>, &Array2<f64>)> {
        self.entries
            .get(&(layer, tag))
            .map(|(k, v)| (k, v))
            .ok_or_else(|| {
                Error::AbsentEntry(format!(
                    "no keys/values recorded for layer {layer} ({tag:?}) in step {:?}",
                    self.step
                ))
            })
    }
}

/// Token masks for every attention resolution of a backend.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExclusionMasks {
    by_resolution: BTreeMap<(usize, usize), TokenMask>,
}

impl ExclusionMasks {
    /// Precomputes one token mask per distinct resolution in `sites`.
    pub fn for_sites(mask: &PixelMask, sites: &[AttentionSite], threshold: f64) -> Result<Self> {
        let mut by_resolution = BTreeMap::new();
        for site in sites {
            if !by_resolution.contains_key(&site.resolution) {
                let (h, w) = site.resolution;
                by_resolution.insert(site.resolution, build_token_mask(mask, h, w, threshold)?);
            }
        }
        Ok(Self { by_resolution })
    }

    pub fn insert(&mut self, tmask: TokenMask) {
        self.by_resolution.insert(tmask.resolution, tmask);
    }

    pub fn get(&self, resolution: (usize, usize)) -> Option<&TokenMask> {
        self.by_resolution.get(&resolution)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TokenMask> {
        self.by_resolution.values()
    }
}

/// Intervention applied to a layer's keys and values before any control
/// mode. Used to probe what the attention output depends on.
pub type KvProbe = Arc<dyn Fn(AttentionSite, &mut Array2<f64>, &mut Array2<f64>) + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub enum ControlMode {
    Plain,
    Exclude(Arc<ExclusionMasks>),
    Record,
    Replace(ReplacementGate),
}

/// Per-call attention control threaded through a predictor.
#[derive(Clone)]
pub struct AttentionControlState {
    pub mode: ControlMode,
    /// 1-based optimization step, compared against the replacement gate.
    pub step: usize,
    pub branch: BranchTag,
    pub cache: KvCache,
    pub probe: Option<KvProbe>,
}

impl fmt::Debug for AttentionControlState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttentionControlState")
            .field("mode", &self.mode)
            .field("step", &self.step)
            .field("branch", &self.branch)
            .field("cached_entries", &self.cache.len())
            .field("probe", &self.probe.is_some())
            .finish()
    }
}

impl Default for AttentionControlState {
    fn default() -> Self {
        Self::new(ControlMode::Plain)
    }
}

impl AttentionControlState {
    pub fn new(mode: ControlMode) -> Self {
        Self {
            mode,
            step: 0,
            branch: BranchTag::Unconditional,
            cache: KvCache::new(),
            probe: None,
        }
    }

    pub fn with_probe(mut self, probe: KvProbe) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn is_plain(&self) -> bool {
        matches!(self.mode, ControlMode::Plain) && self.probe.is_none()
    }
}

/// Routes one self-attention evaluation through the active control mode.
pub fn controlled_attention(
    state: &mut AttentionControlState,
    site: AttentionSite,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let probed;
    let (k, v) = match &state.probe {
        Some(probe) => {
            let mut k = k.to_owned();
            let mut v = v.to_owned();
            probe(site, &mut k, &mut v);
            probed = (k, v);
            (probed.0.view(), probed.1.view())
        }
        None => (k, v),
    };
    match &state.mode {
        ControlMode::Plain => scaled_dot_attention(q, k, v),
        ControlMode::Exclude(masks) => {
            let tmask = masks.get(site.resolution).ok_or_else(|| {
                Error::Config(format!(
                    "no token mask for attention resolution {:?} (layer {})",
                    site.resolution, site.layer
                ))
            })?;
            let (k, v) = exclude_kv(k, v, tmask)?;
            scaled_dot_attention(q, k.view(), v.view())
        }
        ControlMode::Record => {
            state.cache.record(site.layer, state.branch, k, v)?;
            scaled_dot_attention(q, k, v)
        }
        ControlMode::Replace(gate) => {
            if gate.should_replace(state.step, site.layer) {
                let (ck, cv) = state.cache.get(site.layer, state.branch)?;
                scaled_dot_attention(q, ck.view(), cv.view())
            } else {
                scaled_dot_attention(q, k, v)
            }
        }
    }
}
