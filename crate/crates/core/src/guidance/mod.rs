//! Classifier-free guidance, the delta denoising score (DDS) gradient, the
//! perceptual loss and the three phase losses built from them.
//!
//! Sign convention: the optimized latent `z` forms the target branch and the
//! fixed reference `ẑ` the source branch. In difference mode the gradient on
//! `z` is `√ᾱ_t·(ε_tgt − ε_src)`, the chain rule through
//! `z_t = √ᾱ_t·z + √(1−ᾱ_t)·ε` included.

mod losses;
mod perceptual;

use serde::{Deserialize, Serialize};

pub use losses::{
    loss_composition_gradient, loss_harmonization_gradient, loss_removal_gradient, dds_term,
    BranchControl, CompositionTerms, DdsInputs, DdsTerm, HarmonizationTerms, LossOutput,
    PhaseLossWeights, PromptSet, RemovalTerms, StepSample,
};
pub use perceptual::{perceptual_loss, perceptual_loss_and_grad, FeatureExtractor, ToyPyramid};

use crate::error::{Error, Result};
use crate::tensor::Latent;

/// Guidance scale `w` in the form `ε_u + w·(ε_c − ε_u)`.
///
/// The equivalent form `(1 + w')·ε_c − w'·ε_u` maps to `w = 1 + w'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CfgWeight(f64);

impl CfgWeight {
    pub const DEFAULT: CfgWeight = CfgWeight(7.5);

    pub fn new(w: f64) -> Result<Self> {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Config(format!("guidance weight must be ≥ 0, got {w}")));
        }
        Ok(Self(w))
    }

    /// Converts from the `(1 + w')·ε_c − w'·ε_u` parametrization.
    pub fn from_extrapolation_form(w_prime: f64) -> Result<Self> {
        Self::new(1.0 + w_prime)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for CfgWeight {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for CfgWeight {
    type Error = Error;

    fn try_from(w: f64) -> Result<Self> {
        Self::new(w)
    }
}

impl From<CfgWeight> for f64 {
    fn from(w: CfgWeight) -> f64 {
        w.0
    }
}

/// `ε_u + w·(ε_c − ε_u)` elementwise.
pub fn cfg_combine(eps_c: &Latent, eps_u: &Latent, w: CfgWeight) -> Result<Latent> {
    eps_c.check_same_shape(eps_u, "guidance inputs")?;
    let w = w.value();
    Ok(Latent::new(
        &eps_u.data + &((&eps_c.data - &eps_u.data) * w),
        eps_c.space,
    ))
}

/// How the DDS gradient reaches the optimized latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Prediction difference times `∂z_t/∂z`; never differentiates the predictor.
    #[default]
    Difference,
    /// Exact gradient of `‖ε_src − ε_tgt‖²` through the predictor.
    MseBackprop,
}

/// DDS gradient on the optimized latent.
///
/// `target_pullback` maps a cotangent on the guided target prediction to a
/// cotangent on `z_t`; it is only invoked in [`GradMode::MseBackprop`].
pub fn dds_gradient(
    eps_src: &Latent,
    eps_tgt: &Latent,
    alpha_bar: f64,
    mode: GradMode,
    target_pullback: impl FnOnce(&Latent) -> Result<Latent>,
) -> Result<Latent> {
    eps_src.check_same_shape(eps_tgt, "DDS branches")?;
    let diff = Latent::new(&eps_tgt.data - &eps_src.data, eps_tgt.space);
    match mode {
        GradMode::Difference => Ok(diff.scaled(alpha_bar.sqrt())),
        GradMode::MseBackprop => {
            let pulled = target_pullback(&diff.scaled(2.0))?;
            Ok(pulled.scaled(alpha_bar.sqrt()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LatentSpace;
    use ndarray::Array3;

    fn scalar(v: f64) -> Latent {
        Latent::new(Array3::from_elem((1, 1, 1), v), LatentSpace::PixelIdentity)
    }

    #[test]
    fn cfg_examples() {
        let x = scalar(0.37);
        for w in [0.0, 1.0, 7.5, 100.0] {
            assert_eq!(cfg_combine(&x, &x, CfgWeight::new(w).unwrap()).unwrap(), x);
        }
        let c = scalar(2.0);
        let u = scalar(-1.0);
        assert_eq!(cfg_combine(&c, &u, CfgWeight::new(1.0).unwrap()).unwrap(), c);
        assert_eq!(
            cfg_combine(&scalar(1.0), &scalar(0.0), CfgWeight::new(7.5).unwrap()).unwrap(),
            scalar(7.5)
        );
        let bad = Latent::new(Array3::zeros((1, 2, 1)), LatentSpace::PixelIdentity);
        assert!(matches!(cfg_combine(&bad, &u, CfgWeight::DEFAULT), Err(Error::Shape(_))));
        assert!(CfgWeight::new(-0.5).is_err());
    }

    #[test]
    fn extrapolation_form_mapping() {
        let (c, u) = (scalar(0.8), scalar(0.2));
        let w_prime = 6.5;
        let direct = (1.0 + w_prime) * 0.8 - w_prime * 0.2;
        let mapped = cfg_combine(&c, &u, CfgWeight::from_extrapolation_form(w_prime).unwrap()).unwrap();
        assert!((mapped.data[[0, 0, 0]] - direct).abs() < 1e-12);
    }

    #[test]
    fn dds_examples() {
        let a = scalar(0.4);
        let g = dds_gradient(&a, &a, 0.5, GradMode::Difference, |_| unreachable!()).unwrap();
        assert_eq!(g.data[[0, 0, 0]], 0.0);
        let g = dds_gradient(&scalar(1.0), &scalar(3.0), 0.25, GradMode::Difference, |_| unreachable!())
            .unwrap();
        assert_eq!(g.data[[0, 0, 0]], 1.0);
        // mse mode with identity Jacobian: √ᾱ·2·(tgt − src)
        let g = dds_gradient(&scalar(1.0), &scalar(3.0), 0.25, GradMode::MseBackprop, |c| Ok(c.clone()))
            .unwrap();
        assert_eq!(g.data[[0, 0, 0]], 2.0);
    }
}
