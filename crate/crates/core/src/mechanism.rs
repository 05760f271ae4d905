//! Sensitivity enforcement and the Gaussian mechanism applied to uploads.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::mixer::PatchMask;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Parameters of the Gaussian mechanism and of its Rényi-DP accounting.
///
/// `d_s` and `d_y` are accounting dimensions only; they need not match the
/// tensors actually noised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Per-element upper bound Δ on smashed data.
    pub delta_bound: f64,
    pub sigma_s: f64,
    pub sigma_y: f64,
    pub d_s: u64,
    pub d_y: u64,
    /// Rényi order α.
    pub alpha: f64,
}

impl Default for PrivacyParams {
    fn default() -> Self {
        Self {
            delta_bound: 0.2,
            sigma_s: 1.0,
            sigma_y: 1.0,
            d_s: 20,
            d_y: 10,
            alpha: 2.0,
        }
    }
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_bound > 0.0) || !self.delta_bound.is_finite() {
            return param_err(format!("Δ must be positive, got {}", self.delta_bound));
        }
        for (name, s) in [("sigma_s", self.sigma_s), ("sigma_y", self.sigma_y)] {
            if !(s >= 0.0) || s.is_nan() {
                return param_err(format!("{name} must be nonnegative, got {s}"));
            }
        }
        if self.d_s == 0 || self.d_y == 0 {
            return param_err("accounting dimensions must be positive");
        }
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return param_err(format!("RDP order must exceed 1, got {}", self.alpha));
        }
        Ok(())
    }
}

/// Clips every element into `[0, Δ]`.
pub fn clamp_smashed(s: &Tensor, delta_bound: f64) -> Tensor {
    s.map(|v| v.clamp(0.0, delta_bound))
}

/// 1 where the clamp passed the input through with unit slope, 0 where it clipped.
pub fn clamp_passthrough(pre: &Tensor, delta_bound: f64) -> Vec<bool> {
    pre.data()
        .iter()
        .map(|&v| v > 0.0 && v < delta_bound)
        .collect()
}

/// Adds `N(0, σ_s²)` to every element of the mask-selected patches only.
///
/// `s_masked` is `[N, F]`; unselected rows are left untouched (zero after masking).
pub fn gaussianize_smashed(
    rng: &mut SeededRng,
    s_masked: &Tensor,
    mask: &PatchMask,
    sigma_s: f64,
) -> Result<Tensor> {
    if !(sigma_s >= 0.0) || !sigma_s.is_finite() {
        return param_err(format!("sigma_s must be nonnegative, got {sigma_s}"));
    }
    if s_masked.rows() != mask.num_patches {
        return shape_err(format!(
            "mask covers {} patches, tensor has {}",
            mask.num_patches,
            s_masked.rows()
        ));
    }
    let mut out = s_masked.clone();
    if sigma_s > 0.0 {
        for &k in &mask.selected {
            for v in out.row_mut(k) {
                *v += sigma_s * rng.standard_normal();
            }
        }
    }
    Ok(out)
}

/// Adds `N(0, σ_y²)` to every label coordinate; no clipping afterwards.
pub fn gaussianize_label(rng: &mut SeededRng, y: &Tensor, sigma_y: f64) -> Result<Tensor> {
    if !(sigma_y >= 0.0) || !sigma_y.is_finite() {
        return param_err(format!("sigma_y must be nonnegative, got {sigma_y}"));
    }
    let mut out = y.clone();
    if sigma_y > 0.0 {
        for v in out.data_mut() {
            *v += sigma_y * rng.standard_normal();
        }
    }
    Ok(out)
}

pub fn one_hot(class: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[dim]);
    t.data_mut()[class] = 1.0;
    t
}
