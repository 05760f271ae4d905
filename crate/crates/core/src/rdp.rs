//! Closed-form Rényi-DP budgets for the plain Gaussian, Mixup, and patch
//! CutMix upload mechanisms.
//!
//! With `A = Δ²·D_s/σ_s²`, `B = D_y/σ_y²` and `m = max λ_i`:
//!
//! * baseline: `α/2 · (A + B)`
//! * mixup:    `α·m²/2 · (A + B)`
//! * cutmix:   `α·m/2 · (A + m·B)`
//!
//! A zero noise scale yields `f64::INFINITY` (no guarantee).

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::mechanism::PrivacyParams;
use crate::mixer::MixingRatios;

/// `sup D_α` between two Gaussians with common std `sigma` whose means are
/// `mean_diff_sq_norm` apart (squared L2): `α·‖Δμ‖² / 2σ²`.
pub fn gaussian_renyi_bound(mean_diff_sq_norm: f64, sigma: f64, alpha: f64) -> f64 {
    if mean_diff_sq_norm == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    alpha * mean_diff_sq_norm / (2.0 * sigma * sigma)
}

/// `Δ²·D_s/σ_s²`, the smashed-data sensitivity term.
fn smashed_term(p: &PrivacyParams) -> f64 {
    ratio(p.delta_bound * p.delta_bound * p.d_s as f64, p.sigma_s)
}

/// `D_y/σ_y²`, the one-hot label sensitivity term.
fn label_term(p: &PrivacyParams) -> f64 {
    ratio(p.d_y as f64, p.sigma_y)
}

fn ratio(sq_norm: f64, sigma: f64) -> f64 {
    if sq_norm == 0.0 {
        0.0
    } else if sigma == 0.0 {
        f64::INFINITY
    } else {
        sq_norm / (sigma * sigma)
    }
}

pub fn eps_baseline(p: &PrivacyParams) -> f64 {
    p.alpha / 2.0 * (smashed_term(p) + label_term(p))
}

pub fn eps_mixup(p: &PrivacyParams, lambdas: &MixingRatios) -> f64 {
    let m = lambdas.max();
    eps_mixup_at(p, m)
}

pub fn eps_cutmix(p: &PrivacyParams, lambdas: &MixingRatios) -> f64 {
    eps_cutmix_at(p, lambdas.max())
}

/// Mixup budget as a function of the largest ratio alone.
pub fn eps_mixup_at(p: &PrivacyParams, max_lambda: f64) -> f64 {
    p.alpha * max_lambda * max_lambda / 2.0 * (smashed_term(p) + label_term(p))
}

/// CutMix budget as a function of the largest ratio alone.
pub fn eps_cutmix_at(p: &PrivacyParams, max_lambda: f64) -> f64 {
    p.alpha * max_lambda / 2.0 * (smashed_term(p) + max_lambda * label_term(p))
}

fn serialize_budget<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

/// The three budgets at one parameter point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RdpReport {
    pub alpha: f64,
    #[serde(serialize_with = "serialize_budget")]
    pub eps_o: f64,
    #[serde(serialize_with = "serialize_budget")]
    pub eps_mix: f64,
    #[serde(serialize_with = "serialize_budget")]
    pub eps_cutmix: f64,
    pub max_lambda: f64,
    #[serde(skip)]
    pub params: PrivacyParams,
}

impl RdpReport {
    pub fn all_equal(&self) -> bool {
        self.eps_mix == self.eps_cutmix && self.eps_cutmix == self.eps_o
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Evaluates all budgets at `max_lambda` and checks `ε_mix ≤ ε_cutmix ≤ ε_o`.
pub fn report_at(p: &PrivacyParams, max_lambda: f64) -> Result<RdpReport> {
    p.validate()?;
    if !(max_lambda > 0.0 && max_lambda <= 1.0) {
        return Err(Error::Parameter(format!(
            "max λ must lie in (0, 1], got {max_lambda}"
        )));
    }
    let report = RdpReport {
        alpha: p.alpha,
        eps_o: eps_baseline(p),
        eps_mix: eps_mixup_at(p, max_lambda),
        eps_cutmix: eps_cutmix_at(p, max_lambda),
        max_lambda,
        params: *p,
    };
    if !(report.eps_mix <= report.eps_cutmix && report.eps_cutmix <= report.eps_o) {
        return Err(Error::Invariant(format!(
            "budget ordering violated: mix {} cutmix {} baseline {}",
            report.eps_mix, report.eps_cutmix, report.eps_o
        )));
    }
    if max_lambda == 1.0 && !report.all_equal() {
        return Err(Error::Invariant("single-client budgets differ".into()));
    }
    Ok(report)
}

pub fn verify_ordering(p: &PrivacyParams, lambdas: &MixingRatios) -> Result<RdpReport> {
    report_at(p, lambdas.max())
}
