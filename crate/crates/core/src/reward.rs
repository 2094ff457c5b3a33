//! Five-term reward and the sliding-window success test.

use serde::{Deserialize, Serialize};

use crate::render::OcclusionStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Occlusion reward scale `k`.
    pub k: f64,
    pub r_fv_value: f64,
    pub r_sv_value: f64,
    pub sc_penalty: f64,
    pub aad_weight: f64,
    /// Weights applied to (sc, occ, fv, sus, aad) in the total.
    pub weights: TermWeights,
    /// Occluded fraction strictly below which the fruit counts as fully visible.
    pub full_visibility_fraction: f64,
    pub sustain_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TermWeights {
    pub sc: f64,
    pub occ: f64,
    pub fv: f64,
    pub sus: f64,
    pub aad: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            sc: 1.0,
            occ: 1.0,
            fv: 1.0,
            sus: 1.0,
            aad: 1.0,
        }
    }
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            k: 1.0,
            r_fv_value: 3.0,
            r_sv_value: 2.0,
            sc_penalty: -5.0,
            aad_weight: 1.0,
            weights: TermWeights::default(),
            full_visibility_fraction: 0.05,
            sustain_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardConfigError {
    #[error("reward.{0} out of range")]
    OutOfRange(&'static str),
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if self.sustain_steps == 0 {
            return Err(RewardConfigError::OutOfRange("sustain_steps"));
        }
        if !(0.0..=1.0).contains(&self.full_visibility_fraction) {
            return Err(RewardConfigError::OutOfRange("full_visibility_fraction"));
        }
        if !(self.k.is_finite() && self.k >= 0.0) {
            return Err(RewardConfigError::OutOfRange("k"));
        }
        if !(self.aad_weight.is_finite() && self.aad_weight >= 0.0) {
            return Err(RewardConfigError::OutOfRange("aad_weight"));
        }
        Ok(())
    }

    /// Whether `occ` meets the full-visibility condition.
    pub fn fully_visible(&self, occ: &OcclusionStats) -> bool {
        occ.occluded_fraction()
            .is_some_and(|f| f < self.full_visibility_fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_sc: f64,
    pub r_occ: f64,
    pub r_fv: f64,
    pub r_sus: f64,
    pub r_aad: f64,
    pub total: f64,
}

/// Inputs that describe one transition for reward purposes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardInput {
    pub occlusion: OcclusionStats,
    pub collided: bool,
    /// Consecutive most-recent steps (including this one) at full visibility.
    pub full_visibility_streak: usize,
    /// Euclidean norm of the clipped action.
    pub action_magnitude: f64,
    /// True when the action was taken after full visibility was reached.
    pub mask_active: bool,
}

pub fn compute_reward(input: &RewardInput, cfg: &RewardConfig) -> RewardBreakdown {
    let occ = &input.occlusion;
    let r_occ = match occ.occluded_fraction() {
        Some(f) => (1.0 - f) * cfg.k,
        None => 0.0,
    };
    let r_fv = if cfg.fully_visible(occ) {
        cfg.r_fv_value
    } else {
        0.0
    };
    let r_sus = if cfg.fully_visible(occ) && input.full_visibility_streak >= cfg.sustain_steps {
        cfg.r_sv_value
    } else {
        0.0
    };
    let r_aad = if input.mask_active {
        -cfg.aad_weight * input.action_magnitude
    } else {
        0.0
    };
    let r_sc = if input.collided { cfg.sc_penalty } else { 0.0 };
    let w = &cfg.weights;
    let total = w.sc * r_sc + w.occ * r_occ + w.fv * r_fv + w.sus * r_sus + w.aad * r_aad;
    RewardBreakdown {
        r_sc,
        r_occ,
        r_fv,
        r_sus,
        r_aad,
        total,
    }
}

/// True iff the last `window` entries are all strictly below `threshold`.
pub fn check_success(history: &[f64], threshold: f64, window: usize) -> bool {
    if window == 0 || history.len() < window {
        return false;
    }
    history[history.len() - window..].iter().all(|&h| h < threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Threshold is a fraction of the fruit footprint.
    Fraction,
    /// Threshold is an absolute pixel count.
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuccessConfig {
    pub mode: ThresholdMode,
    pub threshold: f64,
    pub window: usize,
}

impl Default for SuccessConfig {
    fn default() -> Self {
        Self {
            mode: ThresholdMode::Fraction,
            threshold: 0.10,
            window: 5,
        }
    }
}

impl SuccessConfig {
    /// History entry for one observation; out-of-view fruit never counts.
    pub fn measure(&self, occ: &OcclusionStats) -> f64 {
        if occ.out_of_view() {
            return f64::INFINITY;
        }
        match self.mode {
            ThresholdMode::Fraction => occ.occluded_pixels as f64 / occ.fruit_pixels_total as f64,
            ThresholdMode::Pixels => occ.occluded_pixels as f64,
        }
    }
}
