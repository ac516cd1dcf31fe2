//! Probability dilution and the step reward.

use serde::{Deserialize, Serialize};

use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdParams {
    /// Number of competitor classes summed.
    pub top_n: usize,
    /// Probabilities are clamped to `[prob_floor, 1 - prob_floor]`.
    pub prob_floor: f64,
}

impl Default for PdParams {
    fn default() -> Self {
        Self {
            top_n: 5,
            prob_floor: 1e-6,
        }
    }
}

impl PdParams {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.top_n == 0 || !(self.prob_floor > 0.0 && self.prob_floor < 0.5) {
            return Err(EngineError::InvalidConfig(format!(
                "bad PD parameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sign convention for the targeted dilution term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetedPd {
    /// Rises as the target probability rises.
    #[default]
    Corrected,
    /// Target term negative, competitor terms positive, as for the
    /// untargeted form. Falls as the target probability rises.
    Literal,
}

/// `1 / ln(1 / p)`, increasing in `p` on (0, 1).
fn inv_log(p: f64) -> f64 {
    1.0 / (1.0 / p).ln()
}

fn split(probs: &[f64], focus: usize, params: &PdParams) -> Result<(f64, f64), EngineError> {
    if focus >= probs.len() {
        return Err(EngineError::ClassOutOfRange {
            class: focus,
            classes: probs.len(),
        });
    }
    let lo = params.prob_floor;
    let hi = 1.0 - params.prob_floor;
    let mut others: Vec<f64> = probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != focus)
        .map(|(_, &p)| p.clamp(lo, hi))
        .collect();
    others.sort_by(|a, b| b.total_cmp(a));
    let competitors = others.iter().take(params.top_n).map(|&p| inv_log(p)).sum();
    Ok((inv_log(probs[focus].clamp(lo, hi)), competitors))
}

/// Rises as probability mass leaves the true class.
pub fn pd_untargeted(
    probs: &[f64],
    true_class: usize,
    params: &PdParams,
) -> Result<f64, EngineError> {
    let (g, k) = split(probs, true_class, params)?;
    Ok(-g + k)
}

pub fn pd_targeted(
    probs: &[f64],
    target: usize,
    params: &PdParams,
    mode: TargetedPd,
) -> Result<f64, EngineError> {
    let (t, k) = split(probs, target, params)?;
    Ok(match mode {
        TargetedPd::Corrected => t - k,
        TargetedPd::Literal => -t + k,
    })
}

/// Denominator floor for the reward ratio.
pub const REWARD_EPSILON: f64 = 1e-6;

/// How the reward treats steps whose L2 change is zero or negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFloor {
    /// Denominator `max(delta_l2, REWARD_EPSILON)`: a step that lowers L2
    /// is scored as if it cost `REWARD_EPSILON`.
    #[default]
    Floored,
    /// Denominator keeps the sign of `delta_l2` with magnitude at least
    /// `REWARD_EPSILON`, so the ratio is the raw signed quotient.
    Signed,
}

/// `delta_pd / delta_l2` with the denominator guarded per `floor`, clamped
/// to `[-clip, clip]`.
pub fn step_reward(delta_pd: f64, delta_l2: f64, clip: f64, floor: RewardFloor) -> f64 {
    let denom = match floor {
        RewardFloor::Floored => delta_l2.max(REWARD_EPSILON),
        RewardFloor::Signed if delta_l2 < 0.0 => delta_l2.min(-REWARD_EPSILON),
        RewardFloor::Signed => delta_l2.max(REWARD_EPSILON),
    };
    (delta_pd / denom).clamp(-clip, clip)
}
