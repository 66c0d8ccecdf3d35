use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Binary cross-entropy with a root-class weight and an optional don't-care mask.
///
/// `L = -sum_{i not flagged} w_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)] / N_cared`
/// with `w_i = root_weight` on root voxels and 1 elsewhere. The weight only
/// scales the numerator; the denominator counts cared voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub root_weight: f64,
    pub use_dontcare: bool,
    pub clamp_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { root_weight: 1.0, use_dontcare: false, clamp_epsilon: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.root_weight > 0.0) {
            return Err(Error::config(format!("root_weight must be > 0, got {}", self.root_weight)));
        }
        if !(self.clamp_epsilon > 0.0 && self.clamp_epsilon < 0.5) {
            return Err(Error::config(format!("clamp_epsilon must be in (0, 0.5), got {}", self.clamp_epsilon)));
        }
        Ok(())
    }
}

/// Returns the loss and its derivative w.r.t. each prediction.
pub(super) fn bce_forward<T: Real>(
    pred: &[T],
    target: &[u8],
    dontcare: Option<&[u8]>,
    cfg: &LossConfig,
) -> Result<(T, Vec<T>)> {
    if target.len() != pred.len() {
        return Err(Error::shape(format!("loss target has {} voxels, prediction {}", target.len(), pred.len())));
    }
    let dontcare = if cfg.use_dontcare { dontcare } else { None };
    if let Some(dc) = dontcare {
        if dc.len() != pred.len() {
            return Err(Error::shape(format!("don't-care mask has {} voxels, prediction {}", dc.len(), pred.len())));
        }
    }
    let cared = |i: usize| dontcare.is_none_or(|dc| dc[i] == 0);
    let n_cared = (0..pred.len()).filter(|&i| cared(i)).count();
    if n_cared == 0 {
        return Err(Error::shape("loss has no cared voxels (every voxel is flagged don't-care)"));
    }
    let eps = T::lit(cfg.clamp_epsilon);
    let lo = eps;
    let hi = T::one() - eps;
    let w_root = T::lit(cfg.root_weight);
    let n = T::from(n_cared).expect("count fits");
    let mut sum = 0.0f64;
    let mut dpred = vec![T::zero(); pred.len()];
    for (i, (&p, &y)) in pred.iter().zip(target).enumerate() {
        if !cared(i) {
            continue;
        }
        let clamped = p < lo || p > hi;
        let pc = p.max(lo).min(hi);
        if y != 0 {
            sum -= (w_root * pc.ln()).to_f64().expect("finite");
            if !clamped {
                dpred[i] = -(w_root / pc) / n;
            }
        } else {
            sum -= (T::one() - pc).ln().to_f64().expect("finite");
            if !clamped {
                dpred[i] = (T::one() / (T::one() - pc)) / n;
            }
        }
    }
    let loss = T::lit(sum / n_cared as f64);
    Ok((loss, dpred))
}
