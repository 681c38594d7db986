//! Per-class weight vectors for the two branches.
//!
//! Branch A is weighted by class difficulty (classes with low running Dice get
//! more weight), branch B by class distribution (rare classes get more
//! weight). Both vectors are normalized to mean 1, so uniform statistics give
//! the unweighted losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decay of the running per-class Dice.
pub const DICE_EMA_DECAY: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Voxel count per class over the labeled set.
    pub voxel_counts: Vec<u64>,
    /// Running per-class training Dice, each in `[0, 1]`.
    pub ema_dice: Vec<f64>,
}

impl ClassStats {
    pub fn new(voxel_counts: Vec<u64>) -> Self {
        let c = voxel_counts.len();
        ClassStats {
            voxel_counts,
            ema_dice: vec![0.0; c],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.voxel_counts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_diff: Vec<f64>,
    pub w_dist: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights {
            w_diff: vec![1.0; num_classes],
            w_dist: vec![1.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w_diff.len()
    }
}

/// Source of the two weight vectors. Swappable so other weighting formulas
/// can be plugged into the trainer.
pub trait ClassWeighting: Send + Sync {
    fn dist(&self, stats: &ClassStats) -> Result<Vec<f64>>;
    fn diff(&self, stats: &ClassStats) -> Result<Vec<f64>>;
}

/// Log-inverse-frequency for distribution, one-minus-running-Dice for difficulty.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogFrequencyDifficulty;

impl ClassWeighting for LogFrequencyDifficulty {
    fn dist(&self, stats: &ClassStats) -> Result<Vec<f64>> {
        dist_weights(stats)
    }

    fn diff(&self, stats: &ClassStats) -> Result<Vec<f64>> {
        diff_weights(stats)
    }
}

fn normalize_mean_one(v: Vec<f64>) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    if mean > 0.0 {
        v.into_iter().map(|x| x / mean).collect()
    } else {
        vec![1.0; v.len()]
    }
}

/// `u_c = ln(V / max(v_c, 1))`, normalized to mean 1.
pub fn dist_weights(stats: &ClassStats) -> Result<Vec<f64>> {
    let total: u64 = stats.voxel_counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("class voxel counts are all zero"));
    }
    let total = total as f64;
    let u = stats
        .voxel_counts
        .iter()
        .map(|&v| (total / v.max(1) as f64).ln())
        .collect();
    Ok(normalize_mean_one(u))
}

/// `q_c = 1 - ema_dice_c`, normalized to mean 1. All-perfect Dice gives ones.
pub fn diff_weights(stats: &ClassStats) -> Result<Vec<f64>> {
    if let Some(d) = stats.ema_dice.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::invalid(format!("running dice {d} outside [0,1]")));
    }
    Ok(normalize_mean_one(stats.ema_dice.iter().map(|d| 1.0 - d).collect()))
}

/// `ema ← 0.99·ema + 0.01·dice`, element-wise.
pub fn update_stats(stats: &ClassStats, per_class_dice: &[f64]) -> Result<ClassStats> {
    if per_class_dice.len() != stats.ema_dice.len() {
        return Err(Error::shape(format!(
            "{} dice values for {} classes",
            per_class_dice.len(),
            stats.ema_dice.len()
        )));
    }
    if let Some(d) = per_class_dice.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::invalid(format!("dice {d} outside [0,1]")));
    }
    let ema_dice = stats
        .ema_dice
        .iter()
        .zip(per_class_dice)
        .map(|(e, d)| (DICE_EMA_DECAY * e + (1.0 - DICE_EMA_DECAY) * d).clamp(0.0, 1.0))
        .collect();
    Ok(ClassStats {
        voxel_counts: stats.voxel_counts.clone(),
        ema_dice,
    })
}

pub fn compute_weights(scheme: &dyn ClassWeighting, stats: &ClassStats) -> Result<ClassWeights> {
    Ok(ClassWeights {
        w_diff: scheme.diff(stats)?,
        w_dist: scheme.dist(stats)?,
    })
}
