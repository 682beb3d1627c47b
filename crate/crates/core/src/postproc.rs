//! Enhancing-tumor suppression: when a prediction contains fewer
//! enhancing-tumor voxels than a threshold, those voxels are relabeled
//! (necrosis by default) on the grounds that tiny enhancing components are
//! usually false positives.

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// Threshold profile for enhancing-tumor suppression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PostprocConfig {
    /// Suppress when the enhancing-tumor voxel count is strictly below this.
    pub et_threshold: usize,
    /// Label the suppressed voxels become. Must stay inside {0, 1, 2}.
    pub relabel_target: u8,
}

impl PostprocConfig {
    pub fn new(et_threshold: usize, relabel_target: u8) -> Result<PostprocConfig> {
        if !matches!(relabel_target, 0 | 1 | 2) {
            return Err(Error::config(format!(
                "postproc: relabel target {relabel_target} outside {{0, 1, 2}}"
            )));
        }
        Ok(PostprocConfig { et_threshold, relabel_target })
    }
}

impl Default for PostprocConfig {
    /// Threshold 200 voxels, relabel to necrosis.
    fn default() -> PostprocConfig {
        PostprocConfig { et_threshold: 200, relabel_target: 1 }
    }
}

/// Outcome of [`threshold_et`], carrying the counts behind the decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThresholdOutcome {
    pub et_count: usize,
    pub suppressed: bool,
}

/// Relabels every enhancing-tumor voxel to `cfg.relabel_target` when their
/// count falls strictly below `cfg.et_threshold`; otherwise the volume
/// passes through unchanged. All other labels are untouched either way.
pub fn threshold_et(vol: &LabelVolume, cfg: &PostprocConfig) -> Result<(LabelVolume, ThresholdOutcome)> {
    if !matches!(cfg.relabel_target, 0 | 1 | 2) {
        return Err(Error::config(format!(
            "postproc: relabel target {} outside {{0, 1, 2}}",
            cfg.relabel_target
        )));
    }
    let et_count = vol.voxels.iter().filter(|&&v| v == 4).count();
    let suppressed = et_count < cfg.et_threshold && et_count > 0;
    let out = if suppressed {
        let mut v = vol.clone();
        for voxel in v.voxels.iter_mut() {
            if *voxel == 4 {
                *voxel = cfg.relabel_target;
            }
        }
        v
    } else {
        vol.clone()
    };
    Ok((out, ThresholdOutcome { et_count, suppressed }))
}
