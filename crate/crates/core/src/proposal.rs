//! Foreground/background region selection for support images.
//!
//! An unsupervised proposer yields candidate masks; the mask with the highest
//! mean attribution becomes the foreground and the one with the lowest the
//! background. When the proposer produces nothing usable, thresholds on the
//! attribution map are used instead.

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::support::{AttributionMap, SupportImage};

pub const DEFAULT_FALLBACK_FG: f32 = 0.5;
pub const DEFAULT_FALLBACK_BG: f32 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Mask>,
    /// The proposer emitted a mask for the background region.
    pub includes_background_proposal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskProvenance {
    Proposer,
    Fallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FgBgMasks {
    pub fg: Mask,
    pub bg: Mask,
    pub provenance: MaskProvenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub masks: FgBgMasks,
    pub fg_index: usize,
    pub bg_index: usize,
    pub fg_mean: f64,
    pub bg_mean: f64,
}

impl Selection {
    /// Foreground and background are the same mask (single candidate or all
    /// means tied).
    pub fn is_degenerate(&self) -> bool {
        self.fg_index == self.bg_index
    }
}

/// Mean attribution inside `mask`, or `None` for an all-off mask.
pub fn mean_attribution(mask: &Mask, attribution: &AttributionMap) -> Option<f64> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (&on, &a) in mask.data().iter().zip(attribution.values().data()) {
        if on {
            sum += a as f64;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Highest / lowest mean-attribution masks. Ties go to the lowest index;
/// all-off masks are not candidates.
pub fn select_fg_bg(masks: &MaskSet, attribution: &AttributionMap) -> Result<Selection> {
    let shape = attribution.shape();
    let mut best: Option<(usize, f64)> = None;
    let mut worst: Option<(usize, f64)> = None;
    for (i, m) in masks.masks.iter().enumerate() {
        if m.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "mask {i} is {:?}, attribution is {shape:?}",
                m.shape()
            )));
        }
        let Some(mean) = mean_attribution(m, attribution) else { continue };
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((i, mean));
        }
        if worst.is_none_or(|(_, w)| mean < w) {
            worst = Some((i, mean));
        }
    }
    let ((fg_index, fg_mean), (bg_index, bg_mean)) = best.zip(worst).ok_or(Error::EmptyProposals)?;
    Ok(Selection {
        masks: FgBgMasks {
            fg: masks.masks[fg_index].clone(),
            bg: masks.masks[bg_index].clone(),
            provenance: MaskProvenance::Proposer,
        },
        fg_index,
        bg_index,
        fg_mean,
        bg_mean,
    })
}

/// `fg = A > fg_thresh`, `bg = A < bg_thresh`; pixels in between are unassigned.
pub fn fallback_masks(attribution: &AttributionMap, fg_thresh: f32, bg_thresh: f32) -> Result<FgBgMasks> {
    if !(0.0 <= bg_thresh && bg_thresh < fg_thresh && fg_thresh <= 1.0) {
        return Err(Error::InvalidValue(format!(
            "fallback thresholds need 0 <= bg < fg <= 1, got bg={bg_thresh} fg={fg_thresh}"
        )));
    }
    let values = attribution.values();
    Ok(FgBgMasks {
        fg: values.map(|&a| a > fg_thresh),
        bg: values.map(|&a| a < bg_thresh),
        provenance: MaskProvenance::Fallback,
    })
}

/// Unsupervised instance-mask proposer (CutLER-style). Must be deterministic
/// for a fixed input.
pub trait MaskProposer {
    fn name(&self) -> &str;
    fn propose(&self, image: &SupportImage) -> Result<MaskSet>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FallbackThresholds {
    pub fg: f32,
    pub bg: f32,
}

impl Default for FallbackThresholds {
    fn default() -> Self {
        Self { fg: DEFAULT_FALLBACK_FG, bg: DEFAULT_FALLBACK_BG }
    }
}

/// Proposer-backed selection with threshold fallback. Never fails: proposer
/// errors, empty proposals and degenerate selections all use the fallback.
pub fn propose(
    image: &SupportImage,
    attribution: &AttributionMap,
    proposer: &dyn MaskProposer,
    thresholds: FallbackThresholds,
) -> FgBgMasks {
    let (h, w) = attribution.shape();
    let selected = proposer.propose(image).and_then(|set| {
        let resized = MaskSet {
            masks: set.masks.iter().map(|m| m.resize_nearest(h, w)).collect(),
            includes_background_proposal: set.includes_background_proposal,
        };
        select_fg_bg(&resized, attribution)
    });
    match selected {
        Ok(sel) if !sel.is_degenerate() => sel.masks,
        other => {
            debug!(
                category = %image.category_id,
                sample = image.sample_index,
                reason = %other.map(|_| "degenerate selection".to_string()).unwrap_or_else(|e| e.to_string()),
                "using attribution fallback masks"
            );
            fallback_masks(attribution, thresholds.fg, thresholds.bg).unwrap_or_else(|_| {
                let d = FallbackThresholds::default();
                fallback_masks(attribution, d.fg, d.bg).expect("default thresholds are valid")
            })
        }
    }
}
