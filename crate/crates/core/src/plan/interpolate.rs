use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::validate::entity_keys;
use super::{BBox, Condition, FrameLevelPlan, LatentPlan, PlanError, NO_MOTION};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationMode {
    /// Boxes blended linearly between the flanking key frames.
    #[default]
    Linear,
    /// Boxes copied from the nearest key frame.
    Nearest,
}

/// Position of latent frame `f` on the key-frame axis as
/// `(floor key, ceil key, fraction numerator, denominator)`; the continuous
/// position is `f * (K-1) / (F-1)`, computed in integers so endpoints are exact.
fn key_position(f: usize, keys: usize, frames: usize) -> (usize, usize, usize, usize) {
    let num = f * (keys - 1);
    let den = frames - 1;
    let lo = num / den;
    let rem = num % den;
    let hi = if rem == 0 { lo } else { (lo + 1).min(keys - 1) };
    (lo, hi, rem, den)
}

/// Resamples the key-frame plan onto `frame_count` latent frames.
///
/// Entity text comes from the nearest key frame (ties toward the earlier
/// one); boxes are blended between the flanking key frames, or copied from
/// whichever flank has the entity when only one does. Conditions are the
/// distinct `(entity, motion, caption)` triples in order of first use, after
/// the background condition 0.
pub fn interpolate_plan(
    plan: &FrameLevelPlan,
    frame_count: usize,
    mode: InterpolationMode,
) -> Result<LatentPlan, PlanError> {
    if frame_count < 2 {
        return Err(PlanError::InvalidFrameCount(frame_count));
    }
    let keys = plan.key_frames.len();
    if keys == 0 {
        return Err(PlanError::InvalidPlan("plan has no key frames".into()));
    }
    if plan.background.trim().is_empty() {
        return Err(PlanError::InvalidPlan("empty background".into()));
    }
    for (k, frame) in plan.key_frames.iter().enumerate() {
        if let Some(e) = frame.iter().find(|e| !e.bbox.is_valid()) {
            return Err(PlanError::InvalidPlan(format!(
                "Frame_{}: {} has invalid box {:?}",
                k + 1,
                e.entity,
                e.bbox.corners()
            )));
        }
    }

    let keyed: Vec<HashMap<(String, usize), BBox>> = plan
        .key_frames
        .iter()
        .map(|frame| {
            entity_keys(frame)
                .into_iter()
                .zip(frame.iter().map(|e| e.bbox))
                .collect()
        })
        .collect();

    let mut conditions = vec![Condition {
        id: 0,
        entity: "background".to_string(),
        motion: NO_MOTION.to_string(),
        caption: plan.background.clone(),
        latent_frame_span: (0..frame_count).collect(),
    }];
    let mut ids: HashMap<(String, String, String), usize> = HashMap::new();
    let mut latent_frames = Vec::with_capacity(frame_count);

    for f in 0..frame_count {
        let (lo, hi, rem, den) = key_position(f, keys, frame_count);
        let nearest = if 2 * rem > den { hi } else { lo };
        let frac = rem as f64 / den as f64;
        let source = &plan.key_frames[nearest];

        let mut regions = Vec::with_capacity(source.len());
        for (key, e) in entity_keys(source).into_iter().zip(source) {
            let bbox = match mode {
                InterpolationMode::Nearest => e.bbox,
                InterpolationMode::Linear => match (keyed[lo].get(&key), keyed[hi].get(&key)) {
                    (Some(a), Some(b)) => a.lerp(b, frac),
                    (Some(a), None) => *a,
                    (None, Some(b)) => *b,
                    (None, None) => e.bbox,
                },
            };
            let triple = (e.entity.clone(), e.motion.clone(), e.caption.clone());
            let id = *ids.entry(triple).or_insert_with(|| {
                conditions.push(Condition {
                    id: conditions.len(),
                    entity: e.entity.clone(),
                    motion: e.motion.clone(),
                    caption: e.caption.clone(),
                    latent_frame_span: Vec::new(),
                });
                conditions.len() - 1
            });
            let span = &mut conditions[id].latent_frame_span;
            if span.last() != Some(&f) {
                span.push(f);
            }
            regions.push((id, bbox));
        }
        latent_frames.push(regions);
    }

    Ok(LatentPlan {
        conditions,
        latent_frames,
        frame_count,
    })
}
