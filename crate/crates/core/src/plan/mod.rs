//! Dual-level story plans: the scene catalog produced by the story-level
//! prompt and the six-key-frame layout plans produced per scene.
//!
//! Parsing accepts the LLM output grammar directly (optionally preceded by a
//! `[Output]` marker or a `*Reasoning*` section). Emission produces text that
//! re-parses to an identical plan.

mod emit;
mod interpolate;
mod parse;
mod validate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use emit::{emit_frame_plan, emit_high_level_plan, format_coord};
pub use interpolate::{interpolate_plan, InterpolationMode};
pub use parse::{parse_frame_plan, parse_high_level_plan};
pub use validate::{
    validate_frame_plan, validate_high_level_plan, Finding, HighLevelRules, Rule, RuleConfig, ValidationReport,
};

/// Number of key frames in a frame-level plan (one per second of video).
pub const KEY_FRAMES: usize = 6;

/// Default number of latent frames key frames are interpolated onto.
pub const DEFAULT_LATENT_FRAMES: usize = 12;

/// Motion label for entities without motion.
pub const NO_MOTION: &str = "none";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("no scene found in plan text")]
    MissingScene,
    #[error("line {line}: scene {scene:?} has no narration")]
    MissingNarration { line: usize, scene: String },
    #[error("line {line}: scene {scene:?} has no motions")]
    MissingMotions { line: usize, scene: String },
    #[error("line {line}: malformed header {text:?}")]
    MalformedHeader { line: usize, text: String },
    #[error("no `Background:` line found")]
    MissingBackground,
    #[error("missing Frame_{0}")]
    MissingFrame(usize),
    #[error("line {line}: malformed entry ({reason}): {text:?}")]
    MalformedEntry { line: usize, text: String, reason: String },
    #[error("line {line}: malformed bounding box: {text:?}")]
    MalformedBBox { line: usize, text: String },
    #[error("latent frame count must be at least 2, got {0}")]
    InvalidFrameCount(usize),
    #[error("plan is not valid for interpolation: {0}")]
    InvalidPlan(String),
}

/// One scene of the story-level plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneOutline {
    pub scene_name: String,
    pub motions: Vec<String>,
    pub narration: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighLevelPlan {
    pub scenes: Vec<SceneOutline>,
}

/// Normalized box `[x0, y0, x1, y1]`: top-left and bottom-right corners.
///
/// Parsed boxes are not range-checked; [`validate_frame_plan`] reports
/// out-of-range or inverted boxes and [`BBox::is_valid`] is the invariant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const FULL: BBox = BBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x0)
            && in_unit(self.y0)
            && in_unit(self.x1)
            && in_unit(self.y1)
            && self.x0 < self.x1
            && self.y0 < self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Component-wise `self + t * (other - self)`, clamped to the segment
    /// between the two corners so rounding never leaves it.
    pub fn lerp(&self, other: &BBox, t: f64) -> BBox {
        let mix = |a: f64, b: f64| (a + t * (b - a)).clamp(a.min(b), a.max(b));
        BBox {
            x0: mix(self.x0, other.x0),
            y0: mix(self.y0, other.y0),
            x1: mix(self.x1, other.x1),
            y1: mix(self.y1, other.y1),
        }
    }
}

impl From<[f64; 4]> for BBox {
    fn from(c: [f64; 4]) -> Self {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

/// One `[[entity, motion, caption], [x0, y0, x1, y1]]` region of a key frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub entity: String,
    pub motion: String,
    pub caption: String,
    pub bbox: BBox,
}

impl RegionEntry {
    pub fn new(entity: &str, motion: &str, caption: &str, bbox: BBox) -> Self {
        Self {
            entity: entity.to_string(),
            motion: motion.to_string(),
            caption: caption.to_string(),
            bbox,
        }
    }

    pub fn has_motion(&self) -> bool {
        !self.motion.trim().eq_ignore_ascii_case(NO_MOTION)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLevelPlan {
    pub background: String,
    pub key_frames: Vec<Vec<RegionEntry>>,
}

/// A region-specific text condition. Id 0 is always the background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub id: usize,
    pub entity: String,
    pub motion: String,
    pub caption: String,
    pub latent_frame_span: Vec<usize>,
}

impl Condition {
    pub fn key(&self) -> (&str, &str, &str) {
        (&self.entity, &self.motion, &self.caption)
    }
}

/// Key-frame plan resampled onto latent frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPlan {
    pub conditions: Vec<Condition>,
    /// Per latent frame, the `(condition_id, box)` pairs of entity regions.
    /// The background condition never appears here.
    pub latent_frames: Vec<Vec<(usize, BBox)>>,
    pub frame_count: usize,
}

impl LatentPlan {
    /// Plan with only a background condition, used for whole-clip captions.
    pub fn caption_only(caption: &str, frame_count: usize) -> Self {
        LatentPlan {
            conditions: vec![Condition {
                id: 0,
                entity: "background".to_string(),
                motion: NO_MOTION.to_string(),
                caption: caption.to_string(),
                latent_frame_span: (0..frame_count).collect(),
            }],
            latent_frames: vec![Vec::new(); frame_count],
            frame_count,
        }
    }

    pub fn captions(&self) -> Vec<&str> {
        self.conditions.iter().map(|c| c.caption.as_str()).collect()
    }

    /// Ids of the conditions whose entity matches `entity` (case-insensitive).
    pub fn conditions_for_entity(&self, entity: &str) -> Vec<usize> {
        self.conditions
            .iter()
            .filter(|c| c.id != 0 && c.entity.eq_ignore_ascii_case(entity))
            .map(|c| c.id)
            .collect()
    }

    /// Ids of the conditions carrying `motion` (case-insensitive).
    pub fn conditions_for_motion(&self, motion: &str) -> Vec<usize> {
        self.conditions
            .iter()
            .filter(|c| c.id != 0 && c.motion.eq_ignore_ascii_case(motion))
            .map(|c| c.id)
            .collect()
    }
}
