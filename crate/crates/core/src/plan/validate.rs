use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{FrameLevelPlan, HighLevelPlan, RegionEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Box outside the unit square or with inverted corners.
    BboxBounds,
    /// Box narrower or shorter than the minimum size.
    MinSize,
    /// Motion not drawn from the declared scene motions.
    MotionVocabulary,
    /// A motion lasting fewer than the minimum number of key frames.
    MotionDuration,
    /// Box corner moving too far between adjacent key frames.
    LayoutJump,
    SceneCount,
    MotionCount,
    EmptyNarration,
    /// Declared motion not found (in any conjugated form) in the narration.
    MotionNotInNarration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub rule: Rule,
    /// 0-based key frame (or scene, for story-level findings).
    pub frame_index: Option<usize>,
    pub entity: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Finding>,
    pub warnings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_accepted(&self) -> bool {
        self.errors.is_empty()
    }

    fn error(&mut self, rule: Rule, frame: Option<usize>, entity: &str, message: String) {
        self.errors.push(Finding {
            rule,
            frame_index: frame,
            entity: entity.to_string(),
            message,
        });
    }

    fn warn(&mut self, rule: Rule, frame: Option<usize>, entity: &str, message: String) {
        self.warnings.push(Finding {
            rule,
            frame_index: frame,
            entity: entity.to_string(),
            message,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleConfig {
    pub min_size: f64,
    pub min_motion_frames: usize,
    pub max_corner_jump: f64,
    /// Declared scene motions; `None` disables the vocabulary check.
    pub allowed_motions: Option<Vec<String>>,
    /// Slack for comparisons against decimal thresholds (`1.0 - 0.8 < 0.2`).
    pub tolerance: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            min_size: 0.2,
            min_motion_frames: 2,
            max_corner_jump: 0.35,
            allowed_motions: None,
            tolerance: 1e-9,
        }
    }
}

/// Per-frame identity of an entity: its lowercase name plus its occurrence
/// index among same-named entries of that frame.
pub(crate) fn entity_keys(frame: &[RegionEntry]) -> Vec<(String, usize)> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    frame
        .iter()
        .map(|e| {
            let name = e.entity.trim().to_lowercase();
            let n = seen.entry(name.clone()).or_insert(0);
            let key = (name, *n);
            *n += 1;
            key
        })
        .collect()
}

pub fn validate_frame_plan(plan: &FrameLevelPlan, rules: &RuleConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    let tol = rules.tolerance;

    for (k, frame) in plan.key_frames.iter().enumerate() {
        for e in frame {
            let b = &e.bbox;
            if !b.is_valid() {
                report.error(
                    Rule::BboxBounds,
                    Some(k),
                    &e.entity,
                    format!("box {:?} is outside [0,1] or inverted", b.corners()),
                );
            } else if b.width() + tol < rules.min_size || b.height() + tol < rules.min_size {
                report.error(
                    Rule::MinSize,
                    Some(k),
                    &e.entity,
                    format!(
                        "box {:.4}x{:.4} is smaller than the {} minimum",
                        b.width(),
                        b.height(),
                        rules.min_size
                    ),
                );
            }
            if let Some(allowed) = &rules.allowed_motions {
                let m = e.motion.trim();
                let ok = !e.has_motion() || allowed.iter().any(|a| a.trim().eq_ignore_ascii_case(m));
                if !ok {
                    report.error(
                        Rule::MotionVocabulary,
                        Some(k),
                        &e.entity,
                        format!("motion {m:?} is not one of the declared motions {allowed:?}"),
                    );
                }
            }
        }
    }

    // Motion runs per entity: each maximal run of one motion must be long enough.
    let mut tracks: Vec<((String, usize), String)> = Vec::new();
    let mut timelines: HashMap<(String, usize), Vec<Option<String>>> = HashMap::new();
    let n = plan.key_frames.len();
    for (k, frame) in plan.key_frames.iter().enumerate() {
        for (key, e) in entity_keys(frame).into_iter().zip(frame) {
            let line = timelines.entry(key.clone()).or_insert_with(|| {
                tracks.push((key.clone(), e.entity.clone()));
                vec![None; n]
            });
            line[k] = e.has_motion().then(|| e.motion.trim().to_lowercase());
        }
    }
    for (key, display) in &tracks {
        let line = &timelines[key];
        let mut k = 0;
        while k < n {
            let Some(motion) = &line[k] else {
                k += 1;
                continue;
            };
            let start = k;
            while k < n && line[k].as_ref() == Some(motion) {
                k += 1;
            }
            if k - start < rules.min_motion_frames {
                report.error(
                    Rule::MotionDuration,
                    Some(start),
                    display,
                    format!(
                        "motion {motion:?} lasts {} key frame(s), at least {} required",
                        k - start,
                        rules.min_motion_frames
                    ),
                );
            }
        }
    }

    for k in 1..n {
        let prev: HashMap<_, _> = entity_keys(&plan.key_frames[k - 1])
            .into_iter()
            .zip(&plan.key_frames[k - 1])
            .collect();
        for (key, e) in entity_keys(&plan.key_frames[k]).into_iter().zip(&plan.key_frames[k]) {
            let Some(p) = prev.get(&key) else { continue };
            let jump = p
                .bbox
                .corners()
                .iter()
                .zip(e.bbox.corners())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if jump > rules.max_corner_jump + tol {
                report.warn(
                    Rule::LayoutJump,
                    Some(k),
                    &e.entity,
                    format!(
                        "box corner moves {jump:.4} from Frame_{} (limit {})",
                        k, rules.max_corner_jump
                    ),
                );
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighLevelRules {
    pub min_scenes: usize,
    pub max_scenes: usize,
    /// 2 for single-character stories, 4 for multi-character ones.
    pub max_motions: usize,
}

impl Default for HighLevelRules {
    fn default() -> Self {
        Self {
            min_scenes: 5,
            max_scenes: 8,
            max_motions: 2,
        }
    }
}

impl HighLevelRules {
    pub fn multi_character() -> Self {
        Self {
            max_motions: 4,
            ..Self::default()
        }
    }
}

fn motion_stem(word: &str) -> String {
    let w = word.to_lowercase();
    let Some(mut stem) = w.strip_suffix("ing").map(str::to_string) else {
        return w;
    };
    let b = stem.as_bytes();
    if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] && !b"aeiou".contains(&b[b.len() - 1]) {
        stem.pop();
    }
    stem
}

/// True when `motion` (or its first word's stem, e.g. `swim` for
/// `swimming`) appears in `narration`, case-insensitively.
pub(crate) fn motion_in_narration(motion: &str, narration: &str) -> bool {
    let narration = narration.to_lowercase();
    let motion = motion.trim().to_lowercase();
    if narration.contains(&motion) {
        return true;
    }
    let Some(first) = motion.split_whitespace().next() else {
        return false;
    };
    let stem = motion_stem(first);
    stem.len() >= 3 && narration.contains(&stem)
}

pub fn validate_high_level_plan(plan: &HighLevelPlan, rules: &HighLevelRules) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = plan.scenes.len();
    if n < rules.min_scenes || n > rules.max_scenes {
        report.error(
            Rule::SceneCount,
            None,
            "",
            format!("{n} scenes, expected {}..={}", rules.min_scenes, rules.max_scenes),
        );
    }
    for (i, scene) in plan.scenes.iter().enumerate() {
        if scene.motions.is_empty() || scene.motions.len() > rules.max_motions {
            report.error(
                Rule::MotionCount,
                Some(i),
                &scene.scene_name,
                format!("{} motions, expected 1..={}", scene.motions.len(), rules.max_motions),
            );
        }
        if scene.narration.trim().is_empty() {
            report.error(
                Rule::EmptyNarration,
                Some(i),
                &scene.scene_name,
                "empty narration".into(),
            );
        }
        for m in &scene.motions {
            if !motion_in_narration(m, &scene.narration) {
                report.warn(
                    Rule::MotionNotInNarration,
                    Some(i),
                    &scene.scene_name,
                    format!("motion {m:?} does not appear in the narration"),
                );
            }
        }
    }
    report
}
