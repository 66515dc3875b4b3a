use std::fmt::Write;

use super::{FrameLevelPlan, HighLevelPlan, RegionEntry};

/// Shortest decimal form of `v` rounded to 4 fractional digits, always with
/// at least one fractional digit (`0.0`, `0.25`, `1.0`).
pub fn format_coord(v: f64) -> String {
    let rounded = (v * 1e4).round() / 1e4;
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    let mut s = rounded.to_string();
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

fn quoted(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

fn entry(e: &RegionEntry) -> String {
    let [x0, y0, x1, y1] = e.bbox.corners();
    format!(
        "[[{}, {}, {}], [{}, {}, {}, {}]]",
        quoted(&e.entity),
        quoted(&e.motion),
        quoted(&e.caption),
        format_coord(x0),
        format_coord(y0),
        format_coord(x1),
        format_coord(y1)
    )
}

pub fn emit_frame_plan(plan: &FrameLevelPlan) -> String {
    let mut out = String::new();
    writeln!(out, "Background: {}", plan.background).unwrap();
    for (k, frame) in plan.key_frames.iter().enumerate() {
        let entries: Vec<String> = frame.iter().map(entry).collect();
        writeln!(out, "Frame_{}: {}", k + 1, entries.join(", ")).unwrap();
    }
    out
}

pub fn emit_high_level_plan(plan: &HighLevelPlan) -> String {
    let mut out = String::new();
    for (i, scene) in plan.scenes.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        writeln!(out, "Scene {}: {}", i + 1, scene.scene_name).unwrap();
        writeln!(out, "Motions:\n{}", scene.motions.join(", ")).unwrap();
        writeln!(out, "Narration:\n{}", scene.narration).unwrap();
    }
    out
}
