use std::sync::OnceLock;

use regex::Regex;

use super::{BBox, FrameLevelPlan, HighLevelPlan, PlanError, RegionEntry, SceneOutline, KEY_FRAMES};

fn scene_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^Scene\s*(\d+)\s*:\s*(.*?)\s*$").unwrap())
}

fn frame_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^Frame_(\d+)\s*:\s*(.*?)\s*$").unwrap())
}

/// Splits `"Label: rest"` when the label matches one of `labels` (case-insensitive).
fn labelled<'a>(line: &'a str, labels: &[&str]) -> Option<&'a str> {
    let (head, rest) = line.split_once(':')?;
    labels
        .iter()
        .any(|l| head.trim().eq_ignore_ascii_case(l))
        .then(|| rest.trim())
}

#[derive(Clone, Copy, PartialEq)]
enum Expect {
    Label,
    MotionLine,
    NarrationLine,
    InNarration,
}

struct SceneDraft {
    line: usize,
    name: String,
    motions: Option<Vec<String>>,
    narration: Vec<String>,
}

impl SceneDraft {
    fn finish(self) -> Result<SceneOutline, PlanError> {
        let motions = match self.motions {
            Some(m) if !m.is_empty() => m,
            _ => {
                return Err(PlanError::MissingMotions {
                    line: self.line,
                    scene: self.name,
                })
            }
        };
        let narration = self.narration.join(" ");
        if narration.trim().is_empty() {
            return Err(PlanError::MissingNarration {
                line: self.line,
                scene: self.name,
            });
        }
        Ok(SceneOutline {
            scene_name: self.name,
            motions,
            narration,
        })
    }
}

fn split_motions(text: &str) -> Vec<String> {
    text.split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(str::to_string)
        .collect()
}

/// Parses the story-level output grammar (`Scene k: name` / `Motions:` /
/// `Narration:` blocks). Text before the first scene header is ignored.
pub fn parse_high_level_plan(text: &str) -> Result<HighLevelPlan, PlanError> {
    let mut scenes = Vec::new();
    let mut current: Option<SceneDraft> = None;
    let mut expect = Expect::Label;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();

        if let Some(caps) = scene_header().captures(line) {
            if let Some(draft) = current.take() {
                scenes.push(draft.finish()?);
            }
            let name = caps[2].trim().to_string();
            if name.is_empty() {
                return Err(PlanError::MalformedHeader {
                    line: line_no,
                    text: raw.to_string(),
                });
            }
            current = Some(SceneDraft {
                line: line_no,
                name,
                motions: None,
                narration: Vec::new(),
            });
            expect = Expect::Label;
            continue;
        }
        let Some(draft) = current.as_mut() else {
            if line.len() >= 5 && line[..5].eq_ignore_ascii_case("scene") {
                return Err(PlanError::MalformedHeader {
                    line: line_no,
                    text: raw.to_string(),
                });
            }
            continue;
        };

        if line.is_empty() {
            if expect == Expect::InNarration {
                expect = Expect::Label;
            }
            continue;
        }
        if expect != Expect::InNarration {
            if let Some(rest) = labelled(line, &["motions", "motion"]) {
                if rest.is_empty() {
                    expect = Expect::MotionLine;
                } else {
                    draft.motions = Some(split_motions(rest));
                    expect = Expect::Label;
                }
                continue;
            }
            if let Some(rest) = labelled(line, &["narration"]) {
                if rest.is_empty() {
                    expect = Expect::NarrationLine;
                } else {
                    draft.narration.push(rest.to_string());
                    expect = Expect::InNarration;
                }
                continue;
            }
        }
        match expect {
            Expect::MotionLine => {
                draft.motions = Some(split_motions(line));
                expect = Expect::Label;
            }
            Expect::NarrationLine | Expect::InNarration => {
                draft.narration.push(line.to_string());
                expect = Expect::InNarration;
            }
            Expect::Label => {
                if line.len() >= 5 && line[..5].eq_ignore_ascii_case("scene") {
                    return Err(PlanError::MalformedHeader {
                        line: line_no,
                        text: raw.to_string(),
                    });
                }
            }
        }
    }
    if let Some(draft) = current.take() {
        scenes.push(draft.finish()?);
    }
    if scenes.is_empty() {
        return Err(PlanError::MissingScene);
    }
    Ok(HighLevelPlan { scenes })
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    List(Vec<Value>),
    Str(String),
    Num(f64),
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

fn is_open_quote(c: char) -> bool {
    matches!(c, '"' | '\u{201C}' | '\u{201D}')
}

impl<'a> Lexer<'a> {
    fn new(s: &'a str) -> Self {
        Self {
            chars: s.chars().peekable(),
        }
    }

    fn skip_ws(&mut self) {
        while self.chars.peek().is_some_and(|c| c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn value(&mut self) -> Result<Value, String> {
        self.skip_ws();
        match self.chars.peek().copied() {
            Some('[') => {
                self.chars.next();
                let mut items = Vec::new();
                self.skip_ws();
                if self.chars.peek() == Some(&']') {
                    self.chars.next();
                    return Ok(Value::List(items));
                }
                loop {
                    items.push(self.value()?);
                    self.skip_ws();
                    match self.chars.next() {
                        Some(',') => continue,
                        Some(']') => return Ok(Value::List(items)),
                        Some(c) => return Err(format!("unexpected {c:?} in list")),
                        None => return Err("unterminated list".into()),
                    }
                }
            }
            Some(c) if is_open_quote(c) => {
                self.chars.next();
                let mut s = String::new();
                loop {
                    match self.chars.next() {
                        Some('\\') => match self.chars.next() {
                            Some(e) => s.push(e),
                            None => return Err("dangling escape".into()),
                        },
                        Some('"') | Some('\u{201D}') => return Ok(Value::Str(s)),
                        Some(c) => s.push(c),
                        None => return Err("unterminated string".into()),
                    }
                }
            }
            Some(c) if c == '-' || c == '+' || c == '.' || c.is_ascii_digit() => {
                let mut s = String::new();
                while let Some(&c) = self.chars.peek() {
                    if c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E') {
                        s.push(c);
                        self.chars.next();
                    } else {
                        break;
                    }
                }
                s.parse::<f64>()
                    .map(Value::Num)
                    .map_err(|_| format!("bad number {s:?}"))
            }
            Some(c) => Err(format!("unexpected {c:?}")),
            None => Err("unexpected end of line".into()),
        }
    }

    fn sequence(&mut self) -> Result<Vec<Value>, String> {
        let mut out = Vec::new();
        self.skip_ws();
        if self.chars.peek().is_none() {
            return Ok(out);
        }
        loop {
            out.push(self.value()?);
            self.skip_ws();
            match self.chars.next() {
                Some(',') => continue,
                None => return Ok(out),
                Some(c) => return Err(format!("unexpected {c:?} between entries")),
            }
        }
    }
}

fn entry_from_value(value: Value, line: usize, raw: &str) -> Result<RegionEntry, PlanError> {
    let malformed = |reason: &str| PlanError::MalformedEntry {
        line,
        text: raw.to_string(),
        reason: reason.to_string(),
    };
    let Value::List(parts) = value else {
        return Err(malformed("entry is not a list"));
    };
    let [desc, bbox]: [Value; 2] = parts
        .try_into()
        .map_err(|_| malformed("entry must be [[entity, motion, caption], [x0, y0, x1, y1]]"))?;
    let Value::List(desc) = desc else {
        return Err(malformed("description is not a list"));
    };
    let strings: Vec<String> = desc
        .into_iter()
        .map(|v| match v {
            Value::Str(s) => Ok(s.trim().to_string()),
            _ => Err(malformed("description fields must be quoted strings")),
        })
        .collect::<Result<_, _>>()?;
    let [entity, motion, caption]: [String; 3] = strings
        .try_into()
        .map_err(|_| malformed("description must have exactly 3 fields"))?;
    if entity.is_empty() || caption.is_empty() {
        return Err(malformed("entity and caption must be non-empty"));
    }
    let bad_bbox = || PlanError::MalformedBBox {
        line,
        text: raw.to_string(),
    };
    let Value::List(coords) = bbox else {
        return Err(bad_bbox());
    };
    let coords: Vec<f64> = coords
        .into_iter()
        .map(|v| match v {
            Value::Num(n) if n.is_finite() => Ok(n),
            _ => Err(bad_bbox()),
        })
        .collect::<Result<_, _>>()?;
    let coords: [f64; 4] = coords.try_into().map_err(|_| bad_bbox())?;
    Ok(RegionEntry {
        entity,
        motion: if motion.is_empty() {
            super::NO_MOTION.to_string()
        } else {
            motion
        },
        caption,
        bbox: BBox::from(coords),
    })
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    let mut chars = s.chars();
    match (chars.next(), chars.next_back()) {
        (Some(a), Some(b)) if is_open_quote(a) && is_open_quote(b) && s.chars().count() >= 2 => {
            let start = a.len_utf8();
            &s[start..s.len() - b.len_utf8()]
        }
        _ => s,
    }
}

/// Parses a frame-level layout plan: one `Background:` line and lines
/// `Frame_1:` through `Frame_6:`. When a `*Plan*` marker is present only the
/// text after its last occurrence is read, so reasoning preambles are skipped.
pub fn parse_frame_plan(text: &str) -> Result<FrameLevelPlan, PlanError> {
    let lines: Vec<&str> = text.lines().collect();
    let start = lines.iter().rposition(|l| l.trim() == "*Plan*").map_or(0, |i| i + 1);

    let mut background: Option<String> = None;
    let mut frames: Vec<Option<Vec<RegionEntry>>> = vec![None; KEY_FRAMES];

    for (idx, raw) in lines.iter().enumerate().skip(start) {
        let line_no = idx + 1;
        let line = raw.trim();
        if background.is_none() {
            if let Some(rest) = labelled(line, &["background"]) {
                let bg = strip_quotes(rest).trim();
                if !bg.is_empty() {
                    background = Some(bg.to_string());
                }
                continue;
            }
        }
        let Some(caps) = frame_header().captures(line) else {
            continue;
        };
        let k: usize = caps[1].parse().map_err(|_| PlanError::MalformedEntry {
            line: line_no,
            text: raw.to_string(),
            reason: "bad frame number".into(),
        })?;
        if k == 0 || k > KEY_FRAMES {
            return Err(PlanError::MalformedEntry {
                line: line_no,
                text: raw.to_string(),
                reason: format!("frame number must be 1..={KEY_FRAMES}"),
            });
        }
        if frames[k - 1].is_some() {
            return Err(PlanError::MalformedEntry {
                line: line_no,
                text: raw.to_string(),
                reason: format!("duplicate Frame_{k}"),
            });
        }
        let values = Lexer::new(&caps[2])
            .sequence()
            .map_err(|reason| PlanError::MalformedEntry {
                line: line_no,
                text: raw.to_string(),
                reason,
            })?;
        let entries = values
            .into_iter()
            .map(|v| entry_from_value(v, line_no, raw))
            .collect::<Result<Vec<_>, _>>()?;
        frames[k - 1] = Some(entries);
    }

    let background = background.ok_or(PlanError::MissingBackground)?;
    let key_frames = frames
        .into_iter()
        .enumerate()
        .map(|(i, f)| f.ok_or(PlanError::MissingFrame(i + 1)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FrameLevelPlan { background, key_frames })
}
