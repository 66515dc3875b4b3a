//! Motion-clip retrieval: BM25 over captions, attribute filters, track-based
//! segmentation, and frame/clip similarity scoring with thresholded selection.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("motion text is empty")]
    EmptyMotion,
    #[error("{0} scorer unavailable")]
    ScorerUnavailable(&'static str),
    #[error("record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub caption: String,
    pub duration_s: f64,
    pub n_frames: usize,
    pub width: u32,
    pub height: u32,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let reason = if self.duration_s.is_nan() || self.duration_s <= 0.0 {
            "duration must be positive"
        } else if self.n_frames == 0 {
            "frame count must be at least 1"
        } else if self.width == 0 || self.height == 0 {
            "width and height must be at least 1"
        } else {
            return Ok(());
        };
        Err(RetrievalError::InvalidRecord {
            id: self.id.clone(),
            reason: reason.to_string(),
        })
    }

    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }
}

/// Frames `frame_start..=frame_end` of one tracked person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpan {
    pub record_id: String,
    pub track_id: u32,
    pub frame_start: usize,
    pub frame_end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[f64; 4]>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipCandidate {
    pub record_id: String,
    pub track_id: u32,
    pub frame_start: usize,
    pub frame_end: usize,
    pub caption: String,
}

impl ClipCandidate {
    pub fn len(&self) -> usize {
        self.frame_end + 1 - self.frame_start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn sort_key(&self) -> (&str, usize, usize, u32) {
        (&self.record_id, self.frame_start, self.frame_end, self.track_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredClip {
    pub clip: ClipCandidate,
    pub frame_score: f64,
    pub clip_score: f64,
    pub avg: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `(frame + clip) / 2 > threshold`
    #[default]
    Average,
    /// Both scores above the threshold.
    PerScorer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub pool_size: usize,
    pub min_duration_s: f64,
    pub min_frames: usize,
    pub min_aspect: f64,
    pub min_clip_len_frames: usize,
    pub frames_per_clip: usize,
    pub score_threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub max_keep: usize,
    pub fallback_keep: usize,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub query_prefix: String,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            pool_size: 400,
            min_duration_s: 2.0,
            min_frames: 40,
            min_aspect: 0.9,
            min_clip_len_frames: 16,
            frames_per_clip: 8,
            score_threshold: 0.2,
            threshold_mode: ThresholdMode::Average,
            max_keep: 20,
            fallback_keep: 4,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            query_prefix: "person is ".to_string(),
        }
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Ranks records against `query`, highest first, ties by ascending id.
///
/// `idf = ln(1 + (N - df + 0.5) / (df + 0.5))` is positive for every
/// term that occurs, so a score is zero exactly when no query term occurs.
/// Repeated query terms count once.
pub fn bm25_rank(
    corpus: &[VideoRecord],
    query: &str,
    k: usize,
    cfg: &RetrievalConfig,
) -> Result<Vec<(String, f64)>, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let docs: Vec<Vec<String>> = corpus.iter().map(|r| tokenize(&r.caption)).collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut terms: Vec<String> = Vec::new();
    for t in tokenize(query) {
        if !terms.contains(&t) {
            terms.push(t);
        }
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in &docs {
        let uniq: HashSet<&str> = doc.iter().map(String::as_str).collect();
        for t in &terms {
            if uniq.contains(t.as_str()) {
                *df.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let (k1, b) = (cfg.bm25_k1, cfg.bm25_b);
    let mut scored: Vec<(String, f64)> = corpus
        .iter()
        .zip(&docs)
        .map(|(rec, doc)| {
            let dl = doc.len() as f64;
            let norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
            let mut score = 0.0;
            for t in &terms {
                let tf = doc.iter().filter(|w| *w == t).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let d = df[t.as_str()] as f64;
                let idf = (1.0 + (n - d + 0.5) / (d + 0.5)).ln();
                score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm));
            }
            (rec.id.clone(), score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// `prefix + motion` with whitespace collapsed.
pub fn build_query(motion: &str, cfg: &RetrievalConfig) -> Result<String, RetrievalError> {
    let motion = motion.split_whitespace().collect::<Vec<_>>().join(" ");
    if motion.is_empty() {
        return Err(RetrievalError::EmptyMotion);
    }
    let full = format!("{}{}", cfg.query_prefix, motion);
    Ok(full.split_whitespace().collect::<Vec<_>>().join(" "))
}

pub fn passes_attributes(r: &VideoRecord, cfg: &RetrievalConfig) -> bool {
    r.duration_s >= cfg.min_duration_s && r.n_frames >= cfg.min_frames && r.aspect() >= cfg.min_aspect
}

pub fn filter_attributes(records: &[VideoRecord], cfg: &RetrievalConfig) -> Vec<VideoRecord> {
    records.iter().filter(|r| passes_attributes(r, cfg)).cloned().collect()
}

/// One candidate per maximal run of frames covered by a track (spans of the
/// same track that overlap or touch are merged), clipped to the record and
/// kept when at least `min_clip_len_frames` long.
pub fn segment_clips(record: &VideoRecord, tracks: &[TrackSpan], cfg: &RetrievalConfig) -> Vec<ClipCandidate> {
    let mut by_track: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for t in tracks.iter().filter(|t| t.record_id == record.id) {
        if t.frame_start > t.frame_end || t.frame_start >= record.n_frames {
            continue;
        }
        by_track
            .entry(t.track_id)
            .or_default()
            .push((t.frame_start, t.frame_end.min(record.n_frames - 1)));
    }
    let mut out = Vec::new();
    for (track_id, mut spans) in by_track {
        spans.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (s, e) in spans {
            match merged.last_mut() {
                Some(last) if s <= last.1 + 1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        for (s, e) in merged {
            if e + 1 - s >= cfg.min_clip_len_frames {
                out.push(ClipCandidate {
                    record_id: record.id.clone(),
                    track_id,
                    frame_start: s,
                    frame_end: e,
                    caption: record.caption.clone(),
                });
            }
        }
    }
    out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    out
}

/// Frame-level text similarity.
pub trait FrameScorer {
    fn score_frame(&self, clip: &ClipCandidate, frame: usize, query: &str) -> Result<f64, RetrievalError>;
}

/// Clip-level text similarity.
pub trait ClipScorer {
    fn score_clip(&self, clip: &ClipCandidate, query: &str) -> Result<f64, RetrievalError>;
}

/// Jaccard overlap between the caption's and the query's token sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordOverlapScorer;

impl WordOverlapScorer {
    pub fn similarity(a: &str, b: &str) -> f64 {
        let sa: HashSet<String> = tokenize(a).into_iter().collect();
        let sb: HashSet<String> = tokenize(b).into_iter().collect();
        let union = sa.union(&sb).count();
        if union == 0 {
            return 0.0;
        }
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

impl FrameScorer for WordOverlapScorer {
    fn score_frame(&self, clip: &ClipCandidate, _frame: usize, query: &str) -> Result<f64, RetrievalError> {
        Ok(Self::similarity(&clip.caption, query))
    }
}

impl ClipScorer for WordOverlapScorer {
    fn score_clip(&self, clip: &ClipCandidate, query: &str) -> Result<f64, RetrievalError> {
        Ok(Self::similarity(&clip.caption, query))
    }
}

#[derive(Default)]
pub struct Scorers<'a> {
    pub frame: Option<&'a dyn FrameScorer>,
    pub clip: Option<&'a dyn ClipScorer>,
}

impl<'a> Scorers<'a> {
    pub fn word_overlap(mock: &'a WordOverlapScorer) -> Self {
        Scorers {
            frame: Some(mock),
            clip: Some(mock),
        }
    }
}

/// `n` frame indices on a uniform grid over the span: `start + floor((i + 0.5) L / n)`.
pub fn sample_frames(clip: &ClipCandidate, n: usize) -> Vec<usize> {
    let len = clip.len();
    (0..n)
        .map(|i| clip.frame_start + ((2 * i + 1) * len) / (2 * n))
        .collect()
}

pub fn score_clip(
    scorers: &Scorers,
    clip: &ClipCandidate,
    query: &str,
    cfg: &RetrievalConfig,
) -> Result<ScoredClip, RetrievalError> {
    let frame = scorers.frame.ok_or(RetrievalError::ScorerUnavailable("frame"))?;
    let whole = scorers.clip.ok_or(RetrievalError::ScorerUnavailable("clip"))?;
    let frames = sample_frames(clip, cfg.frames_per_clip.max(1));
    let mut sum = 0.0;
    for &f in &frames {
        sum += frame.score_frame(clip, f, query)?;
    }
    let frame_score = sum / frames.len() as f64;
    let clip_score = whole.score_clip(clip, query)?;
    Ok(ScoredClip {
        clip: clip.clone(),
        frame_score,
        clip_score,
        avg: (frame_score + clip_score) / 2.0,
    })
}

fn passes_threshold(s: &ScoredClip, cfg: &RetrievalConfig) -> bool {
    match cfg.threshold_mode {
        ThresholdMode::Average => s.avg > cfg.score_threshold,
        ThresholdMode::PerScorer => s.frame_score > cfg.score_threshold && s.clip_score > cfg.score_threshold,
    }
}

/// Above-threshold clips by descending average, capped at `max_keep`; when
/// fewer than `fallback_keep` pass, the top `fallback_keep` regardless.
pub fn select_motion_videos(scored: &[ScoredClip], cfg: &RetrievalConfig) -> Vec<ScoredClip> {
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| {
        b.avg
            .total_cmp(&a.avg)
            .then_with(|| a.clip.sort_key().cmp(&b.clip.sort_key()))
    });
    let mut kept: Vec<ScoredClip> = ranked.iter().filter(|s| passes_threshold(s, cfg)).cloned().collect();
    if kept.len() < cfg.fallback_keep {
        kept = ranked;
        kept.truncate(cfg.fallback_keep);
    }
    kept.truncate(cfg.max_keep);
    kept
}

/// Query, BM25 pool, attribute filter, segmentation, scoring and selection.
pub fn retrieve_motion(
    corpus: &[VideoRecord],
    tracks: &[TrackSpan],
    motion: &str,
    scorers: &Scorers,
    cfg: &RetrievalConfig,
) -> Result<Vec<ScoredClip>, RetrievalError> {
    let query = build_query(motion, cfg)?;
    let pool = bm25_rank(corpus, &query, cfg.pool_size, cfg)?;
    let by_id: HashMap<&str, &VideoRecord> = corpus.iter().map(|r| (r.id.as_str(), r)).collect();
    let pooled: Vec<VideoRecord> = pool.iter().map(|(id, _)| by_id[id.as_str()].clone()).collect();
    let mut scored = Vec::new();
    for record in filter_attributes(&pooled, cfg) {
        for clip in segment_clips(&record, tracks, cfg) {
            scored.push(score_clip(scorers, &clip, &query, cfg)?);
        }
    }
    Ok(select_motion_videos(&scored, cfg))
}

fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>, RetrievalError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_corpus_jsonl<R: BufRead>(r: R) -> Result<Vec<VideoRecord>, RetrievalError> {
    let records: Vec<VideoRecord> = read_jsonl(r)?;
    for rec in &records {
        rec.validate()?;
    }
    Ok(records)
}

pub fn read_tracks_jsonl<R: BufRead>(r: R) -> Result<Vec<TrackSpan>, RetrievalError> {
    read_jsonl(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, caption: &str) -> VideoRecord {
        VideoRecord {
            id: id.into(),
            caption: caption.into(),
            duration_s: 3.0,
            n_frames: 90,
            width: 640,
            height: 480,
        }
    }

    fn clip(id: &str, caption: &str) -> ClipCandidate {
        ClipCandidate {
            record_id: id.into(),
            track_id: 0,
            frame_start: 0,
            frame_end: 31,
            caption: caption.into(),
        }
    }

    fn scored(id: &str, avg: f64) -> ScoredClip {
        ScoredClip {
            clip: clip(id, "x"),
            frame_score: avg,
            clip_score: avg,
            avg,
        }
    }

    #[test]
    fn bm25_hand_computed() {
        let corpus = vec![
            rec("a", "person is sitting on a chair"),
            rec("b", "a dog is running"),
            rec("c", "person sitting sitting"),
        ];
        let cfg = RetrievalConfig::default();
        let got = bm25_rank(&corpus, "person is sitting", 10, &cfg).unwrap();
        // dl = 6, 4, 3; avgdl = 13/3; N = 3
        let idf = |df: f64| (1.0 + (3.0 - df + 0.5) / (df + 0.5)).ln();
        let term = |tf: f64, dl: f64| tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * dl / (13.0 / 3.0)));
        let a = idf(2.0) * term(1.0, 6.0) + idf(2.0) * term(1.0, 6.0) + idf(2.0) * term(1.0, 6.0);
        let b = idf(2.0) * term(1.0, 4.0);
        let c = idf(2.0) * term(1.0, 3.0) + idf(2.0) * term(2.0, 3.0);
        let expect: HashMap<&str, f64> = [("a", a), ("b", b), ("c", c)].into_iter().collect();
        for (id, s) in &got {
            assert!((s - expect[id.as_str()]).abs() < 1e-9, "{id}");
        }
        let ids: Vec<&str> = got.iter().map(|(i, _)| i.as_str()).collect();
        let mut order = [("a", a), ("b", b), ("c", c)];
        order.sort_by(|x, y| y.1.total_cmp(&x.1));
        assert_eq!(ids, order.iter().map(|x| x.0).collect::<Vec<_>>());
    }

    #[test]
    fn bm25_absent_terms_and_errors() {
        let corpus = vec![rec("b", "cat"), rec("a", "dog")];
        let got = bm25_rank(&corpus, "person is flying", 400, &RetrievalConfig::default()).unwrap();
        assert_eq!(got, vec![("a".to_string(), 0.0), ("b".to_string(), 0.0)]);
        assert!(matches!(
            bm25_rank(&[], "x", 1, &RetrievalConfig::default()),
            Err(RetrievalError::EmptyCorpus)
        ));
        assert_eq!(RetrievalConfig::default().pool_size, 400);
    }

    #[test]
    fn query_building() {
        let cfg = RetrievalConfig::default();
        assert_eq!(build_query("sitting", &cfg).unwrap(), "person is sitting");
        assert_eq!(build_query("  running  ", &cfg).unwrap(), "person is running");
        assert_eq!(
            build_query("jumping  over  rope", &cfg).unwrap(),
            "person is jumping over rope"
        );
        assert!(matches!(build_query("  ", &cfg), Err(RetrievalError::EmptyMotion)));
    }

    #[test]
    fn attribute_thresholds() {
        let cfg = RetrievalConfig::default();
        let base = rec("a", "x");
        assert!(passes_attributes(&base, &cfg));
        assert!(!passes_attributes(
            &VideoRecord {
                duration_s: 1.5,
                ..base.clone()
            },
            &cfg
        ));
        assert!(passes_attributes(
            &VideoRecord {
                duration_s: 2.0,
                ..base.clone()
            },
            &cfg
        ));
        assert!(!passes_attributes(
            &VideoRecord {
                n_frames: 39,
                ..base.clone()
            },
            &cfg
        ));
        assert!(passes_attributes(
            &VideoRecord {
                n_frames: 40,
                ..base.clone()
            },
            &cfg
        ));
        assert!(!passes_attributes(
            &VideoRecord {
                width: 80,
                height: 100,
                ..base.clone()
            },
            &cfg
        ));
        assert!(passes_attributes(
            &VideoRecord {
                width: 90,
                height: 100,
                ..base
            },
            &cfg
        ));
    }

    fn track(id: &str, t: u32, s: usize, e: usize) -> TrackSpan {
        TrackSpan {
            record_id: id.into(),
            track_id: t,
            frame_start: s,
            frame_end: e,
            boxes: None,
        }
    }

    #[test]
    fn segmentation() {
        let cfg = RetrievalConfig::default();
        let r = VideoRecord {
            n_frames: 200,
            ..rec("v", "person")
        };
        assert!(segment_clips(&r, &[], &cfg).is_empty());
        let one = segment_clips(&r, &[track("v", 1, 10, 100)], &cfg);
        assert_eq!((one[0].frame_start, one[0].frame_end), (10, 100));
        assert!(segment_clips(&r, &[track("v", 1, 10, 17)], &cfg).is_empty());
        let merged = segment_clips(
            &r,
            &[
                track("v", 1, 10, 20),
                track("v", 1, 21, 30),
                track("v", 2, 15, 40),
                track("w", 3, 0, 100),
            ],
            &cfg,
        );
        assert_eq!(merged.len(), 2);
        assert_eq!(
            (merged[0].track_id, merged[0].frame_start, merged[0].frame_end),
            (1, 10, 30)
        );
        assert_eq!((merged[1].track_id, merged[1].frame_start), (2, 15));
    }

    #[test]
    fn scoring() {
        let cfg = RetrievalConfig::default();
        let mock = WordOverlapScorer;
        let scorers = Scorers::word_overlap(&mock);
        let s = score_clip(&scorers, &clip("a", "person is sitting"), "person is sitting", &cfg).unwrap();
        assert_eq!((s.frame_score, s.clip_score, s.avg), (1.0, 1.0, 1.0));
        // {person} shared among union {person, walks, runs}
        let s = score_clip(&scorers, &clip("a", "person walks"), "person runs", &cfg).unwrap();
        assert!((s.avg - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            score_clip(&Scorers::default(), &clip("a", "x"), "x", &cfg),
            Err(RetrievalError::ScorerUnavailable(_))
        ));
    }

    #[test]
    fn frame_sampling_grid() {
        let mut c = clip("a", "x");
        c.frame_start = 10;
        c.frame_end = 25;
        assert_eq!(sample_frames(&c, 8), vec![11, 13, 15, 17, 19, 21, 23, 25]);
        c.frame_end = 12;
        assert_eq!(sample_frames(&c, 8), vec![10, 10, 10, 11, 11, 12, 12, 12]);
    }

    #[test]
    fn selection_rules() {
        let cfg = RetrievalConfig::default();
        let many: Vec<ScoredClip> = (0..25)
            .map(|i| scored(&format!("{i:02}"), 0.3 + i as f64 * 0.01))
            .collect();
        let top = select_motion_videos(&many, &cfg);
        assert_eq!(top.len(), 20);
        assert_eq!(top[0].clip.record_id, "24");
        assert_eq!(top[19].clip.record_id, "05");
        let mut few: Vec<ScoredClip> = (0..10).map(|i| scored(&format!("{i}"), 0.01 * i as f64)).collect();
        few[3].avg = 0.5;
        few[7].avg = 0.25;
        let sel = select_motion_videos(&few, &cfg);
        let ids: Vec<&str> = sel.iter().map(|s| s.clip.record_id.as_str()).collect();
        assert_eq!(ids, vec!["3", "7", "9", "8"]);
        assert!(select_motion_videos(&[], &cfg).is_empty());
        assert_eq!(select_motion_videos(&few[..2], &cfg).len(), 2);
        let ties = vec![scored("b", 0.5), scored("a", 0.5), scored("c", 0.5), scored("d", 0.5)];
        let ids: Vec<String> = select_motion_videos(&ties, &cfg)
            .into_iter()
            .map(|s| s.clip.record_id)
            .collect();
        assert_eq!(ids, vec!["a", "b", "c", "d"]);
        // exactly at the threshold does not pass
        let edge = vec![scored("a", 0.2); 5];
        assert_eq!(select_motion_videos(&edge, &cfg).len(), 4);
    }

    #[test]
    fn per_scorer_threshold() {
        let cfg = RetrievalConfig {
            threshold_mode: ThresholdMode::PerScorer,
            fallback_keep: 0,
            ..Default::default()
        };
        let s = ScoredClip {
            clip: clip("a", "x"),
            frame_score: 0.5,
            clip_score: 0.1,
            avg: 0.3,
        };
        assert!(select_motion_videos(std::slice::from_ref(&s), &cfg).is_empty());
        let avg = RetrievalConfig {
            fallback_keep: 0,
            ..Default::default()
        };
        assert_eq!(select_motion_videos(&[s], &avg).len(), 1);
    }

    #[test]
    fn pipeline_end_to_end() {
        let mut corpus = vec![
            rec("v1", "a person is sitting on a bench"),
            rec("v2", "person sitting"),
            rec("v3", "a cat sleeps"),
            VideoRecord {
                duration_s: 1.0,
                ..rec("v4", "person is sitting")
            },
        ];
        corpus.push(rec("v5", "person is sitting"));
        let tracks: Vec<TrackSpan> = ["v1", "v2", "v3", "v4", "v5"]
            .iter()
            .map(|id| track(id, 0, 0, 59))
            .collect();
        let mock = WordOverlapScorer;
        let out = retrieve_motion(
            &corpus,
            &tracks,
            "sitting",
            &Scorers::word_overlap(&mock),
            &RetrievalConfig::default(),
        )
        .unwrap();
        let ids: Vec<&str> = out.iter().map(|s| s.clip.record_id.as_str()).collect();
        assert_eq!(ids, vec!["v5", "v2", "v1", "v3"]);
        assert_eq!(out[0].avg, 1.0);
    }

    #[test]
    fn corpus_jsonl() {
        let text = "{\"id\":\"a\",\"caption\":\"x\",\"duration_s\":3.0,\"n_frames\":50,\"width\":10,\"height\":10}\n\n";
        let recs = read_corpus_jsonl(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        let bad = "{\"id\":\"a\",\"caption\":\"x\",\"duration_s\":0.0,\"n_frames\":50,\"width\":10,\"height\":10}\n";
        assert!(matches!(
            read_corpus_jsonl(bad.as_bytes()),
            Err(RetrievalError::InvalidRecord { .. })
        ));
        assert!(matches!(
            read_corpus_jsonl("nope\n".as_bytes()),
            Err(RetrievalError::Parse { line: 1, .. })
        ));
        let tracks =
            read_tracks_jsonl("{\"record_id\":\"a\",\"track_id\":1,\"frame_start\":0,\"frame_end\":20}\n".as_bytes())
                .unwrap();
        assert_eq!(tracks[0].frame_end, 20);
    }

    proptest! {
        #[test]
        fn selection_bounds(avgs in proptest::collection::vec(0.0..1.0f64, 0..40)) {
            let cfg = RetrievalConfig::default();
            let input: Vec<ScoredClip> = avgs.iter().enumerate().map(|(i, &a)| scored(&format!("{i:03}"), a)).collect();
            let out = select_motion_videos(&input, &cfg);
            prop_assert!(out.len() <= 20);
            prop_assert!(out.len() >= input.len().min(4));
            prop_assert!(out.windows(2).all(|w| w[0].avg >= w[1].avg));
            let ids: HashSet<&str> = input.iter().map(|s| s.clip.record_id.as_str()).collect();
            prop_assert!(out.iter().all(|s| ids.contains(s.clip.record_id.as_str())));
        }

        #[test]
        fn bm25_zero_iff_no_term(words in proptest::collection::vec(proptest::sample::select(vec!["person", "is", "sitting", "dog", "cat", "runs"]), 1..6)) {
            let corpus = vec![rec("q", &words.join(" ")), rec("r", "person sitting"), rec("s", "blue sky")];
            let ranked = bm25_rank(&corpus, "person is sitting", 10, &RetrievalConfig::default()).unwrap();
            let score = ranked.iter().find(|(id, _)| id == "q").unwrap().1;
            let hit = words.iter().any(|w| ["person", "is", "sitting"].contains(w));
            prop_assert_eq!(score > 0.0, hit);
            prop_assert!(score >= 0.0);
        }
    }
}
