//! Region-routed attention masks over `[text_0 .. text_{N-1}, visual]`.
//!
//! Rows are stored as 64-bit word bitsets: `S * ceil(S / 64)` words in total.
//! Rules, for condition segments `T_i` and visual tokens with membership `M(v)`:
//!
//! * `sr3a`: visual queries see every visual key and the text of each
//!   condition in `M(q)`; text of condition `i` sees its own segment and the
//!   visual tokens with `i` in their membership.
//! * `hard_regional`: as `sr3a`, but visual queries only see visual keys that
//!   share at least one condition.
//! * `dense`: every pair allowed.
//!
//! The diagonal is always allowed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::RegionMap;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("index ({q}, {k}) out of range for mask of size {size}")]
    IndexOutOfRange { q: usize, k: usize, size: usize },
    #[error("malformed mask file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    Sr3a,
    HardRegional,
    Dense,
}

impl MaskMode {
    pub fn code(self) -> u8 {
        match self {
            MaskMode::Sr3a => 0,
            MaskMode::HardRegional => 1,
            MaskMode::Dense => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MaskMode::Sr3a),
            1 => Some(MaskMode::HardRegional),
            2 => Some(MaskMode::Dense),
            _ => None,
        }
    }
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sr3a" => Ok(MaskMode::Sr3a),
            "hard" | "hard_regional" | "hard-regional" => Ok(MaskMode::HardRegional),
            "dense" => Ok(MaskMode::Dense),
            _ => Err(format!("unknown mask mode {s:?} (sr3a|hard|dense)")),
        }
    }
}

/// Extents of the concatenated condition segments followed by `visual` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    seg_lengths: Vec<usize>,
    visual: usize,
    offsets: Vec<usize>,
}

impl SegmentLayout {
    pub fn new(seg_lengths: Vec<usize>, visual: usize) -> Result<Self, MaskError> {
        if let Some(i) = seg_lengths.iter().position(|&s| s == 0) {
            return Err(MaskError::LayoutMismatch(format!("segment {i} is empty")));
        }
        let mut offsets = Vec::with_capacity(seg_lengths.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &s in &seg_lengths {
            acc += s;
            offsets.push(acc);
        }
        Ok(Self {
            seg_lengths,
            visual,
            offsets,
        })
    }

    pub fn seg_lengths(&self) -> &[usize] {
        &self.seg_lengths
    }

    pub fn n_conditions(&self) -> usize {
        self.seg_lengths.len()
    }

    pub fn visual(&self) -> usize {
        self.visual
    }

    pub fn text_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn total(&self) -> usize {
        self.text_len() + self.visual
    }

    /// Token range of condition `i`'s segment.
    pub fn segment(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Condition owning text position `idx`, or `None` for visual positions.
    pub fn segment_of(&self, idx: usize) -> Option<usize> {
        if idx >= self.text_len() {
            return None;
        }
        Some(self.offsets.partition_point(|&o| o <= idx) - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    layout: SegmentLayout,
    mode: MaskMode,
    words: usize,
    bits: Vec<u64>,
}

const MAGIC: &[u8; 4] = b"SR3A";

fn set(row: &mut [u64], i: usize) {
    row[i / 64] |= 1 << (i % 64);
}

fn set_range(row: &mut [u64], r: std::ops::Range<usize>) {
    for i in r {
        set(row, i);
    }
}

fn or_into(dst: &mut [u64], src: &[u64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d |= s;
    }
}

pub fn build_attention_mask(
    layout: &SegmentLayout,
    region_map: &RegionMap,
    mode: MaskMode,
) -> Result<AttentionMask, MaskError> {
    let n = layout.n_conditions();
    if region_map.n_conditions != n {
        return Err(MaskError::LayoutMismatch(format!(
            "{} segments but region map has {} conditions",
            n, region_map.n_conditions
        )));
    }
    if region_map.token_count() != layout.visual() {
        return Err(MaskError::LayoutMismatch(format!(
            "{} visual positions but region map has {} tokens",
            layout.visual(),
            region_map.token_count()
        )));
    }
    let size = layout.total();
    let words = size.div_ceil(64);
    let vis0 = layout.text_len();

    let mut seg_bits = vec![vec![0u64; words]; n];
    let mut vis_bits = vec![vec![0u64; words]; n];
    let mut all_visual = vec![0u64; words];
    for (i, row) in seg_bits.iter_mut().enumerate() {
        set_range(row, layout.segment(i));
    }
    set_range(&mut all_visual, vis0..size);
    for (v, members) in region_map.membership.iter().enumerate() {
        for &c in members {
            set(&mut vis_bits[c], vis0 + v);
        }
    }

    let mut bits = vec![0u64; size * words];
    for (q, row) in bits.chunks_mut(words.max(1)).enumerate().take(size) {
        match (mode, layout.segment_of(q)) {
            (MaskMode::Dense, _) => set_range(row, 0..size),
            (_, Some(i)) => {
                or_into(row, &seg_bits[i]);
                or_into(row, &vis_bits[i]);
            }
            (MaskMode::Sr3a, None) => {
                or_into(row, &all_visual);
                for &c in &region_map.membership[q - vis0] {
                    or_into(row, &seg_bits[c]);
                }
            }
            (MaskMode::HardRegional, None) => {
                for &c in &region_map.membership[q - vis0] {
                    or_into(row, &seg_bits[c]);
                    or_into(row, &vis_bits[c]);
                }
            }
        }
        set(row, q);
    }
    Ok(AttentionMask {
        layout: layout.clone(),
        mode,
        words,
        bits,
    })
}

impl AttentionMask {
    pub fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn size(&self) -> usize {
        self.layout.total()
    }

    pub fn words_per_row(&self) -> usize {
        self.words
    }

    pub fn storage_words(&self) -> usize {
        self.bits.len()
    }

    pub fn row_words(&self, q: usize) -> &[u64] {
        &self.bits[q * self.words..(q + 1) * self.words]
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.words + k / 64] >> (k % 64) & 1 == 1
    }

    pub fn query(&self, q: usize, k: usize) -> Result<bool, MaskError> {
        let size = self.size();
        if q >= size || k >= size {
            return Err(MaskError::IndexOutOfRange { q, k, size });
        }
        Ok(self.allowed(q, k))
    }

    /// Allowed key indices of row `q`, ascending.
    pub fn allowed_keys(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        self.row_words(q).iter().enumerate().flat_map(|(w, &word)| {
            let mut rest = word;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let b = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(w * 64 + b)
            })
        })
    }

    /// P5 image, `S x S`, 255 where attention is allowed and 0 where masked.
    pub fn to_pgm(&self) -> Vec<u8> {
        let size = self.size();
        let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
        out.reserve(size * size);
        for q in 0..size {
            for k in 0..size {
                out.push(if self.allowed(q, k) { 255 } else { 0 });
            }
        }
        out
    }

    /// `"SR3A"`, u32 LE size, u8 mode, then each row's words as u64 LE.
    pub fn to_bitset_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.bits.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.size() as u32).to_le_bytes());
        out.push(self.mode.code());
        for w in &self.bits {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Reads the bitset format back; the layout is not stored in the file and
    /// must be supplied.
    pub fn from_bitset_bytes(bytes: &[u8], layout: SegmentLayout) -> Result<Self, MaskError> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(MaskError::Format("missing SR3A header".into()));
        }
        let size = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mode = MaskMode::from_code(bytes[8])
            .ok_or_else(|| MaskError::Format(format!("unknown mode byte {}", bytes[8])))?;
        if size != layout.total() {
            return Err(MaskError::LayoutMismatch(format!(
                "file holds a {size}x{size} mask, layout has {} tokens",
                layout.total()
            )));
        }
        let words = size.div_ceil(64);
        let body = &bytes[9..];
        if body.len() != size * words * 8 {
            return Err(MaskError::Format(format!(
                "expected {} payload bytes, found {}",
                size * words * 8,
                body.len()
            )));
        }
        let bits = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(AttentionMask {
            layout,
            mode,
            words,
            bits,
        })
    }

    /// Header of a bitset file: `(size, mode)`.
    pub fn peek_bitset_header(bytes: &[u8]) -> Result<(usize, MaskMode), MaskError> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(MaskError::Format("missing SR3A header".into()));
        }
        let size = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mode = MaskMode::from_code(bytes[8])
            .ok_or_else(|| MaskError::Format(format!("unknown mode byte {}", bytes[8])))?;
        Ok((size, mode))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::raster::LatentGrid;

    /// Direct per-pair rule evaluation, independent of the bitset builder.
    pub(crate) fn oracle_allowed(
        seg_lengths: &[usize],
        membership: &[Vec<usize>],
        mode: MaskMode,
        q: usize,
        k: usize,
    ) -> bool {
        let text: usize = seg_lengths.iter().sum();
        let owner = |idx: usize| -> Option<usize> {
            let mut start = 0;
            for (i, &len) in seg_lengths.iter().enumerate() {
                if idx < start + len {
                    return Some(i);
                }
                start += len;
            }
            None
        };
        if q == k || mode == MaskMode::Dense {
            return true;
        }
        match (owner(q), owner(k)) {
            (Some(i), Some(j)) => i == j,
            (Some(i), None) => membership[k - text].contains(&i),
            (None, Some(j)) => membership[q - text].contains(&j),
            (None, None) => match mode {
                MaskMode::Sr3a => true,
                _ => membership[q - text].iter().any(|c| membership[k - text].contains(c)),
            },
        }
    }

    pub(crate) fn two_region_fixture(mode: MaskMode) -> AttentionMask {
        let layout = SegmentLayout::new(vec![2, 2], 4).unwrap();
        let grid = LatentGrid::new(1, 1, 4).unwrap();
        let map = RegionMap::from_membership(grid, 2, vec![vec![0], vec![0], vec![1], vec![1]]).unwrap();
        build_attention_mask(&layout, &map, mode).unwrap()
    }

    fn row(m: &AttentionMask, q: usize) -> Vec<usize> {
        m.allowed_keys(q).collect()
    }

    #[test]
    fn two_region_rows() {
        let m = two_region_fixture(MaskMode::Sr3a);
        assert_eq!(row(&m, 0), vec![0, 1, 4, 5]);
        assert_eq!(row(&m, 1), vec![0, 1, 4, 5]);
        assert_eq!(row(&m, 2), vec![2, 3, 6, 7]);
        assert_eq!(row(&m, 4), vec![0, 1, 4, 5, 6, 7]);
        assert_eq!(m.query(0, 2), Ok(false));
        let hard = two_region_fixture(MaskMode::HardRegional);
        assert_eq!(row(&hard, 4), vec![0, 1, 4, 5]);
        assert_eq!(row(&hard, 6), vec![2, 3, 6, 7]);
        for mode in [MaskMode::Sr3a, MaskMode::HardRegional, MaskMode::Dense] {
            let m = two_region_fixture(mode);
            let memb = vec![vec![0], vec![0], vec![1], vec![1]];
            for q in 0..8 {
                for k in 0..8 {
                    assert_eq!(m.allowed(q, k), oracle_allowed(&[2, 2], &memb, mode, q, k));
                }
            }
        }
    }

    #[test]
    fn single_full_frame_condition_is_dense() {
        let layout = SegmentLayout::new(vec![3], 6).unwrap();
        let map = RegionMap::uniform(LatentGrid::new(1, 2, 3).unwrap());
        let m = build_attention_mask(&layout, &map, MaskMode::Sr3a).unwrap();
        assert!((0..9).all(|q| (0..9).all(|k| m.allowed(q, k))));
    }

    #[test]
    fn query_bounds_and_diagonal() {
        let m = two_region_fixture(MaskMode::HardRegional);
        assert!((0..8).all(|q| m.query(q, q).unwrap()));
        assert_eq!(m.query(8, 0), Err(MaskError::IndexOutOfRange { q: 8, k: 0, size: 8 }));
        let d = two_region_fixture(MaskMode::Dense);
        assert!((0..8).all(|q| (0..8).all(|k| d.query(q, k).unwrap())));
    }

    #[test]
    fn empty_membership_keeps_diagonal() {
        let layout = SegmentLayout::new(vec![1], 2).unwrap();
        let map = RegionMap::from_membership(LatentGrid::new(1, 1, 2).unwrap(), 1, vec![vec![], vec![0]]).unwrap();
        let m = build_attention_mask(&layout, &map, MaskMode::HardRegional).unwrap();
        assert_eq!(row(&m, 1), vec![1]);
        assert_eq!(row(&m, 2), vec![0, 2]);
    }

    #[test]
    fn layout_mismatch() {
        let layout = SegmentLayout::new(vec![2, 2, 1], 4).unwrap();
        let map = RegionMap::from_membership(LatentGrid::new(1, 1, 4).unwrap(), 2, vec![vec![0]; 4]).unwrap();
        assert!(matches!(
            build_attention_mask(&layout, &map, MaskMode::Sr3a),
            Err(MaskError::LayoutMismatch(_))
        ));
        assert!(SegmentLayout::new(vec![2, 0], 4).is_err());
    }

    #[test]
    fn dense_4x4_pgm() {
        let layout = SegmentLayout::new(vec![1], 3).unwrap();
        let map = RegionMap::uniform(LatentGrid::new(1, 1, 3).unwrap());
        let m = build_attention_mask(&layout, &map, MaskMode::Dense).unwrap();
        let pgm = m.to_pgm();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert!(pgm[header.len()..].iter().all(|&b| b == 255));
        assert_eq!(pgm.len(), header.len() + 16);
    }

    #[test]
    fn bitset_round_trip_and_bytes() {
        let m = two_region_fixture(MaskMode::Sr3a);
        let bytes = m.to_bitset_bytes();
        assert_eq!(&bytes[..9], &[b'S', b'R', b'3', b'A', 8, 0, 0, 0, 0]);
        // Rows from the rule table: bit k set when key k is allowed.
        let expected_rows: [u64; 8] = [
            0b0011_0011,
            0b0011_0011,
            0b1100_1100,
            0b1100_1100,
            0b1111_0011,
            0b1111_0011,
            0b1111_1100,
            0b1111_1100,
        ];
        let payload: Vec<u8> = expected_rows.iter().flat_map(|r| r.to_le_bytes()).collect();
        assert_eq!(&bytes[9..], payload.as_slice());
        let back = AttentionMask::from_bitset_bytes(&bytes, m.layout().clone()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.storage_words(), 8);
    }

    #[test]
    fn bitset_rejects_garbage() {
        let m = two_region_fixture(MaskMode::Sr3a);
        let mut bytes = m.to_bitset_bytes();
        assert!(AttentionMask::from_bitset_bytes(&bytes[..20], m.layout().clone()).is_err());
        bytes[8] = 9;
        assert!(AttentionMask::from_bitset_bytes(&bytes, m.layout().clone()).is_err());
        assert!(AttentionMask::from_bitset_bytes(b"nope", m.layout().clone()).is_err());
    }

    #[test]
    fn segment_lookup() {
        let l = SegmentLayout::new(vec![2, 3, 1], 5).unwrap();
        let owners: Vec<_> = (0..8).map(|i| l.segment_of(i)).collect();
        assert_eq!(
            owners,
            vec![Some(0), Some(0), Some(1), Some(1), Some(1), Some(2), None, None]
        );
        assert_eq!(l.total(), 11);
    }
}
