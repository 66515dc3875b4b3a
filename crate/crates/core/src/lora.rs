//! Low-rank adapters: `W = W0 + scale * B A`, applied globally or restricted
//! to the token columns of a region.

use std::io::{BufRead, Read, Write};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("placement needs at least one block")]
    NoBlocks,
    #[error("adapter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraRole {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraKind {
    Subject,
    MotionTemporal,
    /// Trained per reference video and dropped at inference.
    MotionSpatialPerVideo,
}

/// Standard deviation of the random `A` initialization.
pub const A_INIT_STD: f64 = 0.02;
pub const DEFAULT_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule {
    /// `r x k`
    pub a: Array2<f64>,
    /// `d x r`
    pub b: Array2<f64>,
    pub scale: f64,
    pub role: LoraRole,
    pub kind: LoraKind,
}

impl LoraModule {
    /// Zero-initialized `B`, so the adapter starts out neutral.
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        k: usize,
        rank: usize,
        role: LoraRole,
        kind: LoraKind,
        rng: &mut R,
    ) -> Result<Self, LoraError> {
        if rank == 0 {
            return Err(LoraError::ZeroRank);
        }
        let normal = Normal::new(0.0, A_INIT_STD).expect("valid std");
        let a = Array2::from_shape_fn((rank, k), |_| normal.sample(rng));
        Ok(Self {
            a,
            b: Array2::zeros((d, rank)),
            scale: 1.0,
            role,
            kind,
        })
    }

    pub fn from_parts(
        a: Array2<f64>,
        b: Array2<f64>,
        scale: f64,
        role: LoraRole,
        kind: LoraKind,
    ) -> Result<Self, LoraError> {
        if a.nrows() == 0 {
            return Err(LoraError::ZeroRank);
        }
        if b.ncols() != a.nrows() {
            return Err(LoraError::DimensionMismatch(format!(
                "B is {:?} but A is {:?}",
                b.dim(),
                a.dim()
            )));
        }
        Ok(Self {
            a,
            b,
            scale,
            role,
            kind,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// Output dimension `d`.
    pub fn d(&self) -> usize {
        self.b.nrows()
    }

    /// Input dimension `k`.
    pub fn k(&self) -> usize {
        self.a.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `scale * B A`
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale
    }
}

fn check_weight(w0: &ArrayView2<f64>, lora: &LoraModule) -> Result<(), LoraError> {
    if w0.dim() != (lora.d(), lora.k()) {
        return Err(LoraError::DimensionMismatch(format!(
            "W0 is {:?}, adapter is {}x{}",
            w0.dim(),
            lora.d(),
            lora.k()
        )));
    }
    Ok(())
}

/// `W0 + scale * B A`
pub fn merge_lora(w0: &Array2<f64>, lora: &LoraModule) -> Result<Array2<f64>, LoraError> {
    check_weight(&w0.view(), lora)?;
    Ok(w0 + &lora.delta())
}

/// `y = W0 x + sum_i scale_i B_i A_i (mask_i ⊙ x)` with `x` of shape `k x c`
/// (one column per token); a false mask entry zeroes that token's column
/// before the adapter sees it.
pub fn lora_apply(
    w0: &Array2<f64>,
    bindings: &[(&LoraModule, &[bool])],
    x: &Array2<f64>,
) -> Result<Array2<f64>, LoraError> {
    if w0.ncols() != x.nrows() {
        return Err(LoraError::DimensionMismatch(format!(
            "W0 is {:?}, x is {:?}",
            w0.dim(),
            x.dim()
        )));
    }
    let c = x.ncols();
    let mut y = w0.dot(x);
    for (lora, mask) in bindings {
        check_weight(&w0.view(), lora)?;
        if mask.len() != c {
            return Err(LoraError::DimensionMismatch(format!(
                "mask has {} entries for {c} tokens",
                mask.len()
            )));
        }
        let mut masked = x.clone();
        for (j, &on) in mask.iter().enumerate() {
            if !on {
                masked.column_mut(j).fill(0.0);
            }
        }
        let down = lora.a.dot(&masked);
        y.scaled_add(lora.scale, &lora.b.dot(&down));
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementScheme {
    /// Even blocks spatial, odd blocks temporal (0-based).
    #[default]
    Interleaved,
    /// First `ceil(n/2)` blocks spatial, the rest temporal.
    HalfHalf,
}

impl std::str::FromStr for PlacementScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interleaved" => Ok(PlacementScheme::Interleaved),
            "half" | "half_half" | "half-half" => Ok(PlacementScheme::HalfHalf),
            _ => Err(format!("unknown placement {s:?} (interleaved|half)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub scheme: PlacementScheme,
    /// Role of each block, indexed by block.
    pub assignments: Vec<LoraRole>,
}

impl PlacementPlan {
    pub fn role_of(&self, block: usize) -> LoraRole {
        self.assignments[block]
    }

    pub fn blocks_with(&self, role: LoraRole) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn plan_lora_placement(n_blocks: usize, scheme: PlacementScheme) -> Result<PlacementPlan, LoraError> {
    if n_blocks == 0 {
        return Err(LoraError::NoBlocks);
    }
    let spatial_half = n_blocks.div_ceil(2);
    let assignments = (0..n_blocks)
        .map(|i| {
            let spatial = match scheme {
                PlacementScheme::Interleaved => i % 2 == 0,
                PlacementScheme::HalfHalf => i < spatial_half,
            };
            if spatial {
                LoraRole::Spatial
            } else {
                LoraRole::Temporal
            }
        })
        .collect();
    Ok(PlacementPlan { scheme, assignments })
}

/// JSON header line of one adapter record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterHeader {
    pub d: usize,
    pub k: usize,
    pub r: usize,
    pub scale: f64,
    pub role: LoraRole,
    pub kind: LoraKind,
    /// Free-form placement metadata (block, site, binding).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

/// One record: the JSON header on a single line, `\n`, then `A` (`r x k`)
/// and `B` (`d x r`) as row-major little-endian f32.
pub fn write_adapter<W: Write>(w: &mut W, lora: &LoraModule, meta: serde_json::Value) -> Result<(), LoraError> {
    let header = AdapterHeader {
        d: lora.d(),
        k: lora.k(),
        r: lora.rank(),
        scale: lora.scale,
        role: lora.role,
        kind: lora.kind,
        meta,
    };
    let line = serde_json::to_string(&header).map_err(|e| LoraError::Format(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for v in lora.a.iter().chain(lora.b.iter()) {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_floats<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, LoraError> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| LoraError::Format(format!("truncated payload: {e}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

/// Reads one record, or `None` at a clean end of input.
pub fn read_adapter<R: BufRead>(r: &mut R) -> Result<Option<(LoraModule, serde_json::Value)>, LoraError> {
    let mut line = Vec::new();
    if r.read_until(b'\n', &mut line)? == 0 {
        return Ok(None);
    }
    let header: AdapterHeader = serde_json::from_slice(&line).map_err(|e| LoraError::Format(format!("header: {e}")))?;
    if header.r == 0 {
        return Err(LoraError::ZeroRank);
    }
    let a = read_floats(r, header.r * header.k)?;
    let b = read_floats(r, header.d * header.r)?;
    let a = Array2::from_shape_vec((header.r, header.k), a).expect("sized above");
    let b = Array2::from_shape_vec((header.d, header.r), b).expect("sized above");
    let module = LoraModule::from_parts(a, b, header.scale, header.role, header.kind)?;
    Ok(Some((module, header.meta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Column-by-column evaluation of the masked adapter sum with scalar loops.
    fn oracle_apply(w0: &Array2<f64>, bindings: &[(&LoraModule, &[bool])], x: &Array2<f64>) -> Array2<f64> {
        let (d, k) = w0.dim();
        let c = x.ncols();
        let mut y = Array2::zeros((d, c));
        for j in 0..c {
            for i in 0..d {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += w0[[i, p]] * x[[p, j]];
                }
                for (lora, mask) in bindings {
                    if !mask[j] {
                        continue;
                    }
                    for q in 0..lora.rank() {
                        let mut ax = 0.0;
                        for p in 0..k {
                            ax += lora.a[[q, p]] * x[[p, j]];
                        }
                        acc += lora.scale * lora.b[[i, q]] * ax;
                    }
                }
                y[[i, j]] = acc;
            }
        }
        y
    }

    fn random_lora(rng: &mut ChaCha8Rng, d: usize, k: usize, r: usize) -> LoraModule {
        let normal = Normal::new(0.0, 1.0).unwrap();
        LoraModule::from_parts(
            Array2::from_shape_fn((r, k), |_| normal.sample(rng)),
            Array2::from_shape_fn((d, r), |_| normal.sample(rng)),
            1.0,
            LoraRole::Spatial,
            LoraKind::Subject,
        )
        .unwrap()
    }

    #[test]
    fn zero_init_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lora = LoraModule::new(3, 2, 2, LoraRole::Spatial, LoraKind::Subject, &mut rng).unwrap();
        let w0 = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(merge_lora(&w0, &lora).unwrap(), w0);
        let x = array![[1.0, -1.0], [0.5, 2.0]];
        let mask = [true, true];
        assert_eq!(lora_apply(&w0, &[(&lora, &mask)], &x).unwrap(), w0.dot(&x));
    }

    #[test]
    fn rank_one_outer_product() {
        let lora = LoraModule::from_parts(
            array![[0.0, 1.0]],
            array![[1.0], [0.0]],
            1.0,
            LoraRole::Temporal,
            LoraKind::MotionTemporal,
        )
        .unwrap();
        let w0 = Array2::<f64>::zeros((2, 2));
        assert_eq!(merge_lora(&w0, &lora).unwrap(), array![[0.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn merge_matches_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lora = random_lora(&mut rng, 3, 3, 2);
        let w0 = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64);
        let merged = merge_lora(&w0, &lora).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = w0[[i, j]] + (0..2).map(|q| lora.b[[i, q]] * lora.a[[q, j]]).sum::<f64>();
                assert!((merged[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_bindings_is_base() {
        let w0 = array![[1.0, 2.0], [3.0, 4.0]];
        let x = array![[1.0], [2.0]];
        assert_eq!(lora_apply(&w0, &[], &x).unwrap(), w0.dot(&x));
    }

    #[test]
    fn small_integer_overlap_case() {
        let w0 = array![[1.0, -2.0], [0.0, 3.0]];
        let l1 = LoraModule::from_parts(
            array![[2.0, 1.0]],
            array![[1.0], [-1.0]],
            1.0,
            LoraRole::Spatial,
            LoraKind::Subject,
        )
        .unwrap();
        let l2 = LoraModule::from_parts(
            array![[0.0, 3.0]],
            array![[2.0], [1.0]],
            1.0,
            LoraRole::Spatial,
            LoraKind::Subject,
        )
        .unwrap();
        let x = array![[1.0, 2.0, -1.0], [1.0, 0.0, 2.0]];
        let m1 = [true, true, false];
        let m2 = [false, true, true];
        let y = lora_apply(&w0, &[(&l1, &m1), (&l2, &m2)], &x).unwrap();
        assert_eq!(y, oracle_apply(&w0, &[(&l1, &m1), (&l2, &m2)], &x));
        // column 1 is in both regions: W0 x + B1 A1 x + B2 A2 x
        assert_eq!(y.column(1).to_vec(), vec![2.0 + 4.0 + 0.0, 0.0 - 4.0 + 0.0]);
    }

    #[test]
    fn dimension_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lora = random_lora(&mut rng, 2, 3, 1);
        let w0 = Array2::<f64>::zeros((2, 2));
        assert!(matches!(merge_lora(&w0, &lora), Err(LoraError::DimensionMismatch(_))));
        let x = Array2::<f64>::zeros((2, 4));
        let ok = random_lora(&mut rng, 2, 2, 1);
        let short = [true; 3];
        assert!(lora_apply(&w0, &[(&ok, &short)], &x).is_err());
        assert!(lora_apply(&w0, &[], &Array2::zeros((3, 1))).is_err());
    }

    #[test]
    fn placement_schemes() {
        let p = plan_lora_placement(4, PlacementScheme::Interleaved).unwrap();
        assert_eq!(p.blocks_with(LoraRole::Spatial), vec![0, 2]);
        assert_eq!(p.blocks_with(LoraRole::Temporal), vec![1, 3]);
        let h = plan_lora_placement(4, PlacementScheme::HalfHalf).unwrap();
        assert_eq!(h.blocks_with(LoraRole::Spatial), vec![0, 1]);
        assert_eq!(h.blocks_with(LoraRole::Temporal), vec![2, 3]);
        let one = plan_lora_placement(1, PlacementScheme::Interleaved).unwrap();
        assert_eq!(one.blocks_with(LoraRole::Spatial), vec![0]);
        assert!(one.blocks_with(LoraRole::Temporal).is_empty());
        assert_eq!(
            plan_lora_placement(5, PlacementScheme::HalfHalf)
                .unwrap()
                .blocks_with(LoraRole::Spatial),
            vec![0, 1, 2]
        );
        assert!(matches!(
            plan_lora_placement(0, PlacementScheme::Interleaved),
            Err(LoraError::NoBlocks)
        ));
    }

    #[test]
    fn adapter_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut lora = random_lora(&mut rng, 4, 3, 2);
        lora.a.mapv_inplace(|v| (v as f32) as f64);
        lora.b.mapv_inplace(|v| (v as f32) as f64);
        lora.scale = 0.5;
        let mut bytes = Vec::new();
        write_adapter(&mut bytes, &lora, serde_json::json!({"block": 1})).unwrap();
        write_adapter(&mut bytes, &lora, serde_json::Value::Null).unwrap();
        let first_line = bytes.split(|&b| b == b'\n').next().unwrap();
        let header: serde_json::Value = serde_json::from_slice(first_line).unwrap();
        assert_eq!(header["d"], 4);
        assert_eq!(header["kind"], "subject");
        let mut cursor = std::io::Cursor::new(bytes);
        let (back, meta) = read_adapter(&mut cursor).unwrap().unwrap();
        assert_eq!(back, lora);
        assert_eq!(meta["block"], 1);
        assert!(read_adapter(&mut cursor).unwrap().is_some());
        assert!(read_adapter(&mut cursor).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn masked_apply_matches_oracle(seed in 0u64..10_000, d in 1usize..5, k in 1usize..5, c in 1usize..6, n in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w0 = Array2::from_shape_fn((d, k), |_| rng.gen_range(-2.0..2.0));
            let x = Array2::from_shape_fn((k, c), |_| rng.gen_range(-2.0..2.0));
            let loras: Vec<LoraModule> = (0..n).map(|_| { let r = 1 + rng.gen_range(0..2); random_lora(&mut rng, d, k, r) }).collect();
            let masks: Vec<Vec<bool>> = (0..n).map(|_| (0..c).map(|_| rng.gen_bool(0.5)).collect()).collect();
            let bindings: Vec<(&LoraModule, &[bool])> = loras.iter().zip(&masks).map(|(l, m)| (l, m.as_slice())).collect();
            let y = lora_apply(&w0, &bindings, &x).unwrap();
            let expect = oracle_apply(&w0, &bindings, &x);
            prop_assert!((&y - &expect).iter().all(|v| v.abs() < 1e-10));

            // Reordering bindings changes nothing beyond reassociation.
            let rev: Vec<_> = bindings.iter().rev().cloned().collect();
            let y_rev = lora_apply(&w0, &rev, &x).unwrap();
            prop_assert!((&y - &y_rev).iter().all(|v| v.abs() < 1e-10));

            // Masked-out columns do not leak into other columns.
            let mut x2 = x.clone();
            for j in 0..c {
                if masks.iter().all(|m| !m[j]) {
                    x2.column_mut(j).mapv_inplace(|v| v * 3.0 + 1.0);
                }
            }
            let y2 = lora_apply(&w0, &bindings, &x2).unwrap();
            let base = w0.dot(&x);
            let base2 = w0.dot(&x2);
            for j in 0..c {
                for i in 0..d {
                    prop_assert!(((y[[i, j]] - base[[i, j]]) - (y2[[i, j]] - base2[[i, j]])).abs() < 1e-10);
                }
            }
        }
    }
}
