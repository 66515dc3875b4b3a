//! Rasterization of normalized boxes onto the latent token grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{BBox, LatentPlan};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RasterError {
    #[error("latent plan has {plan} frames but the grid has {grid}")]
    GridMismatch { plan: usize, grid: usize },
    #[error("grid dimensions must be positive, got {0}x{1}x{2}")]
    EmptyGrid(usize, usize, usize),
    #[error("condition id {id} out of range for {n} conditions")]
    ConditionOutOfRange { id: usize, n: usize },
}

/// Latent token layout: `t` frames of `h x w` patches, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentGrid {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self, RasterError> {
        if t == 0 || h == 0 || w == 0 {
            return Err(RasterError::EmptyGrid(t, h, w));
        }
        Ok(Self { t, h, w })
    }

    pub fn frame_tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn token_count(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn token_index(&self, t: usize, h: usize, w: usize) -> usize {
        t * self.h * self.w + h * self.w + w
    }

    /// Frame of token `idx`.
    pub fn frame_of(&self, idx: usize) -> usize {
        idx / self.frame_tokens()
    }
}

impl std::str::FromStr for LatentGrid {
    type Err = String;

    /// Parses `TxHxW`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let dims: Vec<usize> = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match dims.as_slice() {
            [t, h, w] => LatentGrid::new(*t, *h, *w).map_err(|e| e.to_string()),
            _ => Err(format!("expected TxHxW, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Background covers the tokens no entity region claims.
    #[default]
    Complement,
    /// Background covers every token.
    FullFrame,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverRule {
    /// Patch belongs to a box when its center lies in `[x0,x1) x [y0,y1)`.
    #[default]
    Center,
    /// Patch belongs to a box when they overlap with positive area.
    AnyOverlap,
}

/// Patches `(row, col)` of an `h x w` frame covered by `bbox`.
pub fn rasterize_bbox(bbox: &BBox, h: usize, w: usize, rule: CoverRule) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let hit = match rule {
                CoverRule::Center => {
                    let cx = (col as f64 + 0.5) / w as f64;
                    let cy = (row as f64 + 0.5) / h as f64;
                    bbox.x0 <= cx && cx < bbox.x1 && bbox.y0 <= cy && cy < bbox.y1
                }
                CoverRule::AnyOverlap => {
                    let (px0, px1) = (col as f64 / w as f64, (col + 1) as f64 / w as f64);
                    let (py0, py1) = (row as f64 / h as f64, (row + 1) as f64 / h as f64);
                    px0 < bbox.x1 && bbox.x0 < px1 && py0 < bbox.y1 && bbox.y0 < py1
                }
            };
            if hit {
                out.push((row, col));
            }
        }
    }
    out
}

/// Per-token condition membership. Each set is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMap {
    pub grid: LatentGrid,
    pub n_conditions: usize,
    pub membership: Vec<Vec<usize>>,
}

impl RegionMap {
    /// Every token belongs to condition 0 only.
    pub fn uniform(grid: LatentGrid) -> Self {
        RegionMap {
            grid,
            n_conditions: 1,
            membership: vec![vec![0]; grid.token_count()],
        }
    }

    /// Builds a map from explicit memberships, checking ids and sorting sets.
    pub fn from_membership(
        grid: LatentGrid,
        n_conditions: usize,
        mut membership: Vec<Vec<usize>>,
    ) -> Result<Self, RasterError> {
        if membership.len() != grid.token_count() {
            return Err(RasterError::GridMismatch {
                plan: membership.len(),
                grid: grid.token_count(),
            });
        }
        for set in &mut membership {
            set.sort_unstable();
            set.dedup();
            if let Some(&id) = set.last().filter(|&&id| id >= n_conditions) {
                return Err(RasterError::ConditionOutOfRange { id, n: n_conditions });
            }
        }
        Ok(RegionMap {
            grid,
            n_conditions,
            membership,
        })
    }

    pub fn token_count(&self) -> usize {
        self.membership.len()
    }

    pub fn contains(&self, token: usize, condition: usize) -> bool {
        self.membership[token].binary_search(&condition).is_ok()
    }

    /// Boolean mask over visual tokens that belong to any of `conditions`.
    pub fn token_mask(&self, conditions: &[usize]) -> Vec<bool> {
        self.membership
            .iter()
            .map(|set| conditions.iter().any(|c| set.binary_search(c).is_ok()))
            .collect()
    }

    /// Per-frame P5 image: each pixel is `lowest member id * 255 / n_conditions`.
    pub fn frame_pgm(&self, frame: usize) -> Vec<u8> {
        let g = self.grid;
        let mut out = format!("P5\n{} {}\n255\n", g.w, g.h).into_bytes();
        let start = frame * g.frame_tokens();
        for set in &self.membership[start..start + g.frame_tokens()] {
            let v = set.first().map_or(0, |&id| id * 255 / self.n_conditions.max(1));
            out.push(v.min(255) as u8);
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "grid": {"t": self.grid.t, "h": self.grid.h, "w": self.grid.w},
            "n_conditions": self.n_conditions,
            "membership": self.membership,
        })
    }
}

pub fn build_region_map(
    plan: &LatentPlan,
    grid: LatentGrid,
    background: BackgroundMode,
    rule: CoverRule,
) -> Result<RegionMap, RasterError> {
    if plan.latent_frames.len() != grid.t {
        return Err(RasterError::GridMismatch {
            plan: plan.latent_frames.len(),
            grid: grid.t,
        });
    }
    let n = plan.conditions.len().max(1);
    let mut membership: Vec<Vec<usize>> = vec![Vec::new(); grid.token_count()];
    for (t, regions) in plan.latent_frames.iter().enumerate() {
        for &(id, bbox) in regions {
            if id >= n {
                return Err(RasterError::ConditionOutOfRange { id, n });
            }
            for (row, col) in rasterize_bbox(&bbox, grid.h, grid.w, rule) {
                membership[grid.token_index(t, row, col)].push(id);
            }
        }
    }
    for set in &mut membership {
        set.sort_unstable();
        set.dedup();
        let add_background = match background {
            BackgroundMode::Complement => set.is_empty(),
            BackgroundMode::FullFrame => true,
        };
        if add_background && set.first() != Some(&0) {
            set.insert(0, 0);
        }
    }
    Ok(RegionMap {
        grid,
        n_conditions: n,
        membership,
    })
}
