use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DitError, ModelConfig};
use crate::lora::{read_adapter, write_adapter, LoraKind, LoraModule, LoraRole, PlacementPlan};
use crate::raster::RegionMap;

/// Linear layer an adapter is injected into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Q,
    K,
    V,
    FfnOut,
}

impl Site {
    pub const ALL: [Site; 4] = [Site::Q, Site::K, Site::V, Site::FfnOut];
}

/// Visual tokens an adapter applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Global,
    /// Tokens belonging to any of these condition ids.
    Conditions(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry {
    pub block: usize,
    pub site: Site,
    pub target: LoraTarget,
    pub module: LoraModule,
}

impl LoraEntry {
    /// Token mask over visual tokens.
    pub fn visual_mask(&self, region_map: &RegionMap) -> Vec<bool> {
        match &self.target {
            LoraTarget::Global => vec![true; region_map.token_count()],
            LoraTarget::Conditions(ids) => region_map.token_mask(ids),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoraSet {
    pub entries: Vec<LoraEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    block: usize,
    site: Site,
    target: LoraTarget,
}

impl LoraSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// One zero-`B` adapter per injection site on every block of `role`.
    #[allow(clippy::too_many_arguments)]
    pub fn for_role<R: Rng + ?Sized>(
        config: &ModelConfig,
        placement: &PlacementPlan,
        role: LoraRole,
        kind: LoraKind,
        target: LoraTarget,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self, DitError> {
        if placement.assignments.len() != config.n_blocks {
            return Err(DitError::Config(format!(
                "placement covers {} blocks, model has {}",
                placement.assignments.len(),
                config.n_blocks
            )));
        }
        let mut entries = Vec::new();
        for block in placement.blocks_with(role) {
            for site in Site::ALL {
                let (d, k) = config.site_shape(site);
                let module = LoraModule::new(d, k, rank, role, kind, rng)?;
                entries.push(LoraEntry {
                    block,
                    site,
                    target: target.clone(),
                    module,
                });
            }
        }
        Ok(LoraSet { entries })
    }

    pub fn extend(&mut self, other: LoraSet) {
        self.entries.extend(other.entries);
    }

    /// Copy with every entry re-targeted.
    pub fn retargeted(&self, target: LoraTarget) -> LoraSet {
        LoraSet {
            entries: self
                .entries
                .iter()
                .map(|e| LoraEntry {
                    target: target.clone(),
                    ..e.clone()
                })
                .collect(),
        }
    }

    /// Entries of `kind` only.
    pub fn only_kind(&self, kind: LoraKind) -> LoraSet {
        LoraSet {
            entries: self.entries.iter().filter(|e| e.module.kind == kind).cloned().collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.module.param_count()).sum()
    }

    /// All `A` then `B` values of every entry, in entry order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for e in &self.entries {
            out.extend(e.module.a.iter());
            out.extend(e.module.b.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.param_count());
        let mut it = values.iter();
        for e in &mut self.entries {
            for v in e.module.a.iter_mut().chain(e.module.b.iter_mut()) {
                *v = *it.next().unwrap();
            }
        }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<(), DitError> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.block >= config.n_blocks {
                return Err(DitError::Config(format!(
                    "adapter {i} targets block {} of {}",
                    e.block, config.n_blocks
                )));
            }
            let (d, k) = config.site_shape(e.site);
            if (e.module.d(), e.module.k()) != (d, k) {
                return Err(DitError::ShapeMismatch(format!(
                    "adapter {i} at {:?} is {}x{}, layer is {d}x{k}",
                    e.site,
                    e.module.d(),
                    e.module.k()
                )));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), DitError> {
        for e in &self.entries {
            let meta = EntryMeta {
                block: e.block,
                site: e.site,
                target: e.target.clone(),
            };
            let meta = serde_json::to_value(meta).map_err(|e| DitError::Io(e.to_string()))?;
            write_adapter(w, &e.module, meta)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self, DitError> {
        let mut entries = Vec::new();
        while let Some((module, meta)) = read_adapter(r)? {
            let meta: EntryMeta =
                serde_json::from_value(meta).map_err(|e| DitError::Io(format!("adapter placement: {e}")))?;
            entries.push(LoraEntry {
                block: meta.block,
                site: meta.site,
                target: meta.target,
                module,
            });
        }
        Ok(LoraSet { entries })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DitError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DitError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// Gradients for each entry of a [`LoraSet`], same order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub a: Vec<ndarray::Array2<f64>>,
    pub b: Vec<ndarray::Array2<f64>>,
}

impl LoraGrads {
    pub fn zeros_like(set: &LoraSet) -> Self {
        LoraGrads {
            a: set
                .entries
                .iter()
                .map(|e| ndarray::Array2::zeros(e.module.a.dim()))
                .collect(),
            b: set
                .entries
                .iter()
                .map(|e| ndarray::Array2::zeros(e.module.b.dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &LoraGrads) {
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += y;
        }
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += y;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (a, b) in self.a.iter().zip(&self.b) {
            out.extend(a.iter());
            out.extend(b.iter());
        }
        out
    }

    /// `param -= lr * grad` over the first `self.a.len()` entries of `set`.
    pub fn descend(&self, set: &mut LoraSet, lr: f64) {
        for (e, (ga, gb)) in set.entries.iter_mut().zip(self.a.iter().zip(&self.b)) {
            e.module.a.scaled_add(-lr, ga);
            e.module.b.scaled_add(-lr, gb);
        }
    }
}
