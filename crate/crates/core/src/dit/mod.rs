//! Toy diffusion transformer over `[text segments..., visual tokens]` with
//! masked full attention, region-bound adapters, and exact adapter gradients.
//!
//! Activations are row-major (one row per token) and weights are stored as
//! `out x in`, so a layer computes `x W^T`. Every contraction is an explicit
//! loop so a token's output never depends on the values or count of
//! unrelated rows.

mod forward;
mod lora_set;
mod sample;
mod schedule;
mod tokenizer;

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lora::LoraError;
use crate::mask::{build_attention_mask, AttentionMask, MaskError, MaskMode, SegmentLayout};
use crate::plan::LatentPlan;
use crate::raster::{LatentGrid, RegionMap};

pub use forward::{dit_forward, ForwardCache};
pub use lora_set::{LoraEntry, LoraGrads, LoraSet, LoraTarget, Site};
pub use sample::sample;
pub use schedule::{add_noise, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
pub use tokenizer::{fnv1a, tokenize};

#[derive(Debug, Error)]
pub enum DitError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask mismatch: {0}")]
    MaskMismatch(String),
    #[error("timestep {t} out of range for {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error("checkpoint: {0}")]
    Io(String),
}

impl From<std::io::Error> for DitError {
    fn from(e: std::io::Error) -> Self {
        DitError::Io(e.to_string())
    }
}

impl From<MaskError> for DitError {
    fn from(e: MaskError) -> Self {
        DitError::MaskMismatch(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_latent: usize,
    pub grid: LatentGrid,
    #[serde(default = "default_max_seg_len")]
    pub max_seg_len: usize,
    #[serde(default = "default_hash_vocab")]
    pub hash_vocab: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_seg_len() -> usize {
    16
}

fn default_hash_vocab() -> usize {
    4096
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_blocks: 4,
            n_heads: 4,
            d_ff: 64,
            d_latent: 4,
            grid: LatentGrid { t: 12, h: 8, w: 8 },
            max_seg_len: default_max_seg_len(),
            hash_vocab: default_hash_vocab(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DitError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_latent", self.d_latent),
            ("max_seg_len", self.max_seg_len),
            ("hash_vocab", self.hash_vocab),
            ("grid", self.grid.token_count()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DitError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(DitError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(DitError::Config("d_model must be even".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(out, in)` of the layer at `site`.
    pub fn site_shape(&self, site: Site) -> (usize, usize) {
        match site {
            Site::FfnOut => (self.d_model, self.d_ff),
            _ => (self.d_model, self.d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

/// Frozen backbone. All values are exactly representable as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDit {
    config: ModelConfig,
    pub(crate) text_emb: Array2<f64>,
    pub(crate) text_pos: Array2<f64>,
    pub(crate) vis_pos: Array2<f64>,
    pub(crate) w_in: Array2<f64>,
    pub(crate) w_out: Array2<f64>,
    pub(crate) blocks: Vec<BlockParams>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the parameter blob.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    backbone_hash: String,
    blob: String,
    manifest: Vec<ManifestEntry>,
}

const CHECKPOINT_JSON: &str = "model.json";
const CHECKPOINT_BLOB: &str = "model.bin";

impl ToyDit {
    pub fn new(config: ModelConfig) -> Result<Self, DitError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = |rows: usize, cols: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng) as f32 as f64)
        };
        let d = config.d_model;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let text_emb = init(config.hash_vocab, d, 1.0);
        let text_pos = init(config.max_seg_len, d, 0.5);
        let vis_pos = init(config.grid.token_count(), d, 1.0);
        let w_in = init(d, config.d_latent, fan(config.d_latent));
        let w_out = init(config.d_latent, d, fan(d));
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                wq: init(d, d, fan(d)),
                wk: init(d, d, fan(d)),
                wv: init(d, d, fan(d)),
                wo: init(d, d, fan(d)),
                w1: init(config.d_ff, d, fan(d)),
                w2: init(d, config.d_ff, fan(config.d_ff)),
            })
            .collect();
        Ok(ToyDit {
            config,
            text_emb,
            text_pos,
            vis_pos,
            w_in,
            w_out,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("text_emb".to_string(), &self.text_emb),
            ("text_pos".to_string(), &self.text_pos),
            ("vis_pos".to_string(), &self.vis_pos),
            ("w_in".to_string(), &self.w_in),
            ("w_out".to_string(), &self.w_out),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, w) in [
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("w1", &b.w1),
                ("w2", &b.w2),
            ] {
                out.push((format!("blocks.{i}.{n}"), w));
            }
        }
        out
    }

    fn named_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![
            &mut self.text_emb,
            &mut self.text_pos,
            &mut self.vis_pos,
            &mut self.w_in,
            &mut self.w_out,
        ];
        for b in &mut self.blocks {
            out.extend([&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, w)| w.len()).sum()
    }

    /// SHA-256 over the config and every backbone parameter, hex encoded.
    pub fn backbone_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, w) in self.named() {
            h.update(name.as_bytes());
            for v in w.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `model.json` and `model.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DitError> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = Vec::new();
        let mut blob = Vec::with_capacity(self.param_count() * 4);
        for (name, w) in self.named() {
            manifest.push(ManifestEntry {
                name,
                shape: w.shape().to_vec(),
                offset: blob.len(),
            });
            for v in w.iter() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            config: self.config.clone(),
            backbone_hash: self.backbone_hash(),
            blob: CHECKPOINT_BLOB.to_string(),
            manifest,
        };
        let json = serde_json::to_string_pretty(&header).map_err(|e| DitError::Io(e.to_string()))?;
        std::fs::write(dir.join(CHECKPOINT_JSON), json)?;
        let mut f = std::fs::File::create(dir.join(CHECKPOINT_BLOB))?;
        f.write_all(&blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DitError> {
        let json = std::fs::read_to_string(dir.join(CHECKPOINT_JSON))?;
        let header: CheckpointHeader = serde_json::from_str(&json).map_err(|e| DitError::Io(e.to_string()))?;
        let blob = std::fs::read(dir.join(&header.blob))?;
        let mut model = ToyDit::new(header.config.clone())?;
        let names: Vec<(String, Vec<usize>)> = model
            .named()
            .into_iter()
            .map(|(n, w)| (n, w.shape().to_vec()))
            .collect();
        if names.len() != header.manifest.len() {
            return Err(DitError::Io("manifest does not match config".into()));
        }
        for ((name, shape), (entry, w)) in names.iter().zip(header.manifest.iter().zip(model.named_mut())) {
            if &entry.name != name || &entry.shape != shape {
                return Err(DitError::Io(format!(
                    "manifest entry {:?} does not match {name}",
                    entry.name
                )));
            }
            let end = entry.offset + w.len() * 4;
            let bytes = blob
                .get(entry.offset..end)
                .ok_or_else(|| DitError::Io(format!("blob truncated at {name}")))?;
            for (v, c) in w.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
        }
        if model.backbone_hash() != header.backbone_hash {
            return Err(DitError::Io("backbone hash mismatch".into()));
        }
        Ok(model)
    }
}

/// Tokenized captions, region map and the shared attention mask for one
/// forward configuration. The mask is built once and used by every block.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub captions: Vec<String>,
    pub segments: Vec<Vec<usize>>,
    pub region_map: RegionMap,
    pub mask: AttentionMask,
    pub(crate) allowed: Vec<Vec<usize>>,
}

impl Conditioning {
    pub fn new(
        config: &ModelConfig,
        captions: &[String],
        region_map: RegionMap,
        mode: MaskMode,
    ) -> Result<Self, DitError> {
        if region_map.grid != config.grid {
            return Err(DitError::ShapeMismatch(format!(
                "region map grid {:?} vs model grid {:?}",
                region_map.grid, config.grid
            )));
        }
        let segments: Vec<Vec<usize>> = captions
            .iter()
            .map(|c| tokenize(c, config.hash_vocab, config.max_seg_len))
            .collect();
        let layout = SegmentLayout::new(segments.iter().map(Vec::len).collect(), region_map.token_count())?;
        let mask = build_attention_mask(&layout, &region_map, mode)?;
        let allowed = (0..mask.size()).map(|q| mask.allowed_keys(q).collect()).collect();
        Ok(Conditioning {
            captions: captions.to_vec(),
            segments,
            region_map,
            mask,
            allowed,
        })
    }

    pub fn from_plan(
        config: &ModelConfig,
        plan: &LatentPlan,
        region_map: RegionMap,
        mode: MaskMode,
    ) -> Result<Self, DitError> {
        let captions: Vec<String> = plan.captions().iter().map(|c| c.to_string()).collect();
        Self::new(config, &captions, region_map, mode)
    }

    /// One caption over the whole clip.
    pub fn caption_only(config: &ModelConfig, caption: &str, mode: MaskMode) -> Result<Self, DitError> {
        Self::new(config, &[caption.to_string()], RegionMap::uniform(config.grid), mode)
    }

    pub fn layout(&self) -> &SegmentLayout {
        self.mask.layout()
    }

    pub fn seq_len(&self) -> usize {
        self.mask.size()
    }
}
