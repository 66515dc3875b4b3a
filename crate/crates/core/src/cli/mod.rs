//! Command-line front end. Each subcommand reads its inputs, calls one chain
//! of library operations and writes the artifacts under `--out`.

mod commands;

use std::fmt::Display;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dit::ModelConfig;
use crate::lora::{PlacementScheme, DEFAULT_RANK};
use crate::mask::MaskMode;
use crate::plan::{HighLevelRules, InterpolationMode, RuleConfig};
use crate::planner::TemplateId;
use crate::raster::{BackgroundMode, CoverRule, LatentGrid};
use crate::retrieval::RetrievalConfig;
use crate::training::{PromptMode, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_CONTRACT: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Inputs are well formed but break a rule (plan lint findings).
    Validation(String),
    /// Unreadable files, malformed artifacts, shape mismatches, backend failures.
    Contract(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Contract(_) => EXIT_CONTRACT,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation failed: {m}"),
            CliError::Contract(m) => write!(f, "{m}"),
        }
    }
}

pub(crate) fn contract(e: impl Display) -> CliError {
    CliError::Contract(e.to_string())
}

/// Everything a run depends on. Loaded from `--config`, then overridden by
/// flags. The top-level seed is copied into the model and training configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub grid: LatentGrid,
    pub interpolation: InterpolationMode,
    pub background: BackgroundMode,
    pub cover: CoverRule,
    pub mask_mode: MaskMode,
    pub placement: PlacementScheme,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    pub rules: RuleConfig,
    pub story_rules: HighLevelRules,
    pub max_retries: usize,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        PipelineConfig {
            seed: 0,
            grid: model.grid,
            interpolation: InterpolationMode::default(),
            background: BackgroundMode::default(),
            cover: CoverRule::default(),
            mask_mode: MaskMode::default(),
            placement: PlacementScheme::default(),
            model,
            train: TrainConfig {
                rank: DEFAULT_RANK,
                ..TrainConfig::default()
            },
            retrieval: RetrievalConfig::default(),
            rules: RuleConfig::default(),
            story_rules: HighLevelRules::default(),
            max_retries: 3,
            out: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    fn resolve(mut self, g: &GlobalOpts) -> Self {
        if let Some(seed) = g.seed {
            self.seed = seed;
        }
        if let Some(grid) = g.grid {
            self.grid = grid;
        }
        if let Some(mode) = g.mode {
            self.mask_mode = mode;
        }
        if let Some(p) = g.placement {
            self.placement = p;
        }
        if let Some(beta) = g.beta {
            self.train.debias.beta = beta;
        }
        if let Some(pm) = g.prompt_mode {
            self.train.prompt_mode = pm.into();
        }
        if let Some(out) = &g.out {
            self.out = out.clone();
        }
        self.model.grid = self.grid;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.train.mask_mode = self.mask_mode;
        self
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum PromptModeArg {
    PerVideo,
    Single,
}

impl From<PromptModeArg> for PromptMode {
    fn from(p: PromptModeArg) -> Self {
        match p {
            PromptModeArg::PerVideo => PromptMode::PerVideo,
            PromptModeArg::Single => PromptMode::Single,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum PlanKind {
    Auto,
    Story,
    Frame,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ExportFormat {
    Pgm,
    Bitset,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Latent grid as TxHxW.
    #[arg(long, global = true)]
    pub grid: Option<LatentGrid>,
    /// Attention mask mode: sr3a, hard or dense.
    #[arg(long, global = true)]
    pub mode: Option<MaskMode>,
    /// Adapter placement: interleaved or half.
    #[arg(long, global = true)]
    pub placement: Option<PlacementScheme>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub prompt_mode: Option<PromptModeArg>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "storyvid", version, about = "Layout-planned toy video diffusion pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ask the planning backend for a story or scene plan.
    Plan {
        #[arg(long, default_value = "high_level")]
        template: TemplateId,
        #[arg(long)]
        topic: Option<String>,
        /// Comma-separated scene motions.
        #[arg(long, value_delimiter = ',')]
        motions: Vec<String>,
        #[arg(long)]
        narration: Option<String>,
        /// Take motions and narration from a scene of this story plan.
        #[arg(long)]
        story: Option<PathBuf>,
        /// 1-based scene index into `--story`.
        #[arg(long, default_value_t = 1)]
        scene: usize,
        /// Directory of canned responses instead of the HTTP backend.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Parse and validate a plan file; prints the report as JSON.
    Lint {
        plan: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        kind: PlanKind,
        /// Declared scene motions for the vocabulary check.
        #[arg(long, value_delimiter = ',')]
        motions: Vec<String>,
    },
    /// Resample a key-frame plan onto latent frames.
    Interp {
        plan: PathBuf,
        /// Latent frame count; defaults to the grid's T.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Map a latent plan onto the token grid.
    Raster { latent_plan: PathBuf },
    /// Build the attention mask for a region map.
    Mask {
        region_map: PathBuf,
        /// Latent plan whose captions give the text segment lengths.
        #[arg(long, conflicts_with = "segments")]
        plan: Option<PathBuf>,
        /// Explicit comma-separated segment lengths.
        #[arg(long, value_delimiter = ',')]
        segments: Vec<usize>,
    },
    /// Search a corpus for clips showing a motion.
    Retrieve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        motion: String,
    },
    /// Train shared temporal motion adapters.
    TrainMotion {
        /// JSONL of `{latent, caption}` clips.
        #[arg(long, conflicts_with = "synthetic")]
        clips: Option<PathBuf>,
        /// Number of synthetic moving-square clips.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Backbone checkpoint directory; a fresh backbone is created otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train spatial subject adapters on one reference frame.
    TrainSubject {
        #[arg(long)]
        caption: String,
        /// JSON `HW x C` array; a synthetic square is used otherwise.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        first_frame_only: bool,
    },
    /// Sample a latent clip for a latent plan.
    Generate {
        latent_plan: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Adapter file bound as stored.
        #[arg(long)]
        lora: Vec<PathBuf>,
        /// `ENTITY=PATH`: adapters bound to that entity's regions.
        #[arg(long)]
        subject: Vec<String>,
        /// `MOTION=PATH`: adapters bound to regions carrying that motion.
        #[arg(long)]
        motion: Vec<String>,
    },
    /// Convert a stored mask to PGM or re-emit its bitset form.
    ExportMask {
        mask: PathBuf,
        /// Layout JSON; defaults to `mask_layout.json` next to the mask.
        #[arg(long)]
        layout: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pgm")]
        format: ExportFormat,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Plan { .. } => "plan",
            Command::Lint { .. } => "lint",
            Command::Interp { .. } => "interp",
            Command::Raster { .. } => "raster",
            Command::Mask { .. } => "mask",
            Command::Retrieve { .. } => "retrieve",
            Command::TrainMotion { .. } => "train-motion",
            Command::TrainSubject { .. } => "train-subject",
            Command::Generate { .. } => "generate",
            Command::ExportMask { .. } => "export-mask",
        }
    }
}

pub fn load_config(g: &GlobalOpts) -> Result<PipelineConfig, CliError> {
    let base = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| contract(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| contract(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    Ok(base.resolve(g))
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONTRACT } else { EXIT_OK };
        }
    };
    let name = cli.command.name();
    let result = load_config(&cli.global).and_then(|cfg| {
        eprintln!(
            "storyvid {name}: config {}",
            serde_json::to_string(&cfg).expect("config serializes")
        );
        std::fs::create_dir_all(&cfg.out).map_err(|e| contract(format!("{}: {e}", cfg.out.display())))?;
        commands::dispatch(&cli.command, &cfg)
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("storyvid {name}: error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("storyvid").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 3, "mask_mode": "dense", "train": {"steps": 7}}"#).unwrap();
        let cli = parse(&[
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "9",
            "--grid",
            "2x3x4",
            "lint",
            "x",
        ]);
        let cfg = load_config(&cli.global).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.mask_mode, MaskMode::Dense);
        assert_eq!(cfg.train.mask_mode, MaskMode::Dense);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.model.grid, LatentGrid { t: 2, h: 3, w: 4 });
    }

    #[test]
    fn defaults_match_modules() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.retrieval, RetrievalConfig::default());
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.placement, PlacementScheme::Interleaved);
        assert_eq!(cfg.mask_mode, MaskMode::Sr3a);
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn global_flags_after_subcommand() {
        let cli = parse(&["mask", "r.json", "--mode", "hard", "--segments", "2,2"]);
        assert_eq!(cli.global.mode, Some(MaskMode::HardRegional));
        match cli.command {
            Command::Mask { segments, .. } => assert_eq!(segments, vec![2, 2]),
            other => panic!("{other:?}"),
        }
    }
}
