use std::io::BufReader;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{contract, CliError, Command, ExportFormat, PipelineConfig, PlanKind};
use crate::dit::{sample, tokenize, Conditioning, LoraSet, LoraTarget, NoiseSchedule, ToyDit};
use crate::lora::plan_lora_placement;
use crate::mask::{build_attention_mask, AttentionMask, SegmentLayout};
use crate::plan::{
    emit_frame_plan, emit_high_level_plan, interpolate_plan, parse_frame_plan, parse_high_level_plan,
    validate_frame_plan, validate_high_level_plan, LatentPlan, PlanError, RuleConfig, ValidationReport,
};
use crate::planner::{
    generate_plan, GeneratedPlan, HttpBackend, PromptTemplate, ReplayBackend, TemplateId, TextBackend,
};
use crate::raster::{build_region_map, RegionMap};
use crate::retrieval::{read_corpus_jsonl, read_tracks_jsonl, retrieve_motion, Scorers, WordOverlapScorer};
use crate::training::{
    moving_square_clip, moving_square_clips, train_motion_prior, train_subject_prior, write_log_jsonl, StepLog,
    TrainClip,
};

pub(super) fn dispatch(cmd: &Command, cfg: &PipelineConfig) -> Result<(), CliError> {
    match cmd {
        Command::Plan {
            template,
            topic,
            motions,
            narration,
            story,
            scene,
            replay,
        } => plan(
            cfg,
            *template,
            topic.as_deref(),
            motions,
            narration.as_deref(),
            story.as_deref(),
            *scene,
            replay.as_deref(),
        ),
        Command::Lint { plan, kind, motions } => lint(cfg, plan, *kind, motions),
        Command::Interp { plan, frames } => interp(cfg, plan, *frames),
        Command::Raster { latent_plan } => raster(cfg, latent_plan),
        Command::Mask {
            region_map,
            plan,
            segments,
        } => mask(cfg, region_map, plan.as_deref(), segments),
        Command::Retrieve { corpus, tracks, motion } => retrieve(cfg, corpus, tracks, motion),
        Command::TrainMotion {
            clips,
            synthetic,
            model,
            steps,
            lr,
        } => train_motion(cfg, clips.as_deref(), *synthetic, model.as_deref(), *steps, *lr),
        Command::TrainSubject {
            caption,
            reference,
            model,
            steps,
            lr,
            first_frame_only,
        } => train_subject(
            cfg,
            caption,
            reference.as_deref(),
            model.as_deref(),
            *steps,
            *lr,
            *first_frame_only,
        ),
        Command::Generate {
            latent_plan,
            model,
            lora,
            subject,
            motion,
        } => generate(cfg, latent_plan, model.as_deref(), lora, subject, motion),
        Command::ExportMask { mask, layout, format } => export_mask(cfg, mask, layout.as_deref(), *format),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| contract(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| contract(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| contract(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| contract(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| contract(format!("{}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(contract)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

/// Exit 1 when the report holds errors; findings go to stderr either way.
fn check_report(report: &ValidationReport) -> Result<(), CliError> {
    for f in report.warnings.iter().chain(&report.errors) {
        eprintln!("{:?} {:?} {}: {}", f.rule, f.frame_index, f.entity, f.message);
    }
    if report.is_accepted() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{} rule violation(s)",
            report.errors.len()
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn plan(
    cfg: &PipelineConfig,
    template_id: TemplateId,
    topic: Option<&str>,
    motions: &[String],
    narration: Option<&str>,
    story: Option<&Path>,
    scene: usize,
    replay: Option<&Path>,
) -> Result<(), CliError> {
    let mut slots: Vec<(&str, String)> = Vec::new();
    match template_id {
        TemplateId::HighLevel => {
            if let Some(t) = topic {
                slots.push(("topic", t.to_string()));
            }
        }
        TemplateId::FineGrained => {
            if let Some(path) = story {
                let story = parse_high_level_plan(&read_text(path)?).map_err(contract)?;
                let s = scene
                    .checked_sub(1)
                    .and_then(|i| story.scenes.get(i))
                    .ok_or_else(|| contract(format!("scene {scene} not in story of {} scenes", story.scenes.len())))?;
                slots.push(("motions", s.motions.join(", ")));
                slots.push(("narration", s.narration.clone()));
            } else {
                if !motions.is_empty() {
                    slots.push(("motions", motions.join(", ")));
                }
                if let Some(n) = narration {
                    slots.push(("narration", n.to_string()));
                }
            }
        }
    }
    let slot_refs: Vec<(&str, &str)> = slots.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let template = PromptTemplate::builtin(template_id);
    // Render first so missing slots fail before any backend is contacted.
    crate::planner::render_prompt(&template, &slot_refs).map_err(contract)?;
    let mut backend: Box<dyn TextBackend> = match replay {
        Some(dir) => Box::new(ReplayBackend::from_dir(dir).map_err(contract)?),
        None => Box::new(HttpBackend::from_env().map_err(contract)?),
    };
    let generation = generate_plan(backend.as_mut(), &template, &slot_refs, cfg.max_retries).map_err(contract)?;
    eprintln!("plan parsed after {} attempt(s)", generation.attempts);
    let text = match &generation.plan {
        GeneratedPlan::HighLevel(p) => emit_high_level_plan(p),
        GeneratedPlan::FrameLevel(p) => emit_frame_plan(p),
    };
    write_bytes(&cfg.out.join("plan.txt"), text.as_bytes())?;
    write_json(&cfg.out.join("plan_report.json"), &generation.report)?;
    check_report(&generation.report)
}

#[derive(Serialize)]
struct LintOutput<'a> {
    kind: &'a str,
    #[serde(flatten)]
    report: ValidationReport,
}

fn lint(cfg: &PipelineConfig, path: &Path, kind: PlanKind, motions: &[String]) -> Result<(), CliError> {
    let text = read_text(path)?;
    let mut rules: RuleConfig = cfg.rules.clone();
    if !motions.is_empty() {
        rules.allowed_motions = Some(motions.to_vec());
    }
    let frame = |text: &str| -> Result<ValidationReport, PlanError> {
        parse_frame_plan(text).map(|p| validate_frame_plan(&p, &rules))
    };
    let story = |text: &str| -> Result<ValidationReport, PlanError> {
        parse_high_level_plan(text).map(|p| validate_high_level_plan(&p, &cfg.story_rules))
    };
    let (name, report) = match kind {
        PlanKind::Frame => ("frame", frame(&text)),
        PlanKind::Story => ("story", story(&text)),
        PlanKind::Auto => match frame(&text) {
            Ok(r) => ("frame", Ok(r)),
            Err(frame_err) => match story(&text) {
                Ok(r) => ("story", Ok(r)),
                Err(_) => ("frame", Err(frame_err)),
            },
        },
    };
    let report = report.map_err(|e| contract(format!("{}: {e}", path.display())))?;
    print_json(&LintOutput {
        kind: name,
        report: report.clone(),
    });
    check_report(&report)
}

fn interp(cfg: &PipelineConfig, path: &Path, frames: Option<usize>) -> Result<(), CliError> {
    let plan = parse_frame_plan(&read_text(path)?).map_err(|e| contract(format!("{}: {e}", path.display())))?;
    let latent = interpolate_plan(&plan, frames.unwrap_or(cfg.grid.t), cfg.interpolation).map_err(contract)?;
    write_json(&cfg.out.join("latent_plan.json"), &latent)
}

fn raster(cfg: &PipelineConfig, path: &Path) -> Result<(), CliError> {
    let plan: LatentPlan = read_json(path)?;
    let map = build_region_map(&plan, cfg.grid, cfg.background, cfg.cover).map_err(contract)?;
    write_json(&cfg.out.join("region_map.json"), &map.to_json())?;
    for f in 0..map.grid.t {
        write_bytes(
            &cfg.out.join("regions").join(format!("frame_{f:03}.pgm")),
            &map.frame_pgm(f),
        )?;
    }
    Ok(())
}

fn read_region_map(path: &Path) -> Result<RegionMap, CliError> {
    let raw: RegionMap = read_json(path)?;
    RegionMap::from_membership(raw.grid, raw.n_conditions, raw.membership)
        .map_err(|e| contract(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct LayoutFile {
    seg_lengths: Vec<usize>,
    visual: usize,
}

fn mask(
    cfg: &PipelineConfig,
    region_path: &Path,
    plan_path: Option<&Path>,
    segments: &[usize],
) -> Result<(), CliError> {
    let map = read_region_map(region_path)?;
    let seg_lengths: Vec<usize> = match plan_path {
        Some(p) => {
            let plan: LatentPlan = read_json(p)?;
            plan.captions()
                .iter()
                .map(|c| tokenize(c, cfg.model.hash_vocab, cfg.model.max_seg_len).len())
                .collect()
        }
        None if !segments.is_empty() => segments.to_vec(),
        None => return Err(contract("mask needs --plan or --segments")),
    };
    let layout = SegmentLayout::new(seg_lengths.clone(), map.token_count()).map_err(contract)?;
    let mask = build_attention_mask(&layout, &map, cfg.mask_mode).map_err(contract)?;
    write_bytes(&cfg.out.join("mask.bin"), &mask.to_bitset_bytes())?;
    write_json(
        &cfg.out.join("mask_layout.json"),
        &LayoutFile {
            seg_lengths,
            visual: map.token_count(),
        },
    )
}

fn export_mask(cfg: &PipelineConfig, path: &Path, layout: Option<&Path>, format: ExportFormat) -> Result<(), CliError> {
    let layout_path: PathBuf = layout
        .map(Path::to_path_buf)
        .unwrap_or_else(|| path.with_file_name("mask_layout.json"));
    let lf: LayoutFile = read_json(&layout_path)?;
    let layout = SegmentLayout::new(lf.seg_lengths, lf.visual).map_err(contract)?;
    let mask = AttentionMask::from_bitset_bytes(&read_bytes(path)?, layout)
        .map_err(|e| contract(format!("{}: {e}", path.display())))?;
    match format {
        ExportFormat::Pgm => write_bytes(&cfg.out.join("mask.pgm"), &mask.to_pgm()),
        ExportFormat::Bitset => write_bytes(&cfg.out.join("mask_export.bin"), &mask.to_bitset_bytes()),
    }
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>, CliError> {
    std::fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| contract(format!("{}: {e}", path.display())))
}

fn retrieve(cfg: &PipelineConfig, corpus: &Path, tracks: &Path, motion: &str) -> Result<(), CliError> {
    let records = read_corpus_jsonl(open(corpus)?).map_err(|e| contract(format!("{}: {e}", corpus.display())))?;
    let spans = read_tracks_jsonl(open(tracks)?).map_err(|e| contract(format!("{}: {e}", tracks.display())))?;
    eprintln!("scoring with the word-overlap scorer");
    let scorer = WordOverlapScorer;
    let kept = retrieve_motion(
        &records,
        &spans,
        motion,
        &Scorers::word_overlap(&scorer),
        &cfg.retrieval,
    )
    .map_err(contract)?;
    let mut text = String::new();
    for clip in &kept {
        text.push_str(&serde_json::to_string(clip).map_err(contract)?);
        text.push('\n');
    }
    write_bytes(&cfg.out.join("retrieved.jsonl"), text.as_bytes())?;
    eprintln!("kept {} clip(s)", kept.len());
    Ok(())
}

fn load_or_create_model(cfg: &PipelineConfig, dir: Option<&Path>) -> Result<ToyDit, CliError> {
    match dir {
        Some(d) => {
            let model = ToyDit::load(d).map_err(|e| contract(format!("{}: {e}", d.display())))?;
            if model.config().grid != cfg.grid {
                return Err(contract(format!(
                    "checkpoint grid {:?} differs from configured grid {:?}",
                    model.config().grid,
                    cfg.grid
                )));
            }
            Ok(model)
        }
        None => {
            let model = ToyDit::new(cfg.model.clone()).map_err(contract)?;
            model.save(&cfg.out.join("model")).map_err(contract)?;
            eprintln!("wrote {}", cfg.out.join("model").display());
            Ok(model)
        }
    }
}

#[derive(Serialize)]
struct TrainSummary {
    initial: Option<StepLog>,
    final_loss: StepLog,
    backbone_hash: String,
}

fn write_log(path: &Path, log: &[StepLog]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_log_jsonl(log, &mut buf).map_err(contract)?;
    write_bytes(path, &buf)
}

fn train_motion(
    cfg: &PipelineConfig,
    clips_path: Option<&Path>,
    synthetic: Option<usize>,
    model_dir: Option<&Path>,
    steps: Option<usize>,
    lr: Option<f64>,
) -> Result<(), CliError> {
    let model = load_or_create_model(cfg, model_dir)?;
    let clips: Vec<TrainClip> = match clips_path {
        Some(p) => {
            let mut out = Vec::new();
            for (i, line) in read_text(p)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                out.push(serde_json::from_str(line).map_err(|e| contract(format!("{}:{}: {e}", p.display(), i + 1)))?);
            }
            out
        }
        None => moving_square_clips(cfg.grid, model.config().d_latent, synthetic.unwrap_or(4)),
    };
    let mut tc = cfg.train.clone();
    tc.steps = steps.unwrap_or(tc.steps);
    tc.learning_rate = lr.unwrap_or(tc.learning_rate);
    let placement = plan_lora_placement(model.config().n_blocks, cfg.placement).map_err(contract)?;
    let hash = model.backbone_hash();
    let prior = train_motion_prior(&clips, &model, &placement, &tc).map_err(contract)?;
    if model.backbone_hash() != hash {
        return Err(contract("backbone changed during training"));
    }
    prior
        .temporal
        .save(&cfg.out.join("motion_temporal.lora"))
        .map_err(contract)?;
    eprintln!("wrote {}", cfg.out.join("motion_temporal.lora").display());
    write_log(&cfg.out.join("motion_log.jsonl"), &prior.log)?;
    print_json(&TrainSummary {
        initial: prior.log.first().cloned(),
        final_loss: prior.final_loss,
        backbone_hash: hash,
    });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_subject(
    cfg: &PipelineConfig,
    caption: &str,
    reference: Option<&Path>,
    model_dir: Option<&Path>,
    steps: Option<usize>,
    lr: Option<f64>,
    first_frame_only: bool,
) -> Result<(), CliError> {
    let model = load_or_create_model(cfg, model_dir)?;
    let grid = cfg.grid;
    let d_latent = model.config().d_latent;
    let reference: Array2<f64> = match reference {
        Some(p) => read_json(p)?,
        None => moving_square_clip(grid, d_latent, (0, 0), (0, 0), 1 + grid.h.min(grid.w) / 3)
            .slice(ndarray::s![..grid.frame_tokens(), ..])
            .to_owned(),
    };
    let mut tc = cfg.train.clone();
    tc.steps = steps.unwrap_or(tc.steps);
    tc.learning_rate = lr.unwrap_or(tc.learning_rate);
    tc.first_frame_only |= first_frame_only;
    let placement = plan_lora_placement(model.config().n_blocks, cfg.placement).map_err(contract)?;
    let hash = model.backbone_hash();
    let prior = train_subject_prior(&reference, caption, &model, &placement, &tc).map_err(contract)?;
    prior.adapters.save(&cfg.out.join("subject.lora")).map_err(contract)?;
    eprintln!("wrote {}", cfg.out.join("subject.lora").display());
    write_log(&cfg.out.join("subject_log.jsonl"), &prior.log)?;
    print_json(&TrainSummary {
        initial: prior.log.first().cloned(),
        final_loss: prior.final_loss,
        backbone_hash: hash,
    });
    Ok(())
}

fn split_binding(s: &str) -> Result<(&str, &Path), CliError> {
    s.split_once('=')
        .map(|(k, v)| (k, Path::new(v)))
        .ok_or_else(|| contract(format!("expected NAME=PATH, got {s:?}")))
}

fn load_lora(path: &Path) -> Result<LoraSet, CliError> {
    LoraSet::load(path).map_err(|e| contract(format!("{}: {e}", path.display())))
}

/// Channel 0 of each latent frame as a P5 image, `[-1, 1]` mapped to `[0, 255]`.
fn latent_frame_pgm(z: &Array2<f64>, grid: crate::raster::LatentGrid, frame: usize) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.w, grid.h).into_bytes();
    for i in 0..grid.frame_tokens() {
        let v = z[[frame * grid.frame_tokens() + i, 0]];
        out.push(((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8);
    }
    out
}

fn generate(
    cfg: &PipelineConfig,
    plan_path: &Path,
    model_dir: Option<&Path>,
    loras: &[PathBuf],
    subjects: &[String],
    motions: &[String],
) -> Result<(), CliError> {
    let plan: LatentPlan = read_json(plan_path)?;
    let model = load_or_create_model(cfg, model_dir)?;
    let map = build_region_map(&plan, cfg.grid, cfg.background, cfg.cover).map_err(contract)?;
    let cond = Conditioning::from_plan(model.config(), &plan, map, cfg.mask_mode).map_err(contract)?;
    let mut set = LoraSet::new();
    for p in loras {
        set.extend(load_lora(p)?);
    }
    for s in subjects {
        let (entity, p) = split_binding(s)?;
        let ids = plan.conditions_for_entity(entity);
        if ids.is_empty() {
            return Err(contract(format!("no condition for entity {entity:?}")));
        }
        set.extend(load_lora(p)?.retargeted(LoraTarget::Conditions(ids)));
    }
    for s in motions {
        let (motion, p) = split_binding(s)?;
        let ids = plan.conditions_for_motion(motion);
        if ids.is_empty() {
            return Err(contract(format!("no condition carries motion {motion:?}")));
        }
        set.extend(load_lora(p)?.retargeted(LoraTarget::Conditions(ids)));
    }
    set.check(model.config()).map_err(contract)?;
    let z = sample(&model, &cond, &set, &NoiseSchedule::default(), cfg.seed).map_err(contract)?;
    write_json(&cfg.out.join("sample.json"), &z)?;
    for f in 0..cfg.grid.t {
        write_bytes(
            &cfg.out.join("frames").join(format!("frame_{f:03}.pgm")),
            &latent_frame_pgm(&z, cfg.grid, f),
        )?;
    }
    Ok(())
}
