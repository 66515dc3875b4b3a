//! Diffusion losses with appearance debiasing, and the motion/subject prior
//! training loops over a frozen [`ToyDit`].

use std::io::Write;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dit::{add_noise, Conditioning, DitError, LoraGrads, LoraSet, LoraTarget, NoiseSchedule, ToyDit};
use crate::lora::{LoraKind, LoraRole, PlacementPlan, DEFAULT_RANK};
use crate::mask::MaskMode;
use crate::raster::LatentGrid;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training clips")]
    EmptyTrainingSet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("anchor frame {anchor} out of range for {frames} frames")]
    AnchorOutOfRange { anchor: usize, frames: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] DitError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebiasConfig {
    pub beta: f64,
    pub anchor_index: usize,
    pub enabled: bool,
    /// Debias the prediction with the target's anchor frame instead of its own.
    pub shared_anchor: bool,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        DebiasConfig {
            beta: 1.0,
            anchor_index: 0,
            enabled: true,
            shared_anchor: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    PerVideo,
    Single,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Fresh `(t, epsilon)` for every clip at every step.
    #[default]
    Resample,
    /// One `(t, epsilon)` per clip, drawn once from the seed.
    FixedPerClip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub prompt_mode: PromptMode,
    /// Caption used by every clip in single-prompt mode; defaults to the
    /// first clip's caption.
    pub single_caption: Option<String>,
    pub loss_reduction: Reduction,
    pub debias: DebiasConfig,
    pub first_frame_only: bool,
    pub noise_mode: NoiseMode,
    pub rank: usize,
    pub mask_mode: MaskMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            steps: 200,
            seed: 0,
            prompt_mode: PromptMode::PerVideo,
            single_caption: None,
            loss_reduction: Reduction::Mean,
            debias: DebiasConfig::default(),
            first_frame_only: false,
            noise_mode: NoiseMode::Resample,
            rank: DEFAULT_RANK,
            mask_mode: MaskMode::Sr3a,
        }
    }
}

fn check_same(a: &Array3<f64>, b: &Array3<f64>) -> Result<(), TrainError> {
    if a.dim() != b.dim() {
        return Err(TrainError::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn reduce(sum: f64, n: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Mean => sum / n.max(1) as f64,
        Reduction::Sum => sum,
    }
}

fn reduce_scale(n: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Mean => 1.0 / n.max(1) as f64,
        Reduction::Sum => 1.0,
    }
}

fn squared_error(a: &Array3<f64>, b: &Array3<f64>, reduction: Reduction) -> f64 {
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    reduce(sum, a.len(), reduction)
}

/// Squared error between the true and predicted noise, shaped
/// `frames x tokens_per_frame x channels`.
pub fn loss_org(eps: &Array3<f64>, eps_hat: &Array3<f64>, reduction: Reduction) -> Result<f64, TrainError> {
    check_same(eps, eps_hat)?;
    Ok(squared_error(eps, eps_hat, reduction))
}

pub fn loss_org_grad(
    eps: &Array3<f64>,
    eps_hat: &Array3<f64>,
    reduction: Reduction,
) -> Result<Array3<f64>, TrainError> {
    check_same(eps, eps_hat)?;
    let s = 2.0 * reduce_scale(eps.len(), reduction);
    Ok(ndarray::Zip::from(eps_hat).and(eps).map_collect(|&p, &e| s * (p - e)))
}

fn debias_with_anchor(eps: &Array3<f64>, anchor: &Array2<f64>, beta: f64) -> Array3<f64> {
    let c = (beta * beta + 1.0).sqrt();
    let mut out = eps.mapv(|v| c * v);
    for mut frame in out.axis_iter_mut(Axis(0)) {
        frame.scaled_add(-beta, anchor);
    }
    out
}

fn check_anchor(eps: &Array3<f64>, cfg: &DebiasConfig) -> Result<(), TrainError> {
    let frames = eps.len_of(Axis(0));
    if cfg.anchor_index >= frames {
        return Err(TrainError::AnchorOutOfRange {
            anchor: cfg.anchor_index,
            frames,
        });
    }
    if cfg.beta < 0.0 {
        return Err(TrainError::Config(format!(
            "beta must be non-negative, got {}",
            cfg.beta
        )));
    }
    Ok(())
}

/// `phi(eps)_f = sqrt(beta^2 + 1) eps_f - beta eps_anchor` for every frame.
pub fn debias(eps: &Array3<f64>, cfg: &DebiasConfig) -> Result<Array3<f64>, TrainError> {
    check_anchor(eps, cfg)?;
    let anchor = eps.index_axis(Axis(0), cfg.anchor_index).to_owned();
    Ok(debias_with_anchor(eps, &anchor, cfg.beta))
}

/// Squared error between debiased target and prediction. Zero when
/// debiasing is disabled.
pub fn loss_ad(
    eps: &Array3<f64>,
    eps_hat: &Array3<f64>,
    cfg: &DebiasConfig,
    reduction: Reduction,
) -> Result<f64, TrainError> {
    check_same(eps, eps_hat)?;
    if !cfg.enabled {
        return Ok(0.0);
    }
    let target = debias(eps, cfg)?;
    let pred = if cfg.shared_anchor {
        debias_with_anchor(eps_hat, &eps.index_axis(Axis(0), cfg.anchor_index).to_owned(), cfg.beta)
    } else {
        debias(eps_hat, cfg)?
    };
    Ok(squared_error(&target, &pred, reduction))
}

pub fn loss_ad_grad(
    eps: &Array3<f64>,
    eps_hat: &Array3<f64>,
    cfg: &DebiasConfig,
    reduction: Reduction,
) -> Result<Array3<f64>, TrainError> {
    check_same(eps, eps_hat)?;
    if !cfg.enabled {
        return Ok(Array3::zeros(eps.dim()));
    }
    let target = debias(eps, cfg)?;
    let pred = if cfg.shared_anchor {
        debias_with_anchor(eps_hat, &eps.index_axis(Axis(0), cfg.anchor_index).to_owned(), cfg.beta)
    } else {
        debias(eps_hat, cfg)?
    };
    let s = 2.0 * reduce_scale(eps.len(), reduction);
    let g = ndarray::Zip::from(&pred).and(&target).map_collect(|&p, &t| s * (p - t));
    let c = (cfg.beta * cfg.beta + 1.0).sqrt();
    let mut out = g.mapv(|v| c * v);
    if !cfg.shared_anchor {
        let total = g.sum_axis(Axis(0));
        out.index_axis_mut(Axis(0), cfg.anchor_index)
            .scaled_add(-cfg.beta, &total);
    }
    Ok(out)
}

/// `loss_org + loss_ad`, unweighted.
pub fn loss_motion(
    eps: &Array3<f64>,
    eps_hat: &Array3<f64>,
    cfg: &DebiasConfig,
    reduction: Reduction,
) -> Result<f64, TrainError> {
    Ok(loss_org(eps, eps_hat, reduction)? + loss_ad(eps, eps_hat, cfg, reduction)?)
}

pub fn loss_motion_grad(
    eps: &Array3<f64>,
    eps_hat: &Array3<f64>,
    cfg: &DebiasConfig,
    reduction: Reduction,
) -> Result<Array3<f64>, TrainError> {
    Ok(loss_org_grad(eps, eps_hat, reduction)? + loss_ad_grad(eps, eps_hat, cfg, reduction)?)
}

/// Squared error on the first frame only.
pub fn first_frame_loss(eps: &Array3<f64>, eps_hat: &Array3<f64>, reduction: Reduction) -> Result<f64, TrainError> {
    check_same(eps, eps_hat)?;
    let a = eps.index_axis(Axis(0), 0).insert_axis(Axis(0)).to_owned();
    let b = eps_hat.index_axis(Axis(0), 0).insert_axis(Axis(0)).to_owned();
    Ok(squared_error(&a, &b, reduction))
}

pub fn first_frame_loss_grad(
    eps: &Array3<f64>,
    eps_hat: &Array3<f64>,
    reduction: Reduction,
) -> Result<Array3<f64>, TrainError> {
    check_same(eps, eps_hat)?;
    let n = eps.len() / eps.len_of(Axis(0)).max(1);
    let s = 2.0 * reduce_scale(n, reduction);
    let mut g = Array3::zeros(eps.dim());
    let diff = &eps_hat.index_axis(Axis(0), 0) - &eps.index_axis(Axis(0), 0);
    g.index_axis_mut(Axis(0), 0).assign(&(diff * s));
    Ok(g)
}

/// `V x c` token matrix as `frames x (h w) x c`.
pub fn to_frames(x: &Array2<f64>, grid: LatentGrid) -> Result<Array3<f64>, TrainError> {
    if x.nrows() != grid.token_count() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} rows for a {}-token grid",
            x.nrows(),
            grid.token_count()
        )));
    }
    let c = x.ncols();
    Ok(x.as_standard_layout()
        .to_owned()
        .into_shape_with_order((grid.t, grid.frame_tokens(), c))
        .expect("row count checked"))
}

pub fn from_frames(x: Array3<f64>) -> Array2<f64> {
    let (t, n, c) = x.dim();
    x.as_standard_layout()
        .to_owned()
        .into_shape_with_order((t * n, c))
        .expect("contiguous")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_org: f64,
    pub loss_ad: f64,
    pub loss_motion: f64,
}

pub fn write_log_jsonl<W: Write>(log: &[StepLog], w: &mut W) -> std::io::Result<()> {
    for rec in log {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainClip {
    /// `V x d_latent`
    pub latent: Array2<f64>,
    pub caption: String,
}

#[derive(Debug, Clone)]
pub struct MotionPrior {
    /// Shared temporal adapters, kept for inference.
    pub temporal: LoraSet,
    /// One spatial set per clip, discarded at inference.
    pub per_video_spatial: Vec<LoraSet>,
    pub log: Vec<StepLog>,
    /// Losses after the last update.
    pub final_loss: StepLog,
}

#[derive(Debug, Clone)]
pub struct SubjectPrior {
    pub adapters: LoraSet,
    pub log: Vec<StepLog>,
    pub final_loss: StepLog,
}

fn draw_noise(rng: &mut ChaCha8Rng, schedule: &NoiseSchedule, rows: usize, cols: usize) -> (usize, Array2<f64>) {
    let t = rng.gen_range(0..schedule.steps());
    let eps = Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng));
    (t, eps)
}

struct Objective {
    debias: DebiasConfig,
    reduction: Reduction,
    first_frame_only: bool,
    motion: bool,
}

impl Objective {
    fn eval(
        &self,
        eps: &Array3<f64>,
        eps_hat: &Array3<f64>,
        step: usize,
    ) -> Result<(StepLog, Array3<f64>), TrainError> {
        if self.first_frame_only {
            let l = first_frame_loss(eps, eps_hat, self.reduction)?;
            let g = first_frame_loss_grad(eps, eps_hat, self.reduction)?;
            return Ok((
                StepLog {
                    step,
                    loss_org: l,
                    loss_ad: 0.0,
                    loss_motion: l,
                },
                g,
            ));
        }
        let lo = loss_org(eps, eps_hat, self.reduction)?;
        let la = if self.motion {
            loss_ad(eps, eps_hat, &self.debias, self.reduction)?
        } else {
            0.0
        };
        let g = if self.motion {
            loss_motion_grad(eps, eps_hat, &self.debias, self.reduction)?
        } else {
            loss_org_grad(eps, eps_hat, self.reduction)?
        };
        Ok((
            StepLog {
                step,
                loss_org: lo,
                loss_ad: la,
                loss_motion: lo + la,
            },
            g,
        ))
    }
}

fn mean_logs(step: usize, logs: &[StepLog]) -> StepLog {
    let n = logs.len() as f64;
    StepLog {
        step,
        loss_org: logs.iter().map(|l| l.loss_org).sum::<f64>() / n,
        loss_ad: logs.iter().map(|l| l.loss_ad).sum::<f64>() / n,
        loss_motion: logs.iter().map(|l| l.loss_motion).sum::<f64>() / n,
    }
}

/// Gradient descent on the shared adapters `shared` plus one private set per
/// clip. Each clip's model input is `shared ++ private[i]`.
#[allow(clippy::too_many_arguments)]
fn optimize(
    model: &ToyDit,
    conds: &[Conditioning],
    latents: &[Array2<f64>],
    shared: &mut LoraSet,
    private: &mut [LoraSet],
    objective: &Objective,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Vec<StepLog>, StepLog), TrainError> {
    let grid = model.config().grid;
    let (v, c) = (grid.token_count(), model.config().d_latent);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a1e);
    let fixed: Vec<(usize, Array2<f64>)> = latents.iter().map(|_| draw_noise(&mut rng, schedule, v, c)).collect();
    let n_shared = shared.len();
    let n = latents.len() as f64;

    let mut run_step =
        |step: usize, shared: &mut LoraSet, private: &mut [LoraSet], update: bool| -> Result<StepLog, TrainError> {
            let mut shared_grad: Option<LoraGrads> = None;
            let mut logs = Vec::with_capacity(latents.len());
            for (i, z0) in latents.iter().enumerate() {
                let (t, eps) = match cfg.noise_mode {
                    NoiseMode::FixedPerClip => fixed[i].clone(),
                    NoiseMode::Resample => draw_noise(&mut rng, schedule, v, c),
                };
                let z_t = add_noise(z0, t, &eps, schedule)?;
                let mut set = shared.clone();
                set.extend(private[i].clone());
                let (out, cache) = model.forward_cached(&conds[i], &set, &z_t, t)?;
                let (log, g) = objective.eval(&to_frames(&eps, grid)?, &to_frames(&out, grid)?, step)?;
                logs.push(log);
                if !update {
                    continue;
                }
                let grads = model.backward(&conds[i], &set, &cache, &from_frames(g))?;
                let sg = LoraGrads {
                    a: grads.a[..n_shared].to_vec(),
                    b: grads.b[..n_shared].to_vec(),
                };
                let pg = LoraGrads {
                    a: grads.a[n_shared..].to_vec(),
                    b: grads.b[n_shared..].to_vec(),
                };
                pg.descend(&mut private[i], cfg.learning_rate / n);
                match &mut shared_grad {
                    Some(acc) => acc.add_assign(&sg),
                    None => shared_grad = Some(sg),
                }
            }
            if let Some(g) = shared_grad {
                g.descend(shared, cfg.learning_rate / n);
            }
            Ok(mean_logs(step, &logs))
        };

    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        log.push(run_step(step, shared, private, true)?);
    }
    let final_loss = run_step(cfg.steps, shared, private, false)?;
    Ok((log, final_loss))
}

fn check_clip(model: &ToyDit, latent: &Array2<f64>) -> Result<(), TrainError> {
    let want = (model.config().grid.token_count(), model.config().d_latent);
    if latent.dim() != want {
        return Err(TrainError::ShapeMismatch(format!(
            "clip is {:?}, model expects {want:?}",
            latent.dim()
        )));
    }
    Ok(())
}

/// Trains shared temporal adapters and per-clip spatial adapters on the
/// clips with the combined motion loss. The backbone is borrowed immutably.
pub fn train_motion_prior(
    clips: &[TrainClip],
    model: &ToyDit,
    placement: &PlacementPlan,
    cfg: &TrainConfig,
) -> Result<MotionPrior, TrainError> {
    if clips.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    for clip in clips {
        check_clip(model, &clip.latent)?;
    }
    let config = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut temporal = LoraSet::for_role(
        config,
        placement,
        LoraRole::Temporal,
        LoraKind::MotionTemporal,
        LoraTarget::Global,
        cfg.rank,
        &mut rng,
    )?;
    let mut spatial: Vec<LoraSet> = clips
        .iter()
        .map(|_| {
            LoraSet::for_role(
                config,
                placement,
                LoraRole::Spatial,
                LoraKind::MotionSpatialPerVideo,
                LoraTarget::Global,
                cfg.rank,
                &mut rng,
            )
        })
        .collect::<Result<_, _>>()?;
    let shared_caption = cfg.single_caption.clone().unwrap_or_else(|| clips[0].caption.clone());
    let conds: Vec<Conditioning> = clips
        .iter()
        .map(|clip| {
            let caption = match cfg.prompt_mode {
                PromptMode::PerVideo => clip.caption.as_str(),
                PromptMode::Single => shared_caption.as_str(),
            };
            Conditioning::caption_only(config, caption, cfg.mask_mode)
        })
        .collect::<Result<_, _>>()?;
    let latents: Vec<Array2<f64>> = clips.iter().map(|c| c.latent.clone()).collect();
    let objective = Objective {
        debias: cfg.debias,
        reduction: cfg.loss_reduction,
        first_frame_only: false,
        motion: true,
    };
    let schedule = NoiseSchedule::default();
    let (log, final_loss) = optimize(
        model,
        &conds,
        &latents,
        &mut temporal,
        &mut spatial,
        &objective,
        &schedule,
        cfg,
    )?;
    Ok(MotionPrior {
        temporal,
        per_video_spatial: spatial,
        log,
        final_loss,
    })
}

/// Repeats `reference` (`h w x d_latent`) over every latent frame and trains
/// spatial subject adapters, by default on the first frame's loss only.
pub fn train_subject_prior(
    reference: &Array2<f64>,
    caption: &str,
    model: &ToyDit,
    placement: &PlacementPlan,
    cfg: &TrainConfig,
) -> Result<SubjectPrior, TrainError> {
    let config = model.config();
    let grid = config.grid;
    if reference.dim() != (grid.frame_tokens(), config.d_latent) {
        return Err(TrainError::ShapeMismatch(format!(
            "reference is {:?}, expected ({}, {})",
            reference.dim(),
            grid.frame_tokens(),
            config.d_latent
        )));
    }
    let mut clip = Array2::zeros((grid.token_count(), config.d_latent));
    for f in 0..grid.t {
        clip.slice_mut(ndarray::s![f * grid.frame_tokens()..(f + 1) * grid.frame_tokens(), ..])
            .assign(reference);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adapters = LoraSet::for_role(
        config,
        placement,
        LoraRole::Spatial,
        LoraKind::Subject,
        LoraTarget::Global,
        cfg.rank,
        &mut rng,
    )?;
    let cond = Conditioning::caption_only(config, caption, cfg.mask_mode)?;
    let objective = Objective {
        debias: cfg.debias,
        reduction: cfg.loss_reduction,
        first_frame_only: cfg.first_frame_only,
        motion: false,
    };
    let schedule = NoiseSchedule::default();
    let mut private = [LoraSet::new()];
    let (log, final_loss) = optimize(
        model,
        &[cond],
        &[clip],
        &mut adapters,
        &mut private,
        &objective,
        &schedule,
        cfg,
    )?;
    Ok(SubjectPrior {
        adapters,
        log,
        final_loss,
    })
}

/// Latent clip of a square of side `size` moving `velocity` patches per
/// frame (wrapping). Channel 0 is +1 inside and -1 outside; higher channels
/// carry a fixed signed pattern inside the square.
pub fn moving_square_clip(
    grid: LatentGrid,
    d_latent: usize,
    start: (usize, usize),
    velocity: (isize, isize),
    size: usize,
) -> Array2<f64> {
    let mut x = Array2::zeros((grid.token_count(), d_latent));
    for f in 0..grid.t {
        let r0 = (start.0 as isize + velocity.0 * f as isize).rem_euclid(grid.h as isize) as usize;
        let c0 = (start.1 as isize + velocity.1 * f as isize).rem_euclid(grid.w as isize) as usize;
        for r in 0..grid.h {
            for c in 0..grid.w {
                let dr = (r + grid.h - r0) % grid.h;
                let dc = (c + grid.w - c0) % grid.w;
                let inside = dr < size && dc < size;
                let idx = grid.token_index(f, r, c);
                for ch in 0..d_latent {
                    x[[idx, ch]] = match (ch, inside) {
                        (0, true) => 1.0,
                        (0, false) => -1.0,
                        (_, true) => {
                            if ch % 2 == 0 {
                                0.5
                            } else {
                                -0.5
                            }
                        }
                        (_, false) => 0.0,
                    };
                }
            }
        }
    }
    x
}

/// `n` moving-square clips with distinct directions and captions.
pub fn moving_square_clips(grid: LatentGrid, d_latent: usize, n: usize) -> Vec<TrainClip> {
    const DIRS: [((isize, isize), &str); 4] = [((0, 1), "right"), ((1, 0), "down"), ((0, -1), "left"), ((-1, 0), "up")];
    (0..n)
        .map(|i| {
            let (vel, name) = DIRS[i % DIRS.len()];
            let start = (i % grid.h, (2 * i) % grid.w);
            TrainClip {
                latent: moving_square_clip(grid, d_latent, start, vel, 1 + grid.h.min(grid.w) / 3),
                caption: format!("a square moving {name} clip {i}"),
            }
        })
        .collect()
}
