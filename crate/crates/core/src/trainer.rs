//! Two-stage denoiser training.
//!
//! Stage 1 fits the image model on single latent frames with their class
//! prompts. Stage 2 freezes those weights, inserts temporal blocks and a
//! class embedding, and trains only the new parameters on 16-frame latent
//! clips, either one model per under-represented class or one shared model.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointKind, CheckpointManifest};
use crate::codec::{Codec, CodecSpec, LatentScaling};
use crate::conditioning::{ClassRegistry, ConditioningContext, Vocabulary};
use crate::dataset::{window_starts, Video};
use crate::denoiser::{DenoiseMode, Denoiser, DenoiserConfig, FreezeReport};
use crate::diffusion::{training_loss, NoiseSchedule, ScheduleSpec};
use crate::error::{invalid, Error, Result};
use crate::nn::{scalar_f64, Adam, ParamStore};

/// Clip length the temporal stage is defined for.
pub const CLIP_LENGTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub clip_length: usize,
    /// Stride between stage-2 training windows within a video.
    pub window_stride: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Probability of replacing the prompt (and class) with the null token.
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-4,
            steps: 1000,
            clip_length: CLIP_LENGTH,
            window_stride: 1,
            seed: 0,
            grad_clip: Some(1.0),
            cond_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(invalid!("batch size and step count must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(invalid!("conditioning dropout must lie in [0, 1)"));
        }
        if self.window_stride == 0 {
            return Err(invalid!("window stride must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Mode {
    /// One model per under-represented class.
    PerClass,
    /// One label-conditioned model over all classes.
    Shared,
}

/// Everything needed to rebuild a denoiser from its parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub config: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub codec: CodecSpec,
    pub scaling: LatentScaling,
    pub vocab: Vocabulary,
    pub registry: ClassRegistry,
    pub registry_hash: String,
    /// Latent (h, w) the model was trained at.
    pub latent_size: (usize, usize),
    /// Class a per-class stage-2 model was trained for.
    pub class_label: Option<usize>,
    pub freeze: Option<FreezeReport>,
    pub train: TrainConfig,
}

/// A trained denoiser: parameters, stage and metadata.
pub struct DenoiserCheckpoint {
    pub kind: CheckpointKind,
    pub meta: DenoiserMeta,
    pub store: ParamStore,
    pub seed: u64,
}

impl DenoiserCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<CheckpointManifest> {
        checkpoint::save(dir, self.kind, &self.store, self.seed, &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, store) = checkpoint::load(dir)?;
        if !matches!(manifest.kind, CheckpointKind::Stage1 | CheckpointKind::Stage2) {
            return Err(Error::Config(format!(
                "{} holds a {:?} checkpoint, not a denoiser",
                dir.display(),
                manifest.kind
            )));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.metadata_as()?,
            store,
            seed: manifest.seed,
        })
    }

    /// Rebuild the model over this checkpoint's parameters.
    pub fn model(&mut self) -> Result<Denoiser> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = self.meta.vocab.clone();
        match self.kind {
            CheckpointKind::Stage2 => Denoiser::spatiotemporal(&mut self.store, &mut rng, &self.meta.config, vocab),
            _ => Denoiser::spatial(&mut self.store, &mut rng, &self.meta.config, vocab),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_spec(self.meta.schedule)
    }

    pub fn mode(&self) -> DenoiseMode {
        match self.kind {
            CheckpointKind::Stage2 => DenoiseMode::Spatiotemporal,
            _ => DenoiseMode::SpatialOnly,
        }
    }
}

/// Standardized latents of one video, (lc, f, lh, lw).
#[derive(Debug, Clone)]
pub struct LatentVideo {
    pub label: usize,
    pub latents: Tensor,
}

pub fn encode_videos(codec: &Codec, videos: &[&Video], dtype: DType) -> Result<Vec<LatentVideo>> {
    videos
        .iter()
        .map(|v| {
            let clip = v.clip_tensor(0, v.frames)?.unsqueeze(0)?.to_dtype(dtype)?;
            let z = codec.encode_clip_for_diffusion(&clip)?.squeeze(0)?;
            Ok(LatentVideo {
                label: v.label,
                latents: z,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f32>,
    pub grad_norms: Vec<f32>,
}

impl TrainReport {
    fn window_mean(v: &[f32]) -> f64 {
        v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64
    }

    /// Mean loss over the first 10% of steps.
    pub fn initial_mean(&self) -> f64 {
        let n = (self.losses.len() / 10).max(1);
        Self::window_mean(&self.losses[..n.min(self.losses.len())])
    }

    /// Mean loss over the last 10% of steps.
    pub fn final_mean(&self) -> f64 {
        let n = (self.losses.len() / 10).max(1);
        Self::window_mean(&self.losses[self.losses.len().saturating_sub(n)..])
    }
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// One noised training batch.
pub struct DiffusionBatch {
    pub z0: Tensor,
    pub ts: Vec<usize>,
    pub eps: Tensor,
    pub ctx: Vec<ConditioningContext>,
}

impl DiffusionBatch {
    /// Draw timesteps and noise for clean latents `z0` (b, c, f, h, w).
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        z0: Tensor,
        ctx: Vec<ConditioningContext>,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        let b = z0.dim(0)?;
        let ts = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
        let eps = normal_tensor(rng, z0.dims(), z0.dtype())?;
        Ok(Self { z0, ts, eps, ctx })
    }

    /// Diffusion loss of `model` on this batch.
    pub fn loss(&self, model: &Denoiser, sched: &NoiseSchedule, mode: DenoiseMode) -> Result<Tensor> {
        let param = model.config().parameterization;
        let z_t = sched.forward_diffuse_batch(&self.z0, &self.ts, &self.eps)?;
        let target = sched.make_target_batch(&self.z0, &self.eps, &self.ts, param)?;
        let pred = model.forward(&z_t, &self.ts, &self.ctx, mode)?;
        training_loss(&pred, &target)
    }

    /// Loss of the constant-zero predictor: the mean square of the target.
    pub fn zero_predictor_loss(&self, sched: &NoiseSchedule, model: &Denoiser) -> Result<f64> {
        let target = sched.make_target_batch(&self.z0, &self.eps, &self.ts, model.config().parameterization)?;
        scalar_f64(&target.target.sqr()?.mean_all()?)
    }
}

fn context_for<R: Rng + ?Sized>(
    rng: &mut R,
    registry: &ClassRegistry,
    vocab: &Vocabulary,
    label: usize,
    with_label: bool,
    dropout: f64,
) -> Result<ConditioningContext> {
    let prompt = registry.prompt_for(label)?;
    let ctx = ConditioningContext::new(vocab, &prompt, with_label.then_some(label));
    if dropout > 0.0 && rng.random::<f64>() < dropout {
        Ok(ctx.dropped(vocab, registry.len()))
    } else {
        Ok(ctx)
    }
}

fn run_steps(
    model: &Denoiser,
    store: &ParamStore,
    cfg: &TrainConfig,
    mut next_batch: impl FnMut(usize) -> Result<DiffusionBatch>,
    sched: &NoiseSchedule,
    mode: DenoiseMode,
    stage: &str,
) -> Result<TrainReport> {
    let mut opt = Adam::new(store.trainable_vars(), cfg.learning_rate, cfg.grad_clip)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grad_norms = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = next_batch(step)?;
        let loss = batch.loss(model, sched, mode)?;
        let lv = scalar_f64(&loss)?;
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("{stage} loss is {lv} at step {step}")));
        }
        let norm = opt
            .backward_step(&loss)
            .map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("{stage} step {step}: {m}")),
                other => other,
            })?;
        losses.push(lv as f32);
        grad_norms.push(norm as f32);
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::debug!("{stage} step {step}: loss {lv:.5}, grad norm {norm:.4}");
        }
    }
    Ok(TrainReport { losses, grad_norms })
}

/// Inputs shared by both stages.
pub struct TrainSetup<'a> {
    pub config: &'a DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub codec: &'a Codec,
    pub registry: &'a ClassRegistry,
    pub vocab: &'a Vocabulary,
}

/// Fit the image model on single frames sampled uniformly: a video first,
/// then a frame within it.
pub fn train_stage1(
    setup: &TrainSetup<'_>,
    videos: &[LatentVideo],
    cfg: &TrainConfig,
    dtype: DType,
) -> Result<(DenoiserCheckpoint, TrainReport)> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(invalid!("stage-1 dataset is empty"));
    }
    let sched = NoiseSchedule::from_spec(setup.schedule)?;
    let (_, _, lh, lw) = videos[0].latents.dims4()?;
    let mut store = ParamStore::new(dtype);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Denoiser::spatial(&mut store, &mut init_rng, setup.config, setup.vocab.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let report = run_steps(
        &model,
        &store,
        cfg,
        |_| {
            let mut frames = Vec::with_capacity(cfg.batch_size);
            let mut ctx = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let v = &videos[rng.random_range(0..videos.len())];
                let f = rng.random_range(0..v.latents.dim(1)?);
                frames.push(v.latents.narrow(1, f, 1)?.to_dtype(dtype)?);
                ctx.push(context_for(&mut rng, setup.registry, setup.vocab, v.label, false, cfg.cond_dropout)?);
            }
            DiffusionBatch::sample(&mut rng, Tensor::stack(&frames, 0)?, ctx, &sched)
        },
        &sched,
        DenoiseMode::SpatialOnly,
        "stage 1",
    )?;
    let meta = DenoiserMeta {
        config: setup.config.clone(),
        schedule: setup.schedule,
        codec: setup.codec.spec(),
        scaling: setup.codec.scaling(),
        vocab: setup.vocab.clone(),
        registry: setup.registry.clone(),
        registry_hash: setup.registry.hash(),
        latent_size: (lh, lw),
        class_label: None,
        freeze: None,
        train: cfg.clone(),
    };
    Ok((
        DenoiserCheckpoint {
            kind: CheckpointKind::Stage1,
            meta,
            store,
            seed: cfg.seed,
        },
        report,
    ))
}

/// Windows of `len` frames from the given latent videos.
pub fn latent_windows(videos: &[&LatentVideo], len: usize, stride: usize) -> Result<Vec<(usize, Tensor)>> {
    let mut out = Vec::new();
    for v in videos {
        let f = v.latents.dim(1)?;
        for s in window_starts(f, len, stride) {
            out.push((v.label, v.latents.narrow(1, s, len)?));
        }
    }
    Ok(out)
}

/// Stage-2 model and optimizer state before any step, so the bootstrap
/// identity can be probed directly.
pub fn prepare_stage2(stage1: &DenoiserCheckpoint, seed: u64) -> Result<(Denoiser, ParamStore, FreezeReport)> {
    if stage1.kind != CheckpointKind::Stage1 {
        return Err(invalid!("stage 2 starts from a stage-1 checkpoint, got {:?}", stage1.kind));
    }
    let mut store = stage1.store.deep_clone(stage1.store.dtype())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Denoiser::spatial(&mut store, &mut rng, &stage1.meta.config, stage1.meta.vocab.clone())?;
    let (model, report) = base.freeze_spatial(&mut store, &mut rng)?;
    Ok((model, store, report))
}

/// Train the temporal extension. With `class_label = Some(l)` only videos of
/// class `l` are used (per-class mode); with `None` all videos are used and
/// the model is shared across classes.
pub fn train_stage2(
    stage1: &DenoiserCheckpoint,
    videos: &[LatentVideo],
    class_label: Option<usize>,
    cfg: &TrainConfig,
) -> Result<(DenoiserCheckpoint, TrainReport)> {
    cfg.validate()?;
    if cfg.clip_length != CLIP_LENGTH {
        return Err(invalid!(
            "stage 2 trains on {CLIP_LENGTH}-frame clips, config asks for {}",
            cfg.clip_length
        ));
    }
    let num_classes = stage1.meta.registry.len();
    if let Some(l) = class_label {
        if l >= num_classes {
            return Err(invalid!("class {l} out of range"));
        }
    }
    let chosen: Vec<&LatentVideo> = videos
        .iter()
        .filter(|v| class_label.is_none_or(|l| v.label == l))
        .collect();
    let windows = latent_windows(&chosen, CLIP_LENGTH, cfg.window_stride)?;
    if windows.is_empty() {
        return Err(invalid!(
            "no {CLIP_LENGTH}-frame clips available for class {class_label:?}"
        ));
    }
    let sched = NoiseSchedule::from_spec(stage1.meta.schedule)?;
    let dtype = stage1.store.dtype();
    let (model, store, freeze) = prepare_stage2(stage1, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2545_f491_4f6c_dd1d);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut cursor = order.len();
    let registry = &stage1.meta.registry;
    let vocab = &stage1.meta.vocab;
    let report = run_steps(
        &model,
        &store,
        cfg,
        |_| {
            let mut clips = Vec::with_capacity(cfg.batch_size);
            let mut ctx = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let (label, clip) = &windows[order[cursor]];
                cursor += 1;
                clips.push(clip.to_dtype(dtype)?);
                ctx.push(context_for(&mut rng, registry, vocab, *label, true, cfg.cond_dropout)?);
            }
            DiffusionBatch::sample(&mut rng, Tensor::stack(&clips, 0)?, ctx, &sched)
        },
        &sched,
        DenoiseMode::Spatiotemporal,
        "stage 2",
    )?;
    let mut meta = stage1.meta.clone();
    meta.class_label = class_label;
    meta.freeze = Some(freeze);
    meta.train = cfg.clone();
    Ok((
        DenoiserCheckpoint {
            kind: CheckpointKind::Stage2,
            meta,
            store,
            seed: cfg.seed,
        },
        report,
    ))
}
