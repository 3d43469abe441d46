//! Reverse-process sampling: deterministic DDIM and ancestral updates over a
//! strided timestep sequence, guided prediction, and clip generation from a
//! stage-2 checkpoint.

use std::path::Path;
use std::str::FromStr;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointKind;
use crate::codec::Codec;
use crate::conditioning::ConditioningContext;
use crate::dataset::derive_seed;
use crate::denoiser::DenoiseMode;
use crate::diffusion::{NoiseSchedule, Parameterization};
use crate::error::{invalid, Error, Result};
use crate::io::{read_json, write_frames, write_json};
use crate::nn::to_vec_f32;
use crate::trainer::{normal_tensor, DenoiserCheckpoint, CLIP_LENGTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddim,
    Ancestral,
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "ancestral" => Ok(Self::Ancestral),
            other => Err(invalid!("unknown sampler {other:?}")),
        }
    }
}

/// A model output tagged with what it predicts.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub value: Tensor,
    pub parameterization: Parameterization,
}

/// Descending timesteps `tau_S > ... > tau_1`, `tau_i = round(i T / S)`.
/// Each step goes from `tau_i` to `tau_{i-1}`, with `tau_0 = 0`.
pub fn timestep_sequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(invalid!("sampling steps must lie in 1..={total}, got {steps}"));
    }
    let mut ts: Vec<usize> = (1..=steps)
        .map(|i| ((i as f64) * total as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// One reverse update from `t` to `t_prev < t`.
///
/// Both kinds first recover `(z0_hat, eps_hat)` from the prediction. DDIM
/// moves deterministically to `sqrt(ab_prev) z0_hat + sqrt(1 - ab_prev)
/// eps_hat`. Ancestral sampling draws from the Gaussian posterior
/// `q(z_prev | z_t, z0_hat)` whose variance is the posterior variance of
/// the effective step `beta = 1 - ab_t / ab_prev`; it is zero when
/// `t_prev = 0`, so `noise` is only required for intermediate steps.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    prediction: &Prediction,
    expected: Parameterization,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if t == 0 {
        return Err(invalid!("cannot step backwards from t = 0"));
    }
    if t_prev >= t || t > sched.steps() {
        return Err(invalid!("invalid reverse step {t} -> {t_prev}"));
    }
    if prediction.parameterization != expected {
        return Err(invalid!(
            "prediction is in {} parameterization, sampler expects {expected}",
            prediction.parameterization
        ));
    }
    let b = z_t.dim(0)?;
    let (z0, eps) = sched.split_prediction(z_t, &vec![t; b], &prediction.value, expected)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    match kind {
        SamplerKind::Ddim => Ok(((z0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?),
        SamplerKind::Ancestral => {
            let beta = 1.0 - ab_t / ab_prev;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            let mean = ((z0 * c0)? + (z_t * ct)?)?;
            let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
            if var <= 0.0 {
                return Ok(mean);
            }
            let noise = noise.ok_or_else(|| invalid!("ancestral step {t} -> {t_prev} needs noise"))?;
            Ok((mean + (noise * var.sqrt())?)?)
        }
    }
}

/// Run the full reverse trajectory from `z_t` at time `T`.
///
/// `predict(z, t)` returns the model output; `noise()` supplies fresh noise
/// of the latent's shape for ancestral steps.
pub fn sample_loop(
    z_start: Tensor,
    sched: &NoiseSchedule,
    steps: usize,
    kind: SamplerKind,
    parameterization: Parameterization,
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    mut noise: impl FnMut() -> Result<Tensor>,
) -> Result<Tensor> {
    let ts = timestep_sequence(sched.steps(), steps)?;
    let mut z = z_start;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let pred = Prediction {
            value: predict(&z, t)?,
            parameterization,
        };
        let n = if kind == SamplerKind::Ancestral && t_prev > 0 {
            Some(noise()?)
        } else {
            None
        };
        // Detach so the autograd history of trainable weights is not kept
        // across steps.
        z = reverse_step(&z, t, t_prev, &pred, parameterization, sched, kind, n.as_ref())?.detach();
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub class_label: usize,
    /// Defaults to the registry prompt of the class.
    pub prompt: Option<String>,
    pub num_clips: usize,
    pub steps: usize,
    pub kind: SamplerKind,
    /// 1 disables guidance.
    pub guidance_scale: f64,
    pub seed: u64,
    /// Clips denoised together per forward pass.
    pub batch_size: usize,
}

impl SampleRequest {
    pub fn new(class_label: usize, num_clips: usize, seed: u64) -> Self {
        Self {
            class_label,
            prompt: None,
            num_clips,
            steps: 50,
            kind: SamplerKind::Ddim,
            guidance_scale: 1.0,
            seed,
            batch_size: 8,
        }
    }
}

/// Seed of clip `i` in a request.
pub fn clip_seed(base: u64, i: usize) -> u64 {
    derive_seed(base, &format!("clip/{i}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedClip {
    pub label: usize,
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub kind: SamplerKind,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Frame-major (f, c, h, w) pixels in [0, 1].
    pub data: Vec<f32>,
}

impl GeneratedClip {
    /// Mean over pixels of the per-pixel variance across frames.
    pub fn temporal_variance(&self) -> f64 {
        let n = self.channels * self.height * self.width;
        let f = self.frames as f64;
        let mut total = 0.0;
        for p in 0..n {
            let vals = (0..self.frames).map(|t| self.data[t * n + p] as f64);
            let mean = vals.clone().sum::<f64>() / f;
            total += vals.map(|v| (v - mean).powi(2)).sum::<f64>() / f;
        }
        total / n as f64
    }
}

/// Classifier-free guidance combination; scale 1 returns `cond` unchanged.
pub fn guide(cond: &Tensor, uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    Ok((uncond + ((cond - uncond)? * scale)?)?)
}

/// Generate pixel clips of the requested class from a stage-2 checkpoint.
pub fn generate(ckpt: &mut DenoiserCheckpoint, codec: &Codec, req: &SampleRequest) -> Result<Vec<GeneratedClip>> {
    if ckpt.kind != CheckpointKind::Stage2 {
        return Err(invalid!(
            "generation needs a stage-2 checkpoint with temporal blocks, got {:?}",
            ckpt.kind
        ));
    }
    if req.guidance_scale < 1.0 {
        return Err(invalid!("guidance scale must be >= 1"));
    }
    let registry = ckpt.meta.registry.clone();
    if req.class_label >= registry.len() {
        return Err(invalid!("class {} out of range", req.class_label));
    }
    if let Some(l) = ckpt.meta.class_label {
        if l != req.class_label {
            return Err(invalid!("checkpoint was trained for class {l}, request asks for {}", req.class_label));
        }
    }
    let sched = ckpt.schedule()?;
    let param = ckpt.meta.config.parameterization;
    let (lh, lw) = ckpt.meta.latent_size;
    let lc = ckpt.meta.config.latent_channels;
    let dtype = ckpt.store.dtype();
    let vocab = ckpt.meta.vocab.clone();
    let model = ckpt.model()?;
    let prompt = match &req.prompt {
        Some(p) => p.clone(),
        None => registry.prompt_for(req.class_label)?,
    };
    let ctx = ConditioningContext::new(&vocab, &prompt, Some(req.class_label));
    let null = ctx.dropped(&vocab, registry.len());
    let mut codec = codec.clone();
    codec.set_scaling(ckpt.meta.scaling);

    let mut out = Vec::with_capacity(req.num_clips);
    let batch = req.batch_size.max(1);
    let mut start = 0;
    while start < req.num_clips {
        let n = batch.min(req.num_clips - start);
        let seeds: Vec<u64> = (start..start + n).map(|i| clip_seed(req.seed, i)).collect();
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let shape = [1, lc, CLIP_LENGTH, lh, lw];
        let draw = |rngs: &mut Vec<ChaCha8Rng>| -> Result<Tensor> {
            let parts = rngs
                .iter_mut()
                .map(|r| normal_tensor(r, &shape, dtype))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&parts, 0)?)
        };
        let z_start = draw(&mut rngs)?;
        let ctxs = vec![ctx.clone(); n];
        let nulls = vec![null.clone(); n];
        let rngs_cell = std::cell::RefCell::new(rngs);
        let z0 = sample_loop(
            z_start,
            &sched,
            req.steps,
            req.kind,
            param,
            |z, t| {
                let ts = vec![t; n];
                let cond = model.forward(z, &ts, &ctxs, DenoiseMode::Spatiotemporal)?;
                if req.guidance_scale == 1.0 {
                    // Unguided path: no unconditional pass.
                    return Ok(cond);
                }
                let uncond = model.forward(z, &ts, &nulls, DenoiseMode::Spatiotemporal)?;
                guide(&cond, &uncond, req.guidance_scale)
            },
            || draw(&mut rngs_cell.borrow_mut()),
        )?;
        let video = codec.decode_clip_from_diffusion(&z0)?;
        let (_, c, f, h, w) = video.dims5()?;
        for (j, &seed) in seeds.iter().enumerate() {
            let clip = video.narrow(0, j, 1)?.squeeze(0)?.permute((1, 0, 2, 3))?.contiguous()?;
            let data = to_vec_f32(&clip)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("clip with seed {seed} contains non-finite pixels")));
            }
            out.push(GeneratedClip {
                label: req.class_label,
                prompt: prompt.clone(),
                seed,
                steps: req.steps,
                kind: req.kind,
                frames: f,
                channels: c,
                height: h,
                width: w,
                data,
            });
        }
        start += n;
    }
    Ok(out)
}

pub const CLIP_MANIFEST: &str = "clips.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    /// Frame directory relative to the manifest.
    pub path: String,
    pub label: usize,
    pub class_name: String,
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub sampler: SamplerKind,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub clips: Vec<ClipRecord>,
}

/// Write clips as PNG frame directories plus a clip manifest.
pub fn write_clips(dir: &Path, clips: &[GeneratedClip], class_names: &dyn Fn(usize) -> String) -> Result<ClipManifest> {
    let mut records = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let rel = format!("clip_{:03}_{i:04}", c.label);
        write_frames(&dir.join(&rel), &c.data, c.frames, c.channels, c.height, c.width)?;
        records.push(ClipRecord {
            path: rel,
            label: c.label,
            class_name: class_names(c.label),
            prompt: c.prompt.clone(),
            seed: c.seed,
            steps: c.steps,
            sampler: c.kind,
            frames: c.frames,
        });
    }
    let manifest = ClipManifest { clips: records };
    write_json(&dir.join(CLIP_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_clip_manifest(path: &Path) -> Result<ClipManifest> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("missing synthetic manifest {}", path.display())));
    }
    read_json(path)
}
