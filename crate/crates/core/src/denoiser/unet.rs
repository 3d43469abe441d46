use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::temporal::{TemporalBlock, TemporalBlockConfig};
use super::video::VideoTensor;
use super::{DenoiseMode, DenoiserConfig};
use crate::conditioning::{ConditioningContext, TextEncoder, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::nn::{softmax_last, upsample2x, Conv2d, GroupNorm, Init, Linear, ParamStore};

/// Names of parameters that belong to the temporal extension.
pub fn is_temporal_param(name: &str) -> bool {
    name.contains(".temporal.") || name.starts_with("class_embed.")
}

/// Sinusoidal embedding of integer timesteps, (b, dim).
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; ts.len() * dim];
    for (i, &t) in ts.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64).ln() * j as f64 / half as f64).exp();
            out[i * dim + j] = (t as f64 * freq).sin();
            out[i * dim + half + j] = (t as f64 * freq).cos();
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        emb_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, rng, &format!("{name}.norm1"), in_c, groups)?,
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), in_c, out_c, 3, 1, 1)?,
            emb: Linear::new(store, rng, &format!("{name}.emb"), emb_dim, out_c)?,
            norm2: GroupNorm::new(store, rng, &format!("{name}.norm2"), out_c, groups)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1)?,
            skip: if in_c != out_c {
                Some(Conv2d::new(store, rng, &format!("{name}.skip"), in_c, out_c, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let (n, c, _, _) = h.dims4()?;
        let e = self.emb.forward(&emb.silu()?)?.reshape((n, c, 1, 1))?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Spatial tokens attend to the prompt tokens.
#[derive(Debug, Clone)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    channels: usize,
}

impl CrossAttention {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        text_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        let c = channels;
        Ok(Self {
            norm: GroupNorm::new(store, rng, &format!("{name}.norm"), c, groups)?,
            q: Linear::with_init(store, rng, &format!("{name}.q"), c, c, Init::fan_in(c), false)?,
            k: Linear::with_init(store, rng, &format!("{name}.k"), text_dim, c, Init::fan_in(text_dim), false)?,
            v: Linear::with_init(store, rng, &format!("{name}.v"), text_dim, c, Init::fan_in(text_dim), false)?,
            out: Linear::new(store, rng, &format!("{name}.out"), c, c)?,
            channels,
        })
    }

    /// `x` is (n, c, h, w), `text` is (n, tokens, text_dim).
    fn forward(&self, x: &Tensor, text: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((n, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = self.q.forward(&tokens)?;
        let k = self.k.forward(text)?;
        let v = self.v.forward(text)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (self.channels as f64).sqrt())?;
        let attn = softmax_last(&scores)?.matmul(&v)?;
        let o = self
            .out
            .forward(&attn)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, c, h, w))?;
        Ok((x + o)?)
    }
}

#[derive(Debug, Clone)]
struct SpatialLayer {
    res: ResBlock,
    xattn: CrossAttention,
}

impl SpatialLayer {
    fn forward(&self, x: &Tensor, emb: &Tensor, text: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, emb)?;
        self.xattn.forward(&h, text)
    }
}

#[derive(Debug, Clone)]
struct TemporalExtension {
    down: Vec<TemporalBlock>,
    up: Vec<TemporalBlock>,
    /// (num_classes + 1, embed_dim); the last row is the null class.
    class_embed: Tensor,
}

/// Summary of a freeze operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
    pub trainable_count: usize,
}

/// Text-conditioned U-Net over latent frames with optional temporal blocks.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    text: TextEncoder,
    time_fc1: Linear,
    time_fc2: Linear,
    conv_in: Conv2d,
    down: Vec<SpatialLayer>,
    downsample: Vec<Conv2d>,
    up: Vec<SpatialLayer>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    temporal: Option<TemporalExtension>,
}

impl Denoiser {
    /// Image (stage-1) model.
    pub fn spatial<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &DenoiserConfig,
        vocab: Vocabulary,
    ) -> Result<Self> {
        Self::build(store, rng, cfg, vocab, false)
    }

    /// Image model plus temporal blocks and class embedding (stage 2).
    pub fn spatiotemporal<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &DenoiserConfig,
        vocab: Vocabulary,
    ) -> Result<Self> {
        Self::build(store, rng, cfg, vocab, true)
    }

    fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &DenoiserConfig,
        vocab: Vocabulary,
        temporal: bool,
    ) -> Result<Self> {
        if cfg.widths.is_empty() {
            return Err(invalid!("denoiser needs at least one resolution level"));
        }
        if vocab.size != cfg.vocab_size || vocab.max_tokens != cfg.max_tokens {
            return Err(invalid!("vocabulary does not match the denoiser config"));
        }
        let g = cfg.max_groups;
        let emb_dim = cfg.embed_dim();
        let text = TextEncoder::new(store, rng, vocab, cfg.text_dim)?;
        let time_fc1 = Linear::new(store, rng, "time.fc1", cfg.time_dim(), emb_dim)?;
        let time_fc2 = Linear::new(store, rng, "time.fc2", emb_dim, emb_dim)?;
        let w = &cfg.widths;
        let conv_in = Conv2d::new(store, rng, "unet.conv_in", cfg.latent_channels, w[0], 3, 1, 1)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for (i, &wi) in w.iter().enumerate() {
            let in_c = if i == 0 { w[0] } else { w[i - 1] };
            let name = format!("unet.down.{i}");
            down.push(SpatialLayer {
                res: ResBlock::new(store, rng, &format!("{name}.res"), in_c, wi, emb_dim, g)?,
                xattn: CrossAttention::new(store, rng, &format!("{name}.xattn"), wi, cfg.text_dim, g)?,
            });
            if i + 1 < w.len() {
                downsample.push(Conv2d::new(store, rng, &format!("{name}.downsample"), wi, wi, 3, 2, 1)?);
            }
        }
        let mut up = Vec::new();
        for i in (0..w.len() - 1).rev() {
            let name = format!("unet.up.{i}");
            let in_c = w[i + 1] + w[i];
            up.push(SpatialLayer {
                res: ResBlock::new(store, rng, &format!("{name}.res"), in_c, w[i], emb_dim, g)?,
                xattn: CrossAttention::new(store, rng, &format!("{name}.xattn"), w[i], cfg.text_dim, g)?,
            });
        }
        let norm_out = GroupNorm::new(store, rng, "unet.norm_out", w[0], g)?;
        let conv_out = Conv2d::new(store, rng, "unet.conv_out", w[0], cfg.latent_channels, 3, 1, 1)?;

        let temporal = if temporal {
            let block_cfg = |c| TemporalBlockConfig {
                channels: c,
                heads: cfg.temporal_heads,
                mlp_ratio: cfg.mlp_ratio,
                max_frames: cfg.frames,
                positional_encoding: cfg.positional_encoding,
            };
            let mut tdown = Vec::new();
            for (i, &wi) in w.iter().enumerate() {
                tdown.push(TemporalBlock::new(store, rng, &format!("unet.down.{i}.temporal"), block_cfg(wi))?);
            }
            let mut tup = Vec::new();
            for i in (0..w.len() - 1).rev() {
                tup.push(TemporalBlock::new(store, rng, &format!("unet.up.{i}.temporal"), block_cfg(w[i]))?);
            }
            let class_embed = store.get(
                "class_embed.table",
                &[cfg.num_classes + 1, emb_dim],
                Init::Zeros,
                rng,
            )?;
            Some(TemporalExtension {
                down: tdown,
                up: tup,
                class_embed,
            })
        } else {
            None
        };

        Ok(Self {
            cfg: cfg.clone(),
            text,
            time_fc1,
            time_fc2,
            conv_in,
            down,
            downsample,
            up,
            norm_out,
            conv_out,
            temporal,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.text.vocab()
    }

    pub fn has_temporal(&self) -> bool {
        self.temporal.is_some()
    }

    /// Freeze every parameter currently in `store` (the stage-1 weights) and
    /// rebuild the model with fresh, trainable temporal blocks and class
    /// embedding.
    pub fn freeze_spatial<R: Rng + ?Sized>(
        self,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<(Self, FreezeReport)> {
        if !store.contains("unet.conv_in.weight") {
            return Err(Error::MissingArtifact(
                "stage-1 weights must be loaded before freezing".into(),
            ));
        }
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in &names {
            if !is_temporal_param(n) {
                store.set_frozen(n, true)?;
            }
        }
        let vocab = self.text.vocab().clone();
        let model = Self::spatiotemporal(store, rng, &self.cfg, vocab)?;
        let report = FreezeReport {
            frozen: store.frozen_names(),
            trainable: store.trainable_names(),
            trainable_count: store.trainable_count(),
        };
        Ok((model, report))
    }

    fn embeddings(
        &self,
        ts: &[usize],
        ctx: &[ConditioningContext],
        mode: DenoiseMode,
        dtype: candle_core::DType,
        device: &candle_core::Device,
    ) -> Result<(Tensor, Tensor)> {
        let b = ts.len();
        let t_emb = Tensor::from_vec(timestep_embedding(ts, self.cfg.time_dim()), (b, self.cfg.time_dim()), device)?
            .to_dtype(dtype)?;
        let mut emb = self.time_fc2.forward(&self.time_fc1.forward(&t_emb)?.silu()?)?;
        if mode == DenoiseMode::Spatiotemporal {
            let ext = self
                .temporal
                .as_ref()
                .ok_or_else(|| invalid!("spatiotemporal mode needs temporal blocks"))?;
            let mut labels = Vec::with_capacity(b);
            for c in ctx {
                let l = c
                    .class_label
                    .ok_or_else(|| invalid!("spatiotemporal mode needs a class label for every clip"))?;
                if l > self.cfg.num_classes {
                    return Err(invalid!("class label {l} out of range"));
                }
                labels.push(l as u32);
            }
            let idx = Tensor::from_vec(labels, b, device)?;
            emb = (emb + ext.class_embed.index_select(&idx, 0)?)?;
        }
        let rows: Vec<Vec<u32>> = ctx.iter().map(|c| c.token_ids.clone()).collect();
        let text = self.text.embed_batch(&rows)?;
        Ok((emb, text))
    }

    /// Predict the model target for a batch of latent clips (b, c, f, h, w).
    pub fn forward(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        ctx: &[ConditioningContext],
        mode: DenoiseMode,
    ) -> Result<Tensor> {
        let clip = VideoTensor::clip(z_t.clone())?;
        let d = clip.dims();
        if ts.len() != d.b || ctx.len() != d.b {
            return Err(Error::Shape(format!(
                "{} clips but {} timesteps and {} contexts",
                d.b,
                ts.len(),
                ctx.len()
            )));
        }
        if d.c != self.cfg.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {} channels, model expects {}",
                d.c, self.cfg.latent_channels
            )));
        }
        let m = self.cfg.spatial_multiple();
        if d.h % m != 0 || d.w % m != 0 {
            return Err(Error::Shape(format!("spatial size {}x{} not divisible by {m}", d.h, d.w)));
        }
        let (emb, text) = self.embeddings(ts, ctx, mode, z_t.dtype(), z_t.device())?;
        // Every frame of clip i sees clip i's embeddings.
        let rows: Vec<u32> = (0..d.b).flat_map(|i| std::iter::repeat_n(i as u32, d.f)).collect();
        let rows = Tensor::from_vec(rows, d.b * d.f, z_t.device())?;
        let emb = emb.index_select(&rows, 0)?;
        let text = text.index_select(&rows, 0)?;

        let temporal = match mode {
            DenoiseMode::SpatialOnly => None,
            DenoiseMode::Spatiotemporal => self.temporal.as_ref(),
        };
        let apply_temporal = |x: Tensor, block: Option<&TemporalBlock>| -> Result<Tensor> {
            match block {
                None => Ok(x),
                Some(block) => {
                    let v = VideoTensor::from_spatial_view(x, d.b, d.f)?.to_clip()?;
                    let seq = v.to_temporal_view()?;
                    let out = seq.with_data(block.forward(seq.tensor())?)?;
                    Ok(out.to_clip()?.to_spatial_view()?.into_tensor())
                }
            }
        };

        let mut x = self.conv_in.forward(clip.to_spatial_view()?.tensor())?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, layer) in self.down.iter().enumerate() {
            x = layer.forward(&x, &emb, &text)?;
            x = apply_temporal(x, temporal.map(|t| &t.down[i]))?;
            skips.push(x.clone());
            if i < self.downsample.len() {
                x = self.downsample[i].forward(&x)?;
            }
        }
        skips.pop();
        for (j, layer) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per up level");
            x = Tensor::cat(&[&upsample2x(&x)?, &skip], 1)?;
            x = layer.forward(&x, &emb, &text)?;
            x = apply_temporal(x, temporal.map(|t| &t.up[j]))?;
        }
        let x = self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?;
        let out = VideoTensor::from_spatial_view(x, d.b, d.f)?.to_clip()?;
        Ok(out.into_tensor())
    }
}
