//! Frame encoder/decoder mapping pixels to the latent space the diffusion
//! runs in.
//!
//! Two kinds exist: an identity codec (exact round trip, used by tests) and
//! a small deterministic convolutional autoencoder trained on the toy frames.
//! Raw latents are additionally standardized by a scalar shift/scale fitted
//! over the training set before diffusion sees them.

use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{scalar_f64, to_vec_f64, upsample2x, Adam, Conv2d, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    ConvAutoencoder,
}

impl FromStr for CodecKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "conv_autoencoder" | "conv" => Ok(Self::ConvAutoencoder),
            other => Err(invalid!("unknown codec kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub kind: CodecKind,
    pub image_channels: usize,
    pub spatial_downsample: usize,
    pub latent_channels: usize,
    /// Hidden width of the autoencoder; ignored by the identity codec.
    pub hidden: usize,
}

impl CodecSpec {
    pub fn identity(image_channels: usize) -> Self {
        Self {
            kind: CodecKind::Identity,
            image_channels,
            spatial_downsample: 1,
            latent_channels: image_channels,
            hidden: 0,
        }
    }

    pub fn conv(image_channels: usize, spatial_downsample: usize, latent_channels: usize, hidden: usize) -> Self {
        Self {
            kind: CodecKind::ConvAutoencoder,
            image_channels,
            spatial_downsample,
            latent_channels,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ds = self.spatial_downsample;
        if ds == 0 || !ds.is_power_of_two() {
            return Err(invalid!("spatial downsample {ds} is not a power of two"));
        }
        if self.image_channels == 0 || self.latent_channels == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        match self.kind {
            CodecKind::Identity => {
                if ds != 1 || self.latent_channels != self.image_channels {
                    return Err(invalid!(
                        "identity codec requires downsample 1 and latent channels = image channels"
                    ));
                }
            }
            CodecKind::ConvAutoencoder => {
                if self.hidden == 0 {
                    return Err(invalid!("autoencoder hidden width must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Latent (c, h, w) for an image of the given size.
    pub fn latent_shape(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let ds = self.spatial_downsample;
        if h % ds != 0 || w % ds != 0 {
            return Err(Error::Shape(format!("{h}x{w} frame not divisible by downsample {ds}")));
        }
        Ok((self.latent_channels, h / ds, w / ds))
    }
}

/// Scalar standardization applied to raw latents: `(z - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentScaling {
    pub shift: f64,
    pub scale: f64,
}

impl Default for LatentScaling {
    fn default() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvNets {
    enc: Vec<Conv2d>,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Codec {
    spec: CodecSpec,
    nets: Option<ConvNets>,
    scaling: LatentScaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub losses: Vec<f32>,
    pub scaling: LatentScaling,
}

impl Codec {
    pub fn identity(image_channels: usize) -> Self {
        Self {
            spec: CodecSpec::identity(image_channels),
            nets: None,
            scaling: LatentScaling::default(),
        }
    }

    /// Build (or load from `store`) a codec for `spec`.
    pub fn new(store: &mut ParamStore, spec: CodecSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let nets = match spec.kind {
            CodecKind::Identity => None,
            CodecKind::ConvAutoencoder => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let h = spec.hidden;
                let levels = spec.spatial_downsample.trailing_zeros() as usize;
                let mut enc = vec![Conv2d::new(store, &mut rng, "codec.enc.in", spec.image_channels, h, 3, 1, 1)?];
                for i in 0..levels {
                    enc.push(Conv2d::new(store, &mut rng, &format!("codec.enc.down{i}"), h, h, 3, 2, 1)?);
                }
                enc.push(Conv2d::new(store, &mut rng, "codec.enc.out", h, spec.latent_channels, 3, 1, 1)?);
                let dec_in = Conv2d::new(store, &mut rng, "codec.dec.in", spec.latent_channels, h, 3, 1, 1)?;
                let mut dec_up = Vec::new();
                for i in 0..levels {
                    dec_up.push(Conv2d::new(store, &mut rng, &format!("codec.dec.up{i}"), h, h, 3, 1, 1)?);
                }
                let dec_out = Conv2d::new(store, &mut rng, "codec.dec.out", h, spec.image_channels, 3, 1, 1)?;
                Some(ConvNets {
                    enc,
                    dec_in,
                    dec_up,
                    dec_out,
                })
            }
        };
        Ok(Self {
            spec,
            nets,
            scaling: LatentScaling::default(),
        })
    }

    pub fn spec(&self) -> CodecSpec {
        self.spec
    }

    pub fn scaling(&self) -> LatentScaling {
        self.scaling
    }

    pub fn set_scaling(&mut self, scaling: LatentScaling) {
        self.scaling = scaling;
    }

    fn check_frames(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.spec.image_channels {
            return Err(Error::Shape(format!(
                "frame has {c} channels, codec expects {}",
                self.spec.image_channels
            )));
        }
        self.spec.latent_shape(h, w)?;
        Ok((n, h, w))
    }

    /// Raw latents for a batch of frames (n, c, h, w).
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_frames(x)?;
        match &self.nets {
            None => Ok(x.clone()),
            Some(nets) => {
                let mut h = x.clone();
                let last = nets.enc.len() - 1;
                for (i, conv) in nets.enc.iter().enumerate() {
                    h = conv.forward(&h)?;
                    if i < last {
                        h = h.silu()?;
                    }
                }
                Ok(h)
            }
        }
    }

    fn decode_unclamped(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.spec.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, codec expects {}",
                self.spec.latent_channels
            )));
        }
        match &self.nets {
            None => Ok(z.clone()),
            Some(nets) => {
                let mut h = nets.dec_in.forward(z)?.silu()?;
                for conv in &nets.dec_up {
                    h = conv.forward(&upsample2x(&h)?)?.silu()?;
                }
                Ok(candle_nn::ops::sigmoid(&nets.dec_out.forward(&h)?)?)
            }
        }
    }

    /// Frames (n, c, h, w) in [0, 1] from raw latents.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_unclamped(z)?.clamp(0f64, 1f64)?)
    }

    /// Single frame (c, h, w) to latent (lc, h/ds, w/ds).
    pub fn encode(&self, frame: &Tensor) -> Result<Tensor> {
        Ok(self.encode_batch(&frame.unsqueeze(0)?)?.squeeze(0)?)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        Ok(self.decode_batch(&latent.unsqueeze(0)?)?.squeeze(0)?)
    }

    /// Frame-wise encoding of clips (b, c, f, h, w) -> (b, lc, f, h', w').
    pub fn encode_clip(&self, video: &Tensor) -> Result<Tensor> {
        let (b, c, f, h, w) = video.dims5()?;
        let frames = video.permute((0, 2, 1, 3, 4))?.contiguous()?.reshape((b * f, c, h, w))?;
        let z = self.encode_batch(&frames)?;
        let (_, lc, lh, lw) = z.dims4()?;
        Ok(z.reshape((b, f, lc, lh, lw))?.permute((0, 2, 1, 3, 4))?.contiguous()?)
    }

    pub fn decode_clip(&self, latents: &Tensor) -> Result<Tensor> {
        let (b, lc, f, lh, lw) = latents.dims5()?;
        let frames = latents.permute((0, 2, 1, 3, 4))?.contiguous()?.reshape((b * f, lc, lh, lw))?;
        let x = self.decode_batch(&frames)?;
        let (_, c, h, w) = x.dims4()?;
        Ok(x.reshape((b, f, c, h, w))?.permute((0, 2, 1, 3, 4))?.contiguous()?)
    }

    pub fn standardize(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.affine(1.0 / self.scaling.scale, -self.scaling.shift / self.scaling.scale)?)
    }

    pub fn unstandardize(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.affine(self.scaling.scale, self.scaling.shift)?)
    }

    /// Standardized latent clips ready for diffusion.
    pub fn encode_clip_for_diffusion(&self, video: &Tensor) -> Result<Tensor> {
        self.standardize(&self.encode_clip(video)?)
    }

    pub fn decode_clip_from_diffusion(&self, latents: &Tensor) -> Result<Tensor> {
        self.decode_clip(&self.unstandardize(latents)?)
    }

    /// Fit the scalar standardization over raw latents of `frames`.
    pub fn fit_scaling(&mut self, frames: &Tensor) -> Result<LatentScaling> {
        let n = frames.dim(0)?;
        let mut values = Vec::new();
        for start in (0..n).step_by(256) {
            let len = (n - start).min(256);
            values.extend(to_vec_f64(&self.encode_batch(&frames.narrow(0, start, len)?)?)?);
        }
        let m = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
        let scaling = LatentScaling {
            shift: m,
            scale: var.sqrt().max(1e-6),
        };
        self.scaling = scaling;
        Ok(scaling)
    }
}

/// Train a codec on frames (n, c, h, w) and fit its latent scaling.
/// The identity codec only fits the scaling.
pub fn train_codec(
    store: &mut ParamStore,
    spec: CodecSpec,
    frames: &Tensor,
    cfg: &CodecTrainConfig,
) -> Result<(Codec, CodecTrainReport)> {
    let mut codec = Codec::new(store, spec, cfg.seed)?;
    let n = frames.dim(0)?;
    if n == 0 {
        return Err(invalid!("codec training set is empty"));
    }
    let mut losses = Vec::new();
    if codec.nets.is_some() && cfg.steps > 0 {
        let frames = frames.to_dtype(store.dtype())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut opt = Adam::new(store.trainable_vars(), cfg.learning_rate, Some(1.0))?;
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut cursor = n;
        for step in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(n) {
                if cursor == n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let idx = Tensor::from_vec(batch.clone(), batch.len(), frames.device())?;
            let x = frames.index_select(&idx, 0)?;
            let recon = codec.decode_unclamped(&codec.encode_batch(&x)?)?;
            let loss = (recon - &x)?.sqr()?.mean_all()?;
            let lv = scalar_f64(&loss)?;
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("codec loss {lv} at step {step}")));
            }
            losses.push(lv as f32);
            opt.backward_step(&loss)?;
        }
    }
    let scaling = codec.fit_scaling(&frames.to_dtype(store.dtype())?)?;
    Ok((codec, CodecTrainReport { losses, scaling }))
}

/// Mean per-pixel squared reconstruction error.
pub fn reconstruction_mse(codec: &Codec, frames: &Tensor) -> Result<f64> {
    let recon = codec.decode_batch(&codec.encode_batch(frames)?)?;
    scalar_f64(&(recon - frames)?.sqr()?.mean_all()?)
}

pub fn frames_tensor(frames: &[f32], n: usize, c: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(frames, (n, c, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f32;
    use candle_core::Device;

    fn rand_frames(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..n * c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(v, (n, c, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let codec = Codec::identity(3);
        let x = rand_frames(2, 3, 4, 4, 0);
        let z = codec.encode_batch(&x).unwrap();
        assert_eq!(to_vec_f32(&z).unwrap(), to_vec_f32(&x).unwrap());
        let back = codec.decode_batch(&z).unwrap();
        assert_eq!(to_vec_f32(&back).unwrap(), to_vec_f32(&x).unwrap());
    }

    #[test]
    fn conv_codec_shapes() {
        let mut store = ParamStore::new(DType::F32);
        let codec = Codec::new(&mut store, CodecSpec::conv(3, 4, 4, 8), 0).unwrap();
        let z = codec.encode(&rand_frames(1, 3, 64, 64, 1).squeeze(0).unwrap()).unwrap();
        assert_eq!(z.dims(), &[4, 16, 16]);
        let clip = Tensor::zeros((2, 3, 16, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(codec.encode_clip(&clip).unwrap().dims(), &[2, 4, 16, 16, 16]);
        assert!(codec.encode(&rand_frames(1, 3, 62, 64, 1).squeeze(0).unwrap()).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(CodecSpec::conv(3, 3, 4, 8).validate().is_err());
        let mut bad = CodecSpec::identity(3);
        bad.latent_channels = 4;
        assert!(bad.validate().is_err());
        bad = CodecSpec::identity(3);
        bad.spatial_downsample = 2;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn decoder_output_in_unit_range_for_random_latents() {
        let mut store = ParamStore::new(DType::F32);
        let codec = Codec::new(&mut store, CodecSpec::conv(3, 2, 4, 8), 3).unwrap();
        for seed in 0..10 {
            let z = rand_frames(2, 4, 4, 4, seed).affine(40.0, -20.0).unwrap();
            let x = to_vec_f32(&codec.decode_batch(&z).unwrap()).unwrap();
            assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn encode_clip_is_frame_wise() {
        let mut store = ParamStore::new(DType::F32);
        let codec = Codec::new(&mut store, CodecSpec::conv(3, 2, 4, 8), 3).unwrap();
        let clip = rand_frames(3, 4, 8, 8, 5).reshape((1, 3, 4, 8, 8)).unwrap();
        let z = codec.encode_clip(&clip).unwrap();
        let rev_idx = Tensor::from_vec(vec![3u32, 2, 1, 0], 4, &Device::Cpu).unwrap();
        let z_rev = codec.encode_clip(&clip.index_select(&rev_idx, 2).unwrap()).unwrap();
        assert_eq!(
            to_vec_f32(&z.index_select(&rev_idx, 2).unwrap()).unwrap(),
            to_vec_f32(&z_rev).unwrap()
        );
        let one = clip.narrow(2, 0, 1).unwrap();
        let z1 = codec.encode_clip(&one).unwrap().squeeze(2).unwrap().squeeze(0).unwrap();
        let f0 = codec.encode(&one.squeeze(2).unwrap().squeeze(0).unwrap()).unwrap();
        assert_eq!(to_vec_f32(&z1).unwrap(), to_vec_f32(&f0).unwrap());
    }
}
