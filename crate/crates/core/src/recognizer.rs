//! Small discriminative video models: a 4-layer 3D CNN over 16-frame clips
//! (filter classifier and clip recognizer) and a per-frame CNN followed by
//! an LSTM (video-level recognizer).

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{cross_entropy, scalar_f64, softmax_last, to_vec_f64, Adam, Conv2d, Conv3d, GroupNorm, Linear, ParamStore};

const NORM_GROUPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Four 3D convolutions, global average pooling, linear head.
    Conv3d { width: usize },
    /// Per-frame 2D CNN, LSTM over frames, linear head on the last state.
    FrameLstm { width: usize, hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    pub arch: Architecture,
    pub in_channels: usize,
    pub num_classes: usize,
}

struct Conv3dNet {
    convs: Vec<Conv3d>,
    norms: Vec<GroupNorm>,
    head: Linear,
}

struct Lstm {
    w_ih: Linear,
    w_hh: Linear,
    hidden: usize,
}

impl Lstm {
    /// Final hidden state for a sequence batch (b, f, d).
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, f, _) = x.dims3()?;
        let xi = self.w_ih.forward(x)?;
        let mut h = Tensor::zeros((b, self.hidden), x.dtype(), x.device())?;
        let mut c = h.clone();
        for t in 0..f {
            let gates = (xi.narrow(1, t, 1)?.squeeze(1)? + self.w_hh.forward(&h)?)?;
            let chunk = |k: usize| gates.narrow(1, k * self.hidden, self.hidden);
            let i = candle_nn::ops::sigmoid(&chunk(0)?)?;
            let fg = candle_nn::ops::sigmoid(&chunk(1)?)?;
            let g = chunk(2)?.tanh()?;
            let o = candle_nn::ops::sigmoid(&chunk(3)?)?;
            c = ((fg * c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
        }
        Ok(h)
    }
}

struct FrameLstmNet {
    convs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
    lstm: Lstm,
    head: Linear,
}

enum Net {
    Conv3d(Conv3dNet),
    FrameLstm(FrameLstmNet),
}

/// A recognizer over clips (b, c, f, h, w) with pixel values in [0, 1].
pub struct Recognizer {
    cfg: RecognizerConfig,
    net: Net,
}

impl Recognizer {
    pub fn new(store: &mut ParamStore, cfg: RecognizerConfig, seed: u64) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(invalid!("a recognizer needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match cfg.arch {
            Architecture::Conv3d { width } => {
                let chans = [cfg.in_channels, width, 2 * width, 2 * width, 4 * width];
                let mut convs = Vec::new();
                let mut norms = Vec::new();
                for i in 0..4 {
                    let stride = if i == 0 { 1 } else { 2 };
                    convs.push(Conv3d::new(
                        store,
                        &mut rng,
                        &format!("rec.conv{i}"),
                        chans[i],
                        chans[i + 1],
                        3,
                        3,
                        stride,
                        stride,
                    )?);
                    norms.push(GroupNorm::new(store, &mut rng, &format!("rec.norm{i}"), chans[i + 1], NORM_GROUPS)?);
                }
                let head = Linear::new(store, &mut rng, "rec.head", chans[4], cfg.num_classes)?;
                Net::Conv3d(Conv3dNet { convs, norms, head })
            }
            Architecture::FrameLstm { width, hidden } => {
                let chans = [cfg.in_channels, width, 2 * width, 2 * width];
                let mut convs = Vec::new();
                let mut norms = Vec::new();
                for i in 0..3 {
                    let stride = if i == 0 { 1 } else { 2 };
                    convs.push(Conv2d::new(
                        store,
                        &mut rng,
                        &format!("rec.frame{i}"),
                        chans[i],
                        chans[i + 1],
                        3,
                        stride,
                        1,
                    )?);
                    norms.push(GroupNorm::new(store, &mut rng, &format!("rec.frame_norm{i}"), chans[i + 1], NORM_GROUPS)?);
                }
                let lstm = Lstm {
                    w_ih: Linear::new(store, &mut rng, "rec.lstm.ih", chans[3], 4 * hidden)?,
                    w_hh: Linear::with_init(
                        store,
                        &mut rng,
                        "rec.lstm.hh",
                        hidden,
                        4 * hidden,
                        crate::nn::Init::fan_in(hidden),
                        false,
                    )?,
                    hidden,
                };
                let head = Linear::new(store, &mut rng, "rec.head", hidden, cfg.num_classes)?;
                Net::FrameLstm(FrameLstmNet { convs, norms, lstm, head })
            }
        };
        Ok(Self { cfg, net })
    }

    pub fn config(&self) -> RecognizerConfig {
        self.cfg
    }

    /// Penultimate features.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _, _) = x.dims5()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!("clip has {c} channels, recognizer expects {}", self.cfg.in_channels)));
        }
        let x = x.affine(2.0, -1.0)?;
        match &self.net {
            Net::Conv3d(net) => {
                let mut h = x;
                for (conv, norm) in net.convs.iter().zip(&net.norms) {
                    h = norm.forward(&conv.forward(&h)?)?.silu()?;
                }
                let (b, ch, _, _, _) = h.dims5()?;
                Ok(h.reshape((b, ch, ()))?.mean(D::Minus1)?)
            }
            Net::FrameLstm(net) => {
                let (b, c, f, hh, ww) = x.dims5()?;
                let mut h = x.permute((0, 2, 1, 3, 4))?.contiguous()?.reshape((b * f, c, hh, ww))?;
                for (conv, norm) in net.convs.iter().zip(&net.norms) {
                    h = norm.forward(&conv.forward(&h)?)?.silu()?;
                }
                let (_, ch, _, _) = h.dims4()?;
                let pooled = h.reshape((b * f, ch, ()))?.mean(D::Minus1)?.reshape((b, f, ch))?;
                net.lstm.forward(&pooled)
            }
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.features(x)?;
        match &self.net {
            Net::Conv3d(net) => net.head.forward(&feats),
            Net::FrameLstm(net) => net.head.forward(&feats),
        }
    }

    /// Class probabilities, one row per clip.
    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let p = softmax_last(&self.logits(x)?)?;
        let k = self.cfg.num_classes;
        Ok(to_vec_f64(&p)?.chunks(k).map(<[f64]>::to_vec).collect())
    }

    /// Probabilities for many clips, evaluated in chunks.
    pub fn score_clips(&self, clips: &[Tensor], dtype: DType, chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(clips.len());
        for part in clips.chunks(chunk.max(1)) {
            let x = Tensor::stack(part, 0)?.to_dtype(dtype)?;
            out.extend(self.probabilities(&x)?);
        }
        Ok(out)
    }

    pub fn feature_rows(&self, clips: &[Tensor], dtype: DType, chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for part in clips.chunks(chunk.max(1)) {
            let x = Tensor::stack(part, 0)?.to_dtype(dtype)?;
            let f = self.features(&x)?;
            let d = f.dim(1)?;
            out.extend(to_vec_f64(&f)?.chunks(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 5e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub losses: Vec<f32>,
    pub train_accuracy: f64,
    pub majority_baseline: f64,
}

/// Index of the largest score; ties go to the lower index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Train a recognizer with cross-entropy on labeled clips (c, f, h, w).
/// Clips are visited in reshuffled epochs.
pub fn train_recognizer(
    cfg: RecognizerConfig,
    clips: &[(Tensor, usize)],
    train: &ClassifierTrainConfig,
    dtype: DType,
) -> Result<(Recognizer, ParamStore, ClassifierReport)> {
    if clips.is_empty() {
        return Err(invalid!("recognizer training set is empty"));
    }
    let mut seen = vec![0usize; cfg.num_classes];
    for (_, l) in clips {
        if *l >= cfg.num_classes {
            return Err(invalid!("label {l} out of range"));
        }
        seen[*l] += 1;
    }
    if seen.iter().filter(|&&n| n > 0).count() < 2 {
        return Err(invalid!("recognizer training set holds a single class"));
    }
    let mut store = ParamStore::new(dtype);
    let model = Recognizer::new(&mut store, cfg, train.seed)?;
    let mut opt = Adam::new(store.trainable_vars(), train.learning_rate, Some(1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x51ed_270b);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let frac = step as f64 / train.steps.max(1) as f64;
        opt.set_learning_rate(train.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        let mut xs = Vec::with_capacity(train.batch_size);
        let mut ys = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size.min(clips.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (x, y) = &clips[order[cursor]];
            cursor += 1;
            xs.push(x.clone());
            ys.push(*y);
        }
        let x = Tensor::stack(&xs, 0)?.to_dtype(dtype)?;
        let loss = cross_entropy(&model.logits(&x)?, &ys)?;
        let lv = scalar_f64(&loss)?;
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("recognizer loss {lv} at step {step}")));
        }
        losses.push(lv as f32);
        opt.backward_step(&loss)?;
    }
    let xs: Vec<Tensor> = clips.iter().map(|(x, _)| x.clone()).collect();
    let scores = model.score_clips(&xs, dtype, 32)?;
    let correct = scores
        .iter()
        .zip(clips)
        .filter(|(s, (_, y))| argmax(s) == *y)
        .count();
    let majority = *seen.iter().max().unwrap_or(&0) as f64 / clips.len() as f64;
    Ok((
        model,
        store,
        ClassifierReport {
            losses,
            train_accuracy: correct as f64 / clips.len() as f64,
            majority_baseline: majority,
        },
    ))
}

/// All-zero clip batch for shape probes.
pub fn zeros_clip(b: usize, c: usize, f: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((b, c, f, h, w), dtype, &Device::Cpu)?)
}
