use candle_core::Tensor;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::nn::{softmax_last, Init, Linear, ParamStore};

/// Fixed sinusoidal table, row-major (len, dim):
/// `pe[p][2i] = sin(p / 10000^(2i/dim))`, `pe[p][2i+1] = cos(..)`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for p in 0..len {
        for j in 0..dim {
            let i2 = (j / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / dim as f64);
            out[p * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Self-attention over the frame axis followed by an MLP, both behind
/// zero-initialized output projections so the block starts as the identity.
///
/// ```text
/// h   = x + PE
/// x1  = x  + W_O( softmax(h W_Q (h W_K)^T / sqrt(d)) h W_V )
/// out = x1 + fc2( silu( fc1(x1) ) )
/// ```
///
/// `d` is the per-head width (the full channel count with one head).
#[derive(Debug, Clone)]
pub struct TemporalBlock {
    w_q: Linear,
    w_k: Linear,
    w_v: Linear,
    w_o: Linear,
    fc1: Linear,
    fc2: Linear,
    positional: Option<Tensor>,
    max_frames: usize,
    channels: usize,
    heads: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalBlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_frames: usize,
    pub positional_encoding: bool,
}

impl TemporalBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: TemporalBlockConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        if cfg.heads == 0 || c % cfg.heads != 0 {
            return Err(invalid!("{c} channels cannot be split into {} heads", cfg.heads));
        }
        let proj = |store: &mut ParamStore, rng: &mut R, n: &str| {
            Linear::with_init(store, rng, &format!("{name}.{n}"), c, c, Init::fan_in(c), false)
        };
        let w_q = proj(store, rng, "w_q")?;
        let w_k = proj(store, rng, "w_k")?;
        let w_v = proj(store, rng, "w_v")?;
        let w_o = Linear::zeros(store, rng, &format!("{name}.w_o"), c, c)?;
        let hidden = c * cfg.mlp_ratio.max(1);
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), c, hidden)?;
        let fc2 = Linear::zeros(store, rng, &format!("{name}.fc2"), hidden, c)?;
        let positional = if cfg.positional_encoding {
            let table = sinusoidal_table(cfg.max_frames, c);
            let t = Tensor::from_vec(table, (cfg.max_frames, c), store.device())?
                .to_dtype(store.dtype())?;
            Some(t)
        } else {
            None
        };
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            fc1,
            fc2,
            positional,
            max_frames: cfg.max_frames,
            channels: c,
            heads: cfg.heads,
        })
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (n, f, c) = x.dims3()?;
        if c != self.channels {
            return Err(Error::Shape(format!("block expects {} channels, got {c}", self.channels)));
        }
        if f > self.max_frames {
            return Err(invalid!(
                "sequence of {f} frames exceeds the positional table of {}",
                self.max_frames
            ));
        }
        Ok((n, f))
    }

    fn with_position(&self, x: &Tensor) -> Result<Tensor> {
        let (_, f, _) = x.dims3()?;
        match &self.positional {
            Some(pe) => Ok(x.broadcast_add(&pe.narrow(0, 0, f)?)?),
            None => Ok(x.clone()),
        }
    }

    /// Split (n, f, c) into (n, heads, f, c/heads).
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (n, f, c) = x.dims3()?;
        Ok(x
            .reshape((n, f, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Attention probabilities (n, heads, f, f) for an input sequence batch.
    pub fn attention_weights(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let h = self.with_position(x)?;
        let q = self.split_heads(&self.w_q.forward(&h)?)?;
        let k = self.split_heads(&self.w_k.forward(&h)?)?;
        let d = (self.channels / self.heads) as f64;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / d.sqrt())?;
        softmax_last(&scores)
    }

    /// Attention output before the output projection, (n, f, c).
    pub fn attend(&self, x: &Tensor) -> Result<Tensor> {
        let (n, f) = self.check(x)?;
        let h = self.with_position(x)?;
        let probs = self.attention_weights(x)?;
        let v = self.split_heads(&self.w_v.forward(&h)?)?;
        let out = probs.matmul(&v)?;
        Ok(out.transpose(1, 2)?.contiguous()?.reshape((n, f, self.channels))?)
    }

    /// Full residual block on a temporal-view sequence batch (n, f, c).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let attn = self.attend(x)?;
        let x1 = (x + self.w_o.forward(&attn)?)?;
        let mlp = self.fc2.forward(&self.fc1.forward(&x1)?.silu()?)?;
        Ok((x1 + mlp)?)
    }
}
