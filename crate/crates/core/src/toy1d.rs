//! A one-dimensional two-mode sanity problem for the diffusion core and the
//! sampler: a small MLP denoiser is trained on an equal mixture of two
//! Gaussians and sampled with the same update rules as the video model.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::denoiser::timestep_embedding;
use crate::diffusion::{NoiseSchedule, Parameterization};
use crate::error::Result;
use crate::nn::{scalar_f64, to_vec_f64, Adam, Linear, ParamStore};
use crate::sampler::{sample_loop, SamplerKind};
use crate::trainer::normal_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoModes {
    pub means: [f64; 2],
    pub std: f64,
}

impl Default for TwoModes {
    fn default() -> Self {
        Self {
            means: [-2.0, 2.0],
            std: 0.5,
        }
    }
}

impl TwoModes {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(0.0, self.std).expect("valid std");
        (0..n)
            .map(|_| self.means[rng.random_range(0..2)] + normal.sample(rng))
            .collect()
    }
}

const TIME_DIM: usize = 32;

pub struct MlpDenoiser {
    layers: Vec<Linear>,
}

impl MlpDenoiser {
    pub fn new(store: &mut ParamStore, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [1 + TIME_DIM, hidden, hidden, hidden, 1];
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &mut rng, &format!("mlp.{i}"), d[0], d[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `z` is (n, 1); all rows share timestep `t` when `ts` has one entry.
    pub fn forward(&self, z: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let n = z.dim(0)?;
        let emb = if ts.len() == 1 {
            let row = Tensor::from_vec(timestep_embedding(ts, TIME_DIM), (1, TIME_DIM), &Device::Cpu)?;
            row.broadcast_as((n, TIME_DIM))?.contiguous()?
        } else {
            Tensor::from_vec(timestep_embedding(ts, TIME_DIM), (n, TIME_DIM), &Device::Cpu)?
        };
        let mut h = Tensor::cat(&[z.clone(), emb.to_dtype(z.dtype())?], 1)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = h.silu()?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toy1dConfig {
    pub modes: TwoModes,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub parameterization: Parameterization,
    pub seed: u64,
}

impl Default for Toy1dConfig {
    fn default() -> Self {
        Self {
            modes: TwoModes::default(),
            hidden: 64,
            steps: 4000,
            batch_size: 256,
            learning_rate: 2e-3,
            parameterization: Parameterization::Velocity,
            seed: 0,
        }
    }
}

pub fn train(cfg: &Toy1dConfig, sched: &NoiseSchedule) -> Result<(MlpDenoiser, ParamStore, Vec<f32>)> {
    let mut store = ParamStore::new(DType::F32);
    let model = MlpDenoiser::new(&mut store, cfg.hidden, cfg.seed)?;
    let mut opt = Adam::new(store.trainable_vars(), cfg.learning_rate, Some(1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xabcd);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // Linear decay to a tenth of the base rate.
        let frac = step as f64 / cfg.steps as f64;
        opt.set_learning_rate(cfg.learning_rate * (1.0 - 0.9 * frac));
        let x = cfg.modes.sample(cfg.batch_size, &mut rng);
        let z0 = Tensor::from_vec(x, (cfg.batch_size, 1), &Device::Cpu)?.to_dtype(DType::F32)?;
        let ts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(1..=sched.steps())).collect();
        let eps = normal_tensor(&mut rng, &[cfg.batch_size, 1], DType::F32)?;
        let z_t = sched.forward_diffuse_batch(&z0, &ts, &eps)?;
        let target = sched.make_target_batch(&z0, &eps, &ts, cfg.parameterization)?;
        let loss = (model.forward(&z_t, &ts)? - &target.target)?.sqr()?.mean_all()?;
        losses.push(scalar_f64(&loss)? as f32);
        opt.backward_step(&loss)?;
    }
    Ok((model, store, losses))
}

pub fn sample(
    model: &MlpDenoiser,
    sched: &NoiseSchedule,
    parameterization: Parameterization,
    n: usize,
    steps: usize,
    kind: SamplerKind,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = normal_tensor(&mut rng, &[n, 1], DType::F32)?;
    let out = sample_loop(
        start,
        sched,
        steps,
        kind,
        parameterization,
        |z, t| model.forward(z, &[t]),
        || normal_tensor(&mut rng, &[n, 1], DType::F32),
    )?;
    to_vec_f64(&out)
}

/// Per-mode statistics of samples split at the midpoint between the means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub weight: [f64; 2],
    pub mean: [f64; 2],
    pub second_moment: [f64; 2],
}

pub fn mode_stats(samples: &[f64], modes: &TwoModes) -> ModeStats {
    let mid = (modes.means[0] + modes.means[1]) / 2.0;
    let mut count = [0usize; 2];
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for &x in samples {
        let k = usize::from(x > mid);
        count[k] += 1;
        sum[k] += x;
        sq[k] += x * x;
    }
    let n = samples.len().max(1) as f64;
    let div = |a: f64, c: usize| if c == 0 { f64::NAN } else { a / c as f64 };
    ModeStats {
        weight: [count[0] as f64 / n, count[1] as f64 / n],
        mean: [div(sum[0], count[0]), div(sum[1], count[1])],
        second_moment: [div(sq[0], count[0]), div(sq[1], count[1])],
    }
}
