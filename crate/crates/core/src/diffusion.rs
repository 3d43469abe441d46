//! Noise schedules, the forward (noising) process and training targets.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `alpha_bar(0) = 1` denoting the
//! clean latent. The velocity target is
//!
//! ```text
//! v = sqrt(alpha_bar_t) * eps - sqrt(1 - alpha_bar_t) * z0
//! ```
//!
//! and the inverse maps used by the samplers are
//! `z0 = sqrt(ab) * z_t - sqrt(1 - ab) * v` and
//! `eps = sqrt(1 - ab) * z_t + sqrt(ab) * v`.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(invalid!("unknown schedule kind {other:?}")),
        }
    }
}

/// What the denoiser is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Epsilon,
    #[serde(rename = "v")]
    Velocity,
}

impl FromStr for Parameterization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "eps" => Ok(Self::Epsilon),
            "v" | "velocity" => Ok(Self::Velocity),
            other => Err(invalid!("unknown parameterization {other:?}")),
        }
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Epsilon => write!(f, "epsilon"),
            Self::Velocity => write!(f, "v"),
        }
    }
}

/// Serializable description from which a schedule is rebuilt exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::Linear,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`; index 0 is exactly 1.
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    NoiseSchedule::from_spec(ScheduleSpec {
        steps,
        kind,
        beta_min,
        beta_max,
    })
}

impl NoiseSchedule {
    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec {
            steps,
            kind,
            beta_min,
            beta_max,
        } = spec;
        if steps == 0 {
            return Err(invalid!("schedule needs at least one step"));
        }
        if !(beta_min.is_finite() && beta_max.is_finite()) {
            return Err(invalid!("beta bounds must be finite"));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(invalid!(
                "beta bounds must satisfy 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
            ));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(beta_min, beta_max))
                    .collect()
            }
        };
        Ok(Self::from_betas(spec, betas))
    }

    fn from_betas(spec: ScheduleSpec, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Self {
            spec,
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    /// Per-batch-item coefficient tensor broadcastable against `like`.
    fn coefficients(&self, values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
        let mut shape = vec![values.len()];
        shape.extend(std::iter::repeat_n(1, like.rank() - 1));
        let t = Tensor::from_vec(values, shape.as_slice(), like.device())?;
        Ok(t.to_dtype(like.dtype())?)
    }

    fn check_batch(&self, z: &Tensor, ts: &[usize]) -> Result<()> {
        if z.rank() == 0 || z.dim(0)? != ts.len() {
            return Err(Error::Shape(format!(
                "{} timesteps for a batch of shape {:?}",
                ts.len(),
                z.dims()
            )));
        }
        for &t in ts {
            self.check_t(t)?;
        }
        Ok(())
    }

    /// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`, one timestep per leading
    /// batch entry.
    pub fn forward_diffuse_batch(&self, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z0.dims() != eps.dims() {
            return Err(Error::Shape(format!(
                "noise shape {:?} differs from latent shape {:?}",
                eps.dims(),
                z0.dims()
            )));
        }
        self.check_batch(z0, ts)?;
        let a = self.coefficients(ts.iter().map(|&t| self.alpha_bar(t).sqrt()).collect(), z0)?;
        let s = self.coefficients(
            ts.iter().map(|&t| (1.0 - self.alpha_bar(t)).sqrt()).collect(),
            z0,
        )?;
        Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
    }

    /// Training target for a batch.
    pub fn make_target_batch(
        &self,
        z0: &Tensor,
        eps: &Tensor,
        ts: &[usize],
        parameterization: Parameterization,
    ) -> Result<DiffusionTarget> {
        if z0.dims() != eps.dims() {
            return Err(Error::Shape(format!(
                "noise shape {:?} differs from latent shape {:?}",
                eps.dims(),
                z0.dims()
            )));
        }
        self.check_batch(z0, ts)?;
        let target = match parameterization {
            Parameterization::Epsilon => eps.clone(),
            Parameterization::Velocity => {
                let a = self
                    .coefficients(ts.iter().map(|&t| self.alpha_bar(t).sqrt()).collect(), z0)?;
                let s = self.coefficients(
                    ts.iter().map(|&t| (1.0 - self.alpha_bar(t)).sqrt()).collect(),
                    z0,
                )?;
                (eps.broadcast_mul(&a)? - z0.broadcast_mul(&s)?)?
            }
        };
        Ok(DiffusionTarget {
            noise: eps.clone(),
            target,
            parameterization,
        })
    }

    /// Recover `(z0_hat, eps_hat)` from a model output at per-item timesteps.
    /// Timestep 0 is accepted here (alpha_bar = 1).
    pub fn split_prediction(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        prediction: &Tensor,
        parameterization: Parameterization,
    ) -> Result<(Tensor, Tensor)> {
        if z_t.dims() != prediction.dims() {
            return Err(Error::Shape(format!(
                "prediction shape {:?} differs from latent shape {:?}",
                prediction.dims(),
                z_t.dims()
            )));
        }
        for &t in ts {
            if t > self.steps() {
                return Err(invalid!("timestep {t} outside 0..={}", self.steps()));
            }
        }
        let sa: Vec<f64> = ts.iter().map(|&t| self.alpha_bar(t).sqrt()).collect();
        let sb: Vec<f64> = ts.iter().map(|&t| (1.0 - self.alpha_bar(t)).sqrt()).collect();
        match parameterization {
            Parameterization::Velocity => {
                let a = self.coefficients(sa, z_t)?;
                let s = self.coefficients(sb, z_t)?;
                let z0 = (z_t.broadcast_mul(&a)? - prediction.broadcast_mul(&s)?)?;
                let eps = (z_t.broadcast_mul(&s)? + prediction.broadcast_mul(&a)?)?;
                Ok((z0, eps))
            }
            Parameterization::Epsilon => {
                let inv_a = self.coefficients(sa.iter().map(|a| 1.0 / a).collect(), z_t)?;
                let s = self.coefficients(sb, z_t)?;
                let z0 = (z_t - prediction.broadcast_mul(&s)?)?.broadcast_mul(&inv_a)?;
                Ok((z0, prediction.clone()))
            }
        }
    }
}

/// A latent together with the diffusion time it lives at.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
    pub is_clean: bool,
}

impl LatentState {
    pub fn clean(z: Tensor) -> Self {
        Self {
            z,
            t: 0,
            is_clean: true,
        }
    }
}

/// Noise and the regression target derived from it.
#[derive(Debug, Clone)]
pub struct DiffusionTarget {
    pub noise: Tensor,
    /// Equals `noise` in epsilon mode and the velocity in v mode.
    pub target: Tensor,
    pub parameterization: Parameterization,
}

/// Noise a single clean latent to step `t`.
pub fn forward_diffuse(
    z0: &LatentState,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<LatentState> {
    if !z0.is_clean {
        return Err(invalid!("forward_diffuse expects a clean latent"));
    }
    sched.check_t(t)?;
    let z = sched.forward_diffuse_batch(&z0.z.unsqueeze(0)?, &[t], &eps.unsqueeze(0)?)?;
    Ok(LatentState {
        z: z.squeeze(0)?,
        t,
        is_clean: false,
    })
}

/// Target for a single latent.
pub fn make_target(
    z0: &Tensor,
    eps: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    parameterization: Parameterization,
) -> Result<DiffusionTarget> {
    let out = sched.make_target_batch(&z0.unsqueeze(0)?, &eps.unsqueeze(0)?, &[t], parameterization)?;
    Ok(DiffusionTarget {
        noise: eps.clone(),
        target: out.target.squeeze(0)?,
        parameterization,
    })
}

/// Mean squared error over every element of the batch.
pub fn training_loss(prediction: &Tensor, target: &DiffusionTarget) -> Result<Tensor> {
    if prediction.dims() != target.target.dims() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} differs from target shape {:?}",
            prediction.dims(),
            target.target.dims()
        )));
    }
    Ok((prediction - &target.target)?.sqr()?.mean_all()?)
}
