use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::{Error, Result};

/// Adam (AdamW with zero weight decay) plus optional global-norm clipping.
pub struct Adam {
    inner: AdamW,
    vars: Vec<Var>,
    clip_norm: Option<f64>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, clip_norm: Option<f64>) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let inner = AdamW::new(vars.clone(), params)?;
        Ok(Self {
            inner,
            vars,
            clip_norm,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    /// Backpropagate `loss` and apply one update; returns the pre-clip
    /// global gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = global_grad_norm(&grads, &self.vars)?;
        if !norm.is_finite() {
            return Err(Error::Diverged(format!("gradient norm is {norm}")));
        }
        if let Some(max) = self.clip_norm {
            if norm > max {
                let scale = max / (norm + 1e-12);
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.inner.step(&grads)?;
        Ok(norm)
    }
}

pub fn global_grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut sq = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += super::scalar_f64(&g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?)?;
        }
    }
    Ok(sq.sqrt())
}
