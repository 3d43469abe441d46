//! Small neural-network toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that
//! checkpoints, freeze manifests and parameter censuses all speak the same
//! vocabulary. Initialization draws from a seeded ChaCha stream instead of
//! the device RNG, which keeps every run reproducible.

pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{Conv2d, Conv3d, GroupNorm, Linear};
pub use optim::Adam;
pub use params::{Init, ParamInfo, ParamStore};

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

/// Numerically stable softmax over the last dimension.
///
/// The subtracted maximum is detached: softmax is shift invariant so the
/// gradient is unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean cross-entropy of `logits` (n, k) against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, _k) = logits.dims2()?;
    let ids: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let ids = Tensor::from_vec(ids, (n, 1), logits.device())?;
    let lp = log_softmax_last(logits)?;
    let picked = lp.gather(&ids, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Nearest-neighbour 2x upsampling of an (n, c, h, w) tensor.
///
/// Built from broadcast + reshape so that gradients accumulate correctly
/// when the input feeds several consumers.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let y = x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, h * 2, w * 2))?;
    Ok(y)
}

pub fn tensor_from_f64(values: &[f64], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let t = Tensor::from_slice(values, shape, device)?;
    Ok(t.to_dtype(dtype)?)
}

pub fn tensor_from_f32(values: &[f32], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let t = Tensor::from_slice(values, shape, device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Flattened contents of `t` as f64, regardless of its dtype.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn to_vec_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
