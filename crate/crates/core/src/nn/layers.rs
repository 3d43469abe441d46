use candle_core::{Tensor, D};
use rand::Rng;

use super::params::{Init, ParamStore};
use crate::error::{invalid, Result};

/// Affine map `y = x W^T + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Self::with_init(store, rng, name, in_dim, out_dim, Init::fan_in(in_dim), true)
    }

    /// Linear layer whose weight and bias start at exactly zero.
    pub fn zeros<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Self::with_init(store, rng, name, in_dim, out_dim, Init::Zeros, true)
    }

    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[out_dim, in_dim], init, rng)?;
        let bias = if bias {
            let b_init = match init {
                Init::Zeros => Init::Zeros,
                _ => Init::fan_in(in_dim),
            };
            Some(store.get(&format!("{name}.bias"), &[out_dim], b_init, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

/// 2D convolution over (n, c, h, w) inputs with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = store.get(
            &format!("{name}.weight"),
            &[out_c, in_c, kernel, kernel],
            Init::fan_in(fan_in),
            rng,
        )?;
        let bias = store.get(&format!("{name}.bias"), &[out_c], Init::fan_in(fan_in), rng)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// 3D convolution over (b, c, f, h, w) clips.
///
/// Implemented as one 2D convolution over frame windows whose temporal taps
/// are stacked along the channel axis, which is exactly a 3D convolution
/// with temporal zero padding.
#[derive(Debug, Clone)]
pub struct Conv3d {
    weight: Tensor,
    bias: Tensor,
    kt: usize,
    stride_t: usize,
    stride_s: usize,
    pad_t: usize,
    pad_s: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        kt: usize,
        ks: usize,
        stride_t: usize,
        stride_s: usize,
    ) -> Result<Self> {
        let fan_in = in_c * kt * ks * ks;
        let weight = store.get(
            &format!("{name}.weight"),
            &[out_c, in_c, kt, ks, ks],
            Init::fan_in(fan_in),
            rng,
        )?;
        let bias = store.get(&format!("{name}.bias"), &[out_c], Init::fan_in(fan_in), rng)?;
        Ok(Self {
            weight,
            bias,
            kt,
            stride_t,
            stride_s,
            pad_t: kt / 2,
            pad_s: ks / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, f, h, w) = x.dims5()?;
        let padded = if self.pad_t > 0 {
            let z = Tensor::zeros((b, c, self.pad_t, h, w), x.dtype(), x.device())?;
            Tensor::cat(&[&z, x, &z], 2)?
        } else {
            x.clone()
        };
        let f_pad = f + 2 * self.pad_t;
        if f_pad < self.kt {
            return Err(invalid!("clip of {f} frames is shorter than the temporal kernel"));
        }
        let f_out = (f_pad - self.kt) / self.stride_t + 1;
        // Output frame o sees padded frames o * stride + dt, stacked tap-major
        // along channels to match the permuted weight.
        let idx: Vec<u32> = (0..f_out)
            .flat_map(|o| (0..self.kt).map(move |dt| (o * self.stride_t + dt) as u32))
            .collect();
        let idx = Tensor::from_vec(idx, f_out * self.kt, x.device())?;
        let frames = padded
            .permute((0, 2, 1, 3, 4))?
            .contiguous()?
            .index_select(&idx, 1)?
            .reshape((b * f_out, self.kt * c, h, w))?;
        let (o, _, _, ks, _) = self.weight.dims5()?;
        let k = self
            .weight
            .permute((0, 2, 1, 3, 4))?
            .contiguous()?
            .reshape((o, self.kt * c, ks, ks))?;
        let y = frames.conv2d(&k, self.pad_s, self.stride_s, 1, 1)?;
        let (_, o, ho, wo) = y.dims4()?;
        let y = y
            .reshape((b, f_out, o, ho, wo))?
            .permute((0, 2, 1, 3, 4))?
            .contiguous()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, o, 1, 1, 1))?)?)
    }
}

/// Group normalization over (n, c, ...) inputs.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        max_groups: usize,
    ) -> Result<Self> {
        let gamma = store.get(&format!("{name}.gamma"), &[channels], Init::Ones, rng)?;
        let beta = store.get(&format!("{name}.beta"), &[channels], Init::Zeros, rng)?;
        Ok(Self {
            gamma,
            beta,
            groups: group_count(channels, max_groups),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (n, c) = (dims[0], dims[1]);
        let x3 = x.reshape((n, self.groups, ()))?;
        let mean = x3.mean_keepdim(D::Minus1)?;
        let centered = x3.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let mut affine_shape = vec![1, c];
        affine_shape.extend(std::iter::repeat_n(1, dims.len() - 2));
        let y = normed
            .reshape(dims.as_slice())?
            .broadcast_mul(&self.gamma.reshape(affine_shape.as_slice())?)?
            .broadcast_add(&self.beta.reshape(affine_shape.as_slice())?)?;
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::nn::to_vec_f64;

    /// Direct 6-loop 3D convolution with zero padding.
    fn conv3d_oracle(
        x: &[f64],
        (b, c, f, h, w): (usize, usize, usize, usize, usize),
        k: &[f64],
        (o, kt, ks): (usize, usize, usize),
        bias: &[f64],
        (st, ss): (usize, usize),
    ) -> Vec<f64> {
        let (pt, ps) = (kt / 2, ks / 2);
        let fo = (f + 2 * pt - kt) / st + 1;
        let ho = (h + 2 * ps - ks) / ss + 1;
        let wo = (w + 2 * ps - ks) / ss + 1;
        let mut out = vec![0.0; b * o * fo * ho * wo];
        for bi in 0..b {
            for oi in 0..o {
                for fi in 0..fo {
                    for hi in 0..ho {
                        for wi in 0..wo {
                            let mut s = bias[oi];
                            for ci in 0..c {
                                for a in 0..kt {
                                    for p in 0..ks {
                                        for q in 0..ks {
                                            let ff = (fi * st + a) as isize - pt as isize;
                                            let hh = (hi * ss + p) as isize - ps as isize;
                                            let ww = (wi * ss + q) as isize - ps as isize;
                                            if ff < 0
                                                || hh < 0
                                                || ww < 0
                                                || ff >= f as isize
                                                || hh >= h as isize
                                                || ww >= w as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((bi * c + ci) * f + ff as usize) * h
                                                + hh as usize)
                                                * w
                                                + ww as usize;
                                            let ki = (((oi * c + ci) * kt + a) * ks + p) * ks + q;
                                            s += x[xi] * k[ki];
                                        }
                                    }
                                }
                            }
                            out[(((bi * o + oi) * fo + fi) * ho + hi) * wo + wi] = s;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new(DType::F64);
        let conv = Conv3d::new(&mut store, &mut rng, "c", 2, 3, 3, 3, 2, 2).unwrap();
        let dims = (2, 2, 5, 6, 6);
        let n = 2 * 2 * 5 * 6 * 6;
        let xs: Vec<f64> = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let x = Tensor::from_vec(xs.clone(), (2, 2, 5, 6, 6), &candle_core::Device::Cpu).unwrap();
        let got = to_vec_f64(&conv.forward(&x).unwrap()).unwrap();
        let k = store.values_f64("c.weight").unwrap();
        let b = store.values_f64("c.bias").unwrap();
        let want = conv3d_oracle(&xs, dims, &k, (3, 3, 3), &b, (2, 2));
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(DType::F64);
        let gn = GroupNorm::new(&mut store, &mut rng, "gn", 4, 2).unwrap();
        let xs: Vec<f64> = (0..32).map(|i| (i as f64).sin() * 3.0 + 1.0).collect();
        let x = Tensor::from_vec(xs, (1, 4, 2, 4), &candle_core::Device::Cpu).unwrap();
        let y = to_vec_f64(&gn.forward(&x).unwrap()).unwrap();
        for g in y.chunks(16) {
            let m: f64 = g.iter().sum::<f64>() / 16.0;
            let v: f64 = g.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn group_count_divides() {
        assert_eq!(group_count(32, 8), 8);
        assert_eq!(group_count(12, 8), 6);
        assert_eq!(group_count(3, 8), 3);
        assert_eq!(group_count(7, 4), 1);
    }
}
