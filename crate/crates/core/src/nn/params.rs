use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Initialization rule for a freshly created parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    Uniform { bound: f64 },
}

impl Init {
    /// PyTorch-style default for a layer with the given fan-in.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }
}

struct Entry {
    var: Var,
    frozen: bool,
}

/// Per-parameter description written into checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub numel: usize,
}

/// Named parameters with frozen flags.
///
/// Models obtain their weights through [`ParamStore::get`]. Frozen
/// parameters are handed out detached, so no gradient is ever computed for
/// them; this means a model must be (re)built after its parameters are
/// frozen.
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Fetch `name`, creating it with `init` when absent.
    pub fn get<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<Tensor> {
        if let Some(e) = self.entries.get(name) {
            if e.var.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, requested {:?}",
                    e.var.dims(),
                    shape
                )));
            }
        } else {
            let n: usize = shape.iter().product();
            let values = init.sample(n, rng);
            let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
            let var = Var::from_tensor(&t)?;
            self.entries
                .insert(name.to_string(), Entry { var, frozen: false });
        }
        self.tensor(name)
    }

    /// Tensor view of an existing parameter; detached when frozen.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        if e.frozen {
            Ok(e.var.as_tensor().detach())
        } else {
            Ok(e.var.as_tensor().clone())
        }
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.frozen).unwrap_or(false)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        e.frozen = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.frozen = true;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries
            .values()
            .filter(|e| !e.frozen)
            .map(|e| e.var.clone())
            .collect()
    }

    /// Total number of scalar entries over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| !e.frozen)
            .map(|e| e.var.elem_count())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|e| e.var.elem_count()).sum()
    }

    pub fn infos(&self) -> Vec<ParamInfo> {
        self.entries
            .iter()
            .map(|(name, e)| ParamInfo {
                name: name.clone(),
                shape: e.var.dims().to_vec(),
                frozen: e.frozen,
                numel: e.var.elem_count(),
            })
            .collect()
    }

    /// Overwrite a parameter's values in place (shape must match).
    pub fn assign(&self, name: &str, values: &Tensor) -> Result<()> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        e.var.set(&values.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Flattened parameter values in f64.
    pub fn values_f64(&self, name: &str) -> Result<Vec<f64>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        super::to_vec_f64(e.var.as_tensor())
    }

    /// Little-endian payload of all parameters in name order.
    pub fn to_payload(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for e in self.entries.values() {
            let flat = e.var.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F32 => {
                    for v in flat.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                other => return Err(invalid!("unsupported parameter dtype {other:?}")),
            }
        }
        Ok(out)
    }

    /// Rebuild a store from manifest infos and a payload written by
    /// [`ParamStore::to_payload`].
    pub fn from_payload(infos: &[ParamInfo], payload: &[u8], dtype: DType) -> Result<Self> {
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
            other => return Err(invalid!("unsupported parameter dtype {other:?}")),
        };
        let mut sorted: Vec<&ParamInfo> = infos.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let expected: usize = sorted.iter().map(|i| i.numel * width).sum();
        if expected != payload.len() {
            return Err(Error::Shape(format!(
                "payload holds {} bytes, manifest describes {expected}",
                payload.len()
            )));
        }
        let mut store = ParamStore::new(dtype);
        let mut offset = 0;
        for info in sorted {
            let bytes = &payload[offset..offset + info.numel * width];
            offset += info.numel * width;
            let t = match dtype {
                DType::F32 => {
                    let v: Vec<f32> = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, info.shape.as_slice(), &store.device)?
                }
                _ => {
                    let v: Vec<f64> = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, info.shape.as_slice(), &store.device)?
                }
            };
            store.entries.insert(
                info.name.clone(),
                Entry {
                    var: Var::from_tensor(&t)?,
                    frozen: info.frozen,
                },
            );
        }
        Ok(store)
    }

    /// Deep copy with independent storage, optionally cast to another dtype.
    pub fn deep_clone(&self, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(dtype);
        for (name, e) in &self.entries {
            let t = e.var.as_tensor().to_dtype(dtype)?.copy()?;
            store.entries.insert(
                name.clone(),
                Entry {
                    var: Var::from_tensor(&t)?,
                    frozen: e.frozen,
                },
            );
        }
        Ok(store)
    }

    /// Replace every parameter with N(0, std^2) draws.
    pub fn randomize<R: Rng + ?Sized>(&self, std: f64, rng: &mut R) -> Result<()> {
        for e in self.entries.values() {
            let n = e.var.elem_count();
            let values = Init::Normal { std }.sample(n, rng);
            let t = Tensor::from_vec(values, e.var.dims(), &self.device)?.to_dtype(self.dtype)?;
            e.var.set(&t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn payload_round_trip_is_byte_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(DType::F32);
        store.get("b.w", &[3, 2], Init::Normal { std: 1.0 }, &mut rng).unwrap();
        store.get("a.bias", &[4], Init::fan_in(4), &mut rng).unwrap();
        store.set_frozen("a.bias", true).unwrap();
        let payload = store.to_payload().unwrap();
        let back = ParamStore::from_payload(&store.infos(), &payload, DType::F32).unwrap();
        assert_eq!(back.to_payload().unwrap(), payload);
        assert!(back.is_frozen("a.bias"));
        assert!(!back.is_frozen("b.w"));
    }

    #[test]
    fn frozen_parameters_are_detached() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64);
        store.get("w", &[2], Init::Ones, &mut rng).unwrap();
        store.set_frozen("w", true).unwrap();
        let w = store.tensor("w").unwrap();
        let loss = w.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(store.var("w").unwrap()).is_none());
    }

    #[test]
    fn shape_conflict_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F32);
        store.get("w", &[2], Init::Zeros, &mut rng).unwrap();
        assert!(matches!(
            store.get("w", &[3], Init::Zeros, &mut rng),
            Err(Error::Shape(_))
        ));
    }
}
