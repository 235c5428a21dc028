use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VSTP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable tensors in insertion order, with their gradients and
/// Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Entry>,
    rng_seed: u64,
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            entries: IndexMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let n = value.numel();
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad: None,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).and_then(|e| e.grad.as_deref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            match &mut e.grad {
                Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
                None => e.grad = Some(vec![0.0; e.value.numel()]),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    pub fn set_grad(&mut self, name: &str, grad: Vec<f64>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if grad.len() != e.value.numel() {
            return Err(Error::Dimension {
                op: "set_grad",
                lhs: e.value.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        e.grad = Some(grad);
        Ok(())
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(|e| e.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.entries.values_mut().filter_map(|e| e.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    /// One Adam update with bias correction. `step` counts from 1.
    pub fn adam_step(&mut self, cfg: &AdamConfig, step: u64) -> Result<()> {
        if step == 0 {
            return Err(Error::contract("adam step counter starts at 1"));
        }
        if let Some((name, _)) = self.entries.iter().find(|(_, e)| e.grad.is_none()) {
            return Err(Error::contract(format!("parameter {name} has no gradient")));
        }
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        for e in self.entries.values_mut() {
            let g = e.grad.as_ref().expect("checked above");
            let w = e.value.data_mut();
            for i in 0..w.len() {
                e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g[i];
                e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Adam first and second moments as two stores sharing this store's names.
    pub fn moments(&self) -> (ParameterStore, ParameterStore) {
        let mut m = ParameterStore::new(self.rng_seed);
        let mut v = ParameterStore::new(self.rng_seed);
        for (name, e) in &self.entries {
            let shape = e.value.shape().to_vec();
            m.entries.insert(name.clone(), Entry::plain(Tensor::from_parts(shape.clone(), e.m.clone())));
            v.entries.insert(name.clone(), Entry::plain(Tensor::from_parts(shape, e.v.clone())));
        }
        (m, v)
    }

    pub fn set_moments(&mut self, m: &ParameterStore, v: &ParameterStore) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            let (Some(mt), Some(vt)) = (m.get(name), v.get(name)) else {
                return Err(Error::format("optimizer state", format!("missing moments for {name}")));
            };
            if mt.numel() != e.m.len() || vt.numel() != e.v.len() {
                return Err(Error::format("optimizer state", format!("moment size mismatch for {name}")));
            }
            e.m.copy_from_slice(mt.data());
            e.v.copy_from_slice(vt.data());
        }
        Ok(())
    }

    /// Copies values (not gradients or moments) from `other` for every
    /// name present in both stores; shapes must agree.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} tensors, found {}", self.len(), other.len()),
            ));
        }
        for (name, e) in self.entries.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if src.shape() != e.value.shape() {
                return Err(Error::Dimension {
                    op: "load parameters",
                    lhs: e.value.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            e.value = src.clone();
        }
        Ok(())
    }

    /// Initializes a tensor with uniform Glorot scaling.
    pub fn init_glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, e) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let shape = e.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in e.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |detail: String| Error::format("parameter file", detail);
        let mut u32_buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32_buf).map_err(|e| bad(e.to_string()))?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(r)?;
        let mut store = ParameterStore::new(0);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut f64_buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut f64_buf).map_err(|e| bad(e.to_string()))?;
                data.push(f64::from_le_bytes(f64_buf));
            }
            let value = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
            store.insert(&name, value)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
            return Err(bad("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Entry {
    fn plain(value: Tensor) -> Self {
        let n = value.numel();
        Self {
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_store(w: f64) -> ParameterStore {
        let mut s = ParameterStore::new(0);
        s.insert("w", Tensor::vector(vec![w])).unwrap();
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias-corrected m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps)
        let mut s = scalar_store(1.0);
        s.set_grad("w", vec![1.0]).unwrap();
        s.adam_step(&AdamConfig { lr: 0.1, ..Default::default() }, 1).unwrap();
        let w = s.get("w").unwrap().item();
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut s = scalar_store(0.25);
        s.zero_grads();
        s.adam_step(&AdamConfig::default(), 1).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.25);
    }

    #[test]
    fn adam_repeated_steps_move_against_gradient() {
        let mut s = scalar_store(0.0);
        let mut prev = 0.0;
        for step in 1..=3 {
            s.set_grad("w", vec![2.0]).unwrap();
            s.adam_step(&AdamConfig::default(), step).unwrap();
            let w = s.get("w").unwrap().item();
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn adam_requires_gradients() {
        let mut s = scalar_store(1.0);
        assert!(matches!(s.adam_step(&AdamConfig::default(), 1), Err(Error::Contract(_))));
        s.zero_grads();
        assert!(s.adam_step(&AdamConfig::default(), 0).is_err());
    }

    #[test]
    fn clip_with_infinite_threshold_is_identity() {
        let mut s = scalar_store(1.0);
        s.set_grad("w", vec![123.0]).unwrap();
        let before = s.clone();
        s.clip_grad_norm(f64::INFINITY);
        assert_eq!(s, before);
        s.clip_grad_norm(1.0);
        assert!((s.grad("w").unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scalar_store(1.0);
        assert!(s.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn file_layout_matches_format() {
        let mut s = ParameterStore::new(0);
        s.insert("ab", Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap()).unwrap();
        let bytes = s.to_bytes();
        let mut expected = b"VSTP".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.5f64.to_le_bytes());
        expected.extend((-2.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corrupt_files() {
        let s = scalar_store(3.0);
        let mut bytes = s.to_bytes();
        bytes[0] = b'X';
        assert!(ParameterStore::from_bytes(&bytes).is_err());
        let bytes = s.to_bytes();
        assert!(ParameterStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bytes = s.to_bytes();
        bytes.push(0);
        assert!(ParameterStore::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn serialization_round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            split in 1usize..5,
        ) {
            let mut s = ParameterStore::new(0);
            let n = values.len();
            let rows = if n % split == 0 { split } else { 1 };
            s.insert("layer.weight", Tensor::new(vec![rows, n / rows], values.clone()).unwrap()).unwrap();
            s.insert("bias", Tensor::vector(values.iter().rev().copied().collect())).unwrap();
            let bytes = s.to_bytes();
            let back = ParameterStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let orig: Vec<u64> = s.get("layer.weight").unwrap().data().iter().map(|x| x.to_bits()).collect();
            let got: Vec<u64> = back.get("layer.weight").unwrap().data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(orig, got);
        }
    }
}
