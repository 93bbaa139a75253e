//! Named, seeded parameter storage.
//!
//! Every learnable tensor lives in a [`ParamStore`] under a slash-separated
//! module path (`rv/enc0/hdfe/stem/conv/weight`). Initial values are drawn from
//! a ChaCha stream seeded by the model config, so two constructions with the
//! same seed and the same config produce bit-identical parameters.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Debug)]
struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Init<'_> {
        Init {
            store: self,
            prefix: String::new(),
        }
    }

    /// All parameters, ordered by path.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Parameters whose path starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn get(&self, path: &str) -> Option<Var> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.vars.get(path).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("param store poisoned").vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Trainable scalar counts aggregated by the first `depth` path components.
    pub fn breakdown(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars() {
            let key = name
                .split('/')
                .take(depth.max(1))
                .collect::<Vec<_>>()
                .join("/");
            *out.entry(key).or_insert(0) += var.elem_count();
        }
        out
    }

    /// Overwrites the parameter at `path`. Shapes must agree.
    pub fn set(&self, path: &str, value: &Tensor) -> Result<()> {
        let var = self.get(path).ok_or_else(|| {
            crate::Error::Checkpoint(format!("no parameter named {path}"))
        })?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Sets every parameter under `prefix` to zero.
    pub fn zero_prefix(&self, prefix: &str) -> Result<()> {
        for var in self.vars_with_prefix(prefix) {
            var.set(&var.zeros_like()?)?;
        }
        Ok(())
    }

    /// Adds seeded uniform noise in `[-scale, scale]` to every parameter under
    /// `prefix`. Used to move zero-initialized projections off the identity.
    pub fn perturb(&self, prefix: &str, seed: u64, scale: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, var) in self.vars() {
            if !name.starts_with(prefix) {
                continue;
            }
            let noise: Vec<f64> = (0..var.elem_count())
                .map(|_| rng.random_range(-scale..=scale))
                .collect();
            let noise = Tensor::from_vec(noise, var.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&(var.as_tensor() + noise)?)?;
        }
        Ok(())
    }

    /// Order-sensitive 64-bit digest of every parameter's path and bits.
    pub fn digest(&self) -> Result<u64> {
        let mut h = crate::util::Fnv64::new();
        for (name, var) in self.vars() {
            h.write(name.as_bytes());
            let values = var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        Ok(h.finish())
    }

    fn insert(&self, path: String, values: Vec<f64>, shape: Shape) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        let mut inner = self.inner.lock().expect("param store poisoned");
        assert!(
            !inner.vars.contains_key(&path),
            "parameter {path} registered twice"
        );
        inner.vars.insert(path, var);
        Ok(tensor)
    }

    fn draw_uniform(&self, n: usize, bound: f64) -> Vec<f64> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        (0..n)
            .map(|_| inner.rng.random_range(-bound..=bound))
            .collect()
    }
}

/// A cursor into a [`ParamStore`] at a module path.
#[derive(Debug, Clone)]
pub struct Init<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Init<'a> {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        };
        Init {
            store: self.store,
            prefix,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn path(&self) -> &str {
        &self.prefix
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        }
    }

    /// Kaiming-uniform with negative slope sqrt(5): U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn kaiming<S: Into<Shape>>(&self, name: &str, shape: S, fan_in: usize) -> Result<Tensor> {
        let shape = shape.into();
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values = self.store.draw_uniform(shape.elem_count(), bound);
        self.store.insert(self.full(name), values, shape)
    }

    pub fn uniform<S: Into<Shape>>(&self, name: &str, shape: S, bound: f64) -> Result<Tensor> {
        let shape = shape.into();
        let values = self.store.draw_uniform(shape.elem_count(), bound);
        self.store.insert(self.full(name), values, shape)
    }

    pub fn constant<S: Into<Shape>>(&self, name: &str, shape: S, value: f64) -> Result<Tensor> {
        let shape = shape.into();
        let values = vec![value; shape.elem_count()];
        self.store.insert(self.full(name), values, shape)
    }

    pub fn zeros<S: Into<Shape>>(&self, name: &str, shape: S) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }

    pub fn ones<S: Into<Shape>>(&self, name: &str, shape: S) -> Result<Tensor> {
        self.constant(name, shape, 1.0)
    }

    pub fn from_values<S: Into<Shape>>(
        &self,
        name: &str,
        shape: S,
        values: Vec<f64>,
    ) -> Result<Tensor> {
        self.store.insert(self.full(name), values, shape.into())
    }

    /// Draws `n` values from the store's stream without registering anything.
    pub fn draw(&self, n: usize, bound: f64) -> Vec<f64> {
        self.store.draw_uniform(n, bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_parameters() {
        let build = |seed| {
            let store = ParamStore::new(seed, DType::F32, &Device::Cpu);
            let root = store.root();
            root.pp("a").kaiming("w", (4, 3, 3, 3), 27).unwrap();
            root.pp("a").zeros("b", 4).unwrap();
            store
        };
        let a = build(0);
        let b = build(0);
        let c = build(1);
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
        assert_eq!(a.num_scalars(), 4 * 27 + 4);
        assert_eq!(a.breakdown(1)["a"], 112);
    }

    #[test]
    fn kaiming_respects_bound() {
        let store = ParamStore::new(3, DType::F64, &Device::Cpu);
        let w = store.root().kaiming("w", (64, 16), 16).unwrap();
        let v = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 0.25));
        assert!(v.iter().any(|x| x.abs() > 0.2));
    }

    #[test]
    fn set_updates_shared_tensor() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let t = store.root().pp("m").zeros("w", 3).unwrap();
        store
            .set("m/w", &Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(t.to_vec1::<f64>().unwrap(), vec![1.0, 2.0, 3.0]);
    }
}
