use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    var: Var,
    trainable: bool,
}

/// Ordered registry of every parameter and buffer of a network.
///
/// Insertion order is the iteration order, which keeps optimizer state,
/// EMA updates and checkpoint layout deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<Entry>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            entries: Vec::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: String, tensor: Tensor, trainable: bool) -> Result<Var> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        self.entries.push(Entry {
            name,
            var: var.clone(),
            trainable,
        });
        Ok(var)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn named_trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| (e.name.as_str(), &e.var))
    }

    /// Parameters and buffers alike.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Var, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.var, e.trainable))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.var)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Copies every entry of `other` whose name (after stripping nothing)
    /// exists here. Shapes must match; names missing on either side are
    /// reported.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let mut problems = Vec::new();
        for e in &self.entries {
            match other.get(&e.name) {
                Some(src) if src.dims() == e.var.dims() => {
                    e.var.set(&src.as_tensor().to_dtype(self.dtype)?)?
                }
                Some(src) => problems.push(format!(
                    "{}: shape {:?} vs {:?}",
                    e.name,
                    e.var.dims(),
                    src.dims()
                )),
                None => problems.push(format!("{}: missing in source", e.name)),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Loads named tensors (e.g. from a checkpoint) under an optional prefix.
    /// Every entry of this store must be present with a matching shape.
    pub fn load_named(&self, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let mut problems = Vec::new();
        for e in &self.entries {
            let key = format!("{prefix}{}", e.name);
            match tensors.iter().find(|(n, _)| *n == key) {
                Some((_, t)) if t.dims() == e.var.dims() => e.var.set(&t.to_dtype(self.dtype)?)?,
                Some((_, t)) => problems.push(format!(
                    "{key}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    e.var.dims()
                )),
                None => problems.push(format!("{key}: missing from checkpoint")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Loads exactly the entries whose names start with `scope`. Entries
    /// missing from `tensors`, shape mismatches and scoped tensors with no
    /// matching entry are all reported together.
    pub fn load_scoped(&self, scope: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let mut problems = Vec::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(scope)) {
            match tensors.iter().find(|(n, _)| *n == e.name) {
                Some((_, t)) if t.dims() == e.var.dims() => e.var.set(&t.to_dtype(self.dtype)?)?,
                Some((_, t)) => problems.push(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    e.name,
                    t.dims(),
                    e.var.dims()
                )),
                None => problems.push(format!("{}: missing from checkpoint", e.name)),
            }
        }
        for (n, _) in tensors.iter().filter(|(n, _)| n.starts_with(scope)) {
            if self.get(n).is_none() {
                problems.push(format!("{n}: not present in the model"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.name.clone(), e.var.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        self.load_named("", snapshot)
    }

    /// Flat f64 copy of all values, mostly for tests and fingerprints.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend(
                e.var
                    .as_tensor()
                    .flatten_all()?
                    .to_dtype(DType::F64)?
                    .to_vec1::<f64>()?,
            );
        }
        Ok(out)
    }
}

/// Hands out initialized parameters under a hierarchical name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = self.path(name);
        Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.store.dtype)?)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        let t = self.tensor(data, shape)?;
        let path = self.path(name);
        self.store.insert(path, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        let t = self.tensor(vec![value; n], shape)?;
        let path = self.path(name);
        self.store.insert(path, t, trainable)
    }
}
