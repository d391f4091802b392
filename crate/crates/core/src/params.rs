//! Named parameter storage and the per-pass graph that binds it to a tape.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Fault, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Trainable tensors keyed by dotted names (`fs.0.gate.w_q`).
///
/// Iteration order is lexicographic, which fixes the order of every
/// reduction over parameters (optimizer updates, checkpoint files).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Writes one `<name>.tdmp` per tensor into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, t) in &self.tensors {
            t.save(dir.join(format!("{name}.tdmp")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut store = Self::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let file = entry.file_name();
            let file = file.to_string_lossy();
            if let Some(name) = file.strip_suffix(".tdmp") {
                store.insert(name, Tensor::load(entry.path())?);
            }
        }
        Ok(store)
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => return Err(Error::ConfigMismatch(format!("missing parameter `{name}`"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::ConfigMismatch(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(Error::ConfigMismatch(format!(
                "unexpected parameter `{extra}`"
            )));
        }
        Ok(())
    }

    // ---- initializers

    pub fn init_normal<R: Rng>(&mut self, rng: &mut R, name: &str, shape: &[usize], std: f64) {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect::<Vec<f64>>();
        self.insert(
            name,
            Tensor::new(shape.to_vec(), data).expect("shape/product"),
        );
    }

    /// Uniform `±1/√fan_in`, the usual default for dense layers.
    pub fn init_linear<R: Rng>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(
            format!("{prefix}.w"),
            Tensor::matrix(fan_in, fan_out, w).expect("shape"),
        );
        if bias {
            let b = (0..fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            self.insert(format!("{prefix}.b"), Tensor::from_vec(b));
        }
    }

    pub fn init_layer_norm(&mut self, prefix: &str, dim: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    #[doc(hidden)]
    pub fn with_fault(store: &'p ParamStore, fault: Option<Fault>) -> Self {
        let tape = match fault {
            Some(f) => Tape::with_fault(f),
            None => Tape::new(),
        };
        Self {
            tape,
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Leaf for parameter `name`, recorded on first use only.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("unknown parameter `{name}`")))?;
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Gradients for every stored parameter after `tape.backward`; parameters
    /// the pass never touched get zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.store
            .iter()
            .map(|(name, t)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| self.tape.grad(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                (name.to_string(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unused_params_get_zero_grads() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(vec![1.0, 2.0]));
        store.insert("b", Tensor::from_vec(vec![3.0]));
        let mut g = Graph::new(&store);
        let a = g.param("a").unwrap();
        let a2 = g.param("a").unwrap();
        assert_eq!(a, a2);
        let sq = g.tape.mul(a, a).unwrap();
        let loss = g.tape.sum(sq);
        g.tape.backward(loss).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads["a"], vec![2.0, 4.0]);
        assert_eq!(grads["b"], vec![0.0]);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.init_linear(&mut rng, "enc.proj", 4, 3, true);
        store.init_layer_norm("enc.ln", 3);
        let dir = tempfile::tempdir().unwrap();
        store.save_dir(dir.path()).unwrap();
        let back = ParamStore::load_dir(dir.path()).unwrap();
        assert_eq!(back, store);
        store.check_compatible(&back).unwrap();
    }

    #[test]
    fn incompatible_store_is_rejected() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::zeros(&[2]));
        let mut b = ParamStore::new();
        b.insert("x", Tensor::zeros(&[3]));
        assert!(matches!(
            a.check_compatible(&b),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
