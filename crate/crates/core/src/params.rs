//! Named parameter collections and their binding onto a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::dataset_io::CheckpointArchive;
use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from hierarchical names (`fen/col1/conv1/weight`) to tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count of tensors whose name passes `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Sub-store of every tensor whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.tensors.retain(|n, _| keep(n));
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Places every tensor on `g`; names passing `trainable` get gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.clone(), trainable(n))))
            .collect();
        Bound { vars }
    }

    pub fn to_archive(&self, metadata: BTreeMap<String, String>) -> CheckpointArchive {
        let mut archive = CheckpointArchive::new();
        for (name, t) in &self.tensors {
            archive
                .push(
                    name,
                    t.shape().iter().map(|&d| d as u32).collect(),
                    t.data().iter().map(|v| v.as_f32()).collect(),
                )
                .expect("store names are unique");
        }
        archive.metadata = metadata;
        archive
    }

    /// Loads every archive entry whose name passes `filter`.
    pub fn from_archive(archive: &CheckpointArchive, filter: impl Fn(&str) -> bool) -> Self {
        let mut store = ParamStore::new();
        for e in archive.entries() {
            if filter(&e.name) {
                let shape: Vec<usize> = e.shape.iter().map(|&d| d as usize).collect();
                let data = e.data.iter().map(|&v| T::of(v as f64)).collect();
                store.insert(
                    e.name.clone(),
                    Tensor::from_vec(&shape, data).expect("archive entries are shape-consistent"),
                );
            }
        }
        store
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Collects gradients for every bound name that has one.
    pub fn gradients<T: Scalar>(&self, grads: &mut Grads<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            if let Some(gr) = grads.take(v) {
                out.insert(name.clone(), gr);
            }
        }
        out
    }
}

/// He-uniform initialisation: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-limit..limit)))
}

/// Glorot-uniform initialisation for dense and recurrent matrices.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-limit..limit)))
}

/// Adds a `[k,k,cin,cout]` He-initialised conv weight and zero bias under `prefix`.
pub fn add_conv<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
    rng: &mut R,
) {
    store.insert(format!("{prefix}/weight"), he_uniform(&[k, k, cin, cout], k * k * cin, rng));
    store.insert(format!("{prefix}/bias"), Tensor::zeros(&[cout]));
}

/// Same-padded conv plus bias, with the kernel size read from the weight.
pub fn conv<T: Scalar>(g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{prefix}/weight"))?;
    let bias = b.var(&format!("{prefix}/bias"))?;
    let c = g.conv2d(x, w)?;
    g.add_bias(c, bias)
}

pub fn conv_relu<T: Scalar>(g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let c = conv(g, b, prefix, x)?;
    Ok(g.relu(c))
}

/// `x·W + b` for `x: [N, in]`, `W: [in, out]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{prefix}/weight"))?;
    let bias = b.var(&format!("{prefix}/bias"))?;
    let m = g.matmul(x, w)?;
    g.add_bias(m, bias)
}
