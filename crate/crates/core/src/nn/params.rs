use std::collections::HashMap;
use std::sync::Arc;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Tensor, Var};
use crate::archive::TensorArchive;
use crate::error::{Error, Result};

/// Round every value to the nearest `f32`, so that archives round-trip exactly.
pub fn quantize(t: &mut Tensor) {
    t.mapv_inplace(|v| v as f32 as f64);
}

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Arc<Tensor>)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor) {
        let name = name.into();
        quantize(&mut value);
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = Arc::new(value),
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, Arc::new(value)));
            }
        }
    }

    /// He-normal (`std = sqrt(2 / fan_in)`) 3×3 conv weight plus zero bias.
    pub fn init_conv(&mut self, name: &str, out_ch: usize, in_ch: usize, rng: &mut impl Rng) {
        let fan_in = (in_ch * 9) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let w = Tensor::from_shape_simple_fn(IxDyn(&[out_ch, in_ch, 3, 3]), || normal.sample(rng));
        self.insert(format!("{name}.weight"), w);
        self.insert(format!("{name}.bias"), Tensor::zeros(IxDyn(&[out_ch])));
    }

    /// He-normal affine layer `out × in` plus zero bias.
    pub fn init_linear(&mut self, name: &str, out_dim: usize, in_dim: usize, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).unwrap();
        let w = Tensor::from_shape_simple_fn(IxDyn(&[out_dim, in_dim]), || normal.sample(rng));
        self.insert(format!("{name}.weight"), w);
        self.insert(format!("{name}.bias"), Tensor::zeros(IxDyn(&[out_dim])));
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(Arc::make_mut(&mut self.entries[i].1))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(Arc::clone(t), trainable)))
            .collect();
        Bound { vars }
    }

    pub fn write_into(&self, archive: &mut TensorArchive) {
        for (name, t) in self.iter() {
            archive.insert(name, t.clone());
        }
    }

    /// Replaces every parameter with the archive entry of the same name and shape.
    pub fn load_from(&mut self, archive: &TensorArchive) -> Result<()> {
        for i in 0..self.entries.len() {
            let name = self.entries[i].0.clone();
            let stored = archive.get(&name).ok_or_else(|| Error::Load {
                layer: name.clone(),
                reason: "missing from archive".into(),
            })?;
            if stored.shape() != self.entries[i].1.shape() {
                return Err(Error::Load {
                    layer: name.clone(),
                    reason: format!(
                        "shape {:?} does not match expected {:?}",
                        stored.shape(),
                        self.entries[i].1.shape()
                    ),
                });
            }
            self.entries[i].1 = Arc::new(stored.clone());
        }
        Ok(())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_identical(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Graph variables for a bound [`ParamSet`].
#[derive(Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn weight_bias(&self, layer: &str) -> (Var, Var) {
        (self.var(&format!("{layer}.weight")), self.var(&format!("{layer}.bias")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}
