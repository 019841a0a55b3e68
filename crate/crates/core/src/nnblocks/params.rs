use std::collections::HashMap;
use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Real, Rng, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Adds a tensor sampled from N(0, std²).
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        std: f64,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let t = rng.normal_tensor(shape, std);
        self.add(name, t)
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, T::from_f64(value)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.values.iter_mut()
    }

    /// Overwrites an existing tensor; shapes must agree.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter {} has shape {:?}, replacement has {:?}",
                self.names[id.0],
                cur.shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Overwrites every tensor named `{prefix}<rest>` with `src`'s
    /// `{src_prefix}<rest>`; returns how many were copied.
    pub fn copy_prefixed(&mut self, prefix: &str, src: &ParamStore<T>, src_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for i in 0..self.names.len() {
            let Some(rest) = self.names[i].strip_prefix(prefix) else {
                continue;
            };
            let src_name = format!("{src_prefix}{rest}");
            let value = src
                .by_name(&src_name)
                .ok_or_else(|| Error::Config(format!("source has no parameter {src_name}")))?;
            self.set(ParamId(i), value.clone())?;
            copied += 1;
        }
        Ok(copied)
    }

    /// Registers every tensor on the graph, as grad-enabled leaves when
    /// `trainable(name)` holds and as constants otherwise.
    pub fn bind_with(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| {
                if trainable(n) {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Binding {
        self.bind_with(g, |_| trainable)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and f32 little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.iter() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in value.data() {
                h.update((x.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Graph variables for every tensor in a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Same binding with one parameter routed to a different variable.
    pub fn with(&self, id: ParamId, var: Var) -> Self {
        let mut vars = self.vars.clone();
        vars[id.0] = var;
        Binding { vars }
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
