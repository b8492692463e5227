use indexmap::IndexMap;

use super::element::Element;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named, ordered collection of tensors. Entry `i` of a gradient set
/// always corresponds to entry `i` of the parameter set it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<V> {
    entries: IndexMap<String, V>,
}

impl<V> Default for ParamSet<V> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<V> ParamSet<V> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: V) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Structure(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&V> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut V> {
        self.entries.get_mut(name)
    }

    pub(crate) fn expect(&self, name: &str) -> Result<&V> {
        self.get(name)
            .ok_or_else(|| Error::Structure(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &V)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut V)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn values(&self) -> impl Iterator<Item = &V> {
        self.entries.values()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &V) -> U) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), f(k, v)))
                .collect(),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &V) -> Result<U>) -> Result<ParamSet<U>> {
        let mut entries = IndexMap::with_capacity(self.len());
        for (k, v) in &self.entries {
            entries.insert(k.clone(), f(k, v)?);
        }
        Ok(ParamSet { entries })
    }

    /// Appends every entry of `other`; names must stay unique.
    pub fn extend(&mut self, other: ParamSet<V>) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Entries whose name satisfies `keep`, in order.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamSet<V>
    where
        V: Clone,
    {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    fn check_names<U>(&self, other: &ParamSet<U>) -> Result<()> {
        if self.len() != other.len() || self.names().zip(other.names()).any(|(a, b)| a != b) {
            return Err(Error::Structure(format!(
                "parameter sets differ in names or order: {:?} vs {:?}",
                self.names().collect::<Vec<_>>(),
                other.names().collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

impl<T: Element> ParamSet<Tensor<T>> {
    /// Names, order and shapes all match.
    pub fn check_compatible(&self, other: &ParamSet<Tensor<T>>) -> Result<()> {
        self.check_names(other)?;
        for ((name, a), b) in self.iter().zip(other.values()) {
            if a.shape() != b.shape() {
                return Err(Error::Structure(format!(
                    "parameter {name:?} has shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_compatible(&self, other: &ParamSet<Tensor<T>>) -> bool {
        self.check_compatible(other).is_ok()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn numel(&self) -> usize {
        self.values().map(Tensor::len).sum()
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ParamSet<Tensor<T>>, scale: T) -> Result<()> {
        self.check_compatible(other)?;
        for ((_, a), b) in self.iter_mut().zip(other.values()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + scale * y;
            }
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Element>(&self) -> ParamSet<Tensor<U>> {
        self.map(|_, t| t.cast())
    }

    /// Flattened copy of all elements in entry order.
    pub fn flatten(&self) -> Vec<T> {
        self.values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ParamSet::flatten`] against this set's structure.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::Structure(format!(
                "expected {} values, got {}",
                self.numel(),
                flat.len()
            )));
        }
        let mut off = 0;
        self.try_map(|_, t| {
            let n = t.len();
            let out = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec());
            off += n;
            out
        })
    }
}

impl<'t, T: Element> ParamSet<Var<'t, T>> {
    pub fn values_host(&self) -> ParamSet<Tensor<T>> {
        self.map(|_, v| v.value())
    }

    pub fn stop_gradient(&self) -> Self {
        self.map(|_, v| v.stop_gradient())
    }
}

impl<T: Element> Tape<T> {
    pub fn leaves<'t>(&'t self, params: &ParamSet<Tensor<T>>) -> ParamSet<Var<'t, T>> {
        params.map(|_, t| self.leaf(t))
    }

    pub fn constants<'t>(&'t self, params: &ParamSet<Tensor<T>>) -> ParamSet<Var<'t, T>> {
        params.map(|_, t| self.constant(t))
    }

    /// [`Tape::gradients`] over a named set; the result has the same
    /// names, order and shapes as `wrt`.
    pub fn gradients_set<'t>(
        &'t self,
        loss: &Var<'t, T>,
        wrt: &ParamSet<Var<'t, T>>,
        create_graph: bool,
    ) -> Result<ParamSet<Var<'t, T>>> {
        let vars: Vec<Var<'t, T>> = wrt.values().copied().collect();
        let grads = self.gradients(loss, &vars, create_graph)?;
        let mut it = grads.into_iter();
        Ok(wrt.map(|_, _| it.next().expect("one gradient per entry")))
    }
}
