//! Named parameter storage and the pass context that binds parameters into
//! a computation graph.
//!
//! Parameters live in a flat, creation-ordered store (`f32`). Each forward
//! pass lazily binds every parameter it touches as a graph leaf; gradients
//! are read back per parameter after `backward`. Actnorm's data-dependent
//! initialization mutates the store mid-pass and rebinds, which is why the
//! context holds a mutable store reference.

use crate::error::{Error, Result};
use crate::numerics::graph::{Grads, Graph, Var};
use crate::numerics::real::Real;
use crate::numerics::tensor::{Tensor, Tensor4};
use std::collections::HashMap;

/// Stable handle to one parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Entry {
    name: String,
    value: Tensor4,
}

/// All trainable tensors of a model, keyed by unique name path.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor4) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor4 {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.entries[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Handle for the i-th parameter in creation order.
    pub fn id_at(&self, index: usize) -> ParamId {
        debug_assert!(index < self.entries.len());
        ParamId(index)
    }

    /// Replaces a value, enforcing the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor4) -> Result<()> {
        let cur = &self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::ParamShapeConflict {
                name: self.entries[id.0].name.clone(),
                expected: cur.shape().to_string(),
                got: value.shape().to_string(),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor4)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }
}

/// One forward pass: graph + parameter bindings + pass-wide flags.
pub struct PassCtx<'a, R: Real> {
    pub g: &'a mut Graph<R>,
    pub store: &'a mut ParamStore,
    bound: Vec<Option<Var>>,
    /// Leaves are created differentiable only when training.
    pub train: bool,
    /// When set, actnorm layers initialize from their incoming activations.
    pub actnorm_init: bool,
    /// When present, actnorm layers append (layer name, output) here so a
    /// caller can audit post-normalization statistics.
    pub actnorm_trace: Option<Vec<(String, Var)>>,
}

impl<'a, R: Real> PassCtx<'a, R> {
    pub fn new(g: &'a mut Graph<R>, store: &'a mut ParamStore, train: bool) -> Self {
        let n = store.len();
        PassCtx {
            g,
            store,
            bound: vec![None; n],
            train,
            actnorm_init: false,
            actnorm_trace: None,
        }
    }

    /// Graph leaf for a parameter, bound on first use and cached.
    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let t: Tensor<R> = self.store.value(id).cast();
        let v = self.g.leaf(t, self.train);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Re-binds after the stored value changed mid-pass (actnorm init).
    pub fn rebind(&mut self, id: ParamId) -> Var {
        let t: Tensor<R> = self.store.value(id).cast();
        let v = self.g.leaf(t, self.train);
        self.bound[id.index()] = Some(v);
        v
    }

    /// (parameter, leaf) pairs bound during this pass, for gradient readout.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    /// Collects per-parameter gradients (f32) after a backward sweep.
    /// Unbound or disconnected parameters get `None`.
    pub fn collect_grads(&self, grads: &Grads<R>) -> Vec<Option<Tensor4>> {
        let mut out: Vec<Option<Tensor4>> = vec![None; self.store.len()];
        for (id, var) in self.bound_params() {
            if let Some(t) = grads.get(var) {
                out[id.index()] = Some(t.cast());
            }
        }
        out
    }
}
