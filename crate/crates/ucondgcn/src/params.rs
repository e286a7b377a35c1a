//! Named parameter storage shared by all layers.
//!
//! A [`ParamStore`] owns every tensor a model learns (weights, biases,
//! connection-matrix bases) plus non-trainable state (normalization running
//! statistics), in declaration order. Before each forward pass the trainable
//! entries are bound onto a fresh tape as gradient leaves via [`bind_all`];
//! optimizers then address gradients and values through [`ParamId`]s.

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Stable handle to one entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One named tensor: a learnable parameter or persistent state.
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Trainable entries receive optimizer updates; state entries (running
    /// statistics) are updated by the layers that own them.
    pub trainable: bool,
}

/// Declaration-ordered collection of parameters and state.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Declares a trainable parameter.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    /// Declares non-trainable persistent state.
    pub fn add_state(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Ids of all trainable entries, in declaration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalar_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }
}

/// The tape locations of a store's entries for one forward pass.
pub struct ParamBinding {
    vars: Vec<Var>,
}

impl ParamBinding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Copies every entry onto `tape` as a leaf; trainable entries are marked as
/// gradient targets.
pub fn bind_all(store: &ParamStore, tape: &mut Tape) -> ParamBinding {
    let vars = store
        .entries
        .iter()
        .map(|e| {
            let t = e.value.clone();
            tape.leaf(if e.trainable { t.with_grad() } else { t })
        })
        .collect();
    ParamBinding { vars }
}

/// Checks every trainable gradient for finiteness, naming the offending
/// parameter group on failure, and returns gradients in `trainable_ids`
/// order.
pub fn collect_gradients(
    store: &ParamStore,
    binding: &ParamBinding,
    grads: &crate::diffcore::Gradients,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for (i, e) in store.entries.iter().enumerate() {
        if !e.trainable {
            continue;
        }
        let g = grads.grad_or_zero(binding.var(ParamId(i)), e.value.numel());
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {}", e.name)));
        }
        out.push(g);
    }
    Ok(out)
}
