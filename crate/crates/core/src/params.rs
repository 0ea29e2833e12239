//! Named parameter and buffer registry shared by every model component.

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Buffers (running statistics) are stored here too but never optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replace the value of an existing entry, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter `{}`: shape {:?} vs {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Record every entry on `g`: trainable ones as gradient leaves,
    /// buffers as constants.
    pub fn bind(&self, g: &mut Graph<S>) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.variable(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Bindings { vars }
    }
}

/// Graph handles for every entry of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running estimates are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// A pending running-statistics update from a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<S> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<S>,
}

/// Running-estimate momentum: `running ← 0.9·running + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

impl<S: Scalar> BnUpdate<S> {
    pub fn apply(&self, store: &mut ParamStore<S>) {
        let keep = S::from_f64(BN_MOMENTUM);
        let take = S::from_f64(1.0 - BN_MOMENTUM);
        for (id, batch) in [
            (self.running_mean, &self.stats.mean),
            (self.running_var, &self.stats.var),
        ] {
            let t = store.value_mut(id);
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + take * b;
            }
        }
    }
}

/// Everything a module forward needs: the graph, the bound parameters,
/// the mode, and a sink for batch-norm statistic updates.
pub struct Ctx<'a, S> {
    pub g: &'a mut Graph<S>,
    pub store: &'a ParamStore<S>,
    pub bound: &'a Bindings,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate<S>>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(
        g: &'a mut Graph<S>,
        store: &'a ParamStore<S>,
        bound: &'a Bindings,
        mode: Mode,
    ) -> Self {
        Ctx {
            g,
            store,
            bound,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_marks_only_trainable_entries() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::ones(&[2]), true);
        let rm = store.add("rm", Tensor::zeros(&[2]), false);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        assert!(g.requires_grad(b.var(w)));
        assert!(!g.requires_grad(b.var(rm)));
        assert_eq!(store.trainable_ids(), vec![w]);
    }

    #[test]
    fn momentum_update_blends_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let rm = store.add("rm", Tensor::zeros(&[1]), false);
        let rv = store.add("rv", Tensor::ones(&[1]), false);
        BnUpdate {
            running_mean: rm,
            running_var: rv,
            stats: BatchStats {
                mean: vec![1.0],
                var: vec![3.0],
            },
        }
        .apply(&mut store);
        assert!((store.value(rm).item() - 0.1).abs() < 1e-15);
        assert!((store.value(rv).item() - 1.2).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::ones(&[1]), true);
        store.add("a", Tensor::ones(&[1]), true);
    }
}
