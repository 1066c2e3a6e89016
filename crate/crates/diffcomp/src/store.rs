//! Named parameter storage shared by layers, optimizers and checkpoints.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{accumulate, Gradients, ParamKey, Tape, Var};
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trained by an optimizer.
    Param,
    /// State carried alongside parameters (batch-norm running statistics).
    Buffer,
}

#[derive(Debug)]
pub struct Entry<T> {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Owns the tensors of one or more networks. Each store has a unique
/// identity so gradients recorded against it cannot leak into another
/// store, including a clone of itself.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.clone(),
                    grad: e.grad.clone(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    fn insert(&mut self, name: String, kind: EntryKind, value: Tensor<T>) -> ParamId {
        assert!(self.find(&name).is_none(), "duplicate parameter name `{name}`");
        self.entries.push(Entry {
            name,
            kind,
            value,
            grad: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), EntryKind::Param, value)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), EntryKind::Buffer, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &Entry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.entries
    }

    /// Replaces a value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    /// Overwrites values by name from another store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(invalid("copy_from", "stores have different layouts"));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(invalid("copy_from", format!("`{}` does not match `{}`", dst.name, src.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Adds the gradients recorded for this store's parameters.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        for (key, g) in &grads.params {
            if key.store != self.uid {
                continue;
            }
            let entry = &mut self.entries[key.index];
            match &mut entry.grad {
                Some(acc) => accumulate(acc.data_mut(), g.data()),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    /// Euclidean norm over every held gradient.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::from_f64(factor);
        for g in self.entries.iter_mut().filter_map(|e| e.grad.as_mut()) {
            for v in g.data_mut() {
                *v = *v * f;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Makes the store's tensors available on `tape`. With `trainable`
    /// false every tensor enters the tape as a constant.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape<T>, trainable: bool) -> Bound<'s, 't, T> {
        Bound {
            store: self,
            tape,
            trainable,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, value) in updates {
            self.set_value(id, value)?;
        }
        Ok(())
    }

    pub(crate) fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            store: self.uid,
            index: id.0,
        }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn for_param(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&store.key(id))
    }
}

/// A store bound to a tape for one forward pass. Buffer updates produced
/// during the pass are queued and applied with [`ParamStore::apply_updates`].
pub struct Bound<'s, 't, T> {
    store: &'s ParamStore<T>,
    tape: &'t Tape<T>,
    trainable: bool,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'s, 't, T: Scalar> Bound<'s, 't, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        let entry = self.store.entry(id);
        if self.trainable && entry.kind == EntryKind::Param {
            self.tape.param_leaf(entry.value.clone(), self.store.key(id))
        } else {
            self.tape.constant(entry.value.clone())
        }
    }

    pub fn value(&self, id: ParamId) -> &'s Tensor<T> {
        self.store.value(id)
    }

    pub fn queue_update(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    pub fn into_updates(self) -> Vec<(ParamId, Tensor<T>)> {
        self.updates.into_inner()
    }
}
