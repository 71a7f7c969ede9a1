use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Grads, Scalar, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named weights and non-trainable buffers (running statistics) of one model.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(Entry { name: name.to_string(), value, trainable });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Same names and shapes, values converted to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// `(name, tensor)` pairs in insertion order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrites every entry from `named`, which must cover all names with equal shapes.
    pub fn load_named(&mut self, named: &HashMap<String, Tensor<T>>) -> Result<()> {
        for e in &mut self.entries {
            let src = named
                .get(&e.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{}`", e.name)))?;
            if src.shape() != e.value.shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.clone();
        }
        if named.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                named.len(),
                self.entries.len()
            )));
        }
        Ok(())
    }
}

/// Forward-pass context: how parameters enter the graph and which mode layers run in.
pub struct Ctx<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    track_grad: bool,
    train: bool,
    leaves: RefCell<HashMap<ParamId, Var<T>>>,
    rng: RefCell<ChaCha8Rng>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Training context: gradients tracked, batch statistics and dropout active.
    pub fn train(store: &'a ParamStore<T>, seed: u64) -> Self {
        Self::with_mode(store, true, true, seed)
    }

    /// Inference context: no history, running statistics, no dropout.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::with_mode(store, false, false, 0)
    }

    pub fn with_mode(store: &'a ParamStore<T>, track_grad: bool, train: bool, seed: u64) -> Self {
        Self {
            store,
            track_grad,
            train,
            leaves: RefCell::new(HashMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<T> {
        if !self.track_grad || !self.store.is_trainable(id) {
            return Var::constant(self.store.get(id).clone());
        }
        self.leaves
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| Var::leaf(self.store.get(id).clone(), id.0))
            .clone()
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        self.store.get(id)
    }

    pub fn dropout(&self, x: &Var<T>, p: f64) -> Var<T> {
        if !self.train || p <= 0.0 {
            return x.clone();
        }
        x.dropout(p, &mut *self.rng.borrow_mut())
    }

    pub(crate) fn push_buffer_update(&self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced during the forward pass.
    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, value) in updates {
            *self.get_mut(id) = value;
        }
    }

    /// Gradient for `id`, zeros when the parameter did not take part in the loss.
    pub fn grad_or_zero(&self, grads: &Grads<T>, id: ParamId) -> Tensor<T> {
        grads.get(id.0).cloned().unwrap_or_else(|| Tensor::zeros(self.get(id).shape()))
    }
}
