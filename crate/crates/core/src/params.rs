//! Named parameter storage and the per-pass graph context.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng as _;

use crate::autodiff::{BnMode, BnStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::rng;
use crate::tensor::{Float, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot/Xavier uniform over `[-l, l]`, `l = sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Values(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct Entry<T: Float> {
    pub name: String,
    pub value: Tensor<T>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Float> {
    seed: u64,
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Random initialisers draw from a stream named after
    /// the tensor, so a tensor's initial value does not depend on what else
    /// the model contains.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Glorot { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut r = rng::substream(self.seed, name);
                (0..n).map(|_| r.random_range(-limit..limit)).collect()
            }
            Init::Values(v) => {
                assert_eq!(v.len(), n, "init values for `{name}`");
                v
            }
        };
        let value = Tensor::new(shape, data.into_iter().map(T::of).collect()).expect("valid shape");
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
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

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    /// Total number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces a tensor's value, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::UnexpectedTensor(name.to_string()))?;
        let cur = &mut self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::TensorMismatch {
                name: name.to_string(),
                expected: cur.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *cur = value;
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Adds uniform noise in `[-scale, scale]` to every trainable tensor. Used
    /// to move a freshly initialised model off special points (zero weights,
    /// unit gammas) before gradient checks.
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let mut r = rng::substream(seed, &e.name);
            for v in e.value.data_mut() {
                *v = *v + T::of(r.random_range(-scale..scale));
            }
        }
    }

    /// Folds train-mode batch statistics into the running buffers:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>, momentum: f64) {
        let m = T::of(momentum);
        let one_m = T::of(1.0 - momentum);
        for u in updates {
            for (id, batch) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
                let run = self.get_mut(id);
                for (r, &b) in run.data_mut().iter_mut().zip(batch.data()) {
                    *r = m * *r + one_m * b;
                }
            }
        }
    }

    /// One Adam step over every trainable tensor in store order.
    pub fn adam_step(&mut self, state: &mut AdamState<T>, grads: &HashMap<ParamId, Tensor<T>>) -> Result<()> {
        let zeros: Vec<Option<Tensor<T>>> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                (e.trainable && !grads.contains_key(&ParamId(i))).then(|| Tensor::zeros(e.value.shape()))
            })
            .collect();
        let mut triples: Vec<(&str, &mut Tensor<T>, &Tensor<T>)> = Vec::new();
        for (i, e) in self.entries.iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let g = grads
                .get(&ParamId(i))
                .or(zeros[i].as_ref())
                .expect("gradient or zero fill");
            triples.push((e.name.as_str(), &mut e.value, g));
        }
        state.step(&mut triples)
    }
}

/// A pending running-statistics update recorded during a train-mode pass.
pub struct BnUpdate<T: Float> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BnStats<T>,
}

/// Whether batch norm uses batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State for one forward pass: the tape, the parameters it reads, and the
/// batch-norm updates it produces.
pub struct Ctx<'s, 't, T: Float> {
    pub tape: &'t Tape<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    /// Track gradients for parameters. Off for pure inference.
    pub grad: bool,
    leaves: RefCell<HashMap<ParamId, Var<'t, T>>>,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'s, 't, T: Float> Ctx<'s, 't, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            grad: mode == Mode::Train,
            leaves: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn with_grad(mut self, grad: bool) -> Self {
        self.grad = grad;
        self
    }

    /// The tape node for a parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.leaves.borrow().get(&id) {
            return *v;
        }
        let value = self.store.get(id).clone();
        let v = if self.grad {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.leaves.borrow_mut().insert(id, v);
        v
    }

    pub fn input(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    pub fn batch_norm(
        &self,
        x: Var<'t, T>,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var<'t, T>> {
        let (g, b) = (self.param(gamma), self.param(beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm(g, b, BnMode::Train)?;
                if let Some(stats) = stats {
                    self.bn_updates.borrow_mut().push(BnUpdate {
                        running_mean,
                        running_var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mode = BnMode::Eval {
                    mean: self.store.get(running_mean),
                    var: self.store.get(running_var),
                };
                Ok(x.batch_norm(g, b, mode)?.0)
            }
        }
    }

    /// Gradients of every parameter touched in this pass.
    pub fn param_grads(&self, grads: &Gradients<T>) -> HashMap<ParamId, Tensor<T>> {
        self.leaves
            .borrow()
            .iter()
            .filter(|(id, _)| self.store.entries[id.0].trainable)
            .map(|(&id, &v)| (id, grads.wrt(v)))
            .collect()
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut *self.bn_updates.borrow_mut())
    }
}
