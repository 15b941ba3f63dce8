//! Parameter storage, the per-pass forward context, and reusable layers.

mod layers;

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use layers::{Adapter, BatchNorm, Conv2d, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Trainable,
    Frozen,
    /// Non-learned state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Flat, ordered collection of named tensors. Order is creation order and is
/// the order used by checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, kind });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn set_kind(&mut self, id: ParamId, kind: ParamKind) {
        self.entries[id.0].kind = kind;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable).collect()
    }

    /// Number of scalar values across parameters of `kind`.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), kind: e.kind })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Folds batch statistics gathered during a training pass into the
    /// running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) {
        let m = T::c(momentum);
        for u in updates {
            let fresh = self.value(u.count).data()[0] == T::zero();
            for (target, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let run = self.value_mut(target).data_mut();
                for (r, &b) in run.iter_mut().zip(batch.iter()) {
                    *r = if fresh { b } else { (T::one() - m) * *r + m * b };
                }
            }
            let c = self.value_mut(u.count).data_mut();
            c[0] = c[0] + T::one();
        }
    }
}

/// Seeded parameter factory that tracks a name prefix and freeze flag.
pub struct ParamBuilder<'s, T: Real> {
    pub store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    frozen: Vec<bool>,
}

impl<'s, T: Real> ParamBuilder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new(), frozen: vec![false] }
    }

    /// Runs `f` with `name` appended to the prefix; `frozen` is sticky for
    /// nested scopes.
    pub fn scope<R>(&mut self, name: &str, frozen: bool, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let inherited = *self.frozen.last().expect("root scope");
        self.prefix.push(name.to_string());
        self.frozen.push(inherited || frozen);
        let out = f(self);
        self.prefix.pop();
        self.frozen.pop();
        out
    }

    /// Like [`scope`](Self::scope) but trainable regardless of the enclosing
    /// scopes.
    pub fn scope_trainable<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        self.frozen.push(false);
        let out = f(self);
        self.prefix.pop();
        self.frozen.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn learned_kind(&self) -> ParamKind {
        if *self.frozen.last().expect("root scope") {
            ParamKind::Frozen
        } else {
            ParamKind::Trainable
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Argument(e.to_string()))?;
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| T::c(dist.sample(rng)));
        let kind = self.learned_kind();
        self.store.add(&self.full_name(name), value, kind)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        let kind = self.learned_kind();
        self.store.add(&self.full_name(name), Tensor::full(shape, T::c(v)), kind)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(&self.full_name(name), Tensor::zeros(shape), ParamKind::Buffer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub count: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Binds stored parameters onto a tape for one forward/backward pass.
/// Parameters are placed on the tape lazily the first time a layer asks.
pub struct Ctx<'t, 's, T: Real> {
    pub tape: &'t Tape<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'t, 's, T: Real> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            bound: RefCell::new(vec![None; store.len()]),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = self.tape.var(e.value.clone(), e.kind == ParamKind::Trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Uses `var` in place of the stored value of `id` (gradient checks).
    pub fn bind(&self, id: ParamId, var: Var<'t, T>) {
        self.bound.borrow_mut()[id.0] = Some(var);
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound.borrow()[id.0].is_some()
    }

    pub fn grad(&self, id: ParamId) -> Option<Tensor<T>> {
        self.bound.borrow()[id.0].and_then(|v| v.grad())
    }

    pub(crate) fn record_bn(&self, update: BnUpdate<T>) {
        self.bn_updates.borrow_mut().push(update);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut *self.bn_updates.borrow_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::zeros(&[2]), ParamKind::Trainable).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2]), ParamKind::Trainable).is_err());
    }

    #[test]
    fn scopes_prefix_and_freeze() {
        let mut s = ParamStore::<f64>::new();
        let mut b = ParamBuilder::new(&mut s, 0);
        b.scope("outer", true, |b| {
            b.scope("inner", false, |b| b.normal("w", &[2, 2], 0.1))?;
            b.buffer("stat", &[3])
        })
        .unwrap();
        b.constant("free", &[1], 1.0).unwrap();
        let w = s.find("outer.inner.w").unwrap();
        assert_eq!(s.kind(w), ParamKind::Frozen);
        assert_eq!(s.kind(s.find("outer.stat").unwrap()), ParamKind::Buffer);
        assert_eq!(s.kind(s.find("free").unwrap()), ParamKind::Trainable);
        assert_eq!(s.count(ParamKind::Frozen), 4);
    }

    #[test]
    fn first_bn_update_initialises_then_blends() {
        let mut s = ParamStore::<f64>::new();
        let mean = s.add("m", Tensor::zeros(&[1]), ParamKind::Buffer).unwrap();
        let var = s.add("v", Tensor::zeros(&[1]), ParamKind::Buffer).unwrap();
        let count = s.add("n", Tensor::zeros(&[1]), ParamKind::Buffer).unwrap();
        let up = |m: f64, v: f64| BnUpdate { mean, var, count, batch_mean: vec![m], batch_var: vec![v] };
        s.apply_bn_updates(&[up(2.0, 4.0)], 0.1);
        assert_eq!(s.value(mean).data(), &[2.0]);
        s.apply_bn_updates(&[up(12.0, 4.0)], 0.1);
        assert!((s.value(mean).data()[0] - 3.0).abs() < 1e-12);
        assert_eq!(s.value(count).data(), &[2.0]);
    }

    #[test]
    fn ctx_binds_once_and_respects_kind() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::ones(&[2]), ParamKind::Trainable).unwrap();
        let f = s.add("f", Tensor::ones(&[2]), ParamKind::Frozen).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, Mode::Train);
        let (a1, a2) = (ctx.param(a), ctx.param(a));
        assert_eq!(a1.id(), a2.id());
        assert!(!ctx.param(f).requires_grad());
        a1.mul(&ctx.param(f)).unwrap().sum_all().backward().unwrap();
        assert_eq!(ctx.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert!(ctx.grad(f).is_none());
    }
}
