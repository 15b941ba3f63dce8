//! Loss, optimiser, learning-rate schedules, dataset splitting, the training
//! loop and evaluation.

mod ablation;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{argmax, MetricsReport};
use crate::model::Model;
use crate::nn::{Ctx, Mode, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use ablation::{run_ablation, AblationRow, AblationSpec, AblationTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// `lr · gamma^floor(epoch / every)`
    Step { gamma: f64, every: usize },
    /// `lr · (1 + cos(π · epoch / epochs)) / 2`
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub split_ratio: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3.5e-5,
            batch_size: 64,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            split_ratio: 0.8,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a laptop run on the synthetic set.
    pub fn desk() -> Self {
        Self { batch_size: 16, epochs: 50, learning_rate: 5e-4, lr_schedule: LrSchedule::Cosine, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("train.{key} {why}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("= {} must be a non-negative number", self.learning_rate));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio", format!("= {} must lie strictly between 0 and 1", self.split_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(key, format!("= {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps / weight_decay", "must be positive / non-negative".into());
        }
        if let LrSchedule::Step { gamma, every } = self.lr_schedule {
            if every == 0 || !(gamma > 0.0) {
                return bad("lr_schedule", format!("step needs every > 0 and gamma > 0, got {every} / {gamma}"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let lr = self.learning_rate;
        match self.lr_schedule {
            LrSchedule::Constant => lr,
            LrSchedule::Step { gamma, every } => lr * gamma.powi((epoch / every.max(1)) as i32),
            LrSchedule::Cosine => {
                let t = epoch.min(self.epochs) as f64 / self.epochs.max(1) as f64;
                lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            }
        }
    }
}

pub const LOG_CLAMP: f64 = 1e-12;

/// Mean negative log-probability of the true class.
pub fn cross_entropy<'t, T: Real>(probs: &Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("cross entropy needs [B, K] probs for {} labels, got {s:?}", labels.len())));
    }
    let k = s[1];
    let mut onehot = vec![T::zero(); labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} outside {k} classes")));
        }
        onehot[i * k + y] = T::one();
    }
    let mask = probs.tape().constant(Tensor::new(&s, onehot)?);
    probs.mul(&mask)?.sum(&[1], false)?.log_clamp(LOG_CLAMP).mean(&[0], false)?.scale(-1.0).reshape(&[1])
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real> {
    pub step: u64,
    /// Indexed by parameter id; `None` for non-trainable entries.
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |e: &crate::nn::ParamEntry<T>| {
            (e.kind == ParamKind::Trainable).then(|| Tensor::zeros(e.value.shape()))
        };
        Self { step: 0, m: store.entries().iter().map(zeros).collect(), v: store.entries().iter().map(zeros).collect() }
    }

    pub fn cast<U: Real>(&self) -> OptimizerState<U> {
        let c = |v: &Vec<Option<Tensor<T>>>| v.iter().map(|t| t.as_ref().map(Tensor::cast)).collect();
        OptimizerState { step: self.step, m: c(&self.m), v: c(&self.v) }
    }
}

/// One Adam update with L2 weight decay folded into the gradient and bias
/// correction. Only trainable entries move.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::State(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    let ids: Vec<ParamId> = store.trainable_ids();
    for &id in &ids {
        let e = store.entry(id);
        let g = grads[id.index()].as_ref().ok_or_else(|| Error::State(format!("no gradient for trainable '{}'", e.name)))?;
        if g.shape() != e.value.shape() {
            return Err(Error::Shape(format!("gradient {:?} for '{}' {:?}", g.shape(), e.name, e.value.shape())));
        }
        if state.m[id.index()].is_none() {
            return Err(Error::State(format!("no optimiser moments for '{}'", e.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for id in ids {
        let g = grads[id.index()].as_ref().expect("checked above").data();
        let m = state.m[id.index()].as_mut().expect("checked above").data_mut();
        let v = state.v[id.index()].as_mut().expect("checked above").data_mut();
        let p = store.value_mut(id).data_mut();
        for i in 0..p.len() {
            let theta = p[i].to_f64().unwrap_or(0.0);
            let gi = g[i].to_f64().unwrap_or(0.0) + cfg.weight_decay * theta;
            let mi = b1 * m[i].to_f64().unwrap_or(0.0) + (1.0 - b1) * gi;
            let vi = b2 * v[i].to_f64().unwrap_or(0.0) + (1.0 - b2) * gi * gi;
            m[i] = T::c(mi);
            v[i] = T::c(vi);
            p[i] = T::c(theta - lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps));
        }
    }
    Ok(())
}

/// Stratified split: each class is shuffled with its own seeded stream and
/// `round(ratio · n_c)` samples (kept within `1..n_c`) go to training.
/// Returned indices are ascending.
pub fn split_indices(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("split ratio {ratio} must lie strictly between 0 and 1")));
    }
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "class {:?} has {} samples; splitting needs at least 2",
                ds.class_names[c],
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        idx.shuffle(&mut rng);
        let n_train = ((ratio * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_dataset(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds, ratio, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

/// Trains in place for `cfg.epochs` epochs. After every epoch the model is
/// evaluated on `test` (if non-empty) and `on_epoch` sees the record.
pub fn train_loop<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    state: &mut OptimizerState<T>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if train.num_classes() != model.num_classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes, model {}",
            train.num_classes(),
            model.num_classes()
        )));
    }
    let momentum = model.net.cfg.bn_momentum;
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x2545_f491_4f6c_dd1d)));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = train.batch::<T>(chunk)?;
            let (loss, hits) = train_step(model, state, cfg, lr, momentum, images, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        let test_acc = if test.is_empty() { f64::NAN } else { evaluate(model, test, cfg.batch_size)?.accuracy };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc,
        };
        log::info!(
            "epoch {:>3}  lr {:.3e}  loss {:.4}  train acc {:.4}  test acc {:.4}",
            record.epoch,
            lr,
            record.train_loss,
            record.train_acc,
            record.test_acc
        );
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

/// Forward, backward and one optimiser step on a batch; returns the batch
/// loss and the number of correct predictions.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    lr: f64,
    bn_momentum: f64,
    images: Tensor<T>,
    labels: &[usize],
) -> Result<(f64, usize)> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params, Mode::Train);
    let out = model.forward(&ctx, &tape.constant(images))?;
    let loss = cross_entropy(&out.probs, labels)?;
    loss.backward()?;
    let loss_value = loss.value().data()[0].to_f64().unwrap_or(f64::NAN);
    if !loss_value.is_finite() {
        return Err(Error::State(format!("training loss became {loss_value}")));
    }
    let hits = count_correct(&out.probs.value(), labels);
    let grads: Vec<Option<Tensor<T>>> = model
        .params
        .ids()
        .map(|id| if model.params.kind(id) == ParamKind::Trainable { ctx.grad(id) } else { None })
        .collect();
    let bn = ctx.take_bn_updates();
    drop(ctx);
    adam_step(&mut model.params, &grads, state, cfg, lr)?;
    model.params.apply_bn_updates(&bn, bn_momentum);
    Ok((loss_value, hits))
}

fn count_correct<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> usize {
    let k = probs.shape()[1];
    probs.data().chunks(k).zip(labels).filter(|(row, &y)| argmax(row) == y).count()
}

/// Eval-mode predicted classes and probabilities for every sample.
pub fn predict_dataset<T: Real>(model: &Model<T>, ds: &Dataset, batch_size: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts: Vec<Result<Tensor<T>>> = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| model.predict(&ds.batch::<T>(chunk)?.0))
        .collect();
    let k = model.num_classes();
    let mut preds = Vec::with_capacity(ds.len());
    let mut probs = Vec::with_capacity(ds.len());
    for p in parts {
        for row in p?.to_f64_vec().chunks(k) {
            preds.push(argmax(row));
            probs.push(row.to_vec());
        }
    }
    Ok((preds, probs))
}

pub fn evaluate<T: Real>(model: &Model<T>, ds: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    let (preds, _) = predict_dataset(model, ds, batch_size)?;
    MetricsReport::from_predictions(&preds, &ds.labels(), model.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    #[test]
    fn schedules() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 3.5e-5);
        assert_eq!(cfg.lr_at(199), 3.5e-5);
        let step = TrainConfig { lr_schedule: LrSchedule::Step { gamma: 0.1, every: 10 }, ..cfg.clone() };
        assert!((step.lr_at(25) - 3.5e-7).abs() < 1e-20);
        let cos = TrainConfig { lr_schedule: LrSchedule::Cosine, epochs: 50, ..cfg.clone() };
        assert_eq!(cos.lr_at(0), 3.5e-5);
        assert!(cos.lr_at(50).abs() < 1e-20);
        assert!((cos.lr_at(25) - 1.75e-5).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { split_ratio: 1.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let tape = Tape::<f64>::new();
        let uniform = tape.var(Tensor::full(&[2, 7], 1.0 / 7.0), false);
        let l = cross_entropy(&uniform, &[0, 6]).unwrap().value().data()[0];
        assert!((l - 7f64.ln()).abs() < 1e-12);
        let onehot = tape.tensor(&[1, 3], &[0.0, 1.0, 0.0], false).unwrap();
        assert!(cross_entropy(&onehot, &[1]).unwrap().value().data()[0].abs() < 1e-12);
        // a zero probability is clamped rather than infinite
        let l = cross_entropy(&onehot, &[0]).unwrap().value().data()[0];
        assert!((l + LOG_CLAMP.ln()).abs() < 1e-9);
        assert!(matches!(cross_entropy(&onehot, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn logit_gradient_matches_closed_form() {
        let labels = [2usize, 0, 1];
        let logits = Tensor::from_fn(&[3, 4], |i| ((i * 7 % 5) as f64 - 2.0) * 0.6);
        let tape = Tape::new();
        let z = tape.var(logits.clone(), true);
        let p = z.softmax(1).unwrap();
        cross_entropy(&p, &labels).unwrap().backward().unwrap();
        let g = z.grad().unwrap();
        let pv = p.value();
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..4 {
                let want = (pv.data()[i * 4 + j] - if j == y { 1.0 } else { 0.0 }) / 3.0;
                assert!((g.data()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        let report = finite_diff_check(|_, v| cross_entropy(&v[0].softmax(1)?, &labels), &[logits], 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    fn scalar_store(v: f64, kind: ParamKind) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::full(&[1], v), kind).unwrap();
        s
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut s = scalar_store(0.5, ParamKind::Trainable);
        let mut st = OptimizerState::new(&s);
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        adam_step(&mut s, &[Some(Tensor::full(&[1], 1.0))], &mut st, &cfg, 1e-3).unwrap();
        let moved = 0.5 - s.entries()[0].value.data()[0];
        assert!((moved - 1e-3).abs() < 1e-10, "{moved}");
        assert_eq!(st.step, 1);
        // constant gradient keeps the step at lr
        for _ in 0..5 {
            adam_step(&mut s, &[Some(Tensor::full(&[1], 1.0))], &mut st, &cfg, 1e-3).unwrap();
        }
        assert!((0.5 - s.entries()[0].value.data()[0] - 6e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_grad_only_decays() {
        let mut s = scalar_store(2.0, ParamKind::Trainable);
        let mut st = OptimizerState::new(&s);
        adam_step(&mut s, &[Some(Tensor::zeros(&[1]))], &mut st, &TrainConfig::default(), 1e-3).unwrap();
        let after = s.entries()[0].value.data()[0];
        assert!(after < 2.0);
        let mut none = scalar_store(2.0, ParamKind::Trainable);
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut st = OptimizerState::new(&none);
        adam_step(&mut none, &[Some(Tensor::zeros(&[1]))], &mut st, &cfg, 1e-3).unwrap();
        assert_eq!(none.entries()[0].value.data()[0], 2.0);
    }

    #[test]
    fn adam_frozen_untouched_and_missing_grad() {
        let mut s = scalar_store(0.3, ParamKind::Frozen);
        let mut st = OptimizerState::new(&s);
        for _ in 0..100 {
            adam_step(&mut s, &[Some(Tensor::full(&[1], 1.0))], &mut st, &TrainConfig::default(), 1e-2).unwrap();
        }
        assert_eq!(s.entries()[0].value.data()[0].to_bits(), 0.3f64.to_bits());
        let mut t = scalar_store(0.3, ParamKind::Trainable);
        let mut st = OptimizerState::new(&t);
        let err = adam_step(&mut t, &[None], &mut st, &TrainConfig::default(), 1e-2);
        assert!(matches!(err, Err(Error::State(_))));
        assert_eq!(st.step, 0);
    }
}
