//! Targets, loss, optimizer, schedule and the epoch loop.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{Sentence, Vocab};
use crate::error::{Error, Result};
use crate::eval::{micro_prf, Prf, TypedSpan};
use crate::model::Model;
use crate::params::{ParamGroup, ParamStore};
use crate::rng::SplitMix64;
use crate::span::candidate_spans;
use crate::tensor::Tensor;

/// Boundary smoothing: a gold span keeps `1 − epsilon` and spreads
/// `epsilon` uniformly over the valid spans within `distance`
/// (`|Δstart| + |Δend|`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub epsilon: f64,
    pub distance: usize,
}

impl Smoothing {
    pub fn none() -> Self {
        Self {
            epsilon: 0.0,
            distance: 1,
        }
    }
}

/// Target distribution of every candidate span, in scoring order.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetGrid {
    pub spans: Vec<(usize, usize)>,
    pub classes: usize,
    /// Row-major `spans.len() × classes`.
    pub rows: Vec<f64>,
}

impl TargetGrid {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.rows[r * self.classes..(r + 1) * self.classes]
    }

    pub fn index_of(&self, span: (usize, usize)) -> Option<usize> {
        self.spans.iter().position(|&s| s == span)
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.spans.len(), self.classes], self.rows.clone())
            .expect("grid rows match its spans")
    }
}

/// Row index of span `(i, j)` in the candidate order (widths ascending,
/// then start).
fn candidate_index(i: usize, j: usize, seq_len: usize) -> usize {
    let k = j - i;
    (1..k).map(|w| seq_len + 1 - w).sum::<usize>() + i
}

pub fn build_target_grid(
    gold: &[TypedSpan],
    seq_len: usize,
    max_span: usize,
    classes: usize,
    smoothing: Smoothing,
) -> Result<TargetGrid> {
    if !(0.0..1.0).contains(&smoothing.epsilon) {
        return Err(Error::Config(format!(
            "boundary smoothing epsilon {} outside [0, 1)",
            smoothing.epsilon
        )));
    }
    let mut by_span: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &(s, e, t) in gold {
        if s >= e || e > seq_len || t == 0 || t >= classes {
            return Err(Error::Data {
                line: None,
                message: format!(
                    "gold span ({s}, {e}, {t}) invalid for length {seq_len} and {classes} classes"
                ),
            });
        }
        if e - s > max_span {
            log::warn!("gold span ({s}, {e}) wider than the maximum span size {max_span}; dropped from targets");
            continue;
        }
        if let Some(&prev) = by_span.get(&(s, e)) {
            if prev != t {
                return Err(Error::Data {
                    line: None,
                    message: format!("span ({s}, {e}) labelled with types {prev} and {t}"),
                });
            }
        }
        by_span.insert((s, e), t);
    }

    let spans = candidate_spans(seq_len, max_span);
    let n = spans.len();
    let mut mass = vec![0.0; n * classes];
    let d = smoothing.distance as isize;
    for (&(s, e), &t) in &by_span {
        let mut neighbors = Vec::new();
        if smoothing.epsilon > 0.0 {
            for ds in -d..=d {
                for de in -d..=d {
                    let dist = ds.abs() + de.abs();
                    if dist == 0 || dist > d {
                        continue;
                    }
                    let (ns, ne) = (s as isize + ds, e as isize + de);
                    if ns < 0 || ne > seq_len as isize || ns >= ne || (ne - ns) as usize > max_span
                    {
                        continue;
                    }
                    neighbors.push((ns as usize, ne as usize));
                }
            }
        }
        let own = candidate_index(s, e, seq_len);
        if neighbors.is_empty() {
            mass[own * classes + t] += 1.0;
            continue;
        }
        mass[own * classes + t] += 1.0 - smoothing.epsilon;
        let share = smoothing.epsilon / neighbors.len() as f64;
        for (ns, ne) in neighbors {
            mass[candidate_index(ns, ne, seq_len) * classes + t] += share;
        }
    }
    for row in mass.chunks_mut(classes) {
        let entity: f64 = row[1..].iter().sum();
        if entity > 1.0 {
            row[1..].iter_mut().for_each(|m| *m /= entity);
            row[0] = 0.0;
        } else {
            row[0] = 1.0 - entity;
        }
    }
    Ok(TargetGrid {
        spans,
        classes,
        rows: mass,
    })
}

/// `−Σ_spans yᵀ log softmax(logits)` for one sentence.
pub fn loss_all_spans(g: &mut Graph<'_>, logits: Var, targets: &TargetGrid) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape != [targets.spans.len(), targets.classes] {
        return Err(Error::Dimension {
            op: "loss_all_spans",
            lhs: shape,
            rhs: vec![targets.spans.len(), targets.classes],
        });
    }
    let logp = g.log_softmax(logits);
    let weighted = g.mul_const(logp, Rc::new(targets.rows.clone()));
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0))
}

/// Mean of per-sentence losses.
pub fn batch_loss(g: &mut Graph<'_>, losses: &[Var]) -> Result<Var> {
    if losses.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / losses.len() as f64))
}

/// Linear warmup from 0 to `peak` over the first `warmup_fraction` of the
/// steps, then linear decay back to 0.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = warmup_fraction * total;
    if step < warm {
        peak * step / warm
    } else if step >= total {
        0.0
    } else {
        peak * (total - step) / (total - warm)
    }
}

/// Scales all gradients so the global ℓ2 norm is at most `max_norm`;
/// returns the applied factor (1 when no clipping happens).
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for p in store.iter_mut() {
        p.grad.iter_mut().for_each(|g| *g *= scale);
    }
    scale
}

/// AdamW with decoupled weight decay applied before the Adam update.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with a learning rate per parameter group.
    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (p, (m, v)) in store
            .iter_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let lr = lr(p.group);
            let decay = lr * self.weight_decay;
            for (((x, &g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m).zip(v) {
                *x -= decay * *x;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_pretrained: f64,
    pub lr_fresh: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub smoothing: Smoothing,
    pub weight_decay: f64,
    pub seed: u64,
    /// Also score the training split after every epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 48,
            lr_pretrained: 2e-5,
            lr_fresh: 2e-3,
            warmup_fraction: 0.2,
            clip_norm: 5.0,
            smoothing: Smoothing {
                epsilon: 0.1,
                distance: 1,
            },
            weight_decay: 0.01,
            seed: 0,
            eval_train: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "clip norm {} must be positive",
                self.clip_norm
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing.epsilon) {
            return Err(Error::Config(format!(
                "boundary smoothing epsilon {} outside [0, 1)",
                self.smoothing.epsilon
            )));
        }
        if self.smoothing.distance == 0 {
            return Err(Error::Config("smoothing distance must be positive".into()));
        }
        for (name, lr) in [("pretrained", self.lr_pretrained), ("fresh", self.lr_fresh)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("{name} learning rate {lr} invalid")));
            }
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay {} invalid",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Token ids plus typed gold spans.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub gold: Vec<TypedSpan>,
}

pub fn encode_split(vocab: &Vocab, sentences: &[Sentence]) -> Result<Vec<Example>> {
    sentences
        .iter()
        .map(|s| {
            Ok(Example {
                ids: vocab.encode(&s.tokens),
                gold: vocab.typed_gold(s)?,
            })
        })
        .collect()
}

/// Predicted entities of every sentence.
pub fn predict_split(model: &Model, split: &[Example]) -> Result<Vec<Vec<TypedSpan>>> {
    split
        .iter()
        .map(|ex| {
            Ok(model
                .predict_entities(&ex.ids)?
                .into_iter()
                .map(|p| (p.start, p.end, p.type_index))
                .collect())
        })
        .collect()
}

pub fn evaluate(model: &Model, split: &[Example]) -> Result<Prf> {
    let preds = predict_split(model, split)?;
    let golds: Vec<&[TypedSpan]> = split.iter().map(|e| e.gold.as_slice()).collect();
    Ok(micro_prf(&preds, &golds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr_pretrained: f64,
    pub lr_fresh: f64,
    pub dev: Prf,
    pub train_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev: Option<Prf>,
    /// Draws taken from the run's generator (seeded with `cfg.seed`).
    pub rng_position: u64,
}

/// Same-length buckets, shuffled within each bucket, chunked, and the
/// batch order shuffled.
fn make_batches(lengths: &[usize], batch_size: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &len) in lengths.iter().enumerate() {
        buckets.entry(len).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in buckets {
        rng.shuffle(&mut idx);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

fn batch_count(lengths: &[usize], batch_size: usize) -> usize {
    let mut per_len: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in lengths {
        *per_len.entry(l).or_default() += 1;
    }
    per_len.values().map(|n| n.div_ceil(batch_size)).sum()
}

/// Trains in place, leaving `model` at the epoch with the best dev F1.
///
/// Runs are a deterministic function of the model's initial parameters,
/// the data and `cfg`.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Input(
            "training and dev splits must be non-empty".into(),
        ));
    }
    let mut outcome = TrainOutcome::default();
    if cfg.epochs == 0 {
        return Ok(outcome);
    }
    let classes = model.config.classes();
    let max_span = model.config.max_span;
    let targets: Vec<TargetGrid> = train_set
        .iter()
        .map(|ex| build_target_grid(&ex.gold, ex.ids.len(), max_span, classes, cfg.smoothing))
        .collect::<Result<_>>()?;
    let lengths: Vec<usize> = train_set.iter().map(|ex| ex.ids.len()).collect();
    let per_epoch = batch_count(&lengths, cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;

    let mut rng = SplitMix64::new(cfg.seed);
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(&lengths, cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let (mut lr_p, mut lr_f) = (0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let dropout_seed = rng.next_u64();
            let (value, grads) = {
                let mut g = Graph::with_params(&model.store).training(dropout_seed);
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let out = model.forward(&mut g, &train_set[i].ids)?;
                    losses.push(loss_all_spans(&mut g, out.logits, &targets[i])?);
                }
                let loss = batch_loss(&mut g, &losses)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        value,
                        epoch,
                        batch: b,
                        sentences: batch.clone(),
                    });
                }
                g.backward(loss)?;
                (value, g.into_param_grads())
            };
            loss_sum += value;
            model.store.zero_grad();
            model.store.add_grads(&grads);
            clip_gradients(&mut model.store, cfg.clip_norm);
            lr_p = lr_at(step, total_steps, cfg.lr_pretrained, cfg.warmup_fraction);
            lr_f = lr_at(step, total_steps, cfg.lr_fresh, cfg.warmup_fraction);
            opt.step(&mut model.store, |group| match group {
                ParamGroup::Pretrained => lr_p,
                ParamGroup::Fresh => lr_f,
            });
            step += 1;
        }

        let dev = evaluate(model, dev_set)?;
        let train_f1 = if cfg.eval_train {
            Some(evaluate(model, train_set)?.f1)
        } else {
            None
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dev F1 {:.4}{}",
            loss_sum / batches.len() as f64,
            dev.f1,
            train_f1
                .map(|f| format!(" train F1 {f:.4}"))
                .unwrap_or_default()
        );
        outcome.history.push(EpochRecord {
            epoch,
            loss: loss_sum / batches.len() as f64,
            lr_pretrained: lr_p,
            lr_fresh: lr_f,
            dev,
            train_f1,
        });
        if best.as_ref().is_none_or(|(f, _)| dev.f1 > *f) {
            let snapshot = model.store.iter().map(|(_, p)| p.value.clone()).collect();
            best = Some((dev.f1, snapshot));
            outcome.best_epoch = Some(epoch);
            outcome.best_dev = Some(dev);
        }
    }
    if let Some((_, snapshot)) = best {
        for (p, v) in model.store.iter_mut().zip(snapshot) {
            p.value = v;
        }
    }
    outcome.rng_position = rng.position();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_index_follows_candidate_order() {
        for t in 1..8 {
            for (r, &(i, j)) in candidate_spans(t, t).iter().enumerate() {
                assert_eq!(candidate_index(i, j, t), r);
            }
        }
    }

    #[test]
    fn batches_cover_each_sentence_once_with_equal_lengths() {
        let lengths = [3, 5, 3, 3, 5, 7, 3];
        let mut rng = SplitMix64::new(1);
        let batches = make_batches(&lengths, 2, &mut rng);
        assert_eq!(batches.len(), batch_count(&lengths, 2));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.len() <= 2);
            assert!(b.iter().all(|&i| lengths[i] == lengths[b[0]]));
        }
    }
}
