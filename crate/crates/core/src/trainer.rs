//! Cross-entropy training with AdamW and a linear warm-up/decay schedule.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::Dropout;
use crate::data::{encode_example, Example, MetricKind, Vocab};
use crate::error::{Error, Result};
use crate::model::PeftModel;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-6;
pub const WARMUP_FRACTION: f64 = 0.06;

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let loss = tape.cross_entropy(l, label)?;
    Ok(tape.scalar(loss))
}

/// Linear ramp from 0 to `peak_lr` over the first `⌈0.06·total⌉` steps, then
/// linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak_lr: f64) -> Result<f64> {
    lr_at_with_warmup(step, total_steps, peak_lr, WARMUP_FRACTION)
}

pub fn lr_at_with_warmup(
    step: usize,
    total_steps: usize,
    peak_lr: f64,
    warmup_fraction: f64,
) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let warmup = ((warmup_fraction * total_steps as f64).ceil() as usize).max(1);
    if step < warmup {
        Ok(peak_lr * step as f64 / warmup as f64)
    } else {
        Ok(peak_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64)
    }
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Updates applied to each tensor slot.
    pub updates: Vec<u64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            updates: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adamw", &[params.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
            self.updates = vec![0; params.len()];
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::shape("adamw", p.shape(), &[g.len()]));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *w);
            }
            self.updates[k] += 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Keep the parameters of the best dev epoch (otherwise the last epoch).
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            peak_lr: 5e-4,
            warmup_fraction: WARMUP_FRACTION,
            weight_decay: 0.01,
            dropout: 0.2,
            seed: 0,
            select_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!(
                "peak_lr {} must be > 0",
                self.peak_lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    /// Learning rate used for the epoch's last update.
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub train_secs_per_sample: f64,
    pub infer_secs_per_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub optimizer_steps: u64,
    /// Distinct training examples fed to the optimiser.
    pub examples_seen: usize,
    /// Names of tensors the optimiser updated.
    pub updated_tensors: Vec<String>,
    pub timing: Timing,
}

impl TrainRecord {
    /// Equality of everything except wall-clock timings, bit for bit.
    pub fn same_run(&self, other: &TrainRecord) -> bool {
        self.best_epoch == other.best_epoch
            && self.optimizer_steps == other.optimizer_steps
            && self.examples_seen == other.examples_seen
            && self.updated_tensors == other.updated_tensors
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.dev_metric.to_bits() == b.dev_metric.to_bits()
                    && a.lr.to_bits() == b.lr.to_bits()
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_metric,lr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.dev_metric, e.lr
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `(accuracy + macro_f1) / 2`
    pub score: f64,
    /// `accuracy` or `score`, per the dataset's metric kind.
    pub metric: f64,
}

/// Metrics from predicted and gold labels.
pub fn metrics_from_predictions(
    predicted: &[usize],
    gold: &[usize],
    num_classes: usize,
    kind: MetricKind,
) -> EvalMetrics {
    let total = gold.len().max(1) as f64;
    let correct = predicted.iter().zip(gold).filter(|(p, g)| p == g).count() as f64;
    let accuracy = correct / total;
    let mut f1_sum = 0.0;
    for c in 0..num_classes {
        let tp = predicted
            .iter()
            .zip(gold)
            .filter(|&(&p, &g)| p == c && g == c)
            .count() as f64;
        let fp = predicted
            .iter()
            .zip(gold)
            .filter(|&(&p, &g)| p == c && g != c)
            .count() as f64;
        let fneg = predicted
            .iter()
            .zip(gold)
            .filter(|&(&p, &g)| p != c && g == c)
            .count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fneg > 0.0 {
            tp / (tp + fneg)
        } else {
            0.0
        };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    let macro_f1 = f1_sum / num_classes.max(1) as f64;
    let score = (accuracy + macro_f1) / 2.0;
    let metric = match kind {
        MetricKind::Accuracy => accuracy,
        MetricKind::AccF1Mean => score,
    };
    EvalMetrics {
        accuracy,
        macro_f1,
        score,
        metric,
    }
}

pub fn encode_all(
    model: &PeftModel,
    examples: &[Example],
    vocab: &Vocab,
) -> Result<Vec<(Vec<usize>, usize)>> {
    let budget = model.encoding_budget();
    examples
        .iter()
        .map(|e| Ok((encode_example(e, vocab, budget)?, e.label)))
        .collect()
}

/// Evaluates `model` on `examples`, tokenised with `vocab`.
pub fn evaluate(
    model: &PeftModel,
    examples: &[Example],
    vocab: &Vocab,
    num_classes: usize,
    kind: MetricKind,
) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(Error::NoExamples);
    }
    let encoded = encode_all(model, examples, vocab)?;
    evaluate_encoded(model, &encoded, num_classes, kind)
}

pub fn evaluate_encoded(
    model: &PeftModel,
    encoded: &[(Vec<usize>, usize)],
    num_classes: usize,
    kind: MetricKind,
) -> Result<EvalMetrics> {
    let mut predicted = Vec::with_capacity(encoded.len());
    for (tokens, _) in encoded {
        predicted.push(model.predict(tokens)?);
    }
    let gold: Vec<usize> = encoded.iter().map(|(_, l)| *l).collect();
    Ok(metrics_from_predictions(
        &predicted,
        &gold,
        num_classes,
        kind,
    ))
}

/// Training data as seen by [`train`].
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [Example],
    pub dev: &'a [Example],
    pub vocab: &'a Vocab,
    pub num_classes: usize,
    pub metric_kind: MetricKind,
}

impl<'a> TrainData<'a> {
    pub fn from_dataset(ds: &'a crate::data::TaskDataset) -> Self {
        Self {
            train: &ds.train,
            dev: &ds.dev,
            vocab: &ds.vocab,
            num_classes: ds.num_classes,
            metric_kind: ds.metric_kind,
        }
    }
}

/// Optimises only the model's trainable parameters. Returns the per-epoch
/// record; on return the model holds the best-dev (or last) parameters.
pub fn train(model: &mut PeftModel, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainRecord> {
    cfg.validate()?;
    let names: Vec<String> = model
        .trainable_parameters()
        .into_iter()
        .map(|(k, _)| k)
        .collect();
    if model.param_count().total == 0 || names.is_empty() {
        return Err(Error::NoTrainableParameters);
    }
    if data.train.is_empty() {
        return Err(Error::NoExamples);
    }
    let train_set = encode_all(model, data.train, data.vocab)?;
    let dev_set = encode_all(model, data.dev, data.vocab)?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout = Dropout::new(cfg.dropout, cfg.seed ^ 0x5eed_d0d0);
    let mut opt = AdamW::new(cfg.weight_decay);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut train_secs = 0.0;
    let mut infer_secs = 0.0;
    let mut infer_samples = 0usize;
    let mut step = 0usize;
    let mut lr = 0.0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let started = Instant::now();
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for &idx in batch {
                let (tokens, label) = &train_set[idx];
                let drop = (cfg.dropout > 0.0).then_some(&mut dropout);
                let (loss, grads) = model.loss_and_grads(tokens, *label, drop)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, step });
                }
                loss_sum += loss;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (ai, gi) in a.iter_mut().zip(&grads) {
                            ai.iter_mut().zip(gi).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = acc.unwrap_or_default();
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            lr = lr_at_with_warmup(step, total_steps, cfg.peak_lr, cfg.warmup_fraction)?;
            let mut params = model.trainable_tensors_mut();
            opt.step(&mut params, &grads, lr)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch, step });
            }
            step += 1;
        }
        train_secs += started.elapsed().as_secs_f64();

        let started = Instant::now();
        let dev_metric = if dev_set.is_empty() {
            f64::NAN
        } else {
            evaluate_encoded(model, &dev_set, data.num_classes, data.metric_kind)?.metric
        };
        infer_secs += started.elapsed().as_secs_f64();
        infer_samples += dev_set.len();

        let train_loss = loss_sum / train_set.len() as f64;
        epochs.push(EpochLog {
            epoch,
            train_loss,
            dev_metric,
            lr,
        });
        let improved = match &best {
            None => true,
            Some((b, _, _)) => dev_metric > *b,
        };
        if cfg.select_best && improved && !dev_metric.is_nan() {
            let snapshot = model
                .trainable_parameters()
                .into_iter()
                .map(|(_, t)| t.clone())
                .collect();
            best = Some((dev_metric, epoch, snapshot));
        }
    }

    let best_epoch = match best {
        Some((_, epoch, snapshot)) => {
            for (dst, src) in model.trainable_tensors_mut().into_iter().zip(snapshot) {
                *dst = src;
            }
            epoch
        }
        None => cfg.epochs,
    };
    let updated_tensors = names
        .into_iter()
        .zip(&opt.updates)
        .filter(|(_, &n)| n > 0)
        .map(|(k, _)| k)
        .collect();
    let seen = cfg.epochs * train_set.len();
    Ok(TrainRecord {
        epochs,
        best_epoch,
        optimizer_steps: opt.steps(),
        examples_seen: train_set.len(),
        updated_tensors,
        timing: Timing {
            train_secs_per_sample: train_secs / seen as f64,
            infer_secs_per_sample: if infer_samples > 0 {
                infer_secs / infer_samples as f64
            } else {
                0.0
            },
        },
    })
}
