//! Cross-entropy training with AdamW, linear warmup/decay and early stopping.

use serde::{Deserialize, Serialize};

use crate::calibration::{collect_predictions, ece, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig, TuningMode};
use crate::rng::SplitMix64;
use crate::tasks::{gen_identify_split, Dataset, Split, SyntheticTask, CLASS_TOKENS};
use crate::tensor::logsumexp_row;
use crate::Tensor;

/// Learning-rate grid searched for prefix methods.
pub const PREFIX_LR_PRESETS: [f64; 5] = [1e-2, 5e-2, 1e-3, 5e-3, 5e-4];
/// Learning-rate grid searched for full fine-tuning.
pub const FINE_TUNING_LR_PRESETS: [f64; 2] = [3e-5, 5e-5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1Micro,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Effective batch size per optimizer step.
    pub batch_size: usize,
    /// Micro-batches per optimizer step; gradients are summed in order.
    pub grad_accum: usize,
    /// Peak learning rate; `None` picks the desk-scale default for the mode.
    pub lr: Option<f64>,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub dropout: f64,
    pub weight_decay: f64,
    /// Apply weight decay to prefix parameters too.
    pub decay_prefix: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub early_stop_patience: Option<usize>,
    /// Stop once the dev metric reaches this value.
    pub target_metric: Option<f64>,
    pub metric: Metric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            grad_accum: 1,
            lr: None,
            warmup_fraction: 0.1,
            schedule: Schedule::Linear,
            dropout: 0.1,
            weight_decay: 0.01,
            decay_prefix: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            early_stop_patience: None,
            target_metric: None,
            metric: Metric::Accuracy,
        }
    }
}

/// Desk-scale default peak learning rate.
pub fn default_lr(mode: TuningMode) -> f64 {
    if mode.is_prefix() {
        5e-3
    } else {
        5e-5
    }
}

impl TrainConfig {
    pub fn peak_lr(&self, mode: TuningMode) -> f64 {
        self.lr.unwrap_or_else(|| default_lr(mode))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("train.{field}: {msg}")));
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.grad_accum == 0 || self.batch_size % self.grad_accum != 0 {
            return bad(
                "grad_accum",
                format!("{} must be positive and divide batch_size {}", self.grad_accum, self.batch_size),
            );
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("lr", format!("{lr} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", format!("{} outside [0, 1)", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("{} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive".into());
        }
        Ok(())
    }
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Label(format!("label {label} out of range for {} classes", logits.len())));
    }
    Ok(logsumexp_row(logits.data(), None) - logits.data()[label])
}

fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total_steps as f64).round() as usize
}

/// Linear ramp from 0 to `peak` over the warmup steps, then linear decay to 0.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let warm = warmup_steps(total_steps, warmup_fraction);
    if step < warm {
        peak * step as f64 / warm as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warm) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(shapes: &[&[usize]], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One bias-corrected update. `decay[i]` selects which parameters get
    /// decoupled weight decay `p ← p − lr·wd·p`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64, decay: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || decay.len() != self.m.len() {
            return Err(Error::shape("adamw", &[params.len()], &[self.m.len()]));
        }
        for i in 0..params.len() {
            if params[i].shape() != self.m[i].shape() {
                return Err(Error::shape("adamw", params[i].shape(), self.m[i].shape()));
            }
            if grads[i].shape() != self.m[i].shape() {
                return Err(Error::shape("adamw", grads[i].shape(), self.m[i].shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let shrink = if decay[i] { 1.0 - lr * self.weight_decay } else { 1.0 };
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(grads[i].data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p *= shrink;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub f1_micro: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub ece: f64,
}

impl EvalMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::F1Micro => self.f1_micro,
        }
    }
}

/// Single-label metrics; micro-F1 equals accuracy. Classes never predicted
/// (or never present) count as precision (recall) 0 in the macro averages.
pub fn evaluate(model: &EncoderModel, data: &Dataset) -> Result<EvalMetrics> {
    let records = collect_predictions(model, data)?;
    let k = data.n_classes;
    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut actual = vec![0usize; k];
    for r in &records {
        if r.predicted < k {
            predicted[r.predicted] += 1;
        }
        actual[r.label] += 1;
        if r.correct() {
            tp[r.label] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let accuracy = ratio(tp.iter().sum(), records.len());
    Ok(EvalMetrics {
        accuracy,
        f1_micro: accuracy,
        macro_precision: (0..k).map(|c| ratio(tp[c], predicted[c])).sum::<f64>() / k as f64,
        macro_recall: (0..k).map(|c| ratio(tp[c], actual[c])).sum::<f64>() / k as f64,
        ece: ece(&records, DEFAULT_BINS)?.ece,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub dev_ece: f64,
    pub lr: f64,
    pub mode: TuningMode,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainedResult {
    pub model: EncoderModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_metric: f64,
}

impl TrainedResult {
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Trains the model's trainable partition and returns the best-dev model.
pub fn train(model: EncoderModel, train_data: &Dataset, dev: &Dataset, cfg: &TrainConfig) -> Result<TrainedResult> {
    cfg.validate()?;
    if train_data.is_empty() || dev.is_empty() {
        return Err(Error::Input("training and dev splits must be nonempty".into()));
    }
    let mut model = model;
    model.config.dropout = cfg.dropout;
    model.config.validate()?;

    let mask = model.trainable_mask();
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let trainable: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let decay: Vec<bool> = trainable
        .iter()
        .map(|&i| cfg.decay_prefix || !names[i].starts_with("prefix."))
        .collect();
    let shapes: Vec<Vec<usize>> = {
        let params = model.parameters();
        trainable.iter().map(|&i| params[i].1.shape().to_vec()).collect()
    };
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = AdamW::new(&shape_refs, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);

    let peak = cfg.peak_lr(model.mode);
    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let micro = cfg.batch_size / cfg.grad_accum;
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut shuffle_rng = SplitMix64::stream(cfg.seed, 3);
    let mut dropout_rng = SplitMix64::stream(cfg.seed, 2);

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, EncoderModel)> = None;
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut lr_now = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            let mut batch_loss = 0.0;
            for chunk in batch.chunks(micro) {
                let pairs: Vec<(Vec<usize>, usize)> = chunk
                    .iter()
                    .map(|&i| (train_data.examples[i].tokens.clone(), train_data.examples[i].label))
                    .collect();
                let (loss, g) = match model.loss_and_gradients(&pairs, Some(&mut dropout_rng)) {
                    // Non-finite weights surface as a softmax over non-finite scores.
                    Err(Error::DegenerateRow { .. }) => {
                        return Err(Error::Divergence {
                            step: step + 1,
                            loss: f64::NAN,
                        })
                    }
                    other => other?,
                };
                batch_loss += loss;
                for (acc, &i) in grads.iter_mut().zip(&trainable) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g[i].data()) {
                        *a += b;
                    }
                }
            }
            let mean_loss = batch_loss / batch.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Divergence {
                    step: step + 1,
                    loss: mean_loss,
                });
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            lr_now = lr_at(step, total_steps, peak, cfg.warmup_fraction);
            let mut all = model.parameters_mut();
            let mut selected: Vec<&mut Tensor> = Vec::with_capacity(trainable.len());
            let mut next = trainable.iter().peekable();
            for (i, p) in all.drain(..).enumerate() {
                if next.peek() == Some(&&i) {
                    next.next();
                    selected.push(p);
                }
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.update(&mut selected, &grad_refs, lr_now, &decay)?;
            if selected.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    step: step + 1,
                    loss: f64::NAN,
                });
            }
            step += 1;
            epoch_loss += batch_loss;
        }

        let metrics = evaluate(&model, dev)?;
        let dev_metric = metrics.get(cfg.metric);
        log.push(EpochLog {
            epoch,
            step,
            train_loss: epoch_loss / train_data.len() as f64,
            dev_metric,
            dev_ece: metrics.ece,
            lr: lr_now,
            mode: model.mode,
            seed: cfg.seed,
        });
        if best.as_ref().is_none_or(|(b, _, _)| dev_metric > *b) {
            best = Some((dev_metric, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.target_metric.is_some_and(|t| dev_metric >= t) {
            break;
        }
        if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    let (best_dev_metric, best_epoch, model) = best.expect("at least one epoch runs");
    Ok(TrainedResult {
        model,
        log,
        best_epoch,
        best_dev_metric,
    })
}

/// Short full fine-tuning phase that stands in for backbone pretraining.
///
/// The backbone learns to find and name marker tokens anywhere in a sequence
/// (which of the marker ids is present, if any). Downstream tasks get a fresh
/// head, so their label mapping is learned only during tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmConfig {
    pub seq_len: usize,
    pub n_examples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WarmConfig {
    fn default() -> Self {
        Self {
            seq_len: 128,
            n_examples: 2000,
            epochs: 8,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Trains a fine-tuning model of `cfg`'s dimensions on marker identification and
/// returns the run; copy its backbone with [`EncoderModel::with_backbone`].
pub fn warm_backbone(cfg: &ModelConfig, warm: &WarmConfig) -> Result<TrainedResult> {
    if warm.seq_len > cfg.max_len {
        return Err(Error::Config(format!(
            "warm.seq_len {} exceeds model.max_len {}",
            warm.seq_len, cfg.max_len
        )));
    }
    let task = SyntheticTask {
        vocab_size: cfg.vocab_size,
        ..SyntheticTask::new(warm.seq_len, CLASS_TOKENS + 1)
    };
    let data = gen_identify_split(&task, warm.n_examples, warm.seed, Split::Train)?;
    let dev = gen_identify_split(&task, (warm.n_examples / 10).max(20), warm.seed, Split::Dev)?;
    let model = EncoderModel::new(
        ModelConfig {
            n_classes: CLASS_TOKENS + 1,
            ..cfg.clone()
        },
        TuningMode::FineTuning,
    )?;
    let tc = TrainConfig {
        epochs: warm.epochs,
        lr: Some(warm.lr),
        seed: warm.seed,
        ..TrainConfig::default()
    };
    train(model, &data, &dev, &tc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_cases() {
        let u = cross_entropy(&Tensor::vector(vec![0.7; 4]), 1).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-14);
        assert!(cross_entropy(&Tensor::vector(vec![50.0, -50.0]), 0).unwrap() < 1e-40);
        let l: [f64; 3] = [0.3, -1.2, 2.5];
        let direct = -(l[2].exp() / l.iter().map(|v: &f64| v.exp()).sum::<f64>()).ln();
        assert!((cross_entropy(&Tensor::vector(l.to_vec()), 2).unwrap() - direct).abs() < 1e-14);
        assert!(matches!(cross_entropy(&Tensor::vector(vec![0.0; 2]), 2), Err(Error::Label(_))));
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 1e-3, 0.1), 0.0);
        assert_eq!(lr_at(10, 100, 1e-3, 0.1), 1e-3);
        assert!((lr_at(5, 100, 1e-3, 0.1) - 5e-4).abs() < 1e-18);
        assert!((lr_at(55, 100, 1e-3, 0.1) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at(100, 100, 1e-3, 0.1), 0.0);
        assert_eq!(lr_at(0, 10, 2.0, 0.0), 2.0);
    }

    fn one(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut opt = AdamW::new(&[&[1]], 0.9, 0.999, 1e-8, 0.0);
        opt.m[0] = one(0.5);
        opt.v[0] = one(0.25);
        let mut p = one(1.5);
        let g = one(0.0);
        opt.update(&mut [&mut p], &[&g], 0.0, &[true]).unwrap();
        assert_eq!(p.data()[0], 1.5);
        assert_eq!(opt.m[0].data()[0], 0.45);
        assert!(opt.v[0].data()[0] < 0.25);
    }

    #[test]
    fn adamw_single_step_by_hand() {
        // m = 0.1·g, v = 0.001·g², corrections 0.1 and 0.001 → step = lr·g/(|g| + eps).
        let mut opt = AdamW::new(&[&[1]], 0.9, 0.999, 1e-8, 0.0);
        let mut p = one(1.0);
        opt.update(&mut [&mut p], &[&one(2.0)], 0.1, &[true]).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut opt = AdamW::new(&[&[1], &[1]], 0.9, 0.999, 1e-8, 0.1);
        let (mut a, mut b) = (one(3.0), one(3.0));
        let z = one(0.0);
        opt.update(&mut [&mut a, &mut b], &[&z, &z], 0.5, &[true, false]).unwrap();
        assert_eq!(a.data()[0], 3.0 * (1.0 - 0.5 * 0.1));
        assert_eq!(b.data()[0], 3.0);
    }

    #[test]
    fn adamw_shape_mismatch() {
        let mut opt = AdamW::new(&[&[2]], 0.9, 0.999, 1e-8, 0.0);
        let mut p = one(0.0);
        assert!(matches!(opt.update(&mut [&mut p], &[&one(0.0)], 0.1, &[true]), Err(Error::Shape { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("train.warmup_fraction")));
        let bad = TrainConfig {
            lr: Some(0.0),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tiny_model(mode: TuningMode) -> EncoderModel {
        let cfg = ModelConfig {
            vocab_size: 40,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_len: 16,
            prefix_len: 2,
            n_classes: 2,
            ..ModelConfig::default()
        };
        EncoderModel::new(cfg, mode).unwrap()
    }

    fn trivial_data(n: usize, seed: u64) -> Dataset {
        let mut rng = SplitMix64::new(seed);
        let examples = (0..n)
            .map(|i| {
                let label = i % 2;
                let mut tokens = vec![crate::model::CLS_ID];
                for _ in 0..7 {
                    tokens.push(10 + label * 10 + rng.below(10));
                }
                crate::tasks::Example { tokens, label }
            })
            .collect();
        Dataset {
            examples,
            n_classes: 2,
            split: crate::tasks::Split::Train,
            seed,
            label_names: Vec::new(),
        }
    }

    #[test]
    fn smoke_train_is_deterministic_and_learns() {
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 8,
            lr: Some(1e-2),
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let train_set = trivial_data(64, 1);
        let dev = trivial_data(32, 2);
        let a = train(tiny_model(TuningMode::FineTuning), &train_set, &dev, &cfg).unwrap();
        let b = train(tiny_model(TuningMode::FineTuning), &train_set, &dev, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert!(a.best_dev_metric >= 0.99, "{:?}", a.log);
        let max = a.log.iter().map(|e| e.dev_metric).fold(f64::MIN, f64::max);
        assert_eq!(a.best_dev_metric, max);
        assert_eq!(evaluate(&a.model, &dev).unwrap().accuracy, max);
    }

    #[test]
    fn prefix_training_leaves_frozen_parameters_untouched() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let train_set = trivial_data(16, 3);
        for mode in [TuningMode::PrefixTuning, TuningMode::PrefixPropagation] {
            let model = tiny_model(mode);
            let out = train(model.clone(), &train_set, &train_set, &cfg).unwrap();
            let mut prefix_moved = false;
            for ((name, before), (_, after)) in model.parameters().iter().zip(out.model.parameters()) {
                if model.is_trainable(name) {
                    prefix_moved |= name.starts_with("prefix.") && before.max_abs_diff(after) > 0.0;
                } else {
                    assert_eq!(before.max_abs_diff(after), 0.0, "{name}");
                }
            }
            assert!(prefix_moved);
            assert_eq!(out.log.len(), out.log.last().unwrap().epoch);
        }
    }

    #[test]
    fn divergence_names_the_step() {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: Some(1e300),
            warmup_fraction: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let data = trivial_data(8, 4);
        let err = train(tiny_model(TuningMode::FineTuning), &data, &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { step, .. } if step <= 2), "{err:?}");
    }
}
