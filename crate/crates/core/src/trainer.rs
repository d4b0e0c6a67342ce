//! Mini-batch training loop with momentum SGD, step learning-rate decay and
//! a warm-up phase that runs the plain margin loss before label correction
//! and the boundary regularizer switch on.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::{self, HeadConfig, HeadKind};
use crate::model::EmbeddingModel;
use crate::noisegen::{NoiseLedger, NoisyDataset};

/// Milestones of the reference 30-epoch schedule.
pub const REFERENCE_EPOCHS: usize = 30;
pub const REFERENCE_MILESTONES: [usize; 3] = [6, 12, 19];
pub const REFERENCE_WARMUP: usize = 7;

const SHUFFLE_STREAM: u64 = 0x5eed_5eed_5eed_5eed;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub head: HeadConfig,
    pub epochs: usize,
    /// `None`: `round(7/30 · epochs)`.
    pub warmup_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is divided by 10. `None`: the
    /// reference milestones scaled to `epochs`.
    pub lr_milestones: Option<Vec<usize>>,
    pub seed: u64,
    /// Keep corrected labels for later epochs instead of re-deciding from the
    /// stored label each iteration.
    pub persistent_correction: bool,
    pub correction_during_warmup: bool,
    pub regularizer_during_warmup: bool,
}

impl TrainConfig {
    pub fn new(head: HeadConfig, epochs: usize) -> Self {
        Self {
            head,
            epochs,
            warmup_epochs: None,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: None,
            seed: 0,
            persistent_correction: false,
            correction_during_warmup: false,
            regularizer_during_warmup: false,
        }
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| scale_epoch(REFERENCE_WARMUP, self.epochs))
    }

    pub fn milestones(&self) -> Vec<usize> {
        match &self.lr_milestones {
            Some(m) => m.clone(),
            None => {
                let mut m: Vec<usize> = REFERENCE_MILESTONES
                    .iter()
                    .map(|&e| scale_epoch(e, self.epochs))
                    .filter(|&e| e > 0 && e < self.epochs)
                    .collect();
                m.dedup();
                m
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        self.head.validate()?;
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.warmup() >= self.epochs {
            return bad(format!(
                "warm-up ({}) must be shorter than training ({})",
                self.warmup(),
                self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.milestones().windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing: {:?}", self.milestones()));
        }
        Ok(())
    }

    /// Head as it runs in `epoch`, given the live head state.
    fn phase_head(&self, epoch: usize, state: &HeadConfig) -> HeadConfig {
        let mut head = state.clone();
        if epoch < self.warmup() {
            if !self.correction_during_warmup {
                head.correction_enabled = false;
            }
            if !self.regularizer_during_warmup && head.kind == HeadKind::BoundaryFace {
                head.lambda = 0.0;
            }
        }
        head
    }
}

fn scale_epoch(reference: usize, epochs: usize) -> usize {
    (reference as f64 * epochs as f64 / REFERENCE_EPOCHS as f64).round() as usize
}

/// `lr / 10^(number of milestones <= epoch)`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let passed = config.milestones().iter().filter(|&&m| m <= epoch).count();
    config.lr / 10f64.powi(passed as i32)
}

/// `v ← μ v + g + λ_wd p`, then `p ← p - lr v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Parameter gradients of the head's mean batch loss (no weight decay),
/// together with the head's forward output.
pub fn batch_gradients(
    model: &EmbeddingModel,
    inputs: &[&[f64]],
    labels: &[usize],
    head: &HeadConfig,
) -> Result<(EmbeddingModel, heads::ForwardOutput)> {
    let (features, caches): (Vec<Vec<f64>>, Vec<_>) = inputs.iter().map(|x| model.forward_cached(x)).unzip();
    let centers = model.centers.to_rows();
    let fwd = heads::forward_embeddings(head, &features, &centers, labels)?;
    let head_grads = heads::backward(head, &fwd, &features, &centers)?;
    let mut grads = model.backward(inputs, &caches, &head_grads.features);
    for (row, g) in head_grads.centers.iter().enumerate() {
        grads.centers.row_mut(row).copy_from_slice(g);
    }
    Ok((grads, fwd))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub epoch: usize,
    /// Global iteration counter.
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub detected: usize,
    pub correct_corrections: usize,
    pub wrong_corrections: usize,
    pub hard_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sample-weighted mean of the iteration losses.
    pub mean_loss: f64,
    pub lr: f64,
    pub detected: usize,
    pub correct_corrections: usize,
    pub wrong_corrections: usize,
    pub hard_count: usize,
    pub verification_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub iterations: Vec<IterationMetrics>,
    pub epochs: Vec<EpochMetrics>,
    /// Whether correction outcomes were scored against a noise ledger.
    pub ledger_attached: bool,
}

impl MetricsLog {
    /// Re-aggregates iteration rows per epoch.
    pub fn aggregate_epochs(iterations: &[IterationMetrics]) -> Vec<EpochMetrics> {
        let mut out: Vec<EpochMetrics> = Vec::new();
        let mut weights: Vec<usize> = Vec::new();
        for it in iterations {
            if out.last().is_none_or(|e| e.epoch != it.epoch) {
                out.push(EpochMetrics {
                    epoch: it.epoch,
                    mean_loss: 0.0,
                    lr: it.lr,
                    detected: 0,
                    correct_corrections: 0,
                    wrong_corrections: 0,
                    hard_count: 0,
                    verification_accuracy: None,
                });
                weights.push(0);
            }
            let e = out.last_mut().unwrap();
            e.mean_loss += it.loss * it.batch_size as f64;
            e.detected += it.detected;
            e.correct_corrections += it.correct_corrections;
            e.wrong_corrections += it.wrong_corrections;
            e.hard_count += it.hard_count;
            *weights.last_mut().unwrap() += it.batch_size;
        }
        for (e, w) in out.iter_mut().zip(weights) {
            e.mean_loss /= w.max(1) as f64;
        }
        out
    }

    /// Fraction of triggered corrections that restored the clean label.
    pub fn correction_precision(&self, iteration: usize) -> Option<f64> {
        let it = self.iterations.get(iteration)?;
        if !self.ledger_attached {
            return None;
        }
        Some(it.correct_corrections as f64 / it.detected.max(1) as f64)
    }
}

/// Trains `model` on `data`; equivalent to [`train_with_eval`] without a
/// per-epoch evaluation.
pub fn train(
    model: EmbeddingModel,
    data: &NoisyDataset,
    ledger: Option<&NoiseLedger>,
    config: &TrainConfig,
) -> Result<(EmbeddingModel, MetricsLog)> {
    train_with_eval(model, data, ledger, config, |_, _| None)
}

/// Runs the full schedule. `evaluate(epoch, model)` is called after every
/// epoch; its value lands in [`EpochMetrics::verification_accuracy`].
pub fn train_with_eval(
    mut model: EmbeddingModel,
    data: &NoisyDataset,
    ledger: Option<&NoiseLedger>,
    config: &TrainConfig,
    mut evaluate: impl FnMut(usize, &EmbeddingModel) -> Option<f64>,
) -> Result<(EmbeddingModel, MetricsLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidTrainConfig("training data is empty".into()));
    }
    let shape = model.shape();
    if data.dim() != shape.input_dim {
        return Err(Error::DimensionMismatch {
            expected: shape.input_dim,
            found: data.dim(),
        });
    }
    if data.num_classes != shape.num_classes {
        return Err(Error::DimensionMismatch {
            expected: shape.num_classes,
            found: data.num_classes,
        });
    }

    let clean_labels = ledger.map(|l| l.clean_labels(data.len()));
    let mut labels = data.labels.clone();
    let mut velocity = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut head_state = config.head.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = MetricsLog {
        ledger_attached: ledger.is_some(),
        ..Default::default()
    };

    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let head = config.phase_head(epoch, &head_state);
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| data.inputs[i].as_slice()).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (grads, fwd) = batch_gradients(&model, &inputs, &batch_labels, &head)?;
            for ((_, p), ((_, g), (_, v))) in model
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors().into_iter().zip(velocity.tensors_mut()))
            {
                sgd_step(
                    p.as_mut_slice(),
                    g.as_slice(),
                    v.as_mut_slice(),
                    lr,
                    config.momentum,
                    config.weight_decay,
                );
            }
            if let Some(t) = fwd.updated_modulator {
                head_state.t = Some(t);
            }

            let (mut correct, mut wrong) = (0, 0);
            for (&i, rec) in batch.iter().zip(&fwd.records) {
                if !rec.corrected {
                    continue;
                }
                if let Some(clean) = &clean_labels {
                    if clean[i] == Some(rec.effective_label) {
                        correct += 1;
                    } else {
                        wrong += 1;
                    }
                }
                if config.persistent_correction {
                    labels[i] = rec.effective_label;
                }
            }
            log.iterations.push(IterationMetrics {
                epoch,
                iteration: log.iterations.len(),
                loss: fwd.mean_loss,
                lr,
                batch_size: batch.len(),
                detected: fwd.corrected_count(),
                correct_corrections: correct,
                wrong_corrections: wrong,
                hard_count: fwd.hard_count(),
            });
        }
        let first = log.iterations.iter().position(|it| it.epoch == epoch).unwrap_or(0);
        let mut summary = MetricsLog::aggregate_epochs(&log.iterations[first..]);
        let mut epoch_metrics = summary.pop().expect("epoch has at least one batch");
        epoch_metrics.verification_accuracy = evaluate(epoch, &model);
        log.epochs.push(epoch_metrics);
    }
    Ok((model, log))
}
