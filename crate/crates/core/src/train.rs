//! Desk-scale supervised training: SGD with momentum and weight decay,
//! cosine learning-rate schedule with linear warmup, softmax cross-entropy.
//! Runs are bit-deterministic for a fixed config.

use crate::autodiff::{Gradients, LayerGraph, Phase};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Dtype, Element, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warmup over this many epochs, from `warmup_factor * base_lr`.
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    pub seed: u64,
    pub dtype: Dtype,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 5,
            warmup_factor: 1e-3,
            seed: 0,
            dtype: Dtype::F32,
        }
    }
}

/// Step-indexed learning-rate schedule: linear warmup to `base_lr`, then
/// cosine annealing to zero at `total_steps`.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_factor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Schedule {
            base_lr: cfg.base_lr,
            warmup_factor: cfg.warmup_factor,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
        }
    }
}

/// `lr(t)`: warmup-linear for `t < warmup_steps`, else
/// `0.5 * base * (1 + cos(pi * progress))`; exactly zero at the final step.
pub fn lr_schedule(sched: &Schedule, step: usize) -> f64 {
    if step < sched.warmup_steps {
        let progress = step as f64 / sched.warmup_steps as f64;
        return sched.base_lr * (sched.warmup_factor + (1.0 - sched.warmup_factor) * progress);
    }
    let span = sched.total_steps.saturating_sub(sched.warmup_steps);
    if span == 0 {
        return if step >= sched.total_steps { 0.0 } else { sched.base_lr };
    }
    let progress = ((step - sched.warmup_steps) as f64 / span as f64).min(1.0);
    0.5 * sched.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Momentum buffers aligned with the graph's parameter order.
pub struct SgdState<T: Element> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Element> SgdState<T> {
    pub fn new(graph: &LayerGraph<T>) -> Self {
        SgdState {
            velocity: graph
                .named_params()
                .iter()
                .map(|(_, t, _)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }
}

/// One slice-level SGD-with-momentum update:
/// `v <- momentum*v + g + wd*w; w <- w - lr*v` (`wd` already zeroed for
/// no-decay parameters by the caller).
pub fn sgd_update_slice<T: Element>(
    w: &mut [T],
    v: &mut [T],
    g: &[T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let mu = T::from_f64(momentum);
    let wd = T::from_f64(weight_decay);
    let lr = T::from_f64(lr);
    for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
        *vi = mu * *vi + gi + wd * *wi;
        *wi = *wi - lr * *vi;
    }
}

/// Applies one optimizer step over every graph parameter. Weight decay is
/// skipped for parameters tagged no-decay (batch-norm scale/shift).
pub fn sgd_step<T: Element>(
    graph: &mut LayerGraph<T>,
    grads: &Gradients<T>,
    state: &mut SgdState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != state.velocity.len() {
        return Err(Error::Graph(format!(
            "gradient count {} vs optimizer state {}",
            grads.len(),
            state.velocity.len()
        )));
    }
    let mut idx = 0;
    let gts = grads.tensors();
    let mut status = Ok(());
    graph.visit_params_mut(|name, decay, w| {
        if status.is_err() {
            return;
        }
        let g = &gts[idx];
        if g.shape() != w.shape() {
            status = Err(Error::ShapeMismatch(format!(
                "grad {name}: {:?} vs param {:?}",
                g.shape(),
                w.shape()
            )));
            return;
        }
        let wd = if decay { cfg.weight_decay } else { 0.0 };
        sgd_update_slice(
            w.data_mut(),
            state.velocity[idx].data_mut(),
            g.data(),
            lr,
            cfg.momentum,
            wd,
        );
        idx += 1;
    });
    status
}

/// Mean softmax cross-entropy over the batch and its gradient at the logits:
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let inv_b = 1.0 / b as f64;
    let mut dlogits = Tensor::zeros(&[b, k]);
    let mut loss = 0.0;
    for bi in 0..b {
        let row = &logits.data()[bi * k..(bi + 1) * k];
        if labels[bi] >= k {
            return Err(Error::Config(format!("label {} >= {k}", labels[bi])));
        }
        let max = row
            .iter()
            .map(|&v| Element::to_f64(v))
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row
            .iter()
            .map(|&v| (Element::to_f64(v) - max).exp())
            .collect();
        let denom: f64 = exps.iter().sum();
        loss -= ((Element::to_f64(row[labels[bi]]) - max) - denom.ln()) * inv_b;
        for ki in 0..k {
            let p = exps[ki] / denom;
            let target = if ki == labels[bi] { 1.0 } else { 0.0 };
            dlogits.data_mut()[bi * k + ki] = T::from_f64((p - target) * inv_b);
        }
    }
    Ok((loss, dlogits))
}

/// Fraction of rows whose argmax (first maximum) equals the label.
pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut correct = 0usize;
    for bi in 0..b {
        let row = &logits.data()[bi * k..(bi + 1) * k];
        let mut best = 0usize;
        for ki in 1..k {
            if row[ki] > row[best] {
                best = ki;
            }
        }
        if best == labels[bi] {
            correct += 1;
        }
    }
    correct as f64 / b as f64
}

fn batch_of<T: Element>(ds: &Dataset<T>, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
    let shape = ds.images.shape();
    let per = shape[1] * shape[2] * shape[3];
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&ds.images.data()[i * per..(i + 1) * per]);
        labels.push(ds.labels[i]);
    }
    (
        Tensor::new(&[indices.len(), shape[1], shape[2], shape[3]], data).expect("batch shape"),
        labels,
    )
}

/// Loss and accuracy over a dataset in evaluation mode.
pub fn evaluate<T: Element>(
    graph: &LayerGraph<T>,
    ds: &Dataset<T>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = ds.len();
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = batch_of(ds, chunk);
        let (logits, _) = graph.forward(&x, Phase::Eval)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        correct += accuracy(&logits, &labels) * chunk.len() as f64;
    }
    Ok((loss_sum / n as f64, correct / n as f64))
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    /// CSV with header `epoch,lr,train_loss,train_acc,val_acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
        for m in &self.metrics {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                m.epoch, m.lr, m.train_loss, m.train_acc, m.val_acc
            ));
        }
        out
    }

    pub fn final_val_acc(&self) -> f64 {
        self.metrics.last().map(|m| m.val_acc).unwrap_or(0.0)
    }
}

/// Trains in place. Row 0 of the metrics log is the pre-training evaluation;
/// row `e` reports the mean training loss/accuracy seen during epoch `e` and
/// the post-epoch validation accuracy. Aborts with a diagnostic when the
/// loss turns non-finite.
pub fn train<T: Element>(
    graph: &mut LayerGraph<T>,
    cfg: &TrainConfig,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size.max(1));
    let sched = Schedule::new(cfg, steps_per_epoch);
    let mut state = SgdState::new(graph);
    let mut rng = Rng::new(cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.epochs + 1);

    let (loss0, acc0) = evaluate(graph, train_set, cfg.batch_size)?;
    let (_, val0) = evaluate(graph, val_set, cfg.batch_size)?;
    metrics.push(EpochMetrics {
        epoch: 0,
        lr: lr_schedule(&sched, 0),
        train_loss: loss0,
        train_acc: acc0,
        val_acc: val0,
    });

    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let epoch_lr = lr_schedule(&sched, step);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, labels) = batch_of(train_set, chunk);
            let (logits, tape) = graph.forward_train(&x)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {epoch}, step {step}: {loss}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            acc_sum += accuracy(&logits, &labels) * chunk.len() as f64;
            let grads = graph.backward(tape, &dlogits)?;
            let lr = lr_schedule(&sched, step);
            sgd_step(graph, &grads, &mut state, cfg, lr)?;
            step += 1;
        }
        let (_, val_acc) = evaluate(graph, val_set, cfg.batch_size)?;
        metrics.push(EpochMetrics {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: acc_sum / train_set.len() as f64,
            val_acc,
        });
    }
    Ok(TrainOutcome { metrics })
}
