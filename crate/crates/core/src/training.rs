//! SGD training loop (batch size 1) with step- and epoch-based schedules,
//! periodic train/val metrics, and deterministic end-to-end trajectories.

use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::layers;
use crate::network::{self, GradientSet, Network};
use crate::tensor::Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Step- or epoch-counted schedule. One step is one sample presentation
/// followed by one parameter update; one epoch is one pass over the shuffled
/// training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Steps(usize),
    Epochs(usize),
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub learning_rate: f64,
    pub seed: u64,
    /// Steps between train/val metric rows. A final row is always emitted.
    pub eval_every: usize,
    /// Steps between checkpoint callbacks; 0 disables.
    pub checkpoint_every: usize,
    pub val_fraction: f64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        let count = match self.schedule {
            Schedule::Steps(n) | Schedule::Epochs(n) => n,
        };
        if count < 1 {
            return Err(Error::Config("schedule count must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Range(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Which split a metrics row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    /// Fractional epochs: step / train-split size.
    pub epoch: f64,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

impl MetricsRecord {
    /// CSV header for the metrics log.
    pub const CSV_HEADER: &'static str = "step,epoch,split,loss,accuracy";

    /// One CSV row; loss and accuracy at 6 decimal places.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{:.6},{:.6}",
            self.step,
            self.epoch,
            self.split.as_str(),
            self.loss,
            self.accuracy
        )
    }
}

/// Receives metric rows and (optionally) checkpoints during training.
pub trait TrainObserver {
    fn metrics(&mut self, record: &MetricsRecord);
    fn checkpoint(&mut self, _step: usize, _net: &Network) {}
}

/// Observer that discards everything; the full history is returned anyway.
pub struct NullObserver;

impl TrainObserver for NullObserver {
    fn metrics(&mut self, _record: &MetricsRecord) {}
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainedResult {
    pub metrics: Vec<MetricsRecord>,
    pub final_train: (f64, f64),
    pub final_val: Option<(f64, f64)>,
    pub steps_run: usize,
}

/// Loss/accuracy summary from [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// One SGD update: `p <- p - lr * g` for every parameter tensor, in place.
pub fn sgd_step(net: &mut Network, grads: &GradientSet, lr: f64) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let params = net.param_tensors_mut();
    if params.len() != grads.tensors.len() {
        return Err(Error::Shape(format!(
            "{} gradient tensors for {} parameter tensors",
            grads.tensors.len(),
            params.len()
        )));
    }
    for (p, g) in params.into_iter().zip(&grads.tensors) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

fn eval_one(net: &Network, sample: &dataset::Sample) -> Result<(usize, f64)> {
    let trace = network::forward(net, &sample.image)?;
    let loss = layers::cross_entropy(&trace.probs, sample.label)?;
    let (pred, _) = {
        let mut best = 0;
        let mut best_p = trace.probs.data()[0];
        for (i, &p) in trace.probs.data().iter().enumerate().skip(1) {
            if p > best_p {
                best = i;
                best_p = p;
            }
        }
        (best, best_p)
    };
    Ok((pred, loss))
}

/// Mean cross-entropy, overall and per-class accuracy, and the confusion
/// matrix over a dataset. Per-image inference may run in parallel; the
/// reduction is performed in dataset order.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    #[cfg(feature = "parallel")]
    let per_sample: Vec<(usize, f64)> = data
        .samples
        .par_iter()
        .map(|s| eval_one(net, s))
        .collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let per_sample: Vec<(usize, f64)> = data
        .samples
        .iter()
        .map(|s| eval_one(net, s))
        .collect::<Result<Vec<_>>>()?;

    let n_classes = data.class_names.len();
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut loss_sum = 0.0;
    for (sample, &(pred, loss)) in data.samples.iter().zip(&per_sample) {
        confusion[sample.label][pred] += 1;
        loss_sum += loss;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class_accuracy: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    Ok(EvalReport {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        per_class_accuracy,
        confusion,
    })
}

/// Evaluation loss of a freshly initialized network; near `ln(classes)` for
/// balanced data and symmetric initialization.
pub fn initial_loss_check(net: &Network, data: &Dataset) -> Result<f64> {
    Ok(evaluate(net, data)?.loss)
}

/// Trains `net` in place. Emits a train/val metrics pair every `eval_every`
/// steps and at completion, and returns the full metrics history.
pub fn train(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let counts = data.class_counts();
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Dataset("every class needs at least one sample".into()));
    }
    if data.class_names.len() != net.class_count() {
        return Err(Error::Config(format!(
            "network has {} classes, dataset has {}",
            net.class_count(),
            data.class_names.len()
        )));
    }

    let (train_set, val_set) = dataset::split(data, cfg.val_fraction, cfg.seed)?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let train_n = train_set.len();
    let total_steps = match cfg.schedule {
        Schedule::Steps(n) => n,
        Schedule::Epochs(n) => n * train_n,
    };

    let mut shuffle_rng = Rng::new(cfg.seed ^ 0x5DEECE66D);
    let mut order: Vec<usize> = (0..train_n).collect();
    let mut metrics = Vec::new();
    let record_eval = |step: usize,
                           net: &Network,
                           metrics: &mut Vec<MetricsRecord>,
                           observer: &mut dyn TrainObserver|
     -> Result<()> {
        let epoch = step as f64 / train_n as f64;
        let train_report = evaluate(net, &train_set)?;
        let rec = MetricsRecord {
            step,
            epoch,
            split: Split::Train,
            loss: train_report.loss,
            accuracy: train_report.accuracy,
        };
        observer.metrics(&rec);
        metrics.push(rec);
        if !val_set.is_empty() {
            let val_report = evaluate(net, &val_set)?;
            let rec = MetricsRecord {
                step,
                epoch,
                split: Split::Val,
                loss: val_report.loss,
                accuracy: val_report.accuracy,
            };
            observer.metrics(&rec);
            metrics.push(rec);
        }
        Ok(())
    };

    for step in 1..=total_steps {
        // Reshuffle at each epoch boundary of the cycling sample stream.
        let pos = (step - 1) % train_n;
        if pos == 0 {
            shuffle_rng.shuffle(&mut order);
        }
        let sample = &train_set.samples[order[pos]];
        let trace = network::forward(net, &sample.image)?;
        let loss = layers::cross_entropy(&trace.probs, sample.label)?;
        if !loss.is_finite() {
            return Err(Error::Numeric { step, msg: format!("non-finite loss {loss}") });
        }
        let grads = network::backward(net, &trace, sample.label)?;
        if !grads.all_finite() {
            return Err(Error::Numeric { step, msg: "non-finite gradient".into() });
        }
        sgd_step(net, &grads, cfg.learning_rate)?;
        net.trained_steps += 1;

        if step % cfg.eval_every == 0 && step != total_steps {
            record_eval(step, net, &mut metrics, observer)?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            observer.checkpoint(step, net);
        }
    }
    record_eval(total_steps, net, &mut metrics, observer)?;

    let final_train = metrics
        .iter()
        .rev()
        .find(|r| r.split == Split::Train)
        .map(|r| (r.loss, r.accuracy))
        .expect("final train row always emitted");
    let final_val = metrics
        .iter()
        .rev()
        .find(|r| r.split == Split::Val)
        .map(|r| (r.loss, r.accuracy));
    Ok(TrainedResult { metrics, final_train, final_val, steps_run: total_steps })
}
