//! Minibatch training with binary cross-entropy, ADAM and early stopping on
//! validation AUC.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::arch::{build, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::eval::mean_auc;
use crate::nn::{role, Mode};
use crate::tensor::Tensor;
use crate::{SeededRng, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Predictions are clamped to `[c, 1 - c]` inside the loss.
    pub bce_clamp: f64,
    /// Start the readout bias at each tag's log-odds in the training labels.
    pub prior_bias: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 100,
            patience: 1,
            seed: 0,
            bce_clamp: 1e-7,
            prior_bias: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch normalization".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("learning_rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("ADAM betas must lie in [0, 1)".into()));
        }
        if !(0.0..0.5).contains(&self.bce_clamp) {
            return Err(Error::Config("bce_clamp must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of `pred` against `target`, both `[batch, tags]`.
pub fn bce_loss(pred: &Tensor, target: &Tensor, clamp: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension {
            op: "bce_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = tape.bce(p, target.data(), clamp)?;
    Ok(tape.data(l)[0])
}

/// ADAM with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainingConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter; moment
    /// buffers are sized on the first call.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Vec<f64>]) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::Contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract("parameter set changed between ADAM steps".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.len() != p.numel() || m.len() != p.numel() {
                return Err(Error::Dimension {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Inputs `[1, F, T]` with aligned label rows.
#[derive(Debug, Clone, Copy)]
pub struct LabeledInputs<'a> {
    pub inputs: &'a [Tensor],
    pub labels: &'a [Vec<u8>],
}

impl<'a> LabeledInputs<'a> {
    pub fn new(inputs: &'a [Tensor], labels: &'a [Vec<u8>]) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Contract(format!("{} inputs for {} label rows", inputs.len(), labels.len())));
        }
        Ok(LabeledInputs { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Batch index ranges over `n` items; a trailing singleton joins the batch
/// before it, since batch normalization needs two samples.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(batch_size).map(|s| s..(s + batch_size).min(n)).collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = last.end;
    }
    out
}

/// A network with optimizer state and the generator for shuffling and
/// dropout.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    pub cfg: TrainingConfig,
    adam: Adam,
    rng: SeededRng,
    epoch: usize,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            adam: Adam::new(&cfg),
            net,
            cfg,
            rng,
            epoch: 0,
        })
    }

    /// Builds a freshly initialized network from `cfg.seed`.
    pub fn from_spec(spec: &NetworkSpec, cfg: TrainingConfig) -> Result<Self> {
        let net = build(spec, &mut SeededRng::seed_from_u64(cfg.seed))?;
        Self::new(net, cfg)
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One forward/backward/update on a batch; returns the batch loss before
    /// the update.
    pub fn train_step(&mut self, inputs: &[&Tensor], labels: &[&[u8]], step: usize) -> Result<f64> {
        self.train_batch(&Tensor::stack(inputs)?, labels, step)
    }

    /// Like [`Trainer::train_step`] on an already stacked `[batch, C, F, T]`
    /// input.
    pub fn train_batch<L: AsRef<[u8]>>(&mut self, x: &Tensor, labels: &[L], step: usize) -> Result<f64> {
        if x.shape().first().is_none_or(|&b| b < 2) || labels.len() != x.shape()[0] {
            return Err(Error::Contract("training batches need at least two examples, one label row each".into()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(x.clone());
        let fwd = self.net.forward(&mut tape, x, Mode::Train, true, &mut self.rng)?;
        let target: Vec<f64> = labels.iter().flat_map(|r| r.as_ref().iter().map(|&l| f64::from(l))).collect();
        let loss_var = tape.bce(fwd.output, &target, self.cfg.bce_clamp)?;
        let loss = tape.data(loss_var)[0];
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch + 1,
                step,
                loss,
            });
        }
        tape.backward_release(loss_var)?;
        let grads: Vec<Vec<f64>> = fwd
            .params
            .iter()
            .map(|&p| tape.take_grad(p).unwrap_or_else(|| vec![0.0; tape.shape(p).iter().product()]))
            .collect();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                epoch: self.epoch + 1,
                step,
                loss,
            });
        }
        self.net.apply_bn_stats(&fwd.bn_stats)?;
        self.adam.update(self.net.trainable_mut(), &grads)?;
        Ok(loss)
    }

    /// One shuffled pass; returns the example-weighted mean loss.
    pub fn train_epoch(&mut self, data: LabeledInputs) -> Result<f64> {
        if data.len() < 2 {
            return Err(Error::Contract("training needs at least two examples".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (step, r) in batch_ranges(order.len(), self.cfg.batch_size).into_iter().enumerate() {
            let idx = &order[r];
            let xs: Vec<&Tensor> = idx.iter().map(|&i| &data.inputs[i]).collect();
            let ys: Vec<&[u8]> = idx.iter().map(|&i| data.labels[i].as_slice()).collect();
            total += self.train_step(&xs, &ys, step + 1)? * idx.len() as f64;
        }
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }

    pub fn predict(&self, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&Tensor> = inputs.iter().collect();
        self.net.predict(&refs, self.cfg.batch_size)
    }

    pub fn mean_auc(&self, data: LabeledInputs) -> Result<f64> {
        mean_auc(&self.predict(data.inputs)?, data.labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters from the epoch with the best validation AUC.
    pub net: Network,
    pub history: Vec<EpochRecord>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_valid_auc: Option<f64>,
}

/// Trains until validation AUC fails to improve for `patience` epochs or
/// `max_epochs` is reached, then restores the best parameters.
pub fn fit(trainer: Trainer, train: LabeledInputs, valid: LabeledInputs, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<FitResult> {
    let mut trainer = trainer;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut stale = 0;
    if trainer.cfg.max_epochs > 0 {
        // Fail before spending an epoch if validation AUC is undefined.
        if valid.labels.is_empty() {
            return Err(Error::UndefinedAuc("validation split is empty".into()));
        }
        let dummy: Vec<Vec<f64>> = valid.labels.iter().map(|r| vec![0.0; r.len()]).collect();
        mean_auc(&dummy, valid.labels)?;
        if trainer.cfg.prior_bias {
            set_prior_bias(&mut trainer.net, train.labels)?;
        }
    }
    for _ in 0..trainer.cfg.max_epochs {
        let start = Instant::now();
        let train_loss = trainer.train_epoch(train)?;
        let valid_auc = trainer.mean_auc(valid)?;
        let record = EpochRecord {
            epoch: trainer.epochs_done(),
            train_loss,
            valid_auc,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| valid_auc > *b) {
            best = Some((valid_auc, trainer.epochs_done(), trainer.net.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= trainer.cfg.patience.max(1) {
                break;
            }
        }
    }
    Ok(match best {
        Some((auc, epoch, net)) => FitResult {
            net,
            history,
            best_epoch: epoch,
            best_valid_auc: Some(auc),
        },
        None => FitResult {
            net: trainer.net,
            history,
            best_epoch: 0,
            best_valid_auc: None,
        },
    })
}

/// Smoothed log-odds `ln((p + ½) / (n − p + ½))` of each tag's positives.
pub fn prior_logits<L: AsRef<[u8]>>(labels: &[L]) -> Vec<f64> {
    let n = labels.len() as f64;
    let tags = labels.first().map_or(0, |r| r.as_ref().len());
    (0..tags)
        .map(|k| {
            let p = labels.iter().filter(|r| r.as_ref()[k] == 1).count() as f64;
            ((p + 0.5) / (n - p + 0.5)).ln()
        })
        .collect()
}

/// Overwrites the readout bias with [`prior_logits`] of `labels`.
pub fn set_prior_bias<L: AsRef<[u8]>>(net: &mut Network, labels: &[L]) -> Result<()> {
    let logits = prior_logits(labels);
    let bias = net
        .layers
        .last_mut()
        .and_then(|l| l.params.params.get_mut(role::BIAS))
        .ok_or_else(|| Error::Contract("network has no readout bias".into()))?;
    if bias.numel() != logits.len() {
        return Err(Error::Dimension {
            op: "prior bias",
            lhs: bias.shape().to_vec(),
            rhs: vec![logits.len()],
        });
    }
    bias.data_mut().copy_from_slice(&logits);
    Ok(())
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::file(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    if history.is_empty() {
        w.write_record(["epoch", "train_loss", "valid_auc", "seconds"])?;
    }
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::file(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests;
