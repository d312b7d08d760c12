//! Losses, momentum SGD, the step learning-rate schedule and the epoch loop.

use std::ops::ControlFlow;

use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{epoch_order, stream_seed, Augment, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{argmax, evaluate, MetricsReport};
use crate::model::Model;
use crate::nn::Mode;
use crate::param::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::{LossScheme, SsmOutput};
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0;
const AUGMENT_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scheme: LossScheme,
    pub seed: u64,
    pub augment: Augment,
}

impl TrainConfig {
    /// ImageNet recipe: 90 epochs, lr 0.1 decayed 10x at epochs 30 and 60,
    /// batch 256, momentum 0.9, weight decay 1e-4.
    pub fn imagenet_recipe() -> Self {
        TrainConfig {
            base_lr: 0.1,
            batch_size: 256,
            epochs: 90,
            milestones: vec![30, 60],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            scheme: LossScheme::Joint,
            seed: 0,
            augment: Augment { pad: 0, flip_prob: 0.0, fill: 0.0 },
        }
    }

    /// Scaled-down default used for 28x28 digits.
    pub fn desk() -> Self {
        TrainConfig {
            base_lr: 0.05,
            batch_size: 128,
            epochs: 15,
            milestones: vec![8, 12],
            ..Self::imagenet_recipe()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones must be strictly increasing, got {:?}", self.milestones)));
        }
        if self.epochs > 0 && self.milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::Config(format!(
                "milestones {:?} must be smaller than epochs {}",
                self.milestones, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return Err(Error::Config("flip probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `base_lr * lr_decay^(number of milestones <= epoch)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let passed = config.milestones.iter().filter(|&&m| m <= epoch).count();
    config.base_lr * config.lr_decay.powi(passed as i32)
}

/// Joint: cross-entropy of the averaged logits. Individual: mean of the per-head cross-entropies.
pub fn ssm_loss<T: Scalar>(tape: &mut Tape<T>, output: &SsmOutput, labels: &[usize], scheme: LossScheme) -> Result<Var> {
    match scheme {
        LossScheme::Joint => tape.cross_entropy(output.combined, labels),
        LossScheme::Individual => {
            let losses = output
                .head_logits
                .iter()
                .map(|&h| tape.cross_entropy(h, labels))
                .collect::<Result<Vec<_>>>()?;
            tape.mean_of(&losses)
        }
    }
}

/// Momentum buffers, one per trainable parameter, indexed like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T: Scalar> {
    pub velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> SgdState<T> {
    /// Zero velocity for every trainable entry of `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        SgdState {
            velocity: store
                .iter()
                .map(|(_, p)| (p.kind == ParamKind::Trainable).then(|| Tensor::zeros(p.tensor.shape().to_vec())))
                .collect(),
        }
    }
}

/// `v <- momentum * v + grad + weight_decay * p;  p <- p - lr * v`, then clears gradients.
/// Buffers are never touched.
pub fn sgd_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::Contract("optimizer state does not match the parameter store".into()));
    }
    for (id, p) in store.iter() {
        if p.kind == ParamKind::Trainable && p.tensor.grad().is_none() {
            return Err(Error::Contract(format!("parameter {} has no gradient", p.name)));
        }
        debug_assert!(id.index() < state.velocity.len());
    }
    let (lr, momentum, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for (id, p) in store.iter_mut() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let v = state.velocity[id.index()]
            .as_mut()
            .ok_or_else(|| Error::Contract(format!("no velocity buffer for {}", p.name)))?;
        let grad = p.tensor.grad().expect("checked above").to_vec();
        for ((w, vel), g) in p.tensor.data_mut().iter_mut().zip(v.data_mut()).zip(grad) {
            *vel = momentum * *vel + g + wd * *w;
            *w = *w - lr * *vel;
        }
        p.tensor.zero_grad();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy of the combined output on the (augmented) training batches.
    pub train_accuracy: f64,
    pub eval: Option<MetricsReport>,
}

/// Model plus optimizer state; everything needed to continue training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub sgd: SgdState<T>,
    pub config: TrainConfig,
    pub next_epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sgd = SgdState::new(&model.store);
        Ok(Trainer { model, sgd, config, next_epoch: 0 })
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    /// One forward/backward/update on a batch; returns `(loss, correct predictions)`.
    pub fn step(&mut self, images: &Tensor<f64>, labels: &[usize], lr: f64) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let x = self.model.input_var(&mut tape, images)?;
        let out = self.model.forward(&mut tape, x, Mode::Train)?;
        let loss = ssm_loss(&mut tape, &out.heads, labels, self.config.scheme)?;
        tape.backward(loss)?;
        self.model.store.accumulate_grads(&tape)?;
        sgd_step(&mut self.model.store, &mut self.sgd, lr, self.config.momentum, self.config.weight_decay)?;

        let k = self.model.num_classes();
        let logits = tape.value(out.heads.combined).to_f64_vec();
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| argmax(&logits[i * k..(i + 1) * k]) == l)
            .count();
        Ok((tape.value(loss).data()[0].to_f64_lossy(), correct))
    }

    /// Trains epoch `next_epoch` and advances it.
    pub fn run_epoch(&mut self, train: &Dataset, eval: Option<&Dataset>) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.next_epoch;
        let lr = lr_at(epoch, &self.config);
        let order = epoch_order(train.len(), true, stream_seed(self.config.seed, epoch, SHUFFLE_STREAM));
        let mut aug_rng = Pcg64::seed_from_u64(stream_seed(self.config.seed, epoch, AUGMENT_STREAM));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            // batch norm needs at least two samples
            if chunk.len() < 2 {
                continue;
            }
            let mut batch = train.batch(chunk);
            if !self.config.augment.is_identity() {
                batch = self.config.augment.apply(&batch, &mut aug_rng);
            }
            let (loss, c) = self.step(&batch.images, &batch.labels, lr)?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::Config("no training batch has at least two samples".into()));
        }
        let eval = eval.map(|d| evaluate(&self.model, d, self.config.batch_size)).transpose()?;
        self.next_epoch += 1;
        Ok(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            eval,
        })
    }
}

/// Runs the remaining epochs, calling `on_epoch` after each; stops early on `Break`.
pub fn fit_with<T, F>(trainer: &mut Trainer<T>, train: &Dataset, eval: Option<&Dataset>, mut on_epoch: F) -> Result<Vec<EpochRecord>>
where
    T: Scalar,
    F: FnMut(&EpochRecord, &Trainer<T>) -> Result<ControlFlow<()>>,
{
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut log = Vec::new();
    while !trainer.is_finished() {
        let record = trainer.run_epoch(train, eval)?;
        let flow = on_epoch(&record, trainer)?;
        log.push(record);
        if flow.is_break() {
            break;
        }
    }
    Ok(log)
}

/// Trains `model` for `config.epochs` epochs from scratch.
pub fn fit<T: Scalar>(model: Model<T>, train: &Dataset, eval: Option<&Dataset>, config: &TrainConfig) -> Result<(Model<T>, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let log = fit_with(&mut trainer, train, eval, |_, _| Ok(ControlFlow::Continue(())))?;
    Ok((trainer.model, log))
}

#[cfg(test)]
mod tests;
