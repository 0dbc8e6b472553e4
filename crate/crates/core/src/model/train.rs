//! Training epochs and evaluation.

use std::thread;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, forward_prepared, logits, mae_loss, mae_mask, prepare, sample_patches, ModelConfig};
use crate::blocks::{Graph, ParamSpec, Params};
use crate::data::Dataset;
use crate::numeric::{adamw_step, cosine_lr, AdamWConfig, OptimizerState, Tensor};
use crate::pointops::{augment, normalize_cloud, AugmentConfig, PatchSet};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr_max: 1e-3,
            lr_min: 1e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            augment: AugmentConfig {
                scale: true,
                translate: true,
                rotate: false,
            },
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        n_samples.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn total_steps(&self, n_samples: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(n_samples)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Classify,
    Pretrain,
}

impl Objective {
    pub fn specs(self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        match self {
            Objective::Classify => cfg.classifier_specs(),
            Objective::Pretrain => cfg.pretrain_specs(),
        }
    }
}

/// Weights and optimizer state, owned by one training loop.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Params,
    pub opt: OptimizerState,
    /// Length of the cosine schedule.
    pub total_steps: u64,
}

impl TrainState {
    /// Decay follows each spec's flag.
    pub fn new(params: Params, specs: &[ParamSpec], train: &TrainConfig, total_steps: u64) -> Result<Self> {
        params.validate(specs)?;
        let hyper = AdamWConfig {
            lr: train.lr_max,
            beta1: train.beta1,
            beta2: train.beta2,
            epsilon: train.epsilon,
            weight_decay: train.weight_decay,
        };
        let mask = specs.iter().map(|s| s.decay).collect();
        let opt = OptimizerState::with_decay_mask(params.tensors(), mask, hyper);
        Ok(Self {
            params,
            opt,
            total_steps,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Accuracy of the training-mode predictions (classification only).
    pub running_accuracy: Option<f64>,
}

/// One pass over `data` in shuffled mini-batches, one AdamW step per batch at
/// the cosine-scheduled learning rate.
///
/// Each sample is normalized, augmented, patchified with a fresh seed and
/// differentiated on its own tape; batch gradients are averaged.
pub fn train_epoch(
    data: &Dataset,
    state: &mut TrainState,
    cfg: &ModelConfig,
    train: &TrainConfig,
    objective: Objective,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if train.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let mut lr = state.opt.hyper.lr;
    for batch in order.chunks(train.batch_size) {
        let inv = 1.0 / batch.len() as f64;
        let mut grads: Vec<Tensor> = state
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        for &i in batch {
            let cloud = normalize_cloud(&data.samples[i]);
            let cloud = if train.augment.is_identity() {
                cloud
            } else {
                augment(&cloud, &train.augment, rng)
            };
            let patches = sample_patches(&cloud, cfg, rng.random())?;
            let mut g = Graph::new(&state.params);
            let loss = match objective {
                Objective::Classify => {
                    let label = data.samples[i]
                        .label
                        .ok_or_else(|| Error::config("classification sample without a label"))?;
                    let out = logits(&mut g, &patches, cfg, Some(rng))?;
                    if argmax(g.value(out).data()) == label {
                        correct += 1;
                    }
                    g.tape.cross_entropy(out, label)
                }
                Objective::Pretrain => {
                    let split = mae_mask(patches.len(), cfg.mask_ratio, rng)?;
                    mae_loss(&mut g, &patches, &split, cfg)?
                }
            };
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::range(format!("training loss became {value}")));
            }
            loss_sum += value;
            for (acc, gr) in grads.iter_mut().zip(g.param_grads(loss)) {
                acc.add_scaled(&gr, inv);
            }
        }
        let step = state.opt.step.min(state.total_steps);
        lr = cosine_lr(step, state.total_steps, train.lr_max, train.lr_min)?;
        state.opt.hyper.lr = lr;
        adamw_step(state.params.tensors_mut(), &grads, &mut state.opt)?;
    }
    Ok(EpochStats {
        loss: loss_sum / data.len() as f64,
        lr,
        step: state.opt.step,
        running_accuracy: match objective {
            Objective::Classify => Some(correct as f64 / data.len() as f64),
            Objective::Pretrain => None,
        },
    })
}

/// Fresh parameters for `specs`, overwritten by every tensor in `from`.
/// Names in `from` must be declared with identical shapes.
pub fn init_from<R: Rng + ?Sized>(specs: &[ParamSpec], from: &Params, rng: &mut R) -> Result<Params> {
    let mut params = Params::init(specs, rng);
    for (name, t) in from.iter() {
        match params.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
            Some(slot) => {
                return Err(Error::config(format!(
                    "initial weight {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            None => return Err(Error::config(format!("initial weight {name} is not part of the model"))),
        }
    }
    Ok(params)
}

fn worker_count(n: usize) -> usize {
    thread::available_parallelism().map_or(1, |p| p.get()).min(n).max(1)
}

/// Runs `f` over `0..n` on scoped threads; results come back in index order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = worker_count(n);
    let chunk = n.div_ceil(workers).max(1);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| s.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Eval-mode patch sets of every sample, all sampled with `seed`.
pub fn prepare_dataset(data: &Dataset, cfg: &ModelConfig, seed: u64) -> Result<Vec<PatchSet>> {
    par_map(data.len(), |i| prepare(&data.samples[i], cfg, seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Accuracy per class; `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

pub fn evaluate_prepared(
    params: &Params,
    cfg: &ModelConfig,
    prepared: &[PatchSet],
    labels: &[usize],
) -> Result<Evaluation> {
    if prepared.is_empty() || prepared.len() != labels.len() {
        return Err(Error::config("evaluation needs one label per sample"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::config(format!(
            "label {bad} outside the model's {} classes",
            cfg.num_classes
        )));
    }
    let outputs = par_map(prepared.len(), |i| forward_prepared(&prepared[i], params, cfg))?;
    let k = cfg.num_classes;
    let (mut hits, mut totals) = (vec![0usize; k], vec![0usize; k]);
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(labels.len());
    for (out, &label) in outputs.iter().zip(labels) {
        let pred = argmax(out);
        predictions.push(pred);
        totals[label] += 1;
        hits[label] += usize::from(pred == label);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + out.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - out[label];
    }
    Ok(Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        loss: loss / labels.len() as f64,
        predictions,
    })
}

pub fn evaluate(params: &Params, cfg: &ModelConfig, data: &Dataset, seed: u64) -> Result<Evaluation> {
    let prepared = prepare_dataset(data, cfg, seed)?;
    let labels: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    evaluate_prepared(params, cfg, &prepared, &labels)
}
