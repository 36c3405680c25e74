//! Minibatch SGD with momentum, optionally perturbing every training input
//! with fresh Gaussian noise (clipped back to `[0, 1]`).
//!
//! A run is a pure function of its seed: the epoch shuffles, the noise draw
//! for each example and the dropout masks all come from sub-streams of it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingMetadata};
use super::net::{Model, ModelSpec, LOSS, TARGETS};
use crate::autodiff::{backward_from, forward_to, BackwardOptions, Mode, ReluRule};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, CounterRng};
use crate::tensor::Tensor;

pub const MOMENTUM: f32 = 0.9;

/// Training noise used for the "trained with noise" model, in pixel units.
pub const DEFAULT_TRAIN_NOISE_SIGMA: f32 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Standard deviation of the per-example input noise; 0 disables it.
    pub noise_sigma: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 50,
            learning_rate: 0.01,
            seed: 0,
            noise_sigma: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_accuracy: f32,
    pub test_accuracy: Option<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochMetrics>,
}

/// The training inputs for examples `indices` of `epoch`. With
/// `noise_sigma == 0` this is exactly the dataset pixels.
pub fn training_batch(data: &Dataset, indices: &[usize], epoch: usize, noise_sigma: f32, seed: u64) -> Result<Tensor> {
    let stride: usize = data.image_shape().iter().product();
    let pixels = data.images.data();
    let mut out = Vec::with_capacity(indices.len() * stride);
    for &i in indices {
        let src = &pixels[i * stride..(i + 1) * stride];
        if noise_sigma == 0.0 {
            out.extend_from_slice(src);
        } else {
            let mut rng = CounterRng::from_path(seed, &[stream::TRAIN_NOISE, epoch as u64, i as u64]);
            out.extend(src.iter().map(|&v| (v + rng.normal_f32(noise_sigma)).clamp(0.0, 1.0)));
        }
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(data.image_shape());
    Tensor::new(shape, out)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        t[r * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], t)
}

/// Fraction of `data` the model classifies correctly.
pub fn evaluate_accuracy(model: &Model, data: &Dataset) -> Result<f32> {
    const EVAL_BATCH: usize = 100;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let xs = training_batch(data, chunk, 0, 0.0, 0)?;
        let logits = model.logits_batch(&xs)?;
        let classes = model.num_classes();
        for (r, &i) in chunk.iter().enumerate() {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            if crate::tensor::argmax(row) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f32 / data.len().max(1) as f32)
}

pub fn train(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train_set.image_shape() != spec.input_shape() {
        return Err(Error::shape(
            "train",
            format!("dataset images {:?} vs model input {:?}", train_set.image_shape(), spec.input_shape()),
        ));
    }
    if train_set.num_classes > spec.num_classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model only {}",
            train_set.num_classes,
            spec.num_classes()
        )));
    }

    let initial = Model::initialize(spec.clone(), config.seed)?;
    let graph = initial.graph().clone();
    let loss_node = graph.find(LOSS).expect("model graphs have a loss node");
    let mut params = initial.into_params();
    let mut velocity: BTreeMap<String, Tensor> =
        params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
    let classes = spec.num_classes();

    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        CounterRng::from_path(config.seed, &[stream::SHUFFLE, epoch as u64]).shuffle(&mut order);
        let (mut loss_sum, mut seen, mut correct) = (0.0f64, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let xs = training_batch(train_set, batch, epoch, config.noise_sigma, config.seed)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let targets = one_hot(&labels, classes)?;

            let grads = {
                let mut bindings = crate::autodiff::Bindings::new();
                for (name, t) in &params {
                    bindings.bind(name, t);
                }
                bindings.bind(super::net::INPUT, &xs).bind(TARGETS, &targets);
                let mode = Mode::Training {
                    seed: derive_seed(config.seed, &[stream::DROPOUT, step as u64]),
                };
                let acts = forward_to(&graph, &bindings, mode, &[loss_node])?;
                let loss = acts.get(loss_node).expect("loss evaluated").item();
                if !loss.is_finite() {
                    return Err(Error::Diverged { step, loss });
                }
                loss_sum += loss as f64 * batch.len() as f64;
                seen += batch.len();
                let logits = acts.get(graph.head()).expect("head evaluated");
                for (r, &l) in labels.iter().enumerate() {
                    if crate::tensor::argmax(&logits.data()[r * classes..(r + 1) * classes]) == l {
                        correct += 1;
                    }
                }
                let mut g = backward_from(
                    &graph,
                    &acts,
                    loss_node,
                    Tensor::scalar(1.0),
                    BackwardOptions {
                        rule: ReluRule::Standard,
                        parameter_grads: true,
                        input_grads: false,
                    },
                )?;
                params
                    .keys()
                    .map(|name| {
                        let id = graph.find(name).expect("parameter node exists");
                        g.take(id)
                            .map(|t| (name.clone(), t))
                            .ok_or_else(|| Error::Invariant(format!("no gradient for `{name}`")))
                    })
                    .collect::<Result<Vec<_>>>()?
            };

            for (name, grad) in grads {
                let v = velocity.get_mut(&name).expect("velocity per parameter");
                let p = params.get_mut(&name).expect("parameter exists");
                for ((vi, pi), &gi) in v.data_mut().iter_mut().zip(p.data_mut()).zip(grad.data()) {
                    *vi = MOMENTUM * *vi + gi;
                    *pi -= config.learning_rate * *vi;
                }
            }
            step += 1;
        }

        let test_accuracy = match test_set {
            Some(ts) => Some(evaluate_accuracy(&Model::new(spec.clone(), params.clone())?, ts)?),
            None => None,
        };
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train_loss: (loss_sum / seen as f64) as f32,
            train_accuracy: correct as f32 / seen as f32,
            test_accuracy,
        };
        on_epoch(&metrics);
        history.push(metrics);
    }

    let last = history.last().expect("at least one epoch");
    let final_accuracy = last.test_accuracy.unwrap_or(last.train_accuracy);
    let metadata = TrainingMetadata {
        seed: config.seed,
        noise_sigma: config.noise_sigma,
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        momentum: MOMENTUM,
        final_accuracy,
        epoch_losses: history.iter().map(|m| m.train_loss).collect(),
    };
    Ok(TrainReport {
        checkpoint: Checkpoint::new(Model::new(spec.clone(), params)?, metadata),
        epochs: history,
    })
}
