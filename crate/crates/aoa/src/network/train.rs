//! SGD-with-momentum training, plus adversarial training that mixes freshly
//! attacked samples into every batch.

use super::{tape_cross_entropy, Layer, Model};
use crate::attack::{run_attack, AttackConfig};
use crate::data::{Corpus, Dataset};
use crate::error::{AttackError, NetworkError};
use crate::rng::{derive_seed, Rng};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Real,
    pub momentum: Real,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<Real>,
    pub train_accuracy: Real,
    pub test_accuracy: Real,
}

/// Incremental trainer. Owns the model between steps so callers (the zoo
/// builder, adversarial training, the browser demo) can drive epochs, whole
/// batches, or single steps as they like.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    /// Momentum buffers per layer, matching the layer's (w, b) shapes.
    velocity: Vec<Option<(Tensor, Tensor)>>,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    pub epochs_done: usize,
    batches_done: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        let velocity = model
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Dense { w, b } | Layer::Conv2d { k: w, b, .. } => Some((
                    Tensor::zeros(w.shape()),
                    Tensor::zeros(b.shape()),
                )),
                _ => None,
            })
            .collect();
        let rng = Rng::seed(cfg.seed);
        Trainer {
            model,
            cfg,
            velocity,
            rng,
            order: Vec::new(),
            cursor: 0,
            epochs_done: 0,
            batches_done: 0,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn batches_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.cfg.batch_size)
    }

    /// Indices of the next batch, reshuffling at epoch boundaries.
    pub fn next_batch_indices(&mut self, samples: usize) -> Vec<usize> {
        if self.order.len() != samples {
            self.order = (0..samples).collect();
            self.cursor = 0;
        }
        if self.cursor == 0 {
            self.rng.shuffle(&mut self.order);
        }
        let end = (self.cursor + self.cfg.batch_size).min(samples);
        let batch = self.order[self.cursor..end].to_vec();
        if end == samples {
            self.cursor = 0;
            self.epochs_done += 1;
        } else {
            self.cursor = end;
        }
        batch
    }

    /// One gradient step on the next batch of `data`. Returns the mean batch
    /// loss before the update.
    pub fn step_batch(&mut self, data: &Dataset) -> Result<Real, NetworkError> {
        let idx = self.next_batch_indices(data.len());
        let images: Vec<&Tensor> = idx.iter().map(|&i| &data.images[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        self.step_samples(&images, &labels)
    }

    /// One gradient step on explicit samples.
    pub fn step_samples(
        &mut self,
        images: &[&Tensor],
        labels: &[usize],
    ) -> Result<Real, NetworkError> {
        assert_eq!(images.len(), labels.len());
        let n = images.len() as Real;
        // Per-sample gradients in parallel; the ordered collect plus a
        // sequential reduction keeps results independent of worker count.
        let per_sample: Vec<(Real, Vec<Option<(Tensor, Tensor)>>)> = images
            .par_iter()
            .zip(labels.par_iter())
            .map(|(x, &y)| self.sample_gradients(x, y))
            .collect::<Result<_, _>>()?;

        let mut loss_sum = 0.0;
        let mut grads: Option<Vec<Option<(Tensor, Tensor)>>> = None;
        for (loss, g) in per_sample {
            loss_sum += loss;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (slot, add) in acc.iter_mut().zip(g) {
                        if let (Some((aw, ab)), Some((gw, gb))) = (slot, add) {
                            *aw = aw.zip_map(&gw, |x, y| x + y)?;
                            *ab = ab.zip_map(&gb, |x, y| x + y)?;
                        }
                    }
                }
            }
        }
        let mean_loss = loss_sum / n;
        if !mean_loss.is_finite() {
            return Err(NetworkError::Diverged {
                epoch: self.epochs_done,
                batch: self.batches_done,
                loss: mean_loss,
            });
        }

        let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
        if let Some(grads) = grads {
            for ((layer, vel), grad) in self
                .model
                .layers_mut()
                .iter_mut()
                .zip(&mut self.velocity)
                .zip(grads)
            {
                let (Some((vw, vb)), Some((gw, gb))) = (vel, grad) else {
                    continue;
                };
                *vw = vw.zip_map(&gw, |v, g| mu * v - lr * g / n)?;
                *vb = vb.zip_map(&gb, |v, g| mu * v - lr * g / n)?;
                match layer {
                    Layer::Dense { w, b } | Layer::Conv2d { k: w, b, .. } => {
                        *w = w.zip_map(vw, |x, v| x + v)?;
                        *b = b.zip_map(vb, |x, v| x + v)?;
                    }
                    _ => unreachable!("velocity exists only for weight layers"),
                }
            }
        }
        self.batches_done += 1;
        Ok(mean_loss)
    }

    /// Loss and per-layer weight gradients for one sample.
    fn sample_gradients(
        &self,
        x: &Tensor,
        y: usize,
    ) -> Result<(Real, Vec<Option<(Tensor, Tensor)>>), NetworkError> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let fwd = self.model.forward_taped(&mut tape, input)?;
        let loss = tape_cross_entropy(&mut tape, fwd.logits, y)?;
        let mut wrt = Vec::new();
        for p in fwd.params.iter().flatten() {
            wrt.push(p.0);
            wrt.push(p.1);
        }
        let mut grads = tape.backward(loss, &wrt)?.into_iter();
        let per_layer = fwd
            .params
            .iter()
            .map(|p| {
                p.map(|_| {
                    let gw = grads.next().expect("aligned with wrt").grad;
                    let gb = grads.next().expect("aligned with wrt").grad;
                    (gw, gb)
                })
            })
            .collect();
        Ok((tape.value(loss).item(), per_layer))
    }
}

/// Trains to completion and reports final accuracies. Fixed seed implies
/// bit-identical weights across runs and worker counts.
pub fn train(
    model: Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport), NetworkError> {
    let mut trainer = Trainer::new(model, cfg.clone());
    let batches = trainer.batches_per_epoch(corpus.train.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..batches {
            sum += trainer.step_batch(&corpus.train)?;
        }
        epoch_losses.push(sum / batches as Real);
    }
    let model = trainer.into_model();
    let train_accuracy = model.accuracy(&corpus.train)?;
    let test_accuracy = model.accuracy(&corpus.test)?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            train_accuracy,
            test_accuracy,
        },
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdversarialTrainConfig {
    /// Fraction of each batch replaced by attacked versions of itself.
    pub fraction: Real,
    pub attack: AttackConfig,
    pub seed: u64,
}

/// Adversarial training: the first `ceil(fraction * batch)` samples of every
/// shuffled batch are attacked against the current weights before the step.
/// `fraction = 0` reduces to plain `train` exactly.
pub fn adversarial_train(
    model: Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    adv: &AdversarialTrainConfig,
) -> Result<(Model, TrainReport), NetworkError> {
    if !(0.0..=1.0).contains(&adv.fraction) {
        return Err(NetworkError::Attack(Box::new(AttackError::InvalidConfig(
            format!("adversarial fraction {} outside [0, 1]", adv.fraction),
        ))));
    }
    let mut trainer = Trainer::new(model, cfg.clone());
    let batches = trainer.batches_per_epoch(corpus.train.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..batches {
            let idx = trainer.next_batch_indices(corpus.train.len());
            let n_adv = ((adv.fraction * idx.len() as Real).ceil() as usize).min(idx.len());
            let attacked: Vec<Tensor> = idx[..n_adv]
                .par_iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let mut acfg = adv.attack.clone();
                    acfg.seed = derive_seed(adv.seed, step, pos as u64);
                    run_attack(
                        trainer.model(),
                        &corpus.train.images[i],
                        corpus.train.labels[i],
                        &acfg,
                    )
                    .map(|r| r.x_adv)
                })
                .collect::<Result<_, _>>()
                .map_err(|e| NetworkError::Attack(Box::new(e)))?;
            let mut images: Vec<&Tensor> = attacked.iter().collect();
            images.extend(idx[n_adv..].iter().map(|&i| &corpus.train.images[i]));
            let labels: Vec<usize> = idx.iter().map(|&i| corpus.train.labels[i]).collect();
            sum += trainer.step_samples(&images, &labels)?;
            step += 1;
        }
        epoch_losses.push(sum / batches as Real);
    }
    let model = trainer.into_model();
    let train_accuracy = model.accuracy(&corpus.train)?;
    let test_accuracy = model.accuracy(&corpus.test)?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            train_accuracy,
            test_accuracy,
        },
    ))
}
