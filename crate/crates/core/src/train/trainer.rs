//! Minibatch gradients and the epoch loop with best-epoch selection.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{augment_train, make_batches, preprocess_eval, AugmentConfig, LabeledSet};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::argmax;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{self, Scalar, Tensor};
use crate::vit::{forward_one, logits_graph, patchify, ModelParams, ViTConfig};

use super::{adamw_step, set_freeze, AdamWState, Gradients, Tape, TrainPlan};

/// Loss and parameter gradients for one preprocessed C×H×W image.
pub fn sample_gradients<T: Scalar>(
    params: &ModelParams<T>,
    config: &ViTConfig,
    image: &Tensor<T>,
    label: usize,
) -> Result<(T, Gradients<T>)> {
    let mut tape = Tape::new();
    let x = tape.input(patchify(image, config.patch_size)?);
    let logits = logits_graph(&mut tape, &x, params, config)?;
    let loss = tape.cross_entropy(&logits, &[label])?;
    let value = tape.value(&loss).data()[0];
    Ok((value, tape.backward(&loss)?))
}

/// Mean loss and mean gradients over a batch.
///
/// Samples are differentiated in parallel but reduced in batch order, so
/// the result does not depend on the thread count. Every trainable
/// parameter gets an entry.
pub fn batch_gradients<T: Scalar>(
    params: &ModelParams<T>,
    config: &ViTConfig,
    images: &[Tensor<T>],
    labels: &[usize],
) -> Result<(T, Gradients<T>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Validation(format!(
            "batch of {} images with {} labels",
            images.len(),
            labels.len()
        )));
    }
    let per_sample = images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (img, &l))| sample_gradients(params, config, img, l).map_err(|e| e.at_sample(i)))
        .collect::<Result<Vec<_>>>()?;

    let inv = T::one() / T::of(images.len() as f64);
    let mut total_loss = T::zero();
    let mut grads = Gradients::new();
    for (loss, g) in per_sample {
        total_loss = total_loss + loss;
        for (name, t) in g {
            match grads.get_mut(&name) {
                None => {
                    grads.insert(name, t);
                }
                Some(acc) => *acc = tensor::add(acc, &t)?,
            }
        }
    }
    for name in params.trainable_names() {
        if !grads.contains_key(name) {
            grads.insert(name.to_string(), Tensor::zeros(params.tensor(name)?.shape()));
        }
    }
    for g in grads.values_mut() {
        *g = tensor::scale(g, inv)?;
    }
    Ok((total_loss * inv, grads))
}

/// One optimizer step on a batch; returns the mean batch loss.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    state: &mut AdamWState<T>,
    config: &ViTConfig,
    images: &[Tensor<T>],
    labels: &[usize],
) -> Result<T> {
    let (loss, grads) = batch_gradients(params, config, images, labels)?;
    adamw_step(params, &grads, state)?;
    Ok(loss)
}

/// B×K logits for preprocessed images, in input order.
pub fn predict_logits<T: Scalar>(
    params: &ModelParams<T>,
    config: &ViTConfig,
    images: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::Validation("no images to predict".into()));
    }
    let rows = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| forward_one(img, params, config).map_err(|e| e.at_sample(i)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    tensor::concat_rows(&refs)
}

/// Fraction of images whose argmax logit equals the label.
pub fn accuracy<T: Scalar>(
    params: &ModelParams<T>,
    config: &ViTConfig,
    images: &[Tensor<T>],
    labels: &[usize],
) -> Result<f64> {
    let logits = predict_logits(params, config, images)?;
    let k = config.num_classes;
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Deterministic evaluation transform of every image, in parallel.
pub fn prepare_eval<T: Scalar>(set: &LabeledSet, augment: &AugmentConfig) -> Result<Vec<Tensor<T>>> {
    set.images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            preprocess_eval(img, augment)
                .map(|t| t.cast::<T>())
                .map_err(|e| e.at_sample(i))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar = f32> {
    /// Parameters after the epoch with the highest validation accuracy.
    pub params: ModelParams<T>,
    /// Optimizer state matching `params`.
    pub optimizer: AdamWState<T>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

fn check_labels(set: &LabeledSet, k: usize, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Validation(format!("{what} set is empty")));
    }
    if set.images.len() != set.labels.len() {
        return Err(Error::Validation(format!("{what} set has mismatched labels")));
    }
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!(
            "{what} label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Runs `plan.epochs` epochs of shuffled minibatch AdamW and returns the
/// snapshot with the best validation accuracy (ties go to the earlier
/// epoch).
///
/// Epoch `e` shuffles with `derive_seed(seed, "shuffle", e)`; training
/// sample `i` is augmented with `derive_seed(seed, "augment", e) ^ i`.
pub fn train<T: Scalar>(
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    init: &ModelParams<T>,
    config: &ViTConfig,
    plan: &TrainPlan,
    augment: &AugmentConfig,
) -> Result<TrainOutcome<T>> {
    plan.validate()?;
    config.validate()?;
    augment.validate()?;
    init.check_layout(config)?;
    check_labels(train_set, config.num_classes, "training")?;
    check_labels(val_set, config.num_classes, "validation")?;
    if augment.crop != config.image_size {
        return Err(Error::Config(format!(
            "crop size {} differs from model image size {}",
            augment.crop, config.image_size
        )));
    }

    let mut params = init.clone();
    set_freeze(&mut params, plan.freeze_mode);
    let mut state = AdamWState::new(plan.optimizer);
    let val_images: Vec<Tensor<T>> = prepare_eval(val_set, augment)?;
    let indices: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::with_capacity(plan.epochs);
    let mut best: Option<(usize, f64, ModelParams<T>, AdamWState<T>)> = None;
    for epoch in 1..=plan.epochs {
        let e = epoch as u64;
        let mut shuffle = Rng::new(derive_seed(plan.seed, "shuffle", e));
        let augment_seed = derive_seed(plan.seed, "augment", e);
        let mut loss_sum = 0.0;
        for batch in make_batches(&indices, plan.batch_size, &mut shuffle)? {
            let images = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = Rng::new(augment_seed ^ i as u64);
                    augment_train(&train_set.images[i], &mut rng, augment)
                        .map(|t| t.cast::<T>())
                        .map_err(|e| e.at_sample(i))
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let loss = train_step(&mut params, &mut state, config, &images, &labels)?;
            loss_sum += loss.as_f64() * batch.len() as f64;
        }
        let val_accuracy = accuracy(&params, config, &val_images, &val_set.labels)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(_, acc, _, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, params.clone(), state.clone()));
        }
    }
    let (best_epoch, best_val_accuracy, params, optimizer) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        optimizer,
        best_epoch,
        best_val_accuracy,
        history,
    })
}
