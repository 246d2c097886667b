use log::debug;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::MilSection;
use crate::data::augment::{augment_rows, grid_for};
use crate::data::{balanced_bag_sampler, AugmentationSpec, Dataset, FoldSplit, Transform};
use crate::encoder::{GradAccumulator, LrSchedule, Mlp, OptimizerConfig, OptimizerState, ScheduleKind};
use crate::error::{Error, Result};
use crate::linalg::{lse_slice, Matrix};
use crate::metrics::{AttentionRecord, PredictionRecord, PredictionSet};
use crate::mil::{mil_group_loss, mil_loss_embedded, mil_loss_with_input_grad, predict_embedded, BagPrediction, MilConfig, MilModel};
use crate::params::{Parameters, TensorSpec};

/// MIL head plus, when fine-tuning, the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    pub model: MilModel,
    pub encoder: Option<Mlp>,
}

impl Parameters for MilParams {
    fn specs(&self) -> Vec<TensorSpec> {
        let mut v = self.model.specs();
        if let Some(e) = &self.encoder {
            v.extend(e.specs().into_iter().map(|mut s| {
                s.name = format!("encoder.{}", s.name);
                s
            }));
        }
        v
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.model.tensors();
        if let Some(e) = &self.encoder {
            v.extend(e.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.model.tensors_mut();
        if let Some(e) = &mut self.encoder {
            v.extend(e.tensors_mut());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MilEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct MilOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub model: MilModel,
    /// The encoder used for prediction: the input encoder when frozen.
    pub encoder: Mlp,
    pub curve: Vec<MilEpoch>,
    pub best_epoch: usize,
}

/// Encoder outputs of every bag, reused across folds and runs when the
/// encoder is frozen.
pub fn embed_bags(encoder: &Mlp, dataset: &Dataset) -> Result<Vec<Matrix>> {
    (0..dataset.n_bags()).map(|i| encoder.predict(&dataset.instances(i))).collect()
}

fn mil_config(encoder: &Mlp, settings: &MilSection, n_classes: usize) -> MilConfig {
    MilConfig {
        k: encoder.output_dim(),
        k_reduced: settings.k_reduced,
        attention_hidden: settings.attention_hidden,
        n_classes,
    }
}

/// Mean bag loss of a set of bags with full instance sets.
fn mean_loss(params: &MilParams, frozen_z: Option<&[Matrix]>, dataset: &Dataset, bags: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &b in bags {
        let z = match (frozen_z, &params.encoder) {
            (Some(zs), _) => zs[b].clone(),
            (None, Some(e)) => e.predict(&dataset.instances(b))?,
            (None, None) => unreachable!("trainable run without encoder"),
        };
        let p = predict_embedded(&params.model, &z)?;
        total += lse_slice(p.logits.data()) - p.logits.data()[dataset.manifest().bags[b].label];
    }
    Ok(total / bags.len() as f64)
}

fn check_loss(value: f64, epoch: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Divergence(format!("MIL loss {value} at epoch {epoch}")));
    }
    Ok(())
}

/// Loss and gradient of one bag on the unbatched path: fine-tuning or
/// flip-augmented inputs.
#[allow(clippy::too_many_arguments)]
fn bag_gradient(
    params: &MilParams,
    encoder: &Mlp,
    flips: &Option<AugmentationSpec>,
    frozen_z: Option<&[Matrix]>,
    dataset: &Dataset,
    b: usize,
    label: usize,
    keep: &Option<Vec<usize>>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, MilParams)> {
    let raw = || {
        let x = dataset.instances(b);
        match keep {
            Some(idx) => x.select_rows(idx),
            None => x,
        }
    };
    if let Some(enc) = &params.encoder {
        let mut x = raw();
        if let Some(spec) = flips {
            x = augment_rows(spec, &x, rng)?;
        }
        let (z, cache) = enc.forward(&x)?;
        let (value, model_grads, dz) = mil_loss_with_input_grad(&params.model, &z, label)?;
        let (eg, _) = enc.backward_with(&cache, &dz, false)?;
        return Ok((value, MilParams { model: model_grads, encoder: Some(eg) }));
    }
    let z = match (flips, frozen_z) {
        (Some(spec), _) => encoder.predict(&augment_rows(spec, &raw(), rng)?)?,
        (None, Some(zs)) => match keep {
            Some(idx) => zs[b].select_rows(idx),
            None => zs[b].clone(),
        },
        (None, None) => unreachable!("frozen run without embeddings"),
    };
    let (loss, _) = mil_loss_embedded(&params.model, &z, label)?;
    Ok((loss.value, MilParams { model: loss.model_grads, encoder: None }))
}

/// Trains the MIL head on one fold.
///
/// Bags are drawn by the class-balanced sampler, subsampled to
/// `instance_cap` instances, and their gradients averaged over
/// `accumulation` bags before each Nesterov SGD step. The learning rate
/// follows cosine decay over all steps. Training stops once the validation
/// loss has not improved for `patience` epochs, and the best parameters are
/// restored. With `frozen_z` the encoder is never touched; without it the
/// encoder is fine-tuned jointly.
pub fn train_mil(
    settings: &MilSection,
    dataset: &Dataset,
    encoder: &Mlp,
    frozen_z: Option<&[Matrix]>,
    split: &FoldSplit,
    seed: u64,
) -> Result<MilOutcome> {
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Empty(format!("fold {} has an empty train or validation set", split.fold_index)));
    }
    if let Some(zs) = frozen_z {
        if zs.len() != dataset.n_bags() {
            return Err(Error::ShapeMismatch("embedding cache does not cover the dataset".into()));
        }
    }
    if encoder.input_dim() != dataset.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {} features, dataset has {}",
            encoder.input_dim(),
            dataset.feature_dim()
        )));
    }
    let labels = dataset.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MilModel::init(&mil_config(encoder, settings, dataset.n_classes()), rng.random())?;
    let mut params = MilParams {
        model,
        encoder: if frozen_z.is_some() { None } else { Some(encoder.clone()) },
    };
    let epoch_length = if settings.epoch_length == 0 { split.train.len() } else { settings.epoch_length };
    let steps_per_epoch = epoch_length.div_ceil(settings.accumulation);
    let schedule = LrSchedule::new(settings.lr, steps_per_epoch * settings.epochs, 0, ScheduleKind::Cosine)?;
    let mut opt = OptimizerState::new(
        OptimizerConfig::sgd_nesterov(settings.momentum, settings.weight_decay),
        &params,
    )?;
    let flips = if settings.flip_augment {
        let grid = grid_for(dataset.feature_dim());
        Some(AugmentationSpec::new(
            grid,
            vec![Transform::HorizontalFlip { p: 0.5 }, Transform::VerticalFlip { p: 0.5 }],
        )?)
    } else {
        None
    };

    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut curve = Vec::new();
    let mut step = 0;
    for epoch in 0..settings.epochs {
        let order = balanced_bag_sampler(&split.train, &labels, rng.random(), epoch_length)?;
        let mut acc = GradAccumulator::new(settings.accumulation)?;
        let mut train_loss = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(settings.accumulation) {
            let keeps: Vec<Option<Vec<usize>>> = chunk
                .iter()
                .map(|&b| {
                    let n = dataset.manifest().bags[b].n_instances;
                    (n > settings.instance_cap).then(|| {
                        let mut idx = sample(&mut rng, n, settings.instance_cap).into_vec();
                        idx.sort_unstable();
                        idx
                    })
                })
                .collect();
            let g = match (frozen_z, &flips) {
                (Some(zs), None) => {
                    let zb: Vec<Matrix> = chunk
                        .iter()
                        .zip(&keeps)
                        .map(|(&b, keep)| match keep {
                            Some(idx) => zs[b].select_rows(idx),
                            None => zs[b].clone(),
                        })
                        .collect();
                    let group: Vec<(&Matrix, usize)> = zb.iter().zip(chunk).map(|(z, &b)| (z, labels[b])).collect();
                    let (values, grads) = mil_group_loss(&params.model, &group)?;
                    for v in values {
                        check_loss(v, epoch)?;
                        train_loss += v;
                    }
                    MilParams { model: grads, encoder: None }
                }
                _ => {
                    for (&b, keep) in chunk.iter().zip(&keeps) {
                        let (value, grads) = bag_gradient(&params, encoder, &flips, frozen_z, dataset, b, labels[b], keep, &mut rng)?;
                        check_loss(value, epoch)?;
                        train_loss += value;
                        acc.add(&grads)?;
                    }
                    acc.flush()?
                }
            };
            lr = schedule.lr_at(step)?;
            opt.step(&mut params, &g, lr)?;
            step += 1;
        }
        let val_loss = mean_loss(&params, frozen_z, dataset, &split.validation)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        curve.push(MilEpoch {
            epoch,
            train_loss: train_loss / order.len() as f64,
            val_loss,
            lr,
        });
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
        } else if epoch - best.2 >= settings.patience {
            debug!("fold {}: early stop at epoch {epoch}, best {}", split.fold_index, best.2);
            break;
        }
    }
    let (_, best_params, best_epoch) = best;
    Ok(MilOutcome {
        model: best_params.model,
        encoder: best_params.encoder.unwrap_or_else(|| encoder.clone()),
        curve,
        best_epoch,
    })
}

/// Test-set predictions with full bags, plus per-instance attention rows.
pub fn evaluate_bags(
    model: &MilModel,
    encoder: &Mlp,
    frozen_z: Option<&[Matrix]>,
    dataset: &Dataset,
    bags: &[usize],
) -> Result<(PredictionSet, Vec<AttentionRecord>)> {
    let mut records = Vec::with_capacity(bags.len());
    let mut attention = Vec::new();
    for &b in bags {
        let z = match frozen_z {
            Some(zs) => zs[b].clone(),
            None => encoder.predict(&dataset.instances(b))?,
        };
        let BagPrediction {
            probabilities,
            attention: a,
            predicted_class,
            ..
        } = predict_embedded(model, &z)?;
        let rec = &dataset.manifest().bags[b];
        for i in 0..a.rows() {
            attention.push(AttentionRecord {
                bag_id: rec.bag_id.clone(),
                instance_id: i as u32,
                true_label: rec.label,
                predicted_class,
                weights: a.row(i).to_vec(),
            });
        }
        records.push(PredictionRecord {
            bag_id: rec.bag_id.clone(),
            true_label: rec.label,
            predicted: predicted_class,
            probabilities: probabilities.data().to_vec(),
        });
    }
    Ok((PredictionSet::new(dataset.n_classes(), records)?, attention))
}
