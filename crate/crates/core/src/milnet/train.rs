//! Bag-level training loop and inference.
//!
//! Each training item is one straightened, normalised volume with a binary
//! label. Every epoch draws a fresh random subset of slices per volume
//! (keyed by epoch and volume id, so runs are reproducible regardless of
//! thread count), while validation volumes keep one fixed slice draw for
//! the whole run so the early-stopping signal is not resampling noise.
//!
//! Minibatches are built over *bags* (one per volume), but the forward pass
//! runs over their concatenated slices, so the batchnorm statistics describe
//! the whole minibatch rather than a single volume. That matters: per-volume
//! statistics would erase exactly the between-volume intensity differences
//! that inference-mode scoring (which normalises by global running
//! statistics) relies on. Bags whose slices differ in spatial size cannot
//! share one forward, so each epoch's shuffled order is stably bucketed by
//! slice shape and a minibatch falls into one or two same-shape runs.
//!
//! Per minibatch: concatenated forward per same-shape run, per-bag adaptive
//! pooling and BCE on each bag's score segment, one backward per run with the
//! assembled slice-score gradients, running statistics moved toward the
//! pooled (element-count weighted) minibatch statistics, then one Adam step.
//! Early stopping watches the validation loss and restores the best
//! snapshot.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rayon::prelude::*;

use crate::eval::{roc_auc, EvalError};
use crate::seed::{derive_seed, derive_seed_str};
use crate::straighten::{sample_slices, StraightenedVolume};

use super::adam::{adam_step, AdamParams, AdamState};
use super::adaptive::adaptive_pool;
use super::loss::bce_loss;
use super::model::{BagGradients, MilConfig, MilModel};
use super::ops::BnMode;
use super::tensor::Tensor;
use super::MilError;

/// Optimisation hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Slices sampled per volume per epoch; also the batchnorm batch, so it
    /// must be at least 2.
    pub slice_count: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without a strict validation-loss improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 8,
            epochs: 25,
            slice_count: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
        }
    }
}

/// Losses and validation AUC for one epoch (1-based `epoch`).
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// NaN when the validation set has a single class.
    pub val_auc: f64,
}

/// Result of a training run.
pub struct TrainOutput {
    /// The snapshot with the best validation loss.
    pub model: MilModel<f32>,
    pub history: Vec<EpochStats>,
    /// 1-based epoch of the returned snapshot.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Bag-level score for one volume.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub bag_score: f64,
    /// `(original slice index, score)` pairs in sampled order; indices can
    /// repeat when the volume had fewer slices than requested.
    pub slice_scores: Vec<(usize, f64)>,
}

fn validate_train_config(cfg: &TrainConfig) -> Result<(), MilError> {
    if !(cfg.learning_rate > 0.0) || !cfg.learning_rate.is_finite() {
        return Err(MilError::BadTrainParam(format!(
            "learning_rate must be positive and finite, got {}",
            cfg.learning_rate
        )));
    }
    if cfg.batch_size == 0 {
        return Err(MilError::BadTrainParam("batch_size must be at least 1".into()));
    }
    if cfg.epochs == 0 {
        return Err(MilError::BadTrainParam("epochs must be at least 1".into()));
    }
    if cfg.slice_count < 2 {
        return Err(MilError::BadTrainParam(
            "slice_count must be at least 2 (the slices of a bag form its batchnorm batch)".into(),
        ));
    }
    if cfg.patience == 0 {
        return Err(MilError::BadTrainParam(
            "patience must be at least 1 (set patience >= epochs to disable early stopping)"
                .into(),
        ));
    }
    Ok(())
}

fn check_unique_ids(items: &[(StraightenedVolume, bool)], what: &str) -> Result<(), MilError> {
    let mut seen = std::collections::BTreeSet::new();
    for (sv, _) in items {
        if !seen.insert(sv.source_id()) {
            return Err(MilError::BadTrainParam(format!(
                "duplicate source id {:?} in {what} set (slice sampling is keyed by id)",
                sv.source_id()
            )));
        }
    }
    Ok(())
}

fn bag_tensor(
    sv: &StraightenedVolume,
    slice_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<usize>), MilError> {
    let bag = sample_slices(sv, slice_count, rng)?;
    let shape = [bag.count(), bag.height, bag.width, 3];
    let indices = bag.indices.clone();
    Ok((Tensor::from_vec(&shape, bag.data)?, indices))
}

/// Stacks same-shape bags into one `[sum of slices, H, W, C]` batch.
fn concat_bags(group: &[(Tensor<f32>, &str, bool)]) -> Result<Tensor<f32>, MilError> {
    let shape = group[0].0.shape();
    let (per, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut data = Vec::with_capacity(group.len() * group[0].0.numel());
    for (bag, _, _) in group {
        data.extend_from_slice(bag.data());
    }
    Tensor::from_vec(&[group.len() * per, h, w, c], data)
}

fn auc_or_nan(scores: &[f64], labels: &[bool]) -> Result<f64, MilError> {
    match roc_auc(scores, labels) {
        Ok(r) => Ok(r.auc),
        Err(EvalError::OneClass { .. }) => Ok(f64::NAN),
        Err(e) => Err(e.into()),
    }
}

/// Trains a fresh model and returns the best validation snapshot.
pub fn train(
    model_cfg: &MilConfig,
    cfg: &TrainConfig,
    train_items: &[(StraightenedVolume, bool)],
    val_items: &[(StraightenedVolume, bool)],
) -> Result<TrainOutput, MilError> {
    validate_train_config(cfg)?;
    if train_items.is_empty() {
        return Err(MilError::EmptyTrainSet);
    }
    if val_items.is_empty() {
        return Err(MilError::EmptyValSet);
    }
    check_unique_ids(train_items, "training")?;
    check_unique_ids(val_items, "validation")?;

    let mut model = MilModel::<f32>::init(model_cfg, derive_seed(cfg.seed, "init", 0))?;
    let mut opt = AdamState::new(&model.param_group_sizes());
    let hp = AdamParams {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };

    // One fixed slice draw per validation volume for the whole run.
    let val_bags: Vec<(Tensor<f32>, bool)> = val_items
        .iter()
        .map(|(sv, label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(
                cfg.seed,
                "val_slices",
                sv.source_id(),
            ));
            Ok((bag_tensor(sv, cfg.slice_count, &mut rng)?.0, *label))
        })
        .collect::<Result<_, MilError>>()?;
    let val_labels: Vec<bool> = val_bags.iter().map(|(_, l)| *l).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, MilModel<f32>, usize)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "epoch_order", epoch as u64));
            order.shuffle(&mut rng);
        }
        // Bags can only share a batchnorm batch when their slices have equal
        // spatial dims (resliced stacks vary in height with the scan length),
        // so bucket the shuffled order by shape. The sort is stable, so the
        // order within each bucket stays shuffled.
        order.sort_by_key(|&i| {
            let sv = &train_items[i].0;
            (sv.height(), sv.width())
        });
        let slice_stage = format!("slices_e{epoch}");

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let inv = 1.0 / chunk.len() as f64;
            // Sample every bag of the minibatch (parallel, seeded per scan).
            let bags: Vec<(Tensor<f32>, &str, bool)> = chunk
                .par_iter()
                .map(|&i| {
                    let (sv, label) = &train_items[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(
                        cfg.seed,
                        &slice_stage,
                        sv.source_id(),
                    ));
                    let (bag, _) = bag_tensor(sv, cfg.slice_count, &mut rng)?;
                    Ok((bag, sv.source_id(), *label))
                })
                .collect::<Result<_, MilError>>()?;

            let mut acc = BagGradients::zeros_like(&model);
            let mut d_alpha = 0.0f64;
            // Per-layer pooled batch statistics over the chunk's forward
            // passes: sums of m*mean, m*(var + mean^2), and m. Pooling by the
            // law of total variance keeps the spread between forwards, which
            // averaging their variances alone would drop.
            let mut stat_acc: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();

            // One training-mode forward per run of shape-compatible bags, so
            // the batchnorm batch spans several volumes wherever possible;
            // each bag's segment of the scores is still pooled separately.
            let mut start = 0;
            while start < bags.len() {
                let shape = &bags[start].0.shape()[1..];
                let mut end = start + 1;
                while end < bags.len() && &bags[end].0.shape()[1..] == shape {
                    end += 1;
                }
                let group = &bags[start..end];
                let fwd = model.forward_slices(&concat_bags(group)?, BnMode::Train)?;

                let mut d_scores = vec![0f32; fwd.slice_scores.len()];
                for (b, (_, scan, label)) in group.iter().enumerate() {
                    let seg = b * cfg.slice_count..(b + 1) * cfg.slice_count;
                    let pool = adaptive_pool(&fwd.slice_scores[seg.clone()], model.alpha())?;
                    let y = if *label { 1.0f32 } else { 0.0 };
                    let (loss, d_score) = bce_loss(pool.value, y);
                    if !loss.is_finite() {
                        return Err(MilError::Diverged {
                            epoch,
                            scan: (*scan).to_owned(),
                            seed: derive_seed_str(cfg.seed, &slice_stage, scan),
                        });
                    }
                    loss_sum += loss as f64;
                    let d = d_score * inv as f32;
                    d_alpha += (pool.d_alpha * d) as f64;
                    for (j, slot) in seg.enumerate() {
                        d_scores[slot] = pool.d_scores[j] * d;
                    }
                }
                acc.add(&model.backward_slices(&fwd, &d_scores)?)?;

                if stat_acc.is_empty() {
                    stat_acc = fwd
                        .batch_stats
                        .iter()
                        .map(|(bm, _, _)| (vec![0.0; bm.len()], vec![0.0; bm.len()], 0.0))
                        .collect();
                }
                for (slot, (bm, bv, m)) in stat_acc.iter_mut().zip(&fwd.batch_stats) {
                    let m = *m as f64;
                    slot.2 += m;
                    for (ch, (&mean, &var)) in bm.iter().zip(bv).enumerate() {
                        let (mean, var) = (mean as f64, var as f64);
                        slot.0[ch] += m * mean;
                        slot.1[ch] += m * (var + mean * mean);
                    }
                }
                start = end;
            }
            acc.alpha.data_mut()[0] = d_alpha as f32;

            let mom = model.config().bn_momentum;
            let bn_final: Vec<(Vec<f32>, Vec<f32>)> = stat_acc
                .iter()
                .enumerate()
                .map(|(li, (wmean, wsq, m_total))| {
                    let layer = &model.layers[li];
                    let mut rm = Vec::with_capacity(wmean.len());
                    let mut rv = Vec::with_capacity(wmean.len());
                    for ch in 0..wmean.len() {
                        let pooled_mean = wmean[ch] / m_total;
                        let pooled_var =
                            (wsq[ch] / m_total - pooled_mean * pooled_mean).max(0.0);
                        let old_m = layer.running_mean.data()[ch] as f64;
                        let old_v = layer.running_var.data()[ch] as f64;
                        rm.push((mom * old_m + (1.0 - mom) * pooled_mean) as f32);
                        rv.push((mom * old_v + (1.0 - mom) * pooled_var) as f32);
                    }
                    (rm, rv)
                })
                .collect();
            model.apply_bn_updates(&bn_final)?;

            let grad_slices = acc.slices();
            let mut params = model.param_slices_mut();
            adam_step(&mut opt, &mut params, &grad_slices, &hp)?;
        }
        let train_loss = loss_sum / train_items.len() as f64;

        // Validation with running statistics and the fixed slice draws.
        let val_results: Vec<(f64, f64)> = val_bags
            .par_iter()
            .map(|(bag, label)| {
                let fwd = model.forward_bag(bag, BnMode::Infer)?;
                let y = if *label { 1.0f32 } else { 0.0 };
                let (loss, _) = bce_loss(fwd.bag_score, y);
                Ok((loss as f64, fwd.bag_score as f64))
            })
            .collect::<Result<_, MilError>>()?;
        let val_loss =
            val_results.iter().map(|(l, _)| l).sum::<f64>() / val_results.len() as f64;
        let val_scores: Vec<f64> = val_results.iter().map(|(_, s)| *s).collect();
        let val_auc = auc_or_nan(&val_scores, &val_labels)?;

        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_auc,
        });

        let improved = best.as_ref().map_or(true, |(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, model.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (_, best_model, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutput {
        model: best_model,
        history,
        best_epoch,
        stopped_early,
    })
}

/// Scores one volume with a trained model (inference mode, fixed slice draw
/// derived from `seed` and the volume id).
pub fn predict(
    model: &MilModel<f32>,
    sv: &StraightenedVolume,
    slice_count: usize,
    seed: u64,
) -> Result<Prediction, MilError> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed_str(seed, "predict_slices", sv.source_id()));
    let (bag, indices) = bag_tensor(sv, slice_count, &mut rng)?;
    let fwd = model.forward_bag(&bag, BnMode::Infer)?;
    Ok(Prediction {
        bag_score: fwd.bag_score as f64,
        slice_scores: indices
            .into_iter()
            .zip(fwd.slice_scores.iter().map(|&s| s as f64))
            .collect(),
    })
}
