//! Training loop and evaluation.

pub mod grad;
pub mod loss;
pub mod optim;

pub use grad::{gradients, objective, Gradients, LossMode};
pub use loss::{ce_loss, negative_ce_loss};
pub use optim::{adamw_step, cosine_lr, OptimizerState};

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::CacheSet;
use crate::classifier::{forward_final, predict, HyperParams, ResidualSet, Variant};
use crate::linalg::cast;
use crate::reweight::WeightedLabels;
use crate::store::{EmbeddingSet, SupportQuerySplit};
use crate::{Error, Result};

/// Per-run training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_loss: Vec<f64>,
    pub epoch_lr_pos: Vec<f64>,
    pub epoch_lr_neg: Vec<f64>,
    pub seed: u64,
    pub steps: usize,
    pub wall_time_s: f64,
}

fn labels_usize(set: &EmbeddingSet) -> Result<Vec<usize>> {
    Ok(set.require_labels()?.iter().map(|&y| y as usize).collect())
}

/// Trains the residuals enabled by `variant` on the support set.
///
/// Each epoch shuffles the support rows (seeded by `hp.seed`) and walks them
/// in batches of `min(batch_size, N)`. Every step runs the forward pass,
/// the selected loss, exact gradients and an AdamW update at the cosine
/// learning rate for that step. `hp` must carry calibrated deltas.
pub fn train(
    split: &SupportQuerySplit,
    cache: &CacheSet,
    weighted: &WeightedLabels,
    hp: &HyperParams,
    variant: Variant,
    mode: LossMode,
) -> Result<(ResidualSet, TrainTrace)> {
    hp.check()?;
    hp.delta_t()?;
    hp.delta_v()?;
    let start = Instant::now();
    let (c, d) = (cache.num_classes, cache.dim);
    let features = &split.support.rows;
    let labels = labels_usize(&split.support)?;
    let n = labels.len();
    let batch = hp.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = hp.epochs * steps_per_epoch;

    let mut res = ResidualSet::zeros(c, d, variant.enabled());
    let mut opt = OptimizerState::new(c, d, hp.lr_pos, hp.lr_neg, hp.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = TrainTrace {
        epoch_loss: Vec::with_capacity(hp.epochs),
        epoch_lr_pos: Vec::with_capacity(hp.epochs),
        epoch_lr_neg: Vec::with_capacity(hp.epochs),
        seed: hp.seed,
        steps: total_steps,
        wall_time_s: 0.0,
    };

    let mut step = 0;
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (b, chunk) in order.chunks(batch).enumerate() {
            opt.lr_pos = cosine_lr(step, total_steps, hp.lr_pos)?;
            opt.lr_neg = cosine_lr(step, total_steps, hp.lr_neg)?;
            if b == 0 {
                trace.epoch_lr_pos.push(opt.lr_pos);
                trace.epoch_lr_neg.push(opt.lr_neg);
            }
            let xb = features.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, g) = gradients(xb.view(), &yb, cache, &res, weighted, hp, mode)?;
            let loss = f64::from(loss);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            adamw_step(&mut opt, &mut res, &g)?;
            step += 1;
        }
        trace.epoch_loss.push(loss_sum / n as f64);
    }
    trace.wall_time_s = start.elapsed().as_secs_f64();
    Ok((res, trace))
}

/// Query-set metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub correct: usize,
    pub total: usize,
    /// Accuracy per class; 0 for classes without queries.
    pub per_class: Vec<f64>,
    pub per_class_count: Vec<usize>,
    pub mean_ce: f64,
}

impl Metrics {
    pub fn from_predictions(pred: &[usize], truth: &[usize], num_classes: usize, mean_ce: f64) -> Self {
        let mut hit = vec![0usize; num_classes];
        let mut count = vec![0usize; num_classes];
        for (&p, &y) in pred.iter().zip(truth) {
            count[y] += 1;
            if p == y {
                hit[y] += 1;
            }
        }
        let correct: usize = hit.iter().sum();
        Metrics {
            top1: correct as f64 / truth.len().max(1) as f64,
            correct,
            total: truth.len(),
            per_class: hit
                .iter()
                .zip(&count)
                .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
                .collect(),
            per_class_count: count,
            mean_ce,
        }
    }
}

/// Top-1 accuracy (argmax, ties to the lowest index), per-class accuracy
/// and mean cross-entropy of the final logits on a labeled query set.
pub fn evaluate(
    query: &EmbeddingSet,
    cache: &CacheSet,
    res: &ResidualSet,
    weighted: &WeightedLabels,
    hp: &HyperParams,
) -> Result<Metrics> {
    let truth = labels_usize(query)?;
    let bundle = forward_final(query.rows.view(), cache, res, weighted, hp)?;
    let pred = predict(&bundle);
    let logits: Array2<f64> = cast(bundle.s_final.view());
    let mean_ce = ce_loss(logits.view(), &truth)?;
    Ok(Metrics::from_predictions(&pred, &truth, query.num_classes, mean_ce))
}
