//! Few-shot instance reweighting.
//!
//! Every support sample gets a confidence from how similar it is, on
//! average, to the other samples of its class: `d_i` is the mean cosine to
//! its classmates, `w = softmax(d / tau)` within the class and the
//! confidence is `K * w_i`. Confidences scale the rows of the label
//! matrices used by the visual branches.

use ndarray::{Array2, ArrayView2};

use crate::cache::CacheSet;
use crate::linalg::{cast, normalize_rows};
use crate::{Error, Real, Result};

/// Per-class reweighting statistics, each inner vector of length K.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightResult {
    pub mean_sims: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub confidences: Vec<Vec<f64>>,
}

impl ReweightResult {
    /// Uniform confidences (the reweighting-off state).
    pub fn uniform(c: usize, k: usize) -> Self {
        ReweightResult {
            mean_sims: vec![vec![0.0; k]; c],
            weights: vec![vec![1.0 / k as f64; k]; c],
            confidences: vec![vec![1.0; k]; c],
        }
    }

    /// Confidences flattened in cache-row order.
    pub fn flat_confidences(&self) -> Vec<f64> {
        self.confidences.concat()
    }
}

/// `d_i = 1/(K-1) * sum_{j != i} <f_i, f_j>` for unit rows `f`.
pub fn pairwise_mean_similarity(features: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let k = features.nrows();
    if k < 2 {
        return Err(Error::arg(format!(
            "mean similarity needs at least 2 samples, got {k}"
        )));
    }
    let gram = features.dot(&features.t());
    Ok((0..k)
        .map(|i| {
            let off: f64 = (0..k).filter(|&j| j != i).map(|j| gram[[i, j]]).sum();
            off / (k - 1) as f64
        })
        .collect())
}

/// Returns `(w, l)` with `w = softmax(d / tau)` and `l = K * w`.
pub fn confidence_weights(mean_sims: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::arg(format!("tau must be positive, got {tau}")));
    }
    let k = mean_sims.len();
    let max = mean_sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = mean_sims.iter().map(|d| ((d - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let w: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let l = w.iter().map(|wi| k as f64 * wi).collect();
    Ok((w, l))
}

/// Scales row `c*K + i` of `onehot` by the confidence of sample `i` of
/// class `c`.
pub fn reweight_labels<T: Real>(onehot: &Array2<T>, result: &ReweightResult) -> Result<Array2<T>> {
    let c = result.confidences.len();
    let k = result.confidences.first().map_or(0, Vec::len);
    if onehot.dim() != (c * k, c) || result.confidences.iter().any(|v| v.len() != k) {
        return Err(Error::arg(format!(
            "label matrix {:?} does not match {c} classes x {k} confidences",
            onehot.dim()
        )));
    }
    let mut out = onehot.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let l = T::of(result.confidences[r / k][r % k]);
        row.mapv_inplace(|x| x * l);
    }
    Ok(out)
}

/// Runs the per-class statistics over the class-major rows of a visual
/// cache. Rows are normalized first.
pub fn reweight_rows<T: Real>(rows: ArrayView2<'_, T>, c: usize, k: usize, tau: f64) -> Result<ReweightResult> {
    if k < 2 {
        confidence_weights(&[], tau)?;
        return Ok(ReweightResult::uniform(c, k));
    }
    let rows = normalize_rows(cast::<T, f64>(rows).view())?;
    let mut res = ReweightResult {
        mean_sims: Vec::with_capacity(c),
        weights: Vec::with_capacity(c),
        confidences: Vec::with_capacity(c),
    };
    for class in 0..c {
        let block = rows.slice(ndarray::s![class * k..(class + 1) * k, ..]);
        let d = pairwise_mean_similarity(block)?;
        let (w, l) = confidence_weights(&d, tau)?;
        res.mean_sims.push(d);
        res.weights.push(w);
        res.confidences.push(l);
    }
    Ok(res)
}

/// Label matrices for the positive and negative visual branches.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLabels<T = f32> {
    pub pos: Array2<T>,
    pub neg: Array2<T>,
    pub pos_stats: ReweightResult,
    pub neg_stats: ReweightResult,
}

impl<T: Real> WeightedLabels<T> {
    pub fn plain(cache: &CacheSet<T>) -> Self {
        let u = ReweightResult::uniform(cache.num_classes, cache.shots);
        WeightedLabels {
            pos: cache.onehot.clone(),
            neg: cache.onehot.clone(),
            pos_stats: u.clone(),
            neg_stats: u,
        }
    }

    pub fn cast<U: Real>(&self) -> WeightedLabels<U> {
        WeightedLabels {
            pos: cast(self.pos.view()),
            neg: cast(self.neg.view()),
            pos_stats: self.pos_stats.clone(),
            neg_stats: self.neg_stats.clone(),
        }
    }
}

/// Reweighted `(L+, L-)`. `L+` uses the positive visual cache rows, `L-`
/// applies the same rule to the negative visual cache rows. With `enable`
/// off, or fewer than two shots, both are the plain one-hot matrix.
pub fn reweight_caches<T: Real>(cache: &CacheSet<T>, tau: f64, enable: bool) -> Result<WeightedLabels<T>> {
    cache.check()?;
    if !enable || cache.shots < 2 {
        return Ok(WeightedLabels::plain(cache));
    }
    let (c, k) = (cache.num_classes, cache.shots);
    let pos_stats = reweight_rows(cache.v_pos.view(), c, k, tau)?;
    let neg_stats = reweight_rows(cache.v_neg.view(), c, k, tau)?;
    Ok(WeightedLabels {
        pos: reweight_labels(&cache.onehot, &pos_stats)?,
        neg: reweight_labels(&cache.onehot, &neg_stats)?,
        pos_stats,
        neg_stats,
    })
}
