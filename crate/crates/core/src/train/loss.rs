use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::linalg::{log_sum_exp, softmax_rows};
use crate::{Error, Real, Result};

/// Upper clamp on the negative probability before `log(1 - p)`.
pub const NEG_PROB_CLAMP: f64 = 1.0 - 1e-12;

fn check_labels(n: usize, c: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::arg(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
        return Err(Error::arg(format!("row {i}: label {y} outside [0, {c})")));
    }
    Ok(())
}

/// `log(sum_j exp(s_j)) - s_y`. When `y` holds the maximum this is
/// evaluated as `ln_1p(sum_{j != y} exp(s_j - s_y))`, which keeps full
/// relative precision for confident rows.
fn ce_row<T: Real>(row: ArrayView1<'_, T>, y: usize) -> T {
    let sy = row[y];
    if row.iter().all(|&s| s <= sy) {
        let rest: T = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &s)| (s - sy).exp())
            .sum();
        rest.ln_1p()
    } else {
        log_sum_exp(row) - sy
    }
}

/// `-log(1 - softmax(row)[y])` as `softplus(s_y - logsumexp_{j != y} s_j)`.
fn negative_row<T: Real>(row: ArrayView1<'_, T>, y: usize) -> T {
    let mut rest = T::neg_infinity();
    let mut max = T::neg_infinity();
    for (j, &s) in row.iter().enumerate() {
        if j != y && s > max {
            max = s;
        }
    }
    if max > T::neg_infinity() {
        let sum: T = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &s)| (s - max).exp())
            .sum();
        rest = max + sum.ln();
    }
    let x = row[y] - rest;
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Mean cross-entropy `-log softmax(logits)[y]`.
pub fn ce_loss<T: Real>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<T> {
    let (n, c) = logits.dim();
    check_labels(n, c, labels)?;
    let total: T = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| ce_row(row, y))
        .sum();
    Ok(total / T::of(n as f64))
}

/// Gradient of [`ce_loss`] with respect to the logits.
pub fn ce_loss_grad<T: Real>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<Array2<T>> {
    let (n, c) = logits.dim();
    check_labels(n, c, labels)?;
    let mut g = softmax_rows(logits);
    let scale = T::of(1.0 / n as f64);
    for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
        row[y] = row[y] - T::one();
        row.mapv_inplace(|x| x * scale);
    }
    Ok(g)
}

fn clamped_neg_prob<T: Real>(p: T) -> (T, bool) {
    let cap = T::of(NEG_PROB_CLAMP);
    if p > cap {
        (cap, true)
    } else {
        (p, false)
    }
}

/// Mean negative-learning loss `-log(1 - softmax(neg_logits)[y])`, where
/// the softmax gives the probability that the sample is NOT of each class.
/// The probability is clamped at `1 - 1e-12`.
pub fn negative_ce_loss<T: Real>(neg_logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<T> {
    let (n, c) = neg_logits.dim();
    check_labels(n, c, labels)?;
    let p = softmax_rows(neg_logits);
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| match clamped_neg_prob(p[[i, y]]) {
            (cap, true) => -(T::one() - cap).ln(),
            (_, false) => negative_row(neg_logits.row(i), y),
        })
        .sum();
    Ok(total / T::of(n as f64))
}

/// Gradient of [`negative_ce_loss`]: `p_y (1[k=y] - p_k) / (1 - p_y)`, and
/// zero where the clamp is active.
pub fn negative_ce_loss_grad<T: Real>(neg_logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<Array2<T>> {
    let (n, c) = neg_logits.dim();
    check_labels(n, c, labels)?;
    let p = softmax_rows(neg_logits);
    let mut g = Array2::zeros((n, c));
    let scale = T::of(1.0 / n as f64);
    for (i, &y) in labels.iter().enumerate() {
        let (py, clamped) = clamped_neg_prob(p[[i, y]]);
        if clamped {
            continue;
        }
        let coef = py / (T::one() - py) * scale;
        for k in 0..c {
            let ind = if k == y { T::one() } else { T::zero() };
            g[[i, k]] = coef * (ind - p[[i, k]]);
        }
    }
    Ok(g)
}
