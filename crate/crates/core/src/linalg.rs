//! Small dense helpers shared by the classifier and the training loop.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::{Error, Real, Result};

/// L2 norm of every row.
pub fn row_norms<T: Real>(m: ArrayView2<'_, T>) -> Array1<T> {
    m.rows()
        .into_iter()
        .map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect()
}

/// Divides each row by its L2 norm. A zero (or non-finite) norm is an error
/// naming the offending row.
pub fn normalize_rows<T: Real>(m: ArrayView2<'_, T>) -> Result<Array2<T>> {
    Ok(normalize_rows_with_norms(m)?.0)
}

/// Like [`normalize_rows`], also returning the pre-normalization norms that
/// the backward pass needs.
pub fn normalize_rows_with_norms<T: Real>(m: ArrayView2<'_, T>) -> Result<(Array2<T>, Array1<T>)> {
    let norms = row_norms(m);
    if let Some((i, n)) = norms
        .iter()
        .enumerate()
        .find(|(_, n)| !(n.is_finite() && **n > T::zero()))
    {
        return Err(Error::NumericDomain(format!(
            "row {i} has norm {n}, cannot normalize"
        )));
    }
    let mut out = m.to_owned();
    Zip::from(out.rows_mut())
        .and(&norms)
        .for_each(|mut row, &n| row.mapv_inplace(|x| x / n));
    Ok((out, norms))
}

/// Backward pass of row normalization: given `y = x / |x|` and the upstream
/// gradient `dy`, returns `dx = (dy - y <y, dy>) / |x|`.
pub fn normalize_rows_backward<T: Real>(
    normalized: ArrayView2<'_, T>,
    norms: ArrayView1<'_, T>,
    upstream: ArrayView2<'_, T>,
) -> Array2<T> {
    let mut out = upstream.to_owned();
    Zip::from(out.rows_mut())
        .and(normalized.rows())
        .and(norms)
        .for_each(|mut g, y, &n| {
            let proj = g.dot(&y);
            Zip::from(&mut g).and(&y).for_each(|gi, &yi| {
                *gi = (*gi - yi * proj) / n;
            });
        });
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// `log(sum(exp(row)))` for one row, stable.
pub fn log_sum_exp<T: Real>(row: ArrayView1<'_, T>) -> T {
    let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
    if max == T::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Index of the largest entry; ties go to the lowest index. NaN never wins.
pub fn argmax<T: Real>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    let mut best_val = T::neg_infinity();
    for (i, &v) in row.iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

pub fn argmax_rows<T: Real>(m: ArrayView2<'_, T>) -> Vec<usize> {
    m.rows().into_iter().map(argmax).collect()
}

/// Mean of all entries, accumulated in f64.
pub fn mean_all<T: Real>(m: ArrayView2<'_, T>) -> f64 {
    let n = m.len();
    if n == 0 {
        return 0.0;
    }
    m.iter().map(|x| x.to_f64_lossy()).sum::<f64>() / n as f64
}

/// Repeats row `c` of a `C x d` matrix `k` times, giving `C*k x d` in
/// class-major order.
pub fn broadcast_rows<T: Real>(m: ArrayView2<'_, T>, k: usize) -> Array2<T> {
    let (c, d) = m.dim();
    let mut out = Array2::zeros((c * k, d));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&m.row(i / k));
    }
    out
}

/// Adjoint of [`broadcast_rows`]: sums each block of `k` consecutive rows.
pub fn sum_row_blocks<T: Real>(m: ArrayView2<'_, T>, k: usize) -> Array2<T> {
    let (n, d) = m.dim();
    let c = n / k;
    let mut out = Array2::zeros((c, d));
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        Zip::from(out.row_mut(i / k))
            .and(&row)
            .for_each(|a, &b| *a = *a + b);
    }
    out
}

/// Converts between float widths.
pub fn cast<A: Real, B: Real>(m: ArrayView2<'_, A>) -> Array2<B> {
    m.mapv(|x| B::of(x.to_f64_lossy()))
}
