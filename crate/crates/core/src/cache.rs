//! The four feature caches and the one-hot label matrix.
//!
//! Visual caches and label rows are class-major, shot-minor: row `c*K + i`
//! belongs to class `c`. Residual broadcasting relies on that alignment.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::cast;
use crate::store::{EmbeddingSet, SupportQuerySplit};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CacheSet<T = f32> {
    /// Positive textual cache, `C x d`.
    pub t_pos: Array2<T>,
    /// Negative textual cache, `C x d`.
    pub t_neg: Array2<T>,
    /// Positive visual cache, `CK x d`.
    pub v_pos: Array2<T>,
    /// Negative visual cache, `CK x d`. Rows are raw means, not normalized.
    pub v_neg: Array2<T>,
    /// One-hot labels, `CK x C`.
    pub onehot: Array2<T>,
    /// Support row index behind each `v_pos` row.
    pub source_rows: Vec<usize>,
    pub shots: usize,
    pub num_classes: usize,
    pub dim: usize,
}

impl CacheSet<f32> {
    /// Builds all caches from a support split and per-class text features
    /// (one `prompts x d` matrix per class for each polarity).
    pub fn build(
        split: &SupportQuerySplit,
        text_pos: &[Array2<f32>],
        text_neg: &[Array2<f32>],
        neg_seed: u64,
    ) -> Result<Self> {
        let c = split.num_classes();
        let k = split.shots;
        let d = split.dim();
        if text_pos.len() != c || text_neg.len() != c {
            return Err(Error::arg(format!(
                "text features cover {}/{} classes, expected {c}",
                text_pos.len(),
                text_neg.len()
            )));
        }
        let t_pos = build_positive_text_cache(text_pos)?;
        let t_neg = build_negative_text_cache(text_neg)?;
        if t_pos.ncols() != d || t_neg.ncols() != d {
            return Err(Error::arg("text and image feature dims differ"));
        }
        let (v_pos, source_rows) = build_positive_visual_cache(split)?;
        Ok(CacheSet {
            t_pos,
            t_neg,
            v_pos,
            v_neg: build_negative_visual_cache(split, neg_seed)?,
            onehot: build_onehot_labels(c, k)?,
            source_rows,
            shots: k,
            num_classes: c,
            dim: d,
        })
    }
}

impl<T: Real> CacheSet<T> {
    pub fn cast<U: Real>(&self) -> CacheSet<U> {
        CacheSet {
            t_pos: cast(self.t_pos.view()),
            t_neg: cast(self.t_neg.view()),
            v_pos: cast(self.v_pos.view()),
            v_neg: cast(self.v_neg.view()),
            onehot: cast(self.onehot.view()),
            source_rows: self.source_rows.clone(),
            shots: self.shots,
            num_classes: self.num_classes,
            dim: self.dim,
        }
    }

    /// Visual rows of class `c`.
    pub fn class_rows(m: &Array2<T>, c: usize, k: usize) -> ArrayView2<'_, T> {
        m.slice(ndarray::s![c * k..(c + 1) * k, ..])
    }

    pub fn check(&self) -> Result<()> {
        let (c, k, d) = (self.num_classes, self.shots, self.dim);
        let shapes = [
            ("t_pos", self.t_pos.dim(), (c, d)),
            ("t_neg", self.t_neg.dim(), (c, d)),
            ("v_pos", self.v_pos.dim(), (c * k, d)),
            ("v_neg", self.v_neg.dim(), (c * k, d)),
            ("onehot", self.onehot.dim(), (c * k, c)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::arg(format!("{name} has shape {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }
}

/// Prompt ensembling: mean of each class's prompt features, L2-normalized.
fn ensemble(per_class: &[Array2<f32>]) -> Result<Array2<f32>> {
    let first = per_class
        .first()
        .ok_or_else(|| Error::arg("no classes given"))?;
    let d = first.ncols();
    let mut out = Array2::<f32>::zeros((per_class.len(), d));
    for (c, prompts) in per_class.iter().enumerate() {
        if prompts.nrows() == 0 {
            return Err(Error::arg(format!("class {c} has no prompt features")));
        }
        if prompts.ncols() != d {
            return Err(Error::arg(format!(
                "class {c} features have dim {}, expected {d}",
                prompts.ncols()
            )));
        }
        let mean: Array1<f64> = prompts
            .mapv(f64::from)
            .mean_axis(ndarray::Axis(0))
            .expect("non-empty");
        let norm = mean.dot(&mean).sqrt();
        if !(norm > 1e-12) {
            return Err(Error::Data(format!("class {c}: prompt features average to zero")));
        }
        out.row_mut(c).assign(&mean.mapv(|x| (x / norm) as f32));
    }
    Ok(out)
}

pub fn build_positive_text_cache(per_class: &[Array2<f32>]) -> Result<Array2<f32>> {
    ensemble(per_class)
}

pub fn build_negative_text_cache(per_class: &[Array2<f32>]) -> Result<Array2<f32>> {
    ensemble(per_class)
}

/// Groups text feature rows by class. Labeled sets use their labels as the
/// class map (several prompts per class allowed); an unlabeled set must have
/// exactly one row per class.
pub fn text_features_by_class(set: &EmbeddingSet) -> Result<Vec<Array2<f32>>> {
    match &set.labels {
        Some(_) => set
            .indices_by_class()?
            .into_iter()
            .map(|idx| Ok(set.rows.select(ndarray::Axis(0), &idx)))
            .collect(),
        None if set.len() == set.num_classes => Ok(set
            .rows
            .rows()
            .into_iter()
            .map(|r| r.to_owned().insert_axis(ndarray::Axis(0)))
            .collect()),
        None => Err(Error::arg(format!(
            "unlabeled text set has {} rows for {} classes",
            set.len(),
            set.num_classes
        ))),
    }
}

/// Support rows of each class, checking that every class has exactly K.
fn balanced_classes(split: &SupportQuerySplit) -> Result<Vec<Vec<usize>>> {
    let by_class = split.support.indices_by_class()?;
    for (c, rows) in by_class.iter().enumerate() {
        if rows.len() != split.shots {
            return Err(Error::arg(format!(
                "class {c} has {} support rows, expected {}",
                rows.len(),
                split.shots
            )));
        }
    }
    Ok(by_class)
}

/// Support features grouped by class (class order, original order within a
/// class), plus the support row behind each cache row.
pub fn build_positive_visual_cache(split: &SupportQuerySplit) -> Result<(Array2<f32>, Vec<usize>)> {
    let order: Vec<usize> = balanced_classes(split)?.concat();
    Ok((split.support.rows.select(ndarray::Axis(0), &order), order))
}

/// For each class `c` and shot slot `k`, averages one uniformly drawn
/// support feature from every other class. Each slot draws independently;
/// the mean is left un-normalized.
pub fn build_negative_visual_cache(split: &SupportQuerySplit, seed: u64) -> Result<Array2<f32>> {
    let c = split.num_classes();
    if c < 2 {
        return Err(Error::arg("negative visual cache needs at least 2 classes"));
    }
    let by_class = balanced_classes(split)?;
    let k = split.shots;
    let d = split.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::<f32>::zeros((c * k, d));
    for class in 0..c {
        for slot in 0..k {
            let mut acc = Array1::<f64>::zeros(d);
            for (other, rows) in by_class.iter().enumerate() {
                if other == class {
                    continue;
                }
                let pick = rows[rng.random_range(0..rows.len())];
                acc += &split.support.row(pick).mapv(f64::from);
            }
            acc /= (c - 1) as f64;
            out.row_mut(class * k + slot).assign(&acc.mapv(|x| x as f32));
        }
    }
    Ok(out)
}

pub fn build_onehot_labels<T: Real>(c: usize, k: usize) -> Result<Array2<T>> {
    if c < 1 || k < 1 {
        return Err(Error::arg(format!("one-hot labels need C >= 1 and K >= 1, got C={c}, K={k}")));
    }
    Ok(Array2::from_shape_fn((c * k, c), |(r, col)| {
        if r / k == col {
            T::one()
        } else {
            T::zero()
        }
    }))
}
