//! Seeded synthetic few-shot tasks on the unit sphere.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingSet, FeatureKind, SupportQuerySplit};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub classes: usize,
    pub dim: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            classes: 10,
            dim: 64,
            shots: 16,
            queries_per_class: 50,
            spread: 0.4,
            seed: 7,
        }
    }
}

/// A generated task: the image split plus per-class text features.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub split: SupportQuerySplit,
    /// One row per class: the class prototype.
    pub text_pos: EmbeddingSet,
    /// One row per class: normalized mean of the other prototypes.
    pub text_neg: EmbeddingSet,
    pub prototypes: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn to_f32(m: &Array2<f64>) -> Array2<f32> {
    m.mapv(|x| x as f32)
}

/// Draws `C` prototypes uniformly on the sphere, then each sample as
/// `normalize(prototype + spread * z / sqrt(d))` with `z ~ N(0, I)`, so
/// `spread` is the RMS length of the perturbation.
///
/// Support rows are `K` per class in class-major order, queries `Q` per
/// class likewise.
pub fn synth_generate(p: &SynthParams) -> Result<SyntheticTask> {
    let SynthParams {
        classes: c,
        dim: d,
        shots: k,
        queries_per_class: q,
        spread,
        seed,
    } = *p;
    if c < 2 {
        return Err(Error::arg(format!("classes must be >= 2, got {c}")));
    }
    if d < 2 {
        return Err(Error::arg(format!("dim must be >= 2, got {d}")));
    }
    if k < 1 || q < 1 {
        return Err(Error::arg("shots and queries_per_class must be >= 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::arg(format!("spread must be finite and >= 0, got {spread}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut protos = Array2::<f64>::zeros((c, d));
    for mut row in protos.rows_mut() {
        row.assign(&unit(gaussian(&mut rng, d)));
    }

    let scale = spread / (d as f64).sqrt();
    let draw = |rng: &mut ChaCha8Rng, class: usize| -> Array1<f64> {
        let proto = protos.row(class).to_owned();
        if spread == 0.0 {
            proto
        } else {
            unit(proto + gaussian(rng, d) * scale)
        }
    };

    let mut support = Array2::<f64>::zeros((c * k, d));
    for (i, mut row) in support.rows_mut().into_iter().enumerate() {
        row.assign(&draw(&mut rng, i / k));
    }
    let mut query = Array2::<f64>::zeros((c * q, d));
    for (i, mut row) in query.rows_mut().into_iter().enumerate() {
        row.assign(&draw(&mut rng, i / q));
    }

    let total = protos.sum_axis(ndarray::Axis(0));
    let mut neg = Array2::<f64>::zeros((c, d));
    for (i, mut row) in neg.rows_mut().into_iter().enumerate() {
        let others = (&total - &protos.row(i)) / (c - 1) as f64;
        row.assign(&unit(others));
    }

    let class_labels = |per: usize| -> Vec<u32> { (0..c * per).map(|i| (i / per) as u32).collect() };
    let split = SupportQuerySplit::new(
        EmbeddingSet::new(to_f32(&support), Some(class_labels(k)), c, FeatureKind::Image)?,
        EmbeddingSet::new(to_f32(&query), Some(class_labels(q)), c, FeatureKind::Image)?,
        k,
    )?;
    Ok(SyntheticTask {
        split,
        text_pos: EmbeddingSet::new(to_f32(&protos), Some(class_labels(1)), c, FeatureKind::Text)?,
        text_neg: EmbeddingSet::new(to_f32(&neg), Some(class_labels(1)), c, FeatureKind::Text)?,
        prototypes: protos,
    })
}
