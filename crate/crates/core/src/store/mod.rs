//! Embedding datasets: the in-memory model, the SNLE on-disk format, a
//! seeded synthetic generator and the label-flip noise protocol.

mod format;
mod noise;
mod synth;

pub use format::{load_store, save_store, MAGIC, VERSION};
pub use noise::{flip_count, flip_labels, flip_labels_with_mask};
pub use synth::{synth_generate, SynthParams, SyntheticTask};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on the unit-norm invariant.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Image,
    Text,
}

/// A matrix of unit-norm feature rows with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub rows: Array2<f32>,
    pub labels: Option<Vec<u32>>,
    pub num_classes: usize,
    pub kind: FeatureKind,
    pub class_names: Option<Vec<String>>,
}

impl EmbeddingSet {
    /// Builds a set and checks every invariant.
    pub fn new(
        rows: Array2<f32>,
        labels: Option<Vec<u32>>,
        num_classes: usize,
        kind: FeatureKind,
    ) -> Result<Self> {
        let set = EmbeddingSet {
            rows,
            labels,
            num_classes,
            kind,
            class_names: None,
        };
        set.check()?;
        Ok(set)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        self.class_names = Some(names);
        self.check()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.rows.row(i)
    }

    /// Labels, or an argument error if the set is unlabeled.
    pub fn require_labels(&self) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::arg("embedding set has no labels"))
    }

    /// Row indices for each class, in original order.
    pub fn indices_by_class(&self) -> Result<Vec<Vec<usize>>> {
        let labels = self.require_labels()?;
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in labels.iter().enumerate() {
            out.get_mut(y as usize)
                .ok_or_else(|| Error::Data(format!("row {i}: label {y} out of range")))?
                .push(i);
        }
        Ok(out)
    }

    /// Subset of rows, keeping metadata.
    pub fn select(&self, indices: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            rows: self.rows.select(ndarray::Axis(0), indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            kind: self.kind,
            class_names: self.class_names.clone(),
        }
    }

    fn check(&self) -> Result<()> {
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(v.join("; ")))
        }
    }
}

/// Reports every invariant violation of `set`. Empty means valid.
pub fn validate(set: &EmbeddingSet) -> Vec<String> {
    let mut out = Vec::new();
    let (n, d) = set.rows.dim();
    if n < 1 {
        out.push("set has no rows".to_string());
    }
    if d < 2 {
        out.push(format!("dim {d} is below the minimum of 2"));
    }
    if set.num_classes < 2 {
        out.push(format!(
            "num_classes {} is below the minimum of 2",
            set.num_classes
        ));
    }
    for (i, row) in set.rows.rows().into_iter().enumerate() {
        if row.iter().any(|x| !x.is_finite()) {
            out.push(format!("row {i}: non-finite entry"));
            continue;
        }
        let norm = row
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            out.push(format!("row {i}: norm {norm:.6} is not unit"));
        }
    }
    if let Some(labels) = &set.labels {
        if labels.len() != n {
            out.push(format!("{} labels for {n} rows", labels.len()));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y as usize >= set.num_classes {
                out.push(format!(
                    "row {i}: label {y} outside [0, {})",
                    set.num_classes
                ));
            }
        }
    }
    if let Some(names) = &set.class_names {
        if names.len() != set.num_classes {
            out.push(format!(
                "{} class names for {} classes",
                names.len(),
                set.num_classes
            ));
        }
    }
    out
}

/// A K-shot support set and its held-out queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportQuerySplit {
    pub support: EmbeddingSet,
    pub query: EmbeddingSet,
    pub shots: usize,
}

impl SupportQuerySplit {
    pub fn new(support: EmbeddingSet, query: EmbeddingSet, shots: usize) -> Result<Self> {
        let split = SupportQuerySplit {
            support,
            query,
            shots,
        };
        split.check()?;
        Ok(split)
    }

    pub fn num_classes(&self) -> usize {
        self.support.num_classes
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    /// Checks shot counts and support/query compatibility.
    pub fn check(&self) -> Result<()> {
        if self.shots < 1 {
            return Err(Error::arg("shots must be at least 1"));
        }
        if self.support.dim() != self.query.dim() {
            return Err(Error::arg(format!(
                "support dim {} != query dim {}",
                self.support.dim(),
                self.query.dim()
            )));
        }
        if self.support.num_classes != self.query.num_classes {
            return Err(Error::arg(format!(
                "support has {} classes, query has {}",
                self.support.num_classes, self.query.num_classes
            )));
        }
        if let (Some(a), Some(b)) = (&self.support.class_names, &self.query.class_names) {
            if a != b {
                return Err(Error::arg("support and query class names differ"));
            }
        }
        for (c, rows) in self.support.indices_by_class()?.iter().enumerate() {
            if rows.len() != self.shots {
                return Err(Error::arg(format!(
                    "class {c} has {} support rows, expected {}",
                    rows.len(),
                    self.shots
                )));
            }
        }
        Ok(())
    }
}
