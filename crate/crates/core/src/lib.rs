//! Dual positive/negative cache classifiers for few-shot adaptation.
//!
//! The pipeline works over precomputed, unit-norm embeddings:
//!
//! ```text
//! support split + text features
//!     -> caches (T+, T-, V+, V-, one-hot L)
//!     -> optional instance reweighting (L+, L-)
//!     -> delta calibration on the support set
//!     -> residual training (AdamW, cosine schedule)
//!     -> evaluation on the query set
//! ```
//!
//! Parameters and data are held in `f32`; every numeric routine is generic
//! over [`Real`] so the same code can be instantiated at `f64` for gradient
//! verification.

pub mod cache;
pub mod classifier;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod reweight;
pub mod store;
pub mod train;

pub use cache::CacheSet;
pub use classifier::{HyperParams, LogitBundle, ResidualSet, Variant};
pub use error::{Error, Result};
pub use reweight::ReweightResult;
pub use store::{EmbeddingSet, FeatureKind, SupportQuerySplit};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating point scalar used throughout the numeric code.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
