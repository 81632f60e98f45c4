//! Forward pass of the dual cache classifier.
//!
//! Four branches score each query against the caches:
//!
//! | branch          | logits                                             |
//! |-----------------|----------------------------------------------------|
//! | positive text   | `f T+'` with `T+ = norm(t_pos + R_T+)`             |
//! | positive visual | `A(f V+') L+` with `V+ = norm(v_pos + bcast R_V+)` |
//! | negative text   | `dT (1 - f T-')` with `T- = norm(t_neg + R_T-)`    |
//! | negative visual | `dV A(1 - f V-') L-` with `V- = norm(v_neg + bcast R_V-)` |
//!
//! where `A(z) = alpha * exp(-beta (1 - z))`. The final logits mix the two
//! sides: `lambda (pos) + (1 - lambda) (neg)`.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::cache::CacheSet;
use crate::linalg::{argmax_rows, broadcast_rows, cast, mean_all, normalize_rows_with_norms, softmax_rows};
use crate::reweight::WeightedLabels;
use crate::{Error, Real, Result};

/// Which residual blocks are trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enabled {
    pub t_pos: bool,
    pub t_neg: bool,
    pub v_pos: bool,
    pub v_neg: bool,
}

impl Enabled {
    pub const ALL: Enabled = Enabled {
        t_pos: true,
        t_neg: true,
        v_pos: true,
        v_neg: true,
    };

    pub fn as_array(&self) -> [bool; 4] {
        [self.t_pos, self.t_neg, self.v_pos, self.v_neg]
    }
}

/// Ablation variants: each trains two of the four residual blocks, `Full`
/// trains all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Full,
    /// Both textual residuals.
    T,
    /// Both visual residuals.
    V,
    /// Both positive residuals.
    P,
    /// Both negative residuals.
    N,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::T, Variant::V, Variant::P, Variant::N];

    pub fn enabled(self) -> Enabled {
        let (t_pos, t_neg, v_pos, v_neg) = match self {
            Variant::Full => (true, true, true, true),
            Variant::T => (true, true, false, false),
            Variant::V => (false, false, true, true),
            Variant::P => (true, false, true, false),
            Variant::N => (false, true, false, true),
        };
        Enabled {
            t_pos,
            t_neg,
            v_pos,
            v_neg,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::T => "T",
            Variant::V => "V",
            Variant::P => "P",
            Variant::N => "N",
        }
    }
}

/// Block names in the fixed order used by [`ResidualSet::blocks`].
pub const BLOCK_NAMES: [&str; 4] = ["r_t_pos", "r_t_neg", "r_v_pos", "r_v_neg"];

/// The learnable residuals, all `C x d`. Visual residuals are broadcast over
/// the K cache rows of their class.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet<T = f32> {
    pub r_t_pos: Array2<T>,
    pub r_t_neg: Array2<T>,
    pub r_v_pos: Array2<T>,
    pub r_v_neg: Array2<T>,
    pub enabled: Enabled,
}

impl<T: Real> ResidualSet<T> {
    pub fn zeros(c: usize, d: usize, enabled: Enabled) -> Self {
        ResidualSet {
            r_t_pos: Array2::zeros((c, d)),
            r_t_neg: Array2::zeros((c, d)),
            r_v_pos: Array2::zeros((c, d)),
            r_v_neg: Array2::zeros((c, d)),
            enabled,
        }
    }

    pub fn blocks(&self) -> [&Array2<T>; 4] {
        [&self.r_t_pos, &self.r_t_neg, &self.r_v_pos, &self.r_v_neg]
    }

    pub fn blocks_mut(&mut self) -> [&mut Array2<T>; 4] {
        [
            &mut self.r_t_pos,
            &mut self.r_t_neg,
            &mut self.r_v_pos,
            &mut self.r_v_neg,
        ]
    }

    /// Largest absolute entry of each block.
    pub fn max_abs(&self) -> [f64; 4] {
        self.blocks()
            .map(|b| b.iter().fold(0.0f64, |m, x| m.max(x.abs().to_f64_lossy())))
    }

    pub fn is_zero(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_zero()))
    }

    pub fn cast<U: Real>(&self) -> ResidualSet<U> {
        ResidualSet {
            r_t_pos: cast(self.r_t_pos.view()),
            r_t_neg: cast(self.r_t_neg.view()),
            r_v_pos: cast(self.r_v_pos.view()),
            r_v_neg: cast(self.r_v_neg.view()),
            enabled: self.enabled,
        }
    }

    fn check(&self, cache: &CacheSet<T>) -> Result<()> {
        let want = (cache.num_classes, cache.dim);
        for (name, b) in BLOCK_NAMES.iter().zip(self.blocks()) {
            if b.dim() != want {
                return Err(Error::arg(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    b.dim()
                )));
            }
        }
        Ok(())
    }
}

fn default_lambda() -> f64 {
    0.75
}
fn default_tau() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    1.2
}
fn default_beta() -> f64 {
    2.0
}
fn default_logit_scale() -> f64 {
    100.0
}
fn default_lr_pos() -> f64 {
    1e-4
}
fn default_lr_neg() -> f64 {
    5e-4
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    256
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Set by calibration; `None` means uncalibrated.
    #[serde(default)]
    pub delta_t: Option<f64>,
    #[serde(default)]
    pub delta_v: Option<f64>,
    /// `1/t` for zero-shot prediction.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
    #[serde(default = "default_lr_pos")]
    pub lr_pos: f64,
    #[serde(default = "default_lr_neg")]
    pub lr_neg: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub reweighting: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda: default_lambda(),
            tau: default_tau(),
            alpha: default_alpha(),
            beta: default_beta(),
            delta_t: None,
            delta_v: None,
            logit_scale: default_logit_scale(),
            lr_pos: default_lr_pos(),
            lr_neg: default_lr_neg(),
            weight_decay: default_weight_decay(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            reweighting: true,
        }
    }
}

impl HyperParams {
    pub fn check(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("beta", self.beta),
            ("logit_scale", self.logit_scale),
            ("lr_pos", self.lr_pos),
            ("lr_neg", self.lr_neg),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::arg(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::arg(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::arg("weight_decay must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be >= 1"));
        }
        Ok(())
    }

    fn delta(value: Option<f64>, name: &str) -> Result<f64> {
        match value {
            Some(d) if d >= 0.0 && d.is_finite() => Ok(d),
            Some(d) => Err(Error::State(format!("{name} = {d} is not a valid scale"))),
            None => Err(Error::State(format!("{name} is not calibrated"))),
        }
    }

    pub fn delta_t(&self) -> Result<f64> {
        Self::delta(self.delta_t, "delta_t")
    }

    pub fn delta_v(&self) -> Result<f64> {
        Self::delta(self.delta_v, "delta_v")
    }
}

/// Branch and final logits for a batch of queries, each `Q x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle<T = f32> {
    pub s_t_pos: Array2<T>,
    pub s_v_pos: Array2<T>,
    pub s_t_neg: Array2<T>,
    pub s_v_neg: Array2<T>,
    pub s_final: Array2<T>,
}

impl<T: Real> LogitBundle<T> {
    pub fn probabilities(&self) -> Array2<T> {
        softmax_rows(self.s_final.view())
    }

    pub fn positive_sum(&self) -> Array2<T> {
        &self.s_t_pos + &self.s_v_pos
    }

    pub fn negative_sum(&self) -> Array2<T> {
        &self.s_t_neg + &self.s_v_neg
    }
}

/// Elementwise `alpha * exp(-beta * (1 - z))`.
pub fn affinity<T: Real>(z: ArrayView2<'_, T>, alpha: f64, beta: f64) -> Array2<T> {
    debug_assert!(
        z.iter().all(|x| x.abs() <= T::of(3.0) || !x.is_finite()),
        "affinity input outside [-3, 3]"
    );
    let (a, b) = (T::of(alpha), T::of(beta));
    z.mapv(|x| a * (-b * (T::one() - x)).exp())
}

/// A cache after residual addition and renormalization.
#[derive(Debug, Clone)]
pub(crate) struct Adapted<T> {
    pub normed: Array2<T>,
    pub norms: Array1<T>,
}

fn adapt_text<T: Real>(cache: &Array2<T>, residual: &Array2<T>) -> Result<Adapted<T>> {
    let (normed, norms) = normalize_rows_with_norms((cache + residual).view())?;
    Ok(Adapted { normed, norms })
}

fn adapt_visual<T: Real>(cache: &Array2<T>, residual: &Array2<T>, k: usize) -> Result<Adapted<T>> {
    let (normed, norms) = normalize_rows_with_norms((cache + &broadcast_rows(residual.view(), k)).view())?;
    Ok(Adapted { normed, norms })
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Tape<T> {
    pub t_pos: Adapted<T>,
    pub t_neg: Adapted<T>,
    pub v_pos: Adapted<T>,
    pub v_neg: Adapted<T>,
    /// `A(f V+')`, `Q x CK`.
    pub aff_pos: Array2<T>,
    /// `A(1 - f V-')`, `Q x CK`.
    pub aff_neg: Array2<T>,
}

fn check_inputs<T: Real>(f_v: ArrayView2<'_, T>, cache: &CacheSet<T>, res: &ResidualSet<T>) -> Result<()> {
    cache.check()?;
    res.check(cache)?;
    if f_v.ncols() != cache.dim {
        return Err(Error::arg(format!(
            "query dim {} != cache dim {}",
            f_v.ncols(),
            cache.dim
        )));
    }
    Ok(())
}

fn check_labels<T: Real>(labels: &Array2<T>, cache: &CacheSet<T>) -> Result<()> {
    if labels.dim() != cache.onehot.dim() {
        return Err(Error::arg(format!(
            "label matrix {:?} does not match cache {:?}",
            labels.dim(),
            cache.onehot.dim()
        )));
    }
    Ok(())
}

fn text_pos<T: Real>(f_v: ArrayView2<'_, T>, a: &Adapted<T>) -> Array2<T> {
    f_v.dot(&a.normed.t())
}

fn text_neg<T: Real>(f_v: ArrayView2<'_, T>, a: &Adapted<T>, delta: T) -> Array2<T> {
    f_v.dot(&a.normed.t()).mapv(|s| delta * (T::one() - s))
}

fn visual_pos<T: Real>(f_v: ArrayView2<'_, T>, a: &Adapted<T>, labels: &Array2<T>, hp: &HyperParams) -> (Array2<T>, Array2<T>) {
    let aff = affinity(f_v.dot(&a.normed.t()).view(), hp.alpha, hp.beta);
    let logits = aff.dot(labels);
    (logits, aff)
}

fn visual_neg<T: Real>(
    f_v: ArrayView2<'_, T>,
    a: &Adapted<T>,
    labels: &Array2<T>,
    hp: &HyperParams,
    delta: T,
) -> (Array2<T>, Array2<T>) {
    let dissim = f_v.dot(&a.normed.t()).mapv(|s| T::one() - s);
    let aff = affinity(dissim.view(), hp.alpha, hp.beta);
    let logits = aff.dot(labels).mapv(|x| delta * x);
    (logits, aff)
}

pub fn forward_positive_text<T: Real>(f_v: ArrayView2<'_, T>, cache: &CacheSet<T>, res: &ResidualSet<T>) -> Result<Array2<T>> {
    check_inputs(f_v, cache, res)?;
    Ok(text_pos(f_v, &adapt_text(&cache.t_pos, &res.r_t_pos)?))
}

pub fn forward_positive_visual<T: Real>(
    f_v: ArrayView2<'_, T>,
    cache: &CacheSet<T>,
    res: &ResidualSet<T>,
    labels_pos: &Array2<T>,
    hp: &HyperParams,
) -> Result<Array2<T>> {
    check_inputs(f_v, cache, res)?;
    check_labels(labels_pos, cache)?;
    let a = adapt_visual(&cache.v_pos, &res.r_v_pos, cache.shots)?;
    Ok(visual_pos(f_v, &a, labels_pos, hp).0)
}

pub fn forward_negative_text<T: Real>(
    f_v: ArrayView2<'_, T>,
    cache: &CacheSet<T>,
    res: &ResidualSet<T>,
    hp: &HyperParams,
) -> Result<Array2<T>> {
    let delta = T::of(hp.delta_t()?);
    check_inputs(f_v, cache, res)?;
    Ok(text_neg(f_v, &adapt_text(&cache.t_neg, &res.r_t_neg)?, delta))
}

pub fn forward_negative_visual<T: Real>(
    f_v: ArrayView2<'_, T>,
    cache: &CacheSet<T>,
    res: &ResidualSet<T>,
    labels_neg: &Array2<T>,
    hp: &HyperParams,
) -> Result<Array2<T>> {
    let delta = T::of(hp.delta_v()?);
    check_inputs(f_v, cache, res)?;
    check_labels(labels_neg, cache)?;
    let a = adapt_visual(&cache.v_neg, &res.r_v_neg, cache.shots)?;
    Ok(visual_neg(f_v, &a, labels_neg, hp, delta).0)
}

/// `lambda * pos + (1 - lambda) * neg`, entrywise.
pub fn mix<T: Real>(lambda: f64, pos: &Array2<T>, neg: &Array2<T>) -> Array2<T> {
    let (l, m) = (T::of(lambda), T::of(1.0 - lambda));
    let mut out = pos.clone();
    Zip::from(&mut out).and(neg).for_each(|p, &n| *p = l * *p + m * n);
    out
}

pub(crate) fn forward_taped<T: Real>(
    f_v: ArrayView2<'_, T>,
    cache: &CacheSet<T>,
    res: &ResidualSet<T>,
    labels: &WeightedLabels<T>,
    hp: &HyperParams,
) -> Result<(LogitBundle<T>, Tape<T>)> {
    let delta_t = T::of(hp.delta_t()?);
    let delta_v = T::of(hp.delta_v()?);
    check_inputs(f_v, cache, res)?;
    check_labels(&labels.pos, cache)?;
    check_labels(&labels.neg, cache)?;
    let k = cache.shots;

    let t_pos = adapt_text(&cache.t_pos, &res.r_t_pos)?;
    let t_neg = adapt_text(&cache.t_neg, &res.r_t_neg)?;
    let v_pos = adapt_visual(&cache.v_pos, &res.r_v_pos, k)?;
    let v_neg = adapt_visual(&cache.v_neg, &res.r_v_neg, k)?;

    let s_t_pos = text_pos(f_v, &t_pos);
    let s_t_neg = text_neg(f_v, &t_neg, delta_t);
    let (s_v_pos, aff_pos) = visual_pos(f_v, &v_pos, &labels.pos, hp);
    let (s_v_neg, aff_neg) = visual_neg(f_v, &v_neg, &labels.neg, hp, delta_v);

    let s_final = mix(hp.lambda, &(&s_t_pos + &s_v_pos), &(&s_t_neg + &s_v_neg));
    Ok((
        LogitBundle {
            s_t_pos,
            s_v_pos,
            s_t_neg,
            s_v_neg,
            s_final,
        },
        Tape {
            t_pos,
            t_neg,
            v_pos,
            v_neg,
            aff_pos,
            aff_neg,
        },
    ))
}

/// All four branches and the lambda mix.
pub fn forward_final<T: Real>(
    f_v: ArrayView2<'_, T>,
    cache: &CacheSet<T>,
    res: &ResidualSet<T>,
    labels: &WeightedLabels<T>,
    hp: &HyperParams,
) -> Result<LogitBundle<T>> {
    Ok(forward_taped(f_v, cache, res, labels, hp)?.0)
}

/// Argmax of the final logits, ties to the lowest class index.
pub fn predict<T: Real>(bundle: &LogitBundle<T>) -> Vec<usize> {
    argmax_rows(bundle.s_final.view())
}

/// Text-only classification: `softmax(scale * f T+')`.
pub fn zero_shot_predict<T: Real>(f_v: ArrayView2<'_, T>, t_pos: ArrayView2<'_, T>, logit_scale: f64) -> (Array2<T>, Vec<usize>) {
    let logits = f_v.dot(&t_pos.t()).mapv(|s| s * T::of(logit_scale));
    (softmax_rows(logits.view()), argmax_rows(logits.view()))
}

/// Fixes `delta_t` and `delta_v` so that, on `support` with zero residuals,
/// each negative branch has the same mean logit as its positive
/// counterpart. Means run over every entry of the `N x C` logit matrix.
pub fn calibrate_deltas<T: Real>(
    support: ArrayView2<'_, T>,
    cache: &CacheSet<T>,
    res: &ResidualSet<T>,
    labels: &WeightedLabels<T>,
    hp: &HyperParams,
) -> Result<(f64, f64)> {
    if !res.is_zero() {
        return Err(Error::State("calibration requires zero residuals".into()));
    }
    let mut raw = hp.clone();
    raw.delta_t = Some(1.0);
    raw.delta_v = Some(1.0);
    let b = forward_final(support, cache, res, labels, &raw)?;
    let ratio = |pos: &Array2<T>, neg: &Array2<T>, name: &str| -> Result<f64> {
        let p = mean_all(pos.view());
        let n = mean_all(neg.view());
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Calibration(format!("raw negative mean for {name} is {n}")));
        }
        let delta = p / n;
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Calibration(format!(
                "{name} = {p} / {n} is not a positive scale"
            )));
        }
        Ok(delta)
    };
    Ok((
        ratio(&b.s_t_pos, &b.s_t_neg, "delta_t")?,
        ratio(&b.s_v_pos, &b.s_v_neg, "delta_v")?,
    ))
}
