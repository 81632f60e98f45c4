//! Exact gradients of the training losses with respect to the residuals.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use super::loss::{ce_loss, ce_loss_grad, negative_ce_loss, negative_ce_loss_grad};
use crate::cache::CacheSet;
use crate::classifier::{forward_taped, Adapted, HyperParams, LogitBundle, ResidualSet};
use crate::linalg::{normalize_rows_backward, sum_row_blocks};
use crate::reweight::WeightedLabels;
use crate::{Real, Result};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy on the mixed logits.
    #[default]
    EnsembleCe,
    /// Negative-learning loss on the negative classifier alone. Its
    /// "not this class" logits are `-(S_T- + S_V-)`.
    NegativeCe,
}

/// Gradient blocks, shaped like [`ResidualSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub t_pos: Array2<T>,
    pub t_neg: Array2<T>,
    pub v_pos: Array2<T>,
    pub v_neg: Array2<T>,
}

impl<T: Real> Gradients<T> {
    pub fn blocks(&self) -> [&Array2<T>; 4] {
        [&self.t_pos, &self.t_neg, &self.v_pos, &self.v_neg]
    }
}

/// The loss a [`LossMode`] evaluates on a forward bundle.
pub fn objective<T: Real>(bundle: &LogitBundle<T>, labels: &[usize], mode: LossMode) -> Result<T> {
    match mode {
        LossMode::EnsembleCe => ce_loss(bundle.s_final.view(), labels),
        LossMode::NegativeCe => negative_ce_loss(negative_logits(bundle).view(), labels),
    }
}

fn negative_logits<T: Real>(bundle: &LogitBundle<T>) -> Array2<T> {
    bundle.negative_sum().mapv(|x| -x)
}

/// Gradient flowing into each branch's logits.
struct BranchGrads<T> {
    t_pos: Option<Array2<T>>,
    v_pos: Option<Array2<T>>,
    t_neg: Array2<T>,
    v_neg: Array2<T>,
}

fn branch_grads<T: Real>(
    bundle: &LogitBundle<T>,
    labels: &[usize],
    hp: &HyperParams,
    mode: LossMode,
) -> Result<BranchGrads<T>> {
    match mode {
        LossMode::EnsembleCe => {
            let g = ce_loss_grad(bundle.s_final.view(), labels)?;
            let pos = g.mapv(|x| x * T::of(hp.lambda));
            let neg = g.mapv(|x| x * T::of(1.0 - hp.lambda));
            Ok(BranchGrads {
                t_pos: Some(pos.clone()),
                v_pos: Some(pos),
                t_neg: neg.clone(),
                v_neg: neg,
            })
        }
        LossMode::NegativeCe => {
            let g = negative_ce_loss_grad(negative_logits(bundle).view(), labels)?;
            let neg = g.mapv(|x| -x);
            Ok(BranchGrads {
                t_pos: None,
                v_pos: None,
                t_neg: neg.clone(),
                v_neg: neg,
            })
        }
    }
}

/// Pulls a gradient on the adapted (normalized) cache back to the residual.
fn through_norm<T: Real>(a: &Adapted<T>, d_normed: &Array2<T>) -> Array2<T> {
    normalize_rows_backward(a.normed.view(), a.norms.view(), d_normed.view())
}

/// Loss and gradients for one batch. Disabled blocks get exact zeros; the
/// delta scales are constants.
pub fn gradients<T: Real>(
    batch: ArrayView2<'_, T>,
    labels: &[usize],
    cache: &CacheSet<T>,
    res: &ResidualSet<T>,
    weighted: &WeightedLabels<T>,
    hp: &HyperParams,
    mode: LossMode,
) -> Result<(T, Gradients<T>)> {
    let (bundle, tape) = forward_taped(batch, cache, res, weighted, hp)?;
    let loss = objective(&bundle, labels, mode)?;
    let g = branch_grads(&bundle, labels, hp, mode)?;
    let (c, d) = (cache.num_classes, cache.dim);
    let k = cache.shots;
    let on = res.enabled;
    let zeros = || Array2::<T>::zeros((c, d));
    let (beta, delta_t, delta_v) = (T::of(hp.beta), T::of(hp.delta_t()?), T::of(hp.delta_v()?));

    // S_T+ = F T+'  =>  dT+ = dS' F
    let t_pos = match (&g.t_pos, on.t_pos) {
        (Some(ds), true) => through_norm(&tape.t_pos, &ds.t().dot(&batch)),
        _ => zeros(),
    };

    // S_T- = dT (1 - F T-')  =>  dT- = -dT dS' F
    let t_neg = if on.t_neg {
        let dn = g.t_neg.t().dot(&batch).mapv(|x| -delta_t * x);
        through_norm(&tape.t_neg, &dn)
    } else {
        zeros()
    };

    // S_V+ = A(Z) L+, Z = F V+', dA/dZ = beta A
    let v_pos = match (&g.v_pos, on.v_pos) {
        (Some(ds), true) => {
            let mut dz = ds.dot(&weighted.pos.t());
            Zip::from(&mut dz)
                .and(&tape.aff_pos)
                .for_each(|z, &a| *z = *z * a * beta);
            let dv = through_norm(&tape.v_pos, &dz.t().dot(&batch));
            sum_row_blocks(dv.view(), k)
        }
        _ => zeros(),
    };

    // S_V- = dV A(1 - Z) L-, Z = F V-', dA(1-Z)/dZ = -beta A
    let v_neg = if on.v_neg {
        let mut dz = g.v_neg.dot(&weighted.neg.t());
        Zip::from(&mut dz)
            .and(&tape.aff_neg)
            .for_each(|z, &a| *z = -*z * a * beta * delta_v);
        let dv = through_norm(&tape.v_neg, &dz.t().dot(&batch));
        sum_row_blocks(dv.view(), k)
    } else {
        zeros()
    };

    Ok((
        loss,
        Gradients {
            t_pos,
            t_neg,
            v_pos,
            v_neg,
        },
    ))
}
