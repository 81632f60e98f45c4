//! Shared test fixtures: random instances and a loop-based reference
//! implementation of the forward pass.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use simnl::cache::{build_onehot_labels, CacheSet};
use simnl::classifier::{Enabled, HyperParams, ResidualSet};
use simnl::reweight::{ReweightResult, WeightedLabels};

pub struct Instance {
    pub cache: CacheSet<f64>,
    pub res: ResidualSet<f64>,
    pub weighted: WeightedLabels<f64>,
    pub hp: HyperParams,
    pub f_v: Array2<f64>,
    pub labels: Vec<usize>,
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal))
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = gaussian_rows(rng, n, d);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

/// One-hot rows scaled by random positive per-row weights.
fn random_label_matrix(rng: &mut ChaCha8Rng, c: usize, k: usize) -> Array2<f64> {
    let mut l = build_onehot_labels::<f64>(c, k).unwrap();
    for mut row in l.rows_mut() {
        let w = rng.random_range(0.2..1.8);
        row *= w;
    }
    l
}

/// Random instance with C <= 6, K <= 4, d <= 16, Q <= 8 and all four
/// residuals nonzero.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(2..=6);
    let k = rng.random_range(1..=4);
    let d = rng.random_range(2..=16);
    let q = rng.random_range(1..=8);

    let mut v_neg = unit_rows(&mut rng, c * k, d);
    for mut r in v_neg.rows_mut() {
        let s = rng.random_range(0.3..1.0);
        r *= s;
    }
    let cache = CacheSet {
        t_pos: unit_rows(&mut rng, c, d),
        t_neg: unit_rows(&mut rng, c, d),
        v_pos: unit_rows(&mut rng, c * k, d),
        v_neg,
        onehot: build_onehot_labels(c, k).unwrap(),
        source_rows: (0..c * k).collect(),
        shots: k,
        num_classes: c,
        dim: d,
    };
    let mut res = ResidualSet::zeros(c, d, Enabled::ALL);
    for b in res.blocks_mut() {
        *b = gaussian_rows(&mut rng, c, d) * 0.15;
    }
    let weighted = WeightedLabels {
        pos: random_label_matrix(&mut rng, c, k),
        neg: random_label_matrix(&mut rng, c, k),
        pos_stats: ReweightResult::uniform(c, k),
        neg_stats: ReweightResult::uniform(c, k),
    };
    let hp = HyperParams {
        lambda: rng.random_range(0.0..=1.0),
        alpha: rng.random_range(0.5..2.0),
        beta: rng.random_range(0.5..4.0),
        delta_t: Some(rng.random_range(0.2..2.0)),
        delta_v: Some(rng.random_range(0.2..2.0)),
        ..HyperParams::default()
    };
    let f_v = unit_rows(&mut rng, q, d);
    let labels = (0..q).map(|_| rng.random_range(0..c)).collect();
    Instance {
        cache,
        res,
        weighted,
        hp,
        f_v,
        labels,
    }
}

pub type Mat = Vec<Vec<f64>>;

pub struct OracleLogits {
    pub s_t_pos: Mat,
    pub s_v_pos: Mat,
    pub s_t_neg: Mat,
    pub s_v_neg: Mat,
    pub s_final: Mat,
}

fn to_vecs(m: &Array2<f64>) -> Mat {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row `i` of `base` plus row `i / k` of `residual`, normalized.
fn adapted(base: &Mat, residual: &Mat, k: usize) -> Mat {
    base.iter()
        .enumerate()
        .map(|(i, row)| {
            let sum: Vec<f64> = row.iter().zip(&residual[i / k]).map(|(a, b)| a + b).collect();
            unit(&sum)
        })
        .collect()
}

/// Straight loops over the definitions, no shared code with the library.
pub fn oracle_forward(inst: &Instance) -> OracleLogits {
    let (c, k) = (inst.cache.num_classes, inst.cache.shots);
    let hp = &inst.hp;
    let (alpha, beta, lambda) = (hp.alpha, hp.beta, hp.lambda);
    let (dt, dv) = (hp.delta_t.unwrap(), hp.delta_v.unwrap());
    let f = to_vecs(&inst.f_v);
    let t_pos = adapted(&to_vecs(&inst.cache.t_pos), &to_vecs(&inst.res.r_t_pos), 1);
    let t_neg = adapted(&to_vecs(&inst.cache.t_neg), &to_vecs(&inst.res.r_t_neg), 1);
    let v_pos = adapted(&to_vecs(&inst.cache.v_pos), &to_vecs(&inst.res.r_v_pos), k);
    let v_neg = adapted(&to_vecs(&inst.cache.v_neg), &to_vecs(&inst.res.r_v_neg), k);
    let l_pos = to_vecs(&inst.weighted.pos);
    let l_neg = to_vecs(&inst.weighted.neg);
    let aff = |z: f64| alpha * (-beta * (1.0 - z)).exp();

    let q = f.len();
    let mut out = OracleLogits {
        s_t_pos: vec![vec![0.0; c]; q],
        s_v_pos: vec![vec![0.0; c]; q],
        s_t_neg: vec![vec![0.0; c]; q],
        s_v_neg: vec![vec![0.0; c]; q],
        s_final: vec![vec![0.0; c]; q],
    };
    for i in 0..q {
        for cls in 0..c {
            out.s_t_pos[i][cls] = dot(&f[i], &t_pos[cls]);
            out.s_t_neg[i][cls] = dt * (1.0 - dot(&f[i], &t_neg[cls]));
            let mut sv = 0.0;
            let mut sn = 0.0;
            for j in 0..c * k {
                sv += aff(dot(&f[i], &v_pos[j])) * l_pos[j][cls];
                sn += aff(1.0 - dot(&f[i], &v_neg[j])) * l_neg[j][cls];
            }
            out.s_v_pos[i][cls] = sv;
            out.s_v_neg[i][cls] = dv * sn;
            out.s_final[i][cls] = lambda * (out.s_t_pos[i][cls] + sv)
                + (1.0 - lambda) * (out.s_t_neg[i][cls] + out.s_v_neg[i][cls]);
        }
    }
    out
}

pub fn max_abs_diff<T: Into<f64> + Copy>(lib: &Array2<T>, oracle: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in oracle.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            worst = worst.max((lib[[i, j]].into() - o).abs());
        }
    }
    worst
}

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-4;

/// Per-block relative error of the analytic gradient against central
/// differences: `max |analytic - numeric| / max(max |analytic|, max |numeric|)`
/// over the block, 0 when both are identically zero.
pub fn fd_relative_errors(inst: &Instance, mode: simnl::train::LossMode) -> [f64; 4] {
    use simnl::classifier::forward_final;
    use simnl::train::{gradients, objective};

    let (_, g) = gradients(
        inst.f_v.view(),
        &inst.labels,
        &inst.cache,
        &inst.res,
        &inst.weighted,
        &inst.hp,
        mode,
    )
    .unwrap();
    let loss_at = |res: &ResidualSet<f64>| {
        let b = forward_final(inst.f_v.view(), &inst.cache, res, &inst.weighted, &inst.hp).unwrap();
        objective(&b, &inst.labels, mode).unwrap()
    };
    let mut out = [0.0; 4];
    for (blk, slot) in out.iter_mut().enumerate() {
        let analytic = g.blocks()[blk];
        let mut err = 0.0f64;
        let mut scale = 0.0f64;
        for ((i, j), &a) in analytic.indexed_iter() {
            let mut plus = inst.res.clone();
            plus.blocks_mut()[blk][[i, j]] += FD_STEP;
            let mut minus = inst.res.clone();
            minus.blocks_mut()[blk][[i, j]] -= FD_STEP;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
            err = err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        *slot = if scale == 0.0 { 0.0 } else { err / scale };
    }
    out
}

/// True when some row's negative probability sits at the loss clamp, where
/// the loss is flat and finite differences only see rounding.
pub fn negative_clamp_active(inst: &Instance) -> bool {
    use simnl::classifier::forward_final;
    use simnl::linalg::softmax_rows;
    use simnl::train::loss::NEG_PROB_CLAMP;

    let b = forward_final(inst.f_v.view(), &inst.cache, &inst.res, &inst.weighted, &inst.hp).unwrap();
    let p = softmax_rows(b.negative_sum().mapv(|x| -x).view());
    inst.labels
        .iter()
        .enumerate()
        .any(|(i, &y)| p[[i, y]] > NEG_PROB_CLAMP - 1e-6)
}
