mod common;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simnl::cache::{build_positive_text_cache, text_features_by_class, CacheSet};
use simnl::classifier::{calibrate_deltas, ResidualSet, Variant};
use simnl::harness::{cmd_train_eval, DataConfig, ExperimentConfig, TaskData};
use simnl::reweight::{confidence_weights, pairwise_mean_similarity, reweight_caches};
use simnl::store::{load_store, save_store, synth_generate, EmbeddingSet, FeatureKind, SynthParams};
use simnl::train::{train, LossMode};

/// Nearest-prototype classification of the query set, computed directly.
fn nearest_prototype_accuracy(p: &SynthParams) -> f64 {
    let task = synth_generate(p).unwrap();
    let q = &task.split.query;
    let labels = q.labels.as_ref().unwrap();
    let mut hits = 0;
    for (row, &y) in q.rows.rows().into_iter().zip(labels) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (c, proto) in task.prototypes.rows().into_iter().enumerate() {
            let s: f64 = row.iter().zip(proto).map(|(&a, &b)| f64::from(a) * b).sum();
            if s > best.0 {
                best = (s, c);
            }
        }
        hits += usize::from(best.1 == y as usize);
    }
    hits as f64 / labels.len() as f64
}

#[test]
fn default_synthetic_task_is_separable() {
    let p = SynthParams::default();
    assert!(nearest_prototype_accuracy(&p) >= 0.95);
    for seed in 0..5 {
        let acc = nearest_prototype_accuracy(&SynthParams { seed, ..p });
        assert!(acc >= 0.95, "seed {seed}: {acc}");
    }
}

#[test]
fn full_batch_training_decreases_loss() {
    let task = synth_generate(&SynthParams::default()).unwrap();
    let tp = text_features_by_class(&task.text_pos).unwrap();
    let tn = text_features_by_class(&task.text_neg).unwrap();
    let cache = CacheSet::build(&task.split, &tp, &tn, 1).unwrap();
    let weighted = reweight_caches(&cache, 1.0, true).unwrap();
    let mut hp = simnl::HyperParams::default();
    let zero = ResidualSet::zeros(10, 64, Variant::Full.enabled());
    let (dt, dv) = calibrate_deltas(task.split.support.rows.view(), &cache, &zero, &weighted, &hp).unwrap();
    hp.delta_t = Some(dt);
    hp.delta_v = Some(dv);
    assert!(hp.batch_size >= task.split.support.len());
    let (res, trace) = train(&task.split, &cache, &weighted, &hp, Variant::Full, LossMode::EnsembleCe).unwrap();
    assert_eq!(trace.epoch_loss.len(), 20);
    assert!(trace.epoch_loss[19] < trace.epoch_loss[0], "{:?}", trace.epoch_loss);
    assert!(!res.is_zero());
}

#[test]
fn zero_noise_default_config_is_perfect() {
    let cfg = ExperimentConfig::default();
    let r = cmd_train_eval(&cfg).unwrap();
    assert_eq!(r.rows[0].aggregate.top1.mean, 1.0);
}

/// Text stores with several rows per class (one per prompt template) are
/// ensembled by mean then normalization.
#[test]
fn per_prompt_text_store_is_ensembled() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, prompts, d) = (3, 4, 8);
    let rows = common::unit_rows(&mut rng, c * prompts, d);
    let labels: Vec<u32> = (0..c * prompts).map(|i| (i % c) as u32).collect();
    let set = EmbeddingSet::new(rows.mapv(|x| x as f32), Some(labels.clone()), c, FeatureKind::Text)
        .unwrap()
        .with_class_names(vec!["a".into(), "b".into(), "c".into()])
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("text.snle");
    save_store(&set, &path).unwrap();
    let loaded = load_store(&path).unwrap();
    assert_eq!(loaded, set);

    let per_class = text_features_by_class(&loaded).unwrap();
    assert!(per_class.iter().all(|m| m.nrows() == prompts));
    let cache = build_positive_text_cache(&per_class).unwrap();
    for cls in 0..c {
        let mut mean = Array1::<f64>::zeros(d);
        for (i, &y) in labels.iter().enumerate() {
            if y as usize == cls {
                mean += &set.rows.row(i).mapv(f64::from);
            }
        }
        let n = mean.dot(&mean).sqrt();
        for j in 0..d {
            assert!((f64::from(cache[[cls, j]]) - mean[j] / n).abs() < 1e-6);
        }
    }
}

#[test]
fn file_inputs_with_prompt_ensembles_run_end_to_end() {
    let p = SynthParams {
        classes: 3,
        dim: 12,
        shots: 4,
        queries_per_class: 5,
        spread: 0.3,
        seed: 2,
    };
    let task = synth_generate(&p).unwrap();
    // three jittered copies of each class's text row
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let expand = |set: &EmbeddingSet, rng: &mut ChaCha8Rng| {
        let mut rows = Array2::<f32>::zeros((3 * 3, 12));
        let mut labels = Vec::new();
        for (i, mut r) in rows.rows_mut().into_iter().enumerate() {
            let cls = i % 3;
            let jitter: Vec<f32> = (0..12).map(|_| rng.random_range(-0.05f32..0.05)).collect();
            let v: Vec<f32> = set.row(cls).iter().zip(&jitter).map(|(a, b)| a + b).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            r.assign(&Array1::from(v.iter().map(|x| x / n).collect::<Vec<_>>()));
            labels.push(cls as u32);
        }
        EmbeddingSet::new(rows, Some(labels), 3, FeatureKind::Text).unwrap()
    };
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = ["s", "q", "tp", "tn"].iter().map(|n| dir.path().join(format!("{n}.snle"))).collect();
    save_store(&task.split.support, &paths[0]).unwrap();
    save_store(&task.split.query, &paths[1]).unwrap();
    save_store(&expand(&task.text_pos, &mut rng), &paths[2]).unwrap();
    save_store(&expand(&task.text_neg, &mut rng), &paths[3]).unwrap();
    let data = TaskData::from_sets(
        load_store(&paths[0]).unwrap(),
        load_store(&paths[1]).unwrap(),
        &load_store(&paths[2]).unwrap(),
        &load_store(&paths[3]).unwrap(),
    )
    .unwrap();
    assert_eq!(data.split.shots, 4);

    let cfg = ExperimentConfig {
        data: DataConfig::Files {
            support: paths[0].clone(),
            query: paths[1].clone(),
            text_pos: paths[2].clone(),
            text_neg: paths[3].clone(),
        },
        seeds: vec![0],
        ..Default::default()
    };
    let r = cmd_train_eval(&cfg).unwrap();
    assert!(r.rows[0].aggregate.top1.mean > 0.9);
}

fn unit_vec(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn weight_of(rows: &[Vec<f64>], i: usize, tau: f64) -> f64 {
    let d = rows[0].len();
    let m = Array2::from_shape_vec((rows.len(), d), rows.concat()).unwrap();
    let sims = pairwise_mean_similarity(m.view()).unwrap();
    confidence_weights(&sims, tau).unwrap().0[i]
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    /// Replacing a member by a vector that is less similar to every
    /// classmate never raises that member's weight.
    #[test]
    fn lower_similarity_replacement_never_gains_weight(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..6),
        candidates in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 16),
        tau in 0.05f64..5.0,
    ) {
        prop_assume!(raw.iter().chain(&candidates).all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let rows: Vec<Vec<f64>> = raw.iter().map(|v| unit_vec(v)).collect();
        let i = 0;
        let before = weight_of(&rows, i, tau);
        for cand in &candidates {
            let v = unit_vec(cand);
            let lower = rows.iter().skip(1).all(|r| cos(&v, r) <= cos(&rows[i], r));
            if !lower {
                continue;
            }
            let mut replaced = rows.clone();
            replaced[i] = v;
            prop_assert!(weight_of(&replaced, i, tau) <= before + 1e-12);
        }
    }
}
