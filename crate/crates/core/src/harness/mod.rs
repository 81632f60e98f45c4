//! Experiment harness: data ingestion, the per-seed pipeline, and the
//! train-eval / sweep / noise / ablate commands.
//!
//! Seeds derive every random choice of a run:
//! - synthetic data: generator seed `params.seed + seed`
//! - label flips: `seed + FLIP_SEED_OFFSET`
//! - negative visual cache: `seed + NEG_CACHE_SEED_OFFSET`
//! - training shuffle: `seed`

pub mod cli;
pub mod config;
pub mod report;

use std::borrow::Cow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;

pub use config::{DataConfig, ExperimentConfig};
pub use report::{
    Aggregate, BranchMeans, ConfidenceSplit, Plan, Report, ResidualMaxAbs, RowParams, RowRecord, SeedMetrics,
    SeedResult, Stat, SweepParam, Timing, FORMAT_VERSION,
};

use crate::cache::{text_features_by_class, CacheSet};
use crate::classifier::{calibrate_deltas, forward_final, zero_shot_predict, HyperParams, ResidualSet, Variant};
use crate::linalg::mean_all;
use crate::reweight::{reweight_caches, reweight_rows, ReweightResult};
use crate::store::{
    flip_labels_with_mask, load_store, save_store, synth_generate, EmbeddingSet, SupportQuerySplit, SynthParams,
};
use crate::train::{evaluate, train, LossMode};
use crate::{Error, Result};

pub const NEG_CACHE_SEED_OFFSET: u64 = 0x9E37_79B9;
pub const FLIP_SEED_OFFSET: u64 = 0x85EB_CA6B;

pub const GEN_FILES: [&str; 4] = ["support.snle", "query.snle", "text_pos.snle", "text_neg.snle"];

/// Generates a synthetic task and writes it as four SNLE files in `dir`
/// (see [`GEN_FILES`]). Returns the written paths.
pub fn cmd_gen(params: &SynthParams, dir: &Path) -> Result<Vec<PathBuf>> {
    let task = synth_generate(params)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sets = [&task.split.support, &task.split.query, &task.text_pos, &task.text_neg];
    let mut paths = Vec::with_capacity(4);
    for (name, set) in GEN_FILES.iter().zip(sets) {
        let p = dir.join(name);
        save_store(set, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Inputs of one seed's pipeline.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub split: SupportQuerySplit,
    pub text_pos: Vec<Array2<f32>>,
    pub text_neg: Vec<Array2<f32>>,
}

impl TaskData {
    pub fn from_sets(support: EmbeddingSet, query: EmbeddingSet, text_pos: &EmbeddingSet, text_neg: &EmbeddingSet) -> Result<Self> {
        let c = support.num_classes;
        if support.len() % c != 0 {
            return Err(Error::Data(format!(
                "{} support rows do not split evenly over {c} classes",
                support.len()
            )));
        }
        for (name, t) in [("positive", text_pos), ("negative", text_neg)] {
            if t.num_classes != c {
                return Err(Error::Data(format!(
                    "{name} text store has {} classes, support has {c}",
                    t.num_classes
                )));
            }
        }
        let shots = support.len() / c;
        Ok(TaskData {
            split: SupportQuerySplit::new(support, query, shots)?,
            text_pos: text_features_by_class(text_pos)?,
            text_neg: text_features_by_class(text_neg)?,
        })
    }
}

enum Source {
    Fixed(TaskData),
    Synthetic(SynthParams),
}

impl Source {
    fn open(data: &DataConfig) -> Result<Self> {
        match data {
            DataConfig::Synthetic(p) => Ok(Source::Synthetic(*p)),
            DataConfig::Files {
                support,
                query,
                text_pos,
                text_neg,
            } => Ok(Source::Fixed(TaskData::from_sets(
                load_store(support)?,
                load_store(query)?,
                &load_store(text_pos)?,
                &load_store(text_neg)?,
            )?)),
        }
    }

    fn task(&self, seed: u64) -> Result<Cow<'_, TaskData>> {
        match self {
            Source::Fixed(t) => Ok(Cow::Borrowed(t)),
            Source::Synthetic(p) => {
                let task = synth_generate(&SynthParams {
                    seed: p.seed.wrapping_add(seed),
                    ..*p
                })?;
                Ok(Cow::Owned(TaskData::from_sets(
                    task.split.support,
                    task.split.query,
                    &task.text_pos,
                    &task.text_neg,
                )?))
            }
        }
    }
}

/// Settings of one table row.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub hyper: HyperParams,
    pub variant: Variant,
    pub objective: LossMode,
    pub noise_fraction: f64,
}

impl RunSpec {
    fn from_config(cfg: &ExperimentConfig) -> Self {
        RunSpec {
            hyper: cfg.hyper.clone(),
            variant: cfg.variant,
            objective: cfg.objective_for(cfg.variant),
            noise_fraction: cfg.noise_fraction,
        }
    }

    fn params(&self) -> RowParams {
        RowParams {
            lambda: self.hyper.lambda,
            tau: self.hyper.tau,
            alpha: self.hyper.alpha,
            beta: self.hyper.beta,
            variant: self.variant,
            objective: self.objective,
            noise_fraction: self.noise_fraction,
            reweighting: self.hyper.reweighting,
        }
    }
}

/// Full pipeline for one seed: flip labels, build caches, reweight,
/// calibrate, train, evaluate.
pub fn run_seed(task: &TaskData, spec: &RunSpec, seed: u64) -> Result<SeedResult> {
    let start = Instant::now();
    let (split, flipped) = flip_labels_with_mask(&task.split, spec.noise_fraction, seed.wrapping_add(FLIP_SEED_OFFSET))?;
    let cache = CacheSet::build(&split, &task.text_pos, &task.text_neg, seed.wrapping_add(NEG_CACHE_SEED_OFFSET))?;
    let mut hp = spec.hyper.clone();
    hp.seed = seed;
    hp.delta_t = None;
    hp.delta_v = None;
    hp.check()?;
    let weighted = reweight_caches(&cache, hp.tau, hp.reweighting)?;
    let (c, d, k) = (cache.num_classes, cache.dim, cache.shots);

    let zero = ResidualSet::zeros(c, d, spec.variant.enabled());
    let (delta_t, delta_v) = calibrate_deltas(split.support.rows.view(), &cache, &zero, &weighted, &hp)?;
    hp.delta_t = Some(delta_t);
    hp.delta_v = Some(delta_v);

    let (res, trace) = train(&split, &cache, &weighted, &hp, spec.variant, spec.objective)?;
    let metrics = evaluate(&split.query, &cache, &res, &weighted, &hp)?;

    let query = split.query.rows.view();
    let b = forward_final(query, &cache, &res, &weighted, &hp)?;
    let mean = |m: &Array2<f32>| mean_all(m.view());
    let branch_means = BranchMeans {
        s_t_pos: mean(&b.s_t_pos),
        s_v_pos: mean(&b.s_v_pos),
        s_t_neg: mean(&b.s_t_neg),
        s_v_neg: mean(&b.s_v_neg),
        s_final: mean(&b.s_final),
        positive_mix: hp.lambda * mean(&b.positive_sum()),
        negative_mix: (1.0 - hp.lambda) * mean(&b.negative_sum()),
    };

    let (_, zs_pred) = zero_shot_predict(query, cache.t_pos.view(), hp.logit_scale);
    let truth = split.query.require_labels()?;
    let zs_hits = zs_pred.iter().zip(truth).filter(|(&p, &y)| p == y as usize).count();

    // Confidences are reported whether or not they are used for training.
    let stats = if k >= 2 {
        reweight_rows(cache.v_pos.view(), c, k, hp.tau)?
    } else {
        ReweightResult::uniform(c, k)
    };
    let slot_flipped: Vec<bool> = cache.source_rows.iter().map(|&r| flipped[r]).collect();
    let confidence = ConfidenceSplit::from_parts(&stats.flat_confidences(), &slot_flipped);

    Ok(SeedResult {
        seed,
        metrics: SeedMetrics {
            top1: metrics.top1,
            per_class: metrics.per_class,
            mean_ce: metrics.mean_ce,
            zero_shot_top1: zs_hits as f64 / truth.len() as f64,
            delta_t,
            delta_v,
            branch_means,
            residual_max_abs: ResidualMaxAbs::from_array(res.max_abs()),
            confidence,
            epoch_loss: trace.epoch_loss,
        },
        timing: Timing {
            train_s: trace.wall_time_s,
            total_s: start.elapsed().as_secs_f64(),
        },
    })
}

fn run_row(source: &Source, spec: &RunSpec, seeds: &[u64], label: String) -> Result<RowRecord> {
    let per_seed = seeds
        .iter()
        .map(|&seed| run_seed(&*source.task(seed)?, spec, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(RowRecord {
        label,
        params: spec.params(),
        aggregate: Aggregate::from_seeds(&per_seed),
        per_seed,
    })
}

/// Rows a plan expands to.
fn plan_rows(cfg: &ExperimentConfig, plan: &Plan) -> Result<Vec<(String, RunSpec)>> {
    let base = RunSpec::from_config(cfg);
    match plan {
        Plan::TrainEval => Ok(vec![(base.variant.name().to_string(), base)]),
        Plan::Sweep { param, values } => {
            if values.is_empty() {
                return Err(Error::arg(format!("empty {} grid", param.name())));
            }
            values
                .iter()
                .map(|&v| {
                    let mut spec = base.clone();
                    let slot = match param {
                        SweepParam::Lambda => &mut spec.hyper.lambda,
                        SweepParam::Tau => &mut spec.hyper.tau,
                        SweepParam::Alpha => &mut spec.hyper.alpha,
                        SweepParam::Beta => &mut spec.hyper.beta,
                    };
                    *slot = v;
                    spec.hyper.check()?;
                    Ok((format!("{}={v}", param.name()), spec))
                })
                .collect()
        }
        Plan::Noise { fractions } => {
            if fractions.is_empty() {
                return Err(Error::arg("empty noise fraction list"));
            }
            let mut rows = Vec::with_capacity(2 * fractions.len());
            for &f in fractions {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::arg(format!("noise fraction {f} outside [0, 1]")));
                }
                for on in [true, false] {
                    let mut spec = base.clone();
                    spec.noise_fraction = f;
                    spec.hyper.reweighting = on;
                    let label = format!("fraction={f},reweighting={}", if on { "on" } else { "off" });
                    rows.push((label, spec));
                }
            }
            Ok(rows)
        }
        Plan::Ablate => Ok(Variant::ALL
            .iter()
            .map(|&v| {
                let mut spec = base.clone();
                spec.variant = v;
                spec.objective = cfg.objective_for(v);
                (v.name().to_string(), spec)
            })
            .collect()),
    }
}

/// Runs a plan to completion. Nothing is written; see [`Report::emit`].
pub fn run_plan(cfg: &ExperimentConfig, plan: Plan) -> Result<Report> {
    let start = Instant::now();
    cfg.check()?;
    let rows = plan_rows(cfg, &plan)?;
    let source = Source::open(&cfg.data)?;
    let rows = rows
        .into_iter()
        .map(|(label, spec)| run_row(&source, &spec, &cfg.seeds, label))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        format_version: FORMAT_VERSION,
        plan,
        config: cfg.clone(),
        rows,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub fn cmd_train_eval(cfg: &ExperimentConfig) -> Result<Report> {
    run_plan(cfg, Plan::TrainEval)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Report> {
    run_plan(
        cfg,
        Plan::Sweep {
            param,
            values: values.to_vec(),
        },
    )
}

pub fn cmd_noise(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<Report> {
    run_plan(
        cfg,
        Plan::Noise {
            fractions: fractions.to_vec(),
        },
    )
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Report> {
    run_plan(cfg, Plan::Ablate)
}

/// Re-runs the plan and config echoed in a report.
pub fn rerun(report: &Report) -> Result<Report> {
    run_plan(&report.config, report.plan.clone())
}

/// Problems found in an SNLE file; an unreadable file yields one entry.
pub fn validate_file(path: &Path) -> Vec<String> {
    match load_store(path) {
        Ok(set) => crate::store::validate(&set),
        Err(e) => vec![e.to_string()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            data: DataConfig::Synthetic(SynthParams {
                classes: 4,
                dim: 16,
                shots: 4,
                queries_per_class: 6,
                spread: 0.5,
                seed: 3,
            }),
            seeds: vec![0, 1],
            ..Default::default()
        };
        cfg.hyper.epochs = 3;
        cfg
    }

    #[test]
    fn train_eval_report_shape() {
        let r = cmd_train_eval(&small()).unwrap();
        assert_eq!(r.format_version, 1);
        assert_eq!(r.rows.len(), 1);
        let row = &r.rows[0];
        assert_eq!(row.per_seed.len(), 2);
        assert_eq!(row.per_seed[0].metrics.epoch_loss.len(), 3);
        assert_eq!(row.aggregate, {
            let mut a = Aggregate::from_seeds(&row.per_seed);
            a.wall_time_s = row.aggregate.wall_time_s;
            a
        });
        let json = r.to_json().unwrap();
        assert_eq!(Report::from_json(&json).unwrap(), r);
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn plans_expand_to_rows() {
        let cfg = small();
        let sweep = Plan::Sweep {
            param: SweepParam::Tau,
            values: vec![0.5, 2.0],
        };
        let labels: Vec<String> = plan_rows(&cfg, &sweep).unwrap().into_iter().map(|r| r.0).collect();
        assert_eq!(labels, ["tau=0.5", "tau=2"]);
        let noise = plan_rows(&cfg, &Plan::Noise { fractions: vec![0.0, 0.5] }).unwrap();
        assert_eq!(noise.len(), 4);
        assert!(noise[0].1.hyper.reweighting && !noise[1].1.hyper.reweighting);
        let ablate = plan_rows(&cfg, &Plan::Ablate).unwrap();
        assert_eq!(ablate.len(), 5);
        assert_eq!(ablate.iter().filter(|r| r.0 == "full").count(), 1);
    }

    #[test]
    fn bad_plans_are_argument_errors() {
        let cfg = small();
        let empty = Plan::Sweep {
            param: SweepParam::Lambda,
            values: vec![],
        };
        assert!(matches!(run_plan(&cfg, empty), Err(Error::Argument(_))));
        let bad_lambda = Plan::Sweep {
            param: SweepParam::Lambda,
            values: vec![1.5],
        };
        assert!(matches!(run_plan(&cfg, bad_lambda), Err(Error::Argument(_))));
        assert!(matches!(cmd_noise(&cfg, &[1.2]), Err(Error::Argument(_))));
        assert!(matches!(cmd_noise(&cfg, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn gen_then_files_config_matches_seeded_synthetic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        let DataConfig::Synthetic(p) = cfg.data else { unreachable!() };
        cfg.seeds = vec![0];
        let paths = cmd_gen(&p, dir.path()).unwrap();
        let synth = cmd_train_eval(&cfg).unwrap();
        cfg.data = DataConfig::Files {
            support: paths[0].clone(),
            query: paths[1].clone(),
            text_pos: paths[2].clone(),
            text_neg: paths[3].clone(),
        };
        let files = cmd_train_eval(&cfg).unwrap();
        assert_eq!(synth.rows[0].per_seed[0].metrics, files.rows[0].per_seed[0].metrics);
        for p in &paths {
            assert!(validate_file(p).is_empty());
        }
    }
}
