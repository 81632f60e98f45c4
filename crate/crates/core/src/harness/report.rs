//! Report records and their JSON / CSV output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::classifier::Variant;
use crate::train::LossMode;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Mean of each logit block over all query entries, plus the two halves of
/// the lambda mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchMeans {
    pub s_t_pos: f64,
    pub s_v_pos: f64,
    pub s_t_neg: f64,
    pub s_v_neg: f64,
    pub s_final: f64,
    /// `lambda * mean(S_T+ + S_V+)`
    pub positive_mix: f64,
    /// `(1 - lambda) * mean(S_T- + S_V-)`
    pub negative_mix: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualMaxAbs {
    pub r_t_pos: f64,
    pub r_t_neg: f64,
    pub r_v_pos: f64,
    pub r_v_neg: f64,
}

impl ResidualMaxAbs {
    pub fn from_array(a: [f64; 4]) -> Self {
        ResidualMaxAbs {
            r_t_pos: a[0],
            r_t_neg: a[1],
            r_v_pos: a[2],
            r_v_neg: a[3],
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.r_t_pos, self.r_t_neg, self.r_v_pos, self.r_v_neg]
    }
}

/// Mean instance confidence of the support rows, split by whether the row's
/// label was flipped. Means are `None` when the group is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSplit {
    pub clean_mean: Option<f64>,
    pub flipped_mean: Option<f64>,
    pub clean: usize,
    pub flipped: usize,
}

impl ConfidenceSplit {
    pub fn from_parts(confidences: &[f64], flipped: &[bool]) -> Self {
        let mean = |want: bool| {
            let v: Vec<f64> = confidences
                .iter()
                .zip(flipped)
                .filter(|(_, &f)| f == want)
                .map(|(&c, _)| c)
                .collect();
            (v.len(), (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
        };
        let (clean, clean_mean) = mean(false);
        let (nflip, flipped_mean) = mean(true);
        ConfidenceSplit {
            clean_mean,
            flipped_mean,
            clean,
            flipped: nflip,
        }
    }
}

/// Everything deterministic about one seed's run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub mean_ce: f64,
    pub zero_shot_top1: f64,
    pub delta_t: f64,
    pub delta_v: f64,
    pub branch_means: BranchMeans,
    pub residual_max_abs: ResidualMaxAbs,
    pub confidence: ConfidenceSplit,
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: SeedMetrics,
    pub timing: Timing,
}

/// Mean and sample standard deviation (`None` for a single seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let sd = (n > 1).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Stat { mean, sd, n }
    }

    /// `mean +- 1.96 sd / sqrt(n)`.
    pub fn ci95(&self) -> Option<(f64, f64)> {
        let half = 1.96 * self.sd? / (self.n as f64).sqrt();
        Some((self.mean - half, self.mean + half))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub top1: Stat,
    pub zero_shot_top1: Stat,
    pub mean_ce: Stat,
    pub delta_t: Stat,
    pub delta_v: Stat,
    pub wall_time_s: f64,
}

impl Aggregate {
    pub fn from_seeds(seeds: &[SeedResult]) -> Self {
        let col = |f: fn(&SeedMetrics) -> f64| -> Stat {
            Stat::of(&seeds.iter().map(|s| f(&s.metrics)).collect::<Vec<_>>())
        };
        Aggregate {
            top1: col(|m| m.top1),
            zero_shot_top1: col(|m| m.zero_shot_top1),
            mean_ce: col(|m| m.mean_ce),
            delta_t: col(|m| m.delta_t),
            delta_v: col(|m| m.delta_v),
            wall_time_s: seeds.iter().map(|s| s.timing.total_s).sum(),
        }
    }
}

/// Settings that distinguish one row of a table report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowParams {
    pub lambda: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub variant: Variant,
    pub objective: LossMode,
    pub noise_fraction: f64,
    pub reweighting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowRecord {
    pub label: String,
    pub params: RowParams,
    pub per_seed: Vec<SeedResult>,
    pub aggregate: Aggregate,
}

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Tau,
    Alpha,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Tau => "tau",
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
        }
    }
}

/// Which command produced a report, with its command-specific arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plan {
    TrainEval,
    Sweep { param: SweepParam, values: Vec<f64> },
    Noise { fractions: Vec<f64> },
    Ablate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub plan: Plan,
    /// Effective config after all overrides.
    pub config: ExperimentConfig,
    pub rows: Vec<RowRecord>,
    pub wall_time_s: f64,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    row: &'a str,
    seed: u64,
    variant: &'a str,
    lambda: f64,
    tau: f64,
    alpha: f64,
    beta: f64,
    noise_fraction: f64,
    reweighting: bool,
    top1: f64,
    zero_shot_top1: f64,
    mean_ce: f64,
    delta_t: f64,
    delta_v: f64,
    confidence_clean: Option<f64>,
    confidence_flipped: Option<f64>,
    total_s: f64,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text)?;
        if r.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported report version {}",
                r.format_version
            )));
        }
        Ok(r)
    }

    /// One line per (row, seed).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            for s in &row.per_seed {
                let m = &s.metrics;
                w.serialize(CsvRow {
                    row: &row.label,
                    seed: s.seed,
                    variant: row.params.variant.name(),
                    lambda: row.params.lambda,
                    tau: row.params.tau,
                    alpha: row.params.alpha,
                    beta: row.params.beta,
                    noise_fraction: row.params.noise_fraction,
                    reweighting: row.params.reweighting,
                    top1: m.top1,
                    zero_shot_top1: m.zero_shot_top1,
                    mean_ce: m.mean_ce,
                    delta_t: m.delta_t,
                    delta_v: m.delta_v,
                    confidence_clean: m.confidence.clean_mean,
                    confidence_flipped: m.confidence.flipped_mean,
                    total_s: s.timing.total_s,
                })
                .map_err(|e| Error::Format(format!("csv: {e}")))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(format!("csv: {e}")))
    }

    /// Writes the JSON report (stdout when `out` is `None`) and the optional
    /// CSV. Files are written to a temporary sibling and renamed, so a failed
    /// run never leaves a partial report behind.
    pub fn emit(&self, out: Option<&Path>, csv: Option<&Path>) -> Result<()> {
        let json = self.to_json()?;
        let csv_text = csv.map(|_| self.to_csv()).transpose()?;
        match out {
            Some(path) => write_atomic(path, json.as_bytes())?,
            None => {
                let mut stdout = std::io::stdout().lock();
                writeln!(stdout, "{json}").map_err(|e| Error::io("<stdout>", e))?;
            }
        }
        if let (Some(path), Some(text)) = (csv, csv_text) {
            write_atomic(path, text.as_bytes())?;
        }
        Ok(())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    tmp.set_file_name(name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
