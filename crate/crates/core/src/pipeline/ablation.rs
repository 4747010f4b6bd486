//! Stage I strategy ablation and the end-to-end distillation benchmark,
//! both over `cfg.seeds`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distill::{run_stage2, run_stage3};
use super::train::{run_baseline, run_stage1};
use super::{generate_datasets, make_split, RunConfig, Strategy};
use crate::datagen::DatasetSplit;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::schema::LabelSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub val_edit: Vec<f64>,
    pub test_edit: Vec<f64>,
    pub test_f1: Vec<f64>,
    pub val_edit_mean: f64,
    pub val_edit_std: f64,
    pub test_edit_mean: f64,
    pub test_edit_std: f64,
    pub test_edit_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, s: Strategy) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Middle value, or the mean of the two middle values.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn seed_cfg(cfg: &RunConfig, seed: u64) -> RunConfig {
    RunConfig { seed, ..cfg.clone() }
}

fn seed_split(cfg: &RunConfig, s: &LabelSchema, seed: u64) -> Result<DatasetSplit> {
    make_split(cfg, generate_datasets(cfg, s, seed)?, seed)
}

fn test_of(r: &super::RunRecord) -> Result<EvalReport> {
    r.test.clone().ok_or_else(|| Error::Empty("run has no test report".into()))
}

/// Stage I under every strategy on identical splits per seed.
pub fn run_ablation(cfg: &RunConfig, s: &LabelSchema) -> Result<AblationTable> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    // results[seed][strategy] = (val edit, test report)
    let results = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let split = seed_split(cfg, s, seed)?;
            Strategy::ALL
                .par_iter()
                .map(|&strategy| {
                    let c = RunConfig {
                        strategy,
                        ..seed_cfg(cfg, seed)
                    };
                    let (_, r) = run_stage1(&c, &split, s)?;
                    Ok((r.best_val_edit.unwrap_or(0.0), test_of(&r)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = Strategy::ALL
        .iter()
        .enumerate()
        .map(|(j, &strategy)| {
            let val_edit: Vec<f64> = results.iter().map(|r| r[j].0).collect();
            let test_edit: Vec<f64> = results.iter().map(|r| r[j].1.edit).collect();
            let test_f1 = results.iter().map(|r| r[j].1.f1_evt).collect();
            AblationRow {
                strategy,
                val_edit_mean: mean(&val_edit),
                val_edit_std: std_dev(&val_edit),
                test_edit_mean: mean(&test_edit),
                test_edit_std: std_dev(&test_edit),
                test_edit_median: median(&test_edit),
                val_edit,
                test_edit,
                test_f1,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: cfg.seeds.clone(),
        rows,
    })
}

/// Test reports of every model in the benchmark for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub labeled_only: EvalReport,
    pub best_continuation: EvalReport,
    pub stage3: EvalReport,
    pub baseline_rgb: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<SeedOutcome>,
    pub median_labeled_only: f64,
    pub median_best_continuation: f64,
    pub median_stage3: f64,
    pub median_baseline_rgb: f64,
}

impl BenchmarkReport {
    /// Median test Edit gain of best continuation over labeled-only.
    pub fn continuation_gain(&self) -> f64 {
        self.median_best_continuation - self.median_labeled_only
    }

    /// Median test Edit gain of the distilled detector over the RGB baseline.
    pub fn distillation_gain(&self) -> f64 {
        self.median_stage3 - self.median_baseline_rgb
    }
}

fn benchmark_seed(cfg: &RunConfig, s: &LabelSchema, seed: u64) -> Result<SeedOutcome> {
    let c = seed_cfg(cfg, seed);
    let split = seed_split(&c, s, seed)?;
    let lo = RunConfig {
        strategy: Strategy::LabeledOnly,
        ..c.clone()
    };
    let bc = RunConfig {
        strategy: Strategy::BestContinuation,
        ..c.clone()
    };
    let ((labeled_only, chain), baseline) = rayon::join(
        || {
            rayon::join(
                || run_stage1(&lo, &split, s).and_then(|(_, r)| test_of(&r)),
                || -> Result<(EvalReport, EvalReport)> {
                    let (teacher, r1) = run_stage1(&bc, &split, s)?;
                    let (students, _) = run_stage2(&bc, &teacher, &split, s)?;
                    let (_, r3) = run_stage3(&bc, &students, &split, s)?;
                    Ok((test_of(&r1)?, test_of(&r3)?))
                },
            )
        },
        || run_baseline(&c, &split, s).and_then(|(_, r)| test_of(&r)),
    );
    let (best_continuation, stage3) = chain?;
    Ok(SeedOutcome {
        seed,
        labeled_only: labeled_only?,
        best_continuation,
        stage3,
        baseline_rgb: baseline?,
    })
}

/// Labeled-only vs best-continuation Stage I, and the full distillation
/// chain vs an RGB detector from scratch, per seed.
pub fn run_benchmark(cfg: &RunConfig, s: &LabelSchema) -> Result<BenchmarkReport> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("benchmark needs at least one seed".into()));
    }
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&seed| benchmark_seed(cfg, s, seed))
        .collect::<Result<Vec<_>>>()?;
    let med = |f: fn(&SeedOutcome) -> f64| median(&seeds.iter().map(f).collect::<Vec<_>>());
    Ok(BenchmarkReport {
        median_labeled_only: med(|o| o.labeled_only.edit),
        median_best_continuation: med(|o| o.best_continuation.edit),
        median_stage3: med(|o| o.stage3.edit),
        median_baseline_rgb: med(|o| o.baseline_rgb.edit),
        seeds,
    })
}
