//! Stage I-III orchestration, the AWD run, the Stage I strategy ablation
//! and the end-to-end benchmark, plus the files they write.

mod ablation;
mod awd_run;
mod distill;
mod train;

pub use ablation::{run_ablation, run_benchmark, AblationRow, AblationTable, BenchmarkReport, SeedOutcome};
pub use awd_run::{query_unlabeled_weights, run_awd, AwdOutcome};
pub use distill::{run_stage2, run_stage3, stage3_init, Students};
pub use train::{run_baseline, run_stage1};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_dataset, mix_seed, split_k_clip, ClipSample, DatasetSplit, GenConfig, Modality};
use crate::error::{Error, Result};
use crate::losses::AnnealSchedule;
use crate::metrics::{DecodeConfig, EvalReport};
use crate::nn::{Arch, CheckpointHeader, ModelState};
use crate::schema::{hex_digest, LabelSchema};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

/// How unlabeled clips enter Stage I.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Never uses unlabeled clips.
    LabeledOnly,
    /// Mixed batches from the first epoch.
    Joint,
    /// Labeled-only until the anneal start, then mixed.
    Delayed,
    /// Like `Delayed`, but the mixed phase starts from the best labeled-only
    /// checkpoint.
    BestContinuation,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::LabeledOnly,
        Strategy::Joint,
        Strategy::Delayed,
        Strategy::BestContinuation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::LabeledOnly => "labeled_only",
            Strategy::Joint => "joint",
            Strategy::Delayed => "delayed",
            Strategy::BestContinuation => "best_continuation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 16, embed: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_epochs: 3,
            weight_decay: 1e-4,
            batch_size: 4,
            steps_per_epoch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Generator settings; `data.clips` is the training pool size.
    pub data: GenConfig,
    pub val_clips: usize,
    pub test_clips: usize,
    /// Labeled clips drawn from the pool.
    pub k: usize,
    pub seed: u64,
    /// Seeds for the ablation and the benchmark.
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub awd_epochs: usize,
    /// Budget of the RGB-only detector trained from scratch.
    pub baseline_epochs: usize,
    pub strategy: Strategy,
    pub anneal: AnnealSchedule,
    pub optim: OptimConfig,
    pub fg_weight: f64,
    pub knn_k: usize,
    /// Rebuild the AWD mapping every this many epochs; `None` builds it once.
    pub awd_refresh_every: Option<usize>,
    pub decode: DecodeConfig,
    /// F1 tolerance in frames.
    pub delta: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: GenConfig {
                clips: 200,
                ..GenConfig::default()
            },
            val_clips: 40,
            test_clips: 60,
            k: 25,
            seed: 0,
            seeds: vec![0, 1, 2],
            model: ModelConfig::default(),
            stage1_epochs: 100,
            stage2_epochs: 50,
            stage3_epochs: 30,
            awd_epochs: 30,
            baseline_epochs: 100,
            strategy: Strategy::BestContinuation,
            anneal: AnnealSchedule::default(),
            optim: OptimConfig::default(),
            fg_weight: 5.0,
            knn_k: crate::awd::DEFAULT_K_NEIGHBORS,
            awd_refresh_every: None,
            decode: DecodeConfig::default(),
            delta: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.anneal.validate()?;
        let budgets = [
            ("stage1_epochs", self.stage1_epochs),
            ("stage2_epochs", self.stage2_epochs),
            ("stage3_epochs", self.stage3_epochs),
            ("awd_epochs", self.awd_epochs),
            ("baseline_epochs", self.baseline_epochs),
        ];
        for (name, b) in budgets {
            if b == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
            if self.optim.warmup_epochs >= b {
                return Err(Error::Config(format!("warmup_epochs must be below {name}")));
            }
        }
        if matches!(self.strategy, Strategy::Delayed | Strategy::BestContinuation)
            && self.anneal.start_epoch > self.stage1_epochs
        {
            return Err(Error::Config("anneal start_epoch exceeds the Stage I budget".into()));
        }
        if self.k == 0 || self.k > self.data.clips {
            return Err(Error::Config(format!("k={} must lie in [1, {}]", self.k, self.data.clips)));
        }
        if self.val_clips == 0 || self.test_clips == 0 {
            return Err(Error::Config("validation and test sets must be non-empty".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if o.batch_size == 0 || o.steps_per_epoch == 0 {
            return Err(Error::Config("batch_size and steps_per_epoch must be positive".into()));
        }
        if !(self.fg_weight > 0.0 && self.fg_weight.is_finite()) {
            return Err(Error::Config("fg_weight must be positive".into()));
        }
        if self.knn_k == 0 || self.awd_refresh_every == Some(0) {
            return Err(Error::Config("knn_k and awd_refresh_every must be positive".into()));
        }
        if self.model.hidden == 0 || self.model.embed == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn arch(&self, modality: Modality, classes: usize) -> Arch {
        Arch {
            inputs: modality.input_dims(&self.data),
            hidden: self.model.hidden,
            embed: self.model.embed,
            classes,
        }
    }
}

/// Per-seed datasets: training pool, validation and test sets.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub pool: Vec<ClipSample>,
    pub val: Vec<ClipSample>,
    pub test: Vec<ClipSample>,
}

pub fn generate_datasets(cfg: &RunConfig, s: &LabelSchema, seed: u64) -> Result<Datasets> {
    let with_clips = |n| GenConfig {
        clips: n,
        ..cfg.data.clone()
    };
    Ok(Datasets {
        pool: generate_dataset(&cfg.data, s, mix_seed(seed, 1))?,
        val: generate_dataset(&with_clips(cfg.val_clips), s, mix_seed(seed, 2))?,
        test: generate_dataset(&with_clips(cfg.test_clips), s, mix_seed(seed, 3))?,
    })
}

pub fn make_split(cfg: &RunConfig, data: Datasets, seed: u64) -> Result<DatasetSplit> {
    Ok(split_k_clip(data.pool, cfg.k, seed)?.with_eval(data.val, data.test))
}

/// Clip ids of each side of a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub k: usize,
    pub seed: u64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
}

impl SplitManifest {
    pub fn of(split: &DatasetSplit, k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            labeled: split.labeled_ids().into_iter().map(String::from).collect(),
            unlabeled: split.unlabeled_ids().into_iter().map(String::from).collect(),
        }
    }

    /// Rebuilds the split from a pool containing every listed clip.
    pub fn apply(&self, pool: Vec<ClipSample>, val: Vec<ClipSample>, test: Vec<ClipSample>) -> Result<DatasetSplit> {
        let mut by_id: std::collections::HashMap<String, ClipSample> =
            pool.into_iter().map(|c| (c.clip_id.clone(), c)).collect();
        let mut take = |ids: &[String]| {
            ids.iter()
                .map(|id| {
                    by_id
                        .remove(id)
                        .ok_or_else(|| Error::Dataset(format!("split lists unknown clip {id}")))
                })
                .collect::<Result<Vec<_>>>()
        };
        let labeled = take(&self.labeled)?;
        let unlabeled = take(&self.unlabeled)?;
        Ok(DatasetSplit::from_parts(labeled, unlabeled, val, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean optimized loss over the epoch's batches.
    pub train_loss: f64,
    pub labeled_batches: usize,
    pub unlabeled_batches: usize,
    /// Unlabeled-loss weight in effect.
    pub lambda: f64,
    pub val_loss: Option<f64>,
    pub val_edit: Option<f64>,
    /// Mean AWD weight over clips that got one.
    pub mean_weight: Option<f64>,
    pub params_hash: String,
}

/// What happened when Stage I switched to mixed batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub epoch: usize,
    /// Epoch whose checkpoint was restored, if any.
    pub restored_epoch: Option<usize>,
    pub restored_val_edit: Option<f64>,
    pub params_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub strategy: Option<Strategy>,
    pub modality: Modality,
    pub epochs: Vec<EpochRecord>,
    pub transition: Option<TransitionRecord>,
    /// Epoch of the selected parameters.
    pub best_epoch: usize,
    pub best_val_edit: Option<f64>,
    pub best_params_hash: String,
    pub val: Option<EvalReport>,
    pub test: Option<EvalReport>,
}

impl RunRecord {
    pub fn checkpoint_header(&self, model: &ModelState, schema: &LabelSchema) -> CheckpointHeader {
        CheckpointHeader {
            arch: model.arch.clone(),
            schema_hash: schema.hash(),
            stage: self.stage.clone(),
            epoch: self.best_epoch,
            metric: self.best_val_edit,
            modality: Some(self.modality),
        }
    }
}

/// Hex SHA-256 over the little-endian parameter bytes.
pub fn params_hash(m: &ModelState) -> String {
    let bytes: Vec<u8> = m.params.iter().flat_map(|p| p.to_le_bytes()).collect();
    hex_digest(&bytes)
}

/// Envelope of every results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile<T> {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub results: T,
}

impl<T: Serialize> ResultsFile<T> {
    pub fn new(kind: &str, cfg: &RunConfig, seed: u64, results: T) -> Self {
        Self {
            schema_version: RESULTS_SCHEMA_VERSION,
            kind: kind.into(),
            config_hash: cfg.hash(),
            seed,
            results,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

impl<T: serde::de::DeserializeOwned> ResultsFile<T> {
    pub fn read(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.schema_version != RESULTS_SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "results schema version {} is not {RESULTS_SCHEMA_VERSION}",
                file.schema_version
            )));
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml_str("k = 5\nstrategy = \"joint\"\n[optim]\nlr = 0.01\n").unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.strategy, Strategy::Joint);
        assert_eq!(cfg.optim.lr, 0.01);
        assert_eq!(cfg.optim.batch_size, OptimConfig::default().batch_size);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "stage1_epochs = 0",
            "k = 0",
            "k = 1000",
            "unknown_key = 1",
            "stage3_epochs = 3",
            "awd_refresh_every = 0",
            "[anneal]\nstart_epoch = 120\nend_epoch = 130\ntarget = 0.4",
        ] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert_eq!(err.category(), "config", "{text}");
        }
    }

    #[test]
    fn manifest_rebuilds_the_split() {
        let mut cfg = RunConfig::default();
        cfg.data.clips = 12;
        cfg.val_clips = 2;
        cfg.test_clips = 2;
        cfg.k = 3;
        let s = LabelSchema::tennis();
        let data = generate_datasets(&cfg, &s, 4).unwrap();
        let pool = data.pool.clone();
        let split = make_split(&cfg, data, 4).unwrap();
        let manifest = SplitManifest::of(&split, 3, 4);
        assert_eq!(manifest.labeled.len(), 3);
        let again = manifest.apply(pool, vec![], vec![]).unwrap();
        assert_eq!(SplitManifest::of(&again, 3, 4), manifest);
    }
}
