//! Command-line driver. Every subcommand reads and writes files in one
//! output directory; failures print `{"error": category, "message": ...}`
//! on stderr and exit with the category's code.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pes_core::awd::WeightMapping;
use pes_core::datagen::{read_dataset, write_dataset, ClipSample, DatasetSplit, Modality};
use pes_core::metrics::{evaluate_split, EvalReport};
use pes_core::nn::{load_checkpoint, save_checkpoint, ModelState};
use pes_core::pipeline::{
    generate_datasets, make_split, run_ablation, run_awd, run_benchmark, run_stage1, run_stage2, run_stage3,
    AblationTable, BenchmarkReport, ResultsFile, RunConfig, RunRecord, SplitManifest, Strategy, Students,
};
use pes_core::schema::{event_vocab, LabelSchema};
use pes_core::{Error, Result};

const POOL: &str = "pool.jsonl";
const VAL: &str = "val.jsonl";
const TEST: &str = "test.jsonl";
const SPLIT: &str = "split.json";
const TEACHER: &str = "teacher.ckpt";
const STUDENT_RGB: &str = "student_rgb.ckpt";
const STUDENT_FLOW: &str = "student_flow.ckpt";
const STAGE3: &str = "stage3.ckpt";
const AWD_STUDENT: &str = "awd_student.ckpt";
const AWD_MAPPING: &str = "awd_mapping.tsv";

#[derive(Parser)]
#[command(name = "pes", version, about = "Few-shot precise event spotting on synthetic clips")]
struct Cli {
    /// Directory holding datasets, checkpoints and results.
    #[arg(long, env = "PES_OUTPUT_ROOT", default_value = "pes-out", global = true)]
    output_root: PathBuf,
    /// TOML run configuration; keys it sets override the flags below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// TOML label schema (default: the built-in tennis schema).
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ConfigFlags {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated seeds for ablate/benchmark.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    pool_clips: Option<usize>,
    #[arg(long, global = true)]
    val_clips: Option<usize>,
    #[arg(long, global = true)]
    test_clips: Option<usize>,
    #[arg(long, global = true)]
    frames: Option<usize>,
    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, global = true)]
    stage1_epochs: Option<usize>,
    #[arg(long, global = true)]
    stage2_epochs: Option<usize>,
    #[arg(long, global = true)]
    stage3_epochs: Option<usize>,
    #[arg(long, global = true)]
    awd_epochs: Option<usize>,
    #[arg(long, global = true)]
    baseline_epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    steps_per_epoch: Option<usize>,
    #[arg(long, global = true)]
    knn_k: Option<usize>,
    #[arg(long, global = true)]
    awd_refresh_every: Option<usize>,
    #[arg(long, global = true)]
    delta: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    LabeledOnly,
    Joint,
    Delayed,
    BestContinuation,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::LabeledOnly => Strategy::LabeledOnly,
            StrategyArg::Joint => Strategy::Joint,
            StrategyArg::Delayed => Strategy::Delayed,
            StrategyArg::BestContinuation => Strategy::BestContinuation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSet {
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training pool, validation and test sets.
    Generate,
    /// Pick the k labeled clips from the pool.
    Split,
    /// Skeleton detector with pseudo-labeled unlabeled clips.
    TrainStage1,
    /// Distill RGB and flow encoders from the Stage I teacher.
    TrainStage2,
    /// Fine-tune the fused detector on the labeled clips.
    TrainStage3,
    /// RGB student with adaptive-weight distillation from the teacher.
    TrainAwd,
    /// Score a checkpoint on the validation or test set.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        set: EvalSet,
    },
    /// Stage I under every strategy, over the configured seeds.
    Ablate,
    /// Labeled-only vs best continuation and distilled vs RGB-only, over the
    /// configured seeds.
    Benchmark,
    /// Summarize the results files in the output directory.
    Report,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let f = &cli.flags;
    let mut cfg = RunConfig::default();
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = f.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    set!(
        seed => seed, seeds => seeds, k => k, pool_clips => data.clips, val_clips => val_clips,
        test_clips => test_clips, frames => data.frames, stage1_epochs => stage1_epochs,
        stage2_epochs => stage2_epochs, stage3_epochs => stage3_epochs, awd_epochs => awd_epochs,
        baseline_epochs => baseline_epochs, lr => optim.lr, batch_size => optim.batch_size,
        steps_per_epoch => optim.steps_per_epoch, knn_k => knn_k, delta => delta,
    );
    if let Some(s) = f.strategy {
        cfg.strategy = s.into();
    }
    if let Some(r) = f.awd_refresh_every {
        cfg.awd_refresh_every = Some(r);
    }
    if let Some(path) = &cli.config {
        let mut base = toml::Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        let text = std::fs::read_to_string(path)?;
        let over: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut base, over);
        cfg = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Ctx {
    out: PathBuf,
    cfg: RunConfig,
    schema: LabelSchema,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn read_clips(&self, name: &str) -> Result<Vec<ClipSample>> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::Dataset(format!("{} not found; run `pes generate` first", p.display())));
        }
        read_dataset(&p, &self.schema)
    }

    fn split(&self) -> Result<DatasetSplit> {
        let p = self.path(SPLIT);
        if !p.exists() {
            return Err(Error::Dataset(format!("{} not found; run `pes split` first", p.display())));
        }
        let manifest: SplitManifest = ResultsFile::read(&p)?.results;
        manifest.apply(self.read_clips(POOL)?, self.read_clips(VAL)?, self.read_clips(TEST)?)
    }

    fn load_model(&self, path: &Path) -> Result<(ModelState, Modality)> {
        let (header, model) = load_checkpoint(path)?;
        if header.schema_hash != self.schema.hash() {
            return Err(Error::Checkpoint(format!("{} was trained with a different schema", path.display())));
        }
        let modality = header
            .modality
            .ok_or_else(|| Error::Checkpoint(format!("{} does not record its input modality", path.display())))?;
        Ok((model, modality))
    }

    fn save_model(&self, name: &str, model: &ModelState, record: &RunRecord) -> Result<()> {
        save_checkpoint(&self.path(name), &record.checkpoint_header(model, &self.schema), model)
    }

    fn write_results<T: Serialize>(&self, kind: &str, results: T) -> Result<PathBuf> {
        let p = self.path(&format!("{kind}.json"));
        ResultsFile::new(kind, &self.cfg, self.cfg.seed, results).write(&p)?;
        Ok(p)
    }
}

fn done(paths: &[PathBuf]) {
    let written: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    println!("{}", serde_json::json!({ "status": "ok", "written": written }));
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let schema = match &cli.schema {
        Some(p) => LabelSchema::load(p)?,
        None => LabelSchema::tennis(),
    };
    std::fs::create_dir_all(&cli.output_root)?;
    let ctx = Ctx {
        out: cli.output_root.clone(),
        cfg,
        schema,
    };
    let (cfg, s) = (&ctx.cfg, &ctx.schema);
    match cli.command {
        Command::Generate => {
            let data = generate_datasets(cfg, s, cfg.seed)?;
            write_dataset(&ctx.path(POOL), &data.pool)?;
            write_dataset(&ctx.path(VAL), &data.val)?;
            write_dataset(&ctx.path(TEST), &data.test)?;
            let cfg_path = ctx.path("config.toml");
            std::fs::write(&cfg_path, cfg.to_toml_string()?)?;
            let counts = serde_json::json!({
                "pool": data.pool.len(), "val": data.val.len(), "test": data.test.len(),
            });
            let r = ctx.write_results("generate", counts)?;
            done(&[ctx.path(POOL), ctx.path(VAL), ctx.path(TEST), cfg_path, r]);
        }
        Command::Split => {
            let data = pes_core::pipeline::Datasets {
                pool: ctx.read_clips(POOL)?,
                val: Vec::new(),
                test: Vec::new(),
            };
            let split = make_split(cfg, data, cfg.seed)?;
            let r = ctx.write_results("split", SplitManifest::of(&split, cfg.k, cfg.seed))?;
            done(&[r]);
        }
        Command::TrainStage1 => {
            let split = ctx.split()?;
            let (teacher, record) = run_stage1(cfg, &split, s)?;
            ctx.save_model(TEACHER, &teacher, &record)?;
            let r = ctx.write_results("stage1", &record)?;
            done(&[ctx.path(TEACHER), r]);
        }
        Command::TrainStage2 => {
            let split = ctx.split()?;
            let (teacher, _) = ctx.load_model(&ctx.path(TEACHER))?;
            let (students, records) = run_stage2(cfg, &teacher, &split, s)?;
            ctx.save_model(STUDENT_RGB, &students.rgb, &records[0])?;
            ctx.save_model(STUDENT_FLOW, &students.flow, &records[1])?;
            let r = ctx.write_results("stage2", &records)?;
            done(&[ctx.path(STUDENT_RGB), ctx.path(STUDENT_FLOW), r]);
        }
        Command::TrainStage3 => {
            let split = ctx.split()?;
            let students = Students {
                rgb: ctx.load_model(&ctx.path(STUDENT_RGB))?.0,
                flow: ctx.load_model(&ctx.path(STUDENT_FLOW))?.0,
            };
            let (model, record) = run_stage3(cfg, &students, &split, s)?;
            ctx.save_model(STAGE3, &model, &record)?;
            let r = ctx.write_results("stage3", &record)?;
            done(&[ctx.path(STAGE3), r]);
        }
        Command::TrainAwd => {
            let split = ctx.split()?;
            let (teacher, _) = ctx.load_model(&ctx.path(TEACHER))?;
            let out = run_awd(cfg, &teacher, &split, s)?;
            ctx.save_model(AWD_STUDENT, &out.student, &out.record)?;
            out.mapping.save(&ctx.path(AWD_MAPPING))?;
            let r = ctx.write_results("awd", &out.record)?;
            done(&[ctx.path(AWD_STUDENT), ctx.path(AWD_MAPPING), r]);
        }
        Command::Evaluate { checkpoint, set } => {
            let (model, modality) = ctx.load_model(&checkpoint)?;
            let (clips, set_name) = match set {
                EvalSet::Val => (ctx.read_clips(VAL)?, "val"),
                EvalSet::Test => (ctx.read_clips(TEST)?, "test"),
            };
            let report = evaluate_split(&model, modality, &clips, s, &event_vocab(s), &cfg.decode, cfg.delta)?;
            let stem = checkpoint.file_stem().and_then(|x| x.to_str()).unwrap_or("model");
            let r = ctx.write_results(&format!("eval_{stem}_{set_name}"), &report)?;
            done(&[r]);
        }
        Command::Ablate => {
            let table = run_ablation(cfg, s)?;
            let r = ctx.write_results("ablation", &table)?;
            done(&[r]);
        }
        Command::Benchmark => {
            let report = run_benchmark(cfg, s)?;
            let r = ctx.write_results("benchmark", &report)?;
            done(&[r]);
        }
        Command::Report => {
            let r = ctx.write_results("report", collect_report(&ctx.out)?)?;
            done(&[r]);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportEntry {
    source: String,
    stage: String,
    val_edit: Option<f64>,
    test_edit: Option<f64>,
    test_f1: Option<f64>,
}

#[derive(Serialize)]
struct Report {
    runs: Vec<ReportEntry>,
    evaluations: Vec<(String, EvalReport)>,
    ablation: Option<AblationTable>,
    benchmark: Option<BenchmarkReport>,
    awd_mapping_records: Option<usize>,
}

/// Gathers every known results file present in `dir`, in a fixed order.
fn collect_report(dir: &Path) -> Result<Report> {
    let mut runs = Vec::new();
    for kind in ["stage1", "stage3", "awd"] {
        let p = dir.join(format!("{kind}.json"));
        if p.exists() {
            let rec: RunRecord = ResultsFile::read(&p)?.results;
            runs.push(ReportEntry {
                source: format!("{kind}.json"),
                stage: rec.stage.clone(),
                val_edit: rec.val.as_ref().map(|r| r.edit),
                test_edit: rec.test.as_ref().map(|r| r.edit),
                test_f1: rec.test.as_ref().map(|r| r.f1_evt),
            });
        }
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("eval_") && n.ends_with(".json"))
        .collect();
    names.sort();
    let evaluations = names
        .into_iter()
        .map(|n| Ok((n.clone(), ResultsFile::<EvalReport>::read(&dir.join(&n))?.results)))
        .collect::<Result<Vec<_>>>()?;
    let read_opt = |name: &str| -> Result<Option<std::path::PathBuf>> {
        let p = dir.join(name);
        Ok(p.exists().then_some(p))
    };
    let ablation = match read_opt("ablation.json")? {
        Some(p) => Some(ResultsFile::<AblationTable>::read(&p)?.results),
        None => None,
    };
    let benchmark = match read_opt("benchmark.json")? {
        Some(p) => Some(ResultsFile::<BenchmarkReport>::read(&p)?.results),
        None => None,
    };
    let awd_mapping_records = match read_opt(AWD_MAPPING)? {
        Some(p) => Some(WeightMapping::load(&p)?.records.len()),
        None => None,
    };
    Ok(Report {
        runs,
        evaluations,
        ablation,
        benchmark,
        awd_mapping_records,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.category(), "message": e.to_string() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
