use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pes_core::schema::LabelSchema;

const TINY: &str = r#"
seeds = [0, 1]
k = 4
val_clips = 4
test_clips = 4
stage1_epochs = 6
stage2_epochs = 3
stage3_epochs = 3
awd_epochs = 3
baseline_epochs = 3

[data]
clips = 12
frames = 12

[model]
hidden = 4
embed = 6

[optim]
warmup_epochs = 1
steps_per_epoch = 2
batch_size = 2

[anneal]
start_epoch = 3
end_epoch = 5
"#;

const PIPELINE: [&str; 6] = ["generate", "split", "train-stage1", "train-stage2", "train-stage3", "train-awd"];

fn pes(dir: &Path, args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pes"))
        .args(args)
        .env("PES_OUTPUT_ROOT", dir.join("out"))
        .env("RAYON_NUM_THREADS", threads)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str], threads: &str) -> serde_json::Value {
    let out = pes(dir, args, threads);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Exit code and error category of a failing invocation.
fn fail(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = pes(dir, args, "1");
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].as_str().is_some());
    (out.status.code().unwrap(), err["error"].as_str().unwrap().to_string())
}

fn run_pipeline(threads: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    for cmd in PIPELINE {
        let v = ok(dir.path(), &["--config", "tiny.toml", cmd], threads);
        assert_eq!(v["status"], "ok");
    }
    ok(
        dir.path(),
        &["--config", "tiny.toml", "evaluate", "--checkpoint", "out/stage3.ckpt", "--set", "val"],
        threads,
    );
    ok(dir.path(), &["--config", "tiny.toml", "report"], threads);
    dir
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p: PathBuf = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn pipeline_outputs_are_byte_identical_across_runs_and_thread_counts() {
    let a = run_pipeline("1");
    let b = run_pipeline("1");
    let c = run_pipeline("3");
    let fa = files(&a.path().join("out"));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for want in [
        "pool.jsonl",
        "val.jsonl",
        "test.jsonl",
        "config.toml",
        "split.json",
        "teacher.ckpt",
        "student_rgb.ckpt",
        "student_flow.ckpt",
        "stage3.ckpt",
        "awd_student.ckpt",
        "awd_mapping.tsv",
        "stage1.json",
        "stage2.json",
        "stage3.json",
        "awd.json",
        "eval_stage3_val.json",
        "report.json",
    ] {
        assert!(names.contains(&want), "missing {want}");
    }
    assert_eq!(fa, files(&b.path().join("out")));
    assert_eq!(fa, files(&c.path().join("out")));
}

#[test]
fn evaluating_a_checkpoint_reproduces_its_recorded_val_edit() {
    let dir = run_pipeline("1");
    let out = dir.path().join("out");
    let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("stage3.json")).unwrap()).unwrap();
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval_stage3_val.json")).unwrap()).unwrap();
    assert_eq!(record["schema_version"], 1);
    assert_eq!(record["results"]["val"]["edit"], eval["results"]["edit"]);
    assert_eq!(record["results"]["val"], eval["results"]);
}

#[test]
fn errors_are_json_with_category_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();

    assert_eq!(fail(d, &["--config", "tiny.toml", "train-stage1"]), (10, "dataset".into()));
    assert_eq!(fail(d, &["--config", "missing.toml", "generate"]), (11, "io".into()));
    std::fs::write(d.join("bad.toml"), "bogus_key = 1\n").unwrap();
    assert_eq!(fail(d, &["--config", "bad.toml", "generate"]).1, "config");
    assert_eq!(fail(d, &["--lr=-1", "generate"]).1, "config");

    ok(d, &["--config", "tiny.toml", "generate"], "1");
    ok(d, &["--config", "tiny.toml", "split"], "1");
    ok(d, &["--config", "tiny.toml", "train-stage1"], "1");

    // a checkpoint trained under one schema is refused under another
    let mut other = LabelSchema::tennis();
    other.classes[0] = "renamed".into();
    std::fs::write(d.join("other.toml"), other.to_toml_string()).unwrap();
    let (code, cat) = fail(
        d,
        &["--config", "tiny.toml", "--schema", "other.toml", "evaluate", "--checkpoint", "out/teacher.ckpt"],
    );
    assert_eq!((code, cat.as_str()), (9, "checkpoint"));
}

#[test]
fn flags_apply_and_the_config_file_overrides_them() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["--config", "tiny.toml", "--k", "7", "--seed", "5", "generate"], "1");
    let written: pes_core::pipeline::RunConfig =
        pes_core::pipeline::RunConfig::load(&d.join("out/config.toml")).unwrap();
    assert_eq!(written.k, 4);
    assert_eq!(written.seed, 5);
    assert_eq!(written.data.clips, 12);

    // without the file the flag wins
    let err = fail(d, &["--pool-clips", "12", "--frames", "12", "--k", "99", "split"]);
    assert_eq!(err, (3, "config".into()));
}
