use std::ffi::{CStr, CString};
use std::ptr;

use pes_core::datagen::{generate_dataset, write_dataset, GenConfig, Modality};
use pes_core::metrics::{evaluate_split, DecodeConfig};
use pes_core::nn::{save_checkpoint, Arch, CheckpointHeader, ModelState};
use pes_core::schema::{event_vocab, LabelSchema};
use pes_ffi::*;

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = pes_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn scalar_functions() {
    let mut d = 0usize;
    let (a, b) = ([1usize, 2, 3], [1usize, 3]);
    unsafe {
        assert_eq!(pes_levenshtein(a.as_ptr(), 3, b.as_ptr(), 2, &mut d), PesStatus::Ok);
        assert_eq!(d, 1);
        assert_eq!(pes_levenshtein(ptr::null(), 0, b.as_ptr(), 2, &mut d), PesStatus::Ok);
        assert_eq!(d, 2);
        assert_eq!(pes_levenshtein(ptr::null(), 3, b.as_ptr(), 2, &mut d), PesStatus::NullPointer);
    }
    let mut w = 0.0;
    unsafe {
        assert_eq!(pes_awd_weight(1.0, 3.0, &mut w), PesStatus::Ok);
        assert_eq!(w, 1.0 / 3.0);
        assert_eq!(pes_awd_weight(f64::NAN, 0.0, &mut w), PesStatus::Numeric);
    }
    assert!(last_error().contains("numeric"));
    let v = unsafe { CStr::from_ptr(pes_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn postprocess_through_the_handle() {
    let s = pes_schema_tennis();
    let n = unsafe { pes_schema_num_classes(s) };
    assert_eq!(n, 14);
    let probs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).fract()).collect();
    let mut out = vec![-1.0; n];
    let st = unsafe { pes_fine_postprocess(s, probs.as_ptr(), n, out.as_mut_ptr()) };
    assert_eq!(st, PesStatus::Ok);
    let want = pes_core::pseudo::fine_label_postprocess(&probs, &LabelSchema::tennis()).unwrap();
    assert_eq!(out, want);
    let st = unsafe { pes_fine_postprocess(s, probs.as_ptr(), n - 1, out.as_mut_ptr()) };
    assert_eq!(st, PesStatus::Schema);
    unsafe { pes_schema_free(s) };
    unsafe { pes_schema_free(ptr::null_mut()) };
}

#[test]
fn schema_from_toml_and_errors() {
    let text = CString::new(LabelSchema::tennis().to_toml_string()).unwrap();
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(pes_schema_from_toml(text.as_ptr(), &mut s), PesStatus::Ok);
        assert_eq!(pes_schema_num_classes(s), 14);
        pes_schema_free(s);
    }
    let bad = CString::new("classes = 3").unwrap();
    let mut s = ptr::null_mut();
    let st = unsafe { pes_schema_from_toml(bad.as_ptr(), &mut s) };
    assert_eq!(st, PesStatus::Schema);
    assert!(s.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { pes_schema_from_toml(ptr::null(), &mut s) }, PesStatus::NullPointer);
    let invalid = [0xffu8, 0];
    let st = unsafe { pes_schema_from_toml(invalid.as_ptr().cast(), &mut s) };
    assert_eq!(st, PesStatus::InvalidUtf8);
}

#[test]
fn load_model_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let schema = LabelSchema::tennis();
    let gen = GenConfig {
        clips: 4,
        frames: 12,
        ..GenConfig::default()
    };
    let clips = generate_dataset(&gen, &schema, 3).unwrap();
    let data_path = dir.path().join("val.jsonl");
    write_dataset(&data_path, &clips).unwrap();
    let arch = Arch {
        inputs: Modality::Rgb.input_dims(&gen),
        hidden: 4,
        embed: 6,
        classes: 14,
    };
    let model = ModelState::init(arch.clone(), 9).unwrap();
    let header = CheckpointHeader {
        arch,
        schema_hash: schema.hash(),
        stage: "test".into(),
        epoch: 0,
        metric: None,
        modality: Some(Modality::Rgb),
    };
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &header, &model).unwrap();

    let s = pes_schema_tennis();
    let (mut m, mut d) = (ptr::null_mut(), ptr::null_mut());
    let mut r = PesEvalResult::default();
    unsafe {
        assert_eq!(pes_model_load(cstr(&ckpt).as_ptr(), s, &mut m), PesStatus::Ok);
        assert_eq!(pes_model_num_params(m), model.num_params());
        assert_eq!(pes_dataset_read(cstr(&data_path).as_ptr(), s, &mut d), PesStatus::Ok);
        assert_eq!(pes_dataset_len(d), 4);
        assert_eq!(pes_evaluate(m, d, s, 1, &mut r), PesStatus::Ok);
    }
    let want = evaluate_split(&model, Modality::Rgb, &clips, &schema, &event_vocab(&schema), &DecodeConfig::default(), 1).unwrap();
    assert_eq!((r.edit, r.f1, r.clips), (want.edit, want.f1_evt, 4));

    let missing = dir.path().join("nope.ckpt");
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { pes_model_load(cstr(&missing).as_ptr(), s, &mut m2) }, PesStatus::Io);
    assert_eq!(unsafe { pes_evaluate(ptr::null(), d, s, 1, &mut r) }, PesStatus::NullPointer);
    unsafe {
        pes_model_free(m);
        pes_dataset_free(d);
        pes_schema_free(s);
    }
}

#[test]
fn mapping_weights() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.tsv");
    let rec = pes_core::awd::MappingRecord {
        c_s: 0.5,
        c_t: 0.5,
        p: 1.0,
        d: 3.0,
    };
    pes_core::awd::WeightMapping::new(vec![rec], 5).unwrap().save(&path).unwrap();
    let mut m = ptr::null_mut();
    let mut w = 0.0;
    unsafe {
        assert_eq!(pes_mapping_load(cstr(&path).as_ptr(), &mut m), PesStatus::Ok);
        assert_eq!(pes_mapping_weight(m, 0.9, 0.1, &mut w), PesStatus::Ok);
        pes_mapping_free(m);
    }
    assert_eq!(w, 1.0 / 3.0);
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pes_ffi.h")).unwrap();
    for name in [
        "PES_STATUS_OK",
        "PES_STATUS_PANIC",
        "typedef struct PesSchema PesSchema",
        "PesEvalResult",
        "pes_last_error_message",
        "pes_model_load",
        "pes_evaluate",
        "pes_mapping_weight",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_and_links_from_c() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libpes_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = std::process::Command::new(cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke exited with {:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
