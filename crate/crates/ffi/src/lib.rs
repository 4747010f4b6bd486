//! C ABI over `pes-core`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Fallible calls return a `PesStatus`; the
//! message of the last failure on the calling thread is available from
//! `pes_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pes_core::awd::{weight_w, WeightMapping};
use pes_core::datagen::{read_dataset, ClipSample};
use pes_core::metrics::{evaluate_split, levenshtein, DecodeConfig};
use pes_core::nn::{load_checkpoint, ModelState};
use pes_core::pseudo::fine_label_postprocess;
use pes_core::schema::{event_vocab, LabelSchema};
use pes_core::Error;

/// Status codes. Library errors reuse the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PesStatus {
    Ok = 0,
    NullPointer = 1,
    Schema = 2,
    Config = 3,
    Argument = 4,
    Shape = 5,
    Numeric = 6,
    Empty = 7,
    UndefinedConfidence = 8,
    Checkpoint = 9,
    Dataset = 10,
    Io = 11,
    Json = 12,
    InvalidUtf8 = 13,
    Panic = 14,
}

impl From<&Error> for PesStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Schema(_) => PesStatus::Schema,
            Error::Config(_) => PesStatus::Config,
            Error::Argument(_) => PesStatus::Argument,
            Error::Shape(_) => PesStatus::Shape,
            Error::Numeric(_) => PesStatus::Numeric,
            Error::Empty(_) => PesStatus::Empty,
            Error::UndefinedConfidence(_) => PesStatus::UndefinedConfidence,
            Error::Checkpoint(_) => PesStatus::Checkpoint,
            Error::Dataset(_) => PesStatus::Dataset,
            Error::Io(_) => PesStatus::Io,
            Error::Json(_) => PesStatus::Json,
        }
    }
}

/// Label schema handle.
pub struct PesSchema(LabelSchema);

/// Trained model handle with its input modality.
pub struct PesModel {
    model: ModelState,
    modality: pes_core::datagen::Modality,
}

/// Clips read from a JSONL dataset.
pub struct PesDataset(Vec<ClipSample>);

/// AWD weight mapping handle.
pub struct PesMapping(WeightMapping);

/// Scores of a model on a dataset.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PesEvalResult {
    pub edit: f64,
    pub f1: f64,
    pub clips: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(PesStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(PesStatus::from(&e), e.to_string())
    }
}

/// Runs `f`, recording the failure message and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PesStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PesStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PesStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PesStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PesStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pes_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pes_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The built-in tennis schema. Never NULL.
#[no_mangle]
pub extern "C" fn pes_schema_tennis() -> *mut PesSchema {
    Box::into_raw(Box::new(PesSchema(LabelSchema::tennis())))
}

/// Parses a schema from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pes_schema_from_toml(toml: *const c_char, out: *mut *mut PesSchema) -> PesStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        let s = LabelSchema::from_toml_str(text)?;
        out_arg(out, Box::into_raw(Box::new(PesSchema(s))), "out")
    })
}

/// # Safety
/// `schema` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pes_schema_free(schema: *mut PesSchema) {
    if !schema.is_null() {
        drop(Box::from_raw(schema));
    }
}

/// Number of fine classes; 0 for a NULL handle.
///
/// # Safety
/// `schema` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pes_schema_num_classes(schema: *const PesSchema) -> usize {
    schema.as_ref().map_or(0, |s| s.0.num_classes())
}

/// Post-processes `n` fine-class probabilities into a valid hard vector
/// written to `out` (also of length `n`).
///
/// # Safety
/// `probs` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pes_fine_postprocess(
    schema: *const PesSchema,
    probs: *const f64,
    n: usize,
    out: *mut f64,
) -> PesStatus {
    guard(|| {
        let s = &ref_arg(schema, "schema")?.0;
        let v = slice_arg(probs, n, "probs")?;
        let hard = fine_label_postprocess(v, s)?;
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(hard.as_ptr(), out, hard.len());
        Ok(())
    })
}

/// Edit distance between two class-id sequences.
///
/// # Safety
/// `a` and `b` must hold `na` and `nb` elements; either may be NULL when
/// its length is 0.
#[no_mangle]
pub unsafe extern "C" fn pes_levenshtein(
    a: *const usize,
    na: usize,
    b: *const usize,
    nb: usize,
    out: *mut usize,
) -> PesStatus {
    guard(|| {
        let d = levenshtein(slice_arg(a, na, "a")?, slice_arg(b, nb, "b")?);
        out_arg(out, d, "out")
    })
}

/// Sample weight from a correctness rate and a distortion.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pes_awd_weight(p: f64, d: f64, out: *mut f64) -> PesStatus {
    guard(|| out_arg(out, weight_w(p, d)?, "out"))
}

/// Loads a checkpoint trained under `schema`.
///
/// # Safety
/// `path` must be a NUL-terminated string, `schema` a live handle and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pes_model_load(
    path: *const c_char,
    schema: *const PesSchema,
    out: *mut *mut PesModel,
) -> PesStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let s = &ref_arg(schema, "schema")?.0;
        let (header, model) = load_checkpoint(&path)?;
        if header.schema_hash != s.hash() {
            return Err(Error::Checkpoint("checkpoint was trained with a different schema".into()).into());
        }
        let modality = header
            .modality
            .ok_or_else(|| Error::Checkpoint("checkpoint does not record its input modality".into()))?;
        out_arg(out, Box::into_raw(Box::new(PesModel { model, modality })), "out")
    })
}

/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pes_model_free(model: *mut PesModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Parameter count; 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pes_model_num_params(model: *const PesModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_params())
}

/// Reads a JSONL dataset, validating every clip against `schema`.
///
/// # Safety
/// `path` must be a NUL-terminated string, `schema` a live handle and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pes_dataset_read(
    path: *const c_char,
    schema: *const PesSchema,
    out: *mut *mut PesDataset,
) -> PesStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let s = &ref_arg(schema, "schema")?.0;
        let clips = read_dataset(&path, s)?;
        out_arg(out, Box::into_raw(Box::new(PesDataset(clips))), "out")
    })
}

/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pes_dataset_free(data: *mut PesDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Number of clips; 0 for a NULL handle.
///
/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pes_dataset_len(data: *const PesDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Decodes every clip with the default peak decoder and scores it against
/// the ground truth at frame tolerance `delta`.
///
/// # Safety
/// All handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pes_evaluate(
    model: *const PesModel,
    data: *const PesDataset,
    schema: *const PesSchema,
    delta: usize,
    out: *mut PesEvalResult,
) -> PesStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let d = &ref_arg(data, "data")?.0;
        let s = &ref_arg(schema, "schema")?.0;
        let r = evaluate_split(&m.model, m.modality, d, s, &event_vocab(s), &DecodeConfig::default(), delta)?;
        out_arg(
            out,
            PesEvalResult {
                edit: r.edit,
                f1: r.f1_evt,
                clips: r.clips,
            },
            "out",
        )
    })
}

/// Loads a weight mapping table.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pes_mapping_load(path: *const c_char, out: *mut *mut PesMapping) -> PesStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let m = WeightMapping::load(&path)?;
        out_arg(out, Box::into_raw(Box::new(PesMapping(m))), "out")
    })
}

/// # Safety
/// `mapping` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pes_mapping_free(mapping: *mut PesMapping) {
    if !mapping.is_null() {
        drop(Box::from_raw(mapping));
    }
}

/// Weight for a clip with student confidence `c_s` and teacher confidence
/// `c_t`, from the nearest mapping records.
///
/// # Safety
/// `mapping` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pes_mapping_weight(mapping: *const PesMapping, c_s: f64, c_t: f64, out: *mut f64) -> PesStatus {
    guard(|| {
        let m = &ref_arg(mapping, "mapping")?.0;
        out_arg(out, m.knn_weight(c_s, c_t)?, "out")
    })
}
