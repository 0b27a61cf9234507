//! C ABI over `mtd-core`.
//!
//! Corpora and models are opaque heap handles created by `mtd_*_generate`,
//! `mtd_*_load` or `mtd_model_init` and released with the matching `_free`.
//! Every fallible function returns an [`MtdStatus`]; on failure the message
//! is available from [`mtd_last_error`] on the same thread. Panics are caught
//! at the boundary and reported as `MTD_STATUS_PANIC`.
//!
//! The header `include/mtd.h` is generated by cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mtd_core::config::ConfigBundle;
use mtd_core::data::{generate_corpus, Corpus, Split};
use mtd_core::eval::{retrieval_accuracy, EvalConfig};
use mtd_core::model::{ModelConfig, ParamScope, SyncModel};
use mtd_core::train::{lr_schedule, TrainConfig};
use mtd_core::{Error, Tensor};

/// Result codes. 1 to 3 match the `mtd` command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtdStatus {
    Ok = 0,
    /// Bad argument or configuration value.
    Usage = 1,
    /// Unreadable, malformed or mismatched data.
    Data = 2,
    /// Non-finite values.
    Numerical = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// Rust panic caught at the boundary.
    Panic = 5,
}

/// Opaque corpus handle.
pub struct MtdCorpus(Corpus);

/// Opaque model handle.
pub struct MtdModel(SyncModel);

/// Which split of a corpus.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtdSplit {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl From<MtdSplit> for Split {
    fn from(s: MtdSplit) -> Split {
        match s {
            MtdSplit::Train => Split::Train,
            MtdSplit::Val => Split::Val,
            MtdSplit::Test => Split::Test,
        }
    }
}

/// Which built-in model profile [`mtd_model_init`] uses.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtdProfile {
    Teacher = 0,
    Student = 1,
    FullTeacher = 2,
    FullStudent = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Fail {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MtdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            MtdStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_last_error(&format!("null pointer: {what}"));
            MtdStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_last_error(&e.to_string());
            match e.exit_code() {
                1 => MtdStatus::Usage,
                3 => MtdStatus::Numerical,
                _ => MtdStatus::Data,
            }
        }
        Err(_) => {
            set_last_error("internal panic");
            MtdStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::Usage(format!("{what} is not valid UTF-8"))))
}

/// Message of the last failed call on this thread, or "" after a success.
/// The pointer stays valid until the next `mtd_*` call on this thread.
#[no_mangle]
pub extern "C" fn mtd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generates a corpus. `config_text` holds `key = value` lines (only the
/// `corpus.*` keys matter); NULL or "" means the defaults.
///
/// # Safety
/// `config_text` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_corpus_generate(config_text: *const c_char, out_corpus: *mut *mut MtdCorpus) -> MtdStatus {
    guard(|| {
        let slot = out(out_corpus, "out_corpus")?;
        let text = if config_text.is_null() {
            ""
        } else {
            c_str(config_text, "config_text")?
        };
        let bundle = ConfigBundle::parse(text)?;
        bundle.corpus.validate()?;
        let corpus = generate_corpus(&bundle.corpus)?;
        *slot = Box::into_raw(Box::new(MtdCorpus(corpus)));
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out_corpus` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_corpus_load(path: *const c_char, out_corpus: *mut *mut MtdCorpus) -> MtdStatus {
    guard(|| {
        let slot = out(out_corpus, "out_corpus")?;
        let path = PathBuf::from(c_str(path, "path")?);
        *slot = Box::into_raw(Box::new(MtdCorpus(Corpus::load(&path)?)));
        Ok(())
    })
}

/// # Safety
/// `corpus` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mtd_corpus_save(corpus: *const MtdCorpus, path: *const c_char) -> MtdStatus {
    guard(|| {
        let c = deref(corpus, "corpus")?;
        let path = PathBuf::from(c_str(path, "path")?);
        c.0.save(&path)?;
        Ok(())
    })
}

/// Number of utterances in a split.
///
/// # Safety
/// `corpus` is a live handle; `out_len` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_corpus_len(corpus: *const MtdCorpus, split: MtdSplit, out_len: *mut usize) -> MtdStatus {
    guard(|| {
        let c = deref(corpus, "corpus")?;
        *out(out_len, "out_len")? = c.0.split(split.into()).len();
        Ok(())
    })
}

/// # Safety
/// `corpus` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mtd_corpus_free(corpus: *mut MtdCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Freshly initialised model from a built-in profile with the given seed.
///
/// # Safety
/// `out_model` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_model_init(profile: MtdProfile, seed: u64, out_model: *mut *mut MtdModel) -> MtdStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let base = match profile {
            MtdProfile::Teacher => ModelConfig::teacher(),
            MtdProfile::Student => ModelConfig::student(),
            MtdProfile::FullTeacher => ModelConfig::full_teacher(),
            MtdProfile::FullStudent => ModelConfig::full_student(),
        };
        let model = SyncModel::init(&ModelConfig { seed, ..base })?;
        *slot = Box::into_raw(Box::new(MtdModel(model)));
        Ok(())
    })
}

/// Loads a checkpoint written by `mtd train-teacher` or `mtd distill`.
///
/// # Safety
/// `path` is a NUL-terminated string; `out_model` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_model_load(path: *const c_char, out_model: *mut *mut MtdModel) -> MtdStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let path = PathBuf::from(c_str(path, "path")?);
        let (model, _) = mtd_core::checkpoint::load_checkpoint(&path)?;
        *slot = Box::into_raw(Box::new(MtdModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mtd_model_free(model: *mut MtdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Parameter count; with `backend_only` the audio/visual front-ends are
/// excluded.
///
/// # Safety
/// `model` is a live handle; `out_count` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_model_param_count(model: *const MtdModel, backend_only: bool, out_count: *mut usize) -> MtdStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let scope = if backend_only {
            ParamScope::BackendOnly
        } else {
            ParamScope::All
        };
        *out(out_count, "out_count")? = m.0.param_count(scope);
        Ok(())
    })
}

/// Input widths and audio rate of a model, any of which may be NULL.
///
/// # Safety
/// `model` is a live handle; non-null outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_model_dims(
    model: *const MtdModel,
    out_d_visual: *mut usize,
    out_d_audio: *mut usize,
    out_audio_rate: *mut usize,
) -> MtdStatus {
    guard(|| {
        let c = deref(model, "model")?.0.config();
        for (p, v) in [(out_d_visual, c.d_visual_in), (out_d_audio, c.d_audio_in), (out_audio_rate, c.audio_rate)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Sync logit for row-major `visual_frames × d_visual` and
/// `(audio_rate·visual_frames) × d_audio` feature arrays.
///
/// # Safety
/// `visual` and `audio` point to that many `double`s; `out_logit` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_model_score(
    model: *const MtdModel,
    visual: *const f64,
    visual_frames: usize,
    audio: *const f64,
    audio_frames: usize,
    out_logit: *mut f64,
) -> MtdStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let c = m.config();
        if visual.is_null() {
            return Err(Fail::Null("visual"));
        }
        if audio.is_null() {
            return Err(Fail::Null("audio"));
        }
        let v = std::slice::from_raw_parts(visual, visual_frames * c.d_visual_in).to_vec();
        let a = std::slice::from_raw_parts(audio, audio_frames * c.d_audio_in).to_vec();
        let v = Tensor::new(&[visual_frames, c.d_visual_in], v)?;
        let a = Tensor::new(&[audio_frames, c.d_audio_in], a)?;
        *out(out_logit, "out_logit")? = m.logit(&v, &a)?;
        Ok(())
    })
}

/// Retrieval accuracy on the test split at one frame length, with default
/// evaluation settings (±15 frames, tolerance 1, 500 queries).
///
/// # Safety
/// Handles are live; `out_accuracy` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_evaluate(
    model: *const MtdModel,
    corpus: *const MtdCorpus,
    frame_length: usize,
    out_accuracy: *mut f64,
) -> MtdStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let c = &deref(corpus, "corpus")?.0;
        let acc = retrieval_accuracy(m, &c.test, frame_length, &EvalConfig::default())?;
        *out(out_accuracy, "out_accuracy")? = acc;
        Ok(())
    })
}

/// Learning rate at `epoch` under the default schedule.
///
/// # Safety
/// `out_lr` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_lr_schedule(epoch: usize, out_lr: *mut f64) -> MtdStatus {
    guard(|| {
        *out(out_lr, "out_lr")? = lr_schedule(epoch, &TrainConfig::full())?;
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
