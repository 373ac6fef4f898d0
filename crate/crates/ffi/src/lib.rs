//! C ABI over the atomcheck engine.
//!
//! Conventions:
//! - every fallible call returns an [`AcStatus`]; results go through out-pointers;
//! - strings crossing the boundary are NUL-terminated UTF-8;
//! - strings returned by the library are owned by the caller and released
//!   with [`ac_string_free`];
//! - on failure, [`ac_last_error_message`] describes the most recent error
//!   on the calling thread;
//! - panics never unwind into C; they surface as `AC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use serde::Deserialize;

use atomcheck::config::{build_providers, PipelineConfig};
use atomcheck::datasets::DatasetExample;
use atomcheck::metrics::{evaluate_pairs, NeiPolicy};
use atomcheck::pipeline::run_pipeline;
use atomcheck::providers::Providers;
use atomcheck::types::{FactLabel, TaskMode, Thresholds, Verdict};
use atomcheck::verify::gate;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Pipeline = 5,
    Panic = 6,
}

/// Fact-level gate outcome.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcFactLabel {
    Refuted = 0,
    Uncertain = 1,
    Supported = 2,
}

impl From<FactLabel> for AcFactLabel {
    fn from(l: FactLabel) -> Self {
        match l {
            FactLabel::Refuted => AcFactLabel::Refuted,
            FactLabel::Uncertain => AcFactLabel::Uncertain,
            FactLabel::Supported => AcFactLabel::Supported,
        }
    }
}

/// A configured pipeline plus its providers. Opaque to C.
pub struct AcEngine {
    config: PipelineConfig,
    providers: Providers,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(AcStatus, String);

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> AcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            AcStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {what}"));
            AcStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(AcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Failure(AcStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure(AcStatus::Pipeline, format!("output contains NUL: {e}")))?;
    // SAFETY: callers check `out` for null before producing output.
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn require_out<T>(out: *mut T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        Err(Failure(AcStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Creates an engine from a JSON config (same format as the CLI's config
/// file). A null `config_json` selects the offline defaults. Relative paths
/// in the config resolve against the current working directory.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be a
/// valid pointer. On success `*out` owns an engine to be released with
/// [`ac_engine_free`].
#[no_mangle]
pub unsafe extern "C" fn ac_engine_new(config_json: *const c_char, out: *mut *mut AcEngine) -> AcStatus {
    guarded(|| {
        require_out(out, "out")?;
        *out = ptr::null_mut();
        let config = if config_json.is_null() {
            PipelineConfig::default()
        } else {
            let text = read_str(config_json, "config_json")?;
            PipelineConfig::from_json_str(text, None)
                .map(|(cfg, _warnings)| cfg)
                .map_err(|e| Failure(AcStatus::Config, e.to_string()))?
        };
        let providers = build_providers(&config).map_err(|e| Failure(AcStatus::Config, e.to_string()))?;
        *out = Box::into_raw(Box::new(AcEngine { config, providers }));
        Ok(())
    })
}

/// Releases an engine. Null is a no-op.
///
/// # Safety
/// `engine` must be null or a pointer from [`ac_engine_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ac_engine_free(engine: *mut AcEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Verifies `claim` against `document`; `*out_json` receives the verdict
/// trace as JSON.
///
/// # Safety
/// `engine` must come from [`ac_engine_new`]; `claim` and `document` must be
/// NUL-terminated; `out_json` must be valid. The engine may be shared across
/// threads.
#[no_mangle]
pub unsafe extern "C" fn ac_engine_verify(
    engine: *const AcEngine,
    claim: *const c_char,
    document: *const c_char,
    out_json: *mut *mut c_char,
) -> AcStatus {
    guarded(|| {
        require_out(out_json, "out_json")?;
        *out_json = ptr::null_mut();
        let engine = engine.as_ref().ok_or_else(|| Failure(AcStatus::NullPointer, "engine is null".into()))?;
        let example = DatasetExample {
            id: "ffi".into(),
            claim: read_str(claim, "claim")?.to_string(),
            document: read_str(document, "document")?.to_string(),
            gold: Verdict::Nei,
        };
        let trace = run_pipeline(&example, &engine.config, &engine.providers)
            .map_err(|e| Failure(AcStatus::Pipeline, e.to_string()))?;
        out_string(serde_json::to_string(&trace).expect("trace serializes"), out_json)
    })
}

/// Gates a support probability against the band `(lo, hi)`.
///
/// # Safety
/// `out_label` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ac_gate(p: f64, lo: f64, hi: f64, out_label: *mut AcFactLabel) -> AcStatus {
    guarded(|| {
        require_out(out_label, "out_label")?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Failure(AcStatus::InvalidArgument, format!("probability {p} outside [0, 1]")));
        }
        let t = Thresholds { lo, hi, ..Thresholds::default() }
            .validate()
            .map_err(|e| Failure(AcStatus::InvalidArgument, e.to_string()))?;
        *out_label = gate(p, &t).into();
        Ok(())
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsRequest {
    pairs: Vec<(Verdict, Verdict)>,
    #[serde(default)]
    task: TaskMode,
    #[serde(default)]
    nei_policy: NeiPolicy,
}

/// Computes metrics from `{"pairs": [[gold, predicted], ...], "task"?, "nei_policy"?}`
/// where labels are `"Supported"`, `"Refuted"` or `"NEI"`; `*out_json`
/// receives the metrics report.
///
/// # Safety
/// `request_json` must be NUL-terminated; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ac_metrics_from_pairs(request_json: *const c_char, out_json: *mut *mut c_char) -> AcStatus {
    guarded(|| {
        require_out(out_json, "out_json")?;
        *out_json = ptr::null_mut();
        let text = read_str(request_json, "request_json")?;
        let req: MetricsRequest =
            serde_json::from_str(text).map_err(|e| Failure(AcStatus::InvalidArgument, e.to_string()))?;
        let report = evaluate_pairs(&req.pairs, req.task, req.nei_policy);
        out_string(serde_json::to_string(&report).expect("report serializes"), out_json)
    })
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ac_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next call into the library on this thread;
/// do not free.
#[no_mangle]
pub extern "C" fn ac_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version; static, do not free.
#[no_mangle]
pub extern "C" fn ac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
