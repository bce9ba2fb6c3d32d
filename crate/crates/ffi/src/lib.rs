//! C ABI over the deterministic parts of `inot`.
//!
//! Handles are opaque (`InotEngine *`). Every fallible call returns an
//! [`InotStatus`]; on failure [`inot_last_error`] describes the cause.
//! Strings returned through `out` pointers are owned by the caller and must
//! be released with [`inot_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use serde_json::json;

use inot::command::{parse_llm_command_response, parse_spatial_command, resolve, CommandError};
use inot::model::{DeviceRecord, Landmark};
use inot::onboarding::extract_inventory_rulebased;
use inot::session::SessionStore;
use inot::topology::{compute_graph, SpatialGraph, TopologyConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InotStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    NoMatch = 4,
    Ambiguous = 5,
    Io = 6,
    Internal = 7,
}

/// A resolved scene: records, landmarks and their spatial graph.
pub struct InotEngine {
    records: Vec<DeviceRecord>,
    landmarks: Vec<Landmark>,
    graph: SpatialGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

struct Fail(InotStatus, String);

impl From<CommandError> for Fail {
    fn from(e: CommandError) -> Self {
        let status = match e {
            CommandError::AmbiguousTarget(_) => InotStatus::Ambiguous,
            CommandError::NoMatch(_) | CommandError::NoSuchType(_) | CommandError::UnknownDevice(_) => {
                InotStatus::NoMatch
            }
            _ => InotStatus::Parse,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> InotStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            InotStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            InotStatus::Internal
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(InotStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(InotStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `out` is null or valid for a pointer write.
unsafe fn emit(out: *mut *mut c_char, value: &serde_json::Value) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(InotStatus::NullArgument, "out is null".into()));
    }
    let s = CString::new(value.to_string()).map_err(|e| Fail(InotStatus::Internal, e.to_string()))?;
    *out = s.into_raw();
    Ok(())
}

fn engine_from(records: Vec<DeviceRecord>, landmarks: Vec<Landmark>, w: u32, h: u32, near: f64) -> Result<InotEngine, Fail> {
    let cfg = TopologyConfig { near_threshold: near };
    cfg.validate().map_err(|e| Fail(InotStatus::Parse, e.to_string()))?;
    let graph = compute_graph(&records, &landmarks, (w, h), &cfg).map_err(|e| Fail(InotStatus::NoMatch, e.to_string()))?;
    Ok(InotEngine {
        records,
        landmarks,
        graph,
    })
}

/// Builds an engine from `{"records":[...],"landmarks":[...],"width":W,"height":H}`
/// with an optional `"near_threshold"`.
///
/// # Safety
/// `scene_json` is a NUL-terminated string; `out` is valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn inot_engine_from_json(scene_json: *const c_char, out: *mut *mut InotEngine) -> InotStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(InotStatus::NullArgument, "out is null".into()));
        }
        *out = ptr::null_mut();
        let raw = text(scene_json, "scene_json")?;
        let v: serde_json::Value = serde_json::from_str(raw).map_err(|e| Fail(InotStatus::Parse, e.to_string()))?;
        let field = |k: &str| v.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let records: Vec<DeviceRecord> =
            serde_json::from_value(field("records")).map_err(|e| Fail(InotStatus::Parse, format!("records: {e}")))?;
        let landmarks: Vec<Landmark> = match field("landmarks") {
            serde_json::Value::Null => Vec::new(),
            l => serde_json::from_value(l).map_err(|e| Fail(InotStatus::Parse, format!("landmarks: {e}")))?,
        };
        let dim = |k: &str| {
            v.get(k)
                .and_then(|d| d.as_u64())
                .filter(|d| *d > 0 && *d <= u64::from(u32::MAX))
                .map(|d| d as u32)
                .ok_or_else(|| Fail(InotStatus::Parse, format!("{k} must be a positive integer")))
        };
        let near = v
            .get("near_threshold")
            .and_then(|n| n.as_f64())
            .unwrap_or(TopologyConfig::default().near_threshold);
        let engine = engine_from(records, landmarks, dim("width")?, dim("height")?, near)?;
        *out = Box::into_raw(Box::new(engine));
        Ok(())
    })
}

/// Loads an engine from a stored session.
///
/// # Safety
/// Both strings are NUL-terminated; `out` is valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn inot_engine_open_session(
    store_root: *const c_char,
    session_id: *const c_char,
    out: *mut *mut InotEngine,
) -> InotStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(InotStatus::NullArgument, "out is null".into()));
        }
        *out = ptr::null_mut();
        let root = text(store_root, "store_root")?;
        let id = text(session_id, "session_id")?;
        let io = |e: inot::session::StoreError| Fail(InotStatus::Io, e.to_string());
        let store = SessionStore::open(Path::new(root)).map_err(io)?;
        let s = store.load(id).map_err(io)?;
        let (w, h) = s
            .image_size()
            .ok_or_else(|| Fail(InotStatus::NoMatch, "session has no image".into()))?;
        let engine = match s.graph {
            Some(graph) => InotEngine {
                records: s.records,
                landmarks: s.landmarks,
                graph,
            },
            None => engine_from(s.records, s.landmarks, w, h, TopologyConfig::default().near_threshold)?,
        };
        *out = Box::into_raw(Box::new(engine));
        Ok(())
    })
}

/// # Safety
/// `engine` is null or was returned by an `inot_engine_*` constructor and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn inot_engine_free(engine: *mut InotEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Number of device records in the engine, or 0 for null.
///
/// # Safety
/// `engine` is null or a live engine handle.
#[no_mangle]
pub unsafe extern "C" fn inot_engine_device_count(engine: *const InotEngine) -> usize {
    engine.as_ref().map(|e| e.records.len()).unwrap_or(0)
}

/// Resolves a spoken-style command to `[{"uuid","action"}]`. On
/// `Ambiguous`, `out` (when non-null) receives `{"candidates":[{"uuid","name"}]}`.
///
/// # Safety
/// `engine` is a live handle; `command` is NUL-terminated; `out` is valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn inot_engine_resolve(
    engine: *const InotEngine,
    command: *const c_char,
    out: *mut *mut c_char,
) -> InotStatus {
    guard(|| {
        if !out.is_null() {
            *out = ptr::null_mut();
        }
        let e = engine
            .as_ref()
            .ok_or_else(|| Fail(InotStatus::NullArgument, "engine is null".into()))?;
        let cmd = text(command, "command")?;
        let ast = parse_spatial_command(cmd)?;
        match resolve(&ast, &e.records, &e.landmarks, &e.graph) {
            Ok(cmds) => emit(out, &json!(cmds)),
            Err(CommandError::AmbiguousTarget(c)) => {
                if !out.is_null() {
                    emit(out, &json!({ "candidates": c }))?;
                }
                Err(CommandError::AmbiguousTarget(c).into())
            }
            Err(other) => Err(other.into()),
        }
    })
}

/// Parses a language-model reply against the engine's records.
///
/// # Safety
/// As for [`inot_engine_resolve`].
#[no_mangle]
pub unsafe extern "C" fn inot_engine_parse_reply(
    engine: *const InotEngine,
    reply: *const c_char,
    out: *mut *mut c_char,
) -> InotStatus {
    guard(|| {
        if !out.is_null() {
            *out = ptr::null_mut();
        }
        let e = engine
            .as_ref()
            .ok_or_else(|| Fail(InotStatus::NullArgument, "engine is null".into()))?;
        let cmds = parse_llm_command_response(text(reply, "reply")?, &e.records)?;
        emit(out, &json!(cmds))
    })
}

/// The engine's spatial graph as JSON.
///
/// # Safety
/// `engine` is a live handle; `out` is valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn inot_engine_graph_json(engine: *const InotEngine, out: *mut *mut c_char) -> InotStatus {
    guard(|| {
        let e = engine
            .as_ref()
            .ok_or_else(|| Fail(InotStatus::NullArgument, "engine is null".into()))?;
        emit(out, &json!(e.graph))
    })
}

/// Rule-based inventory extraction: `"2 fans and a light"` -> `{"fan":2,"light":1}`.
///
/// # Safety
/// `text_in` is NUL-terminated; `out` is valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn inot_inventory_extract(text_in: *const c_char, out: *mut *mut c_char) -> InotStatus {
    guard(|| {
        let t = text(text_in, "text")?;
        let inv = extract_inventory_rulebased(t).map_err(|e| Fail(InotStatus::Parse, e.to_string()))?;
        emit(out, &json!(inv))
    })
}

/// # Safety
/// `s` is null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn inot_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn inot_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn inot_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
