//! C ABI over `alive_core`.
//!
//! Every fallible call returns an [`AliveStatus`]; on failure the message is
//! kept per thread and read back with [`alive_last_error`]. Configs are
//! opaque handles owned by the caller and released with
//! [`alive_config_free`]. Strings handed out by this library must be released
//! with [`alive_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use alive_core::datamodel::count_batch_items;
use alive_core::engine::config::RunConfig;
use alive_core::engine::stats::run_stats;
use alive_core::engine::{run, Engine};
use alive_core::optim::{clipped_term, lambda3_schedule, normalize_group};
use alive_core::reward::{constructor_reward, lambda1, solver_reward, ungated_constructor_reward};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AliveStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Engine = 5,
    Panic = 6,
}

/// Opaque run configuration.
pub struct AliveConfig {
    inner: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: AliveStatus, msg: impl Into<String>) -> AliveStatus {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> AliveStatus) -> AliveStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(AliveStatus::Panic, "panic inside alive"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, AliveStatus> {
    if p.is_null() {
        return Err(fail(AliveStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(AliveStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn alive_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn alive_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// A config with every key at its default.
#[no_mangle]
pub extern "C" fn alive_config_new() -> *mut AliveConfig {
    Box::into_raw(Box::new(AliveConfig { inner: RunConfig::default() }))
}

/// Loads and validates a config file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn alive_config_load(path: *const c_char, out: *mut *mut AliveConfig) -> AliveStatus {
    guarded(|| {
        if out.is_null() {
            return fail(AliveStatus::NullPointer, "out is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match RunConfig::load(&PathBuf::from(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(AliveConfig { inner }));
                AliveStatus::Ok
            }
            Err(e) => fail(AliveStatus::Config, e.to_string()),
        }
    })
}

/// Sets one key; `value` is parsed like a value in the config file.
///
/// # Safety
/// `cfg` must come from this library; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn alive_config_set(
    cfg: *mut AliveConfig,
    key: *const c_char,
    value: *const c_char,
) -> AliveStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_mut() else {
            return fail(AliveStatus::NullPointer, "cfg is null");
        };
        let (key, value) = match (str_arg(key, "key"), str_arg(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match cfg.inner.set_text(key, value) {
            Ok(()) => AliveStatus::Ok,
            Err(e) => fail(AliveStatus::Config, e.to_string()),
        }
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn alive_config_free(cfg: *mut AliveConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Items in one step's training batch.
#[no_mangle]
pub extern "C" fn alive_count_batch_items(m: u64, n: u64, warmup: bool) -> u64 {
    count_batch_items(m, n, warmup)
}

#[no_mangle]
pub extern "C" fn alive_constructor_reward(acc: f64, gate_epsilon: f64, gated: bool) -> f64 {
    if gated {
        constructor_reward(acc, gate_epsilon)
    } else {
        ungated_constructor_reward(acc)
    }
}

#[no_mangle]
pub extern "C" fn alive_solver_reward(hard: f64, soft: f64, lambda1_value: f64) -> f64 {
    solver_reward(hard, soft, lambda1_value)
}

/// Soft-score weight for a reference answer of `tokens` tokens under `cfg`.
///
/// # Safety
/// `cfg` must be a handle from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn alive_lambda1(cfg: *const AliveConfig, tokens: usize, out: *mut f64) -> AliveStatus {
    guarded(|| match (cfg.as_ref(), out.is_null()) {
        (Some(c), false) => {
            *out = lambda1(tokens, &c.inner.loop_cfg);
            AliveStatus::Ok
        }
        _ => fail(AliveStatus::NullPointer, "cfg or out is null"),
    })
}

#[no_mangle]
pub extern "C" fn alive_lambda3(step: u64, warmup_steps: u64) -> f64 {
    lambda3_schedule(step, warmup_steps)
}

#[no_mangle]
pub extern "C" fn alive_clipped_term(rho: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    clipped_term(rho, advantage, eps_low, eps_high)
}

/// Group-standardized advantages of `rewards[0..len]`, written to
/// `advantages[0..len]`.
///
/// # Safety
/// `rewards` and `advantages` must hold `len` doubles; `degenerate` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn alive_normalize_group(
    rewards: *const f64,
    len: usize,
    sigma_floor: f64,
    advantages: *mut f64,
    degenerate: *mut bool,
) -> AliveStatus {
    guarded(|| {
        if rewards.is_null() || advantages.is_null() || degenerate.is_null() {
            return fail(AliveStatus::NullPointer, "null buffer");
        }
        let r = std::slice::from_raw_parts(rewards, len);
        match normalize_group(r, sigma_floor) {
            Ok(g) => {
                std::slice::from_raw_parts_mut(advantages, len).copy_from_slice(&g.advantages);
                *degenerate = g.degenerate;
                AliveStatus::Ok
            }
            Err(e) => fail(AliveStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Runs (or resumes) a toy run in `run_dir`; the last completed step is
/// written to `last_step`.
///
/// # Safety
/// `cfg` must be a handle from this library; `run_dir` NUL-terminated;
/// `last_step` null or writable.
#[no_mangle]
pub unsafe extern "C" fn alive_toy_train(
    cfg: *const AliveConfig,
    run_dir: *const c_char,
    last_step: *mut u64,
) -> AliveStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(AliveStatus::NullPointer, "cfg is null");
        };
        let dir = match str_arg(run_dir, "run_dir") {
            Ok(d) => PathBuf::from(d),
            Err(s) => return s,
        };
        let mut engine = match Engine::toy(cfg.inner.clone()) {
            Ok(e) => e,
            Err(e) => return fail(AliveStatus::Config, e.to_string()),
        };
        match run(&mut engine, &dir) {
            Ok(s) => {
                if !last_step.is_null() {
                    *last_step = s.last_step;
                }
                AliveStatus::Ok
            }
            Err(e) => fail(AliveStatus::Engine, e.to_string()),
        }
    })
}

/// Windowed stats of a run as a JSON array. Free `*out` with
/// [`alive_string_free`].
///
/// # Safety
/// `run_dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn alive_stats_json(run_dir: *const c_char, window: usize, out: *mut *mut c_char) -> AliveStatus {
    guarded(|| {
        if out.is_null() {
            return fail(AliveStatus::NullPointer, "out is null");
        }
        let dir = match str_arg(run_dir, "run_dir") {
            Ok(d) => PathBuf::from(d),
            Err(s) => return s,
        };
        let rows = match run_stats(&dir, window) {
            Ok(r) => r,
            Err(e) => return fail(AliveStatus::Engine, e.to_string()),
        };
        let json = serde_json::to_string(&rows).expect("stats serialize");
        *out = CString::new(json).expect("json has no NUL").into_raw();
        AliveStatus::Ok
    })
}
