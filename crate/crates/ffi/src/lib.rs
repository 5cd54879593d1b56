//! C ABI for agentrl-core.
//!
//! Every function returns an [`AgentrlStatus`]; results come back through
//! out-pointers. Objects live behind opaque handles that the caller frees
//! with the matching `*_free` function. On failure the message of the most
//! recent error on the calling thread is available from
//! [`agentrl_last_error`]. Strings are NUL-terminated UTF-8; string results
//! are copied into caller buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use agentrl_core::env::{Catalog, EnvError, STOP_SET};
use agentrl_core::experiment::{run_experiment, yield_report, ExperimentConfig, ExperimentError, RunResult};
use agentrl_core::policy::{log_prob, sample_action, InitConfig, ModelConfig, PolicyError, PolicyParams};
use agentrl_core::vocab::Token;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    Config = 3,
    Io = 4,
    Data = 5,
    Runtime = 6,
    /// The output buffer is too small; the required size was still written.
    BufferTooSmall = 7,
    Panic = 8,
}

/// Policy parameters.
pub struct AgentrlPolicy(PolicyParams);

/// A task catalog.
pub struct AgentrlCatalog(Catalog);

/// The outcome of a finished training run.
pub struct AgentrlRun(RunResult);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: AgentrlStatus, msg: impl Into<String>) -> AgentrlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn policy_status(e: &PolicyError) -> AgentrlStatus {
    match e {
        PolicyError::Config(_) => AgentrlStatus::Config,
        PolicyError::Io(_) => AgentrlStatus::Io,
        PolicyError::Checkpoint(_) => AgentrlStatus::Data,
        _ => AgentrlStatus::Runtime,
    }
}

fn experiment_status(e: &ExperimentError) -> AgentrlStatus {
    match e.exit_code() {
        2 => AgentrlStatus::Config,
        3 => AgentrlStatus::Io,
        4 => AgentrlStatus::Data,
        _ => AgentrlStatus::Runtime,
    }
}

fn env_status(e: &EnvError) -> AgentrlStatus {
    match e {
        EnvError::Io(_) => AgentrlStatus::Io,
        EnvError::Json(_) => AgentrlStatus::Data,
        EnvError::InvalidTask { .. } | EnvError::UnknownTask(_) => AgentrlStatus::Config,
        _ => AgentrlStatus::Runtime,
    }
}

/// Runs `f`, turning panics into [`AgentrlStatus::Panic`].
fn guard(f: impl FnOnce() -> AgentrlStatus) -> AgentrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(AgentrlStatus::Panic, msg)
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, AgentrlStatus> {
    if p.is_null() {
        return Err(fail(AgentrlStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(AgentrlStatus::InvalidString, "string is not valid UTF-8"))
}

unsafe fn tokens_arg(p: *const u32, len: usize) -> Result<Vec<Token>, AgentrlStatus> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(fail(AgentrlStatus::NullPointer, "null token array"));
    }
    Ok(std::slice::from_raw_parts(p, len).iter().map(|&t| Token(t)).collect())
}

/// Copies `s` plus a NUL into `buf`; `needed` receives the full size.
unsafe fn write_string(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> AgentrlStatus {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if cap < n || buf.is_null() {
        return fail(AgentrlStatus::BufferTooSmall, format!("need {n} bytes"));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    AgentrlStatus::Ok
}

macro_rules! out_ptr {
    ($p:expr) => {
        if $p.is_null() {
            return fail(AgentrlStatus::NullPointer, concat!("null ", stringify!($p)));
        }
    };
}

macro_rules! handle {
    ($h:expr) => {
        match $h.as_ref() {
            Some(h) => h,
            None => return fail(AgentrlStatus::NullPointer, concat!("null ", stringify!($h))),
        }
    };
}

macro_rules! try_arg {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Copies the last error message of this thread into `buf`.
///
/// # Safety
/// `buf` must point to `cap` writable bytes or be null; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn agentrl_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> AgentrlStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    write_string(&msg, buf, cap, needed)
}

/// Initializes a policy. `model_json` holds model config overrides (`"{}"`
/// for defaults); it may be null.
///
/// # Safety
/// `model_json` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn agentrl_policy_new(
    model_json: *const c_char,
    seed: u64,
    out: *mut *mut AgentrlPolicy,
) -> AgentrlStatus {
    guard(|| {
        out_ptr!(out);
        let cfg: ModelConfig = if model_json.is_null() {
            ModelConfig::default()
        } else {
            match serde_json::from_str(try_arg!(str_arg(model_json))) {
                Ok(c) => c,
                Err(e) => return fail(AgentrlStatus::Config, e.to_string()),
            }
        };
        match PolicyParams::init(cfg, InitConfig::default(), seed) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(AgentrlPolicy(p)));
                AgentrlStatus::Ok
            }
            Err(e) => fail(policy_status(&e), e.to_string()),
        }
    })
}

/// Reads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn agentrl_policy_load(path: *const c_char, out: *mut *mut AgentrlPolicy) -> AgentrlStatus {
    guard(|| {
        out_ptr!(out);
        let path = PathBuf::from(try_arg!(str_arg(path)));
        match PolicyParams::load(&path) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(AgentrlPolicy(p)));
                AgentrlStatus::Ok
            }
            Err(e) => fail(policy_status(&e), e.to_string()),
        }
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `policy` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn agentrl_policy_save(policy: *const AgentrlPolicy, path: *const c_char) -> AgentrlStatus {
    guard(|| {
        let p = handle!(policy);
        let path = PathBuf::from(try_arg!(str_arg(path)));
        match p.0.save(&path) {
            Ok(()) => AgentrlStatus::Ok,
            Err(e) => fail(policy_status(&e), e.to_string()),
        }
    })
}

/// Number of scalar parameters.
///
/// # Safety
/// `policy` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn agentrl_policy_param_count(policy: *const AgentrlPolicy, out: *mut usize) -> AgentrlStatus {
    guard(|| {
        let p = handle!(policy);
        out_ptr!(out);
        *out = p.0.len();
        AgentrlStatus::Ok
    })
}

/// Log-probability of `action` following `context`.
///
/// # Safety
/// Token arrays must hold the given number of elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn agentrl_policy_log_prob(
    policy: *const AgentrlPolicy,
    context: *const u32,
    context_len: usize,
    action: *const u32,
    action_len: usize,
    out: *mut f64,
) -> AgentrlStatus {
    guard(|| {
        let p = handle!(policy);
        out_ptr!(out);
        let ctx = try_arg!(tokens_arg(context, context_len));
        let act = try_arg!(tokens_arg(action, action_len));
        match log_prob(&p.0, &ctx, &act) {
            Ok(v) => {
                *out = v;
                AgentrlStatus::Ok
            }
            Err(e) => fail(policy_status(&e), e.to_string()),
        }
    })
}

/// Samples up to `max_tokens` tokens after `context`, stopping after an
/// end-of-turn token. Writes at most `cap` tokens to `out_tokens` and the
/// sampled count to `out_len`.
///
/// # Safety
/// `context` must hold `context_len` tokens and `out_tokens` `cap` slots.
#[no_mangle]
pub unsafe extern "C" fn agentrl_policy_sample(
    policy: *const AgentrlPolicy,
    context: *const u32,
    context_len: usize,
    max_tokens: usize,
    seed: u64,
    out_tokens: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> AgentrlStatus {
    guard(|| {
        let p = handle!(policy);
        out_ptr!(out_len);
        let ctx = try_arg!(tokens_arg(context, context_len));
        let c = match sample_action(&p.0, &ctx, max_tokens, &STOP_SET, seed) {
            Ok(c) => c,
            Err(e) => return fail(policy_status(&e), e.to_string()),
        };
        *out_len = c.tokens.len();
        if c.tokens.len() > cap || (out_tokens.is_null() && !c.tokens.is_empty()) {
            return fail(AgentrlStatus::BufferTooSmall, format!("need {} tokens", c.tokens.len()));
        }
        for (i, t) in c.tokens.iter().enumerate() {
            *out_tokens.add(i) = t.0;
        }
        AgentrlStatus::Ok
    })
}

/// # Safety
/// `policy` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn agentrl_policy_free(policy: *mut AgentrlPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// The seeded builtin catalog.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn agentrl_catalog_builtin(seed: u64, out: *mut *mut AgentrlCatalog) -> AgentrlStatus {
    guard(|| {
        out_ptr!(out);
        *out = Box::into_raw(Box::new(AgentrlCatalog(Catalog::builtin(seed))));
        AgentrlStatus::Ok
    })
}

/// Reads a catalog file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn agentrl_catalog_load(path: *const c_char, out: *mut *mut AgentrlCatalog) -> AgentrlStatus {
    guard(|| {
        out_ptr!(out);
        let path = PathBuf::from(try_arg!(str_arg(path)));
        match Catalog::load(&path) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(AgentrlCatalog(c)));
                AgentrlStatus::Ok
            }
            Err(e) => fail(env_status(&e), e.to_string()),
        }
    })
}

/// Number of tasks.
///
/// # Safety
/// `catalog` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn agentrl_catalog_len(catalog: *const AgentrlCatalog, out: *mut usize) -> AgentrlStatus {
    guard(|| {
        let c = handle!(catalog);
        out_ptr!(out);
        *out = c.0.tasks.len();
        AgentrlStatus::Ok
    })
}

/// Copies the id of task `index` into `buf`.
///
/// # Safety
/// `catalog` must come from this library; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn agentrl_catalog_task_id(
    catalog: *const AgentrlCatalog,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> AgentrlStatus {
    guard(|| {
        let c = handle!(catalog);
        match c.0.tasks.get(index) {
            Some(t) => write_string(&t.task_id, buf, cap, needed),
            None => fail(AgentrlStatus::Config, format!("task index {index} out of range")),
        }
    })
}

/// # Safety
/// `catalog` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn agentrl_catalog_free(catalog: *mut AgentrlCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// Runs a training experiment from a JSON config. Output files are written
/// under `out_dir` unless it is null.
///
/// # Safety
/// `config_json` must be a NUL-terminated string, `out_dir` null or one;
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn agentrl_run(
    config_json: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut AgentrlRun,
) -> AgentrlStatus {
    guard(|| {
        out_ptr!(out);
        let text = try_arg!(str_arg(config_json));
        let dir = if out_dir.is_null() { None } else { Some(PathBuf::from(try_arg!(str_arg(out_dir)))) };
        let result = ExperimentConfig::from_json(text).and_then(|cfg| run_experiment(&cfg, dir.as_deref()));
        match result {
            Ok(r) => {
                *out = Box::into_raw(Box::new(AgentrlRun(r)));
                AgentrlStatus::Ok
            }
            Err(e) => fail(experiment_status(&e), e.to_string()),
        }
    })
}

/// Number of parameter updates the run applied.
///
/// # Safety
/// `run` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn agentrl_run_update_count(run: *const AgentrlRun, out: *mut u64) -> AgentrlStatus {
    guard(|| {
        let r = handle!(run);
        out_ptr!(out);
        *out = r.0.updates().len() as u64;
        AgentrlStatus::Ok
    })
}

/// Copies the run's yield report, as JSON, into `buf`.
///
/// # Safety
/// `run` must come from this library; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn agentrl_run_report_json(
    run: *const AgentrlRun,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> AgentrlStatus {
    guard(|| {
        let r = handle!(run);
        match serde_json::to_string(&yield_report(&r.0.records)) {
            Ok(s) => write_string(&s, buf, cap, needed),
            Err(e) => fail(AgentrlStatus::Runtime, e.to_string()),
        }
    })
}

/// A copy of the run's final policy.
///
/// # Safety
/// `run` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn agentrl_run_policy(run: *const AgentrlRun, out: *mut *mut AgentrlPolicy) -> AgentrlStatus {
    guard(|| {
        let r = handle!(run);
        out_ptr!(out);
        *out = Box::into_raw(Box::new(AgentrlPolicy(r.0.params.clone())));
        AgentrlStatus::Ok
    })
}

/// # Safety
/// `run` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn agentrl_run_free(run: *mut AgentrlRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
