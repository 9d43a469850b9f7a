//! C ABI over the profinfer analyzers.
//!
//! Sessions and DAGs are opaque handles owned by the caller and released with
//! their `_free` function. Every fallible call returns a [`PiStatus`]; on
//! failure [`pi_last_error`] describes the cause. Strings returned through
//! `char **` out-parameters must be released with [`pi_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use profinfer::event::{read_session, validate_session, TraceSession};
use profinfer::ingest::{ingest, Ingest};
use profinfer::profdag::{build_profdag, export_dot, DagError, ProfDag};
use profinfer::profstat::matmul_complexity;
use profinfer::proftime::{build_timeline, emit_chrome_trace, SchedSemantics};
use profinfer::tracer::probe_overhead;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Ingest = 5,
    DagUnavailable = 6,
    UnknownIteration = 7,
    MetricUnavailable = 8,
    Domain = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiSchedSemantics {
    Compat = 0,
    Kernel = 1,
}

/// A loaded trace session.
pub struct PiSession {
    session: TraceSession,
}

/// Operator graph of one iteration.
pub struct PiDag {
    dag: ProfDag,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(PiStatus, String);

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> PiStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            PiStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PiStatus::Internal
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(PiStatus::NullArgument, format!("{name} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(PiStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(PiStatus::Internal, "output contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn run_ingest(session: &TraceSession) -> Result<Ingest, Failure> {
    ingest(session).map_err(|e| Failure(PiStatus::Ingest, e.to_string()))
}

fn dag_failure(e: DagError) -> Failure {
    let status = match e {
        DagError::DagUnavailable { .. } => PiStatus::DagUnavailable,
        DagError::UnknownIteration { .. } => PiStatus::UnknownIteration,
        DagError::MetricUnavailable { .. } => PiStatus::MetricUnavailable,
        DagError::EmptyPalette => PiStatus::Domain,
    };
    Failure(status, e.to_string())
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next profinfer call on the same thread.
#[no_mangle]
pub extern "C" fn pi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opens a session file (JSON Lines or binary).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pi_session_open(path: *const c_char, out: *mut *mut PiSession) -> PiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        if !Path::new(path).exists() {
            return Err(Failure(PiStatus::Io, format!("{path}: no such file")));
        }
        let session = read_session(Path::new(path)).map_err(|e| Failure(PiStatus::Parse, e.to_string()))?;
        *out = Box::into_raw(Box::new(PiSession { session }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from [`pi_session_open`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pi_session_free(session: *mut PiSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pi_session_event_count(session: *const PiSession, out: *mut usize) -> PiStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = s.session.events.len();
        Ok(())
    })
}

/// Counts trace-model violations. Zero means the session is well formed.
///
/// # Safety
/// `session` must be a live handle and `violations` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pi_session_validate(session: *const PiSession, violations: *mut usize) -> PiStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if violations.is_null() {
            return Err(null("violations"));
        }
        *violations = validate_session(&s.session).len();
        Ok(())
    })
}

/// Chrome trace JSON for the whole session.
///
/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pi_session_chrome_trace(
    session: *const PiSession,
    semantics: PiSchedSemantics,
    out: *mut *mut c_char,
) -> PiStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let semantics = match semantics {
            PiSchedSemantics::Compat => SchedSemantics::Compat,
            PiSchedSemantics::Kernel => SchedSemantics::Kernel,
        };
        let doc = build_timeline(&run_ingest(&s.session)?, semantics);
        let json =
            String::from_utf8(emit_chrome_trace(&doc)).map_err(|e| Failure(PiStatus::Internal, e.to_string()))?;
        out_string(out, json)
    })
}

/// Builds the operator graph of `iteration`.
///
/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pi_dag_build(session: *const PiSession, iteration: usize, out: *mut *mut PiDag) -> PiStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dag = build_profdag(&run_ingest(&s.session)?, iteration).map_err(dag_failure)?;
        *out = Box::into_raw(Box::new(PiDag { dag }));
        Ok(())
    })
}

/// # Safety
/// `dag` must come from [`pi_dag_build`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pi_dag_free(dag: *mut PiDag) {
    if !dag.is_null() {
        drop(Box::from_raw(dag));
    }
}

/// Number of op nodes, constants excluded.
///
/// # Safety
/// `dag` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pi_dag_op_count(dag: *const PiDag, out: *mut usize) -> PiStatus {
    guard(|| {
        let d = dag.as_ref().ok_or_else(|| null("dag"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = d.dag.ordered().len();
        Ok(())
    })
}

/// DOT text colored by `metric` (elapsed, bandwidth, refills, stalled or a
/// counter name).
///
/// # Safety
/// `dag` must be a live handle, `metric` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pi_dag_to_dot(
    dag: *const PiDag,
    metric: *const c_char,
    palette_size: usize,
    out: *mut *mut c_char,
) -> PiStatus {
    guard(|| {
        let d = dag.as_ref().ok_or_else(|| null("dag"))?;
        let metric = str_arg(metric, "metric")?;
        if out.is_null() {
            return Err(null("out"));
        }
        out_string(out, export_dot(&d.dag, metric, palette_size).map_err(dag_failure)?)
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Probe cost as a share of total thread time.
///
/// # Safety
/// `costs_ns` must point to `n` values (or be null with `n == 0`); `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn pi_probe_overhead(
    costs_ns: *const u64,
    n: usize,
    runtime_ns: u64,
    nthreads: u32,
    out: *mut f64,
) -> PiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let costs: &[u64] = match (costs_ns.is_null(), n) {
            (_, 0) => &[],
            (true, _) => return Err(null("costs_ns")),
            (false, n) => std::slice::from_raw_parts(costs_ns, n),
        };
        *out = probe_overhead(costs, runtime_ns, nthreads).map_err(|e| Failure(PiStatus::Domain, e.to_string()))?;
        Ok(())
    })
}

/// M·N·K·H of a matrix multiplication.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pi_matmul_complexity(m: u64, n: u64, k: u64, h: u64, out: *mut u64) -> PiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = matmul_complexity(m, n, k, h).map_err(|e| Failure(PiStatus::Domain, e.to_string()))?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use std::ptr;

    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(pi_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn overhead_example() {
        let costs = [10_000_000u64, 18_000_000];
        let mut out = 0.0;
        let status = unsafe { pi_probe_overhead(costs.as_ptr(), 2, 1_000_000_000, 4, &mut out) };
        assert_eq!(status, PiStatus::Ok);
        assert!((out - 0.007).abs() < 1e-15);
        assert_eq!(last_error(), "");
    }

    #[test]
    fn domain_error_sets_message() {
        let mut out = 0u64;
        assert_eq!(unsafe { pi_matmul_complexity(0, 1, 1, 1, &mut out) }, PiStatus::Domain);
        assert!(last_error().contains("zero"));
    }

    #[test]
    fn null_arguments() {
        let mut s = ptr::null_mut();
        assert_eq!(unsafe { pi_session_open(ptr::null(), &mut s) }, PiStatus::NullArgument);
        assert_eq!(unsafe { pi_matmul_complexity(1, 1, 1, 1, ptr::null_mut()) }, PiStatus::NullArgument);
        unsafe { pi_session_free(ptr::null_mut()) };
    }
}
