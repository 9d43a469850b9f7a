use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use profinfer::event::{write_session_jsonl, ProbeFlags};
use profinfer::profdag::export_dot;
use profinfer::proftime::parse_chrome_trace;
use profinfer::synth::{generate, ModelSpec, RunSpec};
use profinfer_ffi::*;

fn write_session(dir: &Path, flags: ProbeFlags) -> (CString, profinfer::synth::Generated) {
    let run = RunSpec { prompt_len: 4, gen_len: 2, flags, seed: 11, ..RunSpec::default() };
    let g = generate(&ModelSpec::preset("dense2").unwrap(), &run).unwrap();
    let path = dir.join("s.jsonl");
    write_session_jsonl(&g.session, std::fs::File::create(&path).unwrap()).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), g)
}

fn take(s: *mut c_char) -> String {
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { pi_string_free(s) };
    out
}

#[test]
fn session_to_dag_and_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let (path, g) = write_session(dir.path(), ProbeFlags::ALL_ON);
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(pi_session_open(path.as_ptr(), &mut s), PiStatus::Ok);
        let mut n = 0;
        assert_eq!(pi_session_event_count(s, &mut n), PiStatus::Ok);
        assert_eq!(n, g.session.events.len());
        assert_eq!(pi_session_validate(s, &mut n), PiStatus::Ok);
        assert_eq!(n, 0);

        let mut dag = ptr::null_mut();
        assert_eq!(pi_dag_build(s, 1, &mut dag), PiStatus::Ok);
        assert_eq!(pi_dag_op_count(dag, &mut n), PiStatus::Ok);
        assert_eq!(n, g.truth.dags[1].ordered().len());
        let metric = CString::new("elapsed").unwrap();
        let mut text = ptr::null_mut();
        assert_eq!(pi_dag_to_dot(dag, metric.as_ptr(), 9, &mut text), PiStatus::Ok);
        assert_eq!(take(text), export_dot(&g.truth.dags[1], "elapsed", 9).unwrap());
        pi_dag_free(dag);

        let mut json = ptr::null_mut();
        assert_eq!(pi_session_chrome_trace(s, PiSchedSemantics::Compat, &mut json), PiStatus::Ok);
        let doc = parse_chrome_trace(take(json).as_bytes()).unwrap();
        assert!(doc.find_overlap().is_none());

        let mut missing = ptr::null_mut();
        assert_eq!(pi_dag_build(s, 99, &mut missing), PiStatus::UnknownIteration);
        let bogus = CString::new("bogus").unwrap();
        let mut dag = ptr::null_mut();
        assert_eq!(pi_dag_build(s, 0, &mut dag), PiStatus::Ok);
        assert_eq!(pi_dag_to_dot(dag, bogus.as_ptr(), 9, &mut text), PiStatus::MetricUnavailable);
        assert!(CStr::from_ptr(pi_last_error()).to_str().unwrap().contains("elapsed"));
        pi_dag_free(dag);
        pi_session_free(s);
    }
}

#[test]
fn dag_without_structure_reports_str_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_session(dir.path(), ProbeFlags { str: false, pmc: false, perf_buffer: true });
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(pi_session_open(path.as_ptr(), &mut s), PiStatus::Ok);
        let mut dag = ptr::null_mut();
        assert_eq!(pi_dag_build(s, 0, &mut dag), PiStatus::DagUnavailable);
        assert!(dag.is_null());
        assert!(CStr::from_ptr(pi_last_error()).to_str().unwrap().contains("Str"));
        pi_session_free(s);
    }
}

#[test]
fn missing_file_is_io_error() {
    let path = CString::new("/nonexistent/session.jsonl").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { pi_session_open(path.as_ptr(), &mut s) }, PiStatus::Io);
    assert!(s.is_null());
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/profinfer.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["pi_session_open", "pi_dag_build", "pi_string_free", "PI_STATUS_DAG_UNAVAILABLE"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("cc not found; skipping C syntax check");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{}\"\nint main(void) {{ PiSession *s = 0; PiStatus st = pi_session_open(\"x\", &s); pi_session_free(s); return (int)st; }}\n",
            header.display()
        ),
    )
    .unwrap();
    let out = Command::new("cc").args(["-std=c11", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
