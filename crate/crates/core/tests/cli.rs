use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use profinfer::event::{read_session, ProbeFlags};
use profinfer::profdag::export_dot;
use profinfer::synth::{generate, ModelSpec, RunSpec};

fn profinfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_profinfer")).args(args).env_remove("PROFINFER_CONFIG").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = profinfer(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, model: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("{model}.jsonl"));
    let mut args = vec!["synth", "--model", model, "--out", p(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn dag_matches_generator_golden() {
    let dir = tempfile::tempdir().unwrap();
    let session = synth(dir.path(), "dense2", &[]);
    let dot = dir.path().join("dag.dot");
    ok(&["dag", "--in", p(&session), "--iter", "1", "--metric", "elapsed", "--out", p(&dot)]);
    let got = std::fs::read_to_string(&dot).unwrap();

    let truth = generate(&ModelSpec::preset("dense2").unwrap(), &RunSpec::default()).unwrap().truth;
    assert_eq!(got, export_dot(&truth.dags[1], "elapsed", 9).unwrap());

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/dense2_iter1_elapsed.dot");
    assert_eq!(got, std::fs::read_to_string(golden).unwrap());

    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("dag.json")).unwrap()).unwrap();
    assert_eq!(json["iteration"], 1);
    assert_eq!(json["metric"], "elapsed");
}

#[test]
fn replay_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let session = synth(dir.path(), "qwen2", &["--seed", "5"]);
    let a = dir.path().join("a.dot");
    let b = dir.path().join("b.dot");
    for out in [&a, &b] {
        ok(&["dag", "--in", p(&session), "--iter", "0", "--metric", "stalled", "--out", p(out)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let again = dir.path().join("again.jsonl");
    ok(&["synth", "--model", "qwen2", "--seed", "5", "--out", p(&again)]);
    assert_eq!(std::fs::read(&session).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn timeline_is_trace_event_json() {
    let dir = tempfile::tempdir().unwrap();
    let session = synth(dir.path(), "dense2", &["--gen", "3"]);
    let out = dir.path().join("t.json");
    ok(&["timeline", "--in", p(&session), "--out", p(&out)]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let events = v["traceEvents"].as_array().unwrap();
    assert!(!events.is_empty());
    for e in events {
        let ph = e["ph"].as_str().unwrap();
        assert!(ph == "X" || ph == "M", "{e}");
        assert!(e["pid"].is_u64());
        if ph == "X" {
            assert!(e["tid"].is_u64() && e["name"].is_string());
            assert!(e["ts"].as_f64().unwrap() >= 0.0 && e["dur"].as_f64().unwrap() >= 0.0);
        }
    }
    assert!(events.iter().any(|e| e["cat"] == "state"));
}

#[test]
fn timeline_semantics_from_config_env() {
    let dir = tempfile::tempdir().unwrap();
    let session = synth(dir.path(), "dense2", &["--gen", "2"]);
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[analysis]\nsched_semantics = \"kernel\"\n").unwrap();
    let out_env = dir.path().join("env.json");
    let out_flag = dir.path().join("flag.json");
    let status = Command::new(env!("CARGO_BIN_EXE_profinfer"))
        .args(["timeline", "--in", p(&session), "--out", p(&out_env)])
        .env("PROFINFER_CONFIG", &cfg)
        .status()
        .unwrap();
    assert!(status.success());
    ok(&["timeline", "--in", p(&session), "--out", p(&out_flag), "--sched-semantics", "kernel"]);
    assert_eq!(std::fs::read(&out_env).unwrap(), std::fs::read(&out_flag).unwrap());
}

#[test]
fn experts_view_writes_density_and_distance() {
    let dir = tempfile::tempdir().unwrap();
    let session = synth(dir.path(), "moe60", &["--gen", "6"]);
    let out = dir.path().join("stats");
    ok(&["stats", "--in", p(&session), "--view", "experts", "--op", "ffn_moe_up-0", "--out", p(&out)]);
    let mut r = csv::Reader::from_path(out.join("experts.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    assert!(header.contains(&"density".to_string()) && header.contains(&"avg_distance".to_string()));
    assert_eq!(r.records().count(), 6);
    let mut d = csv::Reader::from_path(out.join("expert_density.csv")).unwrap();
    let total: f64 = d.records().map(|r| r.unwrap()[1].parse::<f64>().unwrap()).sum();
    assert!((total - 4.0).abs() < 1e-12);
    assert!(out.join("experts.plot.json").exists());

    let bad = profinfer(&["stats", "--in", p(&session), "--view", "experts", "--op", "nope", "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("ffn_moe_up-0"));
}

#[test]
fn tokens_and_ops_views() {
    let dir = tempfile::tempdir().unwrap();
    let session = synth(dir.path(), "gemma2", &["--gen", "2"]);
    let out = dir.path().join("stats");
    ok(&["stats", "--in", p(&session), "--view", "tokens", "--patterns", "kq,kqv,ffn", "--out", p(&out)]);
    let text = std::fs::read_to_string(out.join("tokens.csv")).unwrap();
    assert!(text.starts_with("iter,phase,duration_ns,op_sum_ns,kq,kqv,ffn\n"));
    assert_eq!(text.lines().count(), 4);
    ok(&["stats", "--in", p(&session), "--view", "ops", "--out", p(&out)]);
    let mut r = csv::Reader::from_path(out.join("matmuls.csv")).unwrap();
    assert!(r.records().all(|rec| rec.unwrap()[6].parse::<u64>().unwrap() > 0));
    assert!(out.join("ops.csv").exists() && out.join("matmuls.plot.json").exists());
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = profinfer(&["dag", "--in", "/nonexistent/s.jsonl", "--iter", "0"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));
    assert_eq!(profinfer(&["frobnicate"]).status.code(), Some(2));

    let run =
        RunSpec { gen_len: 1, flags: ProbeFlags { str: false, pmc: false, perf_buffer: true }, ..RunSpec::default() };
    let g = generate(&ModelSpec::preset("dense2").unwrap(), &run).unwrap();
    let path = dir.path().join("nostr.jsonl");
    profinfer::event::write_session_jsonl(&g.session, std::fs::File::create(&path).unwrap()).unwrap();
    let out = profinfer(&["dag", "--in", p(&path), "--iter", "0", "--out", p(&dir.path().join("x.dot"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Str flag"));

    let out = profinfer(&["dag", "--in", p(&path), "--iter", "9"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let session = synth(dir.path(), "dense2", &["--gen", "1"]);
    let out = ok(&["validate", "--in", p(&session)]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok:"));

    let text = std::fs::read_to_string(&session).unwrap().replace("\"batch_size\":8", "\"batch_size\":0");
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, text).unwrap();
    let out = profinfer(&["validate", "--in", p(&broken)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("batch_size must be at least 1"));
}

#[test]
fn trace_decodes_recorded_stream() {
    let dir = tempfile::tempdir().unwrap();
    let wire = dir.path().join("w.bin");
    let session = synth(dir.path(), "moe60", &["--gen", "3", "--drop-rate", "0.03", "--wire", p(&wire)]);
    let cfg = dir.path().join("cfg.toml");
    let cpu = profinfer::synth::backend_guid(profinfer::event::Backend::Cpu);
    std::fs::write(
        &cfg,
        format!(
            r#"pmc = ["l3d_cache_refill", "mem_access_wr", "major-faults", "cycles", "idle-backend-cycles"]

[flags]
str = true
pmc = true
perf_buffer = true

[target.backends]
"{cpu}" = "CPU"

[target.moe]
experts = 60
experts_per_token = 4
"#
        ),
    )
    .unwrap();
    let out = dir.path().join("traced.jsonl");
    ok(&["--config", p(&cfg), "trace", "--wire", p(&wire), "--out", p(&out)]);
    let traced = read_session(&out).unwrap();
    let expected = read_session(&session).unwrap();
    assert_eq!(traced.events, expected.events);
    assert_eq!(traced.header.dropped_events, expected.header.dropped_events);
    assert_eq!(traced.header.inference_tids, expected.header.inference_tids);
    assert_eq!(traced.header.backend_names, expected.header.backend_names);
    ok(&["validate", "--in", p(&out)]);

    assert_eq!(profinfer(&["trace", "--out", p(&out)]).status.code(), Some(2));
}
