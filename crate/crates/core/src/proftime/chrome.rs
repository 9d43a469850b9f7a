use serde_json::{json, Map, Value};
use thiserror::Error;

use super::{Category, DurationEvent, EventArgs, StateInterval, TimelineDoc};
use crate::event::ThreadState;

/// State tracks are shown as extra threads with this offset added to the tid.
pub const STATE_TID_BASE: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum ChromeError {
    #[error("invalid trace JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("trace event {index}: {reason}")]
    Event { index: usize, reason: String },
}

fn us(ns: u64) -> f64 {
    ns as f64 / 1000.0
}

fn ns(us: f64) -> u64 {
    (us * 1000.0).round() as u64
}

fn thread_name(pid: u32, tid: u64, name: String) -> Value {
    json!({"ph": "M", "name": "thread_name", "pid": pid, "tid": tid, "args": {"name": name}})
}

pub fn emit_chrome_trace(doc: &TimelineDoc) -> Vec<u8> {
    let mut events =
        vec![json!({"ph": "M", "name": "process_name", "pid": doc.pid, "args": {"name": "llm inference"}})];
    for tid in doc.tracks.keys() {
        events.push(thread_name(doc.pid, *tid as u64, format!("thread {tid}")));
    }
    for tid in doc.states.keys() {
        events.push(thread_name(doc.pid, STATE_TID_BASE + *tid as u64, format!("thread {tid} state")));
    }
    for (tid, track) in &doc.tracks {
        for e in track {
            events.push(json!({
                "name": e.name,
                "cat": e.category.as_str(),
                "ph": "X",
                "ts": us(e.start_ns),
                "dur": us(e.dur_ns),
                "pid": doc.pid,
                "tid": tid,
                "args": e.args,
            }));
        }
    }
    for (tid, intervals) in &doc.states {
        for i in intervals {
            events.push(json!({
                "name": i.state.to_string(),
                "cat": "state",
                "ph": "X",
                "ts": us(i.start_ns),
                "dur": us(i.end_ns - i.start_ns),
                "pid": doc.pid,
                "tid": STATE_TID_BASE + *tid as u64,
                "args": {"cpu": i.cpu},
            }));
        }
    }
    let out = json!({
        "traceEvents": events,
        "displayTimeUnit": "ns",
        "otherData": {"pid": doc.pid, "anomalies": doc.anomalies},
    });
    serde_json::to_vec_pretty(&out).expect("timeline serializes")
}

fn parse_state(name: &str) -> Option<ThreadState> {
    match name {
        "Running" => Some(ThreadState::Running),
        "Runnable" => Some(ThreadState::Runnable),
        "Idle" => Some(ThreadState::Idle),
        _ => None,
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, index: usize) -> Result<&'a Value, ChromeError> {
    obj.get(key).ok_or_else(|| ChromeError::Event { index, reason: format!("missing {key:?}") })
}

fn number(obj: &Map<String, Value>, key: &str, index: usize) -> Result<f64, ChromeError> {
    let v = field(obj, key, index)?
        .as_f64()
        .ok_or_else(|| ChromeError::Event { index, reason: format!("{key:?} is not a number") })?;
    if v < 0.0 {
        return Err(ChromeError::Event { index, reason: format!("{key:?} is negative") });
    }
    Ok(v)
}

/// Rebuilds a [`TimelineDoc`] from [`emit_chrome_trace`] output. Metadata
/// events are skipped; other phases are rejected.
pub fn parse_chrome_trace(bytes: &[u8]) -> Result<TimelineDoc, ChromeError> {
    let root: Value = serde_json::from_slice(bytes)?;
    let events = root
        .get("traceEvents")
        .and_then(Value::as_array)
        .ok_or(ChromeError::Event { index: 0, reason: "no traceEvents array".into() })?;
    let mut doc = TimelineDoc::default();
    if let Some(other) = root.get("otherData") {
        doc.pid = other.get("pid").and_then(Value::as_u64).unwrap_or(0) as u32;
        if let Some(list) = other.get("anomalies").and_then(Value::as_array) {
            doc.anomalies = list.iter().filter_map(|a| a.as_str().map(str::to_string)).collect();
        }
    }
    for (index, e) in events.iter().enumerate() {
        let obj = e.as_object().ok_or(ChromeError::Event { index, reason: "not an object".into() })?;
        match field(obj, "ph", index)?.as_str() {
            Some("M") => continue,
            Some("X") => {}
            other => return Err(ChromeError::Event { index, reason: format!("unsupported phase {other:?}") }),
        }
        let start_ns = ns(number(obj, "ts", index)?);
        let dur_ns = ns(number(obj, "dur", index)?);
        let tid = field(obj, "tid", index)?
            .as_u64()
            .ok_or(ChromeError::Event { index, reason: "tid is not an integer".into() })?;
        let name = field(obj, "name", index)?.as_str().unwrap_or_default().to_string();
        let cat = field(obj, "cat", index)?.as_str().unwrap_or_default();
        let args = obj.get("args").cloned().unwrap_or(Value::Null);
        if cat == "state" {
            let state = parse_state(&name)
                .ok_or_else(|| ChromeError::Event { index, reason: format!("unknown state {name:?}") })?;
            let cpu = args.get("cpu").and_then(Value::as_u64).unwrap_or(0) as u32;
            let tid = tid
                .checked_sub(STATE_TID_BASE)
                .ok_or(ChromeError::Event { index, reason: "state event on a non-state track".into() })?;
            doc.states.entry(tid as u32).or_default().push(StateInterval {
                state,
                start_ns,
                end_ns: start_ns + dur_ns,
                cpu,
            });
        } else {
            let category = Category::parse(cat)
                .ok_or_else(|| ChromeError::Event { index, reason: format!("unknown category {cat:?}") })?;
            let args: EventArgs = serde_json::from_value(args)?;
            doc.tracks.entry(tid as u32).or_default().push(DurationEvent { name, category, start_ns, dur_ns, args });
        }
    }
    doc.sort_tracks();
    for intervals in doc.states.values_mut() {
        intervals.sort_by_key(|i| i.start_ns);
    }
    Ok(doc)
}
