//! Timeline view: per-thread token, graph and op spans plus scheduler-derived
//! thread states, exported as Chrome Trace Event Format JSON.

mod chrome;
mod sched;

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use chrome::{emit_chrome_trace, parse_chrome_trace, ChromeError, STATE_TID_BASE};
pub use sched::{derive_thread_states, SchedSemantics};

use crate::event::ThreadState;
use crate::ingest::{Ingest, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Token,
    Graph,
    Op,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Token => "token",
            Category::Graph => "graph",
            Category::Op => "op",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        match s {
            "token" => Some(Category::Token),
            "graph" => Some(Category::Graph),
            "op" => Some(Category::Op),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventArgs {
    pub cpu: u32,
    /// Set only when the thread migrated between enter and exit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_cpu: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guid: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationEvent {
    pub name: String,
    pub category: Category,
    pub start_ns: u64,
    pub dur_ns: u64,
    pub args: EventArgs,
}

impl DurationEvent {
    pub fn end_ns(&self) -> u64 {
        self.start_ns + self.dur_ns
    }

    fn sort_key(&self) -> (u64, Category, Reverse<u64>, &str) {
        (self.start_ns, self.category, Reverse(self.dur_ns), &self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateInterval {
    pub state: ThreadState,
    pub start_ns: u64,
    pub end_ns: u64,
    pub cpu: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineDoc {
    pub pid: u32,
    pub tracks: BTreeMap<u32, Vec<DurationEvent>>,
    pub states: BTreeMap<u32, Vec<StateInterval>>,
    pub anomalies: Vec<String>,
}

impl TimelineDoc {
    pub(crate) fn sort_tracks(&mut self) {
        for events in self.tracks.values_mut() {
            events.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        }
    }

    /// First pair of overlapping same-category events on one track, if any.
    pub fn find_overlap(&self) -> Option<(u32, &DurationEvent, &DurationEvent)> {
        for (tid, events) in &self.tracks {
            let mut last_end: BTreeMap<Category, &DurationEvent> = BTreeMap::new();
            for e in events {
                if let Some(prev) = last_end.get(&e.category) {
                    if prev.end_ns() > e.start_ns {
                        return Some((*tid, prev, e));
                    }
                }
                last_end.insert(e.category, e);
            }
        }
        None
    }
}

fn migrated(enter_cpu: u32, exit_cpu: u32) -> Option<u32> {
    (enter_cpu != exit_cpu).then_some(exit_cpu)
}

pub fn build_timeline(ingest: &Ingest, semantics: SchedSemantics) -> TimelineDoc {
    let mut doc = TimelineDoc {
        pid: ingest.threads.values().flatten().chain(&ingest.sched).map(|e| e.pid).next().unwrap_or(0),
        ..Default::default()
    };
    for it in &ingest.iterations {
        let (enter, exit) = (&it.token_enter, &it.token_exit);
        let label = match it.phase {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        };
        doc.tracks.entry(enter.tid).or_default().push(DurationEvent {
            name: format!("{label} #{} @cpu{}", it.index, enter.cpu),
            category: Category::Token,
            start_ns: enter.ts_ns,
            dur_ns: it.duration_ns(),
            args: EventArgs {
                cpu: enter.cpu,
                exit_cpu: migrated(enter.cpu, exit.cpu),
                iteration: Some(it.index),
                batch_size: Some(it.batch_size),
                ..Default::default()
            },
        });
    }
    for g in &ingest.graph_spans {
        let label = ingest.header.backend_label(&g.backend_guid).to_string();
        doc.tracks.entry(g.tid).or_default().push(DurationEvent {
            name: format!("{label} graph @cpu{}", g.enter.cpu),
            category: Category::Graph,
            start_ns: g.enter.ts_ns,
            dur_ns: g.exit.ts_ns - g.enter.ts_ns,
            args: EventArgs {
                cpu: g.enter.cpu,
                exit_cpu: migrated(g.enter.cpu, g.exit.cpu),
                iteration: g.iteration,
                backend: Some(label),
                guid: Some(g.backend_guid.clone()),
                ..Default::default()
            },
        });
    }
    for s in &ingest.spans {
        doc.tracks.entry(s.tid).or_default().push(DurationEvent {
            name: format!("{} {} @cpu{}", s.op_type, s.op_name, s.enter.cpu),
            category: Category::Op,
            start_ns: s.enter.ts_ns,
            dur_ns: s.elapsed_ns(),
            args: EventArgs {
                cpu: s.enter.cpu,
                exit_cpu: migrated(s.enter.cpu, s.exit.cpu),
                iteration: s.iteration,
                op_type: Some(s.op_type.to_string()),
                backend: Some(s.backend.label().to_string()),
                ..Default::default()
            },
        });
    }
    doc.sort_tracks();
    let (states, anomalies) = derive_thread_states(&ingest.sched, &ingest.header.inference_tids, semantics);
    doc.states = states;
    doc.anomalies = anomalies;
    doc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{
        Addr, Backend, GraphPayload, OpPayload, OpType, Payload, ProbeKind, RawEvent, SessionHeader, TokenPayload,
        TraceSession,
    };
    use crate::ingest::ingest;

    fn ev(kind: ProbeKind, ts: u64, tid: u32, cpu: u32, seq: u64, payload: Payload) -> RawEvent {
        RawEvent { kind, ts_ns: ts, pid: 9, tid, cpu, seq, payload }
    }

    #[test]
    fn empty_session_has_no_tracks() {
        let doc = build_timeline(&ingest(&TraceSession::default()).unwrap(), SchedSemantics::Compat);
        assert!(doc.tracks.is_empty() && doc.states.is_empty());
    }

    #[test]
    fn names_carry_cpu_and_backend_label() {
        let op = Payload::Op(OpPayload {
            op_addr: Addr(1),
            op_type: OpType::MulMat,
            op_name: "ffn_out-0".into(),
            backend: Backend::Cpu,
            dims: None,
            src_addrs: None,
            pmc: None,
            expert_ids: None,
        });
        let graph = Payload::Graph(GraphPayload { backend_guid: "00000000000000aa".into() });
        let tok = Payload::Token(TokenPayload { batch_size: 4 });
        let mut s = TraceSession::new(SessionHeader::default());
        s.header.backend_names.insert("00000000000000aa".into(), "CPU".into());
        s.events = vec![
            ev(ProbeKind::TokenEnter, 0, 5, 6, 0, tok.clone()),
            ev(ProbeKind::GraphEnter, 10, 5, 6, 1, graph.clone()),
            ev(ProbeKind::OpEnter, 20, 5, 6, 2, op.clone()),
            ev(ProbeKind::OpExit, 1520, 5, 7, 3, op),
            ev(ProbeKind::GraphExit, 1600, 5, 6, 4, graph),
            ev(ProbeKind::TokenExit, 1700, 5, 6, 5, tok),
        ];
        let doc = build_timeline(&ingest(&s).unwrap(), SchedSemantics::Compat);
        let names: Vec<&str> = doc.tracks[&5].iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, vec!["prefill #0 @cpu6", "CPU graph @cpu6", "MUL_MAT ffn_out-0 @cpu6"]);
        let op = &doc.tracks[&5][2];
        assert_eq!(op.dur_ns, 1500);
        assert_eq!(op.args.exit_cpu, Some(7));
        assert!(doc.find_overlap().is_none());
    }
}
