//! Per-thread ordering, iteration segmentation and enter/exit pairing.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Addr, Backend, OpType, ProbeKind, RawEvent, SessionHeader, TraceSession};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("unbalanced probe at seq {seq}: {reason}")]
    UnbalancedProbe { seq: u64, reason: String },
    #[error("structural error at seq {seq}: {reason}")]
    Structural { seq: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationIndex {
    pub index: usize,
    pub phase: Phase,
    pub batch_size: u32,
    pub token_enter: RawEvent,
    pub token_exit: RawEvent,
}

impl IterationIndex {
    pub fn start_ns(&self) -> u64 {
        self.token_enter.ts_ns
    }

    pub fn end_ns(&self) -> u64 {
        self.token_exit.ts_ns
    }

    pub fn duration_ns(&self) -> u64 {
        self.end_ns() - self.start_ns()
    }

    pub fn contains(&self, ts_ns: u64) -> bool {
        (self.start_ns()..=self.end_ns()).contains(&ts_ns)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpSpan {
    pub op_addr: Addr,
    pub op_type: OpType,
    pub op_name: String,
    pub backend: Backend,
    pub tid: u32,
    pub enter: RawEvent,
    pub exit: RawEvent,
    /// `None` when the span lies outside every token span.
    pub iteration: Option<usize>,
    pub pmc_delta: Option<Vec<u64>>,
}

impl OpSpan {
    pub fn elapsed_ns(&self) -> u64 {
        self.exit.ts_ns - self.enter.ts_ns
    }

    pub fn dims(&self) -> Option<[u64; 4]> {
        self.enter.op().and_then(|op| op.dims)
    }

    pub fn src_addrs(&self) -> Option<&[Addr]> {
        self.enter.op().and_then(|op| op.src_addrs.as_deref())
    }

    pub fn expert_ids(&self) -> Option<&[u32]> {
        self.enter.op().and_then(|op| op.expert_ids.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSpan {
    pub tid: u32,
    pub backend_guid: String,
    pub enter: RawEvent,
    pub exit: RawEvent,
    pub iteration: Option<usize>,
}

/// Everything the analyzers need from one session.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingest {
    pub header: SessionHeader,
    /// Non-scheduler events by thread, ordered by (ts, seq).
    pub threads: BTreeMap<u32, Vec<RawEvent>>,
    /// Scheduler events ordered by (ts, seq).
    pub sched: Vec<RawEvent>,
    pub main_tid: Option<u32>,
    pub iterations: Vec<IterationIndex>,
    pub spans: Vec<OpSpan>,
    pub graph_spans: Vec<GraphSpan>,
    pub orphans: Vec<RawEvent>,
}

impl Ingest {
    pub fn spans_in(&self, iteration: usize) -> impl Iterator<Item = &OpSpan> {
        self.spans.iter().filter(move |s| s.iteration == Some(iteration))
    }

    pub fn decode_iterations(&self) -> impl Iterator<Item = &IterationIndex> {
        self.iterations.iter().filter(|it| it.phase == Phase::Decode)
    }

    /// Events that are neither op enters nor op exits.
    pub fn non_op_event_count(&self) -> usize {
        self.threads.values().flatten().filter(|e| !e.kind.is_op()).count() + self.sched.len()
    }
}

fn by_ts_seq(a: &RawEvent, b: &RawEvent) -> std::cmp::Ordering {
    (a.ts_ns, a.seq).cmp(&(b.ts_ns, b.seq))
}

/// Groups non-scheduler events by thread. Scheduler events describe other
/// tasks as well and are returned by [`sorted_sched`] instead.
pub fn group_and_sort(session: &TraceSession) -> BTreeMap<u32, Vec<RawEvent>> {
    let mut threads: BTreeMap<u32, Vec<RawEvent>> = BTreeMap::new();
    for e in session.events.iter().filter(|e| !e.kind.is_sched()) {
        threads.entry(e.tid).or_default().push(e.clone());
    }
    for events in threads.values_mut() {
        events.sort_by(by_ts_seq);
    }
    threads
}

pub fn sorted_sched(session: &TraceSession) -> Vec<RawEvent> {
    let mut sched: Vec<RawEvent> = session.events.iter().filter(|e| e.kind.is_sched()).cloned().collect();
    sched.sort_by(by_ts_seq);
    sched
}

/// Pairs token probes in time order. An enter left open at the end of the
/// trace is dropped: the recording stopped mid-token.
pub fn assign_iterations(session: &TraceSession) -> Result<Vec<IterationIndex>, IngestError> {
    let mut tokens: Vec<&RawEvent> = session.events.iter().filter(|e| e.kind.is_token()).collect();
    tokens.sort_by(|a, b| by_ts_seq(a, b));
    let mut iterations = Vec::new();
    let mut open: Option<&RawEvent> = None;
    for e in tokens {
        match (e.kind, open) {
            (ProbeKind::TokenEnter, None) => open = Some(e),
            (ProbeKind::TokenEnter, Some(prev)) => {
                return Err(IngestError::UnbalancedProbe {
                    seq: e.seq,
                    reason: format!("token enter while the one at seq {} is still open", prev.seq),
                })
            }
            (ProbeKind::TokenExit, None) => {
                return Err(IngestError::UnbalancedProbe {
                    seq: e.seq,
                    reason: "token exit without a token enter".into(),
                })
            }
            (_, Some(enter)) => {
                let batch_size = enter.token().map(|t| t.batch_size).unwrap_or(1);
                let index = iterations.len();
                let phase = if batch_size > 1 || index == 0 { Phase::Prefill } else { Phase::Decode };
                iterations.push(IterationIndex {
                    index,
                    phase,
                    batch_size,
                    token_enter: enter.clone(),
                    token_exit: e.clone(),
                });
                open = None;
            }
            _ => unreachable!("only token kinds are selected"),
        }
    }
    Ok(iterations)
}

/// Iteration whose token span contains `ts_ns`.
pub fn iteration_at(iterations: &[IterationIndex], ts_ns: u64) -> Option<usize> {
    let after = iterations.partition_point(|it| it.start_ns() <= ts_ns);
    let candidate = iterations.get(after.checked_sub(1)?)?;
    candidate.contains(ts_ns).then_some(candidate.index)
}

/// Sorted, deduplicated seqs present in a session; used to tell loss from
/// malformed emission.
#[derive(Debug, Clone)]
pub struct SeqIndex {
    seqs: Vec<u64>,
    lossless_transport: bool,
}

impl SeqIndex {
    pub fn new(session: &TraceSession) -> Self {
        let mut seqs: Vec<u64> = session.events.iter().map(|e| e.seq).collect();
        seqs.sort_unstable();
        seqs.dedup();
        SeqIndex { seqs, lossless_transport: session.header.flags.perf_buffer }
    }

    /// Whether any seq strictly between `a` and `b` is missing.
    pub fn gap_between(&self, a: u64, b: u64) -> bool {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if hi - lo <= 1 {
            return false;
        }
        let present = self.seqs.partition_point(|s| *s < hi) - self.seqs.partition_point(|s| *s <= lo);
        (present as u64) < hi - lo - 1
    }

    /// The ring buffer loses records without leaving gaps, so there any
    /// mismatch may be loss.
    fn loss_possible(&self, a: u64, b: u64) -> bool {
        !self.lossless_transport || self.gap_between(a, b)
    }
}

fn pmc_delta(enter: &RawEvent, exit: &RawEvent) -> Option<Vec<u64>> {
    let a = enter.op()?.pmc.as_ref()?;
    let b = exit.op()?.pmc.as_ref()?;
    (a.len() == b.len()).then(|| a.iter().zip(b).map(|(x, y)| y.saturating_sub(*x)).collect())
}

fn span_iteration(iterations: &[IterationIndex], enter: &RawEvent, exit: &RawEvent) -> Option<usize> {
    let i = iteration_at(iterations, enter.ts_ns)?;
    (iteration_at(iterations, exit.ts_ns) == Some(i)).then_some(i)
}

fn make_span(iterations: &[IterationIndex], enter: RawEvent, exit: RawEvent) -> OpSpan {
    let op = enter.op().expect("op event").clone();
    OpSpan {
        op_addr: op.op_addr,
        op_type: op.op_type,
        op_name: op.op_name,
        backend: op.backend,
        tid: enter.tid,
        pmc_delta: pmc_delta(&enter, &exit),
        iteration: span_iteration(iterations, &enter, &exit),
        enter,
        exit,
    }
}

/// Pairs each op enter with the next op exit on its thread. Unmatched events
/// are returned as orphans when loss can explain them; otherwise the
/// emission order is malformed and an error is returned.
pub fn pair_spans(
    threads: &BTreeMap<u32, Vec<RawEvent>>,
    iterations: &[IterationIndex],
    seqs: &SeqIndex,
) -> Result<(Vec<OpSpan>, Vec<RawEvent>), IngestError> {
    let mut spans = Vec::new();
    let mut orphans = Vec::new();
    for events in threads.values() {
        let mut pending: Option<&RawEvent> = None;
        for e in events.iter().filter(|e| e.kind.is_op()) {
            let addr = e.op().map(|op| op.op_addr);
            if e.kind == ProbeKind::OpEnter {
                if let Some(p) = pending.take() {
                    if !seqs.loss_possible(p.seq, e.seq) {
                        return Err(IngestError::Structural {
                            seq: e.seq,
                            reason: format!("op enter while the enter at seq {} is unmatched", p.seq),
                        });
                    }
                    orphans.push(p.clone());
                }
                pending = Some(e);
                continue;
            }
            match pending.take() {
                None => orphans.push(e.clone()),
                Some(p) if p.op().map(|op| op.op_addr) == addr => {
                    spans.push(make_span(iterations, p.clone(), e.clone()));
                }
                Some(p) => {
                    if !seqs.loss_possible(p.seq, e.seq) {
                        return Err(IngestError::Structural {
                            seq: e.seq,
                            reason: format!("op exit does not match the enter at seq {}", p.seq),
                        });
                    }
                    orphans.push(p.clone());
                    orphans.push(e.clone());
                }
            }
        }
        if let Some(p) = pending {
            orphans.push(p.clone());
        }
    }
    orphans.sort_by_key(|e| e.seq);
    Ok((spans, orphans))
}

fn pair_graphs(threads: &BTreeMap<u32, Vec<RawEvent>>, iterations: &[IterationIndex]) -> Vec<GraphSpan> {
    let mut out = Vec::new();
    for (tid, events) in threads {
        let mut pending: Option<&RawEvent> = None;
        for e in events.iter().filter(|e| e.kind.is_graph()) {
            let guid = e.graph().map(|g| g.backend_guid.clone()).unwrap_or_default();
            if e.kind == ProbeKind::GraphEnter {
                pending = Some(e);
            } else if let Some(p) = pending.take() {
                if p.graph().map(|g| &g.backend_guid) == Some(&guid) {
                    let iteration =
                        iteration_at(iterations, p.ts_ns).filter(|i| iteration_at(iterations, e.ts_ns) == Some(*i));
                    out.push(GraphSpan { tid: *tid, backend_guid: guid, enter: p.clone(), exit: e.clone(), iteration });
                }
            }
        }
    }
    out.sort_by_key(|g| (g.enter.ts_ns, g.enter.seq));
    out
}

/// Runs the whole ingest pipeline. Pure: equal sessions give equal output.
pub fn ingest(session: &TraceSession) -> Result<Ingest, IngestError> {
    let threads = group_and_sort(session);
    let iterations = assign_iterations(session)?;
    let seqs = SeqIndex::new(session);
    let (spans, orphans) = pair_spans(&threads, &iterations, &seqs)?;
    let graph_spans = pair_graphs(&threads, &iterations);
    let main_tid = iterations.first().map(|it| it.token_enter.tid);
    Ok(Ingest {
        header: session.header.clone(),
        sched: sorted_sched(session),
        threads,
        main_tid,
        iterations,
        spans,
        graph_spans,
        orphans,
    })
}
