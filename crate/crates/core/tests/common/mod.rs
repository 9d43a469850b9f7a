#![allow(dead_code)]

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use profinfer::event::{Addr, Backend, ProbeFlags, ProbeKind, TraceSession};
use profinfer::proftime::TimelineDoc;
use profinfer::synth::{Interference, ModelSpec, Offload, RunSpec};

pub fn preset(i: usize) -> ModelSpec {
    ModelSpec::preset(ModelSpec::PRESETS[i % ModelSpec::PRESETS.len()]).unwrap()
}

/// Small random workload for property tests.
pub fn workload() -> impl Strategy<Value = (ModelSpec, RunSpec)> {
    (0usize..4, 1u32..6, 0u32..4, 1u32..5, any::<u64>(), any::<(bool, bool, bool)>(), 1u32..3).prop_map(
        |(m, prompt, gen, threads, seed, (str, pmc, perf), layers)| {
            let model = ModelSpec { layers, ..preset(m) };
            let run = RunSpec {
                prompt_len: prompt,
                gen_len: gen,
                nthreads: threads,
                seed,
                flags: ProbeFlags { str, pmc, perf_buffer: perf },
                ..RunSpec::default()
            };
            (model, run)
        },
    )
}

/// Random lossless workload with structure on, drawn for oracle checks.
pub fn random_config(rng: &mut ChaCha8Rng) -> (ModelSpec, RunSpec) {
    let layers = rng.gen_range(1..=3);
    let model = ModelSpec { layers, ..preset(rng.gen_range(0..4)) };
    let nthreads = rng.gen_range(1..=6);
    let gen_len = rng.gen_range(0..=5);
    let mut run = RunSpec {
        prompt_len: rng.gen_range(1..=24),
        gen_len,
        nthreads,
        seed: rng.gen(),
        flags: ProbeFlags { str: true, pmc: rng.gen_bool(0.7), perf_buffer: rng.gen_bool(0.5) },
        sched_events: rng.gen_bool(0.8),
        ..RunSpec::default()
    };
    if rng.gen_bool(0.25) {
        let backend = if rng.gen_bool(0.5) { Backend::OpenClGpu } else { Backend::Npu };
        let first = rng.gen_range(0..layers);
        run.offload = Some(Offload { backend, first_layer: first, last_layer: rng.gen_range(first..layers) });
    }
    if nthreads > 1 && rng.gen_bool(0.25) {
        let cpu = run.base_cpu + rng.gen_range(1..nthreads);
        let iterations = (0..=gen_len as usize).filter(|_| rng.gen_bool(0.4)).collect();
        run.interference = Some(Interference { cpu, iterations });
    }
    (model, run)
}

type Readings = BTreeMap<u32, Vec<(u64, Option<Vec<u64>>)>>;

/// End-to-end time and counter totals of one op in one iteration, scanned
/// straight from the raw events: min enter, max exit, and per thread the
/// sum of exit-minus-enter readings of the k-th enter and k-th exit.
pub fn naive_op(session: &TraceSession, window: (u64, u64), addr: Addr) -> (u64, Option<Vec<u64>>) {
    let inside = |ts: u64| ts >= window.0 && ts <= window.1;
    let mut enters = Readings::new();
    let mut exits = Readings::new();
    for e in &session.events {
        let Some(op) = e.op() else { continue };
        if op.op_addr != addr || !inside(e.ts_ns) {
            continue;
        }
        let side = if e.kind == ProbeKind::OpEnter { &mut enters } else { &mut exits };
        side.entry(e.tid).or_default().push((e.ts_ns, op.pmc.clone()));
    }
    let start = enters.values().flatten().map(|x| x.0).min().unwrap();
    let end = exits.values().flatten().map(|x| x.0).max().unwrap();
    let mut total: Option<Vec<u64>> = None;
    for (tid, ins) in &enters {
        for (a, b) in ins.iter().zip(&exits[tid]) {
            if let (Some(pa), Some(pb)) = (&a.1, &b.1) {
                let t = total.get_or_insert_with(|| vec![0; pa.len()]);
                for i in 0..pa.len() {
                    t[i] += pb[i] - pa[i];
                }
            }
        }
    }
    (end - start, total)
}

/// Problems with a timeline: negative or overlapping spans and state
/// intervals that do not tile.
pub fn timeline_problems(doc: &TimelineDoc) -> Vec<String> {
    let mut out = Vec::new();
    if let Some((tid, a, b)) = doc.find_overlap() {
        out.push(format!("thread {tid}: {} overlaps {}", a.name, b.name));
    }
    for (tid, intervals) in &doc.states {
        for i in intervals {
            if i.end_ns <= i.start_ns {
                out.push(format!("thread {tid}: empty state interval at {}", i.start_ns));
            }
        }
        for w in intervals.windows(2) {
            if w[0].end_ns != w[1].start_ns {
                out.push(format!("thread {tid}: states do not tile at {}", w[0].end_ns));
            }
        }
    }
    out
}

/// Op record bytes laid out by hand from the documented offsets.
#[allow(clippy::too_many_arguments)]
pub fn manual_op_record(
    kind: u8,
    ts: u64,
    ids: (u32, u32, u32),
    op: (u64, u32, u8, &str),
    dims: [u64; 4],
    srcs: &[u64],
    pmc: &[u64],
    experts: &[u32],
) -> Vec<u8> {
    let mut b = vec![0u8; 308];
    b[0] = kind;
    b[1..9].copy_from_slice(&ts.to_le_bytes());
    b[9..13].copy_from_slice(&ids.0.to_le_bytes());
    b[13..17].copy_from_slice(&ids.1.to_le_bytes());
    b[17..21].copy_from_slice(&ids.2.to_le_bytes());
    let p = 22;
    b[p..p + 8].copy_from_slice(&op.0.to_le_bytes());
    b[p + 8..p + 12].copy_from_slice(&op.1.to_le_bytes());
    b[p + 12] = op.2;
    b[p + 13..p + 13 + op.3.len()].copy_from_slice(op.3.as_bytes());
    for (i, d) in dims.iter().enumerate() {
        b[p + 77 + 8 * i..p + 85 + 8 * i].copy_from_slice(&d.to_le_bytes());
    }
    for (i, s) in srcs.iter().enumerate() {
        b[p + 109 + 8 * i..p + 117 + 8 * i].copy_from_slice(&s.to_le_bytes());
    }
    for (i, v) in pmc.iter().enumerate() {
        b[p + 189 + 8 * i..p + 197 + 8 * i].copy_from_slice(&v.to_le_bytes());
    }
    b[p + 253] = experts.len() as u8;
    for (i, e) in experts.iter().enumerate() {
        b[p + 254 + 4 * i..p + 258 + 4 * i].copy_from_slice(&e.to_le_bytes());
    }
    b
}

/// Replays `session` through the wire encoder and the consumer.
pub fn through_wire(session: &TraceSession) -> TraceSession {
    use profinfer::tracer::{Consumer, RecordingControlMap};
    use profinfer::wire::WireStream;

    let mut bytes = Vec::new();
    profinfer::synth::write_wire(session, &mut bytes).unwrap();
    let mut source = WireStream::new(&bytes[..]).unwrap();
    let mut header = session.header.clone();
    header.dropped_events = 0;
    let mut consumer = Consumer::new(header);
    consumer.poll_and_decode(&mut source, &mut RecordingControlMap::default()).unwrap();
    consumer.finish()
}
