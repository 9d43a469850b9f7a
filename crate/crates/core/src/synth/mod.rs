//! Seeded synthetic inference workloads with exact ground truth.
//!
//! A generated session looks like a recording of a llama.cpp-style run: one
//! main thread drives token and graph probes, CPU ops fan out to worker
//! threads, and every op carries the structure, counters and expert ids the
//! probe flags ask for. The [`GroundTruth`] holds what the analyses must
//! recover from it.

mod cost;
mod model;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cost::CostModel;
pub use model::{build_graph, ExtraOps, Graph, ModelSpec, OpTemplate, SrcRef, Variant};

use crate::event::{
    Addr, Backend, GraphPayload, MoeInfo, OpPayload, OpType, Payload, PmcSpec, ProbeFlags, ProbeKind, RawEvent,
    SchedPayload, SessionHeader, TokenPayload, TraceSession,
};
use crate::profdag::{OpNode, ProfDag};
use crate::wire::{encode_lost, StreamHeader, WireError, WireRecord};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid workload: {0}")]
    Spec(String),
    #[error("workload file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Layers whose ops run on an accelerator, driven by the main thread alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Offload {
    pub backend: Backend,
    pub first_layer: u32,
    pub last_layer: u32,
}

/// A foreign task that holds `cpu` for the graph phase of the listed
/// iterations. The worker pinned there stays runnable and skips those ops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interference {
    pub cpu: u32,
    pub iterations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub prompt_len: u32,
    /// Number of decode iterations after the prefill.
    pub gen_len: u32,
    pub nthreads: u32,
    pub flags: ProbeFlags,
    pub cost: CostModel,
    /// Probability that an op event is lost in transport.
    pub drop_rate: f64,
    /// Probability that an expert slot reuses an expert of the previous step.
    pub expert_reuse: f64,
    pub interference: Option<Interference>,
    pub sched_events: bool,
    pub offload: Option<Offload>,
    pub seed: u64,
    pub pid: u32,
    pub base_tid: u32,
    pub base_cpu: u32,
    pub start_ns: u64,
    pub qos_target_tps: f64,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            prompt_len: 8,
            gen_len: 16,
            nthreads: 4,
            flags: ProbeFlags::ALL_ON,
            cost: CostModel::default(),
            drop_rate: 0.0,
            expert_reuse: 0.5,
            interference: None,
            sched_events: true,
            offload: None,
            seed: 0,
            pid: 4242,
            base_tid: 4300,
            base_cpu: 4,
            start_ns: 1_000_000_000,
            qos_target_tps: 5.0,
        }
    }
}

impl RunSpec {
    pub fn validate(&self, model: &ModelSpec) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.prompt_len == 0 {
            return bad("prompt_len must be at least 1".into());
        }
        if self.nthreads == 0 || self.nthreads > 64 {
            return bad(format!("nthreads {} is outside 1..=64", self.nthreads));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return bad(format!("drop_rate {} is outside [0, 1)", self.drop_rate));
        }
        if !(0.0..=1.0).contains(&self.expert_reuse) {
            return bad(format!("expert_reuse {} is outside [0, 1]", self.expert_reuse));
        }
        if let Some(o) = self.offload {
            if o.backend == Backend::Cpu || o.first_layer > o.last_layer || o.last_layer >= model.layers {
                return bad(format!("offload must name an accelerator and layers within 0..{}", model.layers));
            }
        }
        if let Some(i) = &self.interference {
            let workers = (1..self.nthreads).map(|j| self.base_cpu + j).collect::<Vec<_>>();
            if !workers.contains(&i.cpu) {
                return bad(format!("interference cpu {} runs no worker (worker cpus {workers:?})", i.cpu));
            }
        }
        Ok(())
    }

    pub fn tids(&self) -> Vec<u32> {
        (0..self.nthreads).map(|j| self.base_tid + j).collect()
    }

    fn foreign_tid(&self) -> u32 {
        self.base_tid + 1000
    }
}

/// On-disk workload description: a preset name or a full model, plus run
/// settings.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadFile {
    pub preset: Option<String>,
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub run: RunSpec,
}

impl WorkloadFile {
    pub fn parse(text: &str) -> Result<(ModelSpec, RunSpec), SynthError> {
        let file: WorkloadFile = toml::from_str(text)?;
        let model = match (file.model, file.preset) {
            (Some(m), None) => m,
            (None, Some(p)) => ModelSpec::preset(&p).ok_or_else(|| unknown_preset(&p))?,
            (None, None) => return Err(SynthError::Spec("workload names neither a preset nor a [model]".into())),
            (Some(_), Some(_)) => return Err(SynthError::Spec("workload names both a preset and a [model]".into())),
        };
        Ok((model, file.run))
    }
}

fn unknown_preset(name: &str) -> SynthError {
    SynthError::Spec(format!("unknown model {name:?}; presets: {}", ModelSpec::PRESETS.join(", ")))
}

/// Resolves `--model`: a preset name, or a path to a workload TOML file.
pub fn resolve_workload(name_or_path: &str) -> Result<(ModelSpec, Option<RunSpec>), SynthError> {
    if let Some(m) = ModelSpec::preset(name_or_path) {
        return Ok((m, None));
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(unknown_preset(name_or_path));
    }
    let (m, r) = WorkloadFile::parse(&std::fs::read_to_string(path)?)?;
    Ok((m, Some(r)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertStep {
    pub iteration: usize,
    pub layer: u32,
    pub expert_ids: Vec<u32>,
    /// Summed reuse distance over decode steps; `None` for the prefill.
    pub total_distance: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dags: Vec<ProfDag>,
    pub token_ns: Vec<u64>,
    pub op_sum_ns: Vec<u64>,
    /// Per-iteration time spent outside ops: iteration overhead plus gaps.
    pub overhead_ns: Vec<u64>,
    pub expert_steps: Vec<ExpertStep>,
    /// Seqs removed by the drop model, in the numbering before removal.
    pub dropped_seqs: Vec<u64>,
    pub emitted_events: usize,
}

impl GroundTruth {
    pub fn ttft_ns(&self) -> u64 {
        self.token_ns[0]
    }

    pub fn tpot_ns(&self) -> &[u64] {
        &self.token_ns[1..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub session: TraceSession,
    pub truth: GroundTruth,
}

pub fn backend_guid(backend: Backend) -> String {
    format!("{:016x}", 0x6767_6d6c_0000_0000u64 | (backend.code() as u64 + 1))
}

const NPMC: usize = 5;

struct Emitter {
    pid: u32,
    events: Vec<RawEvent>,
}

impl Emitter {
    fn push(&mut self, kind: ProbeKind, ts_ns: u64, tid: u32, cpu: u32, payload: Payload) {
        self.events.push(RawEvent { kind, ts_ns, pid: self.pid, tid, cpu, seq: 0, payload });
    }

    fn switch(&mut self, ts: u64, cpu: u32, prev_tid: u32, next_tid: u32, prev_state: i64) {
        let payload = Payload::Sched(SchedPayload::Switch { prev_tid, next_tid, prev_state });
        self.push(ProbeKind::SchedSwitch, ts, prev_tid, cpu, payload);
    }

    fn wakeup(&mut self, ts: u64, waker: u32, cpu: u32, wakee_tid: u32) {
        self.push(ProbeKind::SchedWakeup, ts, waker, cpu, Payload::Sched(SchedPayload::Wakeup { wakee_tid }));
    }
}

fn pick_experts(rng: &mut ChaCha8Rng, total: u32, k: u32, prev: &[u32], reuse: f64) -> Vec<u32> {
    let mut chosen: Vec<u32> = Vec::with_capacity(k as usize);
    for _ in 0..k {
        let reusable: Vec<u32> = prev.iter().copied().filter(|e| !chosen.contains(e)).collect();
        let pick = if !reusable.is_empty() && rng.gen_bool(reuse) {
            *reusable.choose(rng).expect("non-empty")
        } else {
            let fresh: Vec<u32> = (0..total).filter(|e| !chosen.contains(e)).collect();
            *fresh.choose(rng).expect("k <= total")
        };
        chosen.push(pick);
    }
    chosen
}

/// Generates a session and its ground truth. Equal inputs give equal output.
pub fn generate(model: &ModelSpec, run: &RunSpec) -> Result<Generated, SynthError> {
    model.validate()?;
    run.validate(model)?;
    let cost = &run.cost;
    let flags = run.flags;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let tids = run.tids();
    let main = tids[0];
    let cpu_of = |j: usize| run.base_cpu + j as u32;
    let pmc_specs = if flags.pmc { PmcSpec::canonical() } else { Vec::new() };

    let mut backends = BTreeSet::from([Backend::Cpu]);
    if let Some(o) = run.offload {
        backends.insert(o.backend);
    }
    let header = SessionHeader {
        flags,
        pmc_specs: pmc_specs.clone(),
        inference_tids: tids.iter().copied().collect(),
        qos_target_tps: run.qos_target_tps,
        nthreads: run.nthreads,
        backend_names: backends.iter().map(|b| (backend_guid(*b), b.label().to_string())).collect(),
        moe: model.experts().map(|(experts, k)| MoeInfo { experts, experts_per_token: k }),
        dropped_events: 0,
    };

    let mut em = Emitter { pid: run.pid, events: Vec::new() };
    let mut counters: Vec<[u64; NPMC]> =
        tids.iter().map(|_| std::array::from_fn(|_| rng.gen_range(0..1_000_000))).collect();
    let mut truth = GroundTruth {
        dags: Vec::new(),
        token_ns: Vec::new(),
        op_sum_ns: Vec::new(),
        overhead_ns: Vec::new(),
        expert_steps: Vec::new(),
        dropped_seqs: Vec::new(),
        emitted_events: 0,
    };
    let mut prev_experts: Vec<Vec<u32>> = vec![Vec::new(); model.layers as usize];
    let mut last_seen: Vec<BTreeMap<u32, u64>> = vec![BTreeMap::new(); model.layers as usize];

    let mut cursor = run.start_ns;
    if run.sched_events {
        em.switch(cursor, cpu_of(0), 0, main, 0);
    }
    let backend_of = |op: &OpTemplate| match (run.offload, op.layer) {
        (Some(o), Some(l)) if (o.first_layer..=o.last_layer).contains(&l) => o.backend,
        _ => Backend::Cpu,
    };

    for it in 0..=run.gen_len as usize {
        let (t, kv) = if it == 0 {
            (run.prompt_len as u64, run.prompt_len as u64)
        } else {
            (1, (run.prompt_len as usize + it) as u64)
        };
        let n_kv = cost.padded_kv(kv);
        let graph = build_graph(model, t, n_kv);
        let token = Payload::Token(TokenPayload { batch_size: t as u32 });
        let busy: BTreeSet<usize> = match &run.interference {
            Some(i) if i.iterations.contains(&it) => (1..tids.len()).filter(|j| cpu_of(*j) == i.cpu).collect(),
            _ => BTreeSet::new(),
        };

        let mut layer_experts: Vec<(Vec<u32>, u64)> = Vec::new();
        if let Some((total, k)) = model.experts() {
            for l in 0..model.layers as usize {
                let ids = pick_experts(&mut rng, total, k, &prev_experts[l], run.expert_reuse);
                let distance = if it == 0 {
                    None
                } else {
                    let row = (it - 1) as u64;
                    let d = ids.iter().map(|e| last_seen[l].get(e).map_or(row + 1, |p| row - p)).sum();
                    for e in &ids {
                        last_seen[l].insert(*e, row);
                    }
                    Some(d)
                };
                truth.expert_steps.push(ExpertStep {
                    iteration: it,
                    layer: l as u32,
                    expert_ids: ids.clone(),
                    total_distance: distance,
                });
                prev_experts[l] = ids.clone();
                layer_experts.push((ids, distance.unwrap_or(0)));
            }
        }

        let t0 = cursor;
        em.push(ProbeKind::TokenEnter, t0, main, cpu_of(0), token.clone());
        let pre = cost.iteration_overhead_ns / 2;
        let post = cost.iteration_overhead_ns - pre;
        let g0 = t0 + pre;
        if run.sched_events {
            for (j, &tid) in tids.iter().enumerate().skip(1) {
                em.wakeup(t0, main, cpu_of(0), tid);
                if busy.contains(&j) {
                    em.switch(g0, cpu_of(j), 0, run.foreign_tid(), 0);
                } else {
                    em.switch(g0, cpu_of(j), 0, tid, 0);
                }
            }
        }

        let mut dag = ProfDag {
            iteration: it,
            reference_tid: main,
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
            pmc_specs: pmc_specs.clone(),
            warnings: Vec::new(),
        };
        cursor = g0;
        let mut current: Option<Backend> = None;
        let mut op_sum = 0;
        for (i, op) in graph.ops.iter().enumerate() {
            let backend = backend_of(op);
            if current != Some(backend) {
                if let Some(prev) = current {
                    let g = Payload::Graph(GraphPayload { backend_guid: backend_guid(prev) });
                    em.push(ProbeKind::GraphExit, cursor, main, cpu_of(0), g);
                }
                let g = Payload::Graph(GraphPayload { backend_guid: backend_guid(backend) });
                em.push(ProbeKind::GraphEnter, cursor, main, cpu_of(0), g);
                current = Some(backend);
            }
            let experts = match (op.op_type, op.layer) {
                (OpType::MulMatId, Some(l)) => layer_experts.get(l as usize),
                _ => None,
            };
            let (total_distance, k) = match experts {
                Some((_, d)) => (*d, model.experts().map_or(0, |e| e.1 as u64)),
                None => (0, 0),
            };
            let c = cost.op_cost(op, n_kv, total_distance, k);
            let s = cursor;
            op_sum += c;

            let mut threads: Vec<usize> = vec![0];
            if backend == Backend::Cpu {
                threads.extend((1..tids.len()).filter(|j| !busy.contains(j)));
            }
            let jmax = cost.worker_jitter_ns.min((c - 1) / 4);
            let with_pmc = flags.pmc && backend == Backend::Cpu;
            let n = threads.len() as u64;
            let totals = [
                cost.bytes_read(op) / 64,
                cost.bytes_written(op) / 16,
                if it == 0 { op.weight_bytes * cost.bytes_per_weight / 4096 } else { 0 },
            ];
            let src_addrs: Vec<Addr> = op.srcs.iter().map(|s| Graph::addr_of(*s)).collect();
            let mut pmc_total = [0u64; NPMC];
            for (r, &j) in threads.iter().enumerate() {
                let (start, end) =
                    if j == 0 { (s, s + c) } else { (s + rng.gen_range(0..=jmax), s + c - rng.gen_range(0..=jmax)) };
                let payload = |pmc: Option<Vec<u64>>| {
                    Payload::Op(OpPayload {
                        op_addr: Graph::op_addr(i),
                        op_type: op.op_type,
                        op_name: op.name.clone(),
                        backend,
                        dims: flags.str.then_some(op.dims),
                        src_addrs: flags.str.then(|| src_addrs.clone()),
                        pmc,
                        expert_ids: experts.map(|(ids, _)| ids.clone()),
                    })
                };
                let before = counters[j];
                let (enter_pmc, exit_pmc) = if with_pmc {
                    let share = |total: u64| total / n + if r == 0 { total % n } else { 0 };
                    let cycles = (end - start) * cost.cycles_per_ns;
                    let delta =
                        [share(totals[0]), share(totals[1]), share(totals[2]), cycles, cost.idle_cycles(op, cycles, n)];
                    for (acc, (cnt, d)) in pmc_total.iter_mut().zip(counters[j].iter_mut().zip(delta)) {
                        *cnt += d;
                        *acc += d;
                    }
                    (Some(before.to_vec()), Some(counters[j].to_vec()))
                } else {
                    (None, None)
                };
                em.push(ProbeKind::OpEnter, start, tids[j], cpu_of(j), payload(enter_pmc));
                em.push(ProbeKind::OpExit, end, tids[j], cpu_of(j), payload(exit_pmc));
            }

            let addr = Graph::op_addr(i);
            for src in &src_addrs {
                dag.nodes.entry(*src).or_insert_with(|| OpNode::constant(*src));
                *dag.edges.entry((*src, addr)).or_default() += 1;
            }
            dag.nodes.insert(
                addr,
                OpNode {
                    addr,
                    op_type: op.op_type,
                    op_name: op.name.clone(),
                    backend: Some(backend),
                    dims: flags.str.then_some(op.dims),
                    srcs: src_addrs,
                    order: Some(i),
                    elapsed_ns: Some(c),
                    pmc_totals: with_pmc.then(|| pmc_total.to_vec()),
                    is_constant: false,
                },
            );
            cursor = s + c + cost.op_gap_ns;
        }
        let g1 = cursor;
        if let Some(prev) = current {
            let g = Payload::Graph(GraphPayload { backend_guid: backend_guid(prev) });
            em.push(ProbeKind::GraphExit, g1, main, cpu_of(0), g);
        }
        let t1 = g1 + post;
        if run.sched_events {
            for (j, &tid) in tids.iter().enumerate().skip(1) {
                if busy.contains(&j) {
                    em.switch(g1, cpu_of(j), run.foreign_tid(), tid, 0);
                    em.switch(t1, cpu_of(j), tid, 0, 0);
                } else {
                    em.switch(g1, cpu_of(j), tid, 0, 0);
                }
            }
        }
        em.push(ProbeKind::TokenExit, t1, main, cpu_of(0), token);

        truth.token_ns.push(t1 - t0);
        truth.op_sum_ns.push(op_sum);
        truth.overhead_ns.push(t1 - t0 - op_sum);
        truth.dags.push(dag);
        cursor = t1 + cost.inter_iteration_ns;
    }
    if run.sched_events {
        em.switch(cursor, cpu_of(0), main, 0, 0);
    }

    let mut events = em.events;
    events.sort_by_key(|e| e.ts_ns);
    for (seq, e) in events.iter_mut().enumerate() {
        e.seq = seq as u64;
    }
    truth.emitted_events = events.len();

    let mut session = TraceSession::new(header);
    if run.drop_rate > 0.0 {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x0d20_9ed5_eed5);
        events.retain(|e| {
            let drop = e.kind.is_op() && drop_rng.gen_bool(run.drop_rate);
            if drop {
                truth.dropped_seqs.push(e.seq);
            }
            !drop
        });
        if flags.perf_buffer {
            session.header.dropped_events = truth.dropped_seqs.len() as u64;
        } else {
            // the ring buffer reports nothing, so the consumer numbers what it gets
            for (seq, e) in events.iter_mut().enumerate() {
                e.seq = seq as u64;
            }
        }
    }
    session.events = events;
    Ok(Generated { session, truth })
}

/// Writes `session` as a recorded kernel stream: a stream header, then one
/// record per event, with a lost marker wherever seqs skip (perf buffer only).
pub fn write_wire<W: Write>(session: &TraceSession, mut out: W) -> Result<(), SynthError> {
    out.write_all(&StreamHeader::for_session(&session.header).encode())?;
    let mut events: Vec<&RawEvent> = session.events.iter().collect();
    events.sort_by_key(|e| e.seq);
    let mut next = 0;
    for e in events {
        if e.seq > next && session.header.flags.perf_buffer {
            out.write_all(&encode_lost(e.seq - next))?;
        }
        out.write_all(&WireRecord::from_event(e)?.encode())?;
        next = e.seq + 1;
    }
    out.flush()?;
    Ok(())
}
