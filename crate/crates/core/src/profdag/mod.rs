//! Operator graph reconstruction for one iteration, with per-node metrics.

mod dot;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dot::{bucket, export_dot, export_json, palette_color, shape_for, DagDocument};

use crate::event::{Addr, Backend, OpType, PmcSpec, CYCLES, IDLE_BACKEND_CYCLES, L3D_CACHE_REFILL, MEM_ACCESS_WR};
use crate::ingest::{Ingest, OpSpan};
use crate::profstat;

#[derive(Debug, Error, PartialEq)]
pub enum DagError {
    #[error("operator structure was not recorded (Str flag off); no source addresses at seq {seq}")]
    DagUnavailable { seq: u64 },
    #[error("iteration {requested} does not exist ({available} iterations recorded)")]
    UnknownIteration { requested: usize, available: usize },
    #[error("metric {requested:?} not available; available: {}", available.join(", "))]
    MetricUnavailable { requested: String, available: Vec<String> },
    #[error("palette needs at least one color")]
    EmptyPalette,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpNode {
    pub addr: Addr,
    pub op_type: OpType,
    pub op_name: String,
    pub backend: Option<Backend>,
    pub dims: Option<[u64; 4]>,
    /// Source tensors in argument order, duplicates kept.
    pub srcs: Vec<Addr>,
    pub order: Option<usize>,
    pub elapsed_ns: Option<u64>,
    pub pmc_totals: Option<Vec<u64>>,
    pub is_constant: bool,
}

impl OpNode {
    pub fn constant(addr: Addr) -> Self {
        OpNode {
            addr,
            op_type: OpType::None,
            op_name: String::new(),
            backend: None,
            dims: None,
            srcs: Vec::new(),
            order: None,
            elapsed_ns: None,
            pmc_totals: None,
            is_constant: true,
        }
    }

    pub fn label(&self) -> String {
        match self.order {
            Some(order) if !self.is_constant => format!("{order}:{}", self.op_name),
            _ => self.addr.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfDag {
    pub iteration: usize,
    pub reference_tid: u32,
    pub nodes: BTreeMap<Addr, OpNode>,
    /// (src, consumer) to the number of times the consumer lists that src.
    #[serde(with = "edge_list")]
    pub edges: BTreeMap<(Addr, Addr), u32>,
    pub pmc_specs: Vec<PmcSpec>,
    pub warnings: Vec<String>,
}

impl ProfDag {
    /// Non-constant nodes in execution order.
    pub fn ordered(&self) -> Vec<&OpNode> {
        let mut ops: Vec<&OpNode> = self.nodes.values().filter(|n| !n.is_constant).collect();
        ops.sort_by_key(|n| n.order);
        ops
    }

    pub fn available_metrics(&self) -> Vec<String> {
        let mut out = vec!["elapsed".to_string()];
        let has = |name: &str| self.pmc_specs.iter().any(|s| s.name == name);
        let any_pmc = self.nodes.values().any(|n| n.pmc_totals.is_some());
        if any_pmc {
            if has(L3D_CACHE_REFILL) && has(MEM_ACCESS_WR) {
                out.push("bandwidth".into());
            }
            if has(L3D_CACHE_REFILL) {
                out.push("refills".into());
            }
            if has(CYCLES) && has(IDLE_BACKEND_CYCLES) {
                out.push("stalled".into());
            }
            for spec in &self.pmc_specs {
                if !out.contains(&spec.name) {
                    out.push(spec.name.clone());
                }
            }
        }
        out
    }

    /// Value of `metric` for every node that has it.
    pub fn metric_values(&self, metric: &str) -> Result<BTreeMap<Addr, f64>, DagError> {
        let available = self.available_metrics();
        if !available.iter().any(|m| m == metric) {
            return Err(DagError::MetricUnavailable { requested: metric.to_string(), available });
        }
        let mut out = BTreeMap::new();
        for node in self.nodes.values().filter(|n| !n.is_constant) {
            let value = match metric {
                "elapsed" => node.elapsed_ns.map(|e| e as f64),
                _ => node.pmc_totals.as_ref().and_then(|pmc| self.pmc_metric(metric, pmc, node.elapsed_ns?)),
            };
            if let Some(v) = value {
                out.insert(node.addr, v);
            }
        }
        Ok(out)
    }

    fn pmc_metric(&self, metric: &str, pmc: &[u64], elapsed_ns: u64) -> Option<f64> {
        match metric {
            "bandwidth" => {
                profstat::memory_traffic(pmc, &self.pmc_specs, elapsed_ns).ok().map(|t| t.bandwidth_bytes_per_s)
            }
            "refills" => self.pmc_specs.iter().position(|s| s.name == L3D_CACHE_REFILL).map(|i| pmc[i] as f64),
            "stalled" => profstat::stalled_ratio(pmc, &self.pmc_specs).ok().map(|s| s.ratio),
            name => self.pmc_specs.iter().position(|s| s.name == name).map(|i| pmc[i] as f64),
        }
    }

    /// Edge endpoints exist, the graph is acyclic, and every edge between two
    /// ops runs forward in execution order.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (src, dst) in self.edges.keys() {
            let (Some(s), Some(d)) = (self.nodes.get(src), self.nodes.get(dst)) else {
                return Err(format!("edge {src} -> {dst} has a missing endpoint"));
            };
            if d.is_constant {
                return Err(format!("constant node {dst} has an incoming edge"));
            }
            if let (Some(a), Some(b)) = (s.order, d.order) {
                if a >= b {
                    return Err(format!("edge {src} -> {dst} runs against execution order"));
                }
            }
        }
        let orders: BTreeSet<usize> = self.nodes.values().filter_map(|n| n.order).collect();
        let ops = self.nodes.values().filter(|n| !n.is_constant).count();
        if orders.len() != ops {
            return Err("execution orders are not unique".into());
        }
        Ok(())
    }
}

mod edge_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::event::Addr;

    pub fn serialize<S: Serializer>(edges: &BTreeMap<(Addr, Addr), u32>, s: S) -> Result<S::Ok, S::Error> {
        edges.iter().map(|((a, b), m)| (*a, *b, *m)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(Addr, Addr), u32>, D::Error> {
        let list = Vec::<(Addr, Addr, u32)>::deserialize(d)?;
        Ok(list.into_iter().map(|(a, b, m)| ((a, b), m)).collect())
    }
}

/// End-to-end time of one op: first enter to last exit across threads.
pub fn op_elapsed(spans: &[&OpSpan]) -> Option<u64> {
    let start = spans.iter().map(|s| s.enter.ts_ns).min()?;
    let end = spans.iter().map(|s| s.exit.ts_ns).max()?;
    Some(end - start)
}

/// Elementwise sum of per-thread deltas; `None` when no span carries counters.
pub fn pmc_sum(spans: &[&OpSpan]) -> Option<Vec<u64>> {
    let mut total: Option<Vec<u64>> = None;
    for delta in spans.iter().filter_map(|s| s.pmc_delta.as_ref()) {
        match total.as_mut() {
            None => total = Some(delta.clone()),
            Some(t) => t.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        }
    }
    total
}

/// Thread with the most ops in the iteration; ties go to the lowest tid.
pub fn reference_thread<'a>(spans: impl IntoIterator<Item = &'a OpSpan>) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in spans {
        *counts.entry(s.tid).or_default() += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(tid, _)| tid)
}

pub fn build_profdag(ingest: &Ingest, n_tar: usize) -> Result<ProfDag, DagError> {
    if n_tar >= ingest.iterations.len() {
        return Err(DagError::UnknownIteration { requested: n_tar, available: ingest.iterations.len() });
    }
    let spans: Vec<&OpSpan> = ingest.spans_in(n_tar).collect();
    let mut by_addr: BTreeMap<Addr, Vec<&OpSpan>> = BTreeMap::new();
    for s in &spans {
        by_addr.entry(s.op_addr).or_default().push(s);
    }
    let reference_tid = reference_thread(spans.iter().copied()).unwrap_or_default();
    let mut reference: Vec<&OpSpan> = spans.iter().copied().filter(|s| s.tid == reference_tid).collect();
    reference.sort_by_key(|s| (s.enter.ts_ns, s.enter.seq));

    let mut dag = ProfDag {
        iteration: n_tar,
        reference_tid,
        nodes: BTreeMap::new(),
        edges: BTreeMap::new(),
        pmc_specs: ingest.header.pmc_specs.clone(),
        warnings: Vec::new(),
    };
    let mut order = 0;
    for span in &reference {
        if dag.nodes.contains_key(&span.op_addr) {
            dag.warnings.push(format!("{} ({}) runs twice on the reference thread", span.op_name, span.op_addr));
            continue;
        }
        let srcs = span.src_addrs().ok_or(DagError::DagUnavailable { seq: span.enter.seq })?.to_vec();
        let all = &by_addr[&span.op_addr];
        dag.nodes.insert(
            span.op_addr,
            OpNode {
                addr: span.op_addr,
                op_type: span.op_type,
                op_name: span.op_name.clone(),
                backend: Some(span.backend),
                dims: span.dims(),
                srcs,
                order: Some(order),
                elapsed_ns: op_elapsed(all),
                pmc_totals: pmc_sum(all),
                is_constant: false,
            },
        );
        order += 1;
    }
    for (addr, group) in &by_addr {
        if !dag.nodes.contains_key(addr) {
            dag.warnings.push(format!(
                "{} ({addr}) ran on other threads but not on the reference thread {reference_tid}",
                group[0].op_name
            ));
        }
    }
    let consumers: Vec<(Addr, Vec<Addr>)> = dag.nodes.values().map(|n| (n.addr, n.srcs.clone())).collect();
    for (consumer, srcs) in consumers {
        for src in srcs {
            dag.nodes.entry(src).or_insert_with(|| OpNode::constant(src));
            *dag.edges.entry((src, consumer)).or_default() += 1;
        }
    }
    Ok(dag)
}
