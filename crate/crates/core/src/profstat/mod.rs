//! Statistics across tokens, per operator type and across experts.

mod export;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use export::{
    experts_plot, matmul_plot, tokens_plot, write_expert_density_csv, write_experts_csv, write_matmuls_csv,
    write_ops_csv, write_tokens_csv, PlotSeries, PlotSpec,
};

use crate::event::{Addr, OpType, PmcSpec, PmcUnit, CYCLES, IDLE_BACKEND_CYCLES, L3D_CACHE_REFILL, MEM_ACCESS_WR};
use crate::ingest::{Ingest, OpSpan, Phase};
use crate::profdag::{op_elapsed, pmc_sum};

pub const DEFAULT_PATTERNS: [&str; 2] = ["kq", "kqv"];

#[derive(Debug, Error, PartialEq)]
pub enum StatError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate fit: all x values are equal")]
    DegenerateFit,
    #[error("counter {0:?} was not recorded")]
    MissingCounter(String),
    #[error("op {requested:?} not found; gated ops: {}", available.join(", "))]
    OpNotFound { requested: String, available: Vec<String> },
    #[error("{0}")]
    Invalid(String),
}

/// One op of one iteration, merged across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct OpAggregate {
    pub addr: Addr,
    pub op_type: OpType,
    pub op_name: String,
    pub dims: Option<[u64; 4]>,
    pub srcs: Vec<Addr>,
    pub expert_ids: Option<Vec<u32>>,
    pub elapsed_ns: u64,
    pub pmc_totals: Option<Vec<u64>>,
    pub first_enter_ns: u64,
}

/// Ops of one iteration in first-enter order.
pub fn iteration_ops(ingest: &Ingest, iteration: usize) -> Vec<OpAggregate> {
    let mut by_addr: BTreeMap<Addr, Vec<&OpSpan>> = BTreeMap::new();
    for s in ingest.spans_in(iteration) {
        by_addr.entry(s.op_addr).or_default().push(s);
    }
    let mut out: Vec<OpAggregate> = by_addr
        .into_iter()
        .map(|(addr, spans)| {
            let first = spans.iter().min_by_key(|s| (s.enter.ts_ns, s.enter.seq)).unwrap();
            OpAggregate {
                addr,
                op_type: first.op_type,
                op_name: first.op_name.clone(),
                dims: spans.iter().find_map(|s| s.dims()),
                srcs: spans.iter().find_map(|s| s.src_addrs()).map(<[Addr]>::to_vec).unwrap_or_default(),
                expert_ids: spans.iter().find_map(|s| s.expert_ids()).map(<[u32]>::to_vec),
                elapsed_ns: op_elapsed(&spans).unwrap_or(0),
                pmc_totals: pmc_sum(&spans),
                first_enter_ns: first.enter.ts_ns,
            }
        })
        .collect();
    out.sort_by_key(|o| (o.first_enter_ns, o.addr));
    out
}

/// Index of the longest pattern contained in `name`, ignoring case.
pub fn classify(name: &str, patterns: &[String]) -> Option<usize> {
    let name = name.to_lowercase();
    patterns
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_empty() && name.contains(&p.to_lowercase()))
        .max_by_key(|(i, p)| (p.len(), std::cmp::Reverse(*i)))
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub iteration: usize,
    pub phase: Phase,
    pub duration_ns: u64,
    /// Sum of every op's end-to-end time in the iteration.
    pub op_sum_ns: u64,
    /// Per pattern, sum of matching ops' end-to-end time.
    pub pattern_ns: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSeries {
    pub patterns: Vec<String>,
    pub ttft_ns: Option<u64>,
    pub tpot_ns: Vec<u64>,
    pub rows: Vec<TokenRow>,
}

pub fn token_series(ingest: &Ingest, patterns: &[String]) -> TokenSeries {
    let mut rows = Vec::new();
    for it in &ingest.iterations {
        let mut pattern_ns = vec![0; patterns.len()];
        let mut op_sum_ns = 0;
        for op in iteration_ops(ingest, it.index) {
            op_sum_ns += op.elapsed_ns;
            if let Some(i) = classify(&op.op_name, patterns) {
                pattern_ns[i] += op.elapsed_ns;
            }
        }
        rows.push(TokenRow {
            iteration: it.index,
            phase: it.phase,
            duration_ns: it.duration_ns(),
            op_sum_ns,
            pattern_ns,
        });
    }
    TokenSeries {
        patterns: patterns.to_vec(),
        ttft_ns: ingest.iterations.first().filter(|it| it.phase == Phase::Prefill).map(|it| it.duration_ns()),
        tpot_ns: ingest.decode_iterations().map(|it| it.duration_ns()).collect(),
        rows,
    }
}

/// M·N·K·H for A(M,K) × B(K,N) broadcast over H heads.
pub fn matmul_complexity(m: u64, n: u64, k: u64, h: u64) -> Result<u64, StatError> {
    if [m, n, k, h].contains(&0) {
        return Err(StatError::Domain(format!("zero extent in M={m} N={n} K={k} H={h}")));
    }
    m.checked_mul(n)
        .and_then(|v| v.checked_mul(k))
        .and_then(|v| v.checked_mul(h))
        .ok_or_else(|| StatError::Domain("complexity overflows u64".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatMulSample {
    pub iteration: usize,
    pub phase: Phase,
    pub op_name: String,
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub h: u64,
    pub complexity: u64,
    pub elapsed_ns: u64,
    pub pmc: Option<Vec<u64>>,
    pub bandwidth_bytes_per_s: Option<f64>,
    pub stalled_ratio: Option<f64>,
}

/// MUL_MAT samples of one iteration, or of all iterations when `iteration`
/// is `None`. Ops whose shared dimension cannot be recovered (second source
/// untraced) are skipped.
pub fn matmul_samples(ingest: &Ingest, iteration: Option<usize>) -> Vec<MatMulSample> {
    let specs = &ingest.header.pmc_specs;
    let mut out = Vec::new();
    for it in ingest.iterations.iter().filter(|it| iteration.is_none_or(|i| i == it.index)) {
        let ops = iteration_ops(ingest, it.index);
        let dims_of: BTreeMap<Addr, [u64; 4]> = ops.iter().filter_map(|o| Some((o.addr, o.dims?))).collect();
        for op in ops.iter().filter(|o| o.op_type == OpType::MulMat) {
            let (Some(out_dims), Some(k)) = (op.dims, op.srcs.get(1).and_then(|s| dims_of.get(s)).map(|d| d[0])) else {
                continue;
            };
            let (n, m, h) = (out_dims[0], out_dims[1], out_dims[2].max(1));
            let Ok(complexity) = matmul_complexity(m, n, k, h) else { continue };
            let pmc = op.pmc_totals.clone();
            out.push(MatMulSample {
                iteration: it.index,
                phase: it.phase,
                op_name: op.op_name.clone(),
                m,
                n,
                k,
                h,
                complexity,
                elapsed_ns: op.elapsed_ns,
                bandwidth_bytes_per_s: pmc
                    .as_ref()
                    .and_then(|p| memory_traffic(p, specs, op.elapsed_ns).ok())
                    .map(|t| t.bandwidth_bytes_per_s),
                stalled_ratio: pmc.as_ref().and_then(|p| stalled_ratio(p, specs).ok()).map(|s| s.ratio),
                pmc,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of y on x.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<Fit, StatError> {
    if x.len() != y.len() {
        return Err(StatError::Domain(format!("{} x values but {} y values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(StatError::Domain("need at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return Err(StatError::DegenerateFit);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (slope * a + intercept)).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(Fit { slope, intercept, r2 })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx.sqrt() * vy.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryTraffic {
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub bandwidth_bytes_per_s: f64,
}

fn counter(pmc: &[u64], specs: &[PmcSpec], name: &str) -> Result<(u64, PmcUnit), StatError> {
    let i = specs.iter().position(|s| s.name == name).ok_or_else(|| StatError::MissingCounter(name.to_string()))?;
    let value = *pmc.get(i).ok_or_else(|| StatError::MissingCounter(name.to_string()))?;
    Ok((value, specs[i].unit))
}

fn bytes(count: u64, unit: PmcUnit) -> u64 {
    match unit {
        PmcUnit::Bytes(n) => count * n as u64,
        PmcUnit::Pages(n) | PmcUnit::Cycles(n) => count * n as u64,
    }
}

/// DRAM traffic from cache-refill and write counters, scaled by their units.
pub fn memory_traffic(pmc: &[u64], specs: &[PmcSpec], elapsed_ns: u64) -> Result<MemoryTraffic, StatError> {
    let (refills, ru) = counter(pmc, specs, L3D_CACHE_REFILL)?;
    let (writes, wu) = counter(pmc, specs, MEM_ACCESS_WR)?;
    if elapsed_ns == 0 {
        return Err(StatError::Domain("elapsed time is zero".into()));
    }
    let bytes_read = bytes(refills, ru);
    let bytes_written = bytes(writes, wu);
    Ok(MemoryTraffic {
        bytes_read,
        bytes_written,
        bandwidth_bytes_per_s: (bytes_read + bytes_written) as f64 * 1e9 / elapsed_ns as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stalled {
    pub ratio: f64,
    /// Set when idle cycles exceed total cycles.
    pub anomaly: bool,
}

pub fn stalled_ratio_counts(idle_backend_cycles: u64, cycles: u64) -> Result<Stalled, StatError> {
    if cycles == 0 {
        return Err(StatError::Domain("cycle count is zero".into()));
    }
    let ratio = idle_backend_cycles as f64 / cycles as f64;
    Ok(Stalled { ratio, anomaly: ratio > 1.0 })
}

pub fn stalled_ratio(pmc: &[u64], specs: &[PmcSpec]) -> Result<Stalled, StatError> {
    let (idle, _) = counter(pmc, specs, IDLE_BACKEND_CYCLES)?;
    let (cycles, _) = counter(pmc, specs, CYCLES)?;
    stalled_ratio_counts(idle, cycles)
}

/// Mean reuse distance per row. An expert seen for the first time at row i
/// counts as loaded at row -1, so its distance is i + 1.
pub fn reuse_distances(rows: &[Vec<u32>]) -> Vec<f64> {
    let mut last: BTreeMap<u32, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for (i, ids) in rows.iter().enumerate() {
        let total: usize = ids.iter().map(|e| last.get(e).map_or(i + 1, |prev| i - prev)).sum();
        out.push(if ids.is_empty() { 0.0 } else { total as f64 / ids.len() as f64 });
        for e in ids {
            last.insert(*e, i);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRow {
    pub iteration: usize,
    pub expert_ids: Vec<u32>,
    pub elapsed_ns: u64,
    pub avg_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertActivationMatrix {
    pub op_name: String,
    pub experts_total: u32,
    pub k: u32,
    pub rows: Vec<ExpertRow>,
    /// Activations per expert divided by the number of rows.
    pub density: Vec<f64>,
}

impl ExpertActivationMatrix {
    /// Mean density of the experts a row activated.
    pub fn row_density(&self, row: &ExpertRow) -> f64 {
        if row.expert_ids.is_empty() {
            return 0.0;
        }
        row.expert_ids.iter().map(|e| self.density[*e as usize]).sum::<f64>() / row.expert_ids.len() as f64
    }
}

/// Names of ops that carry expert ids.
pub fn gated_ops(ingest: &Ingest) -> Vec<String> {
    let mut names: Vec<String> =
        ingest.spans.iter().filter(|s| s.expert_ids().is_some()).map(|s| s.op_name.clone()).collect();
    names.sort();
    names.dedup();
    names
}

/// Expert activations of one gated op over the decode iterations.
pub fn expert_analysis(ingest: &Ingest, gated_op_name: &str) -> Result<ExpertActivationMatrix, StatError> {
    let mut rows = Vec::new();
    for it in ingest.decode_iterations() {
        let spans: Vec<&OpSpan> = ingest.spans_in(it.index).filter(|s| s.op_name == gated_op_name).collect();
        let Some(ids) = spans.iter().find_map(|s| s.expert_ids()) else { continue };
        rows.push(ExpertRow {
            iteration: it.index,
            expert_ids: ids.to_vec(),
            elapsed_ns: op_elapsed(&spans).unwrap_or(0),
            avg_distance: 0.0,
        });
    }
    if rows.is_empty() {
        return Err(StatError::OpNotFound { requested: gated_op_name.to_string(), available: gated_ops(ingest) });
    }
    let k = ingest.header.moe.map(|m| m.experts_per_token).unwrap_or(rows[0].expert_ids.len() as u32);
    let max_id = rows.iter().flat_map(|r| r.expert_ids.iter().copied()).max().unwrap_or(0);
    let experts_total = ingest.header.moe.map(|m| m.experts).unwrap_or(max_id + 1);
    for r in &rows {
        if r.expert_ids.len() != k as usize {
            return Err(StatError::Invalid(format!(
                "iteration {} activates {} experts, expected {k}",
                r.iteration,
                r.expert_ids.len()
            )));
        }
        if let Some(bad) = r.expert_ids.iter().find(|e| **e >= experts_total) {
            return Err(StatError::Invalid(format!(
                "iteration {} activates expert {bad} of {experts_total}",
                r.iteration
            )));
        }
    }
    let ids: Vec<Vec<u32>> = rows.iter().map(|r| r.expert_ids.clone()).collect();
    for (row, d) in rows.iter_mut().zip(reuse_distances(&ids)) {
        row.avg_distance = d;
    }
    let mut counts = vec![0u64; experts_total as usize];
    for e in ids.iter().flatten() {
        counts[*e as usize] += 1;
    }
    let n = rows.len() as f64;
    Ok(ExpertActivationMatrix {
        op_name: gated_op_name.to_string(),
        experts_total,
        k,
        density: counts.iter().map(|c| *c as f64 / n).collect(),
        rows,
    })
}
