use serde::{Deserialize, Serialize};

use super::model::OpTemplate;
use crate::event::OpType;

/// Deterministic timing and counter model of the generator. All times are
/// integer nanoseconds so generated sessions are exactly reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub op_overhead_ns: u64,
    /// Time per work unit is `ns_per_unit_num / ns_per_unit_den`.
    pub ns_per_unit_num: u64,
    pub ns_per_unit_den: u64,
    /// Extra time per cached KV position on attention-score ops.
    pub kv_growth_ns: u64,
    /// The KV window is rounded up to a multiple of this.
    pub kv_pad: u64,
    /// Extra time per unit of summed expert reuse distance, divided by k.
    pub expert_miss_ns: u64,
    pub op_gap_ns: u64,
    /// Token-level time outside the graph, split before and after it.
    pub iteration_overhead_ns: u64,
    pub inter_iteration_ns: u64,
    /// Upper bound on how much later a worker starts and earlier it ends an op.
    pub worker_jitter_ns: u64,
    pub cycles_per_ns: u64,
    pub bytes_per_weight: u64,
    pub bytes_per_activation: u64,
    /// Weights of memory traffic and compute in the stalled-cycle share.
    pub stall_mem_weight: u64,
    pub stall_compute_weight: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            op_overhead_ns: 2_000,
            ns_per_unit_num: 1,
            ns_per_unit_den: 64,
            kv_growth_ns: 40,
            kv_pad: 32,
            expert_miss_ns: 4_000,
            op_gap_ns: 400,
            iteration_overhead_ns: 150_000,
            inter_iteration_ns: 50_000,
            worker_jitter_ns: 500,
            cycles_per_ns: 2,
            bytes_per_weight: 1,
            bytes_per_activation: 4,
            stall_mem_weight: 3,
            stall_compute_weight: 2,
        }
    }
}

impl CostModel {
    pub fn padded_kv(&self, n_kv: u64) -> u64 {
        let pad = self.kv_pad.max(1);
        n_kv.div_ceil(pad) * pad
    }

    /// `total_distance` is the summed reuse distance of the experts this op
    /// touches; zero outside decode.
    pub fn op_cost(&self, op: &OpTemplate, n_kv: u64, total_distance: u64, k: u64) -> u64 {
        let compute = (op.units as u128 * self.ns_per_unit_num as u128 / self.ns_per_unit_den.max(1) as u128) as u64;
        let mut cost = self.op_overhead_ns.max(1) + compute;
        if op.attention {
            cost += self.kv_growth_ns * n_kv;
        }
        if op.op_type == OpType::MulMatId && k > 0 {
            cost += self.expert_miss_ns * total_distance / k;
        }
        cost
    }

    pub fn bytes_read(&self, op: &OpTemplate) -> u64 {
        op.weight_bytes * self.bytes_per_weight + op.out_elems() * self.bytes_per_activation
    }

    pub fn bytes_written(&self, op: &OpTemplate) -> u64 {
        op.out_elems() * self.bytes_per_activation
    }

    /// Share of cycles stalled on the memory backend for one op.
    pub fn idle_cycles(&self, op: &OpTemplate, cycles: u64, nthreads: u64) -> u64 {
        let p = self.bytes_read(op) as u128 * nthreads as u128 * self.stall_mem_weight as u128;
        let d = op.units as u128 * self.stall_compute_weight as u128;
        if p + d == 0 {
            return 0;
        }
        (cycles as u128 * p / (p + d)) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::model::{build_graph, ModelSpec};

    #[test]
    fn kv_padding() {
        let c = CostModel::default();
        assert_eq!(c.padded_kv(1), 32);
        assert_eq!(c.padded_kv(32), 32);
        assert_eq!(c.padded_kv(33), 64);
    }

    #[test]
    fn matmul_cost_tracks_units() {
        let c = CostModel::default();
        let g = build_graph(&ModelSpec::preset("dense2").unwrap(), 1, 32);
        let lm = g.ops.last().unwrap();
        assert_eq!(lm.units, 1024 * 256);
        assert_eq!(c.op_cost(lm, 32, 0, 0), 2_000 + 1024 * 256 / 64);
    }

    #[test]
    fn decode_matmul_with_four_threads_is_memory_bound() {
        let c = CostModel::default();
        let g = build_graph(&ModelSpec::preset("dense2").unwrap(), 1, 32);
        let ffn = g.ops.iter().find(|o| o.name == "ffn_out-0").unwrap();
        let idle = c.idle_cycles(ffn, 1_000_000, 4);
        assert!(idle > 800_000, "{idle}");
        assert!(c.idle_cycles(ffn, 1_000_000, 1) < 800_000);
    }
}
