//! User-space tracer control: probe planning, the QoS feedback loop,
//! overhead accounting and the buffer consumer.
//!
//! Attaching probes needs the kernel-side handler objects, which ship
//! separately. This module only sees their output as a [`BufferSource`]
//! (a recorded wire stream, or a live loader's pipe).
//!
//! [`BufferSource`]: crate::wire::BufferSource

mod config;
mod consumer;
mod plan;
mod qos;

use thiserror::Error;

pub use config::{AnalysisConfig, QosConfig, TargetConfig, TracerConfig, CONFIG_ENV};
pub use consumer::{poll_and_decode, Consumer, ControlMap, RecordingControlMap};
pub use plan::{build_probe_plan, AttachPoint, Level, ProbeEntry, ProbeLevel, ProbePlan};
pub use qos::{ProbeClass, ProbeMask, QosController, QosDecision, Toggle, DISABLE_ORDER};

use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum TracerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Average per-core CPU load of the probe handlers: total handler time over
/// runtime times thread count.
pub fn probe_overhead(probe_costs_ns: &[u64], runtime_ns: u64, nthreads: u32) -> Result<f64, TracerError> {
    if runtime_ns == 0 {
        return Err(TracerError::Domain("runtime must be positive".into()));
    }
    if nthreads == 0 {
        return Err(TracerError::Domain("at least one thread required".into()));
    }
    let total: u128 = probe_costs_ns.iter().map(|c| *c as u128).sum();
    Ok(total as f64 / (runtime_ns as f64 * nthreads as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: u64 = 1_000_000;

    #[test]
    fn overhead_examples() {
        let v = probe_overhead(&[4 * MS, 4 * MS, 8 * MS], 1000 * MS, 4).unwrap();
        assert!((v - 0.004).abs() < 1e-15);
        assert_eq!(probe_overhead(&[], 1000 * MS, 4).unwrap(), 0.0);
        let v = probe_overhead(&[28 * MS], 1000 * MS, 4).unwrap();
        assert!((v - 0.007).abs() < 1e-15);
    }

    #[test]
    fn overhead_domain_errors() {
        assert!(probe_overhead(&[1], 0, 4).is_err());
        assert!(probe_overhead(&[1], 1, 0).is_err());
    }
}
