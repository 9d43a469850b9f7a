use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TracerError;
use crate::event::{ProbeFlags, ProbeKind};

/// Granularity a user can ask for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Token,
    Graph,
    Op,
    Kernel,
}

impl FromStr for Level {
    type Err = TracerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "token" => Ok(Level::Token),
            "graph" => Ok(Level::Graph),
            "op" => Ok(Level::Op),
            "kernel" => Ok(Level::Kernel),
            other => Err(TracerError::Config(format!("unknown level {other:?}"))),
        }
    }
}

/// Level of one probe entry; operator probes are split per backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeLevel {
    Token,
    Graph,
    OpCpu,
    OpGpu,
    OpNpu,
    Kernel,
}

impl ProbeLevel {
    pub fn requested_by(self) -> Level {
        match self {
            ProbeLevel::Token => Level::Token,
            ProbeLevel::Graph => Level::Graph,
            ProbeLevel::OpCpu | ProbeLevel::OpGpu | ProbeLevel::OpNpu => Level::Op,
            ProbeLevel::Kernel => Level::Kernel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttachPoint {
    FunctionEntry,
    FunctionReturn,
    KernelTracepoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub target_symbol: String,
    pub library: String,
    pub attach: AttachPoint,
    pub kind: ProbeKind,
    pub level: ProbeLevel,
}

impl fmt::Display for ProbeEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let how = match self.attach {
            AttachPoint::FunctionEntry => "uprobe",
            AttachPoint::FunctionReturn => "uretprobe",
            AttachPoint::KernelTracepoint => "tracepoint",
        };
        write!(f, "{how} {}:{} -> {:?}", self.library, self.target_symbol, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub flags: ProbeFlags,
    pub entries: Vec<ProbeEntry>,
}

/// One row of the probe table: a function probed at entry and return, or a
/// scheduler tracepoint.
struct Row {
    symbol: &'static str,
    library: &'static str,
    level: ProbeLevel,
    probe: RowProbe,
}

enum RowProbe {
    Pair(ProbeKind, ProbeKind),
    Tracepoint(ProbeKind),
}

const ROWS: [Row; 7] = [
    Row {
        symbol: "llama_decode",
        library: "libllama.so",
        level: ProbeLevel::Token,
        probe: RowProbe::Pair(ProbeKind::TokenEnter, ProbeKind::TokenExit),
    },
    Row {
        symbol: "ggml_backend_graph_compute_async",
        library: "libggml-base.so",
        level: ProbeLevel::Graph,
        probe: RowProbe::Pair(ProbeKind::GraphEnter, ProbeKind::GraphExit),
    },
    Row {
        symbol: "ggml_compute_forward",
        library: "libggml-cpu.so",
        level: ProbeLevel::OpCpu,
        probe: RowProbe::Pair(ProbeKind::OpEnter, ProbeKind::OpExit),
    },
    Row {
        symbol: "ggml_cl_compute_forward",
        library: "libggml-opencl.so",
        level: ProbeLevel::OpGpu,
        probe: RowProbe::Pair(ProbeKind::OpEnter, ProbeKind::OpExit),
    },
    Row {
        symbol: "ggml_rk_compute_forward",
        library: "libggml-rknpu.so",
        level: ProbeLevel::OpNpu,
        probe: RowProbe::Pair(ProbeKind::OpEnter, ProbeKind::OpExit),
    },
    Row {
        symbol: "sched_switch",
        library: "kernel",
        level: ProbeLevel::Kernel,
        probe: RowProbe::Tracepoint(ProbeKind::SchedSwitch),
    },
    Row {
        symbol: "sched_wakeup",
        library: "kernel",
        level: ProbeLevel::Kernel,
        probe: RowProbe::Tracepoint(ProbeKind::SchedWakeup),
    },
];

/// Selects the probe-table rows for the requested levels and expands each
/// function row into an entry and a return probe.
pub fn build_probe_plan(flags: ProbeFlags, levels: &BTreeSet<Level>) -> Result<ProbePlan, TracerError> {
    if levels.is_empty() {
        return Err(TracerError::Config("no tracing level requested".into()));
    }
    let mut entries = Vec::new();
    for row in ROWS.iter().filter(|r| levels.contains(&r.level.requested_by())) {
        let entry = |attach, kind| ProbeEntry {
            target_symbol: row.symbol.to_string(),
            library: row.library.to_string(),
            attach,
            kind,
            level: row.level,
        };
        match row.probe {
            RowProbe::Pair(enter, exit) => {
                entries.push(entry(AttachPoint::FunctionEntry, enter));
                entries.push(entry(AttachPoint::FunctionReturn, exit));
            }
            RowProbe::Tracepoint(kind) => entries.push(entry(AttachPoint::KernelTracepoint, kind)),
        }
    }
    Ok(ProbePlan { flags, entries })
}
