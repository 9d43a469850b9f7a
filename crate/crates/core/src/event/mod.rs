//! Shared trace vocabulary: probe kinds, raw events and their payloads,
//! performance-counter specs and the session container.
//!
//! Everything here is a plain value. Analyzers borrow sessions and never
//! mutate them.

mod codec;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use codec::{
    read_session, read_session_binary, read_session_jsonl, write_session_binary, write_session_jsonl, CodecError,
    BINARY_MAGIC, FORMAT_VERSION,
};
pub use validate::{validate_session, Violation};

/// Maximum number of source tensors recorded per operator.
pub const MAX_SRCS: usize = 10;
/// Longest operator name the handlers copy (excluding the terminator).
pub const MAX_OP_NAME: usize = 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProbeKind {
    TokenEnter,
    TokenExit,
    GraphEnter,
    GraphExit,
    OpEnter,
    OpExit,
    SchedSwitch,
    SchedWakeup,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 8] = [
        ProbeKind::TokenEnter,
        ProbeKind::TokenExit,
        ProbeKind::GraphEnter,
        ProbeKind::GraphExit,
        ProbeKind::OpEnter,
        ProbeKind::OpExit,
        ProbeKind::SchedSwitch,
        ProbeKind::SchedWakeup,
    ];

    /// The matching half of an enter/exit pair. Scheduler kinds never pair.
    pub fn partner(self) -> Option<ProbeKind> {
        use ProbeKind::*;
        match self {
            TokenEnter => Some(TokenExit),
            TokenExit => Some(TokenEnter),
            GraphEnter => Some(GraphExit),
            GraphExit => Some(GraphEnter),
            OpEnter => Some(OpExit),
            OpExit => Some(OpEnter),
            SchedSwitch | SchedWakeup => None,
        }
    }

    pub fn is_enter(self) -> bool {
        matches!(self, ProbeKind::TokenEnter | ProbeKind::GraphEnter | ProbeKind::OpEnter)
    }

    pub fn is_op(self) -> bool {
        matches!(self, ProbeKind::OpEnter | ProbeKind::OpExit)
    }

    pub fn is_sched(self) -> bool {
        matches!(self, ProbeKind::SchedSwitch | ProbeKind::SchedWakeup)
    }

    pub fn is_token(self) -> bool {
        matches!(self, ProbeKind::TokenEnter | ProbeKind::TokenExit)
    }

    pub fn is_graph(self) -> bool {
        matches!(self, ProbeKind::GraphEnter | ProbeKind::GraphExit)
    }

    /// Stable one-byte code used by the wire and binary formats.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<ProbeKind> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Opaque 64-bit identity of a tensor. Only equality is meaningful.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Addr(pub u64);

impl fmt::Debug for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl Serialize for Addr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Addr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let digits =
            text.strip_prefix("0x").ok_or_else(|| de::Error::custom(format!("address {text:?} lacks 0x prefix")))?;
        u64::from_str_radix(digits, 16).map(Addr).map_err(|e| de::Error::custom(format!("address {text:?}: {e}")))
    }
}

/// Operator kind of a traced tensor node.
///
/// Kinds this crate does not know about survive as `Unknown(raw)` so traces
/// from newer runtimes still load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpType {
    None,
    MulMat,
    MulMatId,
    Add,
    Mul,
    SoftMax,
    RmsNorm,
    Unary,
    Rope,
    Cpy,
    GetRows,
    Unknown(u32),
}

impl OpType {
    pub const KNOWN: [OpType; 11] = [
        OpType::None,
        OpType::MulMat,
        OpType::MulMatId,
        OpType::Add,
        OpType::Mul,
        OpType::SoftMax,
        OpType::RmsNorm,
        OpType::Unary,
        OpType::Rope,
        OpType::Cpy,
        OpType::GetRows,
    ];

    /// Offset added to unknown raw values so they never collide with the
    /// known codes.
    pub const UNKNOWN_BASE: u32 = 0x1000;

    pub fn name(self) -> Option<&'static str> {
        Some(match self {
            OpType::None => "NONE",
            OpType::MulMat => "MUL_MAT",
            OpType::MulMatId => "MUL_MAT_ID",
            OpType::Add => "ADD",
            OpType::Mul => "MUL",
            OpType::SoftMax => "SOFT_MAX",
            OpType::RmsNorm => "RMS_NORM",
            OpType::Unary => "UNARY",
            OpType::Rope => "ROPE",
            OpType::Cpy => "CPY",
            OpType::GetRows => "GET_ROWS",
            OpType::Unknown(_) => return None,
        })
    }

    pub fn from_name(name: &str) -> Option<OpType> {
        Self::KNOWN.into_iter().find(|t| t.name() == Some(name))
    }

    pub fn code(self) -> u32 {
        match self {
            OpType::Unknown(raw) => raw,
            known => Self::KNOWN.iter().position(|k| *k == known).unwrap() as u32,
        }
    }

    pub fn from_code(code: u32) -> OpType {
        Self::KNOWN.get(code as usize).copied().unwrap_or(OpType::Unknown(code))
    }

    pub fn is_matmul(self) -> bool {
        matches!(self, OpType::MulMat | OpType::MulMatId)
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(f, "OP_{}", self.code()),
        }
    }
}

impl Serialize for OpType {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            OpType::Unknown(raw) => s.serialize_u32(*raw),
            known => s.serialize_str(known.name().unwrap()),
        }
    }
}

impl<'de> Deserialize<'de> for OpType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct OpTypeVisitor;
        impl Visitor<'_> for OpTypeVisitor {
            type Value = OpType;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an operator name or a raw integer code")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<OpType, E> {
                OpType::from_name(v).ok_or_else(|| E::custom(format!("unknown op type {v:?}")))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<OpType, E> {
                let raw = u32::try_from(v).map_err(E::custom)?;
                Ok(OpType::Unknown(raw))
            }
        }
        d.deserialize_any(OpTypeVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Backend {
    #[serde(rename = "CPU")]
    Cpu,
    #[serde(rename = "OpenCL-GPU")]
    OpenClGpu,
    #[serde(rename = "NPU")]
    Npu,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Cpu, Backend::OpenClGpu, Backend::Npu];

    pub fn label(self) -> &'static str {
        match self {
            Backend::Cpu => "CPU",
            Backend::OpenClGpu => "OpenCL-GPU",
            Backend::Npu => "NPU",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Backend> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpPayload {
    pub op_addr: Addr,
    pub op_type: OpType,
    pub op_name: String,
    pub backend: Backend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<[u64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_addrs: Option<Vec<Addr>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pmc: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_ids: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphPayload {
    /// 16 lowercase hexadecimal digits.
    pub backend_guid: String,
}

impl GraphPayload {
    pub fn guid_is_well_formed(&self) -> bool {
        self.backend_guid.len() == 16
            && self.backend_guid.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPayload {
    pub batch_size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchedPayload {
    Switch { prev_tid: u32, next_tid: u32, prev_state: i64 },
    Wakeup { wakee_tid: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Op(OpPayload),
    Graph(GraphPayload),
    Token(TokenPayload),
    Sched(SchedPayload),
}

impl Payload {
    /// Whether this payload variant is the one `kind` carries.
    pub fn matches(&self, kind: ProbeKind) -> bool {
        use ProbeKind::*;
        match self {
            Payload::Op(_) => matches!(kind, OpEnter | OpExit),
            Payload::Graph(_) => matches!(kind, GraphEnter | GraphExit),
            Payload::Token(_) => matches!(kind, TokenEnter | TokenExit),
            Payload::Sched(SchedPayload::Switch { .. }) => kind == SchedSwitch,
            Payload::Sched(SchedPayload::Wakeup { .. }) => kind == SchedWakeup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub kind: ProbeKind,
    pub ts_ns: u64,
    pub pid: u32,
    pub tid: u32,
    pub cpu: u32,
    pub seq: u64,
    pub payload: Payload,
}

impl RawEvent {
    pub fn op(&self) -> Option<&OpPayload> {
        match &self.payload {
            Payload::Op(op) => Some(op),
            _ => None,
        }
    }

    pub fn graph(&self) -> Option<&GraphPayload> {
        match &self.payload {
            Payload::Graph(g) => Some(g),
            _ => None,
        }
    }

    pub fn token(&self) -> Option<&TokenPayload> {
        match &self.payload {
            Payload::Token(t) => Some(t),
            _ => None,
        }
    }

    pub fn sched(&self) -> Option<&SchedPayload> {
        match &self.payload {
            Payload::Sched(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PmcScope {
    PerCore,
    Software,
    Hardware,
}

/// What one count of a counter stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PmcUnit {
    Bytes(u32),
    Pages(u32),
    Cycles(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PmcSpec {
    pub name: String,
    pub scope: PmcScope,
    pub unit: PmcUnit,
}

pub const L3D_CACHE_REFILL: &str = "l3d_cache_refill";
pub const MEM_ACCESS_WR: &str = "mem_access_wr";
pub const MAJOR_FAULTS: &str = "major-faults";
pub const CYCLES: &str = "cycles";
pub const IDLE_BACKEND_CYCLES: &str = "idle-backend-cycles";

impl PmcSpec {
    pub fn new(name: impl Into<String>, scope: PmcScope, unit: PmcUnit) -> Self {
        PmcSpec { name: name.into(), scope, unit }
    }

    /// The five counters profiled on Cortex-A76 cores, in canonical order.
    pub fn canonical() -> Vec<PmcSpec> {
        vec![
            PmcSpec::new(L3D_CACHE_REFILL, PmcScope::PerCore, PmcUnit::Bytes(64)),
            PmcSpec::new(MEM_ACCESS_WR, PmcScope::PerCore, PmcUnit::Bytes(16)),
            PmcSpec::new(MAJOR_FAULTS, PmcScope::Software, PmcUnit::Pages(1)),
            PmcSpec::new(CYCLES, PmcScope::Hardware, PmcUnit::Cycles(1)),
            PmcSpec::new(IDLE_BACKEND_CYCLES, PmcScope::Hardware, PmcUnit::Cycles(1)),
        ]
    }

    /// Looks up a canonical counter by name.
    pub fn canonical_named(name: &str) -> Option<PmcSpec> {
        Self::canonical().into_iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProbeFlags {
    /// Parse operator structure: addresses, dimensions and sources.
    pub str: bool,
    /// Read performance counters in operator handlers.
    pub pmc: bool,
    /// Use the perf buffer (reports losses) instead of the ring buffer.
    pub perf_buffer: bool,
}

impl ProbeFlags {
    pub const ALL_ON: ProbeFlags = ProbeFlags { str: true, pmc: true, perf_buffer: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeInfo {
    pub experts: u32,
    pub experts_per_token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub flags: ProbeFlags,
    pub pmc_specs: Vec<PmcSpec>,
    pub inference_tids: BTreeSet<u32>,
    pub qos_target_tps: f64,
    pub nthreads: u32,
    /// Backend guid (16 hex digits) to a human label.
    pub backend_names: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeInfo>,
    /// Records the transport reported as lost.
    #[serde(default)]
    pub dropped_events: u64,
}

impl Default for SessionHeader {
    fn default() -> Self {
        SessionHeader {
            flags: ProbeFlags::default(),
            pmc_specs: Vec::new(),
            inference_tids: BTreeSet::new(),
            qos_target_tps: 5.0,
            nthreads: 1,
            backend_names: BTreeMap::new(),
            moe: None,
            dropped_events: 0,
        }
    }
}

impl SessionHeader {
    pub fn pmc_index(&self, name: &str) -> Option<usize> {
        self.pmc_specs.iter().position(|s| s.name == name)
    }

    pub fn backend_label<'a>(&'a self, guid: &'a str) -> &'a str {
        self.backend_names.get(guid).map(String::as_str).unwrap_or(guid)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceSession {
    pub header: SessionHeader,
    pub events: Vec<RawEvent>,
}

impl TraceSession {
    pub fn new(header: SessionHeader) -> Self {
        TraceSession { header, events: Vec::new() }
    }

    /// Sequence numbers missing between the smallest and largest observed seq.
    pub fn seq_gaps(&self) -> Vec<u64> {
        let mut seqs: Vec<u64> = self.events.iter().map(|e| e.seq).collect();
        seqs.sort_unstable();
        seqs.dedup();
        let mut gaps = Vec::new();
        for w in seqs.windows(2) {
            gaps.extend(w[0] + 1..w[1]);
        }
        gaps
    }

    pub fn pid(&self) -> u32 {
        self.events.first().map(|e| e.pid).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ThreadState {
    Running,
    Runnable,
    Idle,
}

impl fmt::Display for ThreadState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThreadState::Running => "Running",
            ThreadState::Runnable => "Runnable",
            ThreadState::Idle => "Idle",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_pair_up() {
        for kind in ProbeKind::ALL {
            match kind.partner() {
                Some(p) => {
                    assert_eq!(p.partner(), Some(kind));
                    assert_ne!(p.is_enter(), kind.is_enter());
                }
                None => assert!(kind.is_sched()),
            }
            assert_eq!(ProbeKind::from_code(kind.code()), Some(kind));
        }
        assert_eq!(ProbeKind::from_code(8), None);
    }

    #[test]
    fn op_type_codes_and_names() {
        for t in OpType::KNOWN {
            assert_eq!(OpType::from_code(t.code()), t);
            assert_eq!(OpType::from_name(t.name().unwrap()), Some(t));
        }
        assert_eq!(OpType::from_code(77), OpType::Unknown(77));
        let json = serde_json::to_string(&OpType::Unknown(77)).unwrap();
        assert_eq!(json, "77");
        assert_eq!(serde_json::from_str::<OpType>("77").unwrap(), OpType::Unknown(77));
        assert_eq!(serde_json::from_str::<OpType>("\"MUL_MAT_ID\"").unwrap(), OpType::MulMatId);
        assert!(serde_json::from_str::<OpType>("\"FLASH\"").is_err());
    }

    #[test]
    fn addr_is_hex_text() {
        let json = serde_json::to_string(&Addr(0xdead_beef)).unwrap();
        assert_eq!(json, "\"0xdeadbeef\"");
        assert_eq!(serde_json::from_str::<Addr>(&json).unwrap(), Addr(0xdead_beef));
        assert!(serde_json::from_str::<Addr>("\"deadbeef\"").is_err());
    }

    #[test]
    fn canonical_units() {
        let units: Vec<PmcUnit> = PmcSpec::canonical().into_iter().map(|s| s.unit).collect();
        assert_eq!(
            units,
            vec![PmcUnit::Bytes(64), PmcUnit::Bytes(16), PmcUnit::Pages(1), PmcUnit::Cycles(1), PmcUnit::Cycles(1)]
        );
    }

    #[test]
    fn guid_shape() {
        let ok = GraphPayload { backend_guid: "0123456789abcdef".into() };
        assert!(ok.guid_is_well_formed());
        for bad in ["0123456789ABCDEF", "0123", "0123456789abcdeg"] {
            assert!(!GraphPayload { backend_guid: bad.into() }.guid_is_well_formed());
        }
    }

    #[test]
    fn sched_payload_untagged() {
        let sw: Payload = serde_json::from_str(r#"{"prev_tid":1,"next_tid":2,"prev_state":1}"#).unwrap();
        assert!(sw.matches(ProbeKind::SchedSwitch));
        let wk: Payload = serde_json::from_str(r#"{"wakee_tid":3}"#).unwrap();
        assert!(wk.matches(ProbeKind::SchedWakeup));
        let tok: Payload = serde_json::from_str(r#"{"batch_size":3}"#).unwrap();
        assert!(tok.matches(ProbeKind::TokenExit));
        assert!(!tok.matches(ProbeKind::OpExit));
    }

    #[test]
    fn seq_gaps_found() {
        let mut s = TraceSession::default();
        for seq in [0u64, 1, 4, 5, 7] {
            s.events.push(RawEvent {
                kind: ProbeKind::TokenEnter,
                ts_ns: seq,
                pid: 1,
                tid: 1,
                cpu: 0,
                seq,
                payload: Payload::Token(TokenPayload { batch_size: 1 }),
            });
        }
        assert_eq!(s.seq_gaps(), vec![2, 3, 6]);
    }
}
