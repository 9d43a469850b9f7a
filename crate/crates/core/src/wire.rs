//! Fixed-layout records submitted by the kernel-side probe handlers.
//!
//! Every record is [`RECORD_SIZE`] bytes, little-endian:
//!
//! ```text
//! off  size  field
//!   0     1  kind tag (ProbeKind code; 0xFF stream header, 0xFE lost marker)
//!   1     8  ts_ns
//!   9     4  pid
//!  13     4  tid
//!  17     4  cpu
//!  21     1  error/truncation flag bits
//!  22   286  payload region (layout depends on kind)
//! ```
//!
//! Op payload: op_addr u64 @0, op_type u32 @8, backend u8 @12, name [64] @13,
//! dims 4×u64 @77, srcs 10×u64 @109, pmc 8×u64 @189, expert count u8 @253,
//! expert ids 8×u32 @254. Graph payload: 16 ASCII hex digits @0. Token
//! payload: batch_size u32 @0. Sched payload: prev_tid u32 @0, next_tid u32
//! @4, wakee_tid u32 @8, prev_state i64 @12.
//!
//! Regions a handler was not compiled to fill are zero, never absent.

use std::io::{self, Read};

use thiserror::Error;

use crate::event::{
    Addr, Backend, GraphPayload, OpPayload, OpType, Payload, ProbeKind, RawEvent, SchedPayload, SessionHeader,
    TokenPayload, MAX_SRCS,
};

pub const WIRE_VERSION: u8 = 1;
pub const HEADER_SIZE: usize = 22;
pub const PAYLOAD_SIZE: usize = 286;
pub const RECORD_SIZE: usize = HEADER_SIZE + PAYLOAD_SIZE;
pub const NAME_BYTES: usize = 64;
pub const MAX_PMC: usize = 8;
pub const MAX_EXPERTS: usize = 8;

pub const STREAM_HEADER_TAG: u8 = 0xFF;
pub const LOST_MARKER_TAG: u8 = 0xFE;

/// Reading the tensor struct failed; dims and sources are zero.
pub const FLAG_TENSOR_UNREADABLE: u8 = 0x01;
/// The operator name was cut at 63 bytes.
pub const FLAG_NAME_TRUNCATED: u8 = 0x02;
/// The expert-id dereference failed.
pub const FLAG_EXPERTS_UNREADABLE: u8 = 0x04;
/// A counter read failed.
pub const FLAG_PMC_UNREADABLE: u8 = 0x08;

const OFF_ADDR: usize = 0;
const OFF_TYPE: usize = 8;
const OFF_BACKEND: usize = 12;
const OFF_NAME: usize = 13;
const OFF_DIMS: usize = OFF_NAME + NAME_BYTES;
const OFF_SRCS: usize = OFF_DIMS + 4 * 8;
const OFF_PMC: usize = OFF_SRCS + MAX_SRCS * 8;
const OFF_EXPERT_COUNT: usize = OFF_PMC + MAX_PMC * 8;
const OFF_EXPERTS: usize = OFF_EXPERT_COUNT + 1;
const _: () = assert!(OFF_EXPERTS + MAX_EXPERTS * 4 == PAYLOAD_SIZE);

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed record at byte {offset}: {reason}")]
    Malformed { offset: u64, reason: String },
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("record does not fit the wire layout: {0}")]
    Unencodable(String),
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WirePayload {
    Op {
        op_addr: u64,
        op_type: u32,
        backend: u8,
        name: [u8; NAME_BYTES],
        dims: [u64; 4],
        srcs: [u64; MAX_SRCS],
        pmc: [u64; MAX_PMC],
        expert_count: u8,
        expert_ids: [u32; MAX_EXPERTS],
    },
    Graph {
        guid: [u8; 16],
    },
    Token {
        batch_size: u32,
    },
    Sched {
        prev_tid: u32,
        next_tid: u32,
        wakee_tid: u32,
        prev_state: i64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireRecord {
    pub kind: ProbeKind,
    pub ts_ns: u64,
    pub pid: u32,
    pub tid: u32,
    pub cpu: u32,
    pub flags: u8,
    pub payload: WirePayload,
}

/// Session-level facts carried by the first record of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u8,
    pub npmc: u8,
    pub str: bool,
    pub pmc: bool,
    pub perf_buffer: bool,
}

impl StreamHeader {
    pub fn for_session(header: &SessionHeader) -> StreamHeader {
        StreamHeader {
            version: WIRE_VERSION,
            npmc: header.pmc_specs.len().min(MAX_PMC) as u8,
            str: header.flags.str,
            pmc: header.flags.pmc,
            perf_buffer: header.flags.perf_buffer,
        }
    }

    pub fn encode(&self) -> [u8; RECORD_SIZE] {
        let mut buf = [0u8; RECORD_SIZE];
        buf[0] = STREAM_HEADER_TAG;
        buf[1] = self.version;
        buf[2..6].copy_from_slice(&(RECORD_SIZE as u32).to_le_bytes());
        buf[6] = self.npmc;
        buf[7] = self.str as u8 | (self.pmc as u8) << 1 | (self.perf_buffer as u8) << 2;
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<StreamHeader, WireError> {
        let malformed = |reason: &str| WireError::Malformed { offset: 0, reason: reason.into() };
        if buf.len() != RECORD_SIZE || buf[0] != STREAM_HEADER_TAG {
            return Err(malformed("stream does not start with a header record"));
        }
        if buf[1] != WIRE_VERSION {
            return Err(WireError::Version(buf[1]));
        }
        let size = u32::from_le_bytes(buf[2..6].try_into().unwrap()) as usize;
        if size != RECORD_SIZE {
            return Err(malformed(&format!("record size {size}, expected {RECORD_SIZE}")));
        }
        if buf[6] as usize > MAX_PMC {
            return Err(malformed("more than 8 counters"));
        }
        Ok(StreamHeader {
            version: buf[1],
            npmc: buf[6],
            str: buf[7] & 1 != 0,
            pmc: buf[7] & 2 != 0,
            perf_buffer: buf[7] & 4 != 0,
        })
    }
}

/// Encodes a perf-buffer lost-sample notification.
pub fn encode_lost(count: u64) -> [u8; RECORD_SIZE] {
    let mut buf = [0u8; RECORD_SIZE];
    buf[0] = LOST_MARKER_TAG;
    buf[1..9].copy_from_slice(&count.to_le_bytes());
    buf
}

fn put_u32(buf: &mut [u8], off: usize, v: u32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut [u8], off: usize, v: u64) {
    buf[off..off + 8].copy_from_slice(&v.to_le_bytes());
}

fn get_u32(buf: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

fn get_u64(buf: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(buf[off..off + 8].try_into().unwrap())
}

impl WireRecord {
    pub fn encode(&self) -> [u8; RECORD_SIZE] {
        let mut buf = [0u8; RECORD_SIZE];
        buf[0] = self.kind.code();
        put_u64(&mut buf, 1, self.ts_ns);
        put_u32(&mut buf, 9, self.pid);
        put_u32(&mut buf, 13, self.tid);
        put_u32(&mut buf, 17, self.cpu);
        buf[21] = self.flags;
        let p = &mut buf[HEADER_SIZE..];
        match &self.payload {
            WirePayload::Op { op_addr, op_type, backend, name, dims, srcs, pmc, expert_count, expert_ids } => {
                put_u64(p, OFF_ADDR, *op_addr);
                put_u32(p, OFF_TYPE, *op_type);
                p[OFF_BACKEND] = *backend;
                p[OFF_NAME..OFF_NAME + NAME_BYTES].copy_from_slice(name);
                for (i, d) in dims.iter().enumerate() {
                    put_u64(p, OFF_DIMS + 8 * i, *d);
                }
                for (i, s) in srcs.iter().enumerate() {
                    put_u64(p, OFF_SRCS + 8 * i, *s);
                }
                for (i, v) in pmc.iter().enumerate() {
                    put_u64(p, OFF_PMC + 8 * i, *v);
                }
                p[OFF_EXPERT_COUNT] = *expert_count;
                for (i, id) in expert_ids.iter().enumerate() {
                    put_u32(p, OFF_EXPERTS + 4 * i, *id);
                }
            }
            WirePayload::Graph { guid } => p[..16].copy_from_slice(guid),
            WirePayload::Token { batch_size } => put_u32(p, 0, *batch_size),
            WirePayload::Sched { prev_tid, next_tid, wakee_tid, prev_state } => {
                put_u32(p, 0, *prev_tid);
                put_u32(p, 4, *next_tid);
                put_u32(p, 8, *wakee_tid);
                put_u64(p, 12, *prev_state as u64);
            }
        }
        buf
    }

    /// Decodes one event record. `offset` is only used in error messages.
    pub fn decode(buf: &[u8], offset: u64) -> Result<WireRecord, WireError> {
        if buf.len() != RECORD_SIZE {
            return Err(WireError::Malformed {
                offset,
                reason: format!("record is {} bytes, expected {RECORD_SIZE}", buf.len()),
            });
        }
        let kind = ProbeKind::from_code(buf[0])
            .ok_or_else(|| WireError::Malformed { offset, reason: format!("unknown kind tag {:#04x}", buf[0]) })?;
        let p = &buf[HEADER_SIZE..];
        let payload = match kind {
            ProbeKind::OpEnter | ProbeKind::OpExit => {
                let mut name = [0u8; NAME_BYTES];
                name.copy_from_slice(&p[OFF_NAME..OFF_NAME + NAME_BYTES]);
                let expert_count = p[OFF_EXPERT_COUNT];
                if expert_count as usize > MAX_EXPERTS {
                    return Err(WireError::Malformed {
                        offset: offset + (HEADER_SIZE + OFF_EXPERT_COUNT) as u64,
                        reason: format!("expert count {expert_count} exceeds {MAX_EXPERTS}"),
                    });
                }
                WirePayload::Op {
                    op_addr: get_u64(p, OFF_ADDR),
                    op_type: get_u32(p, OFF_TYPE),
                    backend: p[OFF_BACKEND],
                    name,
                    dims: std::array::from_fn(|i| get_u64(p, OFF_DIMS + 8 * i)),
                    srcs: std::array::from_fn(|i| get_u64(p, OFF_SRCS + 8 * i)),
                    pmc: std::array::from_fn(|i| get_u64(p, OFF_PMC + 8 * i)),
                    expert_count,
                    expert_ids: std::array::from_fn(|i| get_u32(p, OFF_EXPERTS + 4 * i)),
                }
            }
            ProbeKind::GraphEnter | ProbeKind::GraphExit => WirePayload::Graph { guid: p[..16].try_into().unwrap() },
            ProbeKind::TokenEnter | ProbeKind::TokenExit => WirePayload::Token { batch_size: get_u32(p, 0) },
            ProbeKind::SchedSwitch | ProbeKind::SchedWakeup => WirePayload::Sched {
                prev_tid: get_u32(p, 0),
                next_tid: get_u32(p, 4),
                wakee_tid: get_u32(p, 8),
                prev_state: get_u64(p, 12) as i64,
            },
        };
        Ok(WireRecord {
            kind,
            ts_ns: get_u64(buf, 1),
            pid: get_u32(buf, 9),
            tid: get_u32(buf, 13),
            cpu: get_u32(buf, 17),
            flags: buf[21],
            payload,
        })
    }

    /// Builds the record a handler would have submitted for `event`.
    /// Absent optional fields become zero-filled regions.
    pub fn from_event(event: &RawEvent) -> Result<WireRecord, WireError> {
        let payload = match &event.payload {
            Payload::Op(op) => {
                let mut name = [0u8; NAME_BYTES];
                let bytes = op.op_name.as_bytes();
                let n = bytes.len().min(NAME_BYTES - 1);
                name[..n].copy_from_slice(&bytes[..n]);
                let mut srcs = [0u64; MAX_SRCS];
                for (slot, a) in srcs.iter_mut().zip(op.src_addrs.iter().flatten()) {
                    *slot = a.0;
                }
                if op.src_addrs.as_ref().is_some_and(|s| s.len() > MAX_SRCS) {
                    return Err(WireError::Unencodable("more than 10 sources".into()));
                }
                let mut pmc = [0u64; MAX_PMC];
                let readings = op.pmc.as_deref().unwrap_or(&[]);
                if readings.len() > MAX_PMC {
                    return Err(WireError::Unencodable("more than 8 counters".into()));
                }
                pmc[..readings.len()].copy_from_slice(readings);
                let ids = op.expert_ids.as_deref().unwrap_or(&[]);
                if ids.len() > MAX_EXPERTS {
                    return Err(WireError::Unencodable("more than 8 expert ids".into()));
                }
                let mut expert_ids = [0u32; MAX_EXPERTS];
                expert_ids[..ids.len()].copy_from_slice(ids);
                WirePayload::Op {
                    op_addr: op.op_addr.0,
                    op_type: op.op_type.code(),
                    backend: op.backend.code(),
                    name,
                    dims: op.dims.unwrap_or([0; 4]),
                    srcs,
                    pmc,
                    expert_count: ids.len() as u8,
                    expert_ids,
                }
            }
            Payload::Graph(g) => {
                let bytes = g.backend_guid.as_bytes();
                if bytes.len() != 16 {
                    return Err(WireError::Unencodable(format!("guid {:?}", g.backend_guid)));
                }
                WirePayload::Graph { guid: bytes.try_into().unwrap() }
            }
            Payload::Token(t) => WirePayload::Token { batch_size: t.batch_size },
            Payload::Sched(SchedPayload::Switch { prev_tid, next_tid, prev_state }) => {
                WirePayload::Sched { prev_tid: *prev_tid, next_tid: *next_tid, wakee_tid: 0, prev_state: *prev_state }
            }
            Payload::Sched(SchedPayload::Wakeup { wakee_tid }) => {
                WirePayload::Sched { prev_tid: 0, next_tid: 0, wakee_tid: *wakee_tid, prev_state: 0 }
            }
        };
        let mut flags = 0;
        if let Payload::Op(op) = &event.payload {
            if op.op_name.len() > NAME_BYTES - 1 {
                flags |= FLAG_NAME_TRUNCATED;
            }
        }
        Ok(WireRecord {
            kind: event.kind,
            ts_ns: event.ts_ns,
            pid: event.pid,
            tid: event.tid,
            cpu: event.cpu,
            flags,
            payload,
        })
    }

    /// Turns the record into an event. Zero-filled regions that the
    /// stream's flags did not enable, or that an error bit marks as bad,
    /// come out as absent fields.
    pub fn into_event(self, seq: u64, stream: &StreamHeader) -> Result<RawEvent, WireError> {
        let payload = match self.payload {
            WirePayload::Op { op_addr, op_type, backend, name, dims, srcs, pmc, expert_count, expert_ids } => {
                let backend = Backend::from_code(backend).ok_or_else(|| WireError::Malformed {
                    offset: 0,
                    reason: format!("unknown backend code {backend}"),
                })?;
                let op_type = OpType::from_code(op_type);
                let end = name.iter().position(|b| *b == 0).unwrap_or(NAME_BYTES);
                let op_name = String::from_utf8_lossy(&name[..end]).into_owned();
                let tensor_ok = stream.str && self.flags & FLAG_TENSOR_UNREADABLE == 0;
                let pmc_ok = stream.pmc && backend == Backend::Cpu && self.flags & FLAG_PMC_UNREADABLE == 0;
                let experts_ok =
                    op_type == OpType::MulMatId && expert_count > 0 && self.flags & FLAG_EXPERTS_UNREADABLE == 0;
                Payload::Op(OpPayload {
                    op_addr: Addr(op_addr),
                    op_type,
                    op_name,
                    backend,
                    dims: tensor_ok.then_some(dims),
                    src_addrs: tensor_ok.then(|| srcs.iter().filter(|a| **a != 0).map(|a| Addr(*a)).collect()),
                    pmc: pmc_ok.then(|| pmc[..stream.npmc as usize].to_vec()),
                    expert_ids: experts_ok.then(|| expert_ids[..expert_count as usize].to_vec()),
                })
            }
            WirePayload::Graph { guid } => {
                Payload::Graph(GraphPayload { backend_guid: String::from_utf8_lossy(&guid).into_owned() })
            }
            WirePayload::Token { batch_size } => Payload::Token(TokenPayload { batch_size }),
            WirePayload::Sched { prev_tid, next_tid, wakee_tid, prev_state } => {
                if self.kind == ProbeKind::SchedSwitch {
                    Payload::Sched(SchedPayload::Switch { prev_tid, next_tid, prev_state })
                } else {
                    Payload::Sched(SchedPayload::Wakeup { wakee_tid })
                }
            }
        };
        Ok(RawEvent { kind: self.kind, ts_ns: self.ts_ns, pid: self.pid, tid: self.tid, cpu: self.cpu, seq, payload })
    }
}

/// One item taken from a kernel buffer.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Polled {
    Record(WireRecord),
    /// The perf buffer reported this many lost samples.
    Lost(u64),
}

/// Anything the consumer can drain records from.
pub trait BufferSource {
    fn stream_header(&self) -> StreamHeader;
    fn poll(&mut self) -> Result<Option<Polled>, WireError>;
}

/// Reads a recorded stream: a header record, then records and lost markers.
pub struct WireStream<R> {
    input: R,
    header: StreamHeader,
    offset: u64,
}

impl<R: Read> WireStream<R> {
    pub fn new(mut input: R) -> Result<Self, WireError> {
        let mut buf = [0u8; RECORD_SIZE];
        let got = read_full(&mut input, &mut buf)?;
        if got != RECORD_SIZE {
            return Err(WireError::Malformed { offset: 0, reason: format!("stream header is {got} bytes") });
        }
        let header = StreamHeader::decode(&buf)?;
        Ok(WireStream { input, header, offset: RECORD_SIZE as u64 })
    }
}

fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match input.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

impl<R: Read> BufferSource for WireStream<R> {
    fn stream_header(&self) -> StreamHeader {
        self.header
    }

    fn poll(&mut self) -> Result<Option<Polled>, WireError> {
        let mut buf = [0u8; RECORD_SIZE];
        let got = read_full(&mut self.input, &mut buf)?;
        let offset = self.offset;
        if got == 0 {
            return Ok(None);
        }
        if got != RECORD_SIZE {
            return Err(WireError::Malformed {
                offset,
                reason: format!("truncated record: {got} of {RECORD_SIZE} bytes"),
            });
        }
        self.offset += RECORD_SIZE as u64;
        if buf[0] == LOST_MARKER_TAG {
            return Ok(Some(Polled::Lost(get_u64(&buf, 1))));
        }
        WireRecord::decode(&buf, offset).map(|r| Some(Polled::Record(r)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(str: bool, pmc: bool) -> StreamHeader {
        StreamHeader { version: WIRE_VERSION, npmc: 2, str, pmc, perf_buffer: true }
    }

    fn op_event() -> RawEvent {
        RawEvent {
            kind: ProbeKind::OpEnter,
            ts_ns: 123,
            pid: 10,
            tid: 11,
            cpu: 6,
            seq: 0,
            payload: Payload::Op(OpPayload {
                op_addr: Addr(0xabc0),
                op_type: OpType::MulMat,
                op_name: "ffn_out-0".into(),
                backend: Backend::Cpu,
                dims: Some([2048, 1, 1, 1]),
                src_addrs: Some(vec![Addr(0x10), Addr(0x20)]),
                pmc: Some(vec![5, 6]),
                expert_ids: None,
            }),
        }
    }

    #[test]
    fn layout_offsets() {
        let rec = WireRecord::from_event(&op_event()).unwrap();
        let buf = rec.encode();
        assert_eq!(buf[0], ProbeKind::OpEnter.code());
        assert_eq!(get_u64(&buf, 1), 123);
        assert_eq!(get_u32(&buf, 13), 11);
        assert_eq!(get_u32(&buf, 17), 6);
        assert_eq!(get_u64(&buf, HEADER_SIZE), 0xabc0);
        assert_eq!(&buf[HEADER_SIZE + OFF_NAME..HEADER_SIZE + OFF_NAME + 9], b"ffn_out-0");
        assert_eq!(get_u64(&buf, HEADER_SIZE + OFF_DIMS), 2048);
        assert_eq!(get_u64(&buf, HEADER_SIZE + OFF_SRCS + 8), 0x20);
        assert_eq!(get_u64(&buf, HEADER_SIZE + OFF_PMC + 8), 6);
        assert_eq!(WireRecord::decode(&buf, 0).unwrap(), rec);
    }

    #[test]
    fn decode_honours_flags() {
        let rec = WireRecord::from_event(&op_event()).unwrap();
        let ev = rec.clone().into_event(0, &stream(true, true)).unwrap();
        assert_eq!(ev, op_event());

        let off = rec.clone().into_event(0, &stream(false, false)).unwrap();
        let op = off.op().unwrap();
        assert!(op.dims.is_none() && op.src_addrs.is_none() && op.pmc.is_none());

        let mut broken = rec;
        broken.flags |= FLAG_TENSOR_UNREADABLE;
        let ev = broken.into_event(3, &stream(true, true)).unwrap();
        let op = ev.op().unwrap();
        assert!(op.dims.is_none() && op.src_addrs.is_none());
        assert_eq!(op.pmc, Some(vec![5, 6]));
        assert_eq!(ev.seq, 3);
    }

    #[test]
    fn long_names_truncate_with_flag() {
        let mut ev = op_event();
        if let Payload::Op(op) = &mut ev.payload {
            op.op_name = "x".repeat(80);
        }
        let rec = WireRecord::from_event(&ev).unwrap();
        assert_ne!(rec.flags & FLAG_NAME_TRUNCATED, 0);
        let back = rec.into_event(0, &stream(true, true)).unwrap();
        assert_eq!(back.op().unwrap().op_name.len(), 63);
    }

    #[test]
    fn stream_reports_lost_and_truncation() {
        let header = stream(true, false);
        let mut bytes = header.encode().to_vec();
        bytes.extend_from_slice(&WireRecord::from_event(&op_event()).unwrap().encode());
        bytes.extend_from_slice(&encode_lost(7));
        bytes.extend_from_slice(&[1, 2, 3]);
        let mut s = WireStream::new(&bytes[..]).unwrap();
        assert_eq!(s.stream_header(), header);
        assert!(matches!(s.poll().unwrap(), Some(Polled::Record(_))));
        assert_eq!(s.poll().unwrap(), Some(Polled::Lost(7)));
        match s.poll() {
            Err(WireError::Malformed { offset, .. }) => assert_eq!(offset, 3 * RECORD_SIZE as u64),
            other => panic!("expected malformed, got {other:?}"),
        }
    }

    #[test]
    fn bad_kind_tag() {
        let mut buf = WireRecord::from_event(&op_event()).unwrap().encode();
        buf[0] = 0x42;
        assert!(matches!(WireRecord::decode(&buf, 99), Err(WireError::Malformed { offset: 99, .. })));
    }
}
