//! On-disk session formats.
//!
//! JSON Lines: line 0 is `{"v":1,"profinfer_header":{...}}`, every following
//! line is one [`RawEvent`]. Binary: `PIBN` magic, one version byte, then
//! length-prefixed frames (u32 little-endian). Frame 0 holds the header as
//! JSON, every later frame one event in the compact layout below.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::*;

pub const FORMAT_VERSION: u8 = 1;
pub const BINARY_MAGIC: &[u8; 4] = b"PIBN";

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing session header")]
    MissingHeader,
    #[error("unsupported format version {0}")]
    Version(u64),
    #[error("binary frame at byte {offset}: {reason}")]
    Frame { offset: u64, reason: String },
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    v: u64,
    profinfer_header: SessionHeader,
}

#[derive(Serialize)]
struct HeaderLineRef<'a> {
    v: u64,
    profinfer_header: &'a SessionHeader,
}

pub fn write_session_jsonl<W: Write>(session: &TraceSession, out: W) -> Result<(), CodecError> {
    let mut out = BufWriter::new(out);
    let header = HeaderLineRef { v: FORMAT_VERSION as u64, profinfer_header: &session.header };
    serde_json::to_writer(&mut out, &header).map_err(|source| CodecError::Json { line: 0, source })?;
    out.write_all(b"\n")?;
    for (i, event) in session.events.iter().enumerate() {
        serde_json::to_writer(&mut out, event).map_err(|source| CodecError::Json { line: i + 1, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_session_jsonl<R: Read>(input: R) -> Result<TraceSession, CodecError> {
    let reader = BufReader::new(input);
    let mut header = None;
    let mut events = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let parsed: HeaderLine =
                serde_json::from_str(&line).map_err(|source| CodecError::Json { line: line_no, source })?;
            if parsed.v != FORMAT_VERSION as u64 {
                return Err(CodecError::Version(parsed.v));
            }
            header = Some(parsed.profinfer_header);
            continue;
        }
        let event: RawEvent =
            serde_json::from_str(&line).map_err(|source| CodecError::Json { line: line_no, source })?;
        events.push(event);
    }
    Ok(TraceSession { header: header.ok_or(CodecError::MissingHeader)?, events })
}

/// Reads either format, picking by the leading magic bytes.
pub fn read_session(path: &Path) -> Result<TraceSession, CodecError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(BINARY_MAGIC) {
        read_session_binary(&bytes[..])
    } else {
        read_session_jsonl(&bytes[..])
    }
}

const TAG_OP: u8 = 0;
const TAG_GRAPH: u8 = 1;
const TAG_TOKEN: u8 = 2;
const TAG_SWITCH: u8 = 3;
const TAG_WAKEUP: u8 = 4;

const HAS_DIMS: u8 = 1;
const HAS_SRCS: u8 = 2;
const HAS_PMC: u8 = 4;
const HAS_EXPERTS: u8 = 8;

pub fn write_session_binary<W: Write>(session: &TraceSession, out: W) -> Result<(), CodecError> {
    let mut out = BufWriter::new(out);
    out.write_all(BINARY_MAGIC)?;
    out.write_all(&[FORMAT_VERSION])?;
    let header = serde_json::to_vec(&session.header).map_err(|source| CodecError::Json { line: 0, source })?;
    write_frame(&mut out, &header)?;
    let mut buf = Vec::with_capacity(256);
    for event in &session.events {
        buf.clear();
        encode_event(event, &mut buf);
        write_frame(&mut out, &buf)?;
    }
    out.flush()?;
    Ok(())
}

fn write_frame<W: Write>(out: &mut W, frame: &[u8]) -> io::Result<()> {
    out.write_all(&(frame.len() as u32).to_le_bytes())?;
    out.write_all(frame)
}

fn encode_event(e: &RawEvent, buf: &mut Vec<u8>) {
    buf.push(e.kind.code());
    buf.extend_from_slice(&e.ts_ns.to_le_bytes());
    buf.extend_from_slice(&e.pid.to_le_bytes());
    buf.extend_from_slice(&e.tid.to_le_bytes());
    buf.extend_from_slice(&e.cpu.to_le_bytes());
    buf.extend_from_slice(&e.seq.to_le_bytes());
    match &e.payload {
        Payload::Op(op) => {
            buf.push(TAG_OP);
            buf.extend_from_slice(&op.op_addr.0.to_le_bytes());
            buf.extend_from_slice(&op.op_type.code().to_le_bytes());
            buf.push(op.backend.code());
            put_str(buf, &op.op_name);
            let mut present = 0;
            if op.dims.is_some() {
                present |= HAS_DIMS;
            }
            if op.src_addrs.is_some() {
                present |= HAS_SRCS;
            }
            if op.pmc.is_some() {
                present |= HAS_PMC;
            }
            if op.expert_ids.is_some() {
                present |= HAS_EXPERTS;
            }
            buf.push(present);
            if let Some(dims) = op.dims {
                for d in dims {
                    buf.extend_from_slice(&d.to_le_bytes());
                }
            }
            if let Some(srcs) = &op.src_addrs {
                buf.extend_from_slice(&(srcs.len() as u32).to_le_bytes());
                for s in srcs {
                    buf.extend_from_slice(&s.0.to_le_bytes());
                }
            }
            if let Some(pmc) = &op.pmc {
                buf.extend_from_slice(&(pmc.len() as u32).to_le_bytes());
                for v in pmc {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            if let Some(ids) = &op.expert_ids {
                buf.extend_from_slice(&(ids.len() as u32).to_le_bytes());
                for id in ids {
                    buf.extend_from_slice(&id.to_le_bytes());
                }
            }
        }
        Payload::Graph(g) => {
            buf.push(TAG_GRAPH);
            put_str(buf, &g.backend_guid);
        }
        Payload::Token(t) => {
            buf.push(TAG_TOKEN);
            buf.extend_from_slice(&t.batch_size.to_le_bytes());
        }
        Payload::Sched(SchedPayload::Switch { prev_tid, next_tid, prev_state }) => {
            buf.push(TAG_SWITCH);
            buf.extend_from_slice(&prev_tid.to_le_bytes());
            buf.extend_from_slice(&next_tid.to_le_bytes());
            buf.extend_from_slice(&prev_state.to_le_bytes());
        }
        Payload::Sched(SchedPayload::Wakeup { wakee_tid }) => {
            buf.push(TAG_WAKEUP);
            buf.extend_from_slice(&wakee_tid.to_le_bytes());
        }
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> CodecError {
        CodecError::Frame { offset: self.base + self.pos as u64, reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: wanted {n} more bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| self.err(e.to_string()))
    }

    fn count(&mut self) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n > self.bytes.len() {
            return Err(self.err(format!("implausible element count {n}")));
        }
        Ok(n)
    }
}

pub fn read_session_binary<R: Read>(mut input: R) -> Result<TraceSession, CodecError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if !bytes.starts_with(BINARY_MAGIC) {
        return Err(CodecError::Frame { offset: 0, reason: "missing PIBN magic".into() });
    }
    let mut cur = Cursor { bytes: &bytes, pos: BINARY_MAGIC.len(), base: 0 };
    let version = cur.u8()?;
    if version != FORMAT_VERSION {
        return Err(CodecError::Version(version as u64));
    }
    let mut frames = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()? as usize;
        let start = cur.pos;
        cur.take(len)?;
        frames.push((start, &bytes[start..start + len]));
    }
    let (_, header_frame) = frames.first().ok_or(CodecError::MissingHeader)?;
    let header: SessionHeader =
        serde_json::from_slice(header_frame).map_err(|source| CodecError::Json { line: 0, source })?;
    let mut events = Vec::with_capacity(frames.len().saturating_sub(1));
    for (start, frame) in &frames[1..] {
        let mut c = Cursor { bytes: frame, pos: 0, base: *start as u64 };
        let event = decode_event(&mut c)?;
        if c.pos != frame.len() {
            return Err(c.err("trailing bytes in event frame"));
        }
        events.push(event);
    }
    Ok(TraceSession { header, events })
}

fn decode_event(c: &mut Cursor<'_>) -> Result<RawEvent, CodecError> {
    let kind_code = c.u8()?;
    let kind = ProbeKind::from_code(kind_code).ok_or_else(|| c.err(format!("bad kind {kind_code}")))?;
    let ts_ns = c.u64()?;
    let pid = c.u32()?;
    let tid = c.u32()?;
    let cpu = c.u32()?;
    let seq = c.u64()?;
    let payload = match c.u8()? {
        TAG_OP => {
            let op_addr = Addr(c.u64()?);
            let op_type = OpType::from_code(c.u32()?);
            let backend_code = c.u8()?;
            let backend =
                Backend::from_code(backend_code).ok_or_else(|| c.err(format!("bad backend {backend_code}")))?;
            let op_name = c.string()?;
            let present = c.u8()?;
            let dims = if present & HAS_DIMS != 0 { Some([c.u64()?, c.u64()?, c.u64()?, c.u64()?]) } else { None };
            let src_addrs = if present & HAS_SRCS != 0 {
                let n = c.count()?;
                Some((0..n).map(|_| c.u64().map(Addr)).collect::<Result<Vec<_>, _>>()?)
            } else {
                None
            };
            let pmc = if present & HAS_PMC != 0 {
                let n = c.count()?;
                Some((0..n).map(|_| c.u64()).collect::<Result<Vec<_>, _>>()?)
            } else {
                None
            };
            let expert_ids = if present & HAS_EXPERTS != 0 {
                let n = c.count()?;
                Some((0..n).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?)
            } else {
                None
            };
            Payload::Op(OpPayload { op_addr, op_type, op_name, backend, dims, src_addrs, pmc, expert_ids })
        }
        TAG_GRAPH => Payload::Graph(GraphPayload { backend_guid: c.string()? }),
        TAG_TOKEN => Payload::Token(TokenPayload { batch_size: c.u32()? }),
        TAG_SWITCH => {
            Payload::Sched(SchedPayload::Switch { prev_tid: c.u32()?, next_tid: c.u32()?, prev_state: c.i64()? })
        }
        TAG_WAKEUP => Payload::Sched(SchedPayload::Wakeup { wakee_tid: c.u32()? }),
        other => return Err(c.err(format!("bad payload tag {other}"))),
    };
    Ok(RawEvent { kind, ts_ns, pid, tid, cpu, seq, payload })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_session() -> TraceSession {
        let mut header = SessionHeader::default();
        header.inference_tids.insert(7);
        header.flags = ProbeFlags::ALL_ON;
        header.pmc_specs = vec![PmcSpec::canonical_named(CYCLES).unwrap()];
        let mut s = TraceSession::new(header);
        s.events.push(RawEvent {
            kind: ProbeKind::OpEnter,
            ts_ns: 10,
            pid: 7,
            tid: 7,
            cpu: 4,
            seq: 0,
            payload: Payload::Op(OpPayload {
                op_addr: Addr(0x1000),
                op_type: OpType::Unknown(4242),
                op_name: "ffn_out-0".into(),
                backend: Backend::Cpu,
                dims: Some([1, 2, 3, 4]),
                src_addrs: Some(vec![Addr(1), Addr(2)]),
                pmc: Some(vec![99]),
                expert_ids: None,
            }),
        });
        s.events.push(RawEvent {
            kind: ProbeKind::SchedSwitch,
            ts_ns: 11,
            pid: 7,
            tid: 7,
            cpu: 4,
            seq: 1,
            payload: Payload::Sched(SchedPayload::Switch { prev_tid: 7, next_tid: 0, prev_state: -1 }),
        });
        s
    }

    #[test]
    fn jsonl_header_is_line_zero() {
        let mut out = Vec::new();
        write_session_jsonl(&tiny_session(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"v\":1,\"profinfer_header\":"));
        assert_eq!(read_session_jsonl(text.as_bytes()).unwrap(), tiny_session());
    }

    #[test]
    fn binary_roundtrip() {
        let mut out = Vec::new();
        write_session_binary(&tiny_session(), &mut out).unwrap();
        assert_eq!(&out[..4], BINARY_MAGIC);
        assert_eq!(out[4], FORMAT_VERSION);
        assert_eq!(read_session_binary(&out[..]).unwrap(), tiny_session());
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let mut out = Vec::new();
        write_session_binary(&tiny_session(), &mut out).unwrap();
        out.truncate(out.len() - 3);
        match read_session_binary(&out[..]) {
            Err(CodecError::Frame { offset, .. }) => assert!(offset > 5),
            other => panic!("expected frame error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let mut out = Vec::new();
        write_session_jsonl(&tiny_session(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap().replacen("{\"v\":1", "{\"v\":2", 1);
        assert!(matches!(read_session_jsonl(text.as_bytes()), Err(CodecError::Version(2))));
        assert!(matches!(read_session_jsonl("".as_bytes()), Err(CodecError::MissingHeader)));
    }
}
