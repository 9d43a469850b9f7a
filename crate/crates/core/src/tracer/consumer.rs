use std::collections::{HashMap, VecDeque};

use super::qos::{ProbeMask, QosController, QosDecision};
use super::TracerError;
use crate::event::{ProbeKind, SessionHeader, TraceSession};
use crate::wire::{BufferSource, Polled};

/// Where the consumer writes the probe-class mask the handlers check first.
pub trait ControlMap {
    fn write_mask(&mut self, mask: ProbeMask);
}

/// Keeps every mask written, for replay and tests.
#[derive(Debug, Default, Clone)]
pub struct RecordingControlMap {
    pub writes: Vec<ProbeMask>,
}

impl ControlMap for RecordingControlMap {
    fn write_mask(&mut self, mask: ProbeMask) {
        self.writes.push(mask);
    }
}

/// Drains handler buffers into a session. Sequence numbers are assigned
/// here, and perf-buffer loss reports advance the counter so the loss shows
/// up as a seq gap downstream.
pub struct Consumer {
    session: TraceSession,
    next_seq: u64,
    qos: Option<QosController>,
    tpots: VecDeque<u64>,
    open_tokens: HashMap<u32, u64>,
    decisions: Vec<QosDecision>,
}

impl Consumer {
    pub fn new(header: SessionHeader) -> Self {
        Consumer {
            session: TraceSession::new(header),
            next_seq: 0,
            qos: None,
            tpots: VecDeque::new(),
            open_tokens: HashMap::new(),
            decisions: Vec::new(),
        }
    }

    pub fn with_qos(mut self, qos: QosController) -> Self {
        self.qos = Some(qos);
        self
    }

    pub fn session(&self) -> &TraceSession {
        &self.session
    }

    pub fn qos(&self) -> Option<&QosController> {
        self.qos.as_ref()
    }

    /// Controller decisions that changed the mask, in order.
    pub fn decisions(&self) -> &[QosDecision] {
        &self.decisions
    }

    pub fn finish(self) -> TraceSession {
        self.session
    }

    /// Drains `source` until it is empty and returns how many events were
    /// appended to the session.
    pub fn poll_and_decode(
        &mut self,
        source: &mut dyn BufferSource,
        control: &mut dyn ControlMap,
    ) -> Result<usize, TracerError> {
        let stream = source.stream_header();
        if stream.npmc as usize != self.session.header.pmc_specs.len() && stream.pmc {
            return Err(TracerError::Config(format!(
                "stream carries {} counters, session configures {}",
                stream.npmc,
                self.session.header.pmc_specs.len()
            )));
        }
        self.session.header.flags.str = stream.str;
        self.session.header.flags.pmc = stream.pmc;
        self.session.header.flags.perf_buffer = stream.perf_buffer;

        let mut appended = 0;
        while let Some(item) = source.poll()? {
            match item {
                Polled::Lost(n) => {
                    self.session.header.dropped_events += n;
                    self.next_seq += n;
                }
                Polled::Record(record) => {
                    let event = record.into_event(self.next_seq, &stream)?;
                    self.next_seq += 1;
                    match event.kind {
                        ProbeKind::TokenEnter => {
                            self.open_tokens.insert(event.tid, event.ts_ns);
                        }
                        ProbeKind::TokenExit => {
                            if let Some(start) = self.open_tokens.remove(&event.tid) {
                                self.on_token(event.ts_ns.saturating_sub(start), control);
                            }
                        }
                        _ => {}
                    }
                    self.session.events.push(event);
                    appended += 1;
                }
            }
        }
        Ok(appended)
    }

    fn on_token(&mut self, tpot_ns: u64, control: &mut dyn ControlMap) {
        let Some(qos) = self.qos.as_mut() else { return };
        self.tpots.push_back(tpot_ns);
        while self.tpots.len() > qos.window.max(1) {
            self.tpots.pop_front();
        }
        let window: Vec<u64> = self.tpots.iter().copied().collect();
        let decision = qos.qos_update(&window);
        if !decision.toggled.is_empty() {
            control.write_mask(decision.mask);
            self.decisions.push(decision);
        }
    }
}

/// Free-function form of [`Consumer::poll_and_decode`].
pub fn poll_and_decode(
    source: &mut dyn BufferSource,
    sink: &mut Consumer,
    control: &mut dyn ControlMap,
) -> Result<usize, TracerError> {
    sink.poll_and_decode(source, control)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Payload, RawEvent, TokenPayload};
    use crate::tracer::qos::ProbeClass;
    use crate::wire::{encode_lost, StreamHeader, WireRecord, WireStream, WIRE_VERSION};

    fn token(kind: ProbeKind, ts_ns: u64) -> RawEvent {
        RawEvent {
            kind,
            ts_ns,
            pid: 1,
            tid: 1,
            cpu: 0,
            seq: 0,
            payload: Payload::Token(TokenPayload { batch_size: 1 }),
        }
    }

    fn stream_bytes(events: &[RawEvent], lost_after: Option<(usize, u64)>) -> Vec<u8> {
        let header = StreamHeader { version: WIRE_VERSION, npmc: 0, str: false, pmc: false, perf_buffer: true };
        let mut bytes = header.encode().to_vec();
        for (i, e) in events.iter().enumerate() {
            bytes.extend_from_slice(&WireRecord::from_event(e).unwrap().encode());
            if let Some((at, n)) = lost_after {
                if at == i {
                    bytes.extend_from_slice(&encode_lost(n));
                }
            }
        }
        bytes
    }

    #[test]
    fn three_records_three_events() {
        let events = [token(ProbeKind::TokenEnter, 0), token(ProbeKind::TokenExit, 5), token(ProbeKind::TokenEnter, 9)];
        let bytes = stream_bytes(&events, None);
        let mut source = WireStream::new(&bytes[..]).unwrap();
        let mut consumer = Consumer::new(SessionHeader::default());
        let n = consumer.poll_and_decode(&mut source, &mut RecordingControlMap::default()).unwrap();
        assert_eq!(n, 3);
        let seqs: Vec<u64> = consumer.session().events.iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
    }

    #[test]
    fn lost_count_becomes_gap_and_counter() {
        let events = [token(ProbeKind::TokenEnter, 0), token(ProbeKind::TokenExit, 5)];
        let bytes = stream_bytes(&events, Some((0, 4)));
        let mut source = WireStream::new(&bytes[..]).unwrap();
        let mut consumer = Consumer::new(SessionHeader::default());
        consumer.poll_and_decode(&mut source, &mut RecordingControlMap::default()).unwrap();
        let s = consumer.finish();
        assert_eq!(s.header.dropped_events, 4);
        assert_eq!(s.events[1].seq, 5);
        assert_eq!(s.seq_gaps(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn slow_tokens_write_control_map() {
        let mut events = Vec::new();
        for i in 0..3u64 {
            events.push(token(ProbeKind::TokenEnter, i * 1_000_000_000));
            events.push(token(ProbeKind::TokenExit, i * 1_000_000_000 + 400_000_000));
        }
        let bytes = stream_bytes(&events, None);
        let mut source = WireStream::new(&bytes[..]).unwrap();
        let mut consumer = Consumer::new(SessionHeader::default()).with_qos(QosController::new(5.0));
        let mut control = RecordingControlMap::default();
        consumer.poll_and_decode(&mut source, &mut control).unwrap();
        assert_eq!(control.writes.len(), 3);
        let last = *control.writes.last().unwrap();
        assert!(!last.contains(ProbeClass::Pmc));
        assert!(!last.contains(ProbeClass::Str));
        assert!(!last.contains(ProbeClass::Op));
        assert!(last.contains(ProbeClass::Graph));
    }
}
