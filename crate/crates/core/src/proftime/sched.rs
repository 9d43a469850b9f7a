use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::StateInterval;
use crate::event::{RawEvent, SchedPayload, ThreadState};

/// How a switch-out's `prev_state` word maps to a thread state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedSemantics {
    /// 1 means runnable, anything else idle.
    #[default]
    Compat,
    /// 0 (TASK_RUNNING, preempted) means runnable, anything else idle.
    Kernel,
}

impl SchedSemantics {
    pub fn switched_out(self, prev_state: i64) -> ThreadState {
        let runnable = match self {
            SchedSemantics::Compat => prev_state == 1,
            SchedSemantics::Kernel => prev_state == 0,
        };
        if runnable {
            ThreadState::Runnable
        } else {
            ThreadState::Idle
        }
    }
}

impl FromStr for SchedSemantics {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "compat" => Ok(SchedSemantics::Compat),
            "kernel" => Ok(SchedSemantics::Kernel),
            other => Err(format!("unknown sched semantics {other:?} (expected compat or kernel)")),
        }
    }
}

impl fmt::Display for SchedSemantics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedSemantics::Compat => "compat",
            SchedSemantics::Kernel => "kernel",
        })
    }
}

#[derive(Default)]
struct Tracker {
    current: Option<(ThreadState, u32, u64)>,
    intervals: Vec<StateInterval>,
}

impl Tracker {
    fn close(&mut self, ts: u64) {
        let Some((state, cpu, since)) = self.current else { return };
        if ts <= since {
            return;
        }
        match self.intervals.last_mut() {
            Some(last) if last.state == state && last.cpu == cpu && last.end_ns == since => last.end_ns = ts,
            _ => self.intervals.push(StateInterval { state, start_ns: since, end_ns: ts, cpu }),
        }
    }

    fn enter(&mut self, ts: u64, state: ThreadState, cpu: u32) {
        self.close(ts);
        self.current = Some((state, cpu, ts));
    }

    /// Closes the running interval at `ts` without changing state.
    fn keep(&mut self, ts: u64) {
        self.close(ts);
        if let Some(cur) = self.current.as_mut() {
            cur.2 = cur.2.max(ts);
        }
    }
}

/// State intervals per traced thread from time-ordered scheduler events.
/// Intervals run from a thread's first scheduler event to its last; a wakeup
/// of a running thread keeps it running and is reported as an anomaly.
pub fn derive_thread_states(
    sched: &[RawEvent],
    inference_tids: &BTreeSet<u32>,
    semantics: SchedSemantics,
) -> (BTreeMap<u32, Vec<StateInterval>>, Vec<String>) {
    let mut trackers: BTreeMap<u32, Tracker> = BTreeMap::new();
    let mut anomalies = Vec::new();
    for e in sched {
        match e.sched() {
            Some(SchedPayload::Switch { prev_tid, next_tid, prev_state }) => {
                if prev_tid == next_tid {
                    continue;
                }
                if inference_tids.contains(prev_tid) {
                    trackers.entry(*prev_tid).or_default().enter(e.ts_ns, semantics.switched_out(*prev_state), e.cpu);
                }
                if inference_tids.contains(next_tid) {
                    trackers.entry(*next_tid).or_default().enter(e.ts_ns, ThreadState::Running, e.cpu);
                }
            }
            Some(SchedPayload::Wakeup { wakee_tid }) if inference_tids.contains(wakee_tid) => {
                let t = trackers.entry(*wakee_tid).or_default();
                match t.current {
                    Some((ThreadState::Running, _, _)) => {
                        anomalies.push(format!("seq {}: wakeup of running thread {wakee_tid}", e.seq));
                        t.keep(e.ts_ns);
                    }
                    _ => t.enter(e.ts_ns, ThreadState::Runnable, e.cpu),
                }
            }
            _ => {}
        }
    }
    let states =
        trackers.into_iter().filter(|(_, t)| !t.intervals.is_empty()).map(|(tid, t)| (tid, t.intervals)).collect();
    (states, anomalies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Payload, ProbeKind};

    fn switch(ts: u64, prev: u32, next: u32, prev_state: i64, cpu: u32) -> RawEvent {
        RawEvent {
            kind: ProbeKind::SchedSwitch,
            ts_ns: ts,
            pid: 1,
            tid: prev,
            cpu,
            seq: ts,
            payload: Payload::Sched(SchedPayload::Switch { prev_tid: prev, next_tid: next, prev_state }),
        }
    }

    fn wakeup(ts: u64, wakee: u32) -> RawEvent {
        RawEvent {
            kind: ProbeKind::SchedWakeup,
            ts_ns: ts,
            pid: 1,
            tid: 0,
            cpu: 0,
            seq: ts,
            payload: Payload::Sched(SchedPayload::Wakeup { wakee_tid: wakee }),
        }
    }

    fn tids() -> BTreeSet<u32> {
        [7].into_iter().collect()
    }

    #[test]
    fn three_event_rules() {
        let events = [wakeup(10, 7), switch(20, 0, 7, 0, 0), switch(30, 7, 0, 1, 0), wakeup(40, 7)];
        let (states, anomalies) = derive_thread_states(&events, &tids(), SchedSemantics::Compat);
        let got: Vec<_> = states[&7].iter().map(|i| (i.state, i.start_ns, i.end_ns)).collect();
        assert_eq!(
            got,
            vec![(ThreadState::Runnable, 10, 20), (ThreadState::Running, 20, 30), (ThreadState::Runnable, 30, 40)]
        );
        assert!(anomalies.is_empty());
    }

    #[test]
    fn prev_state_zero_is_idle_in_compat_mode() {
        let events = [switch(0, 0, 7, 0, 1), switch(5, 7, 0, 0, 1), switch(9, 0, 7, 0, 1)];
        let (states, _) = derive_thread_states(&events, &tids(), SchedSemantics::Compat);
        assert_eq!(states[&7][1].state, ThreadState::Idle);
        let (states, _) = derive_thread_states(&events, &tids(), SchedSemantics::Kernel);
        assert_eq!(states[&7][1].state, ThreadState::Runnable);
    }

    #[test]
    fn wakeup_while_running_is_anomaly() {
        let events = [switch(0, 0, 7, 0, 1), wakeup(5, 7), switch(9, 7, 0, 0, 1)];
        let (states, anomalies) = derive_thread_states(&events, &tids(), SchedSemantics::Compat);
        assert_eq!(anomalies.len(), 1);
        assert_eq!(states[&7].len(), 1);
        assert_eq!((states[&7][0].start_ns, states[&7][0].end_ns), (0, 9));
    }

    #[test]
    fn untraced_threads_ignored() {
        let events = [switch(0, 3, 4, 1, 0)];
        let (states, _) = derive_thread_states(&events, &tids(), SchedSemantics::Compat);
        assert!(states.is_empty());
    }
}
