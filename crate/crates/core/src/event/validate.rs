use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use super::*;

/// One broken invariant, tied to the event that breaks it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Violation {
    pub seq: u64,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seq {}: {}", self.seq, self.message)
    }
}

/// Checks every event against the type invariants of the trace model.
///
/// The result is sorted by `(seq, message)`, so it does not depend on the
/// order events appear in the session.
pub fn validate_session(session: &TraceSession) -> Vec<Violation> {
    let header = &session.header;
    let mut out = Vec::new();
    let mut seen: HashMap<u64, usize> = HashMap::new();

    for event in &session.events {
        let mut flag = |message: String| out.push(Violation { seq: event.seq, message });

        *seen.entry(event.seq).or_default() += 1;

        if !event.payload.matches(event.kind) {
            flag(format!("{:?} event carries a mismatched payload", event.kind));
            continue;
        }
        let needs_traced_tid = !event.kind.is_sched();
        if needs_traced_tid && !header.inference_tids.contains(&event.tid) {
            flag(format!("tid {} is not an inference thread", event.tid));
        }

        match &event.payload {
            Payload::Op(op) => check_op(header, op, &mut flag),
            Payload::Graph(g) => {
                if !g.guid_is_well_formed() {
                    flag(format!("backend guid {:?} is not 16 lowercase hex digits", g.backend_guid));
                }
            }
            Payload::Token(t) => {
                if t.batch_size == 0 {
                    flag("batch_size must be at least 1".into());
                }
            }
            Payload::Sched(_) => {}
        }
    }

    for event in &session.events {
        if seen.get(&event.seq).copied().unwrap_or(0) > 1 {
            out.push(Violation { seq: event.seq, message: "duplicate seq".into() });
        }
    }

    out.sort();
    out.dedup();
    out
}

fn check_op(header: &SessionHeader, op: &OpPayload, flag: &mut impl FnMut(String)) {
    if op.op_name.len() > MAX_OP_NAME {
        flag(format!("op_name is {} bytes, limit {MAX_OP_NAME}", op.op_name.len()));
    }
    if !header.flags.str {
        if op.dims.is_some() {
            flag("dims present while the str flag is off".into());
        }
        if op.src_addrs.is_some() {
            flag("src_addrs present while the str flag is off".into());
        }
    }
    if let Some(srcs) = &op.src_addrs {
        if srcs.len() > MAX_SRCS {
            flag(format!("{} source addresses, limit {MAX_SRCS}", srcs.len()));
        }
    }
    if let Some(pmc) = &op.pmc {
        if !header.flags.pmc {
            flag("pmc readings present while the pmc flag is off".into());
        } else if op.backend != Backend::Cpu {
            flag(format!("pmc readings on the {} backend", op.backend.label()));
        }
        if pmc.len() != header.pmc_specs.len() {
            flag(format!("{} pmc readings for {} configured counters", pmc.len(), header.pmc_specs.len()));
        }
    }
    if let Some(ids) = &op.expert_ids {
        if op.op_type != OpType::MulMatId {
            flag(format!("expert_ids on a {} op", op.op_type));
        } else {
            match header.moe {
                Some(moe) => {
                    if ids.len() != moe.experts_per_token as usize {
                        flag(format!(
                            "{} expert ids, session activates {} per token",
                            ids.len(),
                            moe.experts_per_token
                        ));
                    }
                    if let Some(bad) = ids.iter().find(|id| **id >= moe.experts) {
                        flag(format!("expert id {bad} out of range (experts = {})", moe.experts));
                    }
                }
                None => flag("expert_ids in a session without MoE configuration".into()),
            }
        }
    }
}
