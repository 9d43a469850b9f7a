use std::fmt;

use serde::{Deserialize, Serialize};

/// Independently switchable tracing features, as written to the control map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeClass {
    Token,
    Graph,
    Op,
    Str,
    Pmc,
}

impl ProbeClass {
    pub const ALL: [ProbeClass; 5] =
        [ProbeClass::Token, ProbeClass::Graph, ProbeClass::Op, ProbeClass::Str, ProbeClass::Pmc];

    pub fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Classes shed first when decoding falls below target. Token probes are
/// not listed: they measure the speed the controller reacts to.
pub const DISABLE_ORDER: [ProbeClass; 4] = [ProbeClass::Pmc, ProbeClass::Str, ProbeClass::Op, ProbeClass::Graph];

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbeMask(pub u8);

impl ProbeMask {
    pub const FULL: ProbeMask = ProbeMask(0b1_1111);

    pub fn contains(self, class: ProbeClass) -> bool {
        self.0 & class.bit() != 0
    }

    pub fn with(self, class: ProbeClass, on: bool) -> ProbeMask {
        if on {
            ProbeMask(self.0 | class.bit())
        } else {
            ProbeMask(self.0 & !class.bit())
        }
    }

    pub fn enabled(self) -> impl Iterator<Item = ProbeClass> {
        ProbeClass::ALL.into_iter().filter(move |c| self.contains(*c))
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }
}

impl Default for ProbeMask {
    fn default() -> Self {
        ProbeMask::FULL
    }
}

impl fmt::Debug for ProbeMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.enabled()).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggle {
    pub class: ProbeClass,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QosDecision {
    pub mask: ProbeMask,
    pub toggled: Vec<Toggle>,
}

/// Sheds tracing features while decoding runs below the tokens/s target and
/// restores them once speed clears the target by the hysteresis margin.
#[derive(Debug, Clone, PartialEq)]
pub struct QosController {
    pub target_tps: f64,
    pub window: usize,
    pub hysteresis_margin: f64,
    pub mask: ProbeMask,
}

impl QosController {
    pub const DEFAULT_WINDOW: usize = 16;
    pub const DEFAULT_MARGIN: f64 = 0.2;

    pub fn new(target_tps: f64) -> Self {
        QosController {
            target_tps,
            window: Self::DEFAULT_WINDOW,
            hysteresis_margin: Self::DEFAULT_MARGIN,
            mask: ProbeMask::FULL,
        }
    }

    /// Mean decoding speed over the last `window` TPOT samples.
    pub fn measured_tps(&self, recent_tpot_ns: &[u64]) -> Option<f64> {
        let start = recent_tpot_ns.len().saturating_sub(self.window.max(1));
        let window = &recent_tpot_ns[start..];
        if window.is_empty() {
            return None;
        }
        let mean = window.iter().map(|t| *t as f64).sum::<f64>() / window.len() as f64;
        Some(if mean > 0.0 { 1e9 / mean } else { f64::INFINITY })
    }

    /// At most one class changes per call: the next one in [`DISABLE_ORDER`]
    /// when too slow, the most recently shed one when fast enough again.
    pub fn qos_update(&mut self, recent_tpot_ns: &[u64]) -> QosDecision {
        let Some(tps) = self.measured_tps(recent_tpot_ns) else {
            return QosDecision { mask: self.mask, toggled: Vec::new() };
        };
        let mut toggled = Vec::new();
        if tps < self.target_tps {
            if let Some(class) = DISABLE_ORDER.iter().copied().find(|c| self.mask.contains(*c)) {
                self.mask = self.mask.with(class, false);
                toggled.push(Toggle { class, enabled: false });
            }
        } else if tps > self.target_tps * (1.0 + self.hysteresis_margin) {
            if let Some(class) = DISABLE_ORDER.iter().rev().copied().find(|c| !self.mask.contains(*c)) {
                self.mask = self.mask.with(class, true);
                toggled.push(Toggle { class, enabled: true });
            }
        }
        // token probes are never shed
        self.mask = self.mask.with(ProbeClass::Token, true);
        QosDecision { mask: self.mask, toggled }
    }
}
