use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plan::Level;
use super::qos::QosController;
use super::TracerError;
use crate::event::{MoeInfo, PmcSpec, ProbeFlags, SessionHeader};
use crate::proftime::SchedSemantics;

pub const CONFIG_ENV: &str = "PROFINFER_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QosConfig {
    pub target_tps: f64,
    pub window: usize,
    pub margin: f64,
    pub enabled: bool,
}

impl Default for QosConfig {
    fn default() -> Self {
        QosConfig {
            target_tps: 5.0,
            window: QosController::DEFAULT_WINDOW,
            margin: QosController::DEFAULT_MARGIN,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub pid: Option<u32>,
    pub binary: Option<PathBuf>,
    pub libraries: Vec<PathBuf>,
    /// Backend guid to label, as registered by the runtime.
    pub backends: BTreeMap<String, String>,
    pub moe: Option<MoeInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub sched_semantics: SchedSemantics,
    pub patterns: Vec<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { sched_semantics: SchedSemantics::Compat, patterns: vec!["kq".into(), "kqv".into()] }
    }
}

/// Tracer configuration file (TOML).
///
/// ```toml
/// levels = ["token", "graph", "op", "kernel"]
/// pmc = ["l3d_cache_refill", "mem_access_wr"]
///
/// [flags]
/// str = true
/// pmc = true
/// perf_buffer = false
///
/// [qos]
/// target_tps = 5.0
/// window = 16
/// margin = 0.2
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TracerConfig {
    pub levels: Vec<Level>,
    pub flags: ProbeFlags,
    pub pmc: Vec<String>,
    pub qos: QosConfig,
    pub target: TargetConfig,
    pub analysis: AnalysisConfig,
}

impl Default for TracerConfig {
    fn default() -> Self {
        TracerConfig {
            levels: vec![Level::Token, Level::Graph, Level::Op, Level::Kernel],
            flags: ProbeFlags { str: true, pmc: false, perf_buffer: true },
            pmc: Vec::new(),
            qos: QosConfig::default(),
            target: TargetConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl TracerConfig {
    pub fn parse(text: &str) -> Result<Self, TracerError> {
        let config: TracerConfig = toml::from_str(text).map_err(|e| TracerError::Config(e.to_string()))?;
        config.pmc_specs()?;
        if config.qos.window == 0 {
            return Err(TracerError::Config("qos.window must be at least 1".into()));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, TracerError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TracerError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Loads `explicit` if given, else the file named by `PROFINFER_CONFIG`,
    /// else the defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, TracerError> {
        if let Some(path) = explicit {
            return Self::load(path);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(path) if !path.is_empty() => Self::load(Path::new(&path)),
            _ => Ok(Self::default()),
        }
    }

    pub fn level_set(&self) -> BTreeSet<Level> {
        self.levels.iter().copied().collect()
    }

    pub fn pmc_specs(&self) -> Result<Vec<PmcSpec>, TracerError> {
        self.pmc
            .iter()
            .map(|name| {
                PmcSpec::canonical_named(name).ok_or_else(|| {
                    let known: Vec<String> = PmcSpec::canonical().into_iter().map(|s| s.name).collect();
                    TracerError::Config(format!("unknown counter {name:?}; known: {}", known.join(", ")))
                })
            })
            .collect()
    }

    pub fn qos_controller(&self) -> QosController {
        QosController {
            target_tps: self.qos.target_tps,
            window: self.qos.window,
            hysteresis_margin: self.qos.margin,
            ..QosController::new(self.qos.target_tps)
        }
    }

    pub fn session_header(&self, inference_tids: BTreeSet<u32>) -> Result<SessionHeader, TracerError> {
        let nthreads = inference_tids.len().max(1) as u32;
        Ok(SessionHeader {
            flags: self.flags,
            pmc_specs: if self.flags.pmc { self.pmc_specs()? } else { Vec::new() },
            inference_tids,
            qos_target_tps: self.qos.target_tps,
            nthreads,
            backend_names: self.target.backends.clone(),
            moe: self.target.moe,
            ..SessionHeader::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_file() {
        let text = r#"
levels = ["token", "op"]
pmc = ["l3d_cache_refill", "cycles"]

[flags]
str = true
pmc = true
perf_buffer = false

[qos]
target_tps = 7.5
window = 8
margin = 0.1

[target]
pid = 4242
binary = "/usr/bin/llama-cli"

[analysis]
sched_semantics = "kernel"
"#;
        let c = TracerConfig::parse(text).unwrap();
        assert_eq!(c.level_set(), [Level::Token, Level::Op].into_iter().collect());
        assert_eq!(c.qos.window, 8);
        assert_eq!(c.target.pid, Some(4242));
        assert_eq!(c.analysis.sched_semantics, SchedSemantics::Kernel);
        let header = c.session_header([1, 2].into_iter().collect()).unwrap();
        assert_eq!(header.pmc_specs.len(), 2);
        assert_eq!(header.nthreads, 2);
        let q = c.qos_controller();
        assert_eq!(q.window, 8);
        assert_eq!(q.hysteresis_margin, 0.1);
    }

    #[test]
    fn unknown_counter_and_key_rejected() {
        assert!(TracerConfig::parse("pmc = [\"bogus\"]").is_err());
        assert!(TracerConfig::parse("nonsense = 1").is_err());
        assert!(TracerConfig::parse("[qos]\nwindow = 0").is_err());
    }

    #[test]
    fn defaults_when_empty() {
        assert_eq!(TracerConfig::parse("").unwrap(), TracerConfig::default());
    }
}
