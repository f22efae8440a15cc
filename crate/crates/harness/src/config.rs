//! Scenario files.
//!
//! A scenario is one TOML document. All times are milliseconds (floats are
//! accepted and rounded to the microsecond clock). The top-level `version`
//! key must equal [`SCHEMA_VERSION`].

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
//!
//! ```toml
//! version = 1
//! seed = 7
//! duration_ms = 20000
//!
//! [coding]
//! k = 4
//! m_cross = 2
//!
//! [[nodes]]
//! name = "dc1"
//! role = "ingress"
//!
//! [[links]]
//! from = "s0"
//! to = "r0"
//! latency_ms = 80
//! loss = { type = "burst_chain", p_first = 0.01, p_subsequent = 0.5 }
//!
//! [[flows]]
//! id = 0
//! source = "s0"
//! destination = "r0"
//! ingress = "dc1"
//! egress = "dc2"
//! pattern = { type = "cbr", period_ms = 10 }
//! service = "coding"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use cloudqos_core::endpoint::DuplicationMode;
use cloudqos_core::ingress::CodingParams;
use cloudqos_core::simnet::{Jitter, LossModel, Pattern};
use cloudqos_core::{ServiceKind, SimDuration, SimTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

pub(crate) fn ms(v: f64) -> SimDuration {
    SimDuration::from_millis_f64(v)
}

pub(crate) fn at_ms(v: f64) -> SimTime {
    SimTime(ms(v).as_micros())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: f64,
    /// Wait at the egress DC assumed by service selection.
    #[serde(default)]
    pub delta_cap_ms: f64,
    #[serde(default)]
    pub coding: CodingConfig,
    #[serde(default)]
    pub receiver: ReceiverOverrides,
    #[serde(default)]
    pub egress: EgressOverrides,
    #[serde(default)]
    pub control: Option<ControlConfig>,
    pub nodes: Vec<NodeConfig>,
    pub links: Vec<LinkConfig>,
    pub flows: Vec<FlowConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodingConfig {
    pub k: usize,
    pub m_cross: usize,
    pub in_stream_block: usize,
    pub in_stream_parity: usize,
    pub queue_timeout_ms: f64,
    pub cross_queues: usize,
}

impl Default for CodingConfig {
    fn default() -> Self {
        let p = CodingParams::default();
        Self {
            k: p.k,
            m_cross: p.m_cross,
            in_stream_block: p.in_stream_block,
            in_stream_parity: p.in_stream_parity,
            queue_timeout_ms: p.queue_timeout.as_millis_f64(),
            cross_queues: p.cross_queues,
        }
    }
}

impl CodingConfig {
    pub fn params(&self) -> CodingParams {
        CodingParams {
            k: self.k,
            m_cross: self.m_cross,
            in_stream_block: self.in_stream_block,
            in_stream_parity: self.in_stream_parity,
            queue_timeout: ms(self.queue_timeout_ms),
            cross_queues: self.cross_queues,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverOverrides {
    pub small_timeout_ms: Option<f64>,
    /// Defaults to the flow's direct-path RTT.
    pub long_timeout_ms: Option<f64>,
    pub history: Option<usize>,
    /// Replay buffer retention; defaults to twice the RTT.
    pub retention_ms: Option<f64>,
    pub silence_horizon_ms: Option<f64>,
    pub escalate: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgressOverrides {
    /// Cache and coded-store lifetime; defaults to twice the largest RTT of
    /// the DC's flows.
    pub ttl_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Stats window length for the upgrade feedback loop.
    pub interval_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Ingress,
    Egress,
    Host,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    pub role: Role,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum JitterConfig {
    #[default]
    None,
    Uniform {
        j_ms: f64,
    },
    Normal {
        sigma_ms: f64,
    },
}

impl JitterConfig {
    pub fn to_jitter(&self) -> Jitter {
        match *self {
            JitterConfig::None => Jitter::None,
            JitterConfig::Uniform { j_ms } => Jitter::Uniform { j: ms(j_ms) },
            JitterConfig::Normal { sigma_ms } => Jitter::Normal { sigma: ms(sigma_ms) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossConfig {
    Bernoulli { p: f64 },
    BurstChain { p_first: f64, p_subsequent: f64 },
    Outage { windows_ms: Vec<[f64; 2]> },
    Composite { models: Vec<LossConfig> },
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::Bernoulli { p: 0.0 }
    }
}

impl LossConfig {
    pub fn to_model(&self) -> LossModel {
        match self {
            LossConfig::Bernoulli { p } => LossModel::Bernoulli { p: *p },
            LossConfig::BurstChain {
                p_first,
                p_subsequent,
            } => LossModel::BurstChain {
                p_first: *p_first,
                p_subsequent: *p_subsequent,
            },
            LossConfig::Outage { windows_ms } => LossModel::Outage {
                intervals: windows_ms.iter().map(|[s, e]| (at_ms(*s), at_ms(*e))).collect(),
            },
            LossConfig::Composite { models } => LossModel::Composite {
                models: models.iter().map(LossConfig::to_model).collect(),
            },
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub from: String,
    pub to: String,
    pub latency_ms: f64,
    #[serde(default)]
    pub jitter: JitterConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub bandwidth_mbps: Option<f64>,
    /// Also create the reverse direction with the same settings.
    #[serde(default = "yes")]
    pub symmetric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PatternConfig {
    Cbr {
        period_ms: f64,
    },
    OnOff {
        on_ms: f64,
        off_mean_ms: f64,
        period_ms: f64,
    },
}

impl PatternConfig {
    pub fn to_pattern(&self) -> Pattern {
        match *self {
            PatternConfig::Cbr { period_ms } => Pattern::Cbr {
                period: ms(period_ms),
            },
            PatternConfig::OnOff {
                on_ms,
                off_mean_ms,
                period_ms,
            } => Pattern::OnOff {
                on: ms(on_ms),
                off_mean: ms(off_mean_ms),
                period: ms(period_ms),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceChoice {
    /// Cheapest service meeting the latency budget.
    #[default]
    Auto,
    DirectOnly,
    Forwarding,
    Caching,
    Coding,
}

impl ServiceChoice {
    pub fn forced(self) -> Option<ServiceKind> {
        match self {
            ServiceChoice::Auto => None,
            ServiceChoice::DirectOnly => Some(ServiceKind::DirectOnly),
            ServiceChoice::Forwarding => Some(ServiceKind::Forwarding),
            ServiceChoice::Caching => Some(ServiceKind::Caching),
            ServiceChoice::Coding => Some(ServiceKind::Coding),
        }
    }
}

fn default_budget() -> f64 {
    200.0
}

fn default_payload() -> usize {
    160
}

fn default_duplication() -> DuplicationMode {
    DuplicationMode::All
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub id: u32,
    pub source: String,
    pub destination: String,
    pub ingress: String,
    pub egress: String,
    pub pattern: PatternConfig,
    #[serde(default)]
    pub start_ms: f64,
    #[serde(default)]
    pub stop_ms: Option<f64>,
    #[serde(default = "default_budget")]
    pub budget_ms: f64,
    #[serde(default)]
    pub service: ServiceChoice,
    #[serde(default = "default_duplication")]
    pub duplication: DuplicationMode,
    #[serde(default)]
    pub duplicate_both: bool,
    #[serde(default = "default_payload")]
    pub payload_bytes: usize,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        // Check the version before the full schema so old files get a
        // clear message.
        let raw: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        match raw.get("version").and_then(|v| v.as_integer()) {
            Some(v) if v == SCHEMA_VERSION as i64 => {}
            Some(v) => return Err(ConfigError::Version { found: v as u32 }),
            None => return Err(invalid("version", "missing schema version")),
        }
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn role_of(&self, name: &str) -> Option<Role> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.role)
    }

    pub fn link(&self, from: &str, to: &str) -> Option<&LinkConfig> {
        self.links
            .iter()
            .find(|l| (l.from == from && l.to == to) || (l.symmetric && l.from == to && l.to == from))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != SCHEMA_VERSION {
            return Err(ConfigError::Version {
                found: self.version,
            });
        }
        if !(self.duration_ms > 0.0) {
            return Err(invalid("duration_ms", "must be positive"));
        }
        if self.delta_cap_ms < 0.0 {
            return Err(invalid("delta_cap_ms", "must be non-negative"));
        }
        self.coding
            .params()
            .validate()
            .map_err(|e| invalid("coding", e.to_string()))?;
        if let Some(c) = &self.control {
            if !(c.interval_ms > 0.0) {
                return Err(invalid("control.interval_ms", "must be positive"));
            }
        }
        self.validate_receiver()?;
        if let Some(ttl) = self.egress.ttl_ms {
            if !(ttl > 0.0) {
                return Err(invalid("egress.ttl_ms", "must be positive"));
            }
        }

        let mut names = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.name.is_empty() {
                return Err(invalid(format!("nodes[{i}].name"), "empty name"));
            }
            if !names.insert(n.name.as_str()) {
                return Err(invalid(format!("nodes[{i}].name"), format!("duplicate node '{}'", n.name)));
            }
        }

        let mut seen_links = BTreeSet::new();
        for (i, l) in self.links.iter().enumerate() {
            let path = |f: &str| format!("links[{i}].{f}");
            for (field, name) in [("from", &l.from), ("to", &l.to)] {
                if !names.contains(name.as_str()) {
                    return Err(invalid(path(field), format!("unknown node '{name}'")));
                }
            }
            if l.from == l.to {
                return Err(invalid(path("to"), "link must join two different nodes"));
            }
            if !(l.latency_ms >= 0.0) {
                return Err(invalid(path("latency_ms"), "must be non-negative"));
            }
            let dirs = if l.symmetric {
                vec![(&l.from, &l.to), (&l.to, &l.from)]
            } else {
                vec![(&l.from, &l.to)]
            };
            for d in dirs {
                if !seen_links.insert(d) {
                    return Err(invalid(path("to"), format!("duplicate link {} -> {}", d.0, d.1)));
                }
            }
            match l.jitter {
                JitterConfig::Uniform { j_ms } if !(j_ms >= 0.0) => {
                    return Err(invalid(path("jitter.j_ms"), "must be non-negative"))
                }
                JitterConfig::Normal { sigma_ms } if !(sigma_ms > 0.0) => {
                    return Err(invalid(path("jitter.sigma_ms"), "must be positive"))
                }
                _ => {}
            }
            l.loss
                .to_model()
                .validate()
                .map_err(|e| invalid(path("loss"), e.to_string()))?;
            if let Some(bw) = l.bandwidth_mbps {
                if !(bw > 0.0) {
                    return Err(invalid(path("bandwidth_mbps"), "must be positive"));
                }
            }
        }

        let mut ids = BTreeSet::new();
        let mut sources = BTreeSet::new();
        let mut destinations = BTreeSet::new();
        let mut flows_per_egress: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, f) in self.flows.iter().enumerate() {
            let path = |field: &str| format!("flows[{i}].{field}");
            if !ids.insert(f.id) {
                return Err(invalid(path("id"), format!("duplicate flow id {}", f.id)));
            }
            for (field, name, role) in [
                ("source", &f.source, Role::Host),
                ("destination", &f.destination, Role::Host),
                ("ingress", &f.ingress, Role::Ingress),
                ("egress", &f.egress, Role::Egress),
            ] {
                match self.role_of(name) {
                    None => return Err(invalid(path(field), format!("unknown node '{name}'"))),
                    Some(r) if r != role => {
                        return Err(invalid(path(field), format!("node '{name}' is not a {role:?} node")))
                    }
                    _ => {}
                }
            }
            sources.insert(f.source.as_str());
            destinations.insert(f.destination.as_str());
            *flows_per_egress.entry(f.egress.as_str()).or_default() += 1;

            let needed = [
                (&f.source, &f.destination),
                (&f.source, &f.ingress),
                (&f.ingress, &f.egress),
                (&f.egress, &f.destination),
                (&f.destination, &f.egress),
            ];
            let direct_only = f.service == ServiceChoice::DirectOnly;
            for (a, b) in needed.iter().take(if direct_only { 1 } else { needed.len() }) {
                if self.link(a, b).is_none() {
                    return Err(invalid(path("source"), format!("missing link {a} -> {b}")));
                }
            }
            match f.pattern {
                PatternConfig::Cbr { period_ms } if !(period_ms > 0.0) => {
                    return Err(invalid(path("pattern.period_ms"), "must be positive"))
                }
                PatternConfig::OnOff {
                    on_ms,
                    off_mean_ms,
                    period_ms,
                } => {
                    if !(period_ms > 0.0) {
                        return Err(invalid(path("pattern.period_ms"), "must be positive"));
                    }
                    if !(on_ms > 0.0) {
                        return Err(invalid(path("pattern.on_ms"), "must be positive"));
                    }
                    if !(off_mean_ms >= 0.0) {
                        return Err(invalid(path("pattern.off_mean_ms"), "must be non-negative"));
                    }
                }
                _ => {}
            }
            if f.start_ms < 0.0 {
                return Err(invalid(path("start_ms"), "must be non-negative"));
            }
            if let Some(stop) = f.stop_ms {
                if stop <= f.start_ms {
                    return Err(invalid(path("stop_ms"), "must be after start_ms"));
                }
            }
            if !(f.budget_ms > 0.0) {
                return Err(invalid(path("budget_ms"), "must be positive"));
            }
            if f.payload_bytes == 0 {
                return Err(invalid(path("payload_bytes"), "must be positive"));
            }
            if f.duplication == DuplicationMode::None && !direct_only {
                return Err(invalid(path("duplication"), "'none' requires service = \"direct_only\""));
            }
        }
        if let Some(both) = sources.intersection(&destinations).next() {
            return Err(invalid("flows", format!("host '{both}' is both a source and a destination")));
        }
        Ok(())
    }

    fn validate_receiver(&self) -> Result<(), ConfigError> {
        let r = &self.receiver;
        for (field, v) in [
            ("small_timeout_ms", r.small_timeout_ms),
            ("long_timeout_ms", r.long_timeout_ms),
            ("retention_ms", r.retention_ms),
            ("silence_horizon_ms", r.silence_horizon_ms),
        ] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(invalid(format!("receiver.{field}"), "must be positive"));
                }
            }
        }
        if let (Some(s), Some(l)) = (r.small_timeout_ms, r.long_timeout_ms) {
            if s >= l {
                return Err(invalid("receiver.small_timeout_ms", "must be below long_timeout_ms"));
            }
        }
        if r.history == Some(0) {
            return Err(invalid("receiver.history", "must be positive"));
        }
        Ok(())
    }
}
