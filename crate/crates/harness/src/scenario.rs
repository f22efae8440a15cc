//! Turns a [`ScenarioConfig`] into a wired simulator and runs it.

use std::collections::BTreeMap;

use cloudqos_core::control::{PathLatencies, Registry};
use cloudqos_core::egress::{EgressConfig, EgressDc};
use cloudqos_core::endpoint::{DuplicationPolicy, Receiver, ReceiverConfig, Sender};
use cloudqos_core::ingress::IngressDc;
use cloudqos_core::simnet::{ControlLoop, LinkSpec, LogEntry, Node, Simulator, TrafficSpec};
use cloudqos_core::{FlowId, NodeId, ServiceKind, SimDuration, SimTime};
use serde::Serialize;

use crate::config::{at_ms, ms, ConfigError, Role, ScenarioConfig};
use crate::metrics::{self, MetricsReport};

/// Static description of one flow, as needed by the analyzers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowInfo {
    pub flow: FlowId,
    pub label: String,
    pub source: NodeId,
    pub destination: NodeId,
    pub ingress: NodeId,
    pub egress: NodeId,
    pub service: ServiceKind,
    pub over_budget: bool,
    pub latencies: PathLatencies,
    /// Direct-path RTT, the recovery deadline.
    pub rtt: SimDuration,
    /// Whether the sender puts a copy of every packet on the direct path.
    pub direct_copy: bool,
}

pub struct World {
    pub sim: Simulator,
    pub flows: Vec<FlowInfo>,
    pub names: BTreeMap<NodeId, String>,
    pub roles: BTreeMap<NodeId, Role>,
    pub end: SimTime,
}

fn fail(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

impl World {
    pub fn build(cfg: &ScenarioConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let ids: BTreeMap<&str, NodeId> = cfg
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), NodeId(i as u32)))
            .collect();
        let id = |name: &str| ids[name];
        let latency = |a: &str, b: &str| cfg.link(a, b).map(|l| ms(l.latency_ms)).unwrap_or_default();

        let mut sim = Simulator::new(cfg.seed);
        for (i, l) in cfg.links.iter().enumerate() {
            let mut dirs = vec![(l.from.as_str(), l.to.as_str())];
            if l.symmetric {
                dirs.push((l.to.as_str(), l.from.as_str()));
            }
            for (a, b) in dirs {
                let mut spec = LinkSpec::new(id(a), id(b), ms(l.latency_ms))
                    .with_jitter(l.jitter.to_jitter())
                    .with_loss(l.loss.to_model());
                spec.bandwidth_bps = l.bandwidth_mbps.map(|m| (m * 1e6).round() as u64);
                sim.add_link(spec)
                    .map_err(|e| fail(format!("links[{i}]"), e.to_string()))?;
            }
        }

        // Helper latency per egress DC: the largest receiver-to-DC latency
        // among the flows it serves.
        let mut helper: BTreeMap<&str, SimDuration> = BTreeMap::new();
        for f in &cfg.flows {
            let d = latency(&f.destination, &f.egress);
            let e = helper.entry(f.egress.as_str()).or_default();
            *e = (*e).max(d);
        }

        let mut registry = Registry::new();
        let mut flows = Vec::new();
        for (i, f) in cfg.flows.iter().enumerate() {
            let lat = PathLatencies {
                delta_s_dc1: latency(&f.source, &f.ingress),
                delta_r_dc2: latency(&f.egress, &f.destination),
                x: latency(&f.ingress, &f.egress),
                y: latency(&f.source, &f.destination),
                delta_r_prime_dc2: helper[f.egress.as_str()],
                delta_cap: ms(cfg.delta_cap_ms),
            };
            let reg = registry
                .register(
                    FlowId(f.id),
                    id(&f.source),
                    id(&f.destination),
                    id(&f.ingress),
                    id(&f.egress),
                    ms(f.budget_ms),
                    lat,
                    f.service.forced(),
                )
                .map_err(|e| fail(format!("flows[{i}]"), e.to_string()))?;
            let service = reg.selection.service;
            flows.push(FlowInfo {
                flow: FlowId(f.id),
                label: format!("{}->{}#{}", f.source, f.destination, f.id),
                source: id(&f.source),
                destination: id(&f.destination),
                ingress: id(&f.ingress),
                egress: id(&f.egress),
                service,
                over_budget: reg.selection.over_budget,
                latencies: lat,
                rtt: lat.rtt_direct(),
                direct_copy: service != ServiceKind::Forwarding || f.duplicate_both,
            });
        }

        let receiver_cfg = |rtt: SimDuration| {
            let o = &cfg.receiver;
            let mut c = ReceiverConfig::for_rtt(rtt);
            if let Some(v) = o.small_timeout_ms {
                c.small_timeout = ms(v);
            }
            if let Some(v) = o.long_timeout_ms {
                c.long_timeout = ms(v);
            }
            if let Some(v) = o.history {
                c.history = v;
            }
            if let Some(v) = o.retention_ms {
                c.retention = ms(v);
            }
            if let Some(v) = o.silence_horizon_ms {
                c.silence_horizon = ms(v);
            }
            if let Some(v) = o.escalate {
                c.escalate = v;
            }
            c
        };
        if let (Some(s), None) = (cfg.receiver.small_timeout_ms, cfg.receiver.long_timeout_ms) {
            if let Some(f) = flows.iter().find(|f| ms(s) >= f.rtt) {
                return Err(fail(
                    "receiver.small_timeout_ms",
                    format!("must be below the RTT of flow {}", f.flow),
                ));
            }
        }

        let mut nodes: BTreeMap<NodeId, Node> = BTreeMap::new();
        let mut roles = BTreeMap::new();
        let mut names = BTreeMap::new();
        for n in &cfg.nodes {
            let nid = id(&n.name);
            roles.insert(nid, n.role);
            names.insert(nid, n.name.clone());
            match n.role {
                Role::Ingress => {
                    let dc = IngressDc::new(nid, cfg.coding.params())
                        .map_err(|e| fail("coding", e.to_string()))?;
                    nodes.insert(nid, Node::Ingress(dc));
                }
                Role::Egress => {
                    let max_rtt = flows
                        .iter()
                        .filter(|f| f.egress == nid)
                        .map(|f| f.rtt)
                        .max()
                        .unwrap_or_default();
                    let ttl = cfg.egress.ttl_ms.map(ms).unwrap_or(max_rtt.times(2));
                    nodes.insert(nid, Node::Egress(EgressDc::new(nid, EgressConfig { ttl })));
                }
                Role::Host => {}
            }
        }

        for (f, fc) in flows.iter().zip(&cfg.flows) {
            let rcfg = receiver_cfg(f.rtt);
            let rx = nodes
                .entry(f.destination)
                .or_insert_with(|| Node::Receiver(Receiver::new(f.destination, rcfg.clone())));
            if let Node::Receiver(r) = rx {
                r.add_flow(f.flow, f.egress, f.service, Some(rcfg))
                    .map_err(|e| fail("flows", e.to_string()))?;
            }
            let tx = nodes
                .entry(f.source)
                .or_insert_with(|| Node::Sender(Sender::new(f.source)));
            if let Node::Sender(s) = tx {
                let policy = DuplicationPolicy {
                    mode: fc.duplication,
                    service: f.service,
                    duplicate_both: fc.duplicate_both,
                };
                s.add_flow(f.flow, f.destination, f.ingress, policy)
                    .map_err(|e| fail("flows", e.to_string()))?;
            }
            if let Some(Node::Ingress(dc)) = nodes.get_mut(&f.ingress) {
                dc.assign_flow(f.flow, f.egress)
                    .map_err(|e| fail("flows", e.to_string()))?;
            }
            if let Some(Node::Egress(dc)) = nodes.get_mut(&f.egress) {
                dc.add_flow(f.flow, f.destination, f.latencies.delta_r_dc2)
                    .map_err(|e| fail("flows", e.to_string()))?;
            }
        }
        for (nid, node) in nodes {
            sim.add_node(nid, node)
                .map_err(|e| fail("nodes", e.to_string()))?;
        }

        let end = at_ms(cfg.duration_ms);
        for (i, fc) in cfg.flows.iter().enumerate() {
            let stop = fc.stop_ms.map(at_ms).unwrap_or(end).min(end);
            sim.traffic_generator(TrafficSpec {
                flow: FlowId(fc.id),
                sender: id(&fc.source),
                pattern: fc.pattern.to_pattern(),
                start: at_ms(fc.start_ms),
                stop: Some(stop),
                payload_bytes: fc.payload_bytes,
            })
            .map_err(|e| fail(format!("flows[{i}].pattern"), e.to_string()))?;
        }
        if let Some(c) = &cfg.control {
            sim.set_control_loop(ControlLoop {
                registry,
                interval: ms(c.interval_ms),
            });
        }

        Ok(World {
            sim,
            flows,
            names,
            roles,
            end,
        })
    }

    /// Runs traffic until the configured duration, then lets in-flight
    /// recoveries settle for the longest flow's recovery horizon.
    pub fn run(&mut self) -> Vec<LogEntry> {
        let drain = self
            .flows
            .iter()
            .map(|f| f.latencies.y + f.rtt.times(2))
            .max()
            .unwrap_or_default();
        self.sim.run_until(self.end + drain);
        self.sim.take_log()
    }
}

pub struct RunOutput {
    pub log: Vec<LogEntry>,
    pub report: MetricsReport,
    pub flows: Vec<FlowInfo>,
    pub names: BTreeMap<NodeId, String>,
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, ConfigError> {
    let mut world = World::build(cfg)?;
    let log = world.run();
    let report = metrics::compute(&log, &world.flows, &world.names, &world.roles, world.end);
    if world.sim.error_count() > 0 {
        log::warn!("{} handler errors during the run", world.sim.error_count());
    }
    Ok(RunOutput {
        log,
        report,
        flows: world.flows,
        names: world.names,
    })
}
