//! Scenario builders shared by the harness integration tests.
#![allow(dead_code)]

use cloudqos_core::endpoint::DuplicationMode;
use cloudqos_harness::config::{
    CodingConfig, EgressOverrides, FlowConfig, JitterConfig, LinkConfig, LossConfig, NodeConfig,
    PatternConfig, ReceiverOverrides, Role, ServiceChoice, SCHEMA_VERSION,
};
use cloudqos_harness::ScenarioConfig;

/// One sender/receiver pair hanging off the shared DC pair.
#[derive(Debug, Clone)]
pub struct Pair {
    pub y: f64,
    pub ds: f64,
    pub dr: f64,
    /// Receiver-to-DC2 latency when it differs from `dr`.
    pub dr_up: Option<f64>,
    pub loss: LossConfig,
    pub jitter: JitterConfig,
    pub pattern: PatternConfig,
    pub start_ms: f64,
    pub stop_ms: Option<f64>,
}

impl Pair {
    pub fn cbr(y: f64, ds: f64, dr: f64, period_ms: f64) -> Self {
        Self {
            y,
            ds,
            dr,
            dr_up: None,
            loss: LossConfig::Bernoulli { p: 0.0 },
            jitter: JitterConfig::None,
            pattern: PatternConfig::Cbr { period_ms },
            start_ms: 0.0,
            stop_ms: None,
        }
    }

    pub fn with_loss(mut self, loss: LossConfig) -> Self {
        self.loss = loss;
        self
    }
}

fn link(from: &str, to: &str, latency_ms: f64, symmetric: bool) -> LinkConfig {
    LinkConfig {
        from: from.into(),
        to: to.into(),
        latency_ms,
        jitter: JitterConfig::None,
        loss: LossConfig::Bernoulli { p: 0.0 },
        bandwidth_mbps: None,
        symmetric,
    }
}

/// Builds a star topology: every pair `i` has hosts `s{i}` and `r{i}`, all
/// share ingress `dc1` and egress `dc2` joined by `x` ms. Losses and jitter
/// apply to the direct `s -> r` direction only.
pub fn star(
    seed: u64,
    duration_ms: f64,
    x: f64,
    service: ServiceChoice,
    coding: CodingConfig,
    pairs: &[Pair],
) -> ScenarioConfig {
    let mut nodes = vec![
        NodeConfig {
            name: "dc1".into(),
            role: Role::Ingress,
        },
        NodeConfig {
            name: "dc2".into(),
            role: Role::Egress,
        },
    ];
    let mut links = vec![link("dc1", "dc2", x, true)];
    let mut flows = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let (s, r) = (format!("s{i}"), format!("r{i}"));
        for name in [&s, &r] {
            nodes.push(NodeConfig {
                name: name.clone(),
                role: Role::Host,
            });
        }
        let mut direct = link(&s, &r, p.y, false);
        direct.loss = p.loss.clone();
        direct.jitter = p.jitter.clone();
        links.push(direct);
        links.push(link(&r, &s, p.y, false));
        links.push(link(&s, "dc1", p.ds, true));
        links.push(link("dc2", &r, p.dr, false));
        links.push(link(&r, "dc2", p.dr_up.unwrap_or(p.dr), false));
        flows.push(FlowConfig {
            id: i as u32,
            source: s,
            destination: r,
            ingress: "dc1".into(),
            egress: "dc2".into(),
            pattern: p.pattern.clone(),
            start_ms: p.start_ms,
            stop_ms: p.stop_ms,
            budget_ms: 1000.0,
            service,
            duplication: DuplicationMode::All,
            duplicate_both: false,
            payload_bytes: 160,
        });
    }
    ScenarioConfig {
        version: SCHEMA_VERSION,
        seed,
        duration_ms,
        delta_cap_ms: 0.0,
        coding,
        receiver: ReceiverOverrides::default(),
        egress: EgressOverrides::default(),
        control: None,
        nodes,
        links,
        flows,
    }
}

pub fn cross_only(k: usize, m_cross: usize) -> CodingConfig {
    CodingConfig {
        k,
        m_cross,
        in_stream_block: 0,
        in_stream_parity: 0,
        ..CodingConfig::default()
    }
}

/// Four synchronized 10 ms CBR flows, flow 0's direct path dark for
/// `[10 s, 12 s)`. `slow_helper` delays receiver 1's path back to DC2.
pub fn outage_four(seed: u64, m_cross: usize, slow_helper: Option<f64>) -> ScenarioConfig {
    let mut pairs: Vec<Pair> = (0..4).map(|_| Pair::cbr(80.0, 10.0, 10.0, 10.0)).collect();
    pairs[0].loss = LossConfig::Outage {
        windows_ms: vec![[10_000.0, 12_000.0]],
    };
    pairs[1].dr_up = slow_helper;
    star(seed, 20_000.0, 60.0, ServiceChoice::Coding, cross_only(4, m_cross), &pairs)
}
