//! Control plane: service delay model, cheapest-feasible selection, feedback
//! driven upgrades and the deployment cost model.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoint::DeliveryStats;
use crate::packet::{FlowId, NodeId};
use crate::time::SimDuration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    DirectOnly,
    Forwarding,
    Caching,
    Coding,
}

impl ServiceKind {
    /// Overlay services from cheapest to most expensive under the default
    /// cost model.
    pub const BY_COST: [ServiceKind; 3] = [
        ServiceKind::Coding,
        ServiceKind::Caching,
        ServiceKind::Forwarding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ServiceKind::DirectOnly => "direct",
            ServiceKind::Forwarding => "forwarding",
            ServiceKind::Caching => "caching",
            ServiceKind::Coding => "coding",
        }
    }

    /// Next step up the upgrade ladder, `None` at the top.
    pub fn upgrade(self) -> Option<ServiceKind> {
        match self {
            ServiceKind::DirectOnly => Some(ServiceKind::Coding),
            ServiceKind::Coding => Some(ServiceKind::Caching),
            ServiceKind::Caching => Some(ServiceKind::Forwarding),
            ServiceKind::Forwarding => None,
        }
    }

    /// Whether the receiver pulls lost packets from its nearby DC.
    pub fn receiver_driven(self) -> bool {
        matches!(self, ServiceKind::Caching | ServiceKind::Coding)
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One-way latencies along a sender/receiver pair and its two DCs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PathLatencies {
    /// Sender to ingress DC.
    pub delta_s_dc1: SimDuration,
    /// Receiver to egress DC.
    pub delta_r_dc2: SimDuration,
    /// Ingress DC to egress DC.
    pub x: SimDuration,
    /// Sender to receiver over the direct Internet path.
    pub y: SimDuration,
    /// Largest helper-receiver latency to the egress DC.
    pub delta_r_prime_dc2: SimDuration,
    /// Wait at the egress DC when a pull arrives before the packet copy.
    pub delta_cap: SimDuration,
}

impl PathLatencies {
    pub fn rtt_direct(&self) -> SimDuration {
        self.y.times(2)
    }
}

pub fn service_delay(kind: ServiceKind, lat: &PathLatencies) -> SimDuration {
    match kind {
        ServiceKind::DirectOnly => lat.y,
        ServiceKind::Forwarding => lat.x + lat.delta_s_dc1 + lat.delta_r_dc2,
        ServiceKind::Caching => lat.y + lat.delta_r_dc2.times(2) + lat.delta_cap,
        ServiceKind::Coding => {
            lat.y + lat.delta_r_dc2.times(2) + lat.delta_r_prime_dc2.times(2) + lat.delta_cap
        }
    }
}

/// Same formulas over floating-point milliseconds, for dataset analysis.
pub fn service_delay_ms(
    kind: ServiceKind,
    delta_s_dc1: f64,
    delta_r_dc2: f64,
    x: f64,
    y: f64,
    delta_r_prime_dc2: f64,
    delta_cap: f64,
) -> f64 {
    match kind {
        ServiceKind::DirectOnly => y,
        ServiceKind::Forwarding => x + delta_s_dc1 + delta_r_dc2,
        ServiceKind::Caching => y + 2.0 * delta_r_dc2 + delta_cap,
        ServiceKind::Coding => y + 2.0 * delta_r_dc2 + 2.0 * delta_r_prime_dc2 + delta_cap,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub service: ServiceKind,
    /// Set when no service met the budget and the lowest-delay fallback was
    /// returned.
    pub over_budget: bool,
}

/// Picks the cheapest overlay service whose delay fits `budget`.
pub fn select_service(budget: SimDuration, lat: &PathLatencies) -> Selection {
    ServiceKind::BY_COST
        .iter()
        .copied()
        .find(|&kind| service_delay(kind, lat) <= budget)
        .map(|service| Selection {
            service,
            over_budget: false,
        })
        .unwrap_or(Selection {
            service: ServiceKind::Forwarding,
            over_budget: true,
        })
}

/// Consecutive violating windows that trigger an upgrade.
pub const VIOLATION_WINDOWS: u32 = 2;

/// Upgrade-only feedback loop over receiver delivery statistics.
#[derive(Debug, Clone)]
pub struct FeedbackController {
    active: ServiceKind,
    violations: u32,
}

impl FeedbackController {
    pub fn new(active: ServiceKind) -> Self {
        Self {
            active,
            violations: 0,
        }
    }

    pub fn active(&self) -> ServiceKind {
        self.active
    }

    /// Feeds one window of statistics. Returns the new service when an
    /// upgrade fires.
    pub fn feedback_update(
        &mut self,
        stats: &DeliveryStats,
        budget: SimDuration,
    ) -> Option<ServiceKind> {
        let violated = stats.window_p95.is_some_and(|p95| p95 > budget);
        if !violated {
            self.violations = 0;
            return None;
        }
        self.violations += 1;
        if self.violations < VIOLATION_WINDOWS {
            return None;
        }
        self.violations = 0;
        let next = self.active.upgrade()?;
        self.active = next;
        Some(next)
    }
}

/// Egress price that reproduces a $17.60/hour two-DC forwarding bill for
/// 150 sessions at 1.5 Mbps (101.25 GB/hour through each DC).
pub const CALIBRATED_EGRESS_PRICE: f64 = 17.60 / (2.0 * 101.25);

/// GB per hour sent by `sessions` streams of `mbps` each.
pub fn aggregate_gb_per_hour(mbps: f64, sessions: u32) -> f64 {
    mbps * 3600.0 / 8.0 / 1000.0 * f64::from(sessions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Currency per GB leaving a DC.
    pub egress_price: f64,
    /// Currency per GB entering a DC.
    pub ingress_price: f64,
    /// Egress price override for the ingress DC.
    pub dc1_egress_price: Option<f64>,
    /// Egress price override for the egress DC.
    pub dc2_egress_price: Option<f64>,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            egress_price: CALIBRATED_EGRESS_PRICE,
            ingress_price: 0.0,
            dc1_egress_price: None,
            dc2_egress_price: None,
        }
    }
}

impl CostModel {
    fn dc1(&self) -> f64 {
        self.dc1_egress_price.unwrap_or(self.egress_price)
    }

    fn dc2(&self) -> f64 {
        self.dc2_egress_price.unwrap_or(self.egress_price)
    }
}

/// Bandwidth cost per hour; `upper` assumes every duplicated or coded packet
/// leaves DC2, `expected` only those needed to repair `loss_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeploymentCost {
    pub upper: f64,
    pub expected: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("aggregate rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("coding rate must be in (0, 1), got {0}")]
    BadCodingRate(f64),
    #[error("prices must be non-negative")]
    NegativePrice,
}

/// `rate_gb_per_hour` is the aggregate sender volume; `coding_rate` is the
/// cross-stream rate r (coded per data packet); `loss_rate` feeds the
/// expected-case figures.
pub fn deployment_cost(
    kind: ServiceKind,
    rate_gb_per_hour: f64,
    coding_rate: f64,
    loss_rate: f64,
    model: &CostModel,
) -> Result<DeploymentCost, CostError> {
    if rate_gb_per_hour <= 0.0 || rate_gb_per_hour.is_nan() {
        return Err(CostError::NonPositiveRate(rate_gb_per_hour));
    }
    let prices = [
        model.egress_price,
        model.ingress_price,
        model.dc1(),
        model.dc2(),
    ];
    if prices.iter().any(|p| *p < 0.0 || p.is_nan()) {
        return Err(CostError::NegativePrice);
    }
    let rate = rate_gb_per_hour;
    let ingress = model.ingress_price;
    Ok(match kind {
        ServiceKind::DirectOnly => DeploymentCost {
            upper: 0.0,
            expected: 0.0,
        },
        ServiceKind::Forwarding => {
            let c = rate * (model.dc1() + model.dc2()) + 2.0 * rate * ingress;
            DeploymentCost {
                upper: c,
                expected: c,
            }
        }
        ServiceKind::Caching => {
            let base = rate * model.dc1() + 2.0 * rate * ingress;
            DeploymentCost {
                upper: base + rate * model.dc2(),
                expected: base + loss_rate * rate * model.dc2(),
            }
        }
        ServiceKind::Coding => {
            if !(coding_rate > 0.0 && coding_rate < 1.0) {
                return Err(CostError::BadCodingRate(coding_rate));
            }
            let coded = coding_rate * rate;
            let base = coded * model.dc1() + (rate + coded) * ingress;
            DeploymentCost {
                upper: base + coded * model.dc2(),
                expected: base + loss_rate * rate * model.dc2(),
            }
        }
    })
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("flow {0} already registered")]
    Duplicate(FlowId),
    #[error("flow {0} not registered")]
    Unknown(FlowId),
    #[error("latency budget must be positive")]
    ZeroBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub flow: FlowId,
    pub source: NodeId,
    pub destination: NodeId,
    pub ingress: NodeId,
    pub egress: NodeId,
    pub budget: SimDuration,
    pub latencies: PathLatencies,
    pub selection: Selection,
}

/// In-process membership registry; single writer.
#[derive(Debug, Default)]
pub struct Registry {
    flows: BTreeMap<FlowId, Registration>,
    feedback: BTreeMap<FlowId, FeedbackController>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a flow and selects its service. `forced` bypasses selection.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        &mut self,
        flow: FlowId,
        source: NodeId,
        destination: NodeId,
        ingress: NodeId,
        egress: NodeId,
        budget: SimDuration,
        latencies: PathLatencies,
        forced: Option<ServiceKind>,
    ) -> Result<&Registration, RegistryError> {
        if self.flows.contains_key(&flow) {
            return Err(RegistryError::Duplicate(flow));
        }
        if budget == SimDuration::ZERO {
            return Err(RegistryError::ZeroBudget);
        }
        let selection = match forced {
            Some(service) => Selection {
                service,
                over_budget: service_delay(service, &latencies) > budget,
            },
            None => select_service(budget, &latencies),
        };
        self.feedback
            .insert(flow, FeedbackController::new(selection.service));
        Ok(self.flows.entry(flow).or_insert(Registration {
            flow,
            source,
            destination,
            ingress,
            egress,
            budget,
            latencies,
            selection,
        }))
    }

    pub fn get(&self, flow: FlowId) -> Option<&Registration> {
        self.flows.get(&flow)
    }

    pub fn flows(&self) -> impl Iterator<Item = &Registration> {
        self.flows.values()
    }

    /// Ingests one stats window for `flow`; returns an upgrade if one fires.
    pub fn ingest_stats(
        &mut self,
        flow: FlowId,
        stats: &DeliveryStats,
    ) -> Result<Option<ServiceKind>, RegistryError> {
        let reg = self.flows.get_mut(&flow).ok_or(RegistryError::Unknown(flow))?;
        let ctl = self.feedback.get_mut(&flow).expect("registered with flow");
        let upgrade = ctl.feedback_update(stats, reg.budget);
        if let Some(next) = upgrade {
            reg.selection.service = next;
        }
        Ok(upgrade)
    }
}
