//! Deterministic discrete-event network simulator.
//!
//! Links are directed `(from, to)` pairs with a base latency, jitter, loss
//! model and optional bandwidth cap. Every link and every flow generator has
//! its own ChaCha stream derived from the run seed, so a run is a pure
//! function of (scenario, seed). Events at equal times fire in scheduling
//! order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{Registry, ServiceKind};
use crate::egress::EgressDc;
use crate::endpoint::{Receiver, Sender};
use crate::event::{Action, Outbox, ProtocolEvent, Timer, TimerKind};
use crate::ingress::IngressDc;
use crate::packet::{FlowId, Markers, NodeId, Packet, PacketSummary, Seq};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("no link from {from} to {to}")]
    UnknownLink { from: NodeId, to: NodeId },
    #[error("duplicate link from {from} to {to}")]
    DuplicateLink { from: NodeId, to: NodeId },
    #[error("duplicate node {0}")]
    DuplicateNode(NodeId),
    #[error("invalid loss model: {0}")]
    InvalidLoss(String),
    #[error("invalid jitter: {0}")]
    InvalidJitter(String),
    #[error("invalid traffic pattern for flow {0}: {1}")]
    InvalidPattern(FlowId, String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Jitter {
    #[default]
    None,
    /// Uniform on `[-j, +j]`.
    Uniform { j: SimDuration },
    /// Zero-mean normal with standard deviation `sigma`.
    Normal { sigma: SimDuration },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LossModel {
    Bernoulli {
        p: f64,
    },
    /// Two-state burst model: a packet following a loss drops with
    /// `p_subsequent`, otherwise with `p_first`.
    BurstChain {
        p_first: f64,
        p_subsequent: f64,
    },
    /// Every packet sent inside a `[start, end)` window drops.
    Outage {
        intervals: Vec<(SimTime, SimTime)>,
    },
    Composite {
        models: Vec<LossModel>,
    },
}

impl Default for LossModel {
    fn default() -> Self {
        LossModel::Bernoulli { p: 0.0 }
    }
}

impl LossModel {
    pub fn lossless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let prob = |p: f64, name: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(SimError::InvalidLoss(format!("{name}={p} outside [0,1]")))
            }
        };
        match self {
            LossModel::Bernoulli { p } => prob(*p, "p"),
            LossModel::BurstChain {
                p_first,
                p_subsequent,
            } => {
                prob(*p_first, "p_first")?;
                prob(*p_subsequent, "p_subsequent")
            }
            LossModel::Outage { intervals } => {
                let mut sorted = intervals.clone();
                sorted.sort();
                for &(s, e) in &sorted {
                    if s >= e {
                        return Err(SimError::InvalidLoss(format!(
                            "empty outage interval [{s}, {e})"
                        )));
                    }
                }
                if sorted.windows(2).any(|w| w[1].0 < w[0].1) {
                    return Err(SimError::InvalidLoss("overlapping outage intervals".into()));
                }
                Ok(())
            }
            LossModel::Composite { models } => models.iter().try_for_each(LossModel::validate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    Random,
    Burst,
    Outage,
}

/// Runtime state of a loss model.
#[derive(Debug, Clone)]
pub struct LossProcess {
    model: LossModel,
    prev_lost: bool,
    parts: Vec<LossProcess>,
}

impl LossProcess {
    pub fn new(model: LossModel) -> Self {
        let parts = match &model {
            LossModel::Composite { models } => models.iter().cloned().map(LossProcess::new).collect(),
            _ => Vec::new(),
        };
        Self {
            model,
            prev_lost: false,
            parts,
        }
    }

    /// Consults the model once for a packet sent at `now`.
    pub fn sample<R: Rng>(&mut self, now: SimTime, rng: &mut R) -> Option<DropCause> {
        match &self.model {
            LossModel::Bernoulli { p } => (*p > 0.0 && rng.random_bool(*p)).then_some(DropCause::Random),
            LossModel::BurstChain {
                p_first,
                p_subsequent,
            } => {
                let (p, cause) = if self.prev_lost {
                    (*p_subsequent, DropCause::Burst)
                } else {
                    (*p_first, DropCause::Random)
                };
                self.prev_lost = p > 0.0 && rng.random_bool(p);
                self.prev_lost.then_some(cause)
            }
            LossModel::Outage { intervals } => intervals
                .iter()
                .any(|&(s, e)| now >= s && now < e)
                .then_some(DropCause::Outage),
            LossModel::Composite { .. } => {
                let mut first = None;
                for part in &mut self.parts {
                    let d = part.sample(now, rng);
                    first = first.or(d);
                }
                first
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub from: NodeId,
    pub to: NodeId,
    pub latency: SimDuration,
    #[serde(default)]
    pub jitter: Jitter,
    #[serde(default)]
    pub loss: LossModel,
    /// Serialization rate cap in bits per second.
    #[serde(default)]
    pub bandwidth_bps: Option<u64>,
}

impl LinkSpec {
    pub fn new(from: NodeId, to: NodeId, latency: SimDuration) -> Self {
        Self {
            from,
            to,
            latency,
            jitter: Jitter::None,
            loss: LossModel::lossless(),
            bandwidth_bps: None,
        }
    }

    pub fn with_loss(mut self, loss: LossModel) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_jitter(mut self, jitter: Jitter) -> Self {
        self.jitter = jitter;
        self
    }
}

#[derive(Debug)]
struct Link {
    spec: LinkSpec,
    loss: LossProcess,
    rng: ChaCha8Rng,
    busy_until: SimTime,
    bytes: u64,
    packets: u64,
}

/// Outcome of one transmission attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transmission {
    Arrive(SimTime),
    Drop(DropCause),
}

/// splitmix64 finalizer, used to derive independent sub-seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug)]
pub struct Network {
    seed: u64,
    links: BTreeMap<(NodeId, NodeId), Link>,
}

impl Network {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            links: BTreeMap::new(),
        }
    }

    pub fn add_link(&mut self, spec: LinkSpec) -> Result<(), SimError> {
        spec.loss.validate()?;
        match spec.jitter {
            Jitter::Normal { sigma } if sigma == SimDuration::ZERO => {
                return Err(SimError::InvalidJitter("normal jitter needs sigma > 0".into()))
            }
            _ => {}
        }
        let key = (spec.from, spec.to);
        if self.links.contains_key(&key) {
            return Err(SimError::DuplicateLink {
                from: spec.from,
                to: spec.to,
            });
        }
        let seed = mix(self.seed ^ mix(((spec.from.0 as u64) << 32) | spec.to.0 as u64));
        self.links.insert(
            key,
            Link {
                loss: LossProcess::new(spec.loss.clone()),
                spec,
                rng: ChaCha8Rng::seed_from_u64(seed),
                busy_until: SimTime::ZERO,
                bytes: 0,
                packets: 0,
            },
        );
        Ok(())
    }

    pub fn link(&self, from: NodeId, to: NodeId) -> Option<&LinkSpec> {
        self.links.get(&(from, to)).map(|l| &l.spec)
    }

    /// Sends `bytes` over `from -> to` at `now`.
    pub fn transmit(
        &mut self,
        now: SimTime,
        from: NodeId,
        to: NodeId,
        bytes: usize,
    ) -> Result<Transmission, SimError> {
        let link = self
            .links
            .get_mut(&(from, to))
            .ok_or(SimError::UnknownLink { from, to })?;
        link.bytes += bytes as u64;
        link.packets += 1;
        if let Some(cause) = link.loss.sample(now, &mut link.rng) {
            return Ok(Transmission::Drop(cause));
        }
        let mut depart = now;
        if let Some(bps) = link.spec.bandwidth_bps.filter(|&b| b > 0) {
            let start = now.max(link.busy_until);
            let ser = (bytes as u128 * 8 * 1_000_000).div_ceil(bps as u128) as u64;
            depart = start + SimDuration(ser);
            link.busy_until = depart;
        }
        let base = link.spec.latency.as_micros() as i64;
        let jitter = match link.spec.jitter {
            Jitter::None => 0,
            Jitter::Uniform { j } => {
                let j = j.as_micros() as i64;
                if j == 0 {
                    0
                } else {
                    link.rng.random_range(-j..=j)
                }
            }
            Jitter::Normal { sigma } => {
                let n = Normal::new(0.0, sigma.as_micros() as f64).expect("sigma validated");
                n.sample(&mut link.rng).round() as i64
            }
        };
        let delay = (base + jitter).max(0) as u64;
        Ok(Transmission::Arrive(depart + SimDuration(delay)))
    }

    /// Bytes and packets offered to each link so far.
    pub fn usage(&self) -> BTreeMap<(NodeId, NodeId), (u64, u64)> {
        self.links
            .iter()
            .map(|(k, l)| (*k, (l.bytes, l.packets)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Pattern {
    Cbr {
        period: SimDuration,
    },
    /// Constant ON periods separated by exponentially distributed OFF
    /// periods with mean `off_mean`.
    OnOff {
        on: SimDuration,
        off_mean: SimDuration,
        period: SimDuration,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSpec {
    pub flow: FlowId,
    pub sender: NodeId,
    pub pattern: Pattern,
    pub start: SimTime,
    /// No sends at or after this time.
    pub stop: Option<SimTime>,
    pub payload_bytes: usize,
}

#[derive(Debug)]
struct Generator {
    spec: TrafficSpec,
    rng: ChaCha8Rng,
    burst_end: Option<SimTime>,
}

impl Generator {
    fn period(&self) -> SimDuration {
        match self.spec.pattern {
            Pattern::Cbr { period } | Pattern::OnOff { period, .. } => period,
        }
    }

    fn live(&self, t: SimTime) -> bool {
        self.spec.stop.is_none_or(|s| t < s)
    }

    /// Markers for a send at `t` and the time of the next send.
    fn step(&mut self, t: SimTime, first_of_burst: bool) -> (Markers, Option<SimTime>) {
        let next = t + self.period();
        let mut markers = Markers {
            handshake: first_of_burst,
            end_of_burst: false,
        };
        match self.spec.pattern {
            Pattern::Cbr { .. } => {
                if !self.live(next) {
                    markers.end_of_burst = true;
                    return (markers, None);
                }
                (markers, Some(next))
            }
            Pattern::OnOff { off_mean, .. } => {
                let end = self.burst_end.expect("burst started");
                if next < end && self.live(next) {
                    return (markers, Some(next));
                }
                markers.end_of_burst = true;
                let off = if off_mean == SimDuration::ZERO {
                    0.0
                } else {
                    Exp::new(1.0 / off_mean.as_micros() as f64)
                        .expect("positive rate")
                        .sample(&mut self.rng)
                };
                let resume = end + SimDuration(off.round() as u64);
                (markers, self.live(resume).then_some(resume))
            }
        }
    }
}

/// Deterministic payload bytes for `(flow, seq)`, so recovered copies can be
/// checked against what was sent.
pub fn payload_for(flow: FlowId, seq: Seq, len: usize) -> Vec<u8> {
    let mut state = mix(((flow.0 as u64) << 40) ^ seq);
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        state = mix(state);
        out.extend_from_slice(&state.to_le_bytes());
    }
    out.truncate(len);
    out
}

#[derive(Debug)]
pub enum Node {
    Sender(Sender),
    Receiver(Receiver),
    Ingress(IngressDc),
    Egress(EgressDc),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEvent {
    AppSend {
        node: NodeId,
        flow: FlowId,
        seq: Seq,
    },
    Transmit {
        from: NodeId,
        to: NodeId,
        bytes: usize,
        packet: PacketSummary,
    },
    Drop {
        from: NodeId,
        to: NodeId,
        cause: DropCause,
        packet: PacketSummary,
    },
    Arrive {
        from: NodeId,
        to: NodeId,
        packet: PacketSummary,
    },
    Proto {
        node: NodeId,
        event: ProtocolEvent,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub t: SimTime,
    #[serde(flatten)]
    pub event: LogEvent,
}

/// Writes the log as one JSON object per line.
pub fn write_jsonl<W: Write>(log: &[LogEntry], mut w: W) -> io::Result<()> {
    for e in log {
        serde_json_line(e, &mut w)?;
    }
    Ok(())
}

fn serde_json_line<W: Write>(e: &LogEntry, w: &mut W) -> io::Result<()> {
    let s = serde_json::to_string(e).map_err(io::Error::other)?;
    writeln!(w, "{s}")
}

#[derive(Debug)]
enum EventKind {
    AppSend { gen: usize, first_of_burst: bool },
    Arrive { from: NodeId, to: NodeId, packet: Packet },
    Timer { node: NodeId, timer: Timer },
    ControlTick,
}

struct Scheduled {
    at: SimTime,
    id: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.id) == (other.at, other.id)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.id).cmp(&(other.at, other.id))
    }
}

/// Periodic stats collection feeding the control plane's upgrade loop.
#[derive(Debug)]
pub struct ControlLoop {
    pub registry: Registry,
    pub interval: SimDuration,
}

pub struct Simulator {
    now: SimTime,
    next_id: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    nodes: BTreeMap<NodeId, Node>,
    net: Network,
    generators: Vec<Generator>,
    control: Option<ControlLoop>,
    log: Vec<LogEntry>,
    seed: u64,
    errors: u64,
}

impl Simulator {
    pub fn new(seed: u64) -> Self {
        Self {
            now: SimTime::ZERO,
            next_id: 0,
            queue: BinaryHeap::new(),
            nodes: BTreeMap::new(),
            net: Network::new(seed),
            generators: Vec::new(),
            control: None,
            log: Vec::new(),
            seed,
            errors: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn add_link(&mut self, spec: LinkSpec) -> Result<(), SimError> {
        self.net.add_link(spec)
    }

    pub fn add_node(&mut self, id: NodeId, node: Node) -> Result<(), SimError> {
        if self.nodes.contains_key(&id) {
            return Err(SimError::DuplicateNode(id));
        }
        self.nodes.insert(id, node);
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.get_mut(&id)
    }

    /// Handler errors (unknown flows, unknown links) seen during the run.
    pub fn error_count(&self) -> u64 {
        self.errors
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<LogEntry> {
        std::mem::take(&mut self.log)
    }

    pub fn set_control_loop(&mut self, control: ControlLoop) {
        let first = self.now + control.interval;
        self.control = Some(control);
        self.schedule(first, EventKind::ControlTick);
    }

    pub fn control_loop(&self) -> Option<&ControlLoop> {
        self.control.as_ref()
    }

    pub fn traffic_generator(&mut self, spec: TrafficSpec) -> Result<(), SimError> {
        let bad = |why: &str| Err(SimError::InvalidPattern(spec.flow, why.to_string()));
        match spec.pattern {
            Pattern::Cbr { period } if period == SimDuration::ZERO => return bad("zero period"),
            Pattern::OnOff { period, on, .. } if period == SimDuration::ZERO || on == SimDuration::ZERO => {
                return bad("zero period or ON time")
            }
            _ => {}
        }
        let seed = mix(self.seed ^ mix(0x7472_6166_0000_0000 | spec.flow.0 as u64));
        let start = spec.start;
        let live = spec.stop.is_none_or(|s| start < s);
        self.generators.push(Generator {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            burst_end: None,
        });
        if live {
            let gen = self.generators.len() - 1;
            self.schedule(
                start,
                EventKind::AppSend {
                    gen,
                    first_of_burst: true,
                },
            );
        }
        Ok(())
    }

    fn schedule(&mut self, at: SimTime, kind: EventKind) {
        let at = at.max(self.now);
        let id = self.next_id;
        self.next_id += 1;
        self.queue.push(Reverse(Scheduled { at, id, kind }));
    }

    fn record(&mut self, event: LogEvent) {
        self.log.push(LogEntry { t: self.now, event });
    }

    /// Injects a packet as if `from` had sent it now.
    pub fn inject(&mut self, from: NodeId, actions: Vec<Action>) {
        self.apply(from, actions);
    }

    /// Processes every event scheduled at or before `t_end`.
    pub fn run_until(&mut self, t_end: SimTime) -> &[LogEntry] {
        while let Some(Reverse(top)) = self.queue.peek() {
            if top.at > t_end {
                break;
            }
            let Reverse(ev) = self.queue.pop().unwrap();
            debug_assert!(ev.at >= self.now, "causality");
            self.now = ev.at;
            self.dispatch(ev.kind);
        }
        self.now = self.now.max(t_end);
        &self.log
    }

    fn dispatch(&mut self, kind: EventKind) {
        let now = self.now;
        let mut out = Outbox::new();
        match kind {
            EventKind::AppSend {
                gen,
                first_of_burst,
            } => {
                let g = &mut self.generators[gen];
                if first_of_burst {
                    if let Pattern::OnOff { on, .. } = g.spec.pattern {
                        g.burst_end = Some(now + on);
                    }
                }
                let (markers, next) = g.step(now, first_of_burst);
                let (flow, node, len) = (g.spec.flow, g.spec.sender, g.spec.payload_bytes);
                if let Some(next) = next {
                    let new_burst = markers.end_of_burst;
                    self.schedule(
                        next,
                        EventKind::AppSend {
                            gen,
                            first_of_burst: new_burst,
                        },
                    );
                }
                let Some(Node::Sender(s)) = self.nodes.get_mut(&node) else {
                    log::warn!("generator for {flow} bound to non-sender {node}");
                    self.errors += 1;
                    return;
                };
                // seq is assigned by the sender; peek it for the payload
                let seq = s.next_seq(flow).unwrap_or(0);
                match s.send(now, flow, payload_for(flow, seq, len), markers, &mut out) {
                    Ok(seq) => self.record(LogEvent::AppSend { node, flow, seq }),
                    Err(e) => {
                        log::warn!("send on {flow} failed: {e}");
                        self.errors += 1;
                    }
                }
                self.apply(node, out.take());
            }
            EventKind::Arrive { from, to, packet } => {
                self.record(LogEvent::Arrive {
                    from,
                    to,
                    packet: packet.summary(),
                });
                let res = match self.nodes.get_mut(&to) {
                    Some(Node::Receiver(r)) => r.on_receive(now, from, packet, &mut out).map_err(|e| e.to_string()),
                    Some(Node::Egress(e)) => e.on_receive(now, from, packet, &mut out).map_err(|e| e.to_string()),
                    Some(Node::Ingress(i)) => match packet {
                        Packet::Data(d) => i.dc1_process(now, d, &mut out).map_err(|e| e.to_string()),
                        _ => Ok(()),
                    },
                    Some(Node::Sender(_)) => Ok(()),
                    None => Err(format!("no node {to}")),
                };
                if let Err(e) = res {
                    log::warn!("{to} rejected packet from {from}: {e}");
                    self.errors += 1;
                }
                self.apply(to, out.take());
            }
            EventKind::Timer { node, timer } => {
                match (self.nodes.get_mut(&node), timer.kind) {
                    (Some(Node::Ingress(i)), TimerKind::Queue(q)) => {
                        i.on_queue_timer(now, q, timer.epoch, &mut out)
                    }
                    (Some(Node::Receiver(r)), TimerKind::Detector { flow }) => {
                        r.on_timer(now, flow, timer.epoch, &mut out)
                    }
                    (Some(Node::Egress(e)), TimerKind::Ticket { batch, round }) => {
                        e.on_ticket_timer(now, batch, round, timer.epoch, &mut out)
                    }
                    _ => {
                        log::warn!("timer {timer:?} has no handler at {node}");
                        self.errors += 1;
                    }
                }
                self.apply(node, out.take());
            }
            EventKind::ControlTick => self.control_tick(),
        }
    }

    fn control_tick(&mut self) {
        let Some(mut ctl) = self.control.take() else {
            return;
        };
        let regs: Vec<_> = ctl
            .registry
            .flows()
            .map(|r| (r.flow, r.source, r.destination))
            .collect();
        for (flow, source, dest) in regs {
            let Some(Node::Receiver(r)) = self.nodes.get_mut(&dest) else {
                continue;
            };
            let Some(stats) = r.report_stats(flow) else {
                continue;
            };
            let before = ctl.registry.get(flow).map(|r| r.selection.service);
            if let Ok(Some(next)) = ctl.registry.ingest_stats(flow, &stats) {
                if let Some(Node::Sender(s)) = self.nodes.get_mut(&source) {
                    let _ = s.set_service(flow, next);
                }
                self.record(LogEvent::Proto {
                    node: source,
                    event: ProtocolEvent::ServiceChanged {
                        flow,
                        from: before.unwrap_or(ServiceKind::DirectOnly),
                        to: next,
                    },
                });
            }
        }
        let next = self.now + ctl.interval;
        self.control = Some(ctl);
        self.schedule(next, EventKind::ControlTick);
    }

    fn apply(&mut self, node: NodeId, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send { to, packet } => {
                    let bytes = packet.wire_size();
                    match self.net.transmit(self.now, node, to, bytes) {
                        Ok(Transmission::Arrive(at)) => {
                            self.record(LogEvent::Transmit {
                                from: node,
                                to,
                                bytes,
                                packet: packet.summary(),
                            });
                            self.schedule(
                                at,
                                EventKind::Arrive {
                                    from: node,
                                    to,
                                    packet,
                                },
                            );
                        }
                        Ok(Transmission::Drop(cause)) => {
                            self.record(LogEvent::Transmit {
                                from: node,
                                to,
                                bytes,
                                packet: packet.summary(),
                            });
                            self.record(LogEvent::Drop {
                                from: node,
                                to,
                                cause,
                                packet: packet.summary(),
                            });
                        }
                        Err(e) => {
                            log::warn!("{e}");
                            self.errors += 1;
                        }
                    }
                }
                Action::Arm { at, timer } => self.schedule(at, EventKind::Timer { node, timer }),
                Action::Note(event) => self.record(LogEvent::Proto { node, event }),
            }
        }
    }
}
