//! Sender and receiver endpoints.
//!
//! The sender stamps sequence numbers and duplicates packets toward its
//! ingress DC according to the flow's service and duplication policy. The
//! receiver runs a two-state loss detector (a small timer inside bursts, a
//! long one between them), issues NACKs to its egress DC, answers
//! cooperative requests from a short replay buffer, and decodes in-stream
//! parity locally.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, SymbolBlock};
use crate::control::ServiceKind;
use crate::event::{
    FailureReason, NackCause, Outbox, ProtocolEvent, Timer, TimerKind, Via,
};
use crate::packet::{
    BatchId, CodedPacket, CoopResponse, DataPacket, FlowId, Markers, Nack, NodeId, Packet,
    RecoveredPacket, RecoveryPath, Seq,
};
use crate::time::{SimDuration, SimTime, TICK};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EndpointError {
    #[error("flow {0} is not registered at this endpoint")]
    UnknownFlow(FlowId),
    #[error("flow {0} is already registered")]
    DuplicateFlow(FlowId),
    #[error("duplication mode none requires the direct-only service")]
    InvalidPolicy,
}

/// Which packets get a copy sent to the ingress DC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicationMode {
    All,
    /// Only packets carrying the handshake marker.
    SelectiveHandshake,
    None,
}

impl DuplicationMode {
    pub fn duplicates(self, markers: &Markers) -> bool {
        match self {
            DuplicationMode::All => true,
            DuplicationMode::SelectiveHandshake => markers.handshake,
            DuplicationMode::None => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicationPolicy {
    pub mode: DuplicationMode,
    pub service: ServiceKind,
    /// With forwarding, also send every packet on the direct path.
    pub duplicate_both: bool,
}

impl DuplicationPolicy {
    pub fn validate(&self) -> Result<(), EndpointError> {
        if self.mode == DuplicationMode::None && self.service != ServiceKind::DirectOnly {
            return Err(EndpointError::InvalidPolicy);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct SenderFlow {
    receiver: NodeId,
    ingress: NodeId,
    policy: DuplicationPolicy,
    next_seq: Seq,
}

#[derive(Debug)]
pub struct Sender {
    id: NodeId,
    flows: BTreeMap<FlowId, SenderFlow>,
}

impl Sender {
    pub fn new(id: NodeId) -> Self {
        Self {
            id,
            flows: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn add_flow(
        &mut self,
        flow: FlowId,
        receiver: NodeId,
        ingress: NodeId,
        policy: DuplicationPolicy,
    ) -> Result<(), EndpointError> {
        policy.validate()?;
        if self.flows.contains_key(&flow) {
            return Err(EndpointError::DuplicateFlow(flow));
        }
        self.flows.insert(
            flow,
            SenderFlow {
                receiver,
                ingress,
                policy,
                next_seq: 0,
            },
        );
        Ok(())
    }

    pub fn next_seq(&self, flow: FlowId) -> Option<Seq> {
        self.flows.get(&flow).map(|f| f.next_seq)
    }

    pub fn service(&self, flow: FlowId) -> Option<ServiceKind> {
        self.flows.get(&flow).map(|f| f.policy.service)
    }

    pub fn set_service(&mut self, flow: FlowId, service: ServiceKind) -> Result<(), EndpointError> {
        let f = self.flows.get_mut(&flow).ok_or(EndpointError::UnknownFlow(flow))?;
        f.policy.service = service;
        if service != ServiceKind::DirectOnly && f.policy.mode == DuplicationMode::None {
            f.policy.mode = DuplicationMode::All;
        }
        Ok(())
    }

    /// Sends one application payload; returns the assigned sequence number.
    pub fn send(
        &mut self,
        now: SimTime,
        flow: FlowId,
        payload: Vec<u8>,
        markers: Markers,
        out: &mut Outbox,
    ) -> Result<Seq, EndpointError> {
        let f = self.flows.get_mut(&flow).ok_or(EndpointError::UnknownFlow(flow))?;
        let seq = f.next_seq;
        f.next_seq += 1;
        let pkt = DataPacket {
            flow,
            seq,
            sent_at: now,
            service: f.policy.service,
            markers,
            payload,
        };
        match f.policy.service {
            ServiceKind::Forwarding => {
                if f.policy.duplicate_both {
                    out.send(f.receiver, Packet::Data(pkt.clone()));
                }
                out.send(f.ingress, Packet::Data(pkt));
            }
            ServiceKind::Caching | ServiceKind::Coding => {
                let copy = f.policy.mode.duplicates(&markers);
                if copy {
                    out.send(f.receiver, Packet::Data(pkt.clone()));
                    out.send(f.ingress, Packet::Data(pkt));
                } else {
                    out.send(f.receiver, Packet::Data(pkt));
                }
            }
            ServiceKind::DirectOnly => out.send(f.receiver, Packet::Data(pkt)),
        }
        Ok(seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    InBurst,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverConfig {
    pub small_timeout: SimDuration,
    /// Timeout between bursts; defaults to the direct-path RTT.
    pub long_timeout: SimDuration,
    /// Direct-path RTT; a lost packet must be recovered within one RTT of its
    /// expected arrival.
    pub rtt: SimDuration,
    /// Inter-arrival samples kept for the burst threshold.
    pub history: usize,
    /// How long received packets stay available for cooperative requests.
    pub retention: SimDuration,
    /// Timer-driven NACKs stop after this much silence.
    pub silence_horizon: SimDuration,
    /// Re-NACK through cooperative recovery when a local in-stream decode
    /// fails.
    pub escalate: bool,
}

impl ReceiverConfig {
    pub fn for_rtt(rtt: SimDuration) -> Self {
        Self {
            small_timeout: SimDuration::from_millis(25),
            long_timeout: rtt,
            rtt,
            history: 16,
            retention: rtt.times(2),
            silence_horizon: SimDuration::from_secs(5),
            escalate: false,
        }
    }
}

/// Receiver-side loss detector for one flow.
///
/// Mode is `InBurst` when the latest inter-arrival gap is at most twice the
/// median of the history window. In that mode the next packet is expected
/// at `anchor + gap * median` and declared lost `small_timeout` later;
/// otherwise the long timeout runs from the last activity.
#[derive(Debug, Clone)]
pub struct LossDetectorState {
    mode: DetectorMode,
    next_expected: Seq,
    small_timeout: SimDuration,
    long_timeout: SimDuration,
    silence_horizon: SimDuration,
    window: usize,
    history: VecDeque<SimDuration>,
    last_interarrival: Option<SimDuration>,
    last_arrival: Option<SimTime>,
    last_activity: Option<SimTime>,
    /// Highest seq received and its arrival time.
    anchor: Option<(Seq, SimTime)>,
    armed: Option<SimTime>,
    epoch: u64,
    stopped: bool,
}

impl LossDetectorState {
    pub fn new(cfg: &ReceiverConfig) -> Self {
        assert!(cfg.small_timeout < cfg.long_timeout, "small timeout must be below long timeout");
        Self {
            mode: DetectorMode::Idle,
            next_expected: 0,
            small_timeout: cfg.small_timeout,
            long_timeout: cfg.long_timeout,
            silence_horizon: cfg.silence_horizon,
            window: cfg.history.max(1),
            history: VecDeque::new(),
            last_interarrival: None,
            last_arrival: None,
            last_activity: None,
            anchor: None,
            armed: None,
            epoch: 0,
            stopped: false,
        }
    }

    pub fn mode(&self) -> DetectorMode {
        self.mode
    }

    pub fn next_expected(&self) -> Seq {
        self.next_expected
    }

    pub fn armed(&self) -> Option<SimTime> {
        self.armed
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn median_interarrival(&self) -> Option<SimDuration> {
        if self.history.is_empty() {
            return None;
        }
        let mut v: Vec<_> = self.history.iter().copied().collect();
        v.sort_unstable();
        Some(v[(v.len() - 1) / 2])
    }

    /// Burst threshold: twice the history median.
    pub fn burst_threshold(&self) -> Option<SimDuration> {
        self.median_interarrival().map(|m| m.times(2))
    }

    /// Predicted arrival time of `seq` from the anchor and median spacing.
    pub fn expected_arrival(&self, seq: Seq) -> Option<SimTime> {
        let (aseq, at) = self.anchor?;
        let med = self.median_interarrival()?.as_micros() as i128;
        let t = at.as_micros() as i128 + (seq as i128 - aseq as i128) * med;
        Some(SimTime(t.max(0) as u64))
    }

    /// Records an arrival of `seq`; returns seqs newly revealed missing by a
    /// gap, each paired with its predicted arrival time.
    pub fn on_arrival(&mut self, now: SimTime, seq: Seq, end_of_burst: bool) -> Vec<(Seq, SimTime)> {
        if let Some(last) = self.last_arrival {
            let ia = now.since(last);
            self.history.push_back(ia);
            if self.history.len() > self.window {
                self.history.pop_front();
            }
            self.last_interarrival = Some(ia);
        }
        self.last_arrival = Some(now);
        self.last_activity = Some(now);
        self.mode = match (self.last_interarrival, self.burst_threshold()) {
            (Some(ia), Some(th)) if ia <= th => DetectorMode::InBurst,
            _ => DetectorMode::Idle,
        };

        let mut missing = Vec::new();
        if seq >= self.next_expected {
            let prior = self.anchor;
            for s in self.next_expected..seq {
                let guess = match prior {
                    Some(_) => self.expected_arrival(s),
                    None => None,
                }
                .unwrap_or_else(|| {
                    let med = self.median_interarrival().unwrap_or_default();
                    now.saturating_sub(med.times(seq - s))
                });
                missing.push((s, guess));
            }
            self.next_expected = seq + 1;
        }
        if self.anchor.is_none_or(|(a, _)| seq > a) {
            self.anchor = Some((seq, now));
        }
        self.stopped = end_of_burst;
        missing
    }

    /// Deadline for the next timer, or `None` when no timer should run.
    pub fn next_deadline(&self) -> Option<SimTime> {
        if self.stopped {
            return None;
        }
        let last = self.last_activity?;
        match self.mode {
            DetectorMode::InBurst => {
                let expected = self.expected_arrival(self.next_expected)?;
                Some(expected.max(last) + self.small_timeout)
            }
            DetectorMode::Idle => Some(last + self.long_timeout),
        }
    }

    /// Re-arms the single detector timer; returns the timer to schedule.
    pub fn rearm(&mut self) -> Option<(SimTime, u64)> {
        self.epoch += 1;
        self.armed = self.next_deadline();
        self.armed.map(|at| (at, self.epoch))
    }

    /// Timer expiry: returns the seq declared lost, if any, with its
    /// predicted arrival.
    pub fn on_timer(&mut self, now: SimTime, epoch: u64) -> Option<(Seq, SimTime)> {
        if epoch != self.epoch || self.armed.is_none() {
            return None;
        }
        self.armed = None;
        let last = self.last_arrival?;
        if now.since(last) > self.silence_horizon {
            self.stopped = true;
            return None;
        }
        let seq = self.next_expected;
        let expected = match self.mode {
            DetectorMode::InBurst => self.expected_arrival(seq).unwrap_or(now),
            DetectorMode::Idle => now.saturating_sub(self.long_timeout),
        };
        self.next_expected += 1;
        if self.mode == DetectorMode::Idle {
            self.last_activity = Some(now);
        }
        Some((seq, expected))
    }
}

/// Recently received data packets, purged after `retention`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    retention: SimDuration,
    entries: BTreeMap<(FlowId, Seq), (SimTime, DataPacket)>,
    order: VecDeque<(SimTime, FlowId, Seq)>,
}

impl ReplayBuffer {
    pub fn new(retention: SimDuration) -> Self {
        Self {
            retention,
            entries: BTreeMap::new(),
            order: VecDeque::new(),
        }
    }

    pub fn purge(&mut self, now: SimTime) {
        while let Some(&(t, f, s)) = self.order.front() {
            if now.since(t) < self.retention {
                break;
            }
            self.order.pop_front();
            if self.entries.get(&(f, s)).is_some_and(|(at, _)| *at == t) {
                self.entries.remove(&(f, s));
            }
        }
    }

    pub fn insert(&mut self, now: SimTime, pkt: DataPacket) {
        self.purge(now);
        let key = (pkt.flow, pkt.seq);
        self.order.push_back((now, pkt.flow, pkt.seq));
        self.entries.insert(key, (now, pkt));
    }

    pub fn get(&mut self, now: SimTime, flow: FlowId, seq: Seq) -> Option<&DataPacket> {
        self.purge(now);
        self.entries.get(&(flow, seq)).map(|(_, p)| p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Delivery statistics reported to the control plane.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeliveryStats {
    pub delivered: u64,
    pub recovered: u64,
    /// NACKed seqs that never arrived on their original route.
    pub losses: u64,
    pub window_delivered: u64,
    pub window_p50: Option<SimDuration>,
    pub window_p95: Option<SimDuration>,
    pub p50: Option<SimDuration>,
    pub p95: Option<SimDuration>,
}

/// Nearest-rank quantile of an unsorted sample.
pub fn quantile(samples: &[SimDuration], q: f64) -> Option<SimDuration> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_unstable();
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

#[derive(Debug, Clone)]
struct PendingLoss {
    deadline: SimTime,
    escalated: bool,
}

#[derive(Debug, Clone)]
struct HeldParity {
    coverage: Vec<crate::packet::Coverage>,
    parity_count: usize,
    symbols: BTreeMap<u8, Vec<u8>>,
    held_at: SimTime,
}

#[derive(Debug, Clone)]
struct ReceiverFlow {
    egress: NodeId,
    rtt: SimDuration,
    service: ServiceKind,
    detector: LossDetectorState,
    delivered: BTreeSet<Seq>,
    pending: BTreeMap<Seq, PendingLoss>,
    nacked_total: u64,
    late_direct: u64,
    recovered: u64,
    latencies: Vec<SimDuration>,
    window: Vec<SimDuration>,
}

#[derive(Debug)]
pub struct Receiver {
    id: NodeId,
    cfg: ReceiverConfig,
    flows: BTreeMap<FlowId, ReceiverFlow>,
    replay: ReplayBuffer,
    parity: BTreeMap<BatchId, HeldParity>,
}

impl Receiver {
    pub fn new(id: NodeId, cfg: ReceiverConfig) -> Self {
        Self {
            id,
            replay: ReplayBuffer::new(cfg.retention),
            cfg,
            flows: BTreeMap::new(),
            parity: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ReceiverConfig {
        &self.cfg
    }

    pub fn add_flow(
        &mut self,
        flow: FlowId,
        egress: NodeId,
        service: ServiceKind,
        cfg: Option<ReceiverConfig>,
    ) -> Result<(), EndpointError> {
        if self.flows.contains_key(&flow) {
            return Err(EndpointError::DuplicateFlow(flow));
        }
        let cfg = cfg.unwrap_or_else(|| self.cfg.clone());
        self.flows.insert(
            flow,
            ReceiverFlow {
                egress,
                rtt: cfg.rtt,
                service,
                detector: LossDetectorState::new(&cfg),
                delivered: BTreeSet::new(),
                pending: BTreeMap::new(),
                nacked_total: 0,
                late_direct: 0,
                recovered: 0,
                latencies: Vec::new(),
                window: Vec::new(),
            },
        );
        Ok(())
    }

    pub fn detector(&self, flow: FlowId) -> Option<&LossDetectorState> {
        self.flows.get(&flow).map(|f| &f.detector)
    }

    pub fn replay_buffer(&mut self) -> &mut ReplayBuffer {
        &mut self.replay
    }

    pub fn on_receive(
        &mut self,
        now: SimTime,
        from: NodeId,
        pkt: Packet,
        out: &mut Outbox,
    ) -> Result<(), EndpointError> {
        match pkt {
            Packet::Data(d) => self.on_data(now, from, d, out),
            Packet::Recovered(r) => self.on_recovered(now, r, out),
            Packet::Coded(c) => self.on_parity(now, c, out),
            Packet::CoopRequest(req) => {
                self.on_coop_request(now, from, &req.seqs, req.flow, req.batch, out);
                Ok(())
            }
            Packet::Nack(_) | Packet::CoopResponse(_) => Ok(()),
        }
    }

    fn deliver(
        f: &mut ReceiverFlow,
        now: SimTime,
        pkt: &DataPacket,
        via: Via,
        out: &mut Outbox,
    ) {
        let latency = now.since(pkt.sent_at);
        f.delivered.insert(pkt.seq);
        f.latencies.push(latency);
        f.window.push(latency);
        if matches!(via, Via::Recovered { .. }) {
            f.recovered += 1;
        }
        f.pending.remove(&pkt.seq);
        out.note(ProtocolEvent::Delivered {
            flow: pkt.flow,
            seq: pkt.seq,
            via,
            latency_us: latency.as_micros(),
        });
    }

    fn on_data(
        &mut self,
        now: SimTime,
        from: NodeId,
        d: DataPacket,
        out: &mut Outbox,
    ) -> Result<(), EndpointError> {
        let id = self.id;
        let f = self.flows.get_mut(&d.flow).ok_or(EndpointError::UnknownFlow(d.flow))?;
        let rtt = f.rtt;
        f.service = d.service;
        let gaps = f.detector.on_arrival(now, d.seq, d.markers.end_of_burst);
        if f.delivered.contains(&d.seq) {
            out.note(ProtocolEvent::DuplicateDropped {
                flow: d.flow,
                seq: d.seq,
            });
        } else {
            if f.pending.contains_key(&d.seq) {
                f.late_direct += 1;
            }
            let via = if from == f.egress {
                Via::Overlay
            } else {
                Via::Direct
            };
            Self::deliver(f, now, &d, via, out);
            self.replay.insert(now, d.clone());
        }
        let f = self.flows.get_mut(&d.flow).unwrap();
        if f.service.receiver_driven() {
            for (seq, expected) in gaps {
                if f.delivered.contains(&seq) || f.pending.contains_key(&seq) {
                    continue;
                }
                Self::issue_nack(f, id, d.flow, seq, expected + rtt, NackCause::Gap, now, out);
            }
        }
        if let Some((at, epoch)) = f.detector.rearm() {
            out.arm(
                at,
                Timer {
                    kind: TimerKind::Detector { flow: d.flow },
                    epoch,
                },
            );
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn issue_nack(
        f: &mut ReceiverFlow,
        requester: NodeId,
        flow: FlowId,
        seq: Seq,
        deadline: SimTime,
        cause: NackCause,
        now: SimTime,
        out: &mut Outbox,
    ) {
        let deadline = deadline.max(now + TICK);
        let escalate = cause == NackCause::Escalation;
        if !escalate {
            f.nacked_total += 1;
        }
        f.pending.insert(
            seq,
            PendingLoss {
                deadline,
                escalated: escalate,
            },
        );
        out.note(ProtocolEvent::NackIssued {
            flow,
            seqs: vec![seq],
            cause,
            deadline,
        });
        out.send(
            f.egress,
            Packet::Nack(Nack {
                flow,
                seqs: vec![seq],
                requester,
                service: f.service,
                deadline,
                escalate,
            }),
        );
    }

    /// Detector timer expiry for `flow`.
    pub fn on_timer(&mut self, now: SimTime, flow: FlowId, epoch: u64, out: &mut Outbox) {
        let id = self.id;
        let Some(f) = self.flows.get_mut(&flow) else {
            return;
        };
        let rtt = f.rtt;
        let Some((seq, expected)) = f.detector.on_timer(now, epoch) else {
            return;
        };
        if f.service.receiver_driven() && !f.delivered.contains(&seq) && !f.pending.contains_key(&seq) {
            Self::issue_nack(f, id, flow, seq, expected + rtt, NackCause::Timer, now, out);
        }
        if let Some((at, epoch)) = f.detector.rearm() {
            out.arm(
                at,
                Timer {
                    kind: TimerKind::Detector { flow },
                    epoch,
                },
            );
        }
    }

    fn on_recovered(
        &mut self,
        now: SimTime,
        r: RecoveredPacket,
        out: &mut Outbox,
    ) -> Result<(), EndpointError> {
        let d = r.data;
        let f = self.flows.get_mut(&d.flow).ok_or(EndpointError::UnknownFlow(d.flow))?;
        if f.delivered.contains(&d.seq) {
            out.note(ProtocolEvent::DuplicateDropped {
                flow: d.flow,
                seq: d.seq,
            });
            return Ok(());
        }
        Self::deliver(f, now, &d, Via::Recovered { path: r.path }, out);
        self.replay.insert(now, d);
        Ok(())
    }

    /// Answers a cooperative request from the replay buffer; seqs no longer
    /// held are skipped.
    pub fn on_coop_request(
        &mut self,
        now: SimTime,
        from: NodeId,
        seqs: &[Seq],
        flow: FlowId,
        batch: BatchId,
        out: &mut Outbox,
    ) {
        for &seq in seqs {
            if let Some(p) = self.replay.get(now, flow, seq) {
                let payload = p.payload.clone();
                out.send(
                    from,
                    Packet::CoopResponse(CoopResponse {
                        batch,
                        flow,
                        seq,
                        payload,
                    }),
                );
            }
        }
    }

    fn on_parity(&mut self, now: SimTime, c: CodedPacket, out: &mut Outbox) -> Result<(), EndpointError> {
        let Some(first) = c.coverage.first() else {
            return Ok(());
        };
        let flow = first.flow;
        if !self.flows.contains_key(&flow) {
            return Err(EndpointError::UnknownFlow(flow));
        }
        let retention = self.cfg.retention;
        self.parity.retain(|_, h| now.since(h.held_at) < retention);
        let held = self.parity.entry(c.batch).or_insert_with(|| HeldParity {
            coverage: c.coverage.clone(),
            parity_count: c.parity_count as usize,
            symbols: BTreeMap::new(),
            held_at: now,
        });
        held.symbols.insert(c.parity_index, c.payload);
        self.local_in_stream_decode(now, c.batch, out);
        Ok(())
    }

    /// Tries to rebuild the missing packets of an in-stream block from held
    /// parity and this receiver's own copies of the block. Only seqs already
    /// detected missing are delivered.
    pub fn local_in_stream_decode(&mut self, now: SimTime, batch: BatchId, out: &mut Outbox) -> Vec<Seq> {
        let Some(held) = self.parity.get(&batch).cloned() else {
            return Vec::new();
        };
        let flow = held.coverage[0].flow;
        let k = held.coverage.len();
        let mut present = Vec::new();
        let mut missing = Vec::new();
        for (i, cov) in held.coverage.iter().enumerate() {
            match self.replay.get(now, cov.flow, cov.seq) {
                Some(p) => present.push((i, p.payload.clone())),
                None => missing.push(i),
            }
        }
        if missing.is_empty() {
            self.parity.remove(&batch);
            return Vec::new();
        }
        let f = self.flows.get_mut(&flow).expect("checked on arrival");
        let wanted: Vec<usize> = missing
            .iter()
            .copied()
            .filter(|&i| {
                let s = held.coverage[i].seq;
                f.pending.contains_key(&s) && !f.delivered.contains(&s)
            })
            .collect();
        if wanted.is_empty() {
            return Vec::new();
        }

        if present.len() + held.symbols.len() < k {
            if held.symbols.len() < held.parity_count {
                // More parity may still be on its way.
                return Vec::new();
            }
            let id = self.id;
            let escalate = self.cfg.escalate;
            for &i in &wanted {
                let seq = held.coverage[i].seq;
                out.note(ProtocolEvent::RecoveryFailed {
                    flow,
                    seq,
                    reason: FailureReason::InStreamInsufficient,
                });
                let p = &f.pending[&seq];
                if escalate && !p.escalated {
                    let deadline = p.deadline;
                    Self::issue_nack(f, id, flow, seq, deadline, NackCause::Escalation, now, out);
                }
            }
            return Vec::new();
        }

        let len = held
            .coverage
            .iter()
            .map(|c| c.len as usize)
            .max()
            .unwrap_or(0);
        let mut block = SymbolBlock::new(k, held.parity_count, len).expect("valid in-stream block");
        for (i, mut payload) in present {
            payload.resize(len, 0);
            block.insert(i, payload).expect("unique index");
        }
        for (&pi, sym) in &held.symbols {
            let _ = block.insert(k + pi as usize, sym.clone());
        }
        let Ok(data) = codec::decode(&block) else {
            return Vec::new();
        };
        let mut recovered = Vec::new();
        for i in wanted {
            let cov = held.coverage[i];
            let mut payload = data[i].clone();
            payload.truncate(cov.len as usize);
            let pkt = DataPacket {
                flow,
                seq: cov.seq,
                sent_at: cov.sent_at,
                service: f.service,
                markers: Markers::default(),
                payload,
            };
            Self::deliver(f, now, &pkt, Via::Recovered { path: RecoveryPath::InStream }, out);
            self.replay.insert(now, pkt);
            recovered.push(cov.seq);
        }
        out.note(ProtocolEvent::Decoded {
            batch,
            kind: crate::packet::CodingKind::InStream,
            recovered: recovered.iter().map(|&s| (flow, s)).collect(),
        });
        recovered
    }

    /// Cumulative counters plus quantiles for the window since the last call.
    pub fn report_stats(&mut self, flow: FlowId) -> Option<DeliveryStats> {
        let f = self.flows.get_mut(&flow)?;
        let window = std::mem::take(&mut f.window);
        Some(DeliveryStats {
            delivered: f.delivered.len() as u64,
            recovered: f.recovered,
            losses: f.nacked_total.saturating_sub(f.late_direct),
            window_delivered: window.len() as u64,
            window_p50: quantile(&window, 0.5),
            window_p95: quantile(&window, 0.95),
            p50: quantile(&f.latencies, 0.5),
            p95: quantile(&f.latencies, 0.95),
        })
    }
}
