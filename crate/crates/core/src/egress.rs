//! Egress DC: caches data (caching service) or coded packets (coding
//! service) and answers receiver NACKs.
//!
//! NACK resolution order per seq: cached or already-decoded copy, then
//! in-stream parity sent back for a local decode, then a cooperative
//! recovery ticket over the cross-stream batch. Anything else fails
//! silently; the failure is only noted in the event log.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, SymbolBlock};
use crate::control::ServiceKind;
use crate::endpoint::ReplayBuffer;
use crate::event::{FailureReason, Outbox, ProtocolEvent, RecoveryStep, Timer, TimerKind};
use crate::packet::{
    BatchId, CodedPacket, CodingKind, CoopRequest, CoopResponse, Coverage, DataPacket, FlowId,
    Markers, Nack, NodeId, Packet, RecoveredPacket, RecoveryPath, Seq,
};
use crate::time::{SimDuration, SimTime, TICK};

/// Short-term data packet cache keyed by (flow, seq). Same retention rules
/// as the receiver's replay buffer.
pub type PacketCache = ReplayBuffer;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EgressError {
    #[error("flow {0} is not registered at this egress DC")]
    UnknownFlow(FlowId),
    #[error("flow {0} is already registered")]
    DuplicateFlow(FlowId),
    #[error("coded packet for batch {0} disagrees with stored coverage")]
    CoverageMismatch(BatchId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgressConfig {
    /// Lifetime of cached data and stored coded packets.
    pub ttl: SimDuration,
}

impl EgressConfig {
    /// Default ttl of twice the direct-path RTT.
    pub fn for_rtt(rtt: SimDuration) -> Self {
        Self { ttl: rtt.times(2) }
    }
}

#[derive(Debug, Clone)]
pub struct StoredBatch {
    pub kind: CodingKind,
    pub coverage: Vec<Coverage>,
    pub parity_count: u8,
    pub symbols: BTreeMap<u8, Vec<u8>>,
    pub stored_at: SimTime,
    decoded: Option<Vec<Vec<u8>>>,
}

impl StoredBatch {
    pub fn position_of(&self, flow: FlowId, seq: Seq) -> Option<usize> {
        self.coverage
            .iter()
            .position(|c| c.flow == flow && c.seq == seq)
    }

    pub fn is_decoded(&self) -> bool {
        self.decoded.is_some()
    }
}

#[derive(Debug, Clone, Default)]
struct Covering {
    in_stream: Option<BatchId>,
    cross: Option<BatchId>,
}

/// Coded packets grouped by batch, with a (flow, seq) index.
#[derive(Debug, Clone)]
pub struct CodedStore {
    ttl: SimDuration,
    batches: BTreeMap<BatchId, StoredBatch>,
    index: BTreeMap<(FlowId, Seq), Covering>,
    order: VecDeque<BatchId>,
}

impl CodedStore {
    pub fn new(ttl: SimDuration) -> Self {
        Self {
            ttl,
            batches: BTreeMap::new(),
            index: BTreeMap::new(),
            order: VecDeque::new(),
        }
    }

    pub fn insert(&mut self, now: SimTime, c: CodedPacket) -> Result<&StoredBatch, EgressError> {
        let batch = c.batch;
        if let Some(b) = self.batches.get_mut(&batch) {
            if b.coverage != c.coverage || b.kind != c.kind || b.parity_count != c.parity_count {
                return Err(EgressError::CoverageMismatch(batch));
            }
            b.symbols.insert(c.parity_index, c.payload);
            return Ok(&self.batches[&batch]);
        }
        for cov in &c.coverage {
            let e = self.index.entry((cov.flow, cov.seq)).or_default();
            match c.kind {
                CodingKind::InStream => e.in_stream = Some(batch),
                CodingKind::CrossStream => e.cross = Some(batch),
            }
        }
        self.order.push_back(batch);
        let mut symbols = BTreeMap::new();
        symbols.insert(c.parity_index, c.payload);
        self.batches.insert(
            batch,
            StoredBatch {
                kind: c.kind,
                coverage: c.coverage,
                parity_count: c.parity_count,
                symbols,
                stored_at: now,
                decoded: None,
            },
        );
        Ok(&self.batches[&batch])
    }

    /// Drops expired batches, except those in `keep`.
    pub fn purge(&mut self, now: SimTime, keep: &BTreeSet<BatchId>) {
        let mut kept = Vec::new();
        while let Some(&id) = self.order.front() {
            let Some(b) = self.batches.get(&id) else {
                self.order.pop_front();
                continue;
            };
            if now.since(b.stored_at) < self.ttl {
                break;
            }
            self.order.pop_front();
            if keep.contains(&id) {
                kept.push(id);
                continue;
            }
            let b = self.batches.remove(&id).unwrap();
            for cov in &b.coverage {
                if let Some(e) = self.index.get_mut(&(cov.flow, cov.seq)) {
                    if e.in_stream == Some(id) {
                        e.in_stream = None;
                    }
                    if e.cross == Some(id) {
                        e.cross = None;
                    }
                    if e.in_stream.is_none() && e.cross.is_none() {
                        self.index.remove(&(cov.flow, cov.seq));
                    }
                }
            }
        }
        for id in kept.into_iter().rev() {
            self.order.push_front(id);
        }
    }

    pub fn get(&self, batch: BatchId) -> Option<&StoredBatch> {
        self.batches.get(&batch)
    }

    pub fn in_stream_for(&self, flow: FlowId, seq: Seq) -> Option<BatchId> {
        self.index.get(&(flow, seq)).and_then(|c| c.in_stream)
    }

    pub fn cross_for(&self, flow: FlowId, seq: Seq) -> Option<BatchId> {
        self.index.get(&(flow, seq)).and_then(|c| c.cross)
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Requester {
    node: NodeId,
    /// Latest time a recovered packet may leave DC2 and still reach the
    /// requester by its NACK deadline.
    deliver_by: SimTime,
}

/// One cooperative recovery in progress over a cross-stream batch.
#[derive(Debug, Clone)]
pub struct RecoveryTicket {
    pub batch: BatchId,
    pub round: u64,
    missing: BTreeMap<usize, Vec<Requester>>,
    solicited: BTreeSet<usize>,
    responses: BTreeMap<usize, Vec<u8>>,
    pub deadline: SimTime,
    epoch: u64,
}

impl RecoveryTicket {
    pub fn missing_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.missing.keys().copied()
    }

    pub fn solicited_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.solicited.iter().copied()
    }

    pub fn response_count(&self) -> usize {
        self.responses.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct EgressFlow {
    receiver: NodeId,
    return_latency: SimDuration,
}

#[derive(Debug, Clone, Copy)]
struct ParkedPull {
    requester: Requester,
    expires: SimTime,
}

#[derive(Debug)]
pub struct EgressDc {
    id: NodeId,
    cfg: EgressConfig,
    flows: BTreeMap<FlowId, EgressFlow>,
    cache: PacketCache,
    store: CodedStore,
    tickets: BTreeMap<BatchId, RecoveryTicket>,
    rounds: BTreeMap<BatchId, u64>,
    nacked: BTreeMap<FlowId, BTreeSet<Seq>>,
    parked: BTreeMap<(FlowId, Seq), Vec<ParkedPull>>,
}

impl EgressDc {
    pub fn new(id: NodeId, cfg: EgressConfig) -> Self {
        Self {
            id,
            cfg,
            flows: BTreeMap::new(),
            cache: PacketCache::new(cfg.ttl),
            store: CodedStore::new(cfg.ttl),
            tickets: BTreeMap::new(),
            rounds: BTreeMap::new(),
            nacked: BTreeMap::new(),
            parked: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    /// Registers a flow delivered through this DC. `return_latency` is the
    /// one-way DC2-to-receiver latency used to budget recovery deadlines.
    pub fn add_flow(
        &mut self,
        flow: FlowId,
        receiver: NodeId,
        return_latency: SimDuration,
    ) -> Result<(), EgressError> {
        if self.flows.contains_key(&flow) {
            return Err(EgressError::DuplicateFlow(flow));
        }
        self.flows.insert(
            flow,
            EgressFlow {
                receiver,
                return_latency,
            },
        );
        Ok(())
    }

    pub fn coded_store(&self) -> &CodedStore {
        &self.store
    }

    pub fn ticket(&self, batch: BatchId) -> Option<&RecoveryTicket> {
        self.tickets.get(&batch)
    }

    pub fn on_receive(
        &mut self,
        now: SimTime,
        _from: NodeId,
        pkt: Packet,
        out: &mut Outbox,
    ) -> Result<(), EgressError> {
        self.housekeeping(now, out);
        match pkt {
            Packet::Data(_) | Packet::Coded(_) => self.store(now, pkt, out),
            Packet::Nack(n) => self.handle_nack(now, &n, out),
            Packet::CoopResponse(r) => {
                self.handle_coop_response(now, r, out);
                Ok(())
            }
            Packet::CoopRequest(_) | Packet::Recovered(_) => Ok(()),
        }
    }

    fn housekeeping(&mut self, now: SimTime, out: &mut Outbox) {
        let keep: BTreeSet<BatchId> = self.tickets.keys().copied().collect();
        self.store.purge(now, &keep);
        self.cache.purge(now);
        let mut expired = Vec::new();
        self.parked.retain(|&(flow, seq), pulls| {
            pulls.retain(|p| p.expires > now);
            if pulls.is_empty() {
                expired.push((flow, seq));
                false
            } else {
                true
            }
        });
        for (flow, seq) in expired {
            out.note(ProtocolEvent::RecoveryFailed {
                flow,
                seq,
                reason: FailureReason::ParkExpired,
            });
        }
    }

    /// Stores or relays a packet arriving from the ingress DC.
    pub fn store(&mut self, now: SimTime, pkt: Packet, out: &mut Outbox) -> Result<(), EgressError> {
        match pkt {
            Packet::Data(d) => {
                let f = *self.flows.get(&d.flow).ok_or(EgressError::UnknownFlow(d.flow))?;
                match d.service {
                    ServiceKind::Forwarding => {
                        out.note(ProtocolEvent::Relayed {
                            flow: d.flow,
                            seq: d.seq,
                        });
                        out.send(f.receiver, Packet::Data(d));
                    }
                    ServiceKind::Caching => {
                        let key = (d.flow, d.seq);
                        if let Some(pulls) = self.parked.remove(&key) {
                            for p in pulls {
                                self.send_recovered(now, p.requester, &d, RecoveryPath::Cache, out);
                            }
                        }
                        self.cache.insert(now, d);
                    }
                    ServiceKind::Coding | ServiceKind::DirectOnly => {}
                }
                Ok(())
            }
            Packet::Coded(c) => {
                let batch = c.batch;
                self.store.insert(now, c)?;
                if self.tickets.contains_key(&batch) {
                    self.try_decode(now, batch, out);
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn send_recovered(
        &self,
        now: SimTime,
        to: Requester,
        data: &DataPacket,
        path: RecoveryPath,
        out: &mut Outbox,
    ) -> bool {
        if now > to.deliver_by {
            out.note(ProtocolEvent::RecoveryFailed {
                flow: data.flow,
                seq: data.seq,
                reason: FailureReason::Deadline,
            });
            return false;
        }
        out.send(
            to.node,
            Packet::Recovered(RecoveredPacket {
                path,
                data: data.clone(),
            }),
        );
        true
    }

    fn rebuild(batch: &StoredBatch, pos: usize, service: ServiceKind) -> Option<DataPacket> {
        let data = batch.decoded.as_ref()?;
        let cov = batch.coverage[pos];
        let mut payload = data[pos].clone();
        payload.truncate(cov.len as usize);
        Some(DataPacket {
            flow: cov.flow,
            seq: cov.seq,
            sent_at: cov.sent_at,
            service,
            markers: Markers::default(),
            payload,
        })
    }

    pub fn handle_nack(&mut self, now: SimTime, nack: &Nack, out: &mut Outbox) -> Result<(), EgressError> {
        let f = *self.flows.get(&nack.flow).ok_or(EgressError::UnknownFlow(nack.flow))?;
        let requester = Requester {
            node: nack.requester,
            deliver_by: nack.deadline.saturating_sub(f.return_latency).max(now + TICK),
        };
        for &seq in &nack.seqs {
            self.nacked.entry(nack.flow).or_default().insert(seq);
            self.resolve(now, nack, seq, requester, out);
        }
        Ok(())
    }

    fn resolve(&mut self, now: SimTime, nack: &Nack, seq: Seq, req: Requester, out: &mut Outbox) {
        let flow = nack.flow;
        let step = |out: &mut Outbox, step| out.note(ProtocolEvent::Recovery { flow, seq, step });

        // (1) cached copy, or a batch that was already decoded
        if let Some(d) = self.cache.get(now, flow, seq).cloned() {
            step(out, RecoveryStep::CacheHit);
            self.send_recovered(now, req, &d, RecoveryPath::Cache, out);
            return;
        }
        let decoded = self.store.cross_for(flow, seq).and_then(|b| {
            let sb = self.store.get(b)?;
            Self::rebuild(sb, sb.position_of(flow, seq)?, nack.service)
        });
        if let Some(d) = decoded {
            step(out, RecoveryStep::DecodedHit);
            self.send_recovered(now, req, &d, RecoveryPath::Cooperative, out);
            return;
        }

        // (2) in-stream parity for a local decode at the receiver
        if !nack.escalate {
            if let Some(b) = self.store.in_stream_for(flow, seq) {
                let sb = self.store.get(b).unwrap();
                let nacked = &self.nacked[&flow];
                let missing = sb.coverage.iter().filter(|c| nacked.contains(&c.seq)).count();
                if missing <= sb.symbols.len() {
                    step(out, RecoveryStep::InStreamParity);
                    for (&idx, sym) in &sb.symbols {
                        out.send(
                            req.node,
                            Packet::Coded(CodedPacket {
                                batch: b,
                                kind: CodingKind::InStream,
                                coverage: sb.coverage.clone(),
                                parity_index: idx,
                                parity_count: sb.parity_count,
                                payload: sym.clone(),
                            }),
                        );
                    }
                    return;
                }
            }
        }

        // (3) cooperative recovery over the cross-stream batch
        if let Some(b) = self.store.cross_for(flow, seq) {
            self.open_or_join(now, b, flow, seq, req, out);
            return;
        }

        // (4) caching pull that beat the packet: park until ttl
        if nack.service == ServiceKind::Caching {
            step(out, RecoveryStep::Parked);
            self.parked.entry((flow, seq)).or_default().push(ParkedPull {
                requester: req,
                expires: now + self.cfg.ttl,
            });
            return;
        }
        out.note(ProtocolEvent::RecoveryFailed {
            flow,
            seq,
            reason: FailureReason::NoCoverage,
        });
    }

    fn open_or_join(
        &mut self,
        now: SimTime,
        batch: BatchId,
        flow: FlowId,
        seq: Seq,
        req: Requester,
        out: &mut Outbox,
    ) {
        let sb = self.store.get(batch).unwrap();
        let pos = sb.position_of(flow, seq).unwrap();

        if let Some(t) = self.tickets.get_mut(&batch) {
            out.note(ProtocolEvent::Recovery {
                flow,
                seq,
                step: RecoveryStep::TicketJoined,
            });
            t.missing.entry(pos).or_default().push(req);
            t.solicited.remove(&pos);
            t.responses.remove(&pos);
            if req.deliver_by > t.deadline {
                t.deadline = req.deliver_by;
                t.epoch += 1;
                out.arm(
                    t.deadline,
                    Timer {
                        kind: TimerKind::Ticket {
                            batch,
                            round: t.round,
                        },
                        epoch: t.epoch,
                    },
                );
            }
            self.try_decode(now, batch, out);
            return;
        }

        out.note(ProtocolEvent::Recovery {
            flow,
            seq,
            step: RecoveryStep::TicketOpened,
        });
        let round = {
            let r = self.rounds.entry(batch).or_insert(0);
            *r += 1;
            *r
        };
        let nacked = &self.nacked;
        let mut solicited = BTreeSet::new();
        for (i, cov) in sb.coverage.iter().enumerate() {
            if i == pos || nacked.get(&cov.flow).is_some_and(|s| s.contains(&cov.seq)) {
                continue;
            }
            let Some(helper) = self.flows.get(&cov.flow) else {
                continue;
            };
            solicited.insert(i);
            out.send(
                helper.receiver,
                Packet::CoopRequest(CoopRequest {
                    batch,
                    flow: cov.flow,
                    seqs: vec![cov.seq],
                }),
            );
        }
        let ticket = RecoveryTicket {
            batch,
            round,
            missing: BTreeMap::from([(pos, vec![req])]),
            solicited,
            responses: BTreeMap::new(),
            deadline: req.deliver_by,
            epoch: 0,
        };
        out.arm(
            ticket.deadline,
            Timer {
                kind: TimerKind::Ticket { batch, round },
                epoch: 0,
            },
        );
        self.tickets.insert(batch, ticket);
        self.try_decode(now, batch, out);
    }

    pub fn handle_coop_response(&mut self, now: SimTime, resp: CoopResponse, out: &mut Outbox) {
        let Some(t) = self.tickets.get_mut(&resp.batch) else {
            return;
        };
        let Some(sb) = self.store.get(resp.batch) else {
            return;
        };
        let Some(pos) = sb.position_of(resp.flow, resp.seq) else {
            return;
        };
        if !t.solicited.contains(&pos) {
            return;
        }
        t.responses.insert(pos, resp.payload);
        self.try_decode(now, resp.batch, out);
    }

    fn try_decode(&mut self, now: SimTime, batch: BatchId, out: &mut Outbox) {
        let (Some(t), Some(sb)) = (self.tickets.get(&batch), self.store.get(batch)) else {
            return;
        };
        let k = sb.coverage.len();
        if t.responses.len() + sb.symbols.len() < k {
            return;
        }
        let len = sb.symbols.values().next().map_or(0, Vec::len);
        let mut block = SymbolBlock::new(k, sb.parity_count as usize, len).expect("valid batch");
        for (&pos, payload) in &t.responses {
            let mut p = payload.clone();
            p.resize(len, 0);
            block.insert(pos, p).expect("unique position");
        }
        for (&idx, sym) in &sb.symbols {
            block
                .insert(k + idx as usize, sym.clone())
                .expect("parity index within batch");
        }
        let data = match codec::decode(&block) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("decode of batch {batch} failed: {e}");
                return;
            }
        };
        let t = self.tickets.remove(&batch).unwrap();
        let sb = self.store.batches.get_mut(&batch).unwrap();
        sb.decoded = Some(data);
        let sb = &self.store.batches[&batch];
        let mut recovered = Vec::new();
        for (&pos, reqs) in &t.missing {
            let cov = sb.coverage[pos];
            let d = Self::rebuild(sb, pos, ServiceKind::Coding).unwrap();
            recovered.push((cov.flow, cov.seq));
            for &r in reqs {
                self.send_recovered(now, r, &d, RecoveryPath::Cooperative, out);
            }
        }
        out.note(ProtocolEvent::Decoded {
            batch,
            kind: CodingKind::CrossStream,
            recovered,
        });
    }

    /// Ticket deadline: unresolved seqs are recorded as failures and the
    /// ticket is dropped. Late responses are then ignored.
    pub fn on_ticket_timer(
        &mut self,
        now: SimTime,
        batch: BatchId,
        round: u64,
        epoch: u64,
        out: &mut Outbox,
    ) {
        let live = self
            .tickets
            .get(&batch)
            .is_some_and(|t| t.round == round && t.epoch == epoch);
        if !live {
            return;
        }
        let t = self.tickets.remove(&batch).unwrap();
        if let Some(sb) = self.store.get(batch) {
            for &pos in t.missing.keys() {
                let cov = sb.coverage[pos];
                out.note(ProtocolEvent::RecoveryFailed {
                    flow: cov.flow,
                    seq: cov.seq,
                    reason: FailureReason::Deadline,
                });
            }
        }
        self.housekeeping(now, out);
    }
}
