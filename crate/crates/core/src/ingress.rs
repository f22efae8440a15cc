//! Ingress DC: relays forwarding/caching traffic and builds in-stream and
//! cross-stream coded packets for the coding service.
//!
//! Cross-stream batching follows the round-robin queue placement: a packet
//! goes to the next queue of its subgroup that does not already hold a packet
//! from the same flow. When every queue holds the flow, the first queue tried
//! is flushed (encoded if it has more than one packet, otherwise discarded)
//! and the packet takes its place.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::control::ServiceKind;
use crate::event::{FlushReason, Outbox, ProtocolEvent, QueueId, Timer, TimerKind};
use crate::packet::{
    BatchId, CodedPacket, CodingKind, Coverage, DataPacket, FlowId, NodeId, Packet,
};
use crate::time::{SimDuration, SimTime};

/// Upper bound on flows per cross-stream batch.
pub const MAX_CROSS_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingParams {
    /// Maximum flows per cross-stream batch (queue capacity).
    pub k: usize,
    /// Coded packets per cross-stream batch; 0 disables cross-stream coding.
    pub m_cross: usize,
    /// Data packets per in-stream block; 0 disables in-stream coding.
    pub in_stream_block: usize,
    /// Coded packets per in-stream block.
    pub in_stream_parity: usize,
    pub queue_timeout: SimDuration,
    /// Cross-stream queues per subgroup.
    pub cross_queues: usize,
}

impl Default for CodingParams {
    fn default() -> Self {
        Self {
            k: MAX_CROSS_K,
            m_cross: 2,
            in_stream_block: 5,
            in_stream_parity: 1,
            queue_timeout: SimDuration::from_millis(25),
            cross_queues: 1,
        }
    }
}

impl CodingParams {
    /// Cross-stream rate r, coded per data packet for a full batch.
    pub fn cross_rate(&self) -> f64 {
        self.m_cross as f64 / self.k as f64
    }

    /// In-stream rate s.
    pub fn in_stream_rate(&self) -> f64 {
        if self.in_stream_block == 0 {
            0.0
        } else {
            self.in_stream_parity as f64 / self.in_stream_block as f64
        }
    }

    pub fn in_stream_enabled(&self) -> bool {
        self.in_stream_block > 0 && self.in_stream_parity > 0
    }

    pub fn cross_enabled(&self) -> bool {
        self.m_cross > 0
    }

    pub fn validate(&self) -> Result<(), IngressError> {
        let bad = |why: &str| Err(IngressError::InvalidParams(why.to_string()));
        if self.k == 0 || self.k > MAX_CROSS_K {
            return bad("k must be in 1..=10");
        }
        if self.cross_enabled() && self.m_cross >= self.k {
            return bad("cross-stream rate m_cross/k must be below 1");
        }
        if self.in_stream_enabled() && self.in_stream_parity >= self.in_stream_block {
            return bad("in-stream rate must be below 1");
        }
        if self.in_stream_block + self.in_stream_parity > codec::MAX_BLOCK_SYMBOLS {
            return bad("in-stream block too large for GF(256)");
        }
        if self.cross_queues == 0 {
            return bad("at least one cross-stream queue per subgroup");
        }
        if self.queue_timeout == SimDuration::ZERO {
            return bad("queue timeout must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IngressError {
    #[error("flow {0} is not registered at this ingress DC")]
    UnknownFlow(FlowId),
    #[error("flow {0} is already registered")]
    DuplicateFlow(FlowId),
    #[error("invalid coding parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone)]
pub struct CrossStreamQueue {
    pub destination_dc: NodeId,
    slots: Vec<DataPacket>,
    capacity: usize,
    timer_deadline: Option<SimTime>,
    epoch: u64,
}

impl CrossStreamQueue {
    fn new(destination_dc: NodeId, capacity: usize) -> Self {
        Self {
            destination_dc,
            slots: Vec::with_capacity(capacity),
            capacity,
            timer_deadline: None,
            epoch: 0,
        }
    }

    pub fn contains(&self, flow: FlowId) -> bool {
        self.slots.iter().any(|p| p.flow == flow)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.capacity
    }

    pub fn timer_deadline(&self) -> Option<SimTime> {
        self.timer_deadline
    }

    pub fn slots(&self) -> impl Iterator<Item = (FlowId, u64)> + '_ {
        self.slots.iter().map(|p| (p.flow, p.seq))
    }
}

#[derive(Debug, Clone)]
pub struct InStreamQueue {
    pub flow: FlowId,
    slots: Vec<DataPacket>,
    capacity: usize,
    timer_deadline: Option<SimTime>,
    epoch: u64,
}

impl InStreamQueue {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn timer_deadline(&self) -> Option<SimTime> {
        self.timer_deadline
    }
}

#[derive(Debug, Clone)]
struct Subgroup {
    members: Vec<FlowId>,
    queues: Vec<CrossStreamQueue>,
}

/// Flows headed to one destination DC, split into subgroups of at most `k`.
#[derive(Debug, Clone)]
pub struct FlowGroup {
    pub destination_dc: NodeId,
    subgroups: Vec<Subgroup>,
}

impl FlowGroup {
    pub fn subgroups(&self) -> impl Iterator<Item = &[FlowId]> {
        self.subgroups.iter().map(|s| s.members.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupAssignment {
    pub destination_dc: NodeId,
    pub subgroup: usize,
    pub members: usize,
}

#[derive(Debug, Clone)]
struct FlowSlot {
    dest: NodeId,
    subgroup: usize,
    rr_cursor: usize,
}

#[derive(Debug)]
pub struct IngressDc {
    id: NodeId,
    params: CodingParams,
    flows: BTreeMap<FlowId, FlowSlot>,
    groups: BTreeMap<NodeId, FlowGroup>,
    in_stream: BTreeMap<FlowId, InStreamQueue>,
    next_serial: u64,
}

impl IngressDc {
    pub fn new(id: NodeId, params: CodingParams) -> Result<Self, IngressError> {
        params.validate()?;
        Ok(Self {
            id,
            params,
            flows: BTreeMap::new(),
            groups: BTreeMap::new(),
            in_stream: BTreeMap::new(),
            next_serial: 0,
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn params(&self) -> &CodingParams {
        &self.params
    }

    pub fn group(&self, dest: NodeId) -> Option<&FlowGroup> {
        self.groups.get(&dest)
    }

    pub fn cross_queue(&self, dest: NodeId, subgroup: usize, queue: usize) -> Option<&CrossStreamQueue> {
        self.groups
            .get(&dest)?
            .subgroups
            .get(subgroup)?
            .queues
            .get(queue)
    }

    pub fn in_stream_queue(&self, flow: FlowId) -> Option<&InStreamQueue> {
        self.in_stream.get(&flow)
    }

    pub fn assign_flow(
        &mut self,
        flow: FlowId,
        destination_dc: NodeId,
    ) -> Result<SubgroupAssignment, IngressError> {
        if self.flows.contains_key(&flow) {
            return Err(IngressError::DuplicateFlow(flow));
        }
        let k = self.params.k;
        let nq = self.params.cross_queues;
        let group = self.groups.entry(destination_dc).or_insert_with(|| FlowGroup {
            destination_dc,
            subgroups: Vec::new(),
        });
        let idx = match group.subgroups.iter().position(|s| s.members.len() < k) {
            Some(i) => i,
            None => {
                group.subgroups.push(Subgroup {
                    members: Vec::new(),
                    queues: (0..nq)
                        .map(|_| CrossStreamQueue::new(destination_dc, k))
                        .collect(),
                });
                group.subgroups.len() - 1
            }
        };
        group.subgroups[idx].members.push(flow);
        self.flows.insert(
            flow,
            FlowSlot {
                dest: destination_dc,
                subgroup: idx,
                rr_cursor: 0,
            },
        );
        if self.params.in_stream_enabled() {
            self.in_stream.insert(
                flow,
                InStreamQueue {
                    flow,
                    slots: Vec::with_capacity(self.params.in_stream_block),
                    capacity: self.params.in_stream_block,
                    timer_deadline: None,
                    epoch: 0,
                },
            );
        }
        Ok(SubgroupAssignment {
            destination_dc,
            subgroup: idx,
            members: group.subgroups[idx].members.len(),
        })
    }

    /// Handles one data packet arriving from a sender.
    pub fn dc1_process(
        &mut self,
        now: SimTime,
        pkt: DataPacket,
        out: &mut Outbox,
    ) -> Result<(), IngressError> {
        let flow = pkt.flow;
        let slot = self.flows.get(&flow).ok_or(IngressError::UnknownFlow(flow))?;
        let dest = slot.dest;
        match pkt.service {
            ServiceKind::Forwarding | ServiceKind::Caching => {
                out.note(ProtocolEvent::Relayed { flow, seq: pkt.seq });
                out.send(dest, Packet::Data(pkt));
                return Ok(());
            }
            ServiceKind::DirectOnly => return Ok(()),
            ServiceKind::Coding => {}
        }

        if self.params.in_stream_enabled() {
            self.push_in_stream(now, pkt.clone(), out);
        }
        if self.params.cross_enabled() {
            self.push_cross(now, pkt, out);
        }
        Ok(())
    }

    fn push_in_stream(&mut self, now: SimTime, pkt: DataPacket, out: &mut Outbox) {
        let flow = pkt.flow;
        let timeout = self.params.queue_timeout;
        let q = self.in_stream.get_mut(&flow).expect("in-stream queue per flow");
        if q.slots.is_empty() {
            let at = now + timeout;
            q.timer_deadline = Some(at);
            out.arm(
                at,
                Timer {
                    kind: TimerKind::Queue(QueueId::InStream { flow }),
                    epoch: q.epoch,
                },
            );
        }
        q.slots.push(pkt);
        if q.slots.len() >= q.capacity {
            self.flush(now, QueueId::InStream { flow }, FlushReason::Full, out);
        }
    }

    fn next_round_robin(&mut self, flow: FlowId) -> usize {
        let n = self.params.cross_queues;
        let slot = self.flows.get_mut(&flow).expect("registered flow");
        let q = slot.rr_cursor;
        slot.rr_cursor = (slot.rr_cursor + 1) % n;
        q
    }

    fn push_cross(&mut self, now: SimTime, pkt: DataPacket, out: &mut Outbox) {
        let flow = pkt.flow;
        let (dest, subgroup) = {
            let s = &self.flows[&flow];
            (s.dest, s.subgroup)
        };
        let holds = |me: &Self, q: usize| me.groups[&dest].subgroups[subgroup].queues[q].contains(flow);

        let mut q = self.next_round_robin(flow);
        let initial = q;
        while holds(self, q) {
            q = self.next_round_robin(flow);
            if q == initial {
                let id = QueueId::Cross {
                    dest,
                    subgroup,
                    queue: q,
                };
                self.flush(now, id, FlushReason::AllQueuesHold, out);
                break;
            }
        }

        let timeout = self.params.queue_timeout;
        let queue = &mut self.groups.get_mut(&dest).unwrap().subgroups[subgroup].queues[q];
        if queue.slots.is_empty() {
            let at = now + timeout;
            queue.timer_deadline = Some(at);
            out.arm(
                at,
                Timer {
                    kind: TimerKind::Queue(QueueId::Cross {
                        dest,
                        subgroup,
                        queue: q,
                    }),
                    epoch: queue.epoch,
                },
            );
        }
        queue.slots.push(pkt);
        if queue.is_full() {
            let id = QueueId::Cross {
                dest,
                subgroup,
                queue: q,
            };
            self.flush(now, id, FlushReason::Full, out);
        }
    }

    /// Timer expiry for one coding queue. Stale epochs and empty queues are
    /// ignored.
    pub fn on_queue_timer(&mut self, now: SimTime, queue: QueueId, epoch: u64, out: &mut Outbox) {
        let live = match queue {
            QueueId::InStream { flow } => self
                .in_stream
                .get(&flow)
                .is_some_and(|q| q.epoch == epoch && !q.slots.is_empty()),
            QueueId::Cross {
                dest,
                subgroup,
                queue,
            } => self
                .cross_queue(dest, subgroup, queue)
                .is_some_and(|q| q.epoch == epoch && !q.slots.is_empty()),
        };
        if live {
            self.flush(now, queue, FlushReason::Timer, out);
        }
    }

    fn take_queue(&mut self, id: QueueId) -> (Vec<DataPacket>, NodeId) {
        match id {
            QueueId::InStream { flow } => {
                let dest = self.flows[&flow].dest;
                let q = self.in_stream.get_mut(&flow).unwrap();
                q.epoch += 1;
                q.timer_deadline = None;
                (std::mem::take(&mut q.slots), dest)
            }
            QueueId::Cross {
                dest,
                subgroup,
                queue,
            } => {
                let q = &mut self.groups.get_mut(&dest).unwrap().subgroups[subgroup].queues[queue];
                q.epoch += 1;
                q.timer_deadline = None;
                (std::mem::take(&mut q.slots), dest)
            }
        }
    }

    fn flush(&mut self, _now: SimTime, id: QueueId, reason: FlushReason, out: &mut Outbox) {
        let (slots, dest) = self.take_queue(id);
        let (kind, parity_count) = match id {
            QueueId::InStream { .. } => (CodingKind::InStream, self.params.in_stream_parity),
            QueueId::Cross { .. } => (CodingKind::CrossStream, self.params.m_cross),
        };
        let coverage_ids: Vec<_> = slots.iter().map(|p| (p.flow, p.seq)).collect();

        // A lone packet in a cross-stream queue is not worth a coded packet.
        if kind == CodingKind::CrossStream && slots.len() <= 1 {
            out.note(ProtocolEvent::QueueFlushed {
                queue: id,
                reason,
                kind,
                coverage: coverage_ids,
                batch: None,
                parity_count: 0,
            });
            return;
        }

        let batch = BatchId {
            ingress: self.id,
            serial: self.next_serial,
        };
        self.next_serial += 1;
        let padded = codec::pad_symbols(&slots.iter().map(|p| p.payload.as_slice()).collect::<Vec<_>>());
        let parity = codec::encode(&padded, parity_count).expect("validated coding parameters");
        let coverage: Vec<Coverage> = slots
            .iter()
            .map(|p| Coverage {
                flow: p.flow,
                seq: p.seq,
                len: p.payload.len() as u32,
                sent_at: p.sent_at,
            })
            .collect();
        out.note(ProtocolEvent::QueueFlushed {
            queue: id,
            reason,
            kind,
            coverage: coverage_ids,
            batch: Some(batch),
            parity_count: parity_count as u8,
        });
        for (i, payload) in parity.into_iter().enumerate() {
            out.send(
                dest,
                Packet::Coded(CodedPacket {
                    batch,
                    kind,
                    coverage: coverage.clone(),
                    parity_index: i as u8,
                    parity_count: parity_count as u8,
                    payload,
                }),
            );
        }
    }
}
