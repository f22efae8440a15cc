//! Outputs produced by the protocol state machines.
//!
//! Every node is driven by callbacks that push [`Action`]s; the simulator
//! turns sends into link transmissions, arms timers on its virtual clock and
//! appends notes to the event log.

use serde::{Deserialize, Serialize};

use crate::control::ServiceKind;
use crate::packet::{BatchId, CodingKind, FlowId, NodeId, Packet, RecoveryPath, Seq};
use crate::time::SimTime;

/// Identifies one coding queue at an ingress DC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum QueueId {
    InStream {
        flow: FlowId,
    },
    Cross {
        dest: NodeId,
        subgroup: usize,
        queue: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TimerKind {
    Queue(QueueId),
    Detector { flow: FlowId },
    Ticket { batch: BatchId, round: u64 },
}

/// A timer with an epoch so that re-armed or cancelled timers can be
/// recognised as stale when they fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timer {
    pub kind: TimerKind,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send { to: NodeId, packet: Packet },
    Arm { at: SimTime, timer: Timer },
    Note(ProtocolEvent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Via {
    Direct,
    Overlay,
    Recovered { path: RecoveryPath },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NackCause {
    Gap,
    Timer,
    Escalation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlushReason {
    /// Queue reached capacity.
    Full,
    /// Every eligible cross-stream queue already held the arriving flow.
    AllQueuesHold,
    Timer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryStep {
    CacheHit,
    DecodedHit,
    InStreamParity,
    TicketOpened,
    TicketJoined,
    Parked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// No cache entry, in-stream block or cross-stream batch covers the seq.
    NoCoverage,
    /// Ticket reached its deadline without enough symbols.
    Deadline,
    /// Local in-stream decode lacked symbols.
    InStreamInsufficient,
    /// Parked pull expired before the packet reached the cache.
    ParkExpired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProtocolEvent {
    Delivered {
        flow: FlowId,
        seq: Seq,
        via: Via,
        latency_us: u64,
    },
    DuplicateDropped {
        flow: FlowId,
        seq: Seq,
    },
    NackIssued {
        flow: FlowId,
        seqs: Vec<Seq>,
        cause: NackCause,
        deadline: SimTime,
    },
    /// A coding queue was emptied, either into coded packets (`batch` set) or
    /// by discarding its single packet.
    QueueFlushed {
        queue: QueueId,
        reason: FlushReason,
        kind: CodingKind,
        coverage: Vec<(FlowId, Seq)>,
        batch: Option<BatchId>,
        parity_count: u8,
    },
    Relayed {
        flow: FlowId,
        seq: Seq,
    },
    Recovery {
        flow: FlowId,
        seq: Seq,
        step: RecoveryStep,
    },
    RecoveryFailed {
        flow: FlowId,
        seq: Seq,
        reason: FailureReason,
    },
    Decoded {
        batch: BatchId,
        kind: CodingKind,
        recovered: Vec<(FlowId, Seq)>,
    },
    ServiceChanged {
        flow: FlowId,
        from: ServiceKind,
        to: ServiceKind,
    },
}

/// Collects actions emitted by one callback.
#[derive(Debug, Default)]
pub struct Outbox {
    actions: Vec<Action>,
}

impl Outbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, to: NodeId, packet: Packet) {
        self.actions.push(Action::Send { to, packet });
    }

    pub fn arm(&mut self, at: SimTime, timer: Timer) {
        self.actions.push(Action::Arm { at, timer });
    }

    pub fn note(&mut self, event: ProtocolEvent) {
        self.actions.push(Action::Note(event));
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn take(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.actions)
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Packets sent, in emission order.
    pub fn sent(&self) -> impl Iterator<Item = (NodeId, &Packet)> {
        self.actions.iter().filter_map(|a| match a {
            Action::Send { to, packet } => Some((*to, packet)),
            _ => None,
        })
    }

    pub fn notes(&self) -> impl Iterator<Item = &ProtocolEvent> {
        self.actions.iter().filter_map(|a| match a {
            Action::Note(e) => Some(e),
            _ => None,
        })
    }
}
