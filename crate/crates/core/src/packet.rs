//! Packets exchanged between senders, receivers and the two data centers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::control::ServiceKind;
use crate::time::SimTime;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct FlowId(pub u32);

/// Per-flow sequence number, assigned monotonically by the sender.
pub type Seq = u64;

/// Identifies one coding batch: the ingress DC that built it and a serial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BatchId {
    pub ingress: NodeId,
    pub serial: u64,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

impl fmt::Display for BatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.ingress, self.serial)
    }
}

/// Application-supplied markers carried in the data header.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Markers {
    /// Connection-setup packet (e.g. a SYN-ACK) for selective duplication.
    pub handshake: bool,
    /// Last packet of an application burst; the receiver stops predicting
    /// arrivals after it.
    pub end_of_burst: bool,
}

/// Fixed per-packet header overhead used for byte accounting.
pub const HEADER_BYTES: usize = 28;
/// Per-entry size of coded-packet coverage metadata.
pub const COVERAGE_ENTRY_BYTES: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPacket {
    pub flow: FlowId,
    pub seq: Seq,
    pub sent_at: SimTime,
    pub service: ServiceKind,
    pub markers: Markers,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodingKind {
    InStream,
    CrossStream,
}

/// One data symbol represented in a coded packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coverage {
    pub flow: FlowId,
    pub seq: Seq,
    /// Unpadded payload length of the data packet.
    pub len: u32,
    pub sent_at: SimTime,
}

/// A parity symbol plus the metadata needed to decode it.
///
/// `k_effective` is `coverage.len()`; `parity_index` ranges over
/// `0..parity_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodedPacket {
    pub batch: BatchId,
    pub kind: CodingKind,
    pub coverage: Vec<Coverage>,
    pub parity_index: u8,
    pub parity_count: u8,
    pub payload: Vec<u8>,
}

impl CodedPacket {
    pub fn k_effective(&self) -> usize {
        self.coverage.len()
    }

    pub fn position_of(&self, flow: FlowId, seq: Seq) -> Option<usize> {
        self.coverage
            .iter()
            .position(|c| c.flow == flow && c.seq == seq)
    }

    pub fn covers(&self, flow: FlowId, seq: Seq) -> bool {
        self.position_of(flow, seq).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nack {
    pub flow: FlowId,
    pub seqs: Vec<Seq>,
    pub requester: NodeId,
    pub service: ServiceKind,
    /// Latest virtual time at which a recovered packet is still useful to the
    /// requester.
    pub deadline: SimTime,
    /// Skip the in-stream step; set when a local in-stream decode already
    /// failed for these seqs.
    pub escalate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoopRequest {
    pub batch: BatchId,
    pub flow: FlowId,
    pub seqs: Vec<Seq>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoopResponse {
    pub batch: BatchId,
    pub flow: FlowId,
    pub seq: Seq,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Packet {
    Data(DataPacket),
    Coded(CodedPacket),
    Nack(Nack),
    CoopRequest(CoopRequest),
    CoopResponse(CoopResponse),
    /// A data packet delivered by a recovery path rather than its original
    /// route.
    Recovered(RecoveredPacket),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryPath {
    Cache,
    InStream,
    Cooperative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveredPacket {
    pub path: RecoveryPath,
    pub data: DataPacket,
}

impl Packet {
    pub fn wire_size(&self) -> usize {
        HEADER_BYTES
            + match self {
                Packet::Data(d) => d.payload.len(),
                Packet::Recovered(r) => r.data.payload.len(),
                Packet::Coded(c) => c.payload.len() + c.coverage.len() * COVERAGE_ENTRY_BYTES,
                Packet::Nack(n) => n.seqs.len() * 8,
                Packet::CoopRequest(r) => r.seqs.len() * 8,
                Packet::CoopResponse(r) => r.payload.len(),
            }
    }

    pub fn summary(&self) -> PacketSummary {
        match self {
            Packet::Data(d) => PacketSummary::Data {
                flow: d.flow,
                seq: d.seq,
                service: d.service,
            },
            Packet::Recovered(r) => PacketSummary::Recovered {
                flow: r.data.flow,
                seq: r.data.seq,
                path: r.path,
            },
            Packet::Coded(c) => PacketSummary::Coded {
                batch: c.batch,
                kind: c.kind,
                parity_index: c.parity_index,
                coverage: c.coverage.iter().map(|e| (e.flow, e.seq)).collect(),
            },
            Packet::Nack(n) => PacketSummary::Nack {
                flow: n.flow,
                seqs: n.seqs.clone(),
                deadline: n.deadline,
                escalate: n.escalate,
            },
            Packet::CoopRequest(r) => PacketSummary::CoopRequest {
                batch: r.batch,
                flow: r.flow,
                seqs: r.seqs.clone(),
            },
            Packet::CoopResponse(r) => PacketSummary::CoopResponse {
                batch: r.batch,
                flow: r.flow,
                seq: r.seq,
            },
        }
    }
}

/// Payload-free description of a packet for the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PacketSummary {
    Data {
        flow: FlowId,
        seq: Seq,
        service: ServiceKind,
    },
    Recovered {
        flow: FlowId,
        seq: Seq,
        path: RecoveryPath,
    },
    Coded {
        batch: BatchId,
        kind: CodingKind,
        parity_index: u8,
        coverage: Vec<(FlowId, Seq)>,
    },
    Nack {
        flow: FlowId,
        seqs: Vec<Seq>,
        deadline: SimTime,
        escalate: bool,
    },
    CoopRequest {
        batch: BatchId,
        flow: FlowId,
        seqs: Vec<Seq>,
    },
    CoopResponse {
        batch: BatchId,
        flow: FlowId,
        seq: Seq,
    },
}
