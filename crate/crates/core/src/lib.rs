//! Cloud-assisted loss recovery for latency-sensitive flows: erasure codec,
//! ingress/egress DC state machines, endpoints, control plane and a
//! deterministic network simulator to run them in.

pub mod codec;
pub mod control;
pub mod egress;
pub mod endpoint;
pub mod event;
pub mod ingress;
pub mod packet;
pub mod simnet;
pub mod time;

pub use control::ServiceKind;
pub use event::{Action, Outbox, ProtocolEvent};
pub use packet::{FlowId, NodeId, Packet, Seq};
pub use time::{SimDuration, SimTime};
