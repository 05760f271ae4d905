//! Simulated message-passing protocol between mixer, clients and server.

mod comm;
mod engine;
mod groups;
mod transport;
mod wire;

pub use comm::{comm_report, CommReport};
pub use engine::{build_datasets, run_round, ClientState, RoundMetrics, SimulationState};
pub use groups::{fedavg_lower, form_groups};
pub use transport::{LinkBytes, TrafficEntry, TrafficLog, Transport};
pub use wire::{
    decode_weights, encode_weights, LabelPayload, MaskItem, MaskPayload, MessageKind, PatchPayload,
    Role, RoundMessage, FRAME_HEADER_BYTES,
};
