use serde::Serialize;

use super::transport::TrafficLog;
use super::wire::{MessageKind, PatchPayload};

/// Smashed-data uplink volume compared with uploading every patch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommReport {
    /// `SmashedUp` payload bytes per client.
    pub per_client_uplink: Vec<usize>,
    pub mean_uplink_bytes: f64,
    /// What the same messages would cost listing all `N` patches.
    pub mean_dense_bytes: f64,
    pub reduction_factor: f64,
}

/// `items_per_message` batch items of `num_patches × features` per dense upload.
pub fn comm_report(
    log: &TrafficLog,
    clients: usize,
    items_per_message: usize,
    num_patches: usize,
    features: usize,
) -> CommReport {
    let per_client_uplink = log.sent_by_client(MessageKind::SmashedUp, clients);
    let mut messages = vec![0usize; clients];
    for e in log
        .entries()
        .iter()
        .filter(|e| e.kind == MessageKind::SmashedUp)
    {
        if let Some(c) = e.sender.client() {
            messages[c] += 1;
        }
    }
    let dense_one = PatchPayload::encoded_len(&vec![num_patches; items_per_message], features);
    let n = clients.max(1) as f64;
    let mean_uplink_bytes = per_client_uplink.iter().sum::<usize>() as f64 / n;
    let mean_dense_bytes = messages.iter().map(|m| m * dense_one).sum::<usize>() as f64 / n;
    let reduction_factor = if mean_uplink_bytes > 0.0 {
        mean_dense_bytes / mean_uplink_bytes
    } else {
        1.0
    };
    CommReport {
        per_client_uplink,
        mean_uplink_bytes,
        mean_dense_bytes,
        reduction_factor,
    }
}
