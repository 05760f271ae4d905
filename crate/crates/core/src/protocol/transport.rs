//! In-process transport: frames every message, enforces the per-batch
//! message order, and records payload bytes.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};

use super::wire::{MessageKind, Role, RoundMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficEntry {
    pub round: u32,
    pub kind: MessageKind,
    pub sender: Role,
    pub receiver: Role,
    pub payload_bytes: usize,
    pub frame_bytes: usize,
}

/// Aggregated bytes on one client link in one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkBytes {
    pub uplink: usize,
    pub downlink: usize,
}

/// Per-message traffic record; aggregates are computed on demand.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficLog {
    entries: Vec<TrafficEntry>,
}

impl TrafficLog {
    pub fn record(&mut self, msg: &RoundMessage) {
        self.entries.push(TrafficEntry {
            round: msg.round,
            kind: msg.kind,
            sender: msg.sender,
            receiver: msg.receiver,
            payload_bytes: msg.payload.len(),
            frame_bytes: msg.frame_len(),
        });
    }

    pub fn entries(&self) -> &[TrafficEntry] {
        &self.entries
    }

    pub fn extend(&mut self, other: &TrafficLog) {
        self.entries.extend_from_slice(&other.entries);
    }

    pub fn total_payload_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.payload_bytes).sum()
    }

    /// `(uplink, downlink)` payload bytes summed over all clients.
    pub fn totals(&self) -> LinkBytes {
        self.per_link()
            .values()
            .fold(LinkBytes::default(), |a, b| LinkBytes {
                uplink: a.uplink + b.uplink,
                downlink: a.downlink + b.downlink,
            })
    }

    /// Payload bytes keyed by `(round, client, peer)`. Uplink is client → peer,
    /// downlink is peer → client.
    pub fn per_link(&self) -> BTreeMap<(u32, usize, Role), LinkBytes> {
        let mut out: BTreeMap<(u32, usize, Role), LinkBytes> = BTreeMap::new();
        for e in &self.entries {
            if let Some(c) = e.sender.client() {
                out.entry((e.round, c, e.receiver)).or_default().uplink += e.payload_bytes;
            }
            if let Some(c) = e.receiver.client() {
                out.entry((e.round, c, e.sender)).or_default().downlink += e.payload_bytes;
            }
        }
        out
    }

    /// Payload bytes of `kind` sent by each of `clients` clients.
    pub fn sent_by_client(&self, kind: MessageKind, clients: usize) -> Vec<usize> {
        let mut out = vec![0; clients];
        for e in self.entries.iter().filter(|e| e.kind == kind) {
            if let Some(c) = e.sender.client() {
                out[c] += e.payload_bytes;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Phase {
    mask: bool,
    smashed: bool,
    label: bool,
    grad: bool,
    weights_up: bool,
    avg_down: bool,
}

/// Delivers framed messages between roles within one batch step.
///
/// Per client the order is `MaskDown` (when a mixer is in use), then
/// `SmashedUp` and `LabelUp` in either order, then `CutGradDown`, then
/// optionally `LowerWeightsUp` and `AvgWeightsDown`. Anything else is a
/// protocol error.
#[derive(Debug)]
pub struct Transport {
    round: u32,
    uses_mixer: bool,
    phases: Vec<Phase>,
    inbox: BTreeMap<Role, VecDeque<RoundMessage>>,
    log: TrafficLog,
}

impl Transport {
    pub fn new(clients: usize, uses_mixer: bool) -> Self {
        Self {
            round: 0,
            uses_mixer,
            phases: vec![Phase::default(); clients],
            inbox: BTreeMap::new(),
            log: TrafficLog::default(),
        }
    }

    /// Starts a new batch step; pending messages from the previous step are an error.
    pub fn begin_step(&mut self, round: u32) -> Result<()> {
        if let Some((role, q)) = self.inbox.iter().find(|(_, q)| !q.is_empty()) {
            return Err(Error::Protocol(format!(
                "{} undelivered message(s) for {role:?} at step boundary",
                q.len()
            )));
        }
        self.round = round;
        self.phases.fill(Phase::default());
        Ok(())
    }

    fn violation(msg: &RoundMessage, why: &str) -> Error {
        Error::Protocol(format!(
            "{:?} from {:?} to {:?} rejected: {why}",
            msg.kind, msg.sender, msg.receiver
        ))
    }

    fn check_and_advance(&mut self, msg: &RoundMessage) -> Result<()> {
        if msg.round != self.round {
            return Err(Self::violation(msg, "wrong round"));
        }
        let (client, expect_from, expect_to) = match msg.kind {
            MessageKind::MaskDown => (msg.receiver.client(), Role::Mixer, msg.receiver),
            MessageKind::SmashedUp | MessageKind::LabelUp | MessageKind::LowerWeightsUp => {
                (msg.sender.client(), msg.sender, Role::Server)
            }
            MessageKind::CutGradDown | MessageKind::AvgWeightsDown => {
                (msg.receiver.client(), Role::Server, msg.receiver)
            }
        };
        let c = client.ok_or_else(|| Self::violation(msg, "no client endpoint"))?;
        if msg.sender != expect_from || msg.receiver != expect_to {
            return Err(Self::violation(msg, "wrong endpoints"));
        }
        let uses_mixer = self.uses_mixer;
        let p = self
            .phases
            .get_mut(c)
            .ok_or_else(|| Self::violation(msg, "unknown client"))?;
        let ok = match msg.kind {
            MessageKind::MaskDown => uses_mixer && !p.mask && !p.smashed && !p.label,
            MessageKind::SmashedUp => (p.mask || !uses_mixer) && !p.smashed && !p.grad,
            MessageKind::LabelUp => (p.mask || !uses_mixer) && !p.label && !p.grad,
            MessageKind::CutGradDown => p.smashed && p.label && !p.grad,
            MessageKind::LowerWeightsUp => p.grad && !p.weights_up,
            MessageKind::AvgWeightsDown => p.weights_up && !p.avg_down,
        };
        if !ok {
            return Err(Self::violation(msg, "out of order"));
        }
        match msg.kind {
            MessageKind::MaskDown => p.mask = true,
            MessageKind::SmashedUp => p.smashed = true,
            MessageKind::LabelUp => p.label = true,
            MessageKind::CutGradDown => p.grad = true,
            MessageKind::LowerWeightsUp => p.weights_up = true,
            MessageKind::AvgWeightsDown => p.avg_down = true,
        }
        Ok(())
    }

    /// Serializes, validates order, logs, and queues for the receiver.
    pub fn send(&mut self, msg: RoundMessage) -> Result<()> {
        let frame = msg.encode();
        let delivered = RoundMessage::decode(&frame)?;
        self.check_and_advance(&delivered)?;
        self.log.record(&delivered);
        self.inbox
            .entry(delivered.receiver)
            .or_default()
            .push_back(delivered);
        Ok(())
    }

    /// Takes the oldest queued `kind` message from `sender` to `receiver`.
    pub fn recv(
        &mut self,
        receiver: Role,
        sender: Role,
        kind: MessageKind,
    ) -> Result<RoundMessage> {
        let q = self.inbox.entry(receiver).or_default();
        let pos = q
            .iter()
            .position(|m| m.kind == kind && m.sender == sender)
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "no {kind:?} from {sender:?} queued for {receiver:?}"
                ))
            })?;
        Ok(q.remove(pos).expect("position is in range"))
    }

    pub fn log(&self) -> &TrafficLog {
        &self.log
    }

    pub fn take_log(&mut self) -> TrafficLog {
        std::mem::take(&mut self.log)
    }
}
