//! Byte-exact message framing and payload codecs.
//!
//! Frame: `[kind:1][sender:2][receiver:2][round:4][len:4][payload:len]`,
//! little-endian throughout.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAME_HEADER_BYTES: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    MaskDown = 1,
    SmashedUp = 2,
    LabelUp = 3,
    CutGradDown = 4,
    LowerWeightsUp = 5,
    AvgWeightsDown = 6,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => MessageKind::MaskDown,
            2 => MessageKind::SmashedUp,
            3 => MessageKind::LabelUp,
            4 => MessageKind::CutGradDown,
            5 => MessageKind::LowerWeightsUp,
            6 => MessageKind::AvgWeightsDown,
            _ => return Err(Error::Protocol(format!("unknown message kind {b}"))),
        })
    }
}

/// Protocol participant; ids are 0 for the server, 1 for the mixer, `2 + i` for client `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Server,
    Mixer,
    Client(usize),
}

impl Role {
    pub fn id(self) -> u16 {
        match self {
            Role::Server => 0,
            Role::Mixer => 1,
            Role::Client(i) => (i + 2) as u16,
        }
    }

    pub fn from_id(id: u16) -> Self {
        match id {
            0 => Role::Server,
            1 => Role::Mixer,
            i => Role::Client(i as usize - 2),
        }
    }

    pub fn client(self) -> Option<usize> {
        match self {
            Role::Client(i) => Some(i),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub kind: MessageKind,
    pub sender: Role,
    pub receiver: Role,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl RoundMessage {
    pub fn frame_len(&self) -> usize {
        FRAME_HEADER_BYTES + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.frame_len());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.sender.id().to_le_bytes());
        out.extend_from_slice(&self.receiver.id().to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(frame: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(frame);
        let kind = MessageKind::from_byte(r.u8()?)?;
        let sender = Role::from_id(r.u16()?);
        let receiver = Role::from_id(r.u16()?);
        let round = r.u32()?;
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        r.finish()?;
        Ok(Self {
            kind,
            sender,
            receiver,
            round,
            payload,
        })
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Protocol("truncated message".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes in message",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Mixer → client: the client's position in its group and, per batch item,
/// its ratio λ and (for mask-based modes) the group's patch owner map.
///
/// `[member:1][group_size:1][items:4][patches:4]` then per item
/// `[λ:8][owner:1 × patches]`. `patches = 0` when no masks are used.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPayload {
    pub member: u8,
    pub group_size: u8,
    pub num_patches: u32,
    pub items: Vec<MaskItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskItem {
    pub lambda: f64,
    /// Group-local member index owning each patch; empty when unmasked.
    pub owners: Vec<u8>,
}

impl MaskPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.member, self.group_size];
        out.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.num_patches.to_le_bytes());
        for it in &self.items {
            out.extend_from_slice(&it.lambda.to_le_bytes());
            out.extend_from_slice(&it.owners);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        let member = r.u8()?;
        let group_size = r.u8()?;
        let count = r.u32()? as usize;
        let num_patches = r.u32()?;
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            let lambda = r.f64()?;
            let owners = r.take(num_patches as usize)?.to_vec();
            if owners.iter().any(|&o| o >= group_size) {
                return Err(Error::Protocol("mask owner outside group".into()));
            }
            items.push(MaskItem { lambda, owners });
        }
        r.finish()?;
        Ok(Self {
            member,
            group_size,
            num_patches,
            items,
        })
    }

    /// Patch indices owned by this payload's member in item `j`.
    pub fn selected(&self, j: usize) -> Vec<usize> {
        self.items[j]
            .owners
            .iter()
            .enumerate()
            .filter(|(_, &o)| o == self.member)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Sparse patch list per batch item, used for smashed uploads and cut-layer
/// gradients. Dense tensors are the special case listing every patch.
///
/// `[items:4][features:4]` then per item `[k:4]` and `k × ([index:2][f64 × features])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPayload {
    pub features: u32,
    pub items: Vec<Vec<(u16, Vec<f64>)>>,
}

impl PatchPayload {
    /// Bytes for `patches_per_item` over `items` items of width `features`.
    pub fn encoded_len(items: &[usize], features: usize) -> usize {
        8 + items
            .iter()
            .map(|&k| 4 + k * (2 + 8 * features))
            .sum::<usize>()
    }

    /// Builds from `[N, F]` tensors, keeping only `rows[j]` of item `j`.
    pub fn from_rows(tensors: &[Tensor], rows: &[Vec<usize>]) -> Self {
        let features = tensors.first().map_or(0, |t| t.cols());
        let items = tensors
            .iter()
            .zip(rows)
            .map(|(t, idx)| idx.iter().map(|&k| (k as u16, t.row(k).to_vec())).collect())
            .collect();
        Self {
            features: features as u32,
            items,
        }
    }

    pub fn dense(tensors: &[Tensor]) -> Self {
        let rows: Vec<Vec<usize>> = tensors.iter().map(|t| (0..t.rows()).collect()).collect();
        Self::from_rows(tensors, &rows)
    }

    pub fn encode(&self) -> Vec<u8> {
        let counts: Vec<usize> = self.items.iter().map(Vec::len).collect();
        let mut out = Vec::with_capacity(Self::encoded_len(&counts, self.features as usize));
        out.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.features.to_le_bytes());
        for item in &self.items {
            out.extend_from_slice(&(item.len() as u32).to_le_bytes());
            for (k, row) in item {
                out.extend_from_slice(&k.to_le_bytes());
                put_f64s(&mut out, row);
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        let count = r.u32()? as usize;
        let features = r.u32()?;
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            let k = r.u32()? as usize;
            let mut rows = Vec::with_capacity(k);
            for _ in 0..k {
                let idx = r.u16()?;
                rows.push((idx, r.f64s(features as usize)?));
            }
            items.push(rows);
        }
        r.finish()?;
        Ok(Self { features, items })
    }

    /// Item `j` as a dense `[num_patches, F]` tensor, zero where absent.
    pub fn to_dense(&self, j: usize, num_patches: usize) -> Result<Tensor> {
        let mut t = Tensor::zeros(&[num_patches, self.features as usize]);
        for (k, row) in &self.items[j] {
            let k = *k as usize;
            if k >= num_patches {
                return Err(Error::Protocol(format!("patch index {k} ≥ {num_patches}")));
            }
            t.row_mut(k).copy_from_slice(row);
        }
        Ok(t)
    }

    pub fn indices(&self, j: usize) -> Vec<usize> {
        self.items[j].iter().map(|(k, _)| *k as usize).collect()
    }
}

/// Client → server labels with the client's ratio per item.
///
/// `[items:4][dim:4]` then per item `[λ:8][f64 × dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPayload {
    pub items: Vec<(f64, Tensor)>,
}

impl LabelPayload {
    pub fn encode(&self) -> Vec<u8> {
        let dim = self.items.first().map_or(0, |(_, t)| t.len());
        let mut out = Vec::with_capacity(8 + self.items.len() * 8 * (1 + dim));
        out.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for (l, y) in &self.items {
            out.extend_from_slice(&l.to_le_bytes());
            put_f64s(&mut out, y.data());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            let l = r.f64()?;
            items.push((l, Tensor::new(vec![dim], r.f64s(dim)?)?));
        }
        r.finish()?;
        Ok(Self { items })
    }
}

/// Flat parameter vector: `[count:4][f64 × count]`.
pub fn encode_weights(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * values.len());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    put_f64s(&mut out, values);
    out
}

pub fn decode_weights(buf: &[u8]) -> Result<Vec<f64>> {
    let mut r = ByteReader::new(buf);
    let n = r.u32()? as usize;
    let v = r.f64s(n)?;
    r.finish()?;
    Ok(v)
}
