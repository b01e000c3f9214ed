//! Message packets and their little-endian wire format.
//!
//! ```text
//! "CPLT" | version u16 | agent_id u32 | k u32 | d u32 | pose 6×f32 | coords k×3×f32 | features k×d×f32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"CPLT";
pub const VERSION: u16 = 1;
/// Magic, version, agent id, k, d.
pub const HEADER_BYTES: usize = 18;
pub const POSE_FLOATS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct MessagePacket {
    pub agent_id: u32,
    /// `k × d`.
    pub features: Matrix<f32>,
    /// Sender frame, meters.
    pub coords: Vec<[f32; 3]>,
    /// `[x, y, z, yaw, pitch, roll]` of the sender.
    pub pose: [f32; 6],
}

impl MessagePacket {
    pub fn k(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.k() {
            return Err(shape("packet coords", self.k(), self.coords.len()));
        }
        if u32::try_from(self.k()).is_err() || u32::try_from(self.d()).is_err() {
            return Err(invalid("packet dimensions exceed u32"));
        }
        let finite = self.features.as_slice().iter().all(|v| v.is_finite())
            && self.coords.iter().flatten().all(|v| v.is_finite())
            && self.pose.iter().all(|v| v.is_finite());
        if !finite {
            return Err(invalid("packet holds non-finite values"));
        }
        Ok(())
    }

    /// Bit-level equality, so NaN payloads and signed zeros compare exactly.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.agent_id == other.agent_id
            && self.k() == other.k()
            && self.d() == other.d()
            && bits(self.features.as_slice()) == bits(other.features.as_slice())
            && bits(self.coords.as_flattened()) == bits(other.coords.as_flattened())
            && bits(&self.pose) == bits(&other.pose)
    }
}

pub fn encoded_len(k: usize, d: usize) -> usize {
    HEADER_BYTES + 4 * (POSE_FLOATS + k * (3 + d))
}

pub fn pack(packet: &MessagePacket) -> Vec<u8> {
    let (k, d) = (packet.k(), packet.d());
    let mut buf = Vec::with_capacity(encoded_len(k, d));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&packet.agent_id.to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    let floats = packet.pose.iter().chain(packet.coords.as_flattened()).chain(packet.features.as_slice());
    for v in floats {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn u32_at(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes"))
}

fn f32s(buf: &[u8]) -> Vec<f32> {
    buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
}

/// Decode the packet at the front of `buf`; returns it and the bytes used.
pub fn unpack_prefix(buf: &[u8]) -> Result<(MessagePacket, usize)> {
    if buf.len() < HEADER_BYTES {
        return Err(Error::Length { expected: HEADER_BYTES, actual: buf.len() });
    }
    let magic: [u8; 4] = buf[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic, expected: MAGIC });
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: VERSION });
    }
    let agent_id = u32_at(buf, 6);
    let k = u32_at(buf, 10) as usize;
    let d = u32_at(buf, 14) as usize;
    let total = encoded_len(k, d);
    if buf.len() < total {
        return Err(Error::Length { expected: total, actual: buf.len() });
    }
    let mut at = HEADER_BYTES;
    let pose: [f32; 6] = f32s(&buf[at..at + 24]).try_into().expect("6 floats");
    at += 24;
    let coords = f32s(&buf[at..at + 12 * k]).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    at += 12 * k;
    let features = Matrix::from_vec(k, d, f32s(&buf[at..at + 4 * k * d]))?;
    Ok((MessagePacket { agent_id, features, coords, pose }, total))
}

/// Exact inverse of [`pack`]; trailing bytes are a length error.
pub fn unpack(buf: &[u8]) -> Result<MessagePacket> {
    let (packet, used) = unpack_prefix(buf)?;
    if used != buf.len() {
        return Err(Error::Length { expected: used, actual: buf.len() });
    }
    Ok(packet)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    /// Coordinate and feature floats, 4 bytes each.
    pub token_bytes: u64,
    /// Token floats plus the pose, 4 bytes each.
    pub payload_bytes: u64,
    pub total_bytes: u64,
    pub log2_bytes: f64,
}

impl CommReport {
    pub fn for_shape(k: usize, d: usize) -> Self {
        let tokens = 4 * k as u64 * (d as u64 + 3);
        let payload = tokens + 4 * POSE_FLOATS as u64;
        let total = payload + HEADER_BYTES as u64;
        Self { token_bytes: tokens, payload_bytes: payload, total_bytes: total, log2_bytes: (total as f64).log2() }
    }
}

pub fn comm_volume(packet: &MessagePacket) -> CommReport {
    CommReport::for_shape(packet.k(), packet.d())
}

/// Concatenated packets.
pub fn write_packets(path: impl AsRef<Path>, packets: &[MessagePacket]) -> Result<()> {
    let buf: Vec<u8> = packets.iter().flat_map(pack).collect();
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_packets(path: impl AsRef<Path>) -> Result<Vec<MessagePacket>> {
    let buf = fs::read(path)?;
    let mut out = Vec::new();
    let mut at = 0;
    while at < buf.len() {
        let (p, used) = unpack_prefix(&buf[at..])?;
        out.push(p);
        at += used;
    }
    Ok(out)
}
