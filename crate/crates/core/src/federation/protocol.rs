//! Binary framing for federation messages.
//!
//! Every frame is laid out as (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FPDA"
//! 4       1     version (1)
//! 5       1     tag: 1 ModelBroadcast, 2 AvgGradient, 3 RoundControl, 4 ModelUpload
//! 6       4     round (u32)
//! 10      4     node id (u32); command code for RoundControl, 0 for ModelBroadcast
//! 14      8     payload element count (u64)
//! 22      8·n   payload, f64 each
//! 22+8n   4     CRC-32 (IEEE) of every preceding byte
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::numerics::{GradientVector, ParamVector};

pub const MAGIC: [u8; 4] = *b"FPDA";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;
pub const CRC_LEN: usize = 4;
/// Largest payload accepted when decoding, in elements.
pub const MAX_PAYLOAD_ELEMENTS: u64 = 1 << 27;

const TAG_BROADCAST: u8 = 1;
const TAG_AVG_GRADIENT: u8 = 2;
const TAG_ROUND_CONTROL: u8 = 3;
const TAG_MODEL_UPLOAD: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "node{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundCommand {
    Start,
    Stop,
}

impl RoundCommand {
    fn code(self) -> u32 {
        match self {
            RoundCommand::Start => 0,
            RoundCommand::Stop => 1,
        }
    }
}

/// Source-side gradient averaged over the local iterations of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgGradient {
    pub round: u32,
    pub node: NodeId,
    pub grad: GradientVector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FedMessage {
    /// Hub to nodes: the current model.
    ModelBroadcast { round: u32, params: ParamVector },
    /// Source node to target: averaged local gradient.
    AvgGradient(AvgGradient),
    RoundControl { round: u32, command: RoundCommand },
    /// Node to hub: locally trained parameters (FedAvg / FedBN).
    ModelUpload {
        round: u32,
        node: NodeId,
        params: ParamVector,
    },
}

impl FedMessage {
    pub fn round(&self) -> u32 {
        match self {
            FedMessage::ModelBroadcast { round, .. }
            | FedMessage::RoundControl { round, .. }
            | FedMessage::ModelUpload { round, .. } => *round,
            FedMessage::AvgGradient(g) => g.round,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FedMessage::ModelBroadcast { .. } => "ModelBroadcast",
            FedMessage::AvgGradient(_) => "AvgGradient",
            FedMessage::RoundControl { .. } => "RoundControl",
            FedMessage::ModelUpload { .. } => "ModelUpload",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("frame truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("payload of {0} elements exceeds the frame limit")]
    LengthOverflow(u64),
    #[error("checksum mismatch: frame says {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{0} unexpected bytes after the frame")]
    TrailingBytes(usize),
    #[error("invalid field: {0}")]
    InvalidField(&'static str),
    #[error("payload contains a non-finite value")]
    NonFinitePayload,
}

fn frame(tag: u8, round: u32, node: u32, payload: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * payload.len() + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(tag);
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&node.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn encode_message(msg: &FedMessage) -> Vec<u8> {
    match msg {
        FedMessage::ModelBroadcast { round, params } => {
            frame(TAG_BROADCAST, *round, 0, params.as_slice())
        }
        FedMessage::AvgGradient(g) => frame(TAG_AVG_GRADIENT, g.round, g.node.0, g.grad.as_slice()),
        FedMessage::RoundControl { round, command } => {
            frame(TAG_ROUND_CONTROL, *round, command.code(), &[])
        }
        FedMessage::ModelUpload {
            round,
            node,
            params,
        } => frame(TAG_MODEL_UPLOAD, *round, node.0, params.as_slice()),
    }
}

struct Header {
    tag: u8,
    round: u32,
    node: u32,
    count: u64,
}

impl Header {
    fn body_len(&self) -> usize {
        self.count as usize * 8 + CRC_LEN
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header, DecodeError> {
    if bytes.len() < HEADER_LEN {
        // report a bad magic as early as it is visible
        let n = bytes.len().min(4);
        if bytes[..n] != MAGIC[..n] {
            let mut m = [0u8; 4];
            m[..n].copy_from_slice(&bytes[..n]);
            return Err(DecodeError::BadMagic(m));
        }
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(DecodeError::UnsupportedVersion(bytes[4]));
    }
    let tag = bytes[5];
    if !(TAG_BROADCAST..=TAG_MODEL_UPLOAD).contains(&tag) {
        return Err(DecodeError::UnknownTag(tag));
    }
    let round = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let node = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
    if count > MAX_PAYLOAD_ELEMENTS {
        return Err(DecodeError::LengthOverflow(count));
    }
    Ok(Header {
        tag,
        round,
        node,
        count,
    })
}

fn finish(header: &Header, head: &[u8], body: &[u8]) -> Result<FedMessage, DecodeError> {
    let payload_len = header.count as usize * 8;
    let stored = u32::from_le_bytes(body[payload_len..payload_len + 4].try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(head);
    hasher.update(&body[..payload_len]);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(DecodeError::ChecksumMismatch { stored, computed });
    }
    let payload: Vec<f64> = body[..payload_len]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if payload.iter().any(|v| !v.is_finite()) {
        return Err(DecodeError::NonFinitePayload);
    }
    let round = header.round;
    Ok(match header.tag {
        TAG_BROADCAST => {
            if header.node != 0 {
                return Err(DecodeError::InvalidField("broadcast node id must be 0"));
            }
            FedMessage::ModelBroadcast {
                round,
                params: ParamVector::new(payload),
            }
        }
        TAG_AVG_GRADIENT => FedMessage::AvgGradient(AvgGradient {
            round,
            node: NodeId(header.node),
            grad: GradientVector::new(payload),
        }),
        TAG_ROUND_CONTROL => {
            if !payload.is_empty() {
                return Err(DecodeError::InvalidField("round control carries no payload"));
            }
            let command = match header.node {
                0 => RoundCommand::Start,
                1 => RoundCommand::Stop,
                _ => return Err(DecodeError::InvalidField("unknown round command")),
            };
            FedMessage::RoundControl { round, command }
        }
        TAG_MODEL_UPLOAD => FedMessage::ModelUpload {
            round,
            node: NodeId(header.node),
            params: ParamVector::new(payload),
        },
        _ => unreachable!("tag validated in parse_header"),
    })
}

/// Decodes one frame that must span `bytes` exactly.
pub fn decode_message(bytes: &[u8]) -> Result<FedMessage, DecodeError> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - used));
    }
    Ok(msg)
}

/// Decodes the frame at the start of `bytes`, returning it with its length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(FedMessage, usize), DecodeError> {
    let header = parse_header(bytes)?;
    let total = HEADER_LEN + header.body_len();
    if bytes.len() < total {
        return Err(DecodeError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    let msg = finish(&header, &bytes[..HEADER_LEN], &bytes[HEADER_LEN..total])?;
    Ok((msg, total))
}

/// Reads exactly one frame from a byte stream.
pub fn read_message<R: Read>(reader: &mut R) -> crate::Result<FedMessage> {
    let mut head = [0u8; HEADER_LEN];
    reader.read_exact(&mut head)?;
    let header = parse_header(&head)?;
    let mut body = vec![0u8; header.body_len()];
    reader.read_exact(&mut body)?;
    Ok(finish(&header, &head, &body)?)
}

pub fn write_message<W: Write>(writer: &mut W, msg: &FedMessage) -> crate::Result<()> {
    writer.write_all(&encode_message(msg))?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_each_variant() {
        let msgs = [
            FedMessage::ModelBroadcast {
                round: 7,
                params: ParamVector::new(vec![0.5, -1.25, 3.0]),
            },
            FedMessage::AvgGradient(AvgGradient {
                round: 3,
                node: NodeId(2),
                grad: GradientVector::new(vec![1.5, -2.0]),
            }),
            FedMessage::RoundControl {
                round: 9,
                command: RoundCommand::Stop,
            },
            FedMessage::ModelUpload {
                round: 1,
                node: NodeId(4),
                params: ParamVector::new(vec![]),
            },
        ];
        for m in msgs {
            let bytes = encode_message(&m);
            assert_eq!(decode_message(&bytes).unwrap(), m);
            let mut cursor = std::io::Cursor::new(bytes);
            assert_eq!(read_message(&mut cursor).unwrap(), m);
        }
    }

    #[test]
    fn typed_errors() {
        let good = encode_message(&FedMessage::RoundControl {
            round: 1,
            command: RoundCommand::Start,
        });
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode_message(&b), Err(DecodeError::BadMagic(_))));
        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(decode_message(&b), Err(DecodeError::UnsupportedVersion(2)));
        let mut b = good.clone();
        b[5] = 9;
        assert_eq!(decode_message(&b), Err(DecodeError::UnknownTag(9)));
        let mut b = good.clone();
        b[14..22].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(decode_message(&b), Err(DecodeError::LengthOverflow(u64::MAX)));
        let mut b = good.clone();
        b[7] ^= 1;
        assert!(matches!(decode_message(&b), Err(DecodeError::ChecksumMismatch { .. })));
        assert!(matches!(
            decode_message(&good[..good.len() - 1]),
            Err(DecodeError::Truncated { .. })
        ));
        let mut b = good.clone();
        b.push(0);
        assert_eq!(decode_message(&b), Err(DecodeError::TrailingBytes(1)));
    }
}
