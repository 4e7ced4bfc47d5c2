//! Wire messages for the star topology.
//!
//! Every frame is self-delimiting: a fixed 19-byte header carrying the wire
//! version, message kind, round, sender id, and payload length, followed by
//! exactly that many payload bytes. Model parameters travel as the same
//! little-endian `f32` archive used for checkpoints, so the on-disk and
//! on-wire representations can never diverge.

use crate::checkpoint::{decode_params, encode_params};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::Scalar;

pub const WIRE_VERSION: u16 = 1;
/// version(2) + kind(1) + round(4) + sender(4) + payload_len(8).
pub const HEADER_LEN: usize = 19;
/// Sender id the server uses; clients use their client id.
pub const SERVER_ID: u32 = u32::MAX;

const KIND_HELLO: u8 = 1;
const KIND_BROADCAST: u8 = 2;
const KIND_UPDATE: u8 = 3;
const KIND_SHUTDOWN: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum Message<F> {
    /// First frame on every client connection; maps the socket to an id.
    Hello { client_id: u32 },
    /// Server → client: run this round starting from these parameters.
    Broadcast {
        round: u32,
        params: ParameterSet<F>,
    },
    /// Client → server: the round's result. `local_knn` is present when the
    /// client measured its personal model on its local test set this round.
    Update {
        round: u32,
        client_id: u32,
        num_samples: u64,
        mean_loss: f64,
        local_knn: Option<f64>,
        delta: ParameterSet<F>,
    },
    /// Server → client: training is over, hang up.
    Shutdown,
}

fn header(kind: u8, round: u32, sender: u32, payload_len: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..2].copy_from_slice(&WIRE_VERSION.to_le_bytes());
    h[2] = kind;
    h[3..7].copy_from_slice(&round.to_le_bytes());
    h[7..11].copy_from_slice(&sender.to_le_bytes());
    h[11..19].copy_from_slice(&(payload_len as u64).to_le_bytes());
    h
}

/// Parse a frame header, returning `(kind, round, sender, payload_len)`.
/// Rejects foreign wire versions before any payload is read, so a node never
/// allocates a buffer sized by a frame it cannot understand.
pub fn parse_header(bytes: &[u8]) -> Result<(u8, u32, u32, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode {
            offset: bytes.len(),
            reason: format!("frame header needs {HEADER_LEN} bytes, got {}", bytes.len()),
        });
    }
    let version = u16::from_le_bytes(bytes[0..2].try_into().unwrap());
    if version != WIRE_VERSION {
        return Err(Error::WireVersion {
            got: version,
            expected: WIRE_VERSION,
        });
    }
    let kind = bytes[2];
    let round = u32::from_le_bytes(bytes[3..7].try_into().unwrap());
    let sender = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
    let payload_len = u64::from_le_bytes(bytes[11..19].try_into().unwrap()) as usize;
    Ok((kind, round, sender, payload_len))
}

pub fn encode_message<F: Scalar>(msg: &Message<F>) -> Vec<u8> {
    let (kind, round, sender, payload): (u8, u32, u32, Vec<u8>) = match msg {
        Message::Hello { client_id } => (KIND_HELLO, 0, *client_id, Vec::new()),
        Message::Broadcast { round, params } => {
            (KIND_BROADCAST, *round, SERVER_ID, encode_params(params))
        }
        Message::Update {
            round,
            client_id,
            num_samples,
            mean_loss,
            local_knn,
            delta,
        } => {
            let archive = encode_params(delta);
            let mut p = Vec::with_capacity(25 + archive.len());
            p.extend_from_slice(&num_samples.to_le_bytes());
            p.extend_from_slice(&mean_loss.to_le_bytes());
            match local_knn {
                Some(v) => {
                    p.push(1);
                    p.extend_from_slice(&v.to_le_bytes());
                }
                None => {
                    p.push(0);
                    p.extend_from_slice(&0f64.to_le_bytes());
                }
            }
            p.extend_from_slice(&archive);
            (KIND_UPDATE, *round, *client_id, p)
        }
        Message::Shutdown => (KIND_SHUTDOWN, 0, SERVER_ID, Vec::new()),
    };
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&header(kind, round, sender, payload.len()));
    frame.extend_from_slice(&payload);
    frame
}

pub fn decode_message<F: Scalar>(frame: &[u8]) -> Result<Message<F>> {
    let (kind, round, sender, payload_len) = parse_header(frame)?;
    let payload = &frame[HEADER_LEN..];
    if payload.len() != payload_len {
        return Err(Error::Decode {
            offset: HEADER_LEN,
            reason: format!(
                "header announces {payload_len} payload bytes but frame carries {}",
                payload.len()
            ),
        });
    }
    match kind {
        KIND_HELLO => Ok(Message::Hello { client_id: sender }),
        KIND_BROADCAST => Ok(Message::Broadcast {
            round,
            params: decode_params(payload)?,
        }),
        KIND_UPDATE => {
            if payload.len() < 25 {
                return Err(Error::Decode {
                    offset: HEADER_LEN,
                    reason: "update payload shorter than its fixed fields".into(),
                });
            }
            let num_samples = u64::from_le_bytes(payload[0..8].try_into().unwrap());
            let mean_loss = f64::from_le_bytes(payload[8..16].try_into().unwrap());
            let local_knn = if payload[16] != 0 {
                Some(f64::from_le_bytes(payload[17..25].try_into().unwrap()))
            } else {
                None
            };
            Ok(Message::Update {
                round,
                client_id: sender,
                num_samples,
                mean_loss,
                local_knn,
                delta: decode_params(&payload[25..])?,
            })
        }
        KIND_SHUTDOWN => Ok(Message::Shutdown),
        other => Err(Error::Decode {
            offset: 2,
            reason: format!("unknown message kind {other}"),
        }),
    }
}
