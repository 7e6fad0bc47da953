//! Binary stream messages and the textual pose parameter.
//!
//! Client to server: `u32 seq`, twelve `f64` pose values (row-major `[R|t]`,
//! target camera to source camera), then an optional `u32` payload kind.
//! Server to client: `u32 seq`, `u32 kind`, then the payload. All integers
//! and floats are little-endian. Kind 0 carries a UTF-8 error message.

use nvs_core::RigidTransform;

use crate::ServiceError;

pub const POSE_MESSAGE_LEN: usize = 4 + 12 * 8;
pub const FRAME_HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Error = 0,
    Color = 1,
    Depth = 2,
}

impl FrameKind {
    pub fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(FrameKind::Error),
            1 => Some(FrameKind::Color),
            2 => Some(FrameKind::Depth),
            _ => None,
        }
    }

    /// Kinds a client may request.
    pub fn requestable(v: u32) -> Option<Self> {
        Self::from_u32(v).filter(|k| *k != FrameKind::Error)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMessage {
    pub seq: u32,
    pub pose: RigidTransform,
    pub kind: FrameKind,
}

pub fn encode_pose_message(msg: &PoseMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(POSE_MESSAGE_LEN + 4);
    out.extend_from_slice(&msg.seq.to_le_bytes());
    for v in msg.pose.to_row_major() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if msg.kind != FrameKind::Color {
        out.extend_from_slice(&(msg.kind as u32).to_le_bytes());
    }
    out
}

/// Reads the sequence number when at least four bytes are present, so error
/// replies can echo it.
pub fn peek_seq(bytes: &[u8]) -> u32 {
    bytes.get(..4).map_or(0, |b| u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn decode_pose_message(bytes: &[u8]) -> Result<PoseMessage, ServiceError> {
    if bytes.len() != POSE_MESSAGE_LEN && bytes.len() != POSE_MESSAGE_LEN + 4 {
        return Err(ServiceError::BadRequest(format!(
            "pose message must be {POSE_MESSAGE_LEN} or {} bytes, got {}",
            POSE_MESSAGE_LEN + 4,
            bytes.len()
        )));
    }
    let seq = peek_seq(bytes);
    let mut vals = [0.0f64; 12];
    for (i, v) in vals.iter_mut().enumerate() {
        let at = 4 + i * 8;
        *v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    }
    let pose =
        RigidTransform::from_row_major(&vals).map_err(|e| ServiceError::BadRequest(format!("invalid pose: {e}")))?;
    let kind = match bytes.get(POSE_MESSAGE_LEN..) {
        Some(k) if k.len() == 4 => {
            let raw = u32::from_le_bytes(k.try_into().unwrap());
            FrameKind::requestable(raw)
                .ok_or_else(|| ServiceError::BadRequest(format!("unknown payload kind {raw}")))?
        }
        _ => FrameKind::Color,
    };
    Ok(PoseMessage { seq, pose, kind })
}

pub fn encode_frame(seq: u32, kind: FrameKind, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits a server frame into `(seq, kind, payload)`.
pub fn decode_frame(bytes: &[u8]) -> Result<(u32, FrameKind, &[u8]), ServiceError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(ServiceError::BadRequest(format!(
            "frame shorter than header: {} bytes",
            bytes.len()
        )));
    }
    let seq = peek_seq(bytes);
    let raw = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let kind = FrameKind::from_u32(raw).ok_or_else(|| ServiceError::BadRequest(format!("unknown frame kind {raw}")))?;
    Ok((seq, kind, &bytes[FRAME_HEADER_LEN..]))
}

/// `pose=` query value: twelve comma-separated decimals.
pub fn parse_pose_param(text: &str) -> Result<RigidTransform, ServiceError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 12 {
        return Err(ServiceError::BadRequest(format!(
            "pose needs 12 comma-separated numbers, got {}",
            parts.len()
        )));
    }
    let mut vals = [0.0f64; 12];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .parse()
            .map_err(|_| ServiceError::BadRequest(format!("bad pose number {p:?}")))?;
    }
    RigidTransform::from_row_major(&vals).map_err(|e| ServiceError::BadRequest(format!("invalid pose: {e}")))
}

pub fn format_pose_param(pose: &RigidTransform) -> String {
    pose.to_row_major()
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(",")
}
