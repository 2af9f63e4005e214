//! Versioned binary message encodings.
//!
//! Frame layout: `[version u8][kind u8][body_len u32 LE][body]`.
//! Patch bodies end in a 16-byte keyed tag; the other kinds end in a
//! CRC-16 so random corruption is detected rather than misapplied.

use super::{auth_tag, CommitAck, CommitMsg, Patch, ResyncMsg, StateId, WindowReport};
use crate::codec::{crc16, read_varint, write_varint, PatchPayload};
use crate::predictor::Token;

pub const WIRE_VERSION: u8 = 1;

pub const KIND_PATCH: u8 = 1;
pub const KIND_COMMIT: u8 = 2;
pub const KIND_ACK: u8 = 3;
pub const KIND_RESYNC: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Patch(Patch),
    Commit(CommitMsg),
    Ack(CommitAck),
    Resync(ResyncMsg),
}

impl WireMessage {
    pub fn kind(&self) -> u8 {
        match self {
            WireMessage::Patch(_) => KIND_PATCH,
            WireMessage::Commit(_) => KIND_COMMIT,
            WireMessage::Ack(_) => KIND_ACK,
            WireMessage::Resync(_) => KIND_RESYNC,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            WireMessage::Patch(_) => "patch",
            WireMessage::Commit(_) => "commit",
            WireMessage::Ack(_) => "ack",
            WireMessage::Resync(_) => "resync",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireError {
    /// Structure is intact but an integrity check failed.
    Tampered(String),
    /// The bytes do not parse as a message at all.
    Malformed(String),
}

impl std::fmt::Display for WireError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WireError::Tampered(s) => write!(f, "tampered message: {s}"),
            WireError::Malformed(s) => write!(f, "malformed message: {s}"),
        }
    }
}

fn bits_per_token(alphabet_size: u32) -> u8 {
    if alphabet_size <= 1 {
        0
    } else {
        (32 - (alphabet_size - 1).leading_zeros()) as u8
    }
}

fn push_digest(out: &mut Vec<u8>, d: &[u8; 32]) {
    out.extend_from_slice(d);
}

fn read_digest(bytes: &[u8], pos: &mut usize) -> Result<[u8; 32], WireError> {
    if bytes.len() < *pos + 32 {
        return Err(WireError::Malformed("truncated digest".into()));
    }
    let mut d = [0u8; 32];
    d.copy_from_slice(&bytes[*pos..*pos + 32]);
    *pos += 32;
    Ok(d)
}

fn read_u8(bytes: &[u8], pos: &mut usize) -> Result<u8, WireError> {
    let b = *bytes
        .get(*pos)
        .ok_or_else(|| WireError::Malformed("truncated byte".into()))?;
    *pos += 1;
    Ok(b)
}

fn read_f64(bytes: &[u8], pos: &mut usize) -> Result<f64, WireError> {
    if bytes.len() < *pos + 8 {
        return Err(WireError::Malformed("truncated f64".into()));
    }
    let mut raw = [0u8; 8];
    raw.copy_from_slice(&bytes[*pos..*pos + 8]);
    *pos += 8;
    Ok(f64::from_le_bytes(raw))
}

fn read_vint(bytes: &[u8], pos: &mut usize) -> Result<u64, WireError> {
    read_varint(bytes, pos).map_err(|e| WireError::Malformed(e.to_string()))
}

/// Serializes a message. The session key signs patch bodies; the
/// alphabet size fixes the bit width of resync token packing.
pub fn encode_message(msg: &WireMessage, key: &[u8; 32], alphabet_size: u32) -> Vec<u8> {
    let mut body = Vec::new();
    match msg {
        WireMessage::Patch(p) => {
            write_varint(&mut body, p.seq);
            push_digest(&mut body, &p.baseline.0);
            push_digest(&mut body, &p.anchor_digest);
            write_varint(&mut body, p.anchor_index);
            write_varint(&mut body, p.start_rel);
            write_varint(&mut body, p.end_rel);
            let payload = p.payload.to_wire();
            write_varint(&mut body, payload.len() as u64);
            body.extend_from_slice(&payload);
            let tag = auth_tag(key, &body);
            body.extend_from_slice(&tag);
        }
        WireMessage::Commit(c) => {
            write_varint(&mut body, c.seq);
            write_varint(&mut body, c.index);
            push_digest(&mut body, &c.context_digest);
            push_digest(&mut body, &c.state_id.0);
            let crc = crc16(&body);
            body.extend_from_slice(&crc.to_be_bytes());
        }
        WireMessage::Ack(a) => {
            write_varint(&mut body, a.index);
            body.push(a.ok as u8);
            push_digest(&mut body, &a.state_id.0);
            body.push(a.resync_needed as u8);
            match &a.window {
                None => body.push(0),
                Some(w) => {
                    body.push(1);
                    write_varint(&mut body, w.window_seq);
                    match w.cp {
                        None => body.push(0),
                        Some(cp) => {
                            body.push(1);
                            body.extend_from_slice(&cp.to_le_bytes());
                        }
                    }
                    body.extend_from_slice(&w.rp.to_le_bytes());
                    write_varint(&mut body, w.h);
                }
            }
            let crc = crc16(&body);
            body.extend_from_slice(&crc.to_be_bytes());
        }
        WireMessage::Resync(r) => {
            write_varint(&mut body, r.seq);
            write_varint(&mut body, r.index);
            push_digest(&mut body, &r.context_digest);
            push_digest(&mut body, &r.state_id.0);
            let bits = bits_per_token(alphabet_size);
            body.push(bits);
            write_varint(&mut body, r.tokens.len() as u64);
            // MSB-first fixed-width packing
            let mut acc: u64 = 0;
            let mut acc_bits: u32 = 0;
            for &t in &r.tokens {
                acc = (acc << bits) | u64::from(t);
                acc_bits += u32::from(bits);
                while acc_bits >= 8 {
                    acc_bits -= 8;
                    body.push(((acc >> acc_bits) & 0xff) as u8);
                }
            }
            if acc_bits > 0 {
                body.push(((acc << (8 - acc_bits)) & 0xff) as u8);
            }
            let crc = crc16(&body);
            body.extend_from_slice(&crc.to_be_bytes());
        }
    }
    let mut out = Vec::with_capacity(6 + body.len());
    out.push(WIRE_VERSION);
    out.push(msg.kind());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

fn check_crc(body: &[u8]) -> Result<&[u8], WireError> {
    if body.len() < 2 {
        return Err(WireError::Malformed("body shorter than checksum".into()));
    }
    let (payload, crc_bytes) = body.split_at(body.len() - 2);
    let stored = u16::from_be_bytes([crc_bytes[0], crc_bytes[1]]);
    if crc16(payload) != stored {
        return Err(WireError::Tampered("checksum mismatch".into()));
    }
    Ok(payload)
}

/// Parses and integrity-checks a message.
pub fn decode_message(
    bytes: &[u8],
    key: &[u8; 32],
    alphabet_size: u32,
) -> Result<WireMessage, WireError> {
    if bytes.len() < 6 {
        return Err(WireError::Malformed("shorter than frame header".into()));
    }
    if bytes[0] != WIRE_VERSION {
        return Err(WireError::Malformed(format!(
            "unsupported version {}",
            bytes[0]
        )));
    }
    let kind = bytes[1];
    let body_len = u32::from_le_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]) as usize;
    if bytes.len() != 6 + body_len {
        return Err(WireError::Malformed(format!(
            "frame length {} does not match declared body of {}",
            bytes.len(),
            body_len
        )));
    }
    let body = &bytes[6..];
    match kind {
        KIND_PATCH => {
            if body.len() < 16 {
                return Err(WireError::Malformed("patch body shorter than tag".into()));
            }
            let (signed, tag) = body.split_at(body.len() - 16);
            if auth_tag(key, signed) != tag {
                return Err(WireError::Tampered("patch tag mismatch".into()));
            }
            let mut pos = 0usize;
            let seq = read_vint(signed, &mut pos)?;
            let baseline = StateId(read_digest(signed, &mut pos)?);
            let anchor_digest = read_digest(signed, &mut pos)?;
            let anchor_index = read_vint(signed, &mut pos)?;
            let start_rel = read_vint(signed, &mut pos)?;
            let end_rel = read_vint(signed, &mut pos)?;
            let payload_len = read_vint(signed, &mut pos)? as usize;
            if signed.len() != pos + payload_len {
                return Err(WireError::Malformed("patch payload length mismatch".into()));
            }
            let payload = PatchPayload::from_wire(&signed[pos..])
                .map_err(|e| WireError::Malformed(format!("patch payload: {e}")))?;
            let mut tag_arr = [0u8; 16];
            tag_arr.copy_from_slice(tag);
            Ok(WireMessage::Patch(Patch {
                baseline,
                anchor_digest,
                anchor_index,
                start_rel,
                end_rel,
                payload,
                auth_tag: tag_arr,
                seq,
            }))
        }
        KIND_COMMIT => {
            let signed = check_crc(body)?;
            let mut pos = 0usize;
            let seq = read_vint(signed, &mut pos)?;
            let index = read_vint(signed, &mut pos)?;
            let context_digest = read_digest(signed, &mut pos)?;
            let state_id = StateId(read_digest(signed, &mut pos)?);
            if pos != signed.len() {
                return Err(WireError::Malformed("commit body has trailing bytes".into()));
            }
            Ok(WireMessage::Commit(CommitMsg {
                seq,
                index,
                context_digest,
                state_id,
            }))
        }
        KIND_ACK => {
            let signed = check_crc(body)?;
            let mut pos = 0usize;
            let index = read_vint(signed, &mut pos)?;
            let ok = read_u8(signed, &mut pos)? != 0;
            let state_id = StateId(read_digest(signed, &mut pos)?);
            let resync_needed = read_u8(signed, &mut pos)? != 0;
            let window = match read_u8(signed, &mut pos)? {
                0 => None,
                1 => {
                    let window_seq = read_vint(signed, &mut pos)?;
                    let cp = match read_u8(signed, &mut pos)? {
                        0 => None,
                        1 => Some(read_f64(signed, &mut pos)?),
                        other => {
                            return Err(WireError::Malformed(format!(
                                "bad cp presence flag {other}"
                            )))
                        }
                    };
                    let rp = read_f64(signed, &mut pos)?;
                    let h = read_vint(signed, &mut pos)?;
                    Some(WindowReport {
                        window_seq,
                        cp,
                        rp,
                        h,
                    })
                }
                other => {
                    return Err(WireError::Malformed(format!(
                        "bad window presence flag {other}"
                    )))
                }
            };
            if pos != signed.len() {
                return Err(WireError::Malformed("ack body has trailing bytes".into()));
            }
            Ok(WireMessage::Ack(CommitAck {
                index,
                ok,
                state_id,
                resync_needed,
                window,
            }))
        }
        KIND_RESYNC => {
            let signed = check_crc(body)?;
            let mut pos = 0usize;
            let seq = read_vint(signed, &mut pos)?;
            let index = read_vint(signed, &mut pos)?;
            let context_digest = read_digest(signed, &mut pos)?;
            let state_id = StateId(read_digest(signed, &mut pos)?);
            let bits = read_u8(signed, &mut pos)?;
            if bits != bits_per_token(alphabet_size) {
                return Err(WireError::Malformed(format!(
                    "resync token width {bits} does not match alphabet of {alphabet_size}"
                )));
            }
            let count = read_vint(signed, &mut pos)? as usize;
            let packed_len = (count * bits as usize).div_ceil(8);
            if signed.len() != pos + packed_len {
                return Err(WireError::Malformed("resync token block mismatch".into()));
            }
            let packed = &signed[pos..];
            let mut tokens = Vec::with_capacity(count);
            let mut acc: u64 = 0;
            let mut acc_bits: u32 = 0;
            let mut next = 0usize;
            for _ in 0..count {
                while acc_bits < u32::from(bits) {
                    acc = (acc << 8) | u64::from(packed[next]);
                    next += 1;
                    acc_bits += 8;
                }
                acc_bits -= u32::from(bits);
                let mask = if bits == 0 { 0 } else { (1u64 << bits) - 1 };
                let t = ((acc >> acc_bits) & mask) as Token;
                if t >= alphabet_size {
                    return Err(WireError::Malformed(format!(
                        "resync token {t} outside alphabet of {alphabet_size}"
                    )));
                }
                tokens.push(t);
            }
            Ok(WireMessage::Resync(ResyncMsg {
                seq,
                index,
                context_digest,
                state_id,
                tokens,
            }))
        }
        other => Err(WireError::Malformed(format!("unknown kind {other}"))),
    }
}
