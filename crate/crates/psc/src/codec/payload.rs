//! Patch payload wire format.
//!
//! A payload carries an edit script in two parts: a structural skeleton
//! (op kinds and counts, varint-encoded) and the new tokens compressed by
//! the arithmetic coder. Layout, all lengths in bytes unless noted:
//!
//! ```text
//! [version u8 = 1]
//! [varint skeleton length][skeleton bytes]
//! [varint coded bit count][coded bytes, zero-padded to a byte boundary]
//! [u16 big-endian CRC-16/CCITT over everything above]
//! ```
//!
//! The skeleton is a varint op count followed by one tag byte per op
//! (0 keep, 1 replace, 2 insert, 3 delete) and its counts. Token values
//! never appear in the skeleton.

use crate::predictor::{Predictor, Token};

use super::arith::{ac_decode, ac_encode, BitString};
use super::edit::{EditOp, EditScript};
use super::CodecError;

pub const PAYLOAD_VERSION: u8 = 1;

const TAG_KEEP: u8 = 0;
const TAG_REPLACE: u8 = 1;
const TAG_INSERT: u8 = 2;
const TAG_DELETE: u8 = 3;

/// Appends an unsigned LEB128 varint.
pub fn write_varint(out: &mut Vec<u8>, mut value: u64) {
    loop {
        let byte = (value & 0x7f) as u8;
        value >>= 7;
        if value == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

/// Reads an unsigned LEB128 varint, advancing `pos`.
pub fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64, CodecError> {
    let mut value = 0u64;
    let mut shift = 0u32;
    loop {
        let &byte = bytes
            .get(*pos)
            .ok_or_else(|| CodecError::CorruptPayload("varint runs past end".to_string()))?;
        *pos += 1;
        if shift >= 63 && byte > 1 {
            return Err(CodecError::CorruptPayload("varint overflow".to_string()));
        }
        value |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok(value);
        }
        shift += 7;
    }
}

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xffff, no reflection.
pub fn crc16(bytes: &[u8]) -> u16 {
    let mut crc = 0xffffu16;
    for &b in bytes {
        crc ^= u16::from(b) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
        }
    }
    crc
}

/// Skeleton op: script structure without token values.
#[derive(Debug, Clone, PartialEq, Eq)]
enum SkeletonOp {
    Keep(u64),
    Replace { old: u64, new: u64 },
    Insert(u64),
    Delete(u64),
}

/// Encoded patch body ready for framing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPayload {
    skeleton: Vec<SkeletonOp>,
    coded: BitString,
}

impl PatchPayload {
    /// Bits spent on compressed token content, excluding framing.
    pub fn coded_bits(&self) -> usize {
        self.coded.bit_len()
    }

    /// Total size of the framed payload in bits.
    pub fn wire_bits(&self) -> usize {
        self.to_wire().len() * 8
    }

    /// Tokens the carried script will emit from the coded stream.
    pub fn new_token_count(&self) -> usize {
        self.skeleton
            .iter()
            .map(|op| match op {
                SkeletonOp::Replace { new, .. } => *new as usize,
                SkeletonOp::Insert(n) => *n as usize,
                _ => 0,
            })
            .sum()
    }

    fn skeleton_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_varint(&mut out, self.skeleton.len() as u64);
        for op in &self.skeleton {
            match op {
                SkeletonOp::Keep(n) => {
                    out.push(TAG_KEEP);
                    write_varint(&mut out, *n);
                }
                SkeletonOp::Replace { old, new } => {
                    out.push(TAG_REPLACE);
                    write_varint(&mut out, *old);
                    write_varint(&mut out, *new);
                }
                SkeletonOp::Insert(n) => {
                    out.push(TAG_INSERT);
                    write_varint(&mut out, *n);
                }
                SkeletonOp::Delete(n) => {
                    out.push(TAG_DELETE);
                    write_varint(&mut out, *n);
                }
            }
        }
        out
    }

    fn parse_skeleton(bytes: &[u8]) -> Result<Vec<SkeletonOp>, CodecError> {
        let mut pos = 0usize;
        let count = read_varint(bytes, &mut pos)?;
        let mut ops = Vec::new();
        for _ in 0..count {
            let &tag = bytes.get(pos).ok_or_else(|| {
                CodecError::CorruptPayload("skeleton truncated at tag".to_string())
            })?;
            pos += 1;
            let op = match tag {
                TAG_KEEP => SkeletonOp::Keep(read_varint(bytes, &mut pos)?),
                TAG_REPLACE => {
                    let old = read_varint(bytes, &mut pos)?;
                    let new = read_varint(bytes, &mut pos)?;
                    SkeletonOp::Replace { old, new }
                }
                TAG_INSERT => SkeletonOp::Insert(read_varint(bytes, &mut pos)?),
                TAG_DELETE => SkeletonOp::Delete(read_varint(bytes, &mut pos)?),
                other => {
                    return Err(CodecError::CorruptPayload(format!(
                        "unknown skeleton tag {other}"
                    )))
                }
            };
            ops.push(op);
        }
        if pos != bytes.len() {
            return Err(CodecError::CorruptPayload(
                "trailing bytes after skeleton".to_string(),
            ));
        }
        Ok(ops)
    }

    /// Serializes with framing and checksum.
    pub fn to_wire(&self) -> Vec<u8> {
        let skeleton = self.skeleton_bytes();
        let mut out = vec![PAYLOAD_VERSION];
        write_varint(&mut out, skeleton.len() as u64);
        out.extend_from_slice(&skeleton);
        write_varint(&mut out, self.coded.bit_len() as u64);
        out.extend_from_slice(self.coded.bytes());
        let crc = crc16(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }

    /// Parses framed bytes, verifying structure and checksum.
    pub fn from_wire(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < 3 {
            return Err(CodecError::CorruptPayload("payload too short".to_string()));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 2);
        let declared = u16::from_be_bytes([crc_bytes[0], crc_bytes[1]]);
        if crc16(body) != declared {
            return Err(CodecError::CorruptPayload("checksum mismatch".to_string()));
        }
        let mut pos = 0usize;
        if body[pos] != PAYLOAD_VERSION {
            return Err(CodecError::CorruptPayload(format!(
                "unsupported payload version {}",
                body[pos]
            )));
        }
        pos += 1;
        let skel_len = read_varint(body, &mut pos)? as usize;
        let skel_end = pos
            .checked_add(skel_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| CodecError::CorruptPayload("skeleton length overruns".to_string()))?;
        let skeleton = Self::parse_skeleton(&body[pos..skel_end])?;
        pos = skel_end;
        let bit_len = read_varint(body, &mut pos)? as usize;
        let byte_len = bit_len.div_ceil(8);
        if body.len() - pos != byte_len {
            return Err(CodecError::CorruptPayload(
                "coded byte count mismatch".to_string(),
            ));
        }
        let coded = BitString::from_bytes(body[pos..].to_vec(), bit_len)?;
        Ok(Self { skeleton, coded })
    }
}

fn skeleton_of(script: &EditScript) -> Vec<SkeletonOp> {
    script
        .ops
        .iter()
        .map(|op| match op {
            EditOp::Keep(n) => SkeletonOp::Keep(*n as u64),
            EditOp::Replace { old, tokens } => SkeletonOp::Replace {
                old: *old as u64,
                new: tokens.len() as u64,
            },
            EditOp::Insert(tokens) => SkeletonOp::Insert(tokens.len() as u64),
            EditOp::Delete(n) => SkeletonOp::Delete(*n as u64),
        })
        .collect()
}

/// Compresses a script. New tokens are coded autoregressively under
/// `predictor`, conditioned on `context` followed by previously coded new
/// tokens; kept spans do not enter the conditioning.
pub fn encode_payload(
    script: &EditScript,
    predictor: &dyn Predictor,
    context: &[Token],
) -> Result<PatchPayload, CodecError> {
    let new_tokens = script.new_tokens();
    let coded = ac_encode(&new_tokens, predictor, context)?;
    Ok(PatchPayload {
        skeleton: skeleton_of(script),
        coded,
    })
}

/// Inverse of `encode_payload` under the same predictor and context.
pub fn decode_payload(
    payload: &PatchPayload,
    predictor: &dyn Predictor,
    context: &[Token],
) -> Result<EditScript, CodecError> {
    let total = payload.new_token_count();
    let tokens = ac_decode(&payload.coded, predictor, context, total)?;
    let mut cursor = 0usize;
    let mut ops = Vec::with_capacity(payload.skeleton.len());
    for op in &payload.skeleton {
        let built = match op {
            SkeletonOp::Keep(n) => EditOp::Keep(*n as usize),
            SkeletonOp::Delete(n) => EditOp::Delete(*n as usize),
            SkeletonOp::Replace { old, new } => {
                let slice = tokens[cursor..cursor + *new as usize].to_vec();
                cursor += *new as usize;
                EditOp::Replace {
                    old: *old as usize,
                    tokens: slice,
                }
            }
            SkeletonOp::Insert(n) => {
                let slice = tokens[cursor..cursor + *n as usize].to_vec();
                cursor += *n as usize;
                EditOp::Insert(slice)
            }
        };
        ops.push(built);
    }
    Ok(EditScript::new(ops))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::edit::diff;
    use crate::predictor::{MarkovChain, MarkovPredictor, TokenAlphabet, UniformPredictor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Independent bit-by-bit CRC used as an oracle against the
    /// table-free implementation above.
    fn crc16_reference(bytes: &[u8]) -> u16 {
        let mut reg = 0xffffu16;
        for &b in bytes {
            for i in (0..8).rev() {
                let bit = (b >> i) & 1;
                let msb = ((reg >> 15) & 1) as u8;
                reg <<= 1;
                if msb ^ bit == 1 {
                    reg ^= 0x1021;
                }
            }
        }
        reg
    }

    #[test]
    fn crc_matches_known_vector() {
        // "123456789" under CRC-16/CCITT-FALSE.
        assert_eq!(crc16(b"123456789"), 0x29b1);
        assert_eq!(crc16(b""), 0xffff);
        assert_eq!(crc16_reference(b"123456789"), 0x29b1);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rand::Rng::gen_range(&mut rng, 0..32);
            let data: Vec<u8> = (0..n).map(|_| rand::Rng::gen(&mut rng)).collect();
            assert_eq!(crc16(&data), crc16_reference(&data));
        }
    }

    #[test]
    fn varint_round_trips() {
        for value in [0u64, 1, 127, 128, 300, 16383, 16384, u64::MAX] {
            let mut buf = Vec::new();
            write_varint(&mut buf, value);
            let mut pos = 0;
            assert_eq!(read_varint(&buf, &mut pos).unwrap(), value);
            assert_eq!(pos, buf.len());
        }
        let mut pos = 0;
        assert!(read_varint(&[0x80], &mut pos).is_err());
        let mut pos = 0;
        assert!(read_varint(&[0xff; 10], &mut pos).is_err());
    }

    #[test]
    fn keep_only_payload_wire_bytes_are_stable() {
        let p = UniformPredictor::new(TokenAlphabet::new(4).unwrap());
        let script = EditScript::new(vec![EditOp::Keep(2)]);
        let payload = encode_payload(&script, &p, &[]).unwrap();
        let wire = payload.to_wire();
        // version, skeleton len 3, [count=1, tag keep, n=2], zero coded bits
        let expected_body = [0x01u8, 0x03, 0x01, 0x00, 0x02, 0x00];
        assert_eq!(&wire[..6], &expected_body);
        let crc = crc16_reference(&expected_body);
        assert_eq!(&wire[6..], &crc.to_be_bytes());
        let back = PatchPayload::from_wire(&wire).unwrap();
        assert_eq!(back, payload);
        assert_eq!(decode_payload(&back, &p, &[]).unwrap(), script);
    }

    #[test]
    fn payload_round_trips_through_wire() {
        let chain = MarkovChain::binary_flip(0.2).unwrap();
        let pred = MarkovPredictor::new(chain.clone());
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let old = chain.sample(&mut rng, 120);
        let mut new = old.clone();
        for i in 40..80 {
            new[i] ^= 1;
        }
        new.extend_from_slice(&[0, 1, 1, 0]);
        let script = diff(&old, &new);
        let context = &old[..10];
        let payload = encode_payload(&script, &pred, context).unwrap();
        let wire = payload.to_wire();
        let parsed = PatchPayload::from_wire(&wire).unwrap();
        let decoded = decode_payload(&parsed, &pred, context).unwrap();
        assert_eq!(decoded, script);
        assert_eq!(crate::codec::edit::apply(&old, &decoded).unwrap(), new);
        assert!(payload.coded_bits() > 0);
        assert!(payload.wire_bits() >= payload.coded_bits() + 8 * 4);
    }

    #[test]
    fn flipping_any_byte_is_detected() {
        let p = UniformPredictor::new(TokenAlphabet::new(8).unwrap());
        let script = diff(&[1, 2, 3, 4], &[1, 7, 7, 7, 4]);
        let payload = encode_payload(&script, &p, &[]).unwrap();
        let wire = payload.to_wire();
        for i in 0..wire.len() {
            let mut bad = wire.clone();
            bad[i] ^= 0x40;
            match PatchPayload::from_wire(&bad) {
                Err(CodecError::CorruptPayload(_)) => {}
                Ok(parsed) => panic!("byte {i}: corruption accepted, {parsed:?}"),
                Err(e) => panic!("byte {i}: unexpected error {e}"),
            }
        }
    }

    #[test]
    fn truncated_wire_is_rejected() {
        let p = UniformPredictor::new(TokenAlphabet::new(4).unwrap());
        let script = diff(&[0, 0, 0], &[1, 2, 3, 0, 1]);
        let wire = encode_payload(&script, &p, &[]).unwrap().to_wire();
        for cut in 0..wire.len() {
            assert!(
                PatchPayload::from_wire(&wire[..cut]).is_err(),
                "prefix of {cut} bytes accepted"
            );
        }
    }

    #[test]
    fn coded_bits_exclude_skeleton() {
        // A pure structural script (no new tokens) costs zero coded bits
        // regardless of how long the kept span is.
        let p = UniformPredictor::new(TokenAlphabet::new(4).unwrap());
        let script = EditScript::new(vec![EditOp::Keep(100_000), EditOp::Delete(5)]);
        let payload = encode_payload(&script, &p, &[]).unwrap();
        assert_eq!(payload.coded_bits(), 0);
        assert!(payload.wire_bits() <= 16 * 8);
    }
}
