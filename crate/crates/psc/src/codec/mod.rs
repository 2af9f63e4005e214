//! Innovation codec: edit scripts over token sequences, arithmetic coding
//! of the new tokens against a shared predictor, and a checksummed wire
//! format for patch payloads.

mod arith;
mod edit;
mod payload;

pub use arith::{ac_decode, ac_encode, quantize, BitString, FREQ_TOTAL, MAX_CODED_ALPHABET};
pub use edit::{apply, diff, EditOp, EditScript};
pub use payload::{
    crc16, decode_payload, encode_payload, read_varint, write_varint, PatchPayload,
    PAYLOAD_VERSION,
};

use crate::predictor::PredictorError;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    /// Framed bytes fail structural or checksum validation, or a coded
    /// stream ends before the declared token count is recovered.
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    /// An edit script does not fit the sequence it is applied to.
    #[error("malformed edit script: {0}")]
    MalformedScript(String),
    /// Alphabet too large for 16-bit frequency quantization.
    #[error("alphabet size {0} exceeds the codec limit")]
    AlphabetTooLarge(u32),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}
