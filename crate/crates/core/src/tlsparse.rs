//! TLS record layer: `type(1) | version(2) | length(2, big-endian) | payload`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONTENT_CHANGE_CIPHER_SPEC: u8 = 20;
pub const CONTENT_ALERT: u8 = 21;
pub const CONTENT_HANDSHAKE: u8 = 22;
pub const CONTENT_APPLICATION_DATA: u8 = 23;
pub const CONTENT_HEARTBEAT: u8 = 24;

pub const RECORD_HEADER_LEN: usize = 5;
/// 2^14 plaintext plus the 2048-byte ciphertext expansion allowance.
pub const MAX_RECORD_LEN: usize = 16_384 + 2_048;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TlsError {
    #[error("declared length {declared} does not match payload length {actual}")]
    LengthMismatch { declared: u16, actual: usize },
    #[error("declared length {0} exceeds the record-layer ceiling")]
    TooLong(u16),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlsRecord {
    pub content_type: u8,
    pub version_major: u8,
    pub version_minor: u8,
    pub declared_length: u16,
    pub payload: Vec<u8>,
}

impl TlsRecord {
    /// Builds a record whose declared length matches its payload.
    pub fn new(content_type: u8, version: (u8, u8), payload: Vec<u8>) -> Result<Self, TlsError> {
        if payload.len() > MAX_RECORD_LEN {
            return Err(TlsError::TooLong(payload.len().min(u16::MAX as usize) as u16));
        }
        Ok(TlsRecord {
            content_type,
            version_major: version.0,
            version_minor: version.1,
            declared_length: payload.len() as u16,
            payload,
        })
    }

    pub fn encoded_len(&self) -> usize {
        RECORD_HEADER_LEN + self.payload.len()
    }
}

/// The per-segment application-data heuristic: the TCP payload starts with 0x17.
pub fn is_app_data_segment(payload: &[u8]) -> bool {
    payload.first() == Some(&CONTENT_APPLICATION_DATA)
}

pub fn serialize_record(r: &TlsRecord) -> Result<Vec<u8>, TlsError> {
    if usize::from(r.declared_length) != r.payload.len() {
        return Err(TlsError::LengthMismatch {
            declared: r.declared_length,
            actual: r.payload.len(),
        });
    }
    if usize::from(r.declared_length) > MAX_RECORD_LEN {
        return Err(TlsError::TooLong(r.declared_length));
    }
    let mut out = Vec::with_capacity(r.encoded_len());
    out.extend_from_slice(&[r.content_type, r.version_major, r.version_minor]);
    out.extend_from_slice(&r.declared_length.to_be_bytes());
    out.extend_from_slice(&r.payload);
    Ok(out)
}

fn plausible_header(h: &[u8]) -> bool {
    (CONTENT_CHANGE_CIPHER_SPEC..=CONTENT_HEARTBEAT).contains(&h[0])
        && h[1] == 3
        && usize::from(u16::from_be_bytes([h[3], h[4]])) <= MAX_RECORD_LEN
}

/// Greedily splits a byte stream into records.
///
/// Parsing stops at the first implausible header (unknown content type, major
/// version other than 3, or an over-long length) or at a truncated record;
/// the second value is the number of bytes left unconsumed.
pub fn split_records(stream: &[u8]) -> (Vec<TlsRecord>, usize) {
    let mut records = Vec::new();
    let mut pos = 0;
    while stream.len() - pos >= RECORD_HEADER_LEN {
        let h = &stream[pos..pos + RECORD_HEADER_LEN];
        if !plausible_header(h) {
            break;
        }
        let len = usize::from(u16::from_be_bytes([h[3], h[4]]));
        let end = pos + RECORD_HEADER_LEN + len;
        if end > stream.len() {
            break;
        }
        records.push(TlsRecord {
            content_type: h[0],
            version_major: h[1],
            version_minor: h[2],
            declared_length: len as u16,
            payload: stream[pos + RECORD_HEADER_LEN..end].to_vec(),
        });
        pos = end;
    }
    (records, stream.len() - pos)
}
