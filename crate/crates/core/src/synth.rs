//! Labeled synthetic TLS-over-TCP sessions with planted leakage channels.
//!
//! Every session opens with three empty segments standing in for the TCP
//! handshake, then one or two TLS handshake records, then application-data
//! records, one record per segment. With every channel off, each byte is
//! either fixed protocol framing or uniform noise, and record lengths follow
//! one class-independent distribution.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::ingest::write_sessions_jsonl;
use crate::ingest::{Direction, Endpoint, FlowKey, LabeledDataset, Origin, RawSegment, Session, Timestamp};
use crate::rng::keyed_rng;
use crate::tlsparse::{serialize_record, TlsRecord, CONTENT_APPLICATION_DATA, CONTENT_HANDSHAKE};

pub const MAX_CLASSES: usize = 128;
/// Bytes at the start of each record payload treated as the explicit IV.
pub const IV_LEN: usize = 16;
/// Every record payload is at least this long, so a 200-byte row never
/// reaches the end of a record and zero padding carries no length signal.
pub const MIN_RECORD_LEN: usize = 300;
/// Width of each class's record-length band under `length_leak`.
pub const LENGTH_BAND: usize = 80;
const LENGTH_STEP: usize = 120;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("profile JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_records() -> (usize, usize) {
    (8, 16)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakageProfile {
    pub classes: usize,
    pub sessions_per_class: usize,
    #[serde(default)]
    pub handshake_leak: bool,
    #[serde(default)]
    pub length_leak: bool,
    #[serde(default)]
    pub iv_leak_strength: f64,
    #[serde(default)]
    pub payload_leak_strength: f64,
    /// Inclusive range of application-data records per session.
    #[serde(default = "default_records")]
    pub records_per_session: (usize, usize),
    pub seed: u64,
}

impl Default for LeakageProfile {
    fn default() -> Self {
        LeakageProfile {
            classes: 8,
            sessions_per_class: 200,
            handshake_leak: false,
            length_leak: false,
            iv_leak_strength: 0.0,
            payload_leak_strength: 0.0,
            records_per_session: default_records(),
            seed: 42,
        }
    }
}

impl LeakageProfile {
    pub fn from_json_file(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let p: LeakageProfile = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidProfile(m));
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.classes > MAX_CLASSES {
            return bad(format!("classes must be at most {MAX_CLASSES}, got {}", self.classes));
        }
        if self.sessions_per_class == 0 {
            return bad("sessions_per_class must be at least 1".into());
        }
        for (name, s) in [
            ("iv_leak_strength", self.iv_leak_strength),
            ("payload_leak_strength", self.payload_leak_strength),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("{name} must lie in [0, 1], got {s}"));
            }
        }
        let (lo, hi) = self.records_per_session;
        if lo == 0 || lo > hi {
            return bad(format!(
                "records_per_session [{lo}, {hi}] must be non-empty and start at 1 or more"
            ));
        }
        Ok(())
    }

    pub fn class_name(class: usize) -> String {
        format!("class{class:02}")
    }

    /// Half-open record payload length range for `class`.
    pub fn length_range(&self, class: usize) -> (usize, usize) {
        if self.length_leak {
            let lo = MIN_RECORD_LEN + LENGTH_STEP * class;
            (lo, lo + LENGTH_BAND)
        } else {
            (MIN_RECORD_LEN, MIN_RECORD_LEN + LENGTH_STEP * self.classes)
        }
    }
}

/// Per-class constants shared by every session of that class.
struct ClassKeys {
    iv_pattern: [u8; IV_LEN],
    handshake_pattern: [u8; 32],
}

fn class_keys(seed: u64, class: usize) -> ClassKeys {
    let mut rng = keyed_rng(seed, &[0xc1a55, class as u64]);
    ClassKeys {
        iv_pattern: rng.random(),
        handshake_pattern: rng.random(),
    }
}

fn random_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    rng.fill(v.as_mut_slice());
    v
}

fn record_segment(content_type: u8, version: (u8, u8), payload: Vec<u8>) -> Vec<u8> {
    let r = TlsRecord::new(content_type, version, payload).expect("synthetic records stay under the ceiling");
    serialize_record(&r).expect("declared length matches")
}

fn app_payload(p: &LeakageProfile, keys: &ClassKeys, class: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (lo, hi) = p.length_range(class);
    let len = rng.random_range(lo..hi);
    let mut body = random_bytes(rng, len);
    if p.iv_leak_strength > 0.0 {
        for (b, &pat) in body.iter_mut().zip(&keys.iv_pattern) {
            if rng.random::<f64>() < p.iv_leak_strength {
                *b = pat;
            }
        }
    }
    if p.payload_leak_strength > 0.0 {
        let band_lo = class * 256 / p.classes;
        let band_hi = (class + 1) * 256 / p.classes;
        for b in &mut body[IV_LEN..] {
            if rng.random::<f64>() < p.payload_leak_strength {
                *b = rng.random_range(band_lo..band_hi) as u8;
            }
        }
    }
    body
}

fn handshake_payload(p: &LeakageProfile, keys: &ClassKeys, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.random_range(180..520);
    let mut body = random_bytes(rng, len);
    if p.handshake_leak {
        body[6..6 + keys.handshake_pattern.len()].copy_from_slice(&keys.handshake_pattern);
    }
    body
}

fn make_session(p: &LeakageProfile, keys: &ClassKeys, class: usize, idx: usize) -> Session {
    let mut rng = keyed_rng(p.seed, &[class as u64, idx as u64]);
    let mut client_seq: u32 = rng.random();
    let mut server_seq: u32 = rng.random();
    let base_us = 1_600_000_000_000_000u64 + ((class * p.sessions_per_class + idx) as u64) * 10_000_000;
    let mut segments = Vec::new();
    let mut push = |dir: Direction, payload: Vec<u8>, seq: &mut u32, advance: u32| {
        let us = base_us + segments.len() as u64 * 1_000;
        segments.push(RawSegment {
            seq: *seq,
            timestamp: Timestamp::new(us / 1_000_000, (us % 1_000_000) as u32 * 1_000),
            direction: dir,
            payload,
        });
        *seq = seq.wrapping_add(advance);
    };
    // SYN and SYN-ACK each consume one sequence number; the bare ACK does not.
    push(Direction::ClientToServer, Vec::new(), &mut client_seq, 1);
    push(Direction::ServerToClient, Vec::new(), &mut server_seq, 1);
    push(Direction::ClientToServer, Vec::new(), &mut client_seq, 0);

    let n_handshake = rng.random_range(1..=2);
    for h in 0..n_handshake {
        let body = handshake_payload(p, keys, &mut rng);
        let (dir, version) = if h == 0 {
            (Direction::ClientToServer, (3, 1))
        } else {
            (Direction::ServerToClient, (3, 3))
        };
        let seg = record_segment(CONTENT_HANDSHAKE, version, body);
        let (seq, adv) = match dir {
            Direction::ClientToServer => (&mut client_seq, seg.len() as u32),
            Direction::ServerToClient => (&mut server_seq, seg.len() as u32),
        };
        push(dir, seg, seq, adv);
    }

    let (lo, hi) = p.records_per_session;
    let n_records = rng.random_range(lo..=hi);
    for r in 0..n_records {
        let dir = if r == 0 || rng.random::<f64>() < 0.25 {
            Direction::ClientToServer
        } else {
            Direction::ServerToClient
        };
        let body = app_payload(p, keys, class, &mut rng);
        let seg = record_segment(CONTENT_APPLICATION_DATA, (3, 3), body);
        let adv = seg.len() as u32;
        match dir {
            Direction::ClientToServer => push(dir, seg, &mut client_seq, adv),
            Direction::ServerToClient => push(dir, seg, &mut server_seq, adv),
        }
    }

    let label = LeakageProfile::class_name(class);
    Session {
        session_id: format!("{label}/{idx:05}"),
        label,
        segments,
        origin: Origin::Synthetic(p.seed),
    }
}

/// Builds the dataset described by `profile`; identical profiles give
/// identical datasets.
pub fn generate(profile: &LeakageProfile) -> Result<LabeledDataset, SynthError> {
    profile.validate()?;
    let keys: Vec<ClassKeys> = (0..profile.classes).map(|c| class_keys(profile.seed, c)).collect();
    let sessions: Vec<Session> = (0..profile.classes * profile.sessions_per_class)
        .into_par_iter()
        .map(|i| {
            let (c, idx) = (i / profile.sessions_per_class, i % profile.sessions_per_class);
            make_session(profile, &keys[c], c, idx)
        })
        .collect();
    Ok(LabeledDataset::new(sessions, profile.seed))
}

// ---------------------------------------------------------------------------
// pcap export

const SERVER: Endpoint = Endpoint {
    ip: Ipv4Addr::new(192, 0, 2, 1),
    port: 443,
};

fn client_endpoint(i: usize) -> Endpoint {
    let n = 0x0a00_0000u32 + i as u32 + 1;
    Endpoint {
        ip: Ipv4Addr::from(n),
        port: 40_000 + (i % 20_000) as u16,
    }
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

const TCP_SYN: u8 = 0x02;
const TCP_PSH: u8 = 0x08;
const TCP_ACK: u8 = 0x10;

fn frame(src: Endpoint, dst: Endpoint, seq: u32, flags: u8, payload: &[u8], ip_id: u16) -> Vec<u8> {
    let mut f = Vec::with_capacity(54 + payload.len());
    f.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01, 0x08, 0x00]);
    let total = (20 + 20 + payload.len()) as u16;
    let mut ip = [0u8; 20];
    ip[0] = 0x45;
    ip[2..4].copy_from_slice(&total.to_be_bytes());
    ip[4..6].copy_from_slice(&ip_id.to_be_bytes());
    ip[6] = 0x40;
    ip[8] = 64;
    ip[9] = 6;
    ip[12..16].copy_from_slice(&src.ip.octets());
    ip[16..20].copy_from_slice(&dst.ip.octets());
    let csum = ipv4_checksum(&ip);
    ip[10..12].copy_from_slice(&csum.to_be_bytes());
    f.extend_from_slice(&ip);
    let mut tcp = [0u8; 20];
    tcp[0..2].copy_from_slice(&src.port.to_be_bytes());
    tcp[2..4].copy_from_slice(&dst.port.to_be_bytes());
    tcp[4..8].copy_from_slice(&seq.to_be_bytes());
    tcp[12] = 5 << 4;
    tcp[13] = flags;
    tcp[14..16].copy_from_slice(&0xffffu16.to_be_bytes());
    f.extend_from_slice(&tcp);
    f.extend_from_slice(payload);
    f
}

/// Classic microsecond pcap bytes, one flow per session, plus the flow-key to
/// label map needed to read it back.
pub fn pcap_bytes(ds: &LabeledDataset) -> (Vec<u8>, BTreeMap<String, String>) {
    let mut out = Vec::new();
    out.extend_from_slice(&0xa1b2_c3d4u32.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&65_535u32.to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());

    let mut labels = BTreeMap::new();
    for (i, s) in ds.sessions.iter().enumerate() {
        let client = client_endpoint(i);
        labels.insert(FlowKey::new(client, SERVER).to_string(), s.label.clone());
        let (mut seen_c2s, mut seen_s2c) = (false, false);
        for (k, seg) in s.segments.iter().enumerate() {
            let (src, dst, first) = match seg.direction {
                Direction::ClientToServer => (client, SERVER, !std::mem::replace(&mut seen_c2s, true)),
                Direction::ServerToClient => (SERVER, client, !std::mem::replace(&mut seen_s2c, true)),
            };
            let flags = match (seg.payload.is_empty(), first, seg.direction) {
                (true, true, Direction::ClientToServer) => TCP_SYN,
                (true, true, Direction::ServerToClient) => TCP_SYN | TCP_ACK,
                (true, _, _) => TCP_ACK,
                (false, _, _) => TCP_ACK | TCP_PSH,
            };
            let f = frame(src, dst, seg.seq, flags, &seg.payload, k as u16);
            out.extend_from_slice(&(seg.timestamp.secs as u32).to_le_bytes());
            out.extend_from_slice(&(seg.timestamp.nanos / 1_000).to_le_bytes());
            out.extend_from_slice(&(f.len() as u32).to_le_bytes());
            out.extend_from_slice(&(f.len() as u32).to_le_bytes());
            out.extend_from_slice(&f);
        }
    }
    (out, labels)
}

/// Label-map sidecar written next to a pcap: `x.pcap` gets `x.labels.json`.
pub fn labels_path(pcap: &Path) -> PathBuf {
    pcap.with_extension("labels.json")
}

/// Writes the pcap and its label map; returns the label map's path.
pub fn write_pcap(ds: &LabeledDataset, path: &Path) -> Result<PathBuf, SynthError> {
    let (bytes, labels) = pcap_bytes(ds);
    fs::write(path, bytes).map_err(io_err(path))?;
    let lp = labels_path(path);
    let mut f = fs::File::create(&lp).map_err(io_err(&lp))?;
    serde_json::to_writer_pretty(&mut f, &labels)?;
    f.write_all(b"\n").map_err(io_err(&lp))?;
    Ok(lp)
}
