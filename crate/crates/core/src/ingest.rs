//! Labeled traffic ingestion: classic pcap files and the JSONL session format.
//!
//! A pcap is flattened into `(FlowKey, RawSegment)` pairs by [`parse_pcap`];
//! [`assemble_sessions`] groups them into ordered, deduplicated sessions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest TCP payload that fits one IPv4 packet.
pub const MAX_TCP_PAYLOAD: usize = 65_495;
pub const DEFAULT_SPLIT_SEED: u64 = 42;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

const PCAP_MAGIC_USEC: u32 = 0xa1b2_c3d4;
const PCAP_MAGIC_NSEC: u32 = 0xa1b2_3c4d;
const LINKTYPE_ETHERNET: u32 = 1;
const ETHERTYPE_IPV4: u16 = 0x0800;
const IPPROTO_TCP: u8 = 6;
const TCP_SYN: u8 = 0x02;
const TCP_ACK: u8 = 0x10;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed pcap header: {0}")]
    MalformedPcapHeader(String),
    #[error("truncated frame at byte offset {offset}: record needs {needed} bytes, {remaining} remain")]
    TruncatedFrame {
        offset: usize,
        needed: usize,
        remaining: usize,
    },
    #[error("unsupported link type {0} (only Ethernet is supported)")]
    UnsupportedLinkType(u32),
    #[error("line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("class {0:?} has fewer than 2 sessions and cannot be split")]
    ClassTooSmall(String),
    #[error("test fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("label map: {0}")]
    LabelMap(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "c2s")]
    ClientToServer,
    #[serde(rename = "s2c")]
    ServerToClient,
}

/// Which directions of a session to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionFilter {
    #[default]
    Both,
    ClientToServer,
    ServerToClient,
}

impl DirectionFilter {
    pub fn admits(self, dir: Direction) -> bool {
        match self {
            DirectionFilter::Both => true,
            DirectionFilter::ClientToServer => dir == Direction::ClientToServer,
            DirectionFilter::ServerToClient => dir == Direction::ServerToClient,
        }
    }
}

impl FromStr for DirectionFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(DirectionFilter::Both),
            "c2s" | "client_to_server" => Ok(DirectionFilter::ClientToServer),
            "s2c" | "server_to_client" => Ok(DirectionFilter::ServerToClient),
            other => Err(format!("unknown direction filter {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Timestamp {
    pub secs: u64,
    pub nanos: u32,
}

impl Timestamp {
    pub fn new(secs: u64, nanos: u32) -> Self {
        Timestamp {
            secs: secs + u64::from(nanos / 1_000_000_000),
            nanos: nanos % 1_000_000_000,
        }
    }

    pub fn as_secs_f64(self) -> f64 {
        self.secs as f64 + f64::from(self.nanos) / 1e9
    }

    pub fn from_secs_f64(t: f64) -> Option<Self> {
        if !t.is_finite() || t < 0.0 {
            return None;
        }
        let secs = t.floor();
        let frac = t - secs;
        // Prefer the coarsest of µs or ns that reproduces `t`, so pcap-precision
        // timestamps come back exact.
        let micros = Timestamp::new(secs as u64, 0).add_nanos((frac * 1e6).round() as u64 * 1_000);
        if micros.as_secs_f64() == t {
            return Some(micros);
        }
        Some(Timestamp::new(secs as u64, 0).add_nanos((frac * 1e9).round() as u64))
    }

    fn add_nanos(self, nanos: u64) -> Self {
        let total = u64::from(self.nanos) + nanos;
        Timestamp {
            secs: self.secs + total / 1_000_000_000,
            nanos: (total % 1_000_000_000) as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSegment {
    pub seq: u32,
    pub timestamp: Timestamp,
    pub direction: Direction,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Pcap(PathBuf),
    Jsonl(PathBuf),
    Synthetic(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub session_id: String,
    pub label: String,
    pub segments: Vec<RawSegment>,
    pub origin: Origin,
}

/// An immutable set of labeled sessions with a stable class indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub sessions: Vec<Session>,
    /// Sorted, distinct labels; a session's class index is its label's position here.
    pub class_names: Vec<String>,
    pub split_seed: u64,
}

impl LabeledDataset {
    pub fn new(sessions: Vec<Session>, split_seed: u64) -> Self {
        let mut class_names: Vec<String> = sessions.iter().map(|s| s.label.clone()).collect();
        class_names.sort();
        class_names.dedup();
        LabeledDataset {
            sessions,
            class_names,
            split_seed,
        }
    }

    pub fn empty() -> Self {
        LabeledDataset::new(Vec::new(), DEFAULT_SPLIT_SEED)
    }

    pub fn with_split_seed(mut self, seed: u64) -> Self {
        self.split_seed = seed;
        self
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_names.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }

    pub fn num_segments(&self) -> usize {
        self.sessions.iter().map(|s| s.segments.len()).sum()
    }

    /// Sessions per class, in `class_names` order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.sessions {
            if let Some(i) = self.class_index(&s.label) {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Drops segments whose direction the filter rejects.
    pub fn filter_direction(mut self, filter: DirectionFilter) -> Self {
        if filter != DirectionFilter::Both {
            for s in &mut self.sessions {
                s.segments.retain(|seg| filter.admits(seg.direction));
            }
        }
        self
    }

    /// Keeps the class indexing of `self` for a subset of its sessions.
    fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            sessions: indices.iter().map(|&i| self.sessions[i].clone()).collect(),
            class_names: self.class_names.clone(),
            split_seed: self.split_seed,
        }
    }
}

// ---------------------------------------------------------------------------
// pcap

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ip, port) = s.rsplit_once(':').ok_or_else(|| format!("missing port in {s:?}"))?;
        Ok(Endpoint {
            ip: ip.parse().map_err(|e| format!("{s:?}: {e}"))?,
            port: port.parse().map_err(|e| format!("{s:?}: {e}"))?,
        })
    }
}

/// Canonical TCP 4-tuple: the lower endpoint comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub lo: Endpoint,
    pub hi: Endpoint,
}

impl FlowKey {
    pub fn new(a: Endpoint, b: Endpoint) -> Self {
        if a <= b {
            FlowKey { lo: a, hi: b }
        } else {
            FlowKey { lo: b, hi: a }
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

impl FromStr for FlowKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once('-').ok_or_else(|| format!("malformed flow key {s:?}"))?;
        Ok(FlowKey::new(a.parse()?, b.parse()?))
    }
}

/// Frames dropped by [`parse_pcap`], by cause.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SkipCounts {
    /// IPv6, ARP, VLAN-tagged and every other non-IPv4 ethertype.
    pub non_ipv4: usize,
    pub non_tcp: usize,
    pub ip_fragments: usize,
    pub malformed: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.non_ipv4 + self.non_tcp + self.ip_fragments + self.malformed
    }
}

#[derive(Debug, Clone, Default)]
pub struct PcapSegments {
    pub pairs: Vec<(FlowKey, RawSegment)>,
    pub skipped: SkipCounts,
}

struct TcpFrame {
    src: Endpoint,
    dst: Endpoint,
    seq: u32,
    flags: u8,
    timestamp: Timestamp,
    payload: Vec<u8>,
}

#[derive(Clone, Copy)]
struct Endian {
    big: bool,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        if self.big {
            u32::from_be_bytes(a)
        } else {
            u32::from_le_bytes(a)
        }
    }
}

/// Flattens a classic pcap into per-frame TCP segments.
///
/// Direction is decided per flow: the endpoint that sent the first bare SYN
/// is the client; without a SYN, the sender of the flow's first frame is.
pub fn parse_pcap(bytes: &[u8]) -> Result<PcapSegments, IngestError> {
    if bytes.len() < 24 {
        return Err(IngestError::MalformedPcapHeader(format!(
            "global header needs 24 bytes, got {}",
            bytes.len()
        )));
    }
    let magic = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (endian, nanosecond) = match magic {
        PCAP_MAGIC_USEC => (Endian { big: false }, false),
        PCAP_MAGIC_NSEC => (Endian { big: false }, true),
        m if m == PCAP_MAGIC_USEC.swap_bytes() => (Endian { big: true }, false),
        m if m == PCAP_MAGIC_NSEC.swap_bytes() => (Endian { big: true }, true),
        m => return Err(IngestError::MalformedPcapHeader(format!("bad magic {m:#010x}"))),
    };
    let link_type = endian.u32(&bytes[20..24]);
    if link_type != LINKTYPE_ETHERNET {
        return Err(IngestError::UnsupportedLinkType(link_type));
    }

    let mut skipped = SkipCounts::default();
    let mut frames = Vec::new();
    let mut offset = 24;
    while offset < bytes.len() {
        let remaining = bytes.len() - offset;
        if remaining < 16 {
            return Err(IngestError::TruncatedFrame {
                offset,
                needed: 16,
                remaining,
            });
        }
        let rec = &bytes[offset..offset + 16];
        let ts_secs = endian.u32(&rec[0..4]);
        let ts_frac = endian.u32(&rec[4..8]);
        let incl_len = endian.u32(&rec[8..12]) as usize;
        if incl_len > remaining - 16 {
            return Err(IngestError::TruncatedFrame {
                offset,
                needed: 16 + incl_len,
                remaining,
            });
        }
        let nanos = if nanosecond {
            ts_frac
        } else {
            ts_frac.saturating_mul(1000)
        };
        let timestamp = Timestamp::new(u64::from(ts_secs), nanos);
        let frame = &bytes[offset + 16..offset + 16 + incl_len];
        offset += 16 + incl_len;

        match decode_ethernet_tcp(frame, timestamp) {
            Ok(f) => frames.push(f),
            Err(Skip::NonIpv4) => skipped.non_ipv4 += 1,
            Err(Skip::NonTcp) => skipped.non_tcp += 1,
            Err(Skip::Fragment) => skipped.ip_fragments += 1,
            Err(Skip::Malformed) => skipped.malformed += 1,
        }
    }

    let mut clients: HashMap<FlowKey, Endpoint> = HashMap::new();
    for f in &frames {
        if f.flags & TCP_SYN != 0 && f.flags & TCP_ACK == 0 {
            clients.entry(FlowKey::new(f.src, f.dst)).or_insert(f.src);
        }
    }
    for f in &frames {
        clients.entry(FlowKey::new(f.src, f.dst)).or_insert(f.src);
    }

    let pairs = frames
        .into_iter()
        .map(|f| {
            let key = FlowKey::new(f.src, f.dst);
            let direction = if clients[&key] == f.src {
                Direction::ClientToServer
            } else {
                Direction::ServerToClient
            };
            (
                key,
                RawSegment {
                    seq: f.seq,
                    timestamp: f.timestamp,
                    direction,
                    payload: f.payload,
                },
            )
        })
        .collect();
    Ok(PcapSegments { pairs, skipped })
}

enum Skip {
    NonIpv4,
    NonTcp,
    Fragment,
    Malformed,
}

fn decode_ethernet_tcp(frame: &[u8], timestamp: Timestamp) -> Result<TcpFrame, Skip> {
    if frame.len() < 14 {
        return Err(Skip::Malformed);
    }
    let ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    if ethertype != ETHERTYPE_IPV4 {
        return Err(Skip::NonIpv4);
    }
    let ip = &frame[14..];
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        return Err(Skip::Malformed);
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    let total_len = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
    if ihl < 20 || total_len < ihl || total_len > ip.len() {
        return Err(Skip::Malformed);
    }
    if ip[9] != IPPROTO_TCP {
        return Err(Skip::NonTcp);
    }
    let frag = u16::from_be_bytes([ip[6], ip[7]]);
    if frag & 0x2000 != 0 || frag & 0x1fff != 0 {
        return Err(Skip::Fragment);
    }
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    let tcp = &ip[ihl..total_len];
    if tcp.len() < 20 {
        return Err(Skip::Malformed);
    }
    let data_offset = usize::from(tcp[12] >> 4) * 4;
    if data_offset < 20 || data_offset > tcp.len() {
        return Err(Skip::Malformed);
    }
    let payload = &tcp[data_offset..];
    if payload.len() > MAX_TCP_PAYLOAD {
        return Err(Skip::Malformed);
    }
    Ok(TcpFrame {
        src: Endpoint {
            ip: src_ip,
            port: u16::from_be_bytes([tcp[0], tcp[1]]),
        },
        dst: Endpoint {
            ip: dst_ip,
            port: u16::from_be_bytes([tcp[2], tcp[3]]),
        },
        seq: u32::from_be_bytes([tcp[4], tcp[5], tcp[6], tcp[7]]),
        flags: tcp[13],
        timestamp,
        payload: payload.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// session assembly

#[derive(Debug, Clone)]
pub struct Assembled {
    pub dataset: LabeledDataset,
    /// Flows the labeler had no label for.
    pub unlabeled_flows: usize,
    /// Retransmitted segments removed during deduplication.
    pub duplicates: usize,
}

/// Groups segments by flow into labeled sessions.
///
/// Within one direction, segments are ordered by sequence number (serial
/// arithmetic, so wraparound is harmless) and the directions are
/// interleaved in arrival order. A retransmission is a second segment with the
/// same direction, seq and payload emptiness; the first one seen wins. Empty
/// segments are kept because the handshake skip counts them.
pub fn assemble_sessions<F>(pairs: Vec<(FlowKey, RawSegment)>, labeler: F, origin: &Origin) -> Assembled
where
    F: Fn(&FlowKey) -> Option<String>,
{
    let mut flows: BTreeMap<FlowKey, Vec<RawSegment>> = BTreeMap::new();
    for (key, seg) in pairs {
        flows.entry(key).or_default().push(seg);
    }

    let mut sessions = Vec::with_capacity(flows.len());
    let mut unlabeled_flows = 0;
    let mut duplicates = 0;
    for (key, segs) in flows {
        let Some(label) = labeler(&key).filter(|l| !l.is_empty()) else {
            unlabeled_flows += 1;
            continue;
        };
        let before = segs.len();
        let segments = order_segments(segs);
        duplicates += before - segments.len();
        sessions.push(Session {
            session_id: key.to_string(),
            label,
            segments,
            origin: origin.clone(),
        });
    }
    Assembled {
        dataset: LabeledDataset::new(sessions, DEFAULT_SPLIT_SEED),
        unlabeled_flows,
        duplicates,
    }
}

fn order_segments(segs: Vec<RawSegment>) -> Vec<RawSegment> {
    let mut seen = std::collections::HashSet::new();
    let mut kept: Vec<(usize, RawSegment)> = Vec::with_capacity(segs.len());
    for (i, seg) in segs.into_iter().enumerate() {
        if seen.insert((seg.direction, seg.seq, seg.payload.is_empty())) {
            kept.push((i, seg));
        }
    }

    // Arrival slots: which direction occupies each position.
    let mut slots: Vec<(Timestamp, usize, Direction)> =
        kept.iter().map(|(i, s)| (s.timestamp, *i, s.direction)).collect();
    slots.sort();

    let mut per_dir: BTreeMap<Direction, Vec<RawSegment>> = BTreeMap::new();
    for (_, seg) in kept {
        per_dir.entry(seg.direction).or_default().push(seg);
    }
    for segs in per_dir.values_mut() {
        // Earliest seq in serial-number order, so wraparound is harmless.
        let base = segs
            .iter()
            .map(|s| s.seq)
            .reduce(|min, s| if (s.wrapping_sub(min) as i32) < 0 { s } else { min })
            .expect("direction has segments");
        // A pure ACK precedes data carrying the same seq.
        segs.sort_by_key(|s| (s.seq.wrapping_sub(base), !s.payload.is_empty()));
        segs.reverse();
    }

    slots
        .into_iter()
        .map(|(_, _, dir)| {
            per_dir
                .get_mut(&dir)
                .and_then(Vec::pop)
                .expect("slot count matches segments")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// pcap directories and label maps

/// Label map file: `{"<flow key or file stem>": "<label>"}`.
pub fn read_label_map(path: &Path) -> Result<HashMap<String, String>, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IngestError::LabelMap(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Default)]
pub struct PcapDirSummary {
    pub files: usize,
    pub skipped: SkipCounts,
    pub unlabeled_flows: usize,
    pub duplicates: usize,
}

/// Ingests every `*.pcap` under `dir`.
///
/// With a label map, each flow is labeled by its flow key, falling back to the
/// file stem. Without one, the parent directory name is the label
/// (`dir/<label>/<session>.pcap`). Files are parsed in parallel.
pub fn read_pcap_dir(
    dir: &Path,
    label_map: Option<&HashMap<String, String>>,
) -> Result<(LabeledDataset, PcapDirSummary), IngestError> {
    use rayon::prelude::*;

    let mut files = Vec::new();
    collect_pcaps(dir, &mut files)?;
    files.sort();

    let parsed: Vec<Result<(Assembled, SkipCounts), IngestError>> = files
        .par_iter()
        .map(|path| {
            let bytes = fs::read(path).map_err(|e| IngestError::io(path, e))?;
            let segs = parse_pcap(&bytes)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let parent = path
                .parent()
                .filter(|p| *p != dir)
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned());
            let labeler = |key: &FlowKey| match label_map {
                Some(map) => map.get(&key.to_string()).or_else(|| map.get(&stem)).cloned(),
                None => parent.clone(),
            };
            let mut assembled = assemble_sessions(segs.pairs, labeler, &Origin::Pcap(path.clone()));
            for s in &mut assembled.dataset.sessions {
                s.session_id = format!("{stem}/{}", s.session_id);
            }
            Ok((assembled, segs.skipped))
        })
        .collect();

    let mut summary = PcapDirSummary {
        files: files.len(),
        ..Default::default()
    };
    let mut sessions = Vec::new();
    for r in parsed {
        let (a, skipped) = r?;
        summary.skipped.non_ipv4 += skipped.non_ipv4;
        summary.skipped.non_tcp += skipped.non_tcp;
        summary.skipped.ip_fragments += skipped.ip_fragments;
        summary.skipped.malformed += skipped.malformed;
        summary.unlabeled_flows += a.unlabeled_flows;
        summary.duplicates += a.duplicates;
        sessions.extend(a.dataset.sessions);
    }
    Ok((LabeledDataset::new(sessions, DEFAULT_SPLIT_SEED), summary))
}

fn collect_pcaps(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), IngestError> {
    for entry in fs::read_dir(dir).map_err(|e| IngestError::io(dir, e))? {
        let path = entry.map_err(|e| IngestError::io(dir, e))?.path();
        if path.is_dir() {
            collect_pcaps(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "pcap") {
            out.push(path);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// JSONL session format

#[derive(Serialize, Deserialize)]
struct SessionLine {
    id: String,
    label: String,
    segments: Vec<SegmentLine>,
}

#[derive(Serialize, Deserialize)]
struct SegmentLine {
    dir: Direction,
    seq: u32,
    ts: f64,
    payload_b64: String,
}

/// Reads one session per line. Blank lines are ignored.
pub fn read_sessions_jsonl(path: &Path) -> Result<LabeledDataset, IngestError> {
    let file = fs::File::open(path).map_err(|e| IngestError::io(path, e))?;
    read_sessions_jsonl_from(BufReader::new(file), &Origin::Jsonl(path.to_path_buf())).map_err(|e| match e {
        IngestError::Io { source, .. } => IngestError::io(path, source),
        other => other,
    })
}

pub fn read_sessions_jsonl_from<R: BufRead>(reader: R, origin: &Origin) -> Result<LabeledDataset, IngestError> {
    let mut sessions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| IngestError::io(Path::new("<jsonl>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| IngestError::MalformedLine { line_no, reason };
        let parsed: SessionLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if parsed.label.is_empty() {
            return Err(malformed("empty label".into()));
        }
        let segments = parsed
            .segments
            .into_iter()
            .enumerate()
            .map(|(j, seg)| {
                let payload = BASE64_STANDARD
                    .decode(seg.payload_b64.as_bytes())
                    .map_err(|e| malformed(format!("segment {j}: bad base64: {e}")))?;
                if payload.len() > MAX_TCP_PAYLOAD {
                    return Err(malformed(format!("segment {j}: payload of {} bytes", payload.len())));
                }
                let timestamp = Timestamp::from_secs_f64(seg.ts)
                    .ok_or_else(|| malformed(format!("segment {j}: bad timestamp {}", seg.ts)))?;
                Ok(RawSegment {
                    seq: seg.seq,
                    timestamp,
                    direction: seg.dir,
                    payload,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        sessions.push(Session {
            session_id: parsed.id,
            label: parsed.label,
            segments,
            origin: origin.clone(),
        });
    }
    Ok(LabeledDataset::new(sessions, DEFAULT_SPLIT_SEED))
}

pub fn write_sessions_jsonl(ds: &LabeledDataset, path: &Path) -> Result<(), IngestError> {
    let file = fs::File::create(path).map_err(|e| IngestError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_sessions_jsonl_to(ds, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| IngestError::io(path, e))
}

pub fn write_sessions_jsonl_to<W: Write>(ds: &LabeledDataset, w: &mut W) -> io::Result<()> {
    for s in &ds.sessions {
        let line = SessionLine {
            id: s.session_id.clone(),
            label: s.label.clone(),
            segments: s
                .segments
                .iter()
                .map(|seg| SegmentLine {
                    dir: seg.direction,
                    seq: seg.seq,
                    ts: seg.timestamp.as_secs_f64(),
                    payload_b64: BASE64_STANDARD.encode(&seg.payload),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train/test split

/// Stratified split of item indices by class label.
///
/// Each class contributes `round(test_fraction * n)` items to the test side,
/// clamped to `[1, n - 1]`. Returned index lists are ascending.
pub(crate) fn stratified_indices(
    labels: &[usize],
    n_classes: usize,
    test_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut members in by_class {
        let n = members.len();
        if n == 0 {
            continue;
        }
        members.shuffle(&mut rng);
        let n_test = if n < 2 {
            0
        } else {
            ((test_fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Stratified, seeded train/test split. Both halves keep the full class indexing.
pub fn split_dataset(ds: &LabeledDataset, test_fraction: f64) -> Result<(LabeledDataset, LabeledDataset), IngestError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(IngestError::InvalidFraction(test_fraction));
    }
    for (name, count) in ds.class_names.iter().zip(ds.class_counts()) {
        if count < 2 {
            return Err(IngestError::ClassTooSmall(name.clone()));
        }
    }
    let labels: Vec<usize> = ds
        .sessions
        .iter()
        .map(|s| ds.class_index(&s.label).expect("label indexed"))
        .collect();
    let (train, test) = stratified_indices(&labels, ds.class_names.len(), test_fraction, ds.split_seed);
    Ok((ds.subset(&train), ds.subset(&test)))
}
