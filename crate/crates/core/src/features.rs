//! Fixed-shape byte views of sessions.
//!
//! A view turns every session into a flat byte vector of the same length `D`.
//! Packetized views (`TcpPayload`, `TlsAppData`) take the first `N` bytes of
//! `K` selected segments, row-major, so `D = K * N`. `ConcatTls` joins whole
//! application-data records into one `concat_length` byte stream.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{LabeledDataset, Session};
use crate::interpret::ImpactLayout;
use crate::tlsparse::{is_app_data_segment, serialize_record, split_records};

pub const DEFAULT_PACKETS: usize = 10;
pub const DEFAULT_BYTES_PER_PACKET: usize = 200;
pub const DEFAULT_CONCAT_LENGTH: usize = 2000;
pub const DEFAULT_HANDSHAKE_SKIP: usize = 3;

const MATRIX_MAGIC: &[u8; 4] = b"TLMV";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid view spec: {0}")]
    InvalidSpec(String),
    #[error("no session survives the view ({dropped} dropped as all-zero)")]
    EmptyView { dropped: usize },
    #[error("mask range [{start}, {end}) exceeds {bytes_per_packet} bytes per packet")]
    RangeOutOfBounds {
        start: usize,
        end: usize,
        bytes_per_packet: usize,
    },
    #[error("operation needs a packetized view, got {0:?}")]
    KindMismatch(ViewKind),
    #[error("expected a vector of length {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("matrix file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewKind {
    TcpPayload,
    TlsAppData,
    ConcatTls,
}

/// Half-open byte range `[start, end)` within a packet row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct MaskRange {
    pub start: usize,
    pub end: usize,
}

impl MaskRange {
    pub const NONE: MaskRange = MaskRange { start: 0, end: 0 };

    pub fn prefix(len: usize) -> Self {
        MaskRange { start: 0, end: len }
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    /// Smallest range enclosing both.
    pub fn hull(self, other: MaskRange) -> MaskRange {
        match (self.is_empty(), other.is_empty()) {
            (true, _) => other,
            (_, true) => self,
            _ => MaskRange {
                start: self.start.min(other.start),
                end: self.end.max(other.end),
            },
        }
    }

    pub fn contains_range(&self, other: &MaskRange) -> bool {
        other.is_empty() || (self.start <= other.start && other.end <= self.end)
    }

    fn zero(&self, row: &mut [u8]) {
        let end = self.end.min(row.len());
        if self.start < end {
            row[self.start..end].fill(0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewSpec {
    pub kind: ViewKind,
    pub packets: usize,
    pub bytes_per_packet: usize,
    pub per_packet_mask: MaskRange,
    pub concat_length: usize,
    pub skip_tcp_handshake: usize,
}

impl ViewSpec {
    fn with_kind(kind: ViewKind) -> Self {
        ViewSpec {
            kind,
            packets: DEFAULT_PACKETS,
            bytes_per_packet: DEFAULT_BYTES_PER_PACKET,
            per_packet_mask: MaskRange::NONE,
            concat_length: DEFAULT_CONCAT_LENGTH,
            skip_tcp_handshake: DEFAULT_HANDSHAKE_SKIP,
        }
    }

    pub fn tcp_payload() -> Self {
        Self::with_kind(ViewKind::TcpPayload)
    }

    pub fn tls_app_data() -> Self {
        Self::with_kind(ViewKind::TlsAppData)
    }

    pub fn concat_tls() -> Self {
        Self::with_kind(ViewKind::ConcatTls)
    }

    pub fn with_mask(mut self, mask: MaskRange) -> Self {
        self.per_packet_mask = mask;
        self
    }

    pub fn is_packetized(&self) -> bool {
        self.kind != ViewKind::ConcatTls
    }

    /// Flattened feature length `D`.
    pub fn dim(&self) -> usize {
        if self.is_packetized() {
            self.packets * self.bytes_per_packet
        } else {
            self.concat_length
        }
    }

    pub fn layout(&self) -> ImpactLayout {
        if self.is_packetized() {
            ImpactLayout::Packetized {
                packets: self.packets,
                bytes_per_packet: self.bytes_per_packet,
            }
        } else {
            ImpactLayout::Flat
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let m = self.per_packet_mask;
        if m.start > m.end {
            return Err(FeatureError::InvalidSpec(format!(
                "mask [{}, {}) is reversed",
                m.start, m.end
            )));
        }
        if self.is_packetized() {
            if self.packets == 0 || self.bytes_per_packet == 0 {
                return Err(FeatureError::InvalidSpec(
                    "packets and bytes_per_packet must be >= 1".into(),
                ));
            }
            if m.end > self.bytes_per_packet {
                return Err(FeatureError::RangeOutOfBounds {
                    start: m.start,
                    end: m.end,
                    bytes_per_packet: self.bytes_per_packet,
                });
            }
        } else if self.concat_length == 0 {
            return Err(FeatureError::InvalidSpec("concat_length must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMatrix {
    pub features: Vec<u8>,
    pub class_index: usize,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewDataset {
    pub spec: ViewSpec,
    pub samples: Vec<SampleMatrix>,
    pub class_names: Vec<String>,
    /// Sessions dropped because their feature vector was all zeros.
    pub dropped: usize,
}

impl ViewDataset {
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_index).collect()
    }

    pub fn rows(&self) -> Vec<&[u8]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    /// Distinct classes actually present among the samples.
    pub fn classes_present(&self) -> usize {
        let mut seen = vec![false; self.n_classes()];
        for s in &self.samples {
            seen[s.class_index] = true;
        }
        seen.into_iter().filter(|&b| b).count()
    }

    pub fn subset(&self, indices: &[usize]) -> ViewDataset {
        ViewDataset {
            spec: self.spec.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            dropped: 0,
        }
    }

    /// Stratified split of the samples; see [`crate::ingest::split_dataset`].
    pub fn split(&self, test_fraction: f64, seed: u64) -> (ViewDataset, ViewDataset) {
        let (train, test) = crate::ingest::stratified_indices(&self.labels(), self.n_classes(), test_fraction, seed);
        (self.subset(&train), self.subset(&test))
    }
}

fn packet_row(payload: &[u8], n: usize, mask: &MaskRange) -> Vec<u8> {
    let mut row = vec![0u8; n];
    let take = payload.len().min(n);
    row[..take].copy_from_slice(&payload[..take]);
    mask.zero(&mut row);
    row
}

fn session_features(session: &Session, spec: &ViewSpec) -> Vec<u8> {
    let n = spec.bytes_per_packet;
    match spec.kind {
        ViewKind::TcpPayload => {
            let mut out = Vec::with_capacity(spec.dim());
            let rows = session
                .segments
                .iter()
                .skip(spec.skip_tcp_handshake)
                .filter(|s| !s.payload.is_empty())
                .take(spec.packets);
            for seg in rows {
                out.extend(packet_row(&seg.payload, n, &spec.per_packet_mask));
            }
            out.resize(spec.dim(), 0);
            out
        }
        ViewKind::TlsAppData => {
            let mut out = Vec::with_capacity(spec.dim());
            let rows = session
                .segments
                .iter()
                .filter(|s| is_app_data_segment(&s.payload))
                .take(spec.packets);
            for seg in rows {
                out.extend(packet_row(&seg.payload, n, &spec.per_packet_mask));
            }
            out.resize(spec.dim(), 0);
            out
        }
        ViewKind::ConcatTls => {
            let stream: Vec<u8> = session
                .segments
                .iter()
                .filter(|s| is_app_data_segment(&s.payload))
                .flat_map(|s| s.payload.iter().copied())
                .collect();
            // Records may straddle segments; re-split the joined stream so the
            // mask lands on every record's own header.
            let (records, trailing) = split_records(&stream);
            let mut out = Vec::with_capacity(spec.concat_length);
            for r in &records {
                if out.len() >= spec.concat_length {
                    break;
                }
                let mut bytes = serialize_record(r).expect("split_records yields consistent records");
                spec.per_packet_mask.zero(&mut bytes);
                out.extend_from_slice(&bytes);
            }
            if trailing > 0 && out.len() < spec.concat_length {
                let mut rest = stream[stream.len() - trailing..].to_vec();
                spec.per_packet_mask.zero(&mut rest);
                out.extend_from_slice(&rest);
            }
            out.resize(spec.concat_length, 0);
            out
        }
    }
}

/// Builds the byte view of every session. All-zero samples are dropped.
pub fn build_view(ds: &LabeledDataset, spec: &ViewSpec) -> Result<ViewDataset, FeatureError> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(ds.sessions.len());
    let mut dropped = 0;
    for session in &ds.sessions {
        let features = session_features(session, spec);
        if features.iter().all(|&b| b == 0) {
            dropped += 1;
            continue;
        }
        let class_index = ds
            .class_index(&session.label)
            .ok_or_else(|| FeatureError::InvalidSpec(format!("label {:?} not indexed", session.label)))?;
        samples.push(SampleMatrix {
            features,
            class_index,
            session_id: session.session_id.clone(),
        });
    }
    if samples.is_empty() {
        return Err(FeatureError::EmptyView { dropped });
    }
    Ok(ViewDataset {
        spec: spec.clone(),
        samples,
        class_names: ds.class_names.clone(),
        dropped,
    })
}

/// Zeroes `extra` in every packet row. The resulting spec mask is the hull
/// of the old mask and `extra`. Samples that become all-zero are dropped, so
/// the result equals rebuilding the view with the combined mask.
pub fn apply_mask(v: &ViewDataset, extra: MaskRange) -> Result<ViewDataset, FeatureError> {
    if !v.spec.is_packetized() {
        return Err(FeatureError::KindMismatch(v.spec.kind));
    }
    let n = v.spec.bytes_per_packet;
    if extra.start > extra.end || extra.end > n {
        return Err(FeatureError::RangeOutOfBounds {
            start: extra.start,
            end: extra.end,
            bytes_per_packet: n,
        });
    }
    let mask = v.spec.per_packet_mask.hull(extra);
    let mut spec = v.spec.clone();
    spec.per_packet_mask = mask;

    let mut dropped = v.dropped;
    let mut samples = Vec::with_capacity(v.samples.len());
    for s in &v.samples {
        let mut features = s.features.clone();
        for row in features.chunks_mut(n) {
            mask.zero(row);
        }
        if features.iter().all(|&b| b == 0) {
            dropped += 1;
            continue;
        }
        samples.push(SampleMatrix {
            features,
            class_index: s.class_index,
            session_id: s.session_id.clone(),
        });
    }
    if samples.is_empty() {
        return Err(FeatureError::EmptyView { dropped });
    }
    Ok(ViewDataset {
        spec,
        samples,
        class_names: v.class_names.clone(),
        dropped,
    })
}

/// Sums a flat per-dimension vector over packets: entry `j` is the total at
/// within-packet offset `j`.
pub fn offset_importance(flat: &[f64], spec: &ViewSpec) -> Result<Vec<f64>, FeatureError> {
    if !spec.is_packetized() {
        return Err(FeatureError::KindMismatch(spec.kind));
    }
    if flat.len() != spec.dim() {
        return Err(FeatureError::DimensionMismatch {
            expected: spec.dim(),
            actual: flat.len(),
        });
    }
    let n = spec.bytes_per_packet;
    let mut out = vec![0.0; n];
    for row in flat.chunks(n) {
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// binary matrix export

#[derive(Serialize, Deserialize)]
struct MatrixSidecar {
    class_names: Vec<String>,
    spec: ViewSpec,
    session_ids: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the `TLMV` matrix (little-endian u32 header fields, then one
/// `u32 class_index + D bytes` record per sample) and its JSON sidecar.
pub fn write_matrix(v: &ViewDataset, path: &Path) -> Result<(), FeatureError> {
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| FeatureError::Io { path: p, source }
    };
    let d = v.dim();
    let mut buf = Vec::with_capacity(16 + v.samples.len() * (4 + d));
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&(v.samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(v.n_classes() as u32).to_le_bytes());
    for s in &v.samples {
        buf.extend_from_slice(&(s.class_index as u32).to_le_bytes());
        buf.extend_from_slice(&s.features);
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(io_err(path))?;

    let sidecar = MatrixSidecar {
        class_names: v.class_names.clone(),
        spec: v.spec.clone(),
        session_ids: v.samples.iter().map(|s| s.session_id.clone()).collect(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, text).map_err(io_err(&side))
}

pub fn read_matrix(path: &Path) -> Result<ViewDataset, FeatureError> {
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| FeatureError::Io { path: p, source }
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() < 16 || &bytes[..4] != MATRIX_MAGIC {
        return Err(FeatureError::Format("missing TLMV header".into()));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let (count, d, n_classes) = (word(4), word(8), word(12));
    if bytes.len() != 16 + count * (4 + d) {
        return Err(FeatureError::Format(format!(
            "expected {} bytes for {count} samples of dimension {d}, found {}",
            16 + count * (4 + d),
            bytes.len()
        )));
    }
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let sidecar: MatrixSidecar = serde_json::from_str(&text).map_err(|e| FeatureError::Format(e.to_string()))?;
    if sidecar.class_names.len() != n_classes || sidecar.spec.dim() != d || sidecar.session_ids.len() != count {
        return Err(FeatureError::Format("sidecar does not match matrix header".into()));
    }
    let samples = sidecar
        .session_ids
        .into_iter()
        .enumerate()
        .map(|(i, session_id)| {
            let at = 16 + i * (4 + d);
            let class_index = word(at);
            if class_index >= n_classes {
                return Err(FeatureError::Format(format!(
                    "sample {i}: class {class_index} out of range"
                )));
            }
            Ok(SampleMatrix {
                features: bytes[at + 4..at + 4 + d].to_vec(),
                class_index,
                session_id,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ViewDataset {
        spec: sidecar.spec,
        samples,
        class_names: sidecar.class_names,
        dropped: 0,
    })
}
