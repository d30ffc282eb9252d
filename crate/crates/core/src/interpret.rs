//! Impact vectors from the decision tree, their concentration, and leaker
//! byte selection.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::ViewSpec;
use crate::models::{tree_importance, DecisionTree};

pub const DEFAULT_TOP_K: usize = 16;
pub const DEFAULT_MIN_SHARE: f64 = 0.02;
pub const DEFAULT_CONCENTRATION_THRESHOLD: f64 = 0.30;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("impact vector has {actual} entries, view expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("selection policy: {0}")]
    InvalidPolicy(String),
    #[error("malformed impact CSV line {line_no}: {reason}")]
    MalformedCsv { line_no: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl InterpretError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        InterpretError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactLayout {
    /// `packets` rows of `bytes_per_packet` bytes, flattened row-major.
    Packetized {
        packets: usize,
        bytes_per_packet: usize,
    },
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactVector {
    pub values: Vec<f64>,
    pub layout: ImpactLayout,
}

impl ImpactVector {
    pub fn new(values: Vec<f64>, layout: ImpactLayout) -> Result<Self, InterpretError> {
        if let ImpactLayout::Packetized {
            packets,
            bytes_per_packet,
        } = layout
        {
            if values.len() != packets * bytes_per_packet {
                return Err(InterpretError::DimensionMismatch {
                    expected: packets * bytes_per_packet,
                    actual: values.len(),
                });
            }
        }
        Ok(ImpactVector { values, layout })
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Per-offset mass: summed over packets for packetized layouts, the
    /// values themselves otherwise.
    pub fn offset_values(&self) -> Vec<f64> {
        match self.layout {
            ImpactLayout::Packetized { bytes_per_packet, .. } => {
                let mut out = vec![0.0; bytes_per_packet];
                for row in self.values.chunks(bytes_per_packet) {
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                out
            }
            ImpactLayout::Flat => self.values.clone(),
        }
    }
}

/// The tree's normalized impurity-decrease importance laid out like `spec`.
pub fn impact_from_tree(t: &DecisionTree, spec: &ViewSpec) -> Result<ImpactVector, InterpretError> {
    ImpactVector::new(tree_importance(t, t.training_samples()), spec.layout())
}

/// Element-wise mean of several impact vectors sharing a layout, renormalized.
pub fn mean_impact(ivs: &[ImpactVector]) -> Result<ImpactVector, InterpretError> {
    let first = ivs
        .first()
        .ok_or_else(|| InterpretError::InvalidPolicy("no impact vectors to average".into()))?;
    let mut values = vec![0.0; first.values.len()];
    for iv in ivs {
        if iv.values.len() != values.len() {
            return Err(InterpretError::DimensionMismatch {
                expected: values.len(),
                actual: iv.values.len(),
            });
        }
        values.iter_mut().zip(&iv.values).for_each(|(a, v)| *a += v);
    }
    let sum: f64 = values.iter().sum();
    if sum > 0.0 {
        values.iter_mut().for_each(|v| *v /= sum);
    }
    ImpactVector::new(values, first.layout)
}

/// Indices of `v` ordered by value descending, lowest index first on ties.
fn ranked(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

fn shares(v: &[f64]) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter().map(|x| x / total).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Share of total mass held by the `top_k` largest per-offset entries.
pub fn concentration(iv: &ImpactVector, top_k: usize) -> f64 {
    let s = shares(&iv.offset_values());
    let k = top_k.clamp(1, s.len().max(1));
    ranked(&s).iter().take(k).map(|&i| s[i]).sum::<f64>().min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub top_k: usize,
    pub min_share: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            top_k: DEFAULT_TOP_K,
            min_share: DEFAULT_MIN_SHARE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakerSelection {
    /// Within-packet offsets, or flat indices for concatenated views; ascending.
    pub offsets: Vec<usize>,
    pub mass_covered: f64,
    pub concentration: f64,
}

/// Offsets among the `top_k` heaviest whose share reaches `min_share`.
pub fn select_leakers(
    iv: &ImpactVector,
    spec: &ViewSpec,
    policy: &SelectionPolicy,
) -> Result<LeakerSelection, InterpretError> {
    if iv.values.len() != spec.dim() {
        return Err(InterpretError::DimensionMismatch {
            expected: spec.dim(),
            actual: iv.values.len(),
        });
    }
    if policy.top_k == 0 {
        return Err(InterpretError::InvalidPolicy("top_k must be at least 1".into()));
    }
    let aligned = ImpactVector::new(iv.values.clone(), spec.layout())?;
    let s = shares(&aligned.offset_values());
    let mut offsets: Vec<usize> = ranked(&s)
        .into_iter()
        .take(policy.top_k)
        .filter(|&i| s[i] > 0.0 && s[i] >= policy.min_share)
        .collect();
    offsets.sort_unstable();
    Ok(LeakerSelection {
        mass_covered: offsets.iter().map(|&i| s[i]).fold(0.0, |a, b| a + b),
        concentration: concentration(&aligned, policy.top_k),
        offsets,
    })
}

fn fmt_value(v: f64) -> String {
    format!("{v:.11e}")
}

pub fn write_impact_csv<W: Write>(iv: &ImpactVector, w: &mut W) -> std::io::Result<()> {
    match iv.layout {
        ImpactLayout::Packetized { bytes_per_packet, .. } => {
            writeln!(w, "flat_index,packet,offset,importance")?;
            for (i, v) in iv.values.iter().enumerate() {
                writeln!(
                    w,
                    "{i},{},{},{}",
                    i / bytes_per_packet,
                    i % bytes_per_packet,
                    fmt_value(*v)
                )?;
            }
        }
        ImpactLayout::Flat => {
            writeln!(w, "flat_index,importance")?;
            for (i, v) in iv.values.iter().enumerate() {
                writeln!(w, "{i},{}", fmt_value(*v))?;
            }
        }
    }
    Ok(())
}

pub fn export_impact_csv(iv: &ImpactVector, path: &Path) -> Result<(), InterpretError> {
    let f = File::create(path).map_err(|e| InterpretError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_impact_csv(iv, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| InterpretError::io(path, e))
}

/// Reads the importance column back from a CSV written by [`export_impact_csv`].
pub fn read_impact_csv(path: &Path) -> Result<Vec<f64>, InterpretError> {
    let f = File::open(path).map_err(|e| InterpretError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate().skip(1) {
        let line = line.map_err(|e| InterpretError::io(path, e))?;
        let value = line
            .rsplit(',')
            .next()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| InterpretError::MalformedCsv {
                line_no: n + 1,
                reason: format!("no importance in {line:?}"),
            })?;
        out.push(value);
    }
    Ok(out)
}
