//! Checkpoint byte format: a text index plus a little-endian f32 blob.
//!
//! The index starts with `# psmmlab-checkpoint v1`, followed by
//! `# key=value` metadata lines, then one row per tensor:
//! `name dtype shape offset byte_length` with a comma-separated shape.
//! The blob concatenates the tensors in index order. Values are stored
//! as f32; loading widens back to f64, so save/load/save is
//! byte-stable. This module is IO-free; the companion crate writes the
//! two artifacts to disk.

use crate::graph::Graph;
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

pub const HEADER: &str = "# psmmlab-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    BadHeader,
    ParseLine(String),
    UnsupportedDtype(String),
    RangeOutOfBounds { name: String },
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    MissingParam(String),
    UnknownParam(String),
    LengthMismatch { name: String },
    DuplicateName(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadHeader => write!(f, "missing checkpoint header"),
            CheckpointError::ParseLine(l) => write!(f, "unparseable index line {l:?}"),
            CheckpointError::UnsupportedDtype(d) => write!(f, "unsupported dtype {d:?}"),
            CheckpointError::RangeOutOfBounds { name } => {
                write!(f, "tensor {name:?} range exceeds the weight blob")
            }
            CheckpointError::ShapeMismatch { name, expected, got } => {
                write!(f, "tensor {name:?} has shape {got:?}, expected {expected:?}")
            }
            CheckpointError::MissingParam(n) => write!(f, "checkpoint lacks parameter {n:?}"),
            CheckpointError::UnknownParam(n) => {
                write!(f, "checkpoint has unknown parameter {n:?}")
            }
            CheckpointError::LengthMismatch { name } => {
                write!(f, "tensor {name:?} byte length does not match its shape")
            }
            CheckpointError::DuplicateName(n) => write!(f, "duplicate tensor name {n:?}"),
        }
    }
}

impl core::error::Error for CheckpointError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointIndex {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<IndexEntry>,
}

impl CheckpointIndex {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Serializes tensors in the given order.
pub fn encode(tensors: &[(&str, &Tensor)], meta: &[(&str, &str)]) -> (String, Vec<u8>) {
    let mut index = String::from(HEADER);
    index.push('\n');
    for (k, v) in meta {
        index.push_str(&format!("# {k}={v}\n"));
    }
    let mut blob = Vec::new();
    for (name, tensor) in tensors {
        let offset = blob.len();
        for &v in tensor.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let shape: Vec<String> = tensor.shape().iter().map(|e| e.to_string()).collect();
        index.push_str(&format!(
            "{name} f32 {} {offset} {}\n",
            shape.join(","),
            blob.len() - offset
        ));
    }
    (index, blob)
}

pub fn parse_index(text: &str) -> Result<CheckpointIndex, CheckpointError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(CheckpointError::BadHeader);
    }
    let mut meta = Vec::new();
    let mut entries: Vec<IndexEntry> = Vec::new();
    for raw in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.push((k.to_string(), v.to_string()));
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(CheckpointError::ParseLine(line.to_string()));
        }
        if fields[1] != "f32" {
            return Err(CheckpointError::UnsupportedDtype(fields[1].to_string()));
        }
        let mut shape = Vec::new();
        for tok in fields[2].split(',') {
            shape.push(
                tok.parse::<usize>()
                    .map_err(|_| CheckpointError::ParseLine(line.to_string()))?,
            );
        }
        let offset: usize =
            fields[3].parse().map_err(|_| CheckpointError::ParseLine(line.to_string()))?;
        let byte_len: usize =
            fields[4].parse().map_err(|_| CheckpointError::ParseLine(line.to_string()))?;
        let name = fields[0].to_string();
        if shape.iter().product::<usize>() * 4 != byte_len {
            return Err(CheckpointError::LengthMismatch { name });
        }
        if entries.iter().any(|e| e.name == name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        entries.push(IndexEntry { name, shape, offset, byte_len });
    }
    Ok(CheckpointIndex { meta, entries })
}

pub fn decode_entry(entry: &IndexEntry, blob: &[u8]) -> Result<Tensor, CheckpointError> {
    let end = entry.offset.checked_add(entry.byte_len);
    let Some(end) = end else {
        return Err(CheckpointError::RangeOutOfBounds { name: entry.name.clone() });
    };
    if end > blob.len() {
        return Err(CheckpointError::RangeOutOfBounds { name: entry.name.clone() });
    }
    let bytes = &blob[entry.offset..end];
    let mut data = Vec::with_capacity(entry.byte_len / 4);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    Tensor::from_vec(&entry.shape, data)
        .map_err(|_| CheckpointError::LengthMismatch { name: entry.name.clone() })
}

/// Serializes every graph parameter (trainable or not) in registration
/// order.
pub fn export_graph(graph: &Graph, meta: &[(&str, &str)]) -> (String, Vec<u8>) {
    let pairs: Vec<(&str, &Tensor)> = graph
        .param_ids()
        .map(|id| {
            let e = graph.param(id);
            (e.name(), e.value())
        })
        .collect();
    encode(&pairs, meta)
}

/// Loads a checkpoint into a graph with an identical parameter set.
/// Strict: a missing, extra, or reshaped tensor is an error.
pub fn import_graph(
    graph: &mut Graph,
    index: &CheckpointIndex,
    blob: &[u8],
) -> Result<(), CheckpointError> {
    for entry in &index.entries {
        if graph.param_id(&entry.name).is_none() {
            return Err(CheckpointError::UnknownParam(entry.name.clone()));
        }
    }
    let ids: Vec<_> = graph.param_ids().collect();
    for id in ids {
        let (name, expected) = {
            let e = graph.param(id);
            (e.name().to_string(), e.value().shape().to_vec())
        };
        let entry = index
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
        if entry.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected,
                got: entry.shape.clone(),
            });
        }
        let tensor = decode_entry(entry, blob)?;
        *graph.param_mut(id).value_mut() = tensor;
    }
    Ok(())
}
