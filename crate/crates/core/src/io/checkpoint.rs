//! Checkpoint file: one line of JSON header terminated by `\n`, then the parameters as
//! little-endian f32 in blocks. Each block holds one scalar per vertex in x-fastest order.
//!
//! Layered fields store density blocks for classes `0..M`, then one color block per class
//! with RGB interleaved per vertex. Logit fields store the density block, the RGB block
//! and then one logit block per class.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::field::{Aabb, ClassSet, Grid, SnerfField, VoxelField};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// One density and color per class.
    Layered,
    /// One density and color, plus per-class logits.
    Logit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Activations {
    pub density: String,
    pub color: String,
}

impl Default for Activations {
    fn default() -> Self {
        Activations {
            density: "softplus".into(),
            color: "sigmoid".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: FieldKind,
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    pub class_names: Vec<String>,
    pub background_index: usize,
    pub activations: Activations,
    /// Number of f32 values following the header.
    pub payload_len: usize,
    /// Resolved training configuration, if any.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedField {
    Layered(VoxelField),
    Logit(SnerfField),
}

impl TrainedField {
    pub fn kind(&self) -> FieldKind {
        match self {
            TrainedField::Layered(_) => FieldKind::Layered,
            TrainedField::Logit(_) => FieldKind::Logit,
        }
    }

    pub fn grid(&self) -> &Grid {
        match self {
            TrainedField::Layered(f) => f.grid(),
            TrainedField::Logit(f) => f.grid(),
        }
    }

    pub fn class_set(&self) -> &ClassSet {
        match self {
            TrainedField::Layered(f) => f.class_set(),
            TrainedField::Logit(f) => f.class_set(),
        }
    }
}

/// `(first channel, channels per vertex)` of each block, in file order.
fn blocks(kind: FieldKind, m: usize) -> Vec<(usize, usize)> {
    match kind {
        FieldKind::Layered => (0..m).map(|i| (i, 1)).chain((0..m).map(|i| (m + 3 * i, 3))).collect(),
        FieldKind::Logit => [(0, 1), (1, 3)].into_iter().chain((0..m).map(|i| (4 + i, 1))).collect(),
    }
}

pub fn encode_checkpoint(field: &TrainedField, config: &serde_json::Value) -> Vec<u8> {
    let grid = field.grid();
    let classes = field.class_set();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: field.kind(),
        resolution: grid.resolution(),
        bounds: grid.bounds(),
        class_names: classes.names().to_vec(),
        background_index: classes.background_index(),
        activations: Activations::default(),
        payload_len: grid.data().len(),
        config: config.clone(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(4 * grid.data().len());
    let c = grid.channels();
    for (first, width) in blocks(field.kind(), classes.m()) {
        for v in 0..grid.vertex_count() {
            for k in 0..width {
                out.extend_from_slice(&(grid.data()[v * c + first + k] as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, TrainedField)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint format version {}", header.format_version),
        ));
    }
    if header.activations != Activations::default() {
        return Err(Error::format(path, "unsupported activation functions"));
    }
    let classes = ClassSet::new(header.class_names.clone(), header.background_index)?;
    let m = classes.m();
    let channels = match header.kind {
        FieldKind::Layered => 4 * m,
        FieldKind::Logit => 4 + m,
    };
    let [nx, ny, nz] = header.resolution;
    let vertices = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or_else(|| Error::format(path, "resolution overflows"))?;
    let payload = &bytes[newline + 1..];
    if header.payload_len != vertices * channels || payload.len() != 4 * header.payload_len {
        return Err(Error::format(
            path,
            format!(
                "payload holds {} bytes, header implies {}",
                payload.len(),
                4 * vertices * channels
            ),
        ));
    }
    let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut data = vec![0.0; vertices * channels];
    for (first, width) in blocks(header.kind, m) {
        for v in 0..vertices {
            for k in 0..width {
                data[v * channels + first + k] = values.next().expect("length checked");
            }
        }
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::format(path, "checkpoint holds non-finite parameters"));
    }
    let grid = Grid::from_data(header.resolution, header.bounds, channels, data)?;
    let field = match header.kind {
        FieldKind::Layered => TrainedField::Layered(VoxelField::from_grid(grid, classes)?),
        FieldKind::Logit => TrainedField::Logit(SnerfField::from_grid(grid, classes)?),
    };
    Ok((header, field))
}

pub fn save_checkpoint(path: &Path, field: &TrainedField, config: &serde_json::Value) -> Result<()> {
    write_file(path, &encode_checkpoint(field, config))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, TrainedField)> {
    decode_checkpoint(&read_file(path)?, path)
}
