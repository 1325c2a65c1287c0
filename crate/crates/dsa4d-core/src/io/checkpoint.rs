//! Grid checkpoints: `{base}.json` header plus `{base}.raw` little-endian
//! f32 raw values in grid flattened order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SceneBounds;
use crate::grid::{Grid4D, GridDims};
use crate::io::volume::{read_f32_le, write_f32_le};
use crate::io::FORMAT_VERSION;
use crate::renderer::{PixelModel, RenderConfig};

/// Rendering-relevant settings carried alongside the raw values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub pixel_model: PixelModel,
    pub step_size_mm: f64,
}

impl CheckpointMeta {
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            step_size_mm: self.step_size_mm,
            pixel_model: self.pixel_model,
            i0: 1.0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    /// `[n_t, n_h, n_w, n_d]`.
    dims: [usize; 4],
    bounds: SceneBounds,
    activation_bias: f64,
    pixel_model: PixelModel,
    step_size_mm: f64,
    raw_file: String,
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(ext);
    PathBuf::from(p)
}

/// Save a grid checkpoint. Raw values are stored as 32-bit reals; values
/// already representable in f32 (as produced by a finished training run)
/// round-trip losslessly.
pub fn save_checkpoint(base: impl AsRef<Path>, grid: &Grid4D, meta: &CheckpointMeta) -> Result<()> {
    let base = base.as_ref();
    let raw = with_ext(base, ".raw");
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dims: [grid.dims.n_t, grid.dims.n_h, grid.dims.n_w, grid.dims.n_d],
        bounds: grid.bounds,
        activation_bias: grid.activation_bias,
        pixel_model: meta.pixel_model,
        step_size_mm: meta.step_size_mm,
        raw_file: raw
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let jp = with_ext(base, ".json");
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&jp, e))?;
    std::fs::write(&jp, text).map_err(|e| Error::io(&jp, e))?;
    let values: Vec<f32> = grid.raw.iter().map(|&v| v as f32).collect();
    write_f32_le(&raw, &values)
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(base: impl AsRef<Path>) -> Result<(Grid4D, CheckpointMeta)> {
    let base = base.as_ref();
    let jp = with_ext(base, ".json");
    let text = std::fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| Error::json(&jp, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormatVersion {
            path: jp,
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let rp = match jp.parent() {
        Some(dir) if !header.raw_file.is_empty() => dir.join(&header.raw_file),
        _ => with_ext(base, ".raw"),
    };
    let values = read_f32_le(&rp)?;
    let expected = header.dims.iter().product::<usize>();
    if values.len() != expected {
        return Err(Error::PayloadLengthMismatch {
            path: rp,
            header_len: expected,
            payload_len: values.len(),
        });
    }
    let grid = Grid4D {
        dims: GridDims::new(header.dims[0], header.dims[1], header.dims[2], header.dims[3]),
        bounds: header.bounds,
        raw: values.into_iter().map(|v| v as f64).collect(),
        activation_bias: header.activation_bias,
    };
    Ok((
        grid,
        CheckpointMeta {
            pixel_model: header.pixel_model,
            step_size_mm: header.step_size_mm,
        },
    ))
}
