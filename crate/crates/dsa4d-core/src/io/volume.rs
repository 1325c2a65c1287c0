//! Volume files: `{base}.json` header plus `{base}.raw` little-endian f32
//! payload in grid flattened order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SceneBounds;
use crate::io::FORMAT_VERSION;
use crate::volume::Volume;

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    format_version: u32,
    /// `[n_t, n_h, n_w, n_d]`.
    dims: [usize; 4],
    times: Vec<f64>,
    bounds: SceneBounds,
    raw_file: String,
}

fn json_path(base: &Path) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn raw_path(base: &Path) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".raw");
    PathBuf::from(p)
}

pub(crate) fn write_f32_le(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32_le(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write a volume as a header/payload pair at `{base}.json` / `{base}.raw`.
pub fn write_volume(base: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let base = base.as_ref();
    let raw = raw_path(base);
    let header = VolumeHeader {
        format_version: FORMAT_VERSION,
        dims: [
            volume.times.len(),
            volume.spatial[0],
            volume.spatial[1],
            volume.spatial[2],
        ],
        times: volume.times.clone(),
        bounds: volume.bounds,
        raw_file: raw
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let jp = json_path(base);
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&jp, e))?;
    std::fs::write(&jp, text).map_err(|e| Error::io(&jp, e))?;
    write_f32_le(&raw, &volume.data)
}

/// Read a volume pair written by [`write_volume`], verifying the declared
/// dimensions against the payload length.
pub fn read_volume(base: impl AsRef<Path>) -> Result<Volume> {
    let base = base.as_ref();
    let jp = json_path(base);
    let text = std::fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::json(&jp, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormatVersion {
            path: jp,
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let rp = match jp.parent() {
        Some(dir) if !header.raw_file.is_empty() => dir.join(&header.raw_file),
        _ => raw_path(base),
    };
    let data = read_f32_le(&rp)?;
    let expected = header.dims.iter().product::<usize>();
    if data.len() != expected {
        return Err(Error::PayloadLengthMismatch {
            path: rp,
            header_len: expected,
            payload_len: data.len(),
        });
    }
    if header.times.len() != header.dims[0] {
        return Err(Error::PayloadLengthMismatch {
            path: jp,
            header_len: header.dims[0],
            payload_len: header.times.len(),
        });
    }
    Ok(Volume {
        times: header.times,
        spatial: [header.dims[1], header.dims[2], header.dims[3]],
        bounds: header.bounds,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_volume() -> Volume {
        Volume {
            times: vec![0.0, 0.5, 0.75, 1.0],
            spatial: [2, 2, 2],
            bounds: SceneBounds::centered_cube(10.0),
            data: (0..32).map(|i| i as f32 * 0.125).collect(),
        }
    }

    #[test]
    fn volume_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("vol");
        let v = sample_volume();
        write_volume(&base, &v).unwrap();
        let back = read_volume(&base).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn four_dim_header_records_time_axis() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("vol4");
        write_volume(&base, &sample_volume()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("vol4.json")).unwrap();
        let header: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(header["dims"], serde_json::json!([4, 2, 2, 2]));
        assert_eq!(header["format_version"], 1);
    }

    #[test]
    fn length_mismatch_names_both_sizes() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("vol");
        write_volume(&base, &sample_volume()).unwrap();
        // Truncate the payload.
        let raw = dir.path().join("vol.raw");
        let bytes = std::fs::read(&raw).unwrap();
        std::fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
        match read_volume(&base) {
            Err(Error::PayloadLengthMismatch {
                header_len,
                payload_len,
                ..
            }) => {
                assert_eq!(header_len, 32);
                assert_eq!(payload_len, 31);
            }
            other => panic!("unexpected result: {other:?}"),
        }
    }

    #[test]
    fn unsupported_version_rejected() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("vol");
        write_volume(&base, &sample_volume()).unwrap();
        let jp = dir.path().join("vol.json");
        let text = std::fs::read_to_string(&jp)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        std::fs::write(&jp, text).unwrap();
        assert!(matches!(
            read_volume(&base),
            Err(Error::UnsupportedFormatVersion { found: 9, .. })
        ));
    }
}
