//! The acquisition manifest: a JSON document naming the scene bounds and
//! one entry per view (image path, pose parameters, optional time).
//!
//! Two conveniences mirror clinical metadata quirks: a view may omit
//! `sod_mm`, in which case half the source-to-detector distance is assumed,
//! and views may omit `time` (all of them or none), in which case times are
//! assigned uniformly in acquisition order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{assign_view_times, SceneBounds, ViewPose};
use crate::io::{read_image, FORMAT_VERSION};
use crate::renderer::Projection;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestView {
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub primary_angle_deg: f64,
    pub secondary_angle_deg: f64,
    pub sdd_mm: f64,
    /// Source-to-isocenter distance; defaults to `sdd_mm / 2` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sod_mm: Option<f64>,
    pub pixel_spacing_mm: f64,
    pub rows: usize,
    pub cols: usize,
    /// Normalized acquisition time; either all views carry one or none do.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub bounds: SceneBounds,
    pub views: Vec<ManifestView>,
}

impl Manifest {
    pub fn new(bounds: SceneBounds, views: Vec<ManifestView>) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            bounds,
            views,
        }
    }

    /// Resolve per-view poses, applying the `sod` default and uniform time
    /// assignment, and validating every invariant. Violations name the
    /// offending view.
    pub fn resolve_poses(&self) -> Result<Vec<ViewPose>> {
        if self.views.is_empty() {
            return Err(Error::Manifest("manifest lists no views".into()));
        }
        let with_time = self.views.iter().filter(|v| v.time.is_some()).count();
        if with_time != 0 && with_time != self.views.len() {
            let offender = self
                .views
                .iter()
                .position(|v| v.time.is_none())
                .unwrap_or(0);
            return Err(Error::ManifestView {
                view: offender,
                reason: "time is set on some views but missing here; \
                         either all views carry a time or none do"
                    .into(),
            });
        }
        let assigned = if with_time == 0 {
            Some(assign_view_times(self.views.len())?)
        } else {
            None
        };
        self.views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let pose = ViewPose {
                    primary_angle_deg: v.primary_angle_deg,
                    secondary_angle_deg: v.secondary_angle_deg,
                    sdd_mm: v.sdd_mm,
                    sod_mm: v.sod_mm.unwrap_or(v.sdd_mm / 2.0),
                    pixel_spacing_mm: v.pixel_spacing_mm,
                    rows: v.rows,
                    cols: v.cols,
                    time: match (&assigned, v.time) {
                        (Some(times), _) => times[i],
                        (None, Some(t)) => t,
                        (None, None) => unreachable!(),
                    },
                };
                pose.validate().map_err(|e| Error::ManifestView {
                    view: i,
                    reason: e.to_string(),
                })?;
                Ok(pose)
            })
            .collect()
    }
}

/// Parse a manifest document (structure only; images are not touched).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormatVersion {
            path: path.to_path_buf(),
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    SceneBounds::new(manifest.bounds.min, manifest.bounds.max)?;
    Ok(manifest)
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load a manifest and its referenced images as ready-to-train projections.
/// Every image must exist and match its declared detector extent.
pub fn load_projections(path: impl AsRef<Path>) -> Result<(SceneBounds, Vec<Projection>)> {
    let path = path.as_ref();
    let manifest = load_manifest(path)?;
    let poses = manifest.resolve_poses()?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut projections = Vec::with_capacity(poses.len());
    for (i, (view, pose)) in manifest.views.iter().zip(poses).enumerate() {
        let image = read_image(dir.join(&view.image)).map_err(|e| Error::ManifestView {
            view: i,
            reason: e.to_string(),
        })?;
        if image.rows != view.rows || image.cols != view.cols {
            return Err(Error::ManifestView {
                view: i,
                reason: format!(
                    "image {} is {}x{} but the manifest declares {}x{}",
                    view.image, image.rows, image.cols, view.rows, view.cols
                ),
            });
        }
        projections.push(Projection { pose, image });
    }
    Ok((manifest.bounds, projections))
}
