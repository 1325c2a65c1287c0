//! C-arm acquisition geometry: clinical pose parameters to world-space
//! cameras, and rays through detector pixels.
//!
//! World frame convention: the isocenter is the origin and +z is the world
//! vertical axis. With both angles zero the source sits at `(0, -sod, 0)`,
//! the detector normal is +y, the detector column axis is +x and the row
//! axis is +z (top row towards +z). `primary_angle_deg` rotates the whole
//! rig about +z; `secondary_angle_deg` then rotates it about the rig's
//! rotated +x axis. The cone-beam source/detector pair behaves exactly like
//! a pinhole camera looking through the isocenter.

use nalgebra::{Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One acquisition view: angles, distances, detector geometry, normalized time.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPose {
    /// Rotation about the world vertical axis, degrees.
    pub primary_angle_deg: f64,
    /// Elevation about the rotated horizontal axis, applied after primary, degrees.
    pub secondary_angle_deg: f64,
    /// Source-to-detector distance, mm.
    pub sdd_mm: f64,
    /// Source-to-isocenter distance, mm.
    pub sod_mm: f64,
    /// Isotropic detector pixel spacing, mm per pixel.
    pub pixel_spacing_mm: f64,
    pub rows: usize,
    pub cols: usize,
    /// Normalized acquisition time in [0, 1].
    pub time: f64,
}

impl ViewPose {
    pub fn validate(&self) -> Result<()> {
        if !(self.sdd_mm > self.sod_mm && self.sod_mm > 0.0) {
            return Err(Error::InvalidPose(format!(
                "need sdd > sod > 0, got sdd={} sod={}",
                self.sdd_mm, self.sod_mm
            )));
        }
        if !(self.pixel_spacing_mm > 0.0) {
            return Err(Error::InvalidPose(format!(
                "pixel_spacing must be positive, got {}",
                self.pixel_spacing_mm
            )));
        }
        if self.rows < 1 || self.cols < 1 {
            return Err(Error::InvalidPose(format!(
                "detector needs at least one pixel, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(0.0..=1.0).contains(&self.time) || !self.time.is_finite() {
            return Err(Error::InvalidPose(format!(
                "time must lie in [0, 1], got {}",
                self.time
            )));
        }
        Ok(())
    }
}

/// Axis-aligned world-space box housing the reconstruction volume, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl SceneBounds {
    pub fn new(min: Point3<f64>, max: Point3<f64>) -> Result<Self> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(Error::DegenerateBounds);
        }
        Ok(SceneBounds { min, max })
    }

    /// Cube of the given edge length centered on the isocenter.
    pub fn centered_cube(edge_mm: f64) -> Self {
        let h = edge_mm / 2.0;
        SceneBounds {
            min: Point3::new(-h, -h, -h),
            max: Point3::new(h, h, h),
        }
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Slab intersection of the forward half-ray with the box.
    ///
    /// Returns `(t_near, t_far)` in mm with `t_near >= 0`, or `None` when the
    /// ray misses the box (including a box entirely behind the origin).
    pub fn clip_ray(&self, origin: &Point3<f64>, direction: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t_near = 0.0f64;
        let mut t_far = f64::INFINITY;
        for axis in 0..3 {
            let o = origin[axis];
            let d = direction[axis];
            let lo = self.min[axis];
            let hi = self.max[axis];
            if d.abs() < 1e-300 {
                if o < lo || o > hi {
                    return None;
                }
            } else {
                let inv = 1.0 / d;
                let (t0, t1) = if inv >= 0.0 {
                    ((lo - o) * inv, (hi - o) * inv)
                } else {
                    ((hi - o) * inv, (lo - o) * inv)
                };
                t_near = t_near.max(t0);
                t_far = t_far.min(t1);
                if t_near > t_far {
                    return None;
                }
            }
        }
        Some((t_near, t_far))
    }
}

/// A source -> pixel ray, clipped against the scene bounds.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Point3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
    /// `(t_near, t_far)` in mm along the ray, `None` when the ray misses.
    pub span: Option<(f64, f64)>,
}

impl Ray {
    pub fn hits(&self) -> bool {
        self.span.is_some()
    }

    pub fn point_at(&self, t: f64) -> Point3<f64> {
        self.origin + self.direction * t
    }
}

/// World-space camera realized from a [`ViewPose`]: point source plus an
/// oriented flat detector.
#[derive(Debug, Clone)]
pub struct Camera {
    pub source: Point3<f64>,
    pub detector_center: Point3<f64>,
    /// Unit vector along increasing detector row index.
    pub row_axis: Vector3<f64>,
    /// Unit vector along increasing detector column index.
    pub col_axis: Vector3<f64>,
    pub pixel_spacing_mm: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Camera {
    /// Unit normal from the source towards the detector.
    pub fn normal(&self) -> Vector3<f64> {
        (self.detector_center - self.source).normalize()
    }

    /// World position of the physical center of pixel `(row, col)`.
    ///
    /// Pixel centers sit at `(col + 0.5, row + 0.5)` in pixel units with the
    /// detector center at the midpoint of the pixel array.
    pub fn pixel_center(&self, row: usize, col: usize) -> Point3<f64> {
        let u = (col as f64 + 0.5 - self.cols as f64 / 2.0) * self.pixel_spacing_mm;
        let v = (row as f64 + 0.5 - self.rows as f64 / 2.0) * self.pixel_spacing_mm;
        self.detector_center + self.col_axis * u + self.row_axis * v
    }

    /// Ray from the source through the center of pixel `(row, col)`,
    /// clipped against `bounds`.
    pub fn pixel_ray(&self, row: usize, col: usize, bounds: &SceneBounds) -> Ray {
        let direction = (self.pixel_center(row, col) - self.source).normalize();
        Ray {
            origin: self.source,
            direction,
            span: bounds.clip_ray(&self.source, &direction),
        }
    }
}

/// Realize the world-space camera for a pose. Total for any valid pose.
pub fn pose_to_camera(pose: &ViewPose) -> Camera {
    let primary = Rotation3::from_axis_angle(&Vector3::z_axis(), pose.primary_angle_deg.to_radians());
    let secondary_axis = nalgebra::Unit::new_normalize(primary * Vector3::x());
    let rig = Rotation3::from_axis_angle(&secondary_axis, pose.secondary_angle_deg.to_radians()) * primary;

    let source = Point3::from(rig * Vector3::new(0.0, -pose.sod_mm, 0.0));
    let normal = rig * Vector3::y();
    let detector_center = source + normal * pose.sdd_mm;
    Camera {
        source,
        detector_center,
        row_axis: rig * Vector3::z(),
        col_axis: rig * Vector3::x(),
        pixel_spacing_mm: pose.pixel_spacing_mm,
        rows: pose.rows,
        cols: pose.cols,
    }
}

/// Rays through the requested pixels (all pixels when `pixel_subset` is `None`),
/// each paired with its `(row, col)` index.
pub fn generate_rays(
    pose: &ViewPose,
    bounds: &SceneBounds,
    pixel_subset: Option<&[(usize, usize)]>,
) -> Result<Vec<(Ray, (usize, usize))>> {
    let camera = pose_to_camera(pose);
    match pixel_subset {
        Some(pixels) => pixels
            .iter()
            .map(|&(row, col)| {
                if row >= pose.rows || col >= pose.cols {
                    return Err(Error::PixelOutOfRange {
                        row,
                        col,
                        rows: pose.rows,
                        cols: pose.cols,
                    });
                }
                Ok((camera.pixel_ray(row, col, bounds), (row, col)))
            })
            .collect(),
        None => {
            let mut rays = Vec::with_capacity(pose.rows * pose.cols);
            for row in 0..pose.rows {
                for col in 0..pose.cols {
                    rays.push((camera.pixel_ray(row, col, bounds), (row, col)));
                }
            }
            Ok(rays)
        }
    }
}

/// Uniform normalized acquisition times for `view_count` views taken in
/// order: view `j` of `M` gets `j / (M - 1)`; a single view gets 0.
pub fn assign_view_times(view_count: usize) -> Result<Vec<f64>> {
    if view_count == 0 {
        return Err(Error::NoViews);
    }
    if view_count == 1 {
        return Ok(vec![0.0]);
    }
    let last = (view_count - 1) as f64;
    Ok((0..view_count).map(|j| j as f64 / last).collect())
}
