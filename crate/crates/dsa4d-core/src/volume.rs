//! Density volumes: one or more time frames on a spatial lattice.

use crate::error::{Error, Result};
use crate::geometry::SceneBounds;

/// A 3D or 4D density volume. Frames are stored in [`crate::grid::Grid4D`]
/// flattened order, `((t * n_h + h) * n_w + w) * n_d + d`, as 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// Normalized time of each stored frame.
    pub times: Vec<f64>,
    /// `[n_h, n_w, n_d]`.
    pub spatial: [usize; 3],
    pub bounds: SceneBounds,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn frame_len(&self) -> usize {
        self.spatial[0] * self.spatial[1] * self.spatial[2]
    }

    pub fn frame(&self, t_index: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t_index * n..(t_index + 1) * n]
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn same_shape(&self, other: &Volume) -> Result<()> {
        if self.spatial != other.spatial || self.times.len() != other.times.len() {
            return Err(Error::ShapeMismatch {
                left: std::iter::once(self.times.len())
                    .chain(self.spatial.iter().cloned())
                    .collect(),
                right: std::iter::once(other.times.len())
                    .chain(other.spatial.iter().cloned())
                    .collect(),
            });
        }
        Ok(())
    }
}
