//! Shared fixtures for the pipeline benchmarks.

use dsa4d_core::geometry::assign_view_times;
use dsa4d_core::{
    default_phantom, project_phantom, Grid4D, GridDims, PixelModel, Projection, RenderConfig,
    SceneBounds, ViewPose,
};

/// A desk-scale pose sweep over a half arc.
pub fn sweep_poses(count: usize, rows: usize) -> Vec<ViewPose> {
    let times = assign_view_times(count).expect("count >= 1");
    (0..count)
        .map(|i| ViewPose {
            primary_angle_deg: 180.0 * i as f64 / count as f64,
            secondary_angle_deg: 0.0,
            sdd_mm: 1000.0,
            sod_mm: 500.0,
            pixel_spacing_mm: 380.0 / rows as f64,
            rows,
            cols: rows,
            time: times[i],
        })
        .collect()
}

/// Noise-free phantom projections for the given poses.
pub fn phantom_views(poses: &[ViewPose]) -> Vec<Projection> {
    let field = default_phantom();
    let config = RenderConfig {
        step_size_mm: 0.125,
        pixel_model: PixelModel::Absorbance,
        i0: 1.0,
    };
    poses.iter().map(|p| project_phantom(&field, p, &config)).collect()
}

/// A grid with smoothly varying raw values for render benchmarks.
pub fn structured_grid(n: usize, n_t: usize) -> Grid4D {
    let bounds = SceneBounds::centered_cube(100.0);
    let mut grid = Grid4D::init(GridDims::new(n_t, n, n, n), bounds, 1e-4).expect("valid dims");
    let s = grid.dims.spatial_len();
    for h in 0..n {
        for w in 0..n {
            for d in 0..n {
                let p = grid.site_center(h, w, d);
                let r2 = p.coords.norm_squared();
                let v = 6.0 * (-r2 / 800.0).exp();
                for k in 0..n_t {
                    grid.raw[k * s + (h * n + w) * n + d] = v * (k + 1) as f64 / n_t as f64;
                }
            }
        }
    }
    grid
}
