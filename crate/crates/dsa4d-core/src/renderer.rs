//! Differentiable ray marching against the voxel grid.
//!
//! A ray is sampled at regular intervals between its bounds intersection,
//! densities are queried from the grid, and the attenuation line integral
//! `L = sum(sigma_i * delta_i)` composites the pixel. Two pixel models are
//! supported:
//!
//! - `Absorbance`: `P = i0 * (1 - exp(-L))`, the attenuated fraction of the
//!   source intensity. Bounded, zero in empty space, vessels render bright
//!   on a black background. The default for DSA-style imagery.
//! - `LineIntegral`: `P = L`, CT-style raw projections.
//!
//! The backward pass is exact: every pixel gradient is chained through the
//! pixel model, the activation derivative and the interpolation weights of
//! each contributing raw entry.

use nalgebra::Point3;
use rayon::prelude::*;

use crate::geometry::{pose_to_camera, Ray, ViewPose};
use crate::grid::{Grid4D, OccupancyMask};
use crate::image::Image;
use crate::volume::Volume;

/// How a composited line integral maps to a stored pixel value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelModel {
    Absorbance,
    LineIntegral,
}

impl std::fmt::Display for PixelModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PixelModel::Absorbance => write!(f, "absorbance"),
            PixelModel::LineIntegral => write!(f, "line_integral"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderConfig {
    /// Marching step, mm.
    pub step_size_mm: f64,
    pub pixel_model: PixelModel,
    /// Source intensity; images are normalized so 1.0 is the working default.
    pub i0: f64,
}

impl RenderConfig {
    /// Default configuration for a grid: half the minimum voxel pitch.
    pub fn for_grid(grid: &Grid4D, pixel_model: PixelModel) -> Self {
        RenderConfig {
            step_size_mm: 0.5 * grid.min_pitch(),
            pixel_model,
            i0: 1.0,
        }
    }
}

/// One query point along a ray.
#[derive(Debug, Clone, Copy)]
pub struct SamplePoint {
    pub position: Point3<f64>,
    /// Distance assigned to this point, mm; the final segment is truncated.
    pub delta: f64,
    /// Marked by the occupancy mask: treat density as zero, propagate no
    /// gradient.
    pub skipped: bool,
}

/// Regularly spaced samples along a ray between its bounds intersection.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub points: Vec<SamplePoint>,
}

/// Iterator over `(t_mid, delta)` marching segments; each segment is
/// sampled at its midpoint so every query point stays inside the chord.
#[inline]
fn march_segments(t_near: f64, t_far: f64, step: f64) -> impl Iterator<Item = (f64, f64)> {
    let chord = t_far - t_near;
    let count = (chord / step).ceil().max(1.0) as usize;
    (0..count).map(move |k| {
        let lo = k as f64 * step;
        let delta = (chord - lo).min(step);
        (t_near + lo + 0.5 * delta, delta)
    })
}

/// Sample a ray at regular intervals; points falling in mask-empty voxels
/// are flagged skipped. Miss rays yield an empty list.
pub fn sample_ray(ray: &Ray, config: &RenderConfig, mask: Option<&OccupancyMask>) -> RaySamples {
    let Some((t0, t1)) = ray.span else {
        return RaySamples { points: Vec::new() };
    };
    let points = march_segments(t0, t1, config.step_size_mm)
        .map(|(t, delta)| {
            let position = ray.point_at(t);
            let skipped = mask.map_or(false, |m| !m.occupied_at(&position));
            SamplePoint {
                position,
                delta,
                skipped,
            }
        })
        .collect();
    RaySamples { points }
}

/// Pixel value plus `d(pixel)/d(raw)` for every contributing raw entry,
/// merged per entry.
#[derive(Debug, Clone)]
pub struct PixelGradient {
    pub value: f64,
    pub d_raw: Vec<(usize, f64)>,
}

pub(crate) fn finish_pixel(line_integral: f64, config: &RenderConfig) -> (f64, f64) {
    match config.pixel_model {
        PixelModel::Absorbance => {
            let transmittance = (-line_integral).exp();
            (config.i0 * (1.0 - transmittance), config.i0 * transmittance)
        }
        PixelModel::LineIntegral => (line_integral, 1.0),
    }
}

/// Composite a pixel from pre-sampled points.
pub fn render_pixel(samples: &RaySamples, grid: &Grid4D, t: f64, config: &RenderConfig) -> f64 {
    let mut line_integral = 0.0;
    for p in &samples.points {
        if p.skipped {
            continue;
        }
        line_integral += grid.query_density(&p.position, t).sigma * p.delta;
    }
    finish_pixel(line_integral, config).0
}

/// Composite a pixel and return the exact gradient record.
///
/// `d(pixel)/d(raw_j) = d(pixel)/dL * delta_i * sigmoid(raw_interp + bias) * w_ij`
/// summed over sample points `i` touching entry `j`.
pub fn render_pixel_grad(
    samples: &RaySamples,
    grid: &Grid4D,
    t: f64,
    config: &RenderConfig,
) -> PixelGradient {
    let mut line_integral = 0.0;
    let mut per_point = Vec::with_capacity(samples.points.len());
    for p in &samples.points {
        if p.skipped {
            continue;
        }
        let q = grid.query_density(&p.position, t);
        line_integral += q.sigma * p.delta;
        per_point.push((p.delta, q));
    }
    let (value, dpixel_dl) = finish_pixel(line_integral, config);

    let mut merged = std::collections::HashMap::new();
    for (delta, q) in &per_point {
        let scale = dpixel_dl * delta * q.dsigma_draw;
        for &(idx, w) in q.taps.as_slice() {
            *merged.entry(idx).or_insert(0.0) += scale * w;
        }
    }
    let mut d_raw: Vec<(usize, f64)> = merged.into_iter().collect();
    d_raw.sort_unstable_by_key(|&(idx, _)| idx);
    PixelGradient { value, d_raw }
}

/// Batch-oriented forward+backward pass used by the trainer: marches the
/// ray once, then scatters `coeff * d(pixel)/d(raw_j)` through `sink`.
/// `coeff` is computed by the caller from the forward value (for the mean
/// squared error loss it is `2 * (prediction - target) / batch_size`).
///
/// Returns the pixel value.
pub fn render_pixel_scatter(
    ray: &Ray,
    grid: &Grid4D,
    t: f64,
    config: &RenderConfig,
    mask: Option<&OccupancyMask>,
    scratch: &mut RayScratch,
    coeff_of_value: impl FnOnce(f64) -> f64,
    sink: &mut impl FnMut(usize, f64),
) -> f64 {
    let Some((t0, t1)) = ray.span else {
        let (value, _) = finish_pixel(0.0, config);
        return value;
    };
    scratch.points.clear();
    let mut line_integral = 0.0;
    for (tm, delta) in march_segments(t0, t1, config.step_size_mm) {
        let position = ray.point_at(tm);
        if let Some(m) = mask {
            if !m.occupied_at(&position) {
                continue;
            }
        }
        let q = grid.query_density(&position, t);
        line_integral += q.sigma * delta;
        if !q.taps.is_empty() {
            scratch.points.push((delta * q.dsigma_draw, q.taps));
        }
    }
    let (value, dpixel_dl) = finish_pixel(line_integral, config);
    let coeff = coeff_of_value(value) * dpixel_dl;
    if coeff != 0.0 {
        for (scale, taps) in &scratch.points {
            let k = coeff * scale;
            for &(idx, w) in taps.as_slice() {
                sink(idx, k * w);
            }
        }
    }
    value
}

/// Reusable per-worker buffer for [`render_pixel_scatter`].
#[derive(Default)]
pub struct RayScratch {
    points: Vec<(f64, crate::grid::TapList)>,
}

/// A detector image paired with the pose it was rendered or acquired at.
#[derive(Debug, Clone)]
pub struct Projection {
    pub pose: ViewPose,
    pub image: Image,
}

/// Render the full detector image for a pose at the pose's time (clamped to
/// `[0, 1]`). Pixels whose rays miss the bounds render to zero under the
/// absorbance model (and to a zero line integral otherwise).
pub fn render_view(pose: &ViewPose, grid: &Grid4D, config: &RenderConfig) -> Projection {
    let camera = pose_to_camera(pose);
    let mut image = Image::zeros(pose.rows, pose.cols);
    let cols = pose.cols;
    let bounds = grid.bounds;
    image
        .data
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(row, out)| {
            for (col, px) in out.iter_mut().enumerate() {
                let ray = camera.pixel_ray(row, col, &bounds);
                let samples = sample_ray(&ray, config, None);
                *px = render_pixel(&samples, grid, pose.time, config);
            }
        });
    Projection {
        pose: pose.clone(),
        image,
    }
}

/// Activated densities sampled on a cell-centered lattice over the grid's
/// bounds at the requested resolution and time.
pub fn export_volume(grid: &Grid4D, t: f64, dims: [usize; 3]) -> Volume {
    let [nh, nw, nd] = dims;
    let e = grid.bounds.extent();
    let pitch = [e.x / nh as f64, e.y / nw as f64, e.z / nd as f64];
    let mut data = vec![0f32; nh * nw * nd];
    data.par_chunks_mut(nw * nd).enumerate().for_each(|(h, slab)| {
        let x = grid.bounds.min.x + (h as f64 + 0.5) * pitch[0];
        for w in 0..nw {
            let y = grid.bounds.min.y + (w as f64 + 0.5) * pitch[1];
            for d in 0..nd {
                let z = grid.bounds.min.z + (d as f64 + 0.5) * pitch[2];
                slab[w * nd + d] = grid.query_density(&Point3::new(x, y, z), t).sigma as f32;
            }
        }
    });
    Volume {
        times: vec![t.clamp(0.0, 1.0)],
        spatial: dims,
        bounds: grid.bounds,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SceneBounds;
    use crate::grid::{softplus_inv, GridDims};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_ray(bounds: &SceneBounds) -> Ray {
        let origin = Point3::new(0.0, bounds.min.y - 5.0, 0.0);
        let direction = Vector3::y();
        Ray {
            origin,
            direction,
            span: bounds.clip_ray(&origin, &direction),
        }
    }

    fn uniform_grid(sigma: f64, edge: f64) -> Grid4D {
        let mut g = Grid4D::init(GridDims::new(1, 4, 4, 4), SceneBounds::centered_cube(edge), 1e-4).unwrap();
        g.activation_bias = 0.0;
        let raw = softplus_inv(sigma);
        for v in g.raw.iter_mut() {
            *v = raw;
        }
        g
    }

    fn cfg(step: f64, model: PixelModel) -> RenderConfig {
        RenderConfig {
            step_size_mm: step,
            pixel_model: model,
            i0: 1.0,
        }
    }

    #[test]
    fn sampling_exact_division() {
        let bounds = SceneBounds::centered_cube(2.0);
        let ray = axis_ray(&bounds);
        let s = sample_ray(&ray, &cfg(0.5, PixelModel::Absorbance), None);
        assert_eq!(s.points.len(), 4);
        for p in &s.points {
            assert_relative_eq!(p.delta, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampling_truncated_tail() {
        let bounds = SceneBounds::new(
            Point3::new(-1.0, 0.0, -1.0),
            Point3::new(1.0, 2.2, 1.0),
        )
        .unwrap();
        let origin = Point3::new(0.0, -1.0, 0.0);
        let direction = Vector3::y();
        let ray = Ray {
            origin,
            direction,
            span: bounds.clip_ray(&origin, &direction),
        };
        let s = sample_ray(&ray, &cfg(0.5, PixelModel::Absorbance), None);
        let deltas: Vec<f64> = s.points.iter().map(|p| p.delta).collect();
        assert_eq!(deltas.len(), 5);
        for d in &deltas[..4] {
            assert_relative_eq!(*d, 0.5, epsilon = 1e-12);
        }
        assert_relative_eq!(deltas[4], 0.2, epsilon = 1e-12);

        // Deltas sum to the chord, points strictly increase and stay inside.
        let total: f64 = deltas.iter().sum();
        assert_relative_eq!(total, 2.2, epsilon = 1e-9);
        for pair in s.points.windows(2) {
            assert!(pair[1].position.y > pair[0].position.y);
        }
        assert!(s.points.last().unwrap().position.y < 2.2);
    }

    #[test]
    fn miss_ray_has_no_samples_and_zero_pixel() {
        let bounds = SceneBounds::centered_cube(2.0);
        let origin = Point3::new(10.0, -5.0, 0.0);
        let direction = Vector3::y();
        let ray = Ray {
            origin,
            direction,
            span: bounds.clip_ray(&origin, &direction),
        };
        assert!(!ray.hits());
        let config = cfg(0.5, PixelModel::Absorbance);
        let s = sample_ray(&ray, &config, None);
        assert!(s.points.is_empty());
        let g = uniform_grid(0.1, 2.0);
        assert_eq!(render_pixel(&s, &g, 0.0, &config), 0.0);
    }

    #[test]
    fn zero_density_renders_zero() {
        let bounds = SceneBounds::centered_cube(10.0);
        let mut g = Grid4D::init(GridDims::new(1, 2, 2, 2), bounds, 1e-4).unwrap();
        g.activation_bias = -745.0; // activate ~ 0 within f64
        let ray = axis_ray(&bounds);
        let config = cfg(0.5, PixelModel::Absorbance);
        let s = sample_ray(&ray, &config, None);
        let p = render_pixel(&s, &g, 0.0, &config);
        assert!(p.abs() < 1e-12);
    }

    #[test]
    fn homogeneous_medium_closed_form() {
        // sigma = 0.1/mm over a 10 mm chord: L = 1, P = 1 - exp(-1).
        let g = uniform_grid(0.1, 10.0);
        let ray = axis_ray(&g.bounds);

        let config = cfg(0.5, PixelModel::LineIntegral);
        let s = sample_ray(&ray, &config, None);
        let l = render_pixel(&s, &g, 0.0, &config);
        assert!((l - 1.0).abs() < 1e-9);

        let config = cfg(0.5, PixelModel::Absorbance);
        let p = render_pixel(&s, &g, 0.0, &config);
        assert!((p - (1.0 - (-1.0f64).exp())).abs() < 1e-6);
    }

    #[test]
    fn all_empty_mask_skips_everything() {
        let g = uniform_grid(0.5, 10.0);
        let mask = OccupancyMask {
            bounds: g.bounds,
            spatial: [4, 4, 4],
            occupied: vec![false; 64],
        };
        let ray = axis_ray(&g.bounds);
        let config = cfg(0.5, PixelModel::Absorbance);
        let s = sample_ray(&ray, &config, Some(&mask));
        assert!(s.points.iter().all(|p| p.skipped));
        assert_eq!(render_pixel(&s, &g, 0.0, &config), 0.0);
    }

    fn fd_check(model: PixelModel, seed: u64) -> f64 {
        let bounds = SceneBounds::centered_cube(8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Grid4D::init(GridDims::new(2, 4, 4, 4), bounds, 1e-4).unwrap();
        g.activation_bias = 0.0;
        for v in g.raw.iter_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        let origin = Point3::new(rng.gen_range(-3.0..3.0), -20.0, rng.gen_range(-3.0..3.0));
        let target = Point3::new(rng.gen_range(-3.0..3.0), 20.0, rng.gen_range(-3.0..3.0));
        let direction = (target - origin).normalize();
        let ray = Ray {
            origin,
            direction,
            span: bounds.clip_ray(&origin, &direction),
        };
        let config = cfg(0.7, model);
        let t = rng.gen_range(0.0..1.0);
        let samples = sample_ray(&ray, &config, None);
        let grad = render_pixel_grad(&samples, &g, t, &config);

        let h = 1e-4;
        let gmax = grad
            .d_raw
            .iter()
            .map(|&(_, v)| v.abs())
            .fold(0.0f64, f64::max);
        let mut worst = 0.0f64;
        for &(idx, analytic) in &grad.d_raw {
            let mut gp = g.clone();
            gp.raw[idx] += h;
            let mut gm = g.clone();
            gm.raw[idx] -= h;
            let fp = render_pixel(&sample_ray(&ray, &config, None), &gp, t, &config);
            let fm = render_pixel(&sample_ray(&ray, &config, None), &gm, t, &config);
            let fd = (fp - fm) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-6 * gmax).max(1e-300);
            worst = worst.max((analytic - fd).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            assert!(fd_check(PixelModel::Absorbance, seed) < 1e-4);
            assert!(fd_check(PixelModel::LineIntegral, 100 + seed) < 1e-4);
        }
    }

    #[test]
    fn scatter_path_matches_gradient_record() {
        let bounds = SceneBounds::centered_cube(8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Grid4D::init(GridDims::new(2, 4, 4, 4), bounds, 1e-4).unwrap();
        for v in g.raw.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let origin = Point3::new(1.0, -20.0, -2.0);
        let direction = (Point3::new(-1.5, 20.0, 2.5) - origin).normalize();
        let ray = Ray {
            origin,
            direction,
            span: bounds.clip_ray(&origin, &direction),
        };
        let config = cfg(0.5, PixelModel::Absorbance);
        let record = render_pixel_grad(&sample_ray(&ray, &config, None), &g, 0.4, &config);

        let mut dense = vec![0.0; g.raw.len()];
        let mut scratch = RayScratch::default();
        let value = render_pixel_scatter(
            &ray,
            &g,
            0.4,
            &config,
            None,
            &mut scratch,
            |_| 1.0,
            &mut |idx, v| dense[idx] += v,
        );
        assert_relative_eq!(value, record.value, epsilon = 1e-12);
        for &(idx, v) in &record.d_raw {
            assert_relative_eq!(dense[idx], v, epsilon = 1e-12);
        }
        let sparse_sum: f64 = record.d_raw.iter().map(|&(_, v)| v).sum();
        let dense_sum: f64 = dense.iter().sum();
        assert_relative_eq!(sparse_sum, dense_sum, epsilon = 1e-12);
    }

    #[test]
    fn superposition_in_linear_regime() {
        // With raw values deep in the softplus linear asymptote the density
        // field is linear in raw, so line integrals add exactly.
        let bounds = SceneBounds::centered_cube(6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng| {
            let mut g = Grid4D::init(GridDims::new(1, 3, 3, 3), bounds, 1e-4).unwrap();
            g.activation_bias = 0.0;
            for v in g.raw.iter_mut() {
                *v = rng.gen_range(35.0..40.0);
            }
            g
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let mut sum = a.clone();
        for (s, (&x, &y)) in sum.raw.iter_mut().zip(a.raw.iter().zip(b.raw.iter())) {
            *s = x + y;
        }
        let config = cfg(0.37, PixelModel::LineIntegral);
        let ray = axis_ray(&bounds);
        let s = sample_ray(&ray, &config, None);
        let la = render_pixel(&s, &a, 0.0, &config);
        let lb = render_pixel(&s, &b, 0.0, &config);
        let lsum = render_pixel(&s, &sum, 0.0, &config);
        assert!((la + lb - lsum).abs() < 1e-9 * lsum.abs().max(1.0));
    }

    #[test]
    fn step_size_convergence_is_first_order_or_better() {
        // Smooth raw field; compare against a much finer reference march.
        let bounds = SceneBounds::centered_cube(10.0);
        let mut g = Grid4D::init(GridDims::new(1, 8, 8, 8), bounds, 1e-4).unwrap();
        g.activation_bias = 0.0;
        for h in 0..8 {
            for w in 0..8 {
                for d in 0..8 {
                    let p = g.site_center(h, w, d);
                    let r2 = p.coords.norm_squared();
                    g.raw[(h * 8 + w) * 8 + d] = -1.0 + 2.0 * (-r2 / 30.0).exp();
                }
            }
        }
        let origin = Point3::new(0.731, -20.0, 0.412);
        let direction = (Point3::new(-0.3, 20.0, -0.9) - origin).normalize();
        let ray = Ray {
            origin,
            direction,
            span: bounds.clip_ray(&origin, &direction),
        };
        let pitch = g.min_pitch();
        let render_at = |step: f64| {
            let config = cfg(step, PixelModel::Absorbance);
            render_pixel(&sample_ray(&ray, &config, None), &g, 0.0, &config)
        };
        let reference = render_at(pitch / 64.0);
        let e: Vec<f64> = [1.0, 0.5, 0.25]
            .iter()
            .map(|s| (render_at(pitch * s) - reference).abs())
            .collect();
        let slope1 = (e[0] / e[1]).log2();
        let slope2 = (e[1] / e[2]).log2();
        assert!(slope1 >= 0.9, "slope1 = {slope1}, errors {e:?}");
        assert!(slope2 >= 0.9, "slope2 = {slope2}, errors {e:?}");
    }

    #[test]
    fn occupancy_mask_perturbs_pixels_within_bound() {
        let bounds = SceneBounds::centered_cube(10.0);
        let mut g = Grid4D::init(GridDims::new(1, 8, 8, 8), bounds, 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // A few hot voxels on a cold background.
        for _ in 0..6 {
            let i = rng.gen_range(0..g.raw.len());
            g.raw[i] = rng.gen_range(3.0..6.0);
        }
        let threshold = 1e-3;
        let mask = crate::grid::refresh_occupancy(&g, threshold, 1).unwrap();
        let config = RenderConfig::for_grid(&g, PixelModel::Absorbance);
        for _ in 0..40 {
            let origin = Point3::new(rng.gen_range(-4.0..4.0), -30.0, rng.gen_range(-4.0..4.0));
            let target = Point3::new(rng.gen_range(-4.0..4.0), 30.0, rng.gen_range(-4.0..4.0));
            let direction = (target - origin).normalize();
            let ray = Ray {
                origin,
                direction,
                span: bounds.clip_ray(&origin, &direction),
            };
            let Some((t0, t1)) = ray.span else { continue };
            let chord = t1 - t0;
            let with = render_pixel(&sample_ray(&ray, &config, Some(&mask)), &g, 0.0, &config);
            let without = render_pixel(&sample_ray(&ray, &config, None), &g, 0.0, &config);
            assert!(
                (with - without).abs() < 10.0 * threshold * chord,
                "mask changed pixel by {} over chord {}",
                (with - without).abs(),
                chord
            );
        }
    }

    #[test]
    fn render_view_fresh_grid_homogeneous() {
        // Freshly initialized grid (sigma = 1e-4/mm): a 100 mm central chord
        // gives P ~ 1 - exp(-0.01).
        let bounds = SceneBounds::centered_cube(100.0);
        let g = Grid4D::init(GridDims::new(1, 16, 16, 16), bounds, 1e-4).unwrap();
        let pose = ViewPose {
            primary_angle_deg: 0.0,
            secondary_angle_deg: 0.0,
            sdd_mm: 1000.0,
            sod_mm: 500.0,
            pixel_spacing_mm: 2.0,
            rows: 5,
            cols: 5,
            time: 0.0,
        };
        let config = RenderConfig::for_grid(&g, PixelModel::Absorbance);
        let proj = render_view(&pose, &g, &config);
        let expected = 1.0 - (-0.01f64).exp();
        let center = proj.image.get(2, 2);
        assert!((center - expected).abs() < 1e-5, "{center} vs {expected}");
    }

    #[test]
    fn render_view_is_deterministic() {
        let bounds = SceneBounds::centered_cube(20.0);
        let mut g = Grid4D::init(GridDims::new(2, 6, 6, 6), bounds, 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in g.raw.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let pose = ViewPose {
            primary_angle_deg: 33.0,
            secondary_angle_deg: -12.0,
            sdd_mm: 400.0,
            sod_mm: 200.0,
            pixel_spacing_mm: 1.5,
            rows: 16,
            cols: 16,
            time: 0.4,
        };
        let config = RenderConfig::for_grid(&g, PixelModel::Absorbance);
        let a = render_view(&pose, &g, &config);
        let b = render_view(&pose, &g, &config);
        assert_eq!(a.image.data, b.image.data);
    }

    #[test]
    fn render_view_clamps_time() {
        let bounds = SceneBounds::centered_cube(20.0);
        let mut g = Grid4D::init(GridDims::new(3, 4, 4, 4), bounds, 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for v in g.raw.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut pose = ViewPose {
            primary_angle_deg: 10.0,
            secondary_angle_deg: 5.0,
            sdd_mm: 400.0,
            sod_mm: 200.0,
            pixel_spacing_mm: 2.0,
            rows: 8,
            cols: 8,
            time: 0.0,
        };
        let config = RenderConfig::for_grid(&g, PixelModel::Absorbance);
        pose.time = 1.0;
        let at_one = render_view(&pose, &g, &config);
        pose.time = 4.2;
        let beyond = render_view(&pose, &g, &config);
        assert_eq!(at_one.image.data, beyond.image.data);
    }

    #[test]
    fn export_at_knot_matches_activated_raw() {
        let g = {
            let mut g = Grid4D::init(GridDims::new(2, 3, 3, 3), SceneBounds::centered_cube(9.0), 1e-4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for v in g.raw.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            g
        };
        let vol = export_volume(&g, 1.0, [3, 3, 3]);
        let s = g.dims.spatial_len();
        for i in 0..s {
            assert_relative_eq!(vol.data[i] as f64, g.activate(g.raw[s + i]), epsilon = 1e-6);
        }
    }

    #[test]
    fn export_midpoint_interpolates_raw_then_activates() {
        let mut g = Grid4D::init(GridDims::new(2, 2, 2, 2), SceneBounds::centered_cube(4.0), 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for v in g.raw.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let vol = export_volume(&g, 0.5, [2, 2, 2]);
        let s = g.dims.spatial_len();
        for i in 0..s {
            let mid = 0.5 * (g.raw[i] + g.raw[s + i]);
            assert_relative_eq!(vol.data[i] as f64, g.activate(mid), epsilon = 1e-6);
        }
    }

    #[test]
    fn export_uniform_grid_is_uniform() {
        let mut g = Grid4D::init(GridDims::new(1, 3, 3, 3), SceneBounds::centered_cube(9.0), 1e-4).unwrap();
        for v in g.raw.iter_mut() {
            *v = 0.31;
        }
        let vol = export_volume(&g, 0.0, [5, 7, 4]);
        let expected = g.activate(0.31) as f32;
        assert!(vol.data.iter().all(|&v| (v - expected).abs() < 1e-6));
    }

    proptest! {
        #[test]
        fn absorbance_stays_in_unit_interval(seed in 0u64..500) {
            let bounds = SceneBounds::centered_cube(10.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Grid4D::init(GridDims::new(1, 3, 3, 3), bounds, 1e-4).unwrap();
            for v in g.raw.iter_mut() {
                *v = rng.gen_range(-5.0..5.0);
            }
            let origin = Point3::new(rng.gen_range(-4.0..4.0), -30.0, rng.gen_range(-4.0..4.0));
            let direction = (Point3::new(rng.gen_range(-4.0..4.0), 30.0, rng.gen_range(-4.0..4.0)) - origin).normalize();
            let ray = Ray { origin, direction, span: bounds.clip_ray(&origin, &direction) };
            let config = cfg(0.9, PixelModel::Absorbance);
            let p = render_pixel(&sample_ray(&ray, &config, None), &g, 0.0, &config);
            prop_assert!((0.0..1.0).contains(&p));
        }
    }
}
