//! Analytic dynamic vascular phantom and an independent forward projector.
//!
//! The phantom is a set of capsule-shaped vessel segments filling with
//! contrast over time; density at any `(x, t)` is available in closed form,
//! so it serves both as ground truth for evaluation and as the source of
//! simulated projections. The projector never touches the reconstruction
//! grid: per ray it intersects every capsule analytically and integrates
//! the piecewise-constant density exactly, which is the limit of arbitrarily
//! fine sampling and keeps the generated data free of the reconstruction's
//! discretization.

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::geometry::{pose_to_camera, SceneBounds, ViewPose};
use crate::image::Image;
use crate::renderer::{finish_pixel, Projection, RenderConfig};
use crate::volume::Volume;

/// One vessel segment: a capsule that fills with contrast between
/// `arrival_time` and `arrival_time + fill_duration`.
#[derive(Debug, Clone)]
pub struct VesselSegment {
    pub p0: Point3<f64>,
    pub p1: Point3<f64>,
    /// Capsule radius, mm.
    pub radius: f64,
    /// Peak attenuation density, 1/mm.
    pub sigma_max: f64,
    /// Normalized time at which contrast starts arriving.
    pub arrival_time: f64,
    /// Normalized duration of the fill ramp; 0 means instantaneous.
    pub fill_duration: f64,
}

impl VesselSegment {
    /// Contrast fill fraction at time `t`: a clamped smoothstep
    /// `3u^2 - 2u^3` over the fill window.
    pub fn fill(&self, t: f64) -> f64 {
        let u = if self.fill_duration > 0.0 {
            ((t - self.arrival_time) / self.fill_duration).clamp(0.0, 1.0)
        } else if t >= self.arrival_time {
            1.0
        } else {
            0.0
        };
        u * u * (3.0 - 2.0 * u)
    }

    fn distance_to_axis(&self, x: &Point3<f64>) -> f64 {
        let axis = self.p1 - self.p0;
        let len2 = axis.norm_squared();
        if len2 == 0.0 {
            return (x - self.p0).norm();
        }
        let s = ((x - self.p0).dot(&axis) / len2).clamp(0.0, 1.0);
        (x - (self.p0 + axis * s)).norm()
    }

    pub fn contains(&self, x: &Point3<f64>) -> bool {
        self.distance_to_axis(x) <= self.radius
    }

    /// Mathematical capsule volume (cylinder plus end caps), mm^3.
    pub fn volume(&self) -> f64 {
        let len = (self.p1 - self.p0).norm();
        std::f64::consts::PI * self.radius * self.radius * len
            + 4.0 / 3.0 * std::f64::consts::PI * self.radius.powi(3)
    }

    /// Parameter interval `[t_in, t_out]` where the line `o + t d` (unit
    /// `d`) lies inside the capsule, or `None` when it misses. Capsules are
    /// convex, so the intersection is a single interval.
    fn line_interval(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
        let r2 = self.radius * self.radius;
        let sphere = |c: &Point3<f64>| -> Option<(f64, f64)> {
            let m = o - c;
            let b = m.dot(d);
            let disc = b * b - (m.norm_squared() - r2);
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            Some((-b - s, -b + s))
        };

        let axis = self.p1 - self.p0;
        let len = axis.norm();
        if len < 1e-12 {
            return sphere(&self.p0);
        }
        let u = axis / len;

        // Infinite cylinder around the axis, clipped to the cap slab.
        let m = o - self.p0;
        let dv = d - u * d.dot(&u);
        let mv = m - u * m.dot(&u);
        let a = dv.norm_squared();
        let cyl = if a < 1e-16 {
            if mv.norm_squared() <= r2 {
                Some((f64::NEG_INFINITY, f64::INFINITY))
            } else {
                None
            }
        } else {
            let b = dv.dot(&mv);
            let disc = b * b - a * (mv.norm_squared() - r2);
            if disc < 0.0 {
                None
            } else {
                let s = disc.sqrt();
                Some(((-b - s) / a, (-b + s) / a))
            }
        };
        let cyl_slab = cyl.and_then(|(c0, c1)| {
            let s0 = m.dot(&u);
            let du = d.dot(&u);
            let (s_lo, s_hi) = if du.abs() < 1e-16 {
                if (0.0..=len).contains(&s0) {
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    return None;
                }
            } else {
                let ta = -s0 / du;
                let tb = (len - s0) / du;
                (ta.min(tb), ta.max(tb))
            };
            let lo = c0.max(s_lo);
            let hi = c1.min(s_hi);
            (lo <= hi).then_some((lo, hi))
        });

        let mut t_in = f64::INFINITY;
        let mut t_out = f64::NEG_INFINITY;
        for piece in [cyl_slab, sphere(&self.p0), sphere(&self.p1)]
            .into_iter()
            .flatten()
        {
            t_in = t_in.min(piece.0);
            t_out = t_out.max(piece.1);
        }
        (t_in <= t_out).then_some((t_in, t_out))
    }
}

/// Analytic, continuous 4D attenuation field built from vessel segments.
#[derive(Debug, Clone)]
pub struct PhantomField {
    pub segments: Vec<VesselSegment>,
    /// Density outside every vessel, 1/mm.
    pub background: f64,
    pub bounds: SceneBounds,
}

impl PhantomField {
    /// Density at `(x, t)`: the maximum over segments containing `x` of
    /// their filled density, or the background density elsewhere.
    pub fn density(&self, x: &Point3<f64>, t: f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for seg in &self.segments {
            if seg.contains(x) {
                best = best.max(seg.sigma_max * seg.fill(t));
            }
        }
        if best == f64::NEG_INFINITY {
            self.background
        } else {
            best
        }
    }

    /// Static variant: every segment fully filled at all times.
    pub fn into_static(mut self) -> Self {
        for seg in self.segments.iter_mut() {
            seg.arrival_time = 0.0;
            seg.fill_duration = 0.0;
        }
        self
    }
}

/// The bundled deterministic phantom: a trunk plus two generations of
/// branches (7 capsules) inside a 100 mm cube, contrast arriving at the
/// trunk first and reaching the leaves last. Peak density 0.05/mm.
pub fn default_phantom() -> PhantomField {
    let seg = |p0: [f64; 3], p1: [f64; 3], radius: f64, arrival: f64, duration: f64| VesselSegment {
        p0: Point3::from(p0),
        p1: Point3::from(p1),
        radius,
        sigma_max: 0.05,
        arrival_time: arrival,
        fill_duration: duration,
    };
    PhantomField {
        segments: vec![
            seg([-2.0, 6.0, -44.0], [0.0, 0.0, -10.0], 4.0, 0.00, 0.30),
            seg([0.0, 0.0, -10.0], [-26.0, 10.0, 18.0], 3.0, 0.18, 0.30),
            seg([0.0, 0.0, -10.0], [24.0, -12.0, 14.0], 2.8, 0.22, 0.30),
            seg([-26.0, 10.0, 18.0], [-40.0, 26.0, 40.0], 2.0, 0.45, 0.35),
            seg([-26.0, 10.0, 18.0], [-8.0, 24.0, 42.0], 1.8, 0.50, 0.35),
            seg([24.0, -12.0, 14.0], [42.0, -26.0, 36.0], 1.9, 0.52, 0.35),
            seg([24.0, -12.0, 14.0], [10.0, -30.0, 40.0], 1.7, 0.55, 0.35),
        ],
        background: 0.0,
        bounds: SceneBounds::centered_cube(100.0),
    }
}

/// Project the phantom through a pose with the renderer's pixel model.
///
/// Per ray the density is piecewise constant between capsule entry/exit
/// points, so the line integral is evaluated exactly from the analytic
/// intersections; `config.step_size_mm` plays no role here.
pub fn project_phantom(field: &PhantomField, pose: &ViewPose, config: &RenderConfig) -> Projection {
    let camera = pose_to_camera(pose);
    let fills: Vec<f64> = field
        .segments
        .iter()
        .map(|s| s.sigma_max * s.fill(pose.time.clamp(0.0, 1.0)))
        .collect();
    let mut image = Image::zeros(pose.rows, pose.cols);
    let cols = pose.cols;
    image
        .data
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(row, out)| {
            let mut intervals: Vec<(f64, f64, usize)> = Vec::new();
            let mut cuts: Vec<f64> = Vec::new();
            for (col, px) in out.iter_mut().enumerate() {
                let ray = camera.pixel_ray(row, col, &field.bounds);
                let Some((t0, t1)) = ray.span else {
                    *px = finish_pixel(0.0, config).0;
                    continue;
                };
                intervals.clear();
                cuts.clear();
                cuts.push(t0);
                cuts.push(t1);
                for (i, seg) in field.segments.iter().enumerate() {
                    if let Some((a, b)) = seg.line_interval(&ray.origin, &ray.direction) {
                        let a = a.max(t0);
                        let b = b.min(t1);
                        if a < b {
                            intervals.push((a, b, i));
                            cuts.push(a);
                            cuts.push(b);
                        }
                    }
                }
                let mut line_integral = 0.0;
                if intervals.is_empty() {
                    line_integral = field.background * (t1 - t0);
                } else {
                    cuts.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
                    for pair in cuts.windows(2) {
                        let (lo, hi) = (pair[0], pair[1]);
                        if hi <= lo {
                            continue;
                        }
                        let mid = 0.5 * (lo + hi);
                        let mut value = f64::NEG_INFINITY;
                        for &(a, b, i) in &intervals {
                            if a <= mid && mid <= b {
                                value = value.max(fills[i]);
                            }
                        }
                        if value == f64::NEG_INFINITY {
                            value = field.background;
                        }
                        line_integral += value * (hi - lo);
                    }
                }
                *px = finish_pixel(line_integral, config).0;
            }
        });
    Projection {
        pose: pose.clone(),
        image,
    }
}

/// Additive Gaussian detector noise scaled to the image maximum.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    /// Noise standard deviation as a fraction of the maximum image intensity.
    pub std_fraction: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(std_fraction: f64, seed: u64) -> Self {
        NoiseModel { std_fraction, seed }
    }
}

/// Add i.i.d. Gaussian noise with `std = std_fraction * max(image)`,
/// clamping the result to `[0, 1]`. Deterministic for a given model.
pub fn add_noise(image: &Image, model: &NoiseModel) -> Image {
    let std = model.std_fraction * image.max_value();
    if std <= 0.0 {
        return image.clone();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(model.seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = image
        .data
        .iter()
        .map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Image {
        rows: image.rows,
        cols: image.cols,
        data,
    }
}

/// Sample the phantom at the voxel centers of a cell-centered lattice, one
/// frame per requested time.
pub fn rasterize_ground_truth(
    field: &PhantomField,
    spatial: [usize; 3],
    bounds: &SceneBounds,
    times: &[f64],
) -> Volume {
    let [nh, nw, nd] = spatial;
    let e = bounds.extent();
    let pitch = [e.x / nh as f64, e.y / nw as f64, e.z / nd as f64];
    let frame = nh * nw * nd;
    let mut data = vec![0f32; frame * times.len()];
    for (k, &t) in times.iter().enumerate() {
        data[k * frame..(k + 1) * frame]
            .par_chunks_mut(nw * nd)
            .enumerate()
            .for_each(|(h, slab)| {
                let x = bounds.min.x + (h as f64 + 0.5) * pitch[0];
                for w in 0..nw {
                    let y = bounds.min.y + (w as f64 + 0.5) * pitch[1];
                    for d in 0..nd {
                        let z = bounds.min.z + (d as f64 + 0.5) * pitch[2];
                        slab[w * nd + d] = field.density(&Point3::new(x, y, z), t) as f32;
                    }
                }
            });
    }
    Volume {
        times: times.to_vec(),
        spatial,
        bounds: *bounds,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::PixelModel;
    use approx::assert_relative_eq;

    fn cfg(model: PixelModel) -> RenderConfig {
        RenderConfig {
            step_size_mm: 0.5,
            pixel_model: model,
            i0: 1.0,
        }
    }

    fn cylinder_field() -> PhantomField {
        // One vessel along z through the origin.
        PhantomField {
            segments: vec![VesselSegment {
                p0: Point3::new(0.0, 0.0, -30.0),
                p1: Point3::new(0.0, 0.0, 30.0),
                radius: 3.0,
                sigma_max: 0.05,
                arrival_time: 0.0,
                fill_duration: 0.0,
            }],
            background: 0.0,
            bounds: SceneBounds::centered_cube(100.0),
        }
    }

    fn frontal_pose(rows: usize, cols: usize) -> ViewPose {
        ViewPose {
            primary_angle_deg: 0.0,
            secondary_angle_deg: 0.0,
            sdd_mm: 1000.0,
            sod_mm: 500.0,
            pixel_spacing_mm: 2.0,
            rows,
            cols,
            time: 1.0,
        }
    }

    #[test]
    fn density_before_arrival_is_background() {
        let field = default_phantom();
        let x = Point3::new(-1.0, 3.0, -27.0); // inside the trunk
        assert!(field.density(&x, 1.0) > 0.0);
        let mut late = field.clone();
        for s in late.segments.iter_mut() {
            s.arrival_time = 0.5;
        }
        assert_eq!(late.density(&x, 0.2), 0.0);
    }

    #[test]
    fn fully_filled_axis_point_reaches_sigma_max() {
        let field = default_phantom();
        let seg = &field.segments[0];
        let mid = Point3::from((seg.p0.coords + seg.p1.coords) / 2.0);
        let t = seg.arrival_time + seg.fill_duration;
        assert_relative_eq!(field.density(&mid, t), seg.sigma_max, epsilon = 1e-12);
        assert_relative_eq!(field.density(&mid, 1.0), seg.sigma_max, epsilon = 1e-12);
    }

    #[test]
    fn fill_ramp_midpoint() {
        let seg = VesselSegment {
            p0: Point3::origin(),
            p1: Point3::new(1.0, 0.0, 0.0),
            radius: 1.0,
            sigma_max: 1.0,
            arrival_time: 0.2,
            fill_duration: 0.4,
        };
        // u = 0.5 -> 3/4 - 2/8 = 0.5
        assert_relative_eq!(seg.fill(0.4), 0.5, epsilon = 1e-12);
        assert_eq!(seg.fill(0.1), 0.0);
        assert_eq!(seg.fill(0.9), 1.0);
    }

    #[test]
    fn default_phantom_causality_and_monotonicity() {
        let field = default_phantom();
        assert_eq!(field.segments[0].arrival_time, 0.0);
        for leaf in &field.segments[1..] {
            assert!(leaf.arrival_time > field.segments[0].arrival_time);
        }
        // Pointwise monotone filling on a coarse probe lattice.
        let v0 = rasterize_ground_truth(&field, [24, 24, 24], &field.bounds, &[0.0]);
        let v1 = rasterize_ground_truth(&field, [24, 24, 24], &field.bounds, &[1.0]);
        for (a, b) in v0.data.iter().zip(v1.data.iter()) {
            assert!(b >= a);
        }
    }

    #[test]
    fn default_phantom_occupies_under_five_percent() {
        let field = default_phantom();
        let total: f64 = field.segments.iter().map(|s| s.volume()).sum();
        let box_volume = field.bounds.extent().iter().product::<f64>();
        assert!(total / box_volume < 0.05, "fraction {}", total / box_volume);
        // Capsules stay inside the bounds.
        for s in &field.segments {
            for p in [&s.p0, &s.p1] {
                for axis in 0..3 {
                    assert!(p[axis] - s.radius >= field.bounds.min[axis]);
                    assert!(p[axis] + s.radius <= field.bounds.max[axis]);
                }
            }
        }
    }

    #[test]
    fn empty_field_projects_to_zero() {
        let field = PhantomField {
            segments: vec![],
            background: 0.0,
            bounds: SceneBounds::centered_cube(100.0),
        };
        let proj = project_phantom(&field, &frontal_pose(9, 9), &cfg(PixelModel::Absorbance));
        assert!(proj.image.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cylinder_center_hit_matches_chord_closed_form() {
        // Frontal ray through the cylinder center crosses a 2r chord:
        // L = 2 r sigma, P = 1 - exp(-2 r sigma).
        let field = cylinder_field();
        let pose = frontal_pose(9, 9);
        let li = project_phantom(&field, &pose, &cfg(PixelModel::LineIntegral));
        let ab = project_phantom(&field, &pose, &cfg(PixelModel::Absorbance));
        let l_expected = 2.0 * 3.0 * 0.05;
        assert_relative_eq!(li.image.get(4, 4), l_expected, epsilon = 1e-9);
        assert_relative_eq!(
            ab.image.get(4, 4),
            1.0 - (-l_expected).exp(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn marched_quadrature_converges_to_exact_projection() {
        // Independent check of the analytic integration: midpoint marching
        // of the density field approaches the exact pixel as the step shrinks.
        let field = cylinder_field();
        let pose = frontal_pose(9, 9);
        let exact = project_phantom(&field, &pose, &cfg(PixelModel::LineIntegral));
        let camera = pose_to_camera(&pose);
        let march = |step: f64, row: usize, col: usize| -> f64 {
            let ray = camera.pixel_ray(row, col, &field.bounds);
            let (t0, t1) = ray.span.unwrap();
            let n = ((t1 - t0) / step).ceil() as usize;
            let mut l = 0.0;
            for k in 0..n {
                let lo = t0 + k as f64 * step;
                let delta = (t1 - lo).min(step);
                let x = ray.point_at(lo + 0.5 * delta);
                l += field.density(&x, pose.time) * delta;
            }
            l
        };
        for (row, col) in [(4, 4), (4, 5), (3, 4)] {
            let e = exact.image.get(row, col);
            let coarse = (march(0.01, row, col) - e).abs();
            let fine = (march(0.002, row, col) - e).abs();
            assert!(coarse < 2e-3, "coarse error {coarse}");
            assert!(fine < 4e-4, "fine error {fine}");
        }
    }

    #[test]
    fn noise_zero_fraction_is_identity() {
        let img = Image::constant(8, 8, 0.4);
        let out = add_noise(&img, &NoiseModel::new(0.0, 7));
        assert_eq!(out, img);
    }

    #[test]
    fn noise_std_matches_request() {
        let img = Image::constant(1024, 1024, 0.5);
        let noisy = add_noise(&img, &NoiseModel::new(0.02, 11));
        let n = noisy.data.len() as f64;
        let mean: f64 = noisy
            .data
            .iter()
            .zip(img.data.iter())
            .map(|(a, b)| a - b)
            .sum::<f64>()
            / n;
        let var: f64 = noisy
            .data
            .iter()
            .zip(img.data.iter())
            .map(|(a, b)| (a - b - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        let std = var.sqrt();
        // Requested std is 0.02 * 0.5 = 0.01.
        assert!((0.009..=0.011).contains(&std), "std {std}");
        // Mean-zero within 3 sigma of the estimator.
        assert!(mean.abs() < 3.0 * std / n.sqrt(), "mean {mean}");
        // Deterministic for a fixed model.
        let again = add_noise(&img, &NoiseModel::new(0.02, 11));
        assert_eq!(noisy, again);
    }

    #[test]
    fn noise_output_stays_in_unit_interval() {
        let mut img = Image::constant(64, 64, 0.0);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 2) as f64; // extremes 0 and 1
        }
        let noisy = add_noise(&img, &NoiseModel::new(0.1, 3));
        assert!(noisy.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rasterize_empty_field_is_zero() {
        let field = PhantomField {
            segments: vec![],
            background: 0.0,
            bounds: SceneBounds::centered_cube(10.0),
        };
        let v = rasterize_ground_truth(&field, [4, 4, 4], &field.bounds, &[0.0, 1.0]);
        assert_eq!(v.data.len(), 128);
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rasterize_trunk_axis_voxel_reaches_sigma_max() {
        let field = default_phantom();
        let v = rasterize_ground_truth(&field, [64, 64, 64], &field.bounds, &[1.0]);
        // Voxel nearest the trunk midpoint.
        let seg = &field.segments[0];
        let mid = Point3::from((seg.p0.coords + seg.p1.coords) / 2.0);
        let e = field.bounds.extent();
        let idx = |q: f64, lo: f64, ext: f64| (((q - lo) / ext * 64.0) as usize).min(63);
        let h = idx(mid.x, field.bounds.min.x, e.x);
        let w = idx(mid.y, field.bounds.min.y, e.y);
        let d = idx(mid.z, field.bounds.min.z, e.z);
        let got = v.data[(h * 64 + w) * 64 + d];
        assert_relative_eq!(got as f64, 0.05, epsilon = 1e-9);
    }

    #[test]
    fn rasterize_occupancy_scales_with_resolution() {
        let field = default_phantom();
        let count = |n: usize| {
            rasterize_ground_truth(&field, [n, n, n], &field.bounds, &[1.0])
                .data
                .iter()
                .filter(|&&v| v > 0.0)
                .count() as f64
        };
        let c32 = count(32);
        let c64 = count(64);
        let ratio = c64 / c32;
        assert!((8.0 / 1.15..=8.0 * 1.15).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn static_variant_is_time_independent_and_filled() {
        let field = default_phantom().into_static();
        let seg = &field.segments[0];
        let mid = Point3::from((seg.p0.coords + seg.p1.coords) / 2.0);
        for t in [0.0, 0.31, 1.0] {
            assert_relative_eq!(field.density(&mid, t), 0.05, epsilon = 1e-12);
        }
    }
}
