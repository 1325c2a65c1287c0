//! Independent oracles shared by the integration suites. These deliberately
//! reimplement the documented math (cell-centered trilinear interpolation
//! with linear margin extension, clamped uniform time knots) without
//! touching the library's interpolation code paths.

use dsa4d_core::{Grid4D, SceneBounds};
use nalgebra::Point3;

/// Brute-force 4-linear interpolation of the raw lattice at `(x, t)`.
pub fn oracle_raw_interp(g: &Grid4D, x: &Point3<f64>, t: f64) -> f64 {
    let axis = |lo: f64, hi: f64, n: usize, q: f64| -> Vec<(usize, f64)> {
        if n == 1 {
            return vec![(0, 1.0)];
        }
        let pitch = (hi - lo) / n as f64;
        let u = (q - lo) / pitch - 0.5;
        let mut i0 = u.floor() as isize;
        if i0 < 0 {
            i0 = 0;
        }
        if i0 > n as isize - 2 {
            i0 = n as isize - 2;
        }
        let w = u - i0 as f64;
        vec![(i0 as usize, 1.0 - w), (i0 as usize + 1, w)]
    };
    let th = axis(g.bounds.min.x, g.bounds.max.x, g.dims.n_h, x.x);
    let tw = axis(g.bounds.min.y, g.bounds.max.y, g.dims.n_w, x.y);
    let td = axis(g.bounds.min.z, g.bounds.max.z, g.dims.n_d, x.z);
    let tt: Vec<(usize, f64)> = if g.dims.n_t == 1 {
        vec![(0, 1.0)]
    } else {
        let u = t.clamp(0.0, 1.0) * (g.dims.n_t - 1) as f64;
        let mut k0 = u.floor() as usize;
        if k0 > g.dims.n_t - 2 {
            k0 = g.dims.n_t - 2;
        }
        vec![(k0, 1.0 - (u - k0 as f64)), (k0 + 1, u - k0 as f64)]
    };
    let mut acc = 0.0;
    for &(k, wk) in &tt {
        for &(h, wh) in &th {
            for &(w, ww) in &tw {
                for &(d, wd) in &td {
                    let flat = ((k * g.dims.n_h + h) * g.dims.n_w + w) * g.dims.n_d + d;
                    acc += wk * wh * ww * wd * g.raw[flat];
                }
            }
        }
    }
    acc
}

/// Uniform random point inside (slightly shrunken) bounds.
pub fn random_point(bounds: &SceneBounds, rng: &mut impl rand::Rng) -> Point3<f64> {
    let e = bounds.extent();
    Point3::new(
        bounds.min.x + rng.gen_range(0.001..0.999) * e.x,
        bounds.min.y + rng.gen_range(0.001..0.999) * e.y,
        bounds.min.z + rng.gen_range(0.001..0.999) * e.z,
    )
}
