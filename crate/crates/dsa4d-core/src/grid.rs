//! The learnable 4D attenuation voxel grid.
//!
//! The grid stores raw pre-activation values on an `n_t x n_h x n_w x n_d`
//! lattice over a world-space box. Attenuation at an arbitrary `(x, t)` is
//! obtained by spatial trilinear interpolation of the raw lattice, temporal
//! linear interpolation across time knots, then a softplus activation that
//! keeps densities positive.
//!
//! Lattice conventions (pinned so resampling and tests are exact):
//! - Spatial sites are cell-centered: site `i` along an axis spanning
//!   `[lo, hi]` with `n` sites sits at `lo + (i + 0.5) * (hi - lo) / n`.
//!   The `h`/`w`/`d` axes index world `x`/`y`/`z` respectively.
//! - Inside the bounds but beyond the outermost site centers (the half-voxel
//!   margin) the boundary cell is extended linearly, so trilinear fields are
//!   reproduced exactly over the whole box.
//! - Queries outside the bounds return the initialization pre-activation
//!   (raw 0), not zero density.
//! - Time knots sit at `i / (n_t - 1)`; `t` is clamped to `[0, 1]`. A grid
//!   with a single knot is constant in time.
//! - Flattened index: `((t * n_h + h) * n_w + w) * n_d + d`.

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::geometry::SceneBounds;

/// Lattice dimensions: time, height, width, depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub n_t: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub n_d: usize,
}

impl GridDims {
    pub fn new(n_t: usize, n_h: usize, n_w: usize, n_d: usize) -> Self {
        GridDims { n_t, n_h, n_w, n_d }
    }

    pub fn len(&self) -> usize {
        self.n_t * self.n_h * self.n_w * self.n_d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial_len(&self) -> usize {
        self.n_h * self.n_w * self.n_d
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.n_h, self.n_w, self.n_d]
    }
}

/// Numerically stable softplus, linear for arguments above 30.
fn softplus(z: f64) -> f64 {
    let v = if z > 30.0 { z } else { z.exp().ln_1p() };
    v.max(f64::MIN_POSITIVE)
}

/// `(softplus(z), sigmoid(z))` sharing one exponential.
#[inline]
fn softplus_with_derivative(z: f64) -> (f64, f64) {
    if z > 30.0 {
        (z, 1.0)
    } else {
        let e = z.exp();
        (e.ln_1p().max(f64::MIN_POSITIVE), e / (1.0 + e))
    }
}

/// Inverse of [`softplus`]; `softplus(softplus_inv(y)) == y` up to rounding.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Logistic sigmoid, the derivative of softplus.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-axis interpolation taps: bracketing site indices and the fractional
/// weight of the upper one. In the half-voxel margin the weight leaves
/// `[0, 1]`, extending the boundary cell linearly.
#[inline]
fn axis_taps(n: usize, u: f64) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let i0 = (u.floor() as isize).clamp(0, n as isize - 2) as usize;
    (i0, u - i0 as f64)
}

/// The 8 spatial corner sites enclosing a point (flat indices within one
/// time slab) and their trilinear weights.
#[derive(Debug, Clone, Copy)]
pub struct SpatialTaps {
    pub idx: [usize; 8],
    pub weight: [f64; 8],
}

/// The (at most two) time knots bracketing a query time.
#[derive(Debug, Clone, Copy)]
pub struct TemporalTaps {
    pub k0: usize,
    pub k1: usize,
    /// Weight of knot `k1`; knot `k0` gets `1 - weight`.
    pub weight: f64,
}

/// Density and the bookkeeping needed for the backward pass: which raw
/// entries contributed and with what combined weights.
#[derive(Debug, Clone)]
pub struct DensitySample {
    /// Activated density, 1/mm.
    pub sigma: f64,
    /// Derivative of `sigma` with respect to the interpolated raw value.
    pub dsigma_draw: f64,
    /// `(flat raw index, combined interpolation weight)` for every
    /// contributing entry; empty for out-of-bounds queries.
    pub taps: TapList,
}

/// Up to 16 `(index, weight)` pairs without heap allocation.
#[derive(Debug, Clone)]
pub struct TapList {
    entries: [(usize, f64); 16],
    len: usize,
}

impl TapList {
    fn new() -> Self {
        TapList {
            entries: [(0, 0.0); 16],
            len: 0,
        }
    }

    fn push(&mut self, idx: usize, w: f64) {
        self.entries[self.len] = (idx, w);
        self.len += 1;
    }

    pub fn as_slice(&self) -> &[(usize, f64)] {
        &self.entries[..self.len]
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// The learnable object: raw pre-activation values on a 4D lattice.
#[derive(Debug, Clone)]
pub struct Grid4D {
    pub dims: GridDims,
    pub bounds: SceneBounds,
    /// Flat raw values, length `dims.len()`, `((t*n_h + h)*n_w + w)*n_d + d`.
    pub raw: Vec<f64>,
    /// Shift applied inside the activation: `sigma = softplus(raw + bias)`.
    pub activation_bias: f64,
}

impl Grid4D {
    /// Fresh grid whose activated density equals `sigma_init` everywhere.
    ///
    /// The activation bias is chosen so that raw value 0 activates to
    /// `sigma_init`; all raw values start at 0.
    pub fn init(dims: GridDims, bounds: SceneBounds, sigma_init: f64) -> Result<Self> {
        if !(sigma_init > 0.0) {
            return Err(Error::NonPositiveSigmaInit(sigma_init));
        }
        if dims.n_t == 0 || dims.n_h == 0 || dims.n_w == 0 || dims.n_d == 0 {
            return Err(Error::EmptyGridDims);
        }
        Ok(Grid4D {
            dims,
            bounds,
            raw: vec![0.0; dims.len()],
            activation_bias: softplus_inv(sigma_init),
        })
    }

    /// Post-activated density for a raw value: `softplus(raw + bias)`.
    /// Strictly positive and monotone; linear asymptote above 30 avoids
    /// overflow for arbitrarily large raw values.
    pub fn activate(&self, raw_value: f64) -> f64 {
        softplus(raw_value + self.activation_bias)
    }

    /// Derivative of [`Grid4D::activate`] with respect to the raw value.
    pub fn activate_derivative(&self, raw_value: f64) -> f64 {
        sigmoid(raw_value + self.activation_bias)
    }

    /// Voxel pitch per spatial axis, mm.
    pub fn pitch(&self) -> [f64; 3] {
        let e = self.bounds.extent();
        [
            e.x / self.dims.n_h as f64,
            e.y / self.dims.n_w as f64,
            e.z / self.dims.n_d as f64,
        ]
    }

    pub fn min_pitch(&self) -> f64 {
        let p = self.pitch();
        p[0].min(p[1]).min(p[2])
    }

    /// World position of the spatial site `(h, w, d)`.
    pub fn site_center(&self, h: usize, w: usize, d: usize) -> Point3<f64> {
        let p = self.pitch();
        Point3::new(
            self.bounds.min.x + (h as f64 + 0.5) * p[0],
            self.bounds.min.y + (w as f64 + 0.5) * p[1],
            self.bounds.min.z + (d as f64 + 0.5) * p[2],
        )
    }

    /// Normalized time of knot `k`.
    pub fn knot_time(&self, k: usize) -> f64 {
        if self.dims.n_t == 1 {
            0.0
        } else {
            k as f64 / (self.dims.n_t - 1) as f64
        }
    }

    /// Spatial interpolation taps for an in-bounds point, `None` outside.
    pub fn spatial_taps(&self, x: &Point3<f64>) -> Option<SpatialTaps> {
        if !self.bounds.contains(x) {
            return None;
        }
        let p = self.pitch();
        let (h0, wh) = axis_taps(self.dims.n_h, (x.x - self.bounds.min.x) / p[0] - 0.5);
        let (w0, ww) = axis_taps(self.dims.n_w, (x.y - self.bounds.min.y) / p[1] - 0.5);
        let (d0, wd) = axis_taps(self.dims.n_d, (x.z - self.bounds.min.z) / p[2] - 0.5);
        let h1 = (h0 + 1).min(self.dims.n_h - 1);
        let w1 = (w0 + 1).min(self.dims.n_w - 1);
        let d1 = (d0 + 1).min(self.dims.n_d - 1);

        let stride_h = self.dims.n_w * self.dims.n_d;
        let stride_w = self.dims.n_d;
        let base = |h: usize, w: usize, d: usize| h * stride_h + w * stride_w + d;
        Some(SpatialTaps {
            idx: [
                base(h0, w0, d0),
                base(h0, w0, d1),
                base(h0, w1, d0),
                base(h0, w1, d1),
                base(h1, w0, d0),
                base(h1, w0, d1),
                base(h1, w1, d0),
                base(h1, w1, d1),
            ],
            weight: [
                (1.0 - wh) * (1.0 - ww) * (1.0 - wd),
                (1.0 - wh) * (1.0 - ww) * wd,
                (1.0 - wh) * ww * (1.0 - wd),
                (1.0 - wh) * ww * wd,
                wh * (1.0 - ww) * (1.0 - wd),
                wh * (1.0 - ww) * wd,
                wh * ww * (1.0 - wd),
                wh * ww * wd,
            ],
        })
    }

    /// Time knots bracketing `t` (clamped to `[0, 1]`).
    pub fn temporal_taps(&self, t: f64) -> TemporalTaps {
        let n_t = self.dims.n_t;
        if n_t == 1 {
            return TemporalTaps {
                k0: 0,
                k1: 0,
                weight: 0.0,
            };
        }
        let u = t.clamp(0.0, 1.0) * (n_t - 1) as f64;
        let k0 = (u.floor() as usize).min(n_t - 2);
        TemporalTaps {
            k0,
            k1: k0 + 1,
            weight: u - k0 as f64,
        }
    }

    /// Trilinearly interpolated raw values at `x`, one per time knot.
    ///
    /// Out-of-bounds queries return the initialization pre-activation (all
    /// zeros), keeping the function total.
    pub fn sample_spatial(&self, x: &Point3<f64>) -> Vec<f64> {
        let n_t = self.dims.n_t;
        match self.spatial_taps(x) {
            None => vec![0.0; n_t],
            Some(taps) => {
                let s = self.dims.spatial_len();
                (0..n_t)
                    .map(|k| {
                        let slab = &self.raw[k * s..(k + 1) * s];
                        taps.idx
                            .iter()
                            .zip(taps.weight.iter())
                            .map(|(&i, &w)| w * slab[i])
                            .sum()
                    })
                    .collect()
            }
        }
    }

    /// Activated density at `(x, t)` plus the weight record for the
    /// backward pass.
    pub fn query_density(&self, x: &Point3<f64>, t: f64) -> DensitySample {
        let tt = self.temporal_taps(t);
        let s = self.dims.spatial_len();
        match self.spatial_taps(x) {
            None => {
                let sigma = self.activate(0.0);
                DensitySample {
                    sigma,
                    dsigma_draw: self.activate_derivative(0.0),
                    taps: TapList::new(),
                }
            }
            Some(sp) => {
                let base0 = tt.k0 * s;
                let mut v0 = 0.0;
                for c in 0..8 {
                    v0 += sp.weight[c] * self.raw[base0 + sp.idx[c]];
                }
                let mut taps = TapList::new();
                let raw_interp = if tt.weight == 0.0 || tt.k0 == tt.k1 {
                    for c in 0..8 {
                        taps.push(base0 + sp.idx[c], sp.weight[c]);
                    }
                    v0
                } else {
                    let base1 = tt.k1 * s;
                    let mut v1 = 0.0;
                    for c in 0..8 {
                        v1 += sp.weight[c] * self.raw[base1 + sp.idx[c]];
                    }
                    let w1 = tt.weight;
                    let w0 = 1.0 - w1;
                    for c in 0..8 {
                        taps.push(base0 + sp.idx[c], sp.weight[c] * w0);
                    }
                    for c in 0..8 {
                        taps.push(base1 + sp.idx[c], sp.weight[c] * w1);
                    }
                    w0 * v0 + w1 * v1
                };
                let (sigma, dsigma_draw) =
                    softplus_with_derivative(raw_interp + self.activation_bias);
                DensitySample {
                    sigma,
                    dsigma_draw,
                    taps,
                }
            }
        }
    }

    /// Double the temporal resolution minus one: a new knot is inserted
    /// between every two adjacent knots, holding the mean of its neighbors.
    /// Old knot values are preserved verbatim, so the represented function
    /// of time is unchanged.
    pub fn upscale_temporal(&self) -> Result<Grid4D> {
        let raw = resample_temporal_midpoint(&self.raw, self.dims)?;
        let dims = GridDims {
            n_t: 2 * self.dims.n_t - 1,
            ..self.dims
        };
        Ok(Grid4D {
            dims,
            bounds: self.bounds,
            raw,
            activation_bias: self.activation_bias,
        })
    }

    /// Resample every time slab onto a finer spatial lattice by trilinear
    /// interpolation at the new site centers. Bounds are unchanged; new
    /// dimensions must not shrink any axis.
    pub fn upscale_spatial(&self, new_spatial: [usize; 3]) -> Result<Grid4D> {
        let raw = resample_spatial_trilinear(&self.raw, self.dims, new_spatial)?;
        let dims = GridDims {
            n_t: self.dims.n_t,
            n_h: new_spatial[0],
            n_w: new_spatial[1],
            n_d: new_spatial[2],
        };
        Ok(Grid4D {
            dims,
            bounds: self.bounds,
            raw,
            activation_bias: self.activation_bias,
        })
    }
}

/// Piecewise-linear interpolation over values placed at knots `i/(n-1)`
/// (a single value is constant in time); `t` is clamped to `[0, 1]`.
pub fn sample_temporal(t: f64, per_time_values: &[f64]) -> f64 {
    let n = per_time_values.len();
    assert!(n >= 1, "need at least one time value");
    if n == 1 {
        return per_time_values[0];
    }
    let u = t.clamp(0.0, 1.0) * (n - 1) as f64;
    let k0 = (u.floor() as usize).min(n - 2);
    let w = u - k0 as f64;
    (1.0 - w) * per_time_values[k0] + w * per_time_values[k0 + 1]
}

/// Midpoint insertion along the time axis for any per-entry array laid out
/// like [`Grid4D::raw`] (used for raw values and optimizer moments alike).
pub fn resample_temporal_midpoint(data: &[f64], dims: GridDims) -> Result<Vec<f64>> {
    if dims.n_t < 2 {
        return Err(Error::UpscaleSingleKnot);
    }
    assert_eq!(data.len(), dims.len());
    let s = dims.spatial_len();
    let new_n_t = 2 * dims.n_t - 1;
    let mut out = vec![0.0; new_n_t * s];
    for k in 0..new_n_t {
        let dst = &mut out[k * s..(k + 1) * s];
        if k % 2 == 0 {
            dst.copy_from_slice(&data[(k / 2) * s..(k / 2 + 1) * s]);
        } else {
            let a = &data[(k / 2) * s..(k / 2 + 1) * s];
            let b = &data[(k / 2 + 1) * s..(k / 2 + 2) * s];
            for ((o, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                *o = 0.5 * (x + y);
            }
        }
    }
    Ok(out)
}

/// Trilinear resampling of each time slab onto a new spatial lattice, for
/// any array laid out like [`Grid4D::raw`]. The old and new lattices are
/// both cell-centered over the same bounds, so only index math is needed.
pub fn resample_spatial_trilinear(
    data: &[f64],
    dims: GridDims,
    new_spatial: [usize; 3],
) -> Result<Vec<f64>> {
    let old = dims.spatial();
    if new_spatial.iter().zip(old.iter()).any(|(&n, &o)| n < o) {
        return Err(Error::UpscaleShrinks {
            old,
            new: new_spatial,
        });
    }
    assert_eq!(data.len(), dims.len());
    let [nh, nw, nd] = new_spatial;
    let [oh, ow, od] = old;

    // Lattice coordinate of new site i: ((i + 0.5) / n_new) * n_old - 0.5.
    let coord = |i: usize, n_new: usize, n_old: usize| {
        (i as f64 + 0.5) / n_new as f64 * n_old as f64 - 0.5
    };
    let taps_h: Vec<(usize, f64)> = (0..nh).map(|i| axis_taps(oh, coord(i, nh, oh))).collect();
    let taps_w: Vec<(usize, f64)> = (0..nw).map(|i| axis_taps(ow, coord(i, nw, ow))).collect();
    let taps_d: Vec<(usize, f64)> = (0..nd).map(|i| axis_taps(od, coord(i, nd, od))).collect();

    let old_s = oh * ow * od;
    let new_s = nh * nw * nd;
    let mut out = vec![0.0; dims.n_t * new_s];
    for k in 0..dims.n_t {
        let src = &data[k * old_s..(k + 1) * old_s];
        let dst = &mut out[k * new_s..(k + 1) * new_s];
        for (h, &(h0, fh)) in taps_h.iter().enumerate() {
            let h1 = (h0 + 1).min(oh - 1);
            for (w, &(w0, fw)) in taps_w.iter().enumerate() {
                let w1 = (w0 + 1).min(ow - 1);
                let b00 = (h0 * ow + w0) * od;
                let b01 = (h0 * ow + w1) * od;
                let b10 = (h1 * ow + w0) * od;
                let b11 = (h1 * ow + w1) * od;
                let row = &mut dst[(h * nw + w) * nd..(h * nw + w + 1) * nd];
                for (d, &(d0, fd)) in taps_d.iter().enumerate() {
                    let d1 = (d0 + 1).min(od - 1);
                    let c00 = (1.0 - fd) * src[b00 + d0] + fd * src[b00 + d1];
                    let c01 = (1.0 - fd) * src[b01 + d0] + fd * src[b01 + d1];
                    let c10 = (1.0 - fd) * src[b10 + d0] + fd * src[b10 + d1];
                    let c11 = (1.0 - fd) * src[b11 + d0] + fd * src[b11 + d1];
                    let c0 = (1.0 - fw) * c00 + fw * c01;
                    let c1 = (1.0 - fw) * c10 + fw * c11;
                    row[d] = (1.0 - fh) * c0 + fh * c1;
                }
            }
        }
    }
    Ok(out)
}

/// Binary lattice at the grid's spatial resolution marking voxels worth
/// sampling; rays skip points in voxels marked empty.
#[derive(Debug, Clone)]
pub struct OccupancyMask {
    pub bounds: SceneBounds,
    pub spatial: [usize; 3],
    pub occupied: Vec<bool>,
}

impl OccupancyMask {
    /// Whether the voxel containing `x` is marked occupied. Points outside
    /// the bounds are reported empty.
    pub fn occupied_at(&self, x: &Point3<f64>) -> bool {
        if !self.bounds.contains(x) {
            return false;
        }
        let e = self.bounds.extent();
        let [nh, nw, nd] = self.spatial;
        let ih = (((x.x - self.bounds.min.x) / e.x * nh as f64) as usize).min(nh - 1);
        let iw = (((x.y - self.bounds.min.y) / e.y * nw as f64) as usize).min(nw - 1);
        let id = (((x.z - self.bounds.min.z) / e.z * nd as f64) as usize).min(nd - 1);
        self.occupied[(ih * nw + iw) * nd + id]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }
}

/// Build an occupancy mask: a voxel is occupied iff its activated density
/// reaches `threshold` at any time knot; the mask is then dilated by
/// `dilation` voxels (Chebyshev radius) so cell boundaries are never skipped.
pub fn refresh_occupancy(grid: &Grid4D, threshold: f64, dilation: usize) -> Result<OccupancyMask> {
    if !(threshold > 0.0) {
        return Err(Error::NonPositiveThreshold(threshold));
    }
    let s = grid.dims.spatial_len();
    let [nh, nw, nd] = grid.dims.spatial();

    // activate is monotone, so the max over knots can be taken in raw space.
    let mut occupied = vec![false; s];
    for (i, occ) in occupied.iter_mut().enumerate() {
        let mut max_raw = f64::NEG_INFINITY;
        for k in 0..grid.dims.n_t {
            max_raw = max_raw.max(grid.raw[k * s + i]);
        }
        *occ = grid.activate(max_raw) >= threshold;
    }

    if dilation > 0 {
        occupied = dilate(&occupied, [nh, nw, nd], dilation);
    }
    Ok(OccupancyMask {
        bounds: grid.bounds,
        spatial: [nh, nw, nd],
        occupied,
    })
}

/// Separable boolean max-filter with Chebyshev radius `r`.
fn dilate(mask: &[bool], spatial: [usize; 3], r: usize) -> Vec<bool> {
    let [nh, nw, nd] = spatial;
    let idx = |h: usize, w: usize, d: usize| (h * nw + w) * nd + d;
    let mut a = mask.to_vec();
    let mut b = vec![false; mask.len()];

    // h axis
    for h in 0..nh {
        let lo = h.saturating_sub(r);
        let hi = (h + r).min(nh - 1);
        for w in 0..nw {
            for d in 0..nd {
                b[idx(h, w, d)] = (lo..=hi).any(|s| a[idx(s, w, d)]);
            }
        }
    }
    std::mem::swap(&mut a, &mut b);
    // w axis
    for h in 0..nh {
        for w in 0..nw {
            let lo = w.saturating_sub(r);
            let hi = (w + r).min(nw - 1);
            for d in 0..nd {
                b[idx(h, w, d)] = (lo..=hi).any(|s| a[idx(h, s, d)]);
            }
        }
    }
    std::mem::swap(&mut a, &mut b);
    // d axis
    for h in 0..nh {
        for w in 0..nw {
            for d in 0..nd {
                let lo = d.saturating_sub(r);
                let hi = (d + r).min(nd - 1);
                b[idx(h, w, d)] = (lo..=hi).any(|s| a[idx(h, w, s)]);
            }
        }
    }
    b
}
