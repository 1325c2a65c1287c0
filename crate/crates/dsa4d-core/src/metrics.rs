//! Quantitative evaluation: PSNR and SSIM for images and volumes.
//!
//! SSIM uses the standard 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
//! K2 = 0.03, dynamic range 1.0, averaged over positions where the window
//! fits entirely. Volumes are compared per axial slice (along the first
//! spatial axis) and averaged; both volumes are normalized by the reference
//! peak first so the dynamic-range-1.0 constants apply.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::volume::Volume;

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// PSNR outcome; identical inputs (zero MSE) are reported as a distinguished
/// value rather than a non-finite number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsnrValue {
    Identical,
    Db(f64),
}

impl PsnrValue {
    pub fn db(self) -> Option<f64> {
        match self {
            PsnrValue::Identical => None,
            PsnrValue::Db(v) => Some(v),
        }
    }

    /// Decibels with identical inputs mapped to +infinity, for comparisons.
    pub fn db_or_inf(self) -> f64 {
        match self {
            PsnrValue::Identical => f64::INFINITY,
            PsnrValue::Db(v) => v,
        }
    }
}

impl std::fmt::Display for PsnrValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PsnrValue::Identical => write!(f, "identical"),
            PsnrValue::Db(v) => write!(f, "{v:.2} dB"),
        }
    }
}

/// `10 log10(peak^2 / MSE)` over two equally shaped sample slices.
pub fn psnr_slices(a: &[f64], b: &[f64], peak: f64) -> Result<PsnrValue> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    if !(peak > 0.0) {
        return Err(Error::NonPositivePeak(peak));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        Ok(PsnrValue::Identical)
    } else {
        Ok(PsnrValue::Db(10.0 * (peak * peak / mse).log10()))
    }
}

/// Image PSNR with the images' fixed dynamic range of 1.0.
pub fn psnr_image(a: &Image, b: &Image) -> Result<PsnrValue> {
    a.same_shape(b)?;
    psnr_slices(&a.data, &b.data, 1.0)
}

/// Volume PSNR against a reference; `peak` is normally the reference max.
pub fn psnr_volume(recon: &Volume, reference: &Volume, peak: f64) -> Result<PsnrValue> {
    recon.same_shape(reference)?;
    let a: Vec<f64> = recon.data.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = reference.data.iter().map(|&v| v as f64).collect();
    psnr_slices(&a, &b, peak)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter; output is
/// `(rows - 10) x (cols - 10)`.
fn gauss_valid(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let out_cols = cols - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; rows * out_cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for c in 0..out_cols {
            let mut acc = 0.0;
            for (i, &w) in k.iter().enumerate() {
                acc += w * row[c + i];
            }
            tmp[r * out_cols + c] = acc;
        }
    }
    let out_rows = rows - SSIM_WINDOW + 1;
    let mut out = vec![0.0; out_rows * out_cols];
    for c in 0..out_cols {
        for r in 0..out_rows {
            let mut acc = 0.0;
            for (i, &w) in k.iter().enumerate() {
                acc += w * tmp[(r + i) * out_cols + c];
            }
            out[r * out_cols + c] = acc;
        }
    }
    out
}

/// Mean structural similarity between two single-channel images in `[0, 1]`.
pub fn ssim_image(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    if a.rows < SSIM_WINDOW || a.cols < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            rows: a.rows,
            cols: a.cols,
            window: SSIM_WINDOW,
        });
    }
    let (rows, cols) = (a.rows, a.cols);
    let xx: Vec<f64> = a.data.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = b.data.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();

    let mu_x = gauss_valid(&a.data, rows, cols);
    let mu_y = gauss_valid(&b.data, rows, cols);
    let e_xx = gauss_valid(&xx, rows, cols);
    let e_yy = gauss_valid(&yy, rows, cols);
    let e_xy = gauss_valid(&xy, rows, cols);

    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut acc = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(acc / mu_x.len() as f64)
}

/// Per-frame volume SSIM: slices along the first spatial axis, averaged,
/// after normalizing both frames by `peak`.
pub fn ssim_volume_frame(recon: &[f32], reference: &[f32], spatial: [usize; 3], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::NonPositivePeak(peak));
    }
    let [nh, nw, nd] = spatial;
    let slice_len = nw * nd;
    let mut acc = 0.0;
    for h in 0..nh {
        let to_image = |v: &[f32]| Image {
            rows: nw,
            cols: nd,
            data: v[h * slice_len..(h + 1) * slice_len]
                .iter()
                .map(|&x| x as f64 / peak)
                .collect(),
        };
        acc += ssim_image(&to_image(recon), &to_image(reference))?;
    }
    Ok(acc / nh as f64)
}

/// Per-view quality record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub index: usize,
    /// `None` when the pair is bit-identical (infinite PSNR).
    pub psnr_db: Option<f64>,
    pub identical: bool,
    pub ssim: f64,
}

/// Per-frame volume quality record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub time: f64,
    pub psnr_db: Option<f64>,
    pub identical: bool,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeReport {
    /// Peak used for PSNR and SSIM normalization (the reference maximum).
    pub peak: f64,
    pub per_time: Vec<FrameMetrics>,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: f64,
}

/// Evaluation report: per-view 2D metrics and, when volumes are supplied,
/// per-frame 3D metrics. Serializes to the machine-readable JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub views: Vec<ViewMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volume: Option<VolumeReport>,
}

fn mean_of_db(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let finite: Vec<f64> = values.flatten().collect();
    if finite.is_empty() {
        None
    } else {
        Some(finite.iter().sum::<f64>() / finite.len() as f64)
    }
}

/// Build the 2D part of a report from (rendered, target) image pairs.
/// The mean PSNR averages the non-identical views.
pub fn report_views(pairs: &[(Image, Image)]) -> Result<MetricReport> {
    let mut views = Vec::with_capacity(pairs.len());
    for (index, (rendered, target)) in pairs.iter().enumerate() {
        let p = psnr_image(rendered, target)?;
        views.push(ViewMetrics {
            index,
            psnr_db: p.db(),
            identical: p == PsnrValue::Identical,
            ssim: ssim_image(rendered, target)?,
        });
    }
    let mean_psnr_db = mean_of_db(views.iter().map(|v| v.psnr_db));
    let mean_ssim = if views.is_empty() {
        None
    } else {
        Some(views.iter().map(|v| v.ssim).sum::<f64>() / views.len() as f64)
    };
    Ok(MetricReport {
        format_version: 1,
        views,
        mean_psnr_db,
        mean_ssim,
        volume: None,
    })
}

/// Compare a reconstructed volume against a reference (frame by frame).
/// PSNR peak and SSIM normalization come from the reference maximum.
pub fn report_volumes(recon: &Volume, reference: &Volume) -> Result<VolumeReport> {
    recon.same_shape(reference)?;
    let peak = reference.max_value() as f64;
    if !(peak > 0.0) {
        return Err(Error::NonPositivePeak(peak));
    }
    let mut per_time = Vec::with_capacity(reference.times.len());
    for (k, &time) in reference.times.iter().enumerate() {
        let a: Vec<f64> = recon.frame(k).iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = reference.frame(k).iter().map(|&v| v as f64).collect();
        let p = psnr_slices(&a, &b, peak)?;
        per_time.push(FrameMetrics {
            time,
            psnr_db: p.db(),
            identical: p == PsnrValue::Identical,
            ssim: ssim_volume_frame(recon.frame(k), reference.frame(k), reference.spatial, peak)?,
        });
    }
    let mean_psnr_db = mean_of_db(per_time.iter().map(|v| v.psnr_db));
    let mean_ssim = per_time.iter().map(|v| v.ssim).sum::<f64>() / per_time.len() as f64;
    Ok(VolumeReport {
        peak,
        per_time,
        mean_psnr_db,
        mean_ssim,
    })
}

impl MetricReport {
    /// Plain-text table rendering.
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let fmt_psnr = |db: Option<f64>, identical: bool| {
            if identical {
                "identical".to_string()
            } else {
                format!("{:.2}", db.unwrap_or(f64::NAN))
            }
        };
        if !self.views.is_empty() {
            writeln!(out, "view   psnr_db   ssim").unwrap();
            for v in &self.views {
                writeln!(
                    out,
                    "{:<6} {:<9} {:.4}",
                    v.index,
                    fmt_psnr(v.psnr_db, v.identical),
                    v.ssim
                )
                .unwrap();
            }
            writeln!(
                out,
                "mean   {:<9} {}",
                self.mean_psnr_db.map_or("-".into(), |v| format!("{v:.2}")),
                self.mean_ssim.map_or("-".into(), |v| format!("{v:.4}")),
            )
            .unwrap();
        }
        if let Some(vol) = &self.volume {
            writeln!(out, "volume (peak {:.6})", vol.peak).unwrap();
            writeln!(out, "time   psnr_db   ssim").unwrap();
            for f in &vol.per_time {
                writeln!(
                    out,
                    "{:<6.3} {:<9} {:.4}",
                    f.time,
                    fmt_psnr(f.psnr_db, f.identical),
                    f.ssim
                )
                .unwrap();
            }
            writeln!(
                out,
                "mean   {:<9} {:.4}",
                vol.mean_psnr_db.map_or("-".into(), |v| format!("{v:.2}")),
                vol.mean_ssim
            )
            .unwrap();
        }
        out
    }
}
