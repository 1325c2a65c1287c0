//! Self-supervised sparse-view 4D DSA reconstruction.
//!
//! A learnable 4D attenuation voxel grid is optimized by differentiable ray
//! marching against a handful of 2D cone-beam projections; rendering the
//! trained grid yields novel 2D views, 3D volumes at a chosen time, and the
//! full time-resolved reconstruction. A deterministic analytic vascular
//! phantom plus an independent forward projector make the whole pipeline
//! testable without clinical data.
//!
//! Modules:
//! - [`geometry`]: clinical pose parameters to cameras and rays.
//! - [`grid`]: the 4D lattice, interpolation, activation, progressive
//!   upscaling, occupancy masks.
//! - [`renderer`]: differentiable ray marching and volume export.
//! - [`trainer`]: mini-batch optimization with Adam and scheduled scaling.
//! - [`phantom`]: analytic dynamic phantom, exact projector, noise model.
//! - [`metrics`]: PSNR / SSIM reporting.
//! - [`io`]: manifests, images, volumes, checkpoints.

pub mod error;
pub mod geometry;
pub mod grid;
pub mod image;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod renderer;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{assign_view_times, generate_rays, pose_to_camera, Camera, Ray, SceneBounds, ViewPose};
pub use grid::{refresh_occupancy, sample_temporal, Grid4D, GridDims, OccupancyMask};
pub use image::Image;
pub use metrics::{psnr_image, psnr_volume, report_views, report_volumes, ssim_image, MetricReport, PsnrValue};
pub use phantom::{add_noise, default_phantom, project_phantom, rasterize_ground_truth, NoiseModel, PhantomField};
pub use renderer::{export_volume, render_view, PixelModel, Projection, RenderConfig};
pub use trainer::{compute_loss, lr_schedule, run_schedule, run_schedule_with, TrainConfig, TrainOutcome, Trainer};
pub use volume::Volume;
