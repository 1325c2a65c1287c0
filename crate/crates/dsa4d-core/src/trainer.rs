//! Grid optimization against sparse projections.
//!
//! Each iteration samples a mini-batch of pixel rays uniformly across all
//! training views, renders them at their view's time, accumulates the exact
//! loss gradient into a dense buffer and applies one Adam update with an
//! exponentially decaying learning rate. Entries untouched by the batch
//! receive no update. Scheduled events expand the grid mid-training:
//! temporal midpoint insertion and spatial doubling towards the final
//! resolution, with optimizer moments resampled alongside the raw values.
//!
//! Rendering and gradient accumulation fan out across a fixed number of
//! workers, each filling its own buffer over a contiguous ray chunk;
//! buffers are reduced in worker order, so results are deterministic for a
//! given worker count, and exactly reproducible run-to-run in single-worker
//! mode.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_to_camera, Camera, SceneBounds};
use crate::grid::{
    refresh_occupancy, resample_spatial_trilinear, resample_temporal_midpoint, Grid4D, GridDims,
    OccupancyMask,
};
use crate::renderer::{
    render_pixel, render_pixel_scatter, sample_ray, PixelModel, Projection, RayScratch,
    RenderConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Free-space skipping configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OccupancyConfig {
    pub enabled: bool,
    /// Density below which a voxel counts as empty, 1/mm.
    pub threshold: f64,
    /// Dilation radius in voxels applied to the occupied set.
    pub dilation: usize,
    /// Iterations between mask rebuilds.
    pub refresh_interval: usize,
    /// Masking is disabled for this many initial iterations.
    pub warmup_iters: usize,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        OccupancyConfig {
            enabled: true,
            threshold: 1e-3,
            dilation: 1,
            refresh_interval: 1000,
            warmup_iters: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_rays: usize,
    pub iterations: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Final/initial learning-rate ratio reached at the last iteration.
    pub lr_decay_target_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Iterations at which the time axis is expanded (n_t -> 2 n_t - 1).
    pub temporal_upscale_iters: Vec<usize>,
    /// Iterations at which spatial dimensions double (capped at final).
    pub spatial_upscale_iters: Vec<usize>,
    /// Linear-dimension fraction of the final resolution at start.
    pub initial_spatial_fraction: f64,
    /// Optional short low-resolution pass seeding the main run.
    pub coarse_stage: bool,
    pub occupancy: OccupancyConfig,
    pub seed: u64,
    /// Gradient workers; 0 means all available cores.
    pub workers: usize,
    /// Final spatial resolution `[n_h, n_w, n_d]`.
    pub final_spatial: [usize; 3],
    /// Temporal resolution at the start of training.
    pub n_t_initial: usize,
    pub pixel_model: PixelModel,
    /// Marching step; `None` picks half the minimum voxel pitch at the
    /// final resolution (fixed for the whole run so upscales never change
    /// the rendered function).
    pub step_size_mm: Option<f64>,
    pub sigma_init: f64,
    /// Cadence of loss-log lines emitted by [`TrainOutcome::loss_log_lines`].
    pub log_interval: usize,
    /// Zero Adam moments at upscale events instead of resampling them.
    pub reset_moments_on_upscale: bool,
    /// Cadence of snapshot callbacks from [`run_schedule_with`]; 0 disables.
    pub snapshot_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_rays: 8192,
            iterations: 20_000,
            lr0: 0.1,
            lr_decay_target_factor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            temporal_upscale_iters: vec![10_000],
            spatial_upscale_iters: vec![2000, 4000, 6000],
            initial_spatial_fraction: 0.25,
            coarse_stage: false,
            occupancy: OccupancyConfig::default(),
            seed: 0,
            workers: 0,
            final_spatial: [320, 320, 320],
            n_t_initial: 4,
            pixel_model: PixelModel::Absorbance,
            step_size_mm: None,
            sigma_init: 1e-4,
            log_interval: 100,
            reset_moments_on_upscale: false,
            snapshot_interval: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidTrainConfig(m.to_string()));
        if self.batch_rays < 1 {
            return fail("batch_rays must be >= 1");
        }
        if !(self.lr_decay_target_factor > 0.0 && self.lr_decay_target_factor <= 1.0) {
            return fail("lr_decay_target_factor must lie in (0, 1]");
        }
        if !(self.initial_spatial_fraction > 0.0 && self.initial_spatial_fraction <= 1.0) {
            return fail("initial_spatial_fraction must lie in (0, 1]");
        }
        if self.n_t_initial < 1 {
            return fail("n_t_initial must be >= 1");
        }
        if self.final_spatial.iter().any(|&d| d < 1) {
            return fail("final_spatial dimensions must be >= 1");
        }
        if !(self.sigma_init > 0.0) {
            return fail("sigma_init must be positive");
        }
        for list in [&self.temporal_upscale_iters, &self.spatial_upscale_iters] {
            if list.windows(2).any(|w| w[1] <= w[0]) {
                return fail("upscale iteration lists must be strictly increasing");
            }
            if list.iter().any(|&i| i >= self.iterations) {
                return fail("upscale iterations must fall before the final iteration");
            }
        }
        Ok(())
    }

    fn worker_count(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }

    /// The marching step used for the whole run: the configured value, or
    /// half the minimum voxel pitch at the final resolution.
    pub fn resolve_step_mm(&self, bounds: &SceneBounds) -> f64 {
        self.step_size_mm.unwrap_or_else(|| {
            let e = bounds.extent();
            let pitch = [
                e.x / self.final_spatial[0] as f64,
                e.y / self.final_spatial[1] as f64,
                e.z / self.final_spatial[2] as f64,
            ];
            0.5 * pitch.iter().cloned().fold(f64::INFINITY, f64::min)
        })
    }
}

/// First/second Adam moment accumulators tracking the raw array.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Resample both moments alongside a temporal grid upscale.
    fn upscale_temporal(&mut self, dims: GridDims) -> Result<()> {
        self.m = resample_temporal_midpoint(&self.m, dims)?;
        self.v = resample_temporal_midpoint(&self.v, dims)?;
        // Midpoints of nonnegative values stay nonnegative.
        Ok(())
    }

    /// Resample both moments alongside a spatial grid upscale.
    fn upscale_spatial(&mut self, dims: GridDims, new_spatial: [usize; 3]) -> Result<()> {
        self.m = resample_spatial_trilinear(&self.m, dims, new_spatial)?;
        self.v = resample_spatial_trilinear(&self.v, dims, new_spatial)?;
        // Linear extension at the margins can undershoot; second moments
        // must stay nonnegative.
        for v in self.v.iter_mut() {
            *v = v.max(0.0);
        }
        Ok(())
    }

    fn reset(&mut self, len: usize) {
        self.m = vec![0.0; len];
        self.v = vec![0.0; len];
    }
}

/// Mean squared pixel error over a batch of (rendered, target) pairs.
pub fn compute_loss(batch: &[(f64, f64)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(batch.iter().map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / batch.len() as f64)
}

/// Exponential decay from `lr0` to `lr0 * factor` over the run:
/// `lr(i) = lr0 * factor^(i / iterations)`.
pub fn lr_schedule(iteration: usize, config: &TrainConfig) -> f64 {
    config.lr0
        * config
            .lr_decay_target_factor
            .powf(iteration as f64 / config.iterations as f64)
}

/// Spatial dimension trace: the starting resolution followed by the
/// resolution after each scheduled upscale (doubling, capped at final).
pub fn schedule_spatial_dims(
    final_spatial: [usize; 3],
    fraction: f64,
    upscale_count: usize,
) -> Vec<[usize; 3]> {
    let initial = final_spatial.map(|d| ((d as f64 * fraction).round() as usize).clamp(1, d));
    let mut trace = vec![initial];
    let mut cur = initial;
    for _ in 0..upscale_count {
        for (c, f) in cur.iter_mut().zip(final_spatial.iter()) {
            *c = (*c * 2).min(*f);
        }
        trace.push(cur);
    }
    trace
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpscaleKind {
    Temporal,
    Spatial,
}

/// Record of one mid-training resolution change, with the loss of a fixed
/// probe batch evaluated immediately before and after.
#[derive(Debug, Clone)]
pub struct UpscaleEvent {
    pub iteration: usize,
    pub kind: UpscaleKind,
    pub dims_after: GridDims,
    pub probe_loss_before: f64,
    pub probe_loss_after: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy)]
struct RayTarget {
    view: u32,
    row: u32,
    col: u32,
}

pub struct Trainer {
    pub grid: Grid4D,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Fixed for the whole run; the step never changes across upscales.
    pub render: RenderConfig,
    rng: ChaCha8Rng,
    mask: Option<OccupancyMask>,
    cameras: Vec<Camera>,
    view_pixels: Vec<usize>,
    total_pixels: usize,
    workers: usize,
    worker_grads: Vec<Vec<f64>>,
    worker_scratch: Vec<RayScratch>,
    grad: Vec<f64>,
    probe: Vec<RayTarget>,
    pub history: Vec<LossRecord>,
    pub upscale_events: Vec<UpscaleEvent>,
}

impl Trainer {
    /// Set up a trainer whose grid starts at the scheduled initial
    /// resolution (`initial_spatial_fraction` of the final dimensions).
    pub fn new(views: &[Projection], bounds: SceneBounds, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::NoViews);
        }
        for v in views {
            v.pose.validate()?;
        }
        let initial = schedule_spatial_dims(
            config.final_spatial,
            config.initial_spatial_fraction,
            0,
        )[0];
        let dims = GridDims::new(config.n_t_initial, initial[0], initial[1], initial[2]);
        let grid = Grid4D::init(dims, bounds, config.sigma_init)?;

        let render = RenderConfig {
            step_size_mm: config.resolve_step_mm(&bounds),
            pixel_model: config.pixel_model,
            i0: 1.0,
        };

        let cameras: Vec<Camera> = views.iter().map(|v| pose_to_camera(&v.pose)).collect();
        let view_pixels: Vec<usize> = views.iter().map(|v| v.pose.rows * v.pose.cols).collect();
        let total_pixels = view_pixels.iter().sum();

        let workers = config.worker_count();
        let len = grid.raw.len();
        let mut trainer = Trainer {
            adam: AdamState::new(len),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            mask: None,
            cameras,
            view_pixels,
            total_pixels,
            workers,
            worker_grads: (0..workers).map(|_| vec![0.0; len]).collect(),
            worker_scratch: (0..workers).map(|_| RayScratch::default()).collect(),
            grad: vec![0.0; len],
            probe: Vec::new(),
            history: Vec::new(),
            upscale_events: Vec::new(),
            grid,
            render,
            config,
        };
        trainer.probe = trainer.draw_targets(1024, &mut ChaCha8Rng::seed_from_u64(trainer.config.seed ^ 0x9e3779b97f4a7c15));
        Ok(trainer)
    }

    fn draw_targets(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<RayTarget> {
        (0..count)
            .map(|_| {
                let mut flat = rng.gen_range(0..self.total_pixels);
                let mut view = 0usize;
                while flat >= self.view_pixels[view] {
                    flat -= self.view_pixels[view];
                    view += 1;
                }
                let cols = self.cameras[view].cols;
                RayTarget {
                    view: view as u32,
                    row: (flat / cols) as u32,
                    col: (flat % cols) as u32,
                }
            })
            .collect()
    }

    /// Loss of the fixed probe batch on the current grid, rendered without
    /// the occupancy mask (a pure function of the grid).
    pub fn probe_loss(&self, views: &[Projection]) -> f64 {
        let batch: Vec<(f64, f64)> = self
            .probe
            .iter()
            .map(|t| {
                let view = &views[t.view as usize];
                let ray = self.cameras[t.view as usize].pixel_ray(
                    t.row as usize,
                    t.col as usize,
                    &self.grid.bounds,
                );
                let samples = sample_ray(&ray, &self.render, None);
                let rendered = render_pixel(&samples, &self.grid, view.pose.time, &self.render);
                (rendered, view.image.get(t.row as usize, t.col as usize))
            })
            .collect();
        compute_loss(&batch).expect("probe batch is nonempty")
    }

    /// Accumulate the batch gradient of the mean squared error into
    /// `self.grad` and return the batch loss.
    fn accumulate_batch(&mut self, views: &[Projection], targets: &[RayTarget]) -> f64 {
        let inv_batch = 1.0 / targets.len() as f64;
        let chunk = targets.len().div_ceil(self.workers);
        let grid = &self.grid;
        let render = &self.render;
        let mask = self.mask.as_ref();
        let cameras = &self.cameras;

        let losses: Vec<f64> = self
            .worker_grads
            .par_iter_mut()
            .zip(self.worker_scratch.par_iter_mut())
            .enumerate()
            .map(|(w, (wg, scratch))| {
                for g in wg.iter_mut() {
                    *g = 0.0;
                }
                let lo = (w * chunk).min(targets.len());
                let hi = ((w + 1) * chunk).min(targets.len());
                let mut loss = 0.0;
                for t in &targets[lo..hi] {
                    let view = &views[t.view as usize];
                    let target = view.image.get(t.row as usize, t.col as usize);
                    let ray = cameras[t.view as usize].pixel_ray(
                        t.row as usize,
                        t.col as usize,
                        &grid.bounds,
                    );
                    let rendered = render_pixel_scatter(
                        &ray,
                        grid,
                        view.pose.time,
                        render,
                        mask,
                        scratch,
                        |value| 2.0 * (value - target) * inv_batch,
                        &mut |idx, g| wg[idx] += g,
                    );
                    let r = rendered - target;
                    loss += r * r;
                }
                loss * inv_batch
            })
            .collect();

        if self.workers > 1 {
            for g in self.grad.iter_mut() {
                *g = 0.0;
            }
            for wg in &self.worker_grads {
                for (g, &x) in self.grad.iter_mut().zip(wg.iter()) {
                    *g += x;
                }
            }
        }
        losses.iter().sum()
    }

    /// One optimization step at `iteration`: sample a batch, accumulate the
    /// gradient, apply one Adam update. Returns the batch loss.
    pub fn train_step(&mut self, views: &[Projection], iteration: usize) -> f64 {
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let targets = self.draw_targets(self.config.batch_rays, &mut rng);
        self.rng = rng;

        let loss = self.accumulate_batch(views, &targets);

        let lr = lr_schedule(iteration, &self.config);
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bias1 = 1.0 - self.config.adam_beta1.powi(t);
        let bias2 = 1.0 - self.config.adam_beta2.powi(t);
        let (b1, b2, eps) = (
            self.config.adam_beta1,
            self.config.adam_beta2,
            self.config.adam_eps,
        );
        let grad = if self.workers == 1 {
            &self.worker_grads[0]
        } else {
            &self.grad
        };
        for (idx, &g) in grad.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let m = b1 * self.adam.m[idx] + (1.0 - b1) * g;
            let v = b2 * self.adam.v[idx] + (1.0 - b2) * g * g;
            self.adam.m[idx] = m;
            self.adam.v[idx] = v;
            let update = lr * (m / bias1) / ((v / bias2).sqrt() + eps);
            self.grid.raw[idx] -= update;
        }

        self.history.push(LossRecord {
            iteration,
            loss,
            lr,
        });
        loss
    }

    fn resize_buffers(&mut self) {
        let len = self.grid.raw.len();
        for wg in self.worker_grads.iter_mut() {
            wg.clear();
            wg.resize(len, 0.0);
        }
        self.grad.clear();
        self.grad.resize(len, 0.0);
    }

    fn refresh_mask(&mut self) -> Result<()> {
        self.mask = Some(refresh_occupancy(
            &self.grid,
            self.config.occupancy.threshold,
            self.config.occupancy.dilation,
        )?);
        Ok(())
    }

    /// Apply every event scheduled for `iteration`: temporal/spatial
    /// upscales (with probe-loss bookkeeping and moment resampling) and
    /// occupancy refreshes.
    pub fn maintain(&mut self, views: &[Projection], iteration: usize) -> Result<()> {
        let temporal = self.config.temporal_upscale_iters.contains(&iteration);
        let spatial = self.config.spatial_upscale_iters.contains(&iteration);

        if temporal && self.grid.dims.n_t >= 2 {
            let before = self.probe_loss(views);
            let old_dims = self.grid.dims;
            self.grid = self.grid.upscale_temporal()?;
            if self.config.reset_moments_on_upscale {
                self.adam.reset(self.grid.raw.len());
            } else {
                self.adam.upscale_temporal(old_dims)?;
            }
            self.resize_buffers();
            let after = self.probe_loss(views);
            self.upscale_events.push(UpscaleEvent {
                iteration,
                kind: UpscaleKind::Temporal,
                dims_after: self.grid.dims,
                probe_loss_before: before,
                probe_loss_after: after,
            });
        }

        if spatial {
            let target = self.grid.dims.spatial().map(|d| d * 2);
            let capped = [
                target[0].min(self.config.final_spatial[0]),
                target[1].min(self.config.final_spatial[1]),
                target[2].min(self.config.final_spatial[2]),
            ];
            if capped != self.grid.dims.spatial() {
                let before = self.probe_loss(views);
                let old_dims = self.grid.dims;
                self.grid = self.grid.upscale_spatial(capped)?;
                if self.config.reset_moments_on_upscale {
                    self.adam.reset(self.grid.raw.len());
                } else {
                    self.adam.upscale_spatial(old_dims, capped)?;
                }
                self.resize_buffers();
                let after = self.probe_loss(views);
                self.upscale_events.push(UpscaleEvent {
                    iteration,
                    kind: UpscaleKind::Spatial,
                    dims_after: self.grid.dims,
                    probe_loss_before: before,
                    probe_loss_after: after,
                });
                // The mask's lattice no longer matches the grid.
                if self.mask.is_some() {
                    self.refresh_mask()?;
                }
            }
        }

        let occ = &self.config.occupancy;
        if occ.enabled && iteration >= occ.warmup_iters {
            let due = iteration == occ.warmup_iters
                || (occ.refresh_interval > 0 && iteration % occ.refresh_interval == 0);
            if self.mask.is_none() || due {
                self.refresh_mask()?;
            }
        }
        Ok(())
    }
}

/// Outcome of a full training schedule.
pub struct TrainOutcome {
    pub grid: Grid4D,
    pub render_config: RenderConfig,
    pub history: Vec<LossRecord>,
    pub upscale_events: Vec<UpscaleEvent>,
    pub train_seconds: f64,
}

impl TrainOutcome {
    /// `iteration,loss,lr` lines, one per logging interval (plus the final
    /// iteration).
    pub fn loss_log_lines(&self, interval: usize) -> Vec<String> {
        let interval = interval.max(1);
        let last = self.history.len().saturating_sub(1);
        self.history
            .iter()
            .enumerate()
            .filter(|(i, r)| r.iteration % interval == 0 || *i == last)
            .map(|(_, r)| format!("{},{:.10e},{:.10e}", r.iteration, r.loss, r.lr))
            .collect()
    }
}

/// Run the full schedule against the given views.
pub fn run_schedule(
    views: &[Projection],
    bounds: SceneBounds,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    run_schedule_with(views, bounds, config, |_, _| {})
}

/// [`run_schedule`] with a snapshot callback invoked every
/// `config.snapshot_interval` iterations with the live grid.
pub fn run_schedule_with(
    views: &[Projection],
    bounds: SceneBounds,
    config: &TrainConfig,
    mut on_snapshot: impl FnMut(usize, &Grid4D),
) -> Result<TrainOutcome> {
    config.validate()?;
    let start = std::time::Instant::now();

    let mut trainer = Trainer::new(views, bounds, config.clone())?;

    if config.coarse_stage {
        let coarse_dims = config.final_spatial.map(|d| (d / 4).max(1));
        let coarse_cfg = TrainConfig {
            iterations: 5000,
            temporal_upscale_iters: vec![],
            spatial_upscale_iters: vec![],
            initial_spatial_fraction: 1.0,
            final_spatial: coarse_dims,
            n_t_initial: 1,
            coarse_stage: false,
            seed: config.seed ^ 1,
            snapshot_interval: 0,
            ..config.clone()
        };
        let coarse = run_schedule(views, bounds, &coarse_cfg)?;
        // Seed the main grid by resampling the coarse result: spatially to
        // the starting resolution, temporally by replication.
        let spatial = trainer.grid.dims.spatial();
        let resampled =
            resample_spatial_trilinear(&coarse.grid.raw, coarse.grid.dims, spatial)?;
        let frame = spatial.iter().product::<usize>();
        for k in 0..trainer.grid.dims.n_t {
            trainer.grid.raw[k * frame..(k + 1) * frame].copy_from_slice(&resampled);
        }
    }

    for iteration in 0..config.iterations {
        trainer.maintain(views, iteration)?;
        trainer.train_step(views, iteration);
        if config.snapshot_interval > 0
            && iteration > 0
            && iteration % config.snapshot_interval == 0
        {
            on_snapshot(iteration, &trainer.grid);
        }
    }

    // Publish: round raw values to f32-representable so checkpoints
    // round-trip bit-exactly.
    for v in trainer.grid.raw.iter_mut() {
        *v = *v as f32 as f64;
    }

    Ok(TrainOutcome {
        grid: trainer.grid,
        render_config: trainer.render,
        history: trainer.history,
        upscale_events: trainer.upscale_events,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}
