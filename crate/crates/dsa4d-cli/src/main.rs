//! Command-line pipeline: simulate projections, reconstruct, render,
//! export volumes and evaluate.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dsa4d_core::geometry::assign_view_times;
use dsa4d_core::io::{
    load_checkpoint, load_manifest, load_projections, read_volume, save_checkpoint, save_manifest,
    write_image, write_volume, CheckpointMeta, Manifest, ManifestView,
};
use dsa4d_core::metrics::{report_views, report_volumes, MetricReport};
use dsa4d_core::phantom::{add_noise, default_phantom, project_phantom, rasterize_ground_truth, NoiseModel};
use dsa4d_core::renderer::{export_volume, render_view, PixelModel, RenderConfig};
use dsa4d_core::trainer::{run_schedule_with, TrainConfig};
use dsa4d_core::{SceneBounds, ViewPose};

#[derive(Parser)]
#[command(name = "dsa4d", version, about = "Sparse-view 4D DSA reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom ground truth, a manifest and noisy projections.
    Phantom(PhantomArgs),
    /// Optimize a voxel grid against a manifest's projections.
    Reconstruct(ReconstructArgs),
    /// Render one view from a checkpoint.
    Render(RenderArgs),
    /// Export a 3D density volume from a checkpoint at a given time.
    Export(ExportArgs),
    /// Render held-out views and report 2D PSNR/SSIM against their images.
    Eval2d(Eval2dArgs),
    /// Compare exported volumes against a ground-truth volume file.
    Eval3d(Eval3dArgs),
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PixelModelArg {
    Absorbance,
    LineIntegral,
}

impl From<PixelModelArg> for PixelModel {
    fn from(v: PixelModelArg) -> Self {
        match v {
            PixelModelArg::Absorbance => PixelModel::Absorbance,
            PixelModelArg::LineIntegral => PixelModel::LineIntegral,
        }
    }
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training view count.
    #[arg(long, default_value_t = 30)]
    views: usize,
    /// Held-out view count written under `holdout/` (0 disables).
    #[arg(long, default_value_t = 10)]
    holdout: usize,
    /// Total rotation arc in degrees.
    #[arg(long, default_value_t = 180.0)]
    arc_deg: f64,
    #[arg(long, default_value_t = 128)]
    rows: usize,
    #[arg(long, default_value_t = 128)]
    cols: usize,
    #[arg(long, default_value_t = 1000.0)]
    sdd: f64,
    /// Source-to-isocenter distance; defaults to half of --sdd.
    #[arg(long)]
    sod: Option<f64>,
    /// Detector pixel spacing in mm; sized to cover the phantom by default.
    #[arg(long)]
    pixel_spacing: Option<f64>,
    /// Freeze the phantom: every vessel fully filled at all times.
    #[arg(long = "static", default_value_t = false)]
    static_phantom: bool,
    /// Gaussian noise std as a fraction of each image's maximum.
    #[arg(long, default_value_t = 0.02)]
    noise_std: f64,
    /// Noise fraction for held-out views (clean by default, so evaluation
    /// measures reconstruction error rather than detector noise).
    #[arg(long, default_value_t = 0.0)]
    holdout_noise_std: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Ground-truth volume resolution (cubic).
    #[arg(long, default_value_t = 96)]
    gt_dims: usize,
    /// Ground-truth frame count; 0 picks 1 (static) or 7 (dynamic).
    #[arg(long, default_value_t = 0)]
    gt_frames: usize,
    #[arg(long, value_enum, default_value_t = PixelModelArg::Absorbance)]
    pixel_model: PixelModelArg,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint base path; writes `{out}.json` and `{out}.raw`.
    #[arg(long)]
    out: PathBuf,
    /// JSON training-config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    /// Final grid resolution, cubic.
    #[arg(long, conflicts_with = "grid_dims")]
    grid_dim: Option<usize>,
    /// Final grid resolution as `H,W,D`.
    #[arg(long)]
    grid_dims: Option<String>,
    /// Initial temporal resolution.
    #[arg(long)]
    nt: Option<usize>,
    /// Comma-separated iterations for temporal upscaling (empty to disable).
    #[arg(long)]
    temporal_upscale_iters: Option<String>,
    /// Comma-separated iterations for spatial upscaling (empty to disable).
    #[arg(long)]
    spatial_upscale_iters: Option<String>,
    #[arg(long)]
    initial_spatial_fraction: Option<f64>,
    #[arg(long, default_value_t = false)]
    coarse_stage: bool,
    #[arg(long, default_value_t = false)]
    no_occupancy: bool,
    #[arg(long, value_enum)]
    pixel_model: Option<PixelModelArg>,
    /// Marching step in mm (default: half the final voxel pitch).
    #[arg(long)]
    step_mm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gradient workers; 1 gives bit-reproducible runs, 0 uses all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Loss log path (default `{out}.loss.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Iterations between intermediate checkpoints (0 disables).
    #[arg(long)]
    snapshot_interval: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    /// Checkpoint base path (as written by `reconstruct`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Take the pose from this manifest (with --view) instead of flags.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// View index within --manifest.
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long, default_value_t = 0.0)]
    primary_deg: f64,
    #[arg(long, default_value_t = 0.0)]
    secondary_deg: f64,
    #[arg(long, default_value_t = 0.0)]
    time: f64,
    #[arg(long, default_value_t = 128)]
    rows: usize,
    #[arg(long, default_value_t = 128)]
    cols: usize,
    #[arg(long, default_value_t = 1000.0)]
    sdd: f64,
    #[arg(long)]
    sod: Option<f64>,
    #[arg(long)]
    pixel_spacing: Option<f64>,
    /// Override the checkpoint's marching step, mm.
    #[arg(long)]
    step_mm: Option<f64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Volume base path; writes `{out}.json` and `{out}.raw`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    time: f64,
    /// Output resolution as `H,W,D` (default: the grid's spatial dims).
    #[arg(long)]
    dims: Option<String>,
}

#[derive(Args)]
struct Eval2dArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of held-out views with reference images.
    #[arg(long)]
    manifest: PathBuf,
    /// Write the JSON report here as well as printing the table.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    step_mm: Option<f64>,
}

#[derive(Args)]
struct Eval3dArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Ground-truth volume base path (`{base}.json` / `{base}.raw`).
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Render(args) => cmd_render(args),
        Command::Export(args) => cmd_export(args),
        Command::Eval2d(args) => cmd_eval2d(args),
        Command::Eval3d(args) => cmd_eval3d(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Pixel spacing that projects the whole bounds diagonal onto the detector
/// with a small margin.
fn auto_pixel_spacing(bounds: &SceneBounds, sdd: f64, sod: f64, rows: usize, cols: usize) -> f64 {
    1.05 * bounds.diagonal() * (sdd / sod) / rows.min(cols) as f64
}

fn parse_dims(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("cannot parse dimensions from {text:?}"))?;
    match parts.as_slice() {
        [n] => Ok([*n, *n, *n]),
        [h, w, d] => Ok([*h, *w, *d]),
        _ => bail!("expected N or H,W,D, got {text:?}"),
    }
}

fn parse_iter_list(text: &str) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        return Ok(vec![]);
    }
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .with_context(|| format!("cannot parse iteration list entry {p:?}"))
        })
        .collect()
}

fn cmd_phantom(args: PhantomArgs) -> Result<()> {
    if args.views == 0 {
        bail!("--views must be at least 1");
    }
    let field = if args.static_phantom {
        default_phantom().into_static()
    } else {
        default_phantom()
    };
    let sod = args.sod.unwrap_or(args.sdd / 2.0);
    let spacing = args
        .pixel_spacing
        .unwrap_or_else(|| auto_pixel_spacing(&field.bounds, args.sdd, sod, args.rows, args.cols));
    let config = RenderConfig {
        step_size_mm: 0.125,
        pixel_model: args.pixel_model.into(),
        i0: 1.0,
    };

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;

    let emit = |dir: &Path, count: usize, offset: f64, noise_std: f64, seed_base: u64| -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let times = assign_view_times(count)?;
        let mut views = Vec::with_capacity(count);
        for i in 0..count {
            let pose = ViewPose {
                primary_angle_deg: args.arc_deg * (i as f64 + offset) / count as f64,
                secondary_angle_deg: 0.0,
                sdd_mm: args.sdd,
                sod_mm: sod,
                pixel_spacing_mm: spacing,
                rows: args.rows,
                cols: args.cols,
                time: times[i],
            };
            let projection = project_phantom(&field, &pose, &config);
            let image = add_noise(
                &projection.image,
                &NoiseModel::new(noise_std, seed_base.wrapping_add(i as u64)),
            );
            let name = format!("view_{i:03}.pgm");
            write_image(dir.join(&name), &image)?;
            views.push(ManifestView {
                image: name,
                primary_angle_deg: pose.primary_angle_deg,
                secondary_angle_deg: pose.secondary_angle_deg,
                sdd_mm: pose.sdd_mm,
                sod_mm: Some(pose.sod_mm),
                pixel_spacing_mm: pose.pixel_spacing_mm,
                rows: pose.rows,
                cols: pose.cols,
                time: Some(pose.time),
            });
        }
        save_manifest(dir.join("manifest.json"), &Manifest::new(field.bounds, views))?;
        Ok(())
    };

    emit(&args.out, args.views, 0.0, args.noise_std, args.seed)?;
    if args.holdout > 0 {
        emit(
            &args.out.join("holdout"),
            args.holdout,
            0.5,
            args.holdout_noise_std,
            args.seed.wrapping_add(100_000),
        )?;
    }

    let frames = match (args.gt_frames, args.static_phantom) {
        (0, true) => 1,
        (0, false) => 7,
        (n, _) => n,
    };
    let gt_times = if frames == 1 {
        vec![0.0]
    } else {
        (0..frames).map(|j| j as f64 / (frames - 1) as f64).collect()
    };
    let gt = rasterize_ground_truth(&field, [args.gt_dims; 3], &field.bounds, &gt_times);
    write_volume(args.out.join("ground_truth"), &gt)?;

    println!(
        "wrote {} training views{}, ground truth at {}^3 x {} frames under {}",
        args.views,
        if args.holdout > 0 {
            format!(" and {} held-out views", args.holdout)
        } else {
            String::new()
        },
        args.gt_dims,
        frames,
        args.out.display()
    );
    Ok(())
}

fn build_train_config(args: &ReconstructArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("cannot parse config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.iters {
        cfg.iterations = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_rays = v;
    }
    if let Some(v) = args.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = args.lr_decay_factor {
        cfg.lr_decay_target_factor = v;
    }
    if let Some(v) = args.grid_dim {
        cfg.final_spatial = [v; 3];
    }
    if let Some(v) = &args.grid_dims {
        cfg.final_spatial = parse_dims(v)?;
    }
    if let Some(v) = args.nt {
        cfg.n_t_initial = v;
    }
    if let Some(v) = &args.temporal_upscale_iters {
        cfg.temporal_upscale_iters = parse_iter_list(v)?;
    }
    if let Some(v) = &args.spatial_upscale_iters {
        cfg.spatial_upscale_iters = parse_iter_list(v)?;
    }
    if let Some(v) = args.initial_spatial_fraction {
        cfg.initial_spatial_fraction = v;
    }
    if args.coarse_stage {
        cfg.coarse_stage = true;
    }
    if args.no_occupancy {
        cfg.occupancy.enabled = false;
    }
    if let Some(v) = args.pixel_model {
        cfg.pixel_model = v.into();
    }
    if let Some(v) = args.step_mm {
        cfg.step_size_mm = Some(v);
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.workers {
        cfg.workers = v;
    }
    if let Some(v) = args.snapshot_interval {
        cfg.snapshot_interval = v;
    }
    Ok(cfg)
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let cfg = build_train_config(&args)?;
    let (bounds, views) = load_projections(&args.manifest)?;
    let snapshot_meta = CheckpointMeta {
        pixel_model: cfg.pixel_model,
        step_size_mm: cfg.resolve_step_mm(&bounds),
    };

    let out = args.out.clone();
    let mut snapshot_err = None;
    let outcome = run_schedule_with(&views, bounds, &cfg, |iteration, grid| {
        let base = out.with_file_name(format!(
            "{}.iter{iteration:06}",
            out.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
        ));
        if let Err(e) = save_checkpoint(&base, grid, &snapshot_meta) {
            snapshot_err = Some(e);
        }
    })?;
    if let Some(e) = snapshot_err {
        return Err(e.into());
    }

    let meta = CheckpointMeta {
        pixel_model: outcome.render_config.pixel_model,
        step_size_mm: outcome.render_config.step_size_mm,
    };
    save_checkpoint(&args.out, &outcome.grid, &meta)?;

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    let mut lines = outcome.loss_log_lines(cfg.log_interval);
    lines.insert(0, "iteration,loss,lr".to_string());
    std::fs::write(&log_path, lines.join("\n") + "\n")
        .with_context(|| format!("cannot write {}", log_path.display()))?;

    let final_loss = outcome.history.last().map(|r| r.loss);
    println!(
        "trained {} iterations in {:.1} s (final grid {}x{}x{}x{}, loss {})",
        outcome.history.len(),
        outcome.train_seconds,
        outcome.grid.dims.n_t,
        outcome.grid.dims.n_h,
        outcome.grid.dims.n_w,
        outcome.grid.dims.n_d,
        final_loss.map_or("-".into(), |l| format!("{l:.3e}")),
    );
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let (grid, meta) = load_checkpoint(&args.checkpoint)?;
    let pose = match &args.manifest {
        Some(path) => {
            let manifest = load_manifest(path)?;
            let poses = manifest.resolve_poses()?;
            poses
                .get(args.view)
                .cloned()
                .with_context(|| format!("manifest has no view {}", args.view))?
        }
        None => {
            let sod = args.sod.unwrap_or(args.sdd / 2.0);
            let pose = ViewPose {
                primary_angle_deg: args.primary_deg,
                secondary_angle_deg: args.secondary_deg,
                sdd_mm: args.sdd,
                sod_mm: sod,
                pixel_spacing_mm: args.pixel_spacing.unwrap_or_else(|| {
                    auto_pixel_spacing(&grid.bounds, args.sdd, sod, args.rows, args.cols)
                }),
                rows: args.rows,
                cols: args.cols,
                time: args.time,
            };
            pose.validate()?;
            pose
        }
    };
    let mut config = meta.render_config();
    if let Some(step) = args.step_mm {
        config.step_size_mm = step;
    }
    let projection = render_view(&pose, &grid, &config);
    write_image(&args.out, &projection.image)?;
    println!("rendered {} ({}x{})", args.out.display(), pose.rows, pose.cols);
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let (grid, _) = load_checkpoint(&args.checkpoint)?;
    let dims = match &args.dims {
        Some(text) => parse_dims(text)?,
        None => grid.dims.spatial(),
    };
    let volume = export_volume(&grid, args.time, dims);
    write_volume(&args.out, &volume)?;
    println!(
        "exported {}x{}x{} volume at t={} to {}",
        dims[0], dims[1], dims[2], args.time, args.out.display()
    );
    Ok(())
}

fn write_report(report: &MetricReport, out: Option<&Path>) -> Result<()> {
    print!("{}", report.to_text());
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(report)?;
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn cmd_eval2d(args: Eval2dArgs) -> Result<()> {
    let (grid, meta) = load_checkpoint(&args.checkpoint)?;
    let mut config = meta.render_config();
    if let Some(step) = args.step_mm {
        config.step_size_mm = step;
    }
    let (_, views) = load_projections(&args.manifest)?;
    let pairs: Vec<_> = views
        .iter()
        .map(|v| {
            let rendered = render_view(&v.pose, &grid, &config);
            (rendered.image, v.image.clone())
        })
        .collect();
    let report = report_views(&pairs)?;
    write_report(&report, args.out.as_deref())
}

fn cmd_eval3d(args: Eval3dArgs) -> Result<()> {
    let (grid, _) = load_checkpoint(&args.checkpoint)?;
    let reference = read_volume(&args.volume)?;
    let mut frames = Vec::new();
    for &t in &reference.times {
        frames.push(export_volume(&grid, t, reference.spatial));
    }
    let recon = dsa4d_core::Volume {
        times: reference.times.clone(),
        spatial: reference.spatial,
        bounds: reference.bounds,
        data: frames.into_iter().flat_map(|v| v.data).collect(),
    };
    let volume_report = report_volumes(&recon, &reference)?;
    let report = MetricReport {
        format_version: 1,
        views: vec![],
        mean_psnr_db: None,
        mean_ssim: None,
        volume: Some(volume_report),
    };
    write_report(&report, args.out.as_deref())
}
