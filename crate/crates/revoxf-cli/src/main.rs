//! revoxf command-line interface: train, render, eval, warp-inspect, and
//! oracle-gen.
//!
//! Exit codes: 0 success, 2 usage or input-path errors, 3 numeric failures
//! during rendering or training.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{Matrix3, Matrix4};

use revoxf::data::oracle::{
    generate_oracle_views, render_oracle, SceneSpec,
};
use revoxf::data::{checkpoint, llff, nerf, pfm, png_io, Dataset};
use revoxf::geometry::{sample_warp_poses, Camera, WarpPoseMode, WarpPoseSpec};
use revoxf::losses::LossError;
use revoxf::metrics::{psnr, ssim, MetricReport, ViewMetrics};
use revoxf::render::{render_image, RenderConfig, RenderError};
use revoxf::train::{Trainer, TrainConfig, TrainError};
use revoxf::warp::{forward_warp, DepthProvider, WarpProduct};

#[derive(Parser)]
#[command(
    name = "revoxf",
    about = "Differentiable voxel radiance fields for few-shot reconstruction",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a voxel radiance field from a dataset.
    Train(TrainArgs),
    /// Render novel views from a checkpoint.
    Render(RenderArgs),
    /// Evaluate a checkpoint against a dataset split.
    Eval(EvalArgs),
    /// Dump warped images and masks for inspection.
    WarpInspect(WarpInspectArgs),
    /// Generate a synthetic dataset from an analytic scene spec.
    OracleGen(OracleGenArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; defaults fill everything it omits.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (overrides the config's `dataset` key).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// RNG seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the checkpoint, log, and config echo.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON pose file: camera_angle_x, width, height, frames[].transform_matrix.
    #[arg(long)]
    pose_file: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    near: f64,
    #[arg(long, default_value_t = 8.0)]
    far: f64,
    /// Background: "white" or "black".
    #[arg(long, default_value = "white")]
    background: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Split to evaluate: "train" or "test".
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Omit wall-clock timings so repeated runs are byte-identical.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value = "white")]
    background: String,
}

#[derive(Args)]
struct WarpInspectArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Source view index within the training split.
    #[arg(long)]
    view: usize,
    /// Warp pose mode: "spherical-offset" or "interpolation".
    #[arg(long, default_value = "spherical-offset")]
    mode: String,
    #[arg(long, default_value_t = 5.0)]
    angle_lo: f64,
    #[arg(long, default_value_t = 10.0)]
    angle_hi: f64,
    #[arg(long, default_value_t = 1)]
    count: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint for rendered depth (enables the correlation mask).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Correlation threshold as a fraction of the scene diagonal.
    #[arg(long, default_value_t = 0.01)]
    eps_scale: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value = "white")]
    background: String,
}

#[derive(Args)]
struct OracleGenArgs {
    /// Scene spec TOML (scene + camera rig).
    #[arg(long)]
    scene_spec: PathBuf,
    /// Number of training views.
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Number of held-out test views.
    #[arg(long, default_value_t = 8)]
    test_views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write ground-truth depth PFMs next to the PNGs.
    #[arg(long)]
    write_depth: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
        Command::WarpInspect(args) => cmd_warp_inspect(args),
        Command::OracleGen(args) => cmd_oracle_gen(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify_error(&err))
        }
    }
}

/// REVOXF_THREADS caps the worker pool.
fn configure_threads() {
    if let Ok(v) = std::env::var("REVOXF_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

/// Numeric failures exit 3; anything else is a usage/input error, exit 2.
fn classify_error(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            if matches!(e, TrainError::Numeric(_)) {
                return 3;
            }
        }
        if let Some(e) = cause.downcast_ref::<RenderError>() {
            if matches!(e, RenderError::NonFinite(..)) {
                return 3;
            }
        }
        if let Some(e) = cause.downcast_ref::<LossError>() {
            if matches!(e, LossError::NonFinite(_)) {
                return 3;
            }
        }
    }
    2
}

fn parse_background(name: &str) -> Result<[f64; 3]> {
    match name {
        "white" => Ok([1.0, 1.0, 1.0]),
        "black" => Ok([0.0, 0.0, 0.0]),
        other => bail!("unknown background '{other}' (expected white|black)"),
    }
}

/// Detect and load a dataset directory: NeRF-synthetic transforms or an
/// LLFF poses_bounds layout.
fn load_dataset(dir: &Path, background: [f64; 3]) -> Result<Dataset> {
    if dir.join("transforms_train.json").exists() {
        Ok(nerf::load_nerf_synthetic(dir, background)?)
    } else if dir.join("poses_bounds.npy").exists() || dir.join("poses_bounds.bin").exists() {
        Ok(llff::load_llff(dir, background)?)
    } else {
        bail!(
            "{}: neither transforms_train.json nor poses_bounds.npy found",
            dir.display()
        )
    }
}

/// The `dataset` key is CLI-level: the core TrainConfig stays dataset-free.
#[derive(serde::Deserialize)]
struct ConfigFileExtras {
    dataset: Option<PathBuf>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let mut cfg = TrainConfig::from_toml_str(&text)?;
    let extras: ConfigFileExtras = toml::from_str::<toml::Value>(&text)
        .ok()
        .and_then(|v| v.try_into().ok())
        .unwrap_or(ConfigFileExtras { dataset: None });
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dataset_dir = args
        .dataset
        .or(extras.dataset)
        .ok_or_else(|| anyhow!("no dataset: pass --dataset or set `dataset` in the config"))?;
    let background = match cfg.background {
        revoxf::render::Background::White => [1.0, 1.0, 1.0],
        revoxf::render::Background::Black => [0.0, 0.0, 0.0],
    };
    let dataset = load_dataset(&dataset_dir, background)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.toml"), cfg.to_toml_string())?;

    // Config echo: one line per stage with the resolved loss weights.
    println!("dataset: {} ({} train views)", dataset_dir.display(), dataset.train.len());
    for (i, stage) in cfg.stages.iter().enumerate() {
        let w = &stage.weights;
        println!(
            "stage {i}: dims {:?} steps {} lambda_rel={} lambda_unr={} lambda_f={} lambda_d={} lambda_ds={}",
            stage.dims, stage.steps, w.lambda_rel, w.lambda_unr, w.lambda_f, w.lambda_d, w.lambda_ds
        );
    }

    let log_path = args.out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let mut trainer = Trainer::new(dataset, cfg)?;
    let total = trainer.total_steps();
    while !trainer.is_done() {
        let record = trainer.step()?;
        serde_json::to_writer(&mut log, &record)?;
        log.write_all(b"\n")?;
        if record.step % 100 == 0 || record.step + 1 == total {
            println!(
                "step {:>6}/{} stage {} l_total {:.6} psnr_batch {:.2}",
                record.step, total, record.stage, record.losses.l_total, record.psnr_train_batch
            );
        }
    }
    log.flush()?;
    let ckpt_path = args.out.join("checkpoint.rvxf");
    checkpoint::save_checkpoint(&ckpt_path, trainer.grid())?;
    println!("checkpoint: {}", ckpt_path.display());
    println!("log: {}", log_path.display());
    Ok(())
}

/// Pose file schema for `render`: a transforms-style JSON with explicit
/// image size.
#[derive(serde::Deserialize)]
struct PoseFile {
    camera_angle_x: f64,
    width: u32,
    height: u32,
    frames: Vec<PoseFrame>,
}

#[derive(serde::Deserialize)]
struct PoseFrame {
    transform_matrix: [[f64; 4]; 4],
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let grid = checkpoint::load_checkpoint(&args.checkpoint)?;
    let text = fs::read_to_string(&args.pose_file)
        .with_context(|| format!("reading pose file {}", args.pose_file.display()))?;
    let poses: PoseFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing pose file {}", args.pose_file.display()))?;
    let bg = parse_background(&args.background)?;
    let cfg = RenderConfig {
        background: if bg == [0.0, 0.0, 0.0] {
            revoxf::render::Background::Black
        } else {
            revoxf::render::Background::White
        },
        ..RenderConfig::default()
    };
    let fx = 0.5 * poses.width as f64 / (0.5 * poses.camera_angle_x).tan();
    let k = Matrix3::new(
        fx,
        0.0,
        poses.width as f64 / 2.0,
        0.0,
        fx,
        poses.height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    fs::create_dir_all(&args.out)?;
    for (i, frame) in poses.frames.iter().enumerate() {
        let c2w = Matrix4::from_fn(|r, c| frame.transform_matrix[r][c]);
        let w2c = nerf::gl_c2w_to_internal_w2c(&c2w);
        let cam = Camera::new(k, w2c, poses.width, poses.height)?;
        let (rgb, depth) = render_image(&grid, &cam, &cfg, args.near, args.far)?;
        png_io::write_png_rgb(&args.out.join(format!("render_{i:04}.png")), &rgb)?;
        pfm::write_pfm(&args.out.join(format!("depth_{i:04}.pfm")), &depth)?;
    }
    println!("rendered {} poses into {}", poses.frames.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let t0 = std::time::Instant::now();
    let bg = parse_background(&args.background)?;
    let grid = checkpoint::load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.dataset, bg)?;
    let views = match args.split.as_str() {
        "train" => &dataset.train,
        "test" => &dataset.test,
        other => bail!("unknown split '{other}' (expected train|test)"),
    };
    if views.is_empty() {
        bail!("split '{}' has no views", args.split);
    }
    let cfg = RenderConfig {
        background: if bg == [0.0, 0.0, 0.0] {
            revoxf::render::Background::Black
        } else {
            revoxf::render::Background::White
        },
        ..RenderConfig::default()
    };
    fs::create_dir_all(&args.out)?;
    let mut metrics = Vec::with_capacity(views.len());
    for view in views {
        let (rgb, depth) = render_image(&grid, &view.camera, &cfg, dataset.near, dataset.far)?;
        let name = view.name.replace(['/', '\\'], "_");
        png_io::write_png_rgb(&args.out.join(format!("render_{name}.png")), &rgb)?;
        pfm::write_pfm(&args.out.join(format!("depth_{name}.pfm")), &depth)?;
        metrics.push(ViewMetrics {
            view: view.name.clone(),
            psnr_db: psnr(&rgb, &view.rgb)?,
            ssim: ssim(&rgb, &view.rgb)?,
        });
    }
    let wall = if args.strict {
        None
    } else {
        Some(t0.elapsed().as_millis() as u64)
    };
    let report = MetricReport::from_views(metrics, wall);
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(args.out.join("eval.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_warp_inspect(args: WarpInspectArgs) -> Result<()> {
    let bg = parse_background(&args.background)?;
    let dataset = load_dataset(&args.dataset, bg)?;
    if args.view >= dataset.train.len() {
        bail!(
            "view index {} out of range ({} train views)",
            args.view,
            dataset.train.len()
        );
    }
    let mode = match args.mode.as_str() {
        "spherical-offset" => WarpPoseMode::SphericalOffset,
        "interpolation" => WarpPoseMode::Interpolation,
        other => bail!("unknown mode '{other}'"),
    };
    let spec = WarpPoseSpec {
        mode,
        angle_lo: args.angle_lo,
        angle_hi: args.angle_hi,
        count: args.count,
    };
    let view = &dataset.train[args.view];
    let bases: Vec<Camera> = match mode {
        WarpPoseMode::SphericalOffset => vec![view.camera.clone()],
        WarpPoseMode::Interpolation => dataset.train.iter().map(|v| v.camera.clone()).collect(),
    };
    let targets = sample_warp_poses(&bases, &spec, dataset.center(), args.seed)?;

    // Source depth: ground-truth if the dataset carries it, otherwise
    // rendered from the checkpoint.
    let grid = args
        .checkpoint
        .as_ref()
        .map(|p| checkpoint::load_checkpoint(p))
        .transpose()?;
    let cfg = RenderConfig::default();
    let src_depth = match (&view.depth, &grid) {
        (Some(d), _) => d.clone(),
        (None, Some(g)) => render_image(g, &view.camera, &cfg, dataset.near, dataset.far)?.1,
        (None, None) => bail!(
            "view has no depth and no --checkpoint given; one of the two is required"
        ),
    };

    fs::create_dir_all(&args.out)?;
    let eps = args.eps_scale * dataset.bbox_diagonal();
    for (j, target) in targets.iter().enumerate() {
        let fw = forward_warp(&view.rgb, &src_depth, &view.camera, target)?;
        if let Some(g) = &grid {
            let rendered_dst = render_image(g, target, &cfg, dataset.near, dataset.far)?.1;
            let mut product = WarpProduct::build(
                args.view,
                &view.camera,
                target,
                &src_depth,
                fw,
                &rendered_dst,
                eps,
            )?;
            let _ = product.attach_ref_depth(&DepthProvider::GeometricFallback);
            png_io::write_png_rgb(&args.out.join(format!("warped_rgb_{j}.png")), &product.rgb)?;
            png_io::write_png_mask(&args.out.join(format!("m_warp_{j}.png")), &product.m_warp)?;
            png_io::write_png_mask(&args.out.join(format!("m_cor_{j}.png")), &product.m_cor)?;
            png_io::write_png_mask(
                &args.out.join(format!("m_unreliable_{j}.png")),
                &product.m_unreliable,
            )?;
            pfm::write_pfm(&args.out.join(format!("warped_depth_{j}.pfm")), &product.depth)?;
            if let Some(ref_depth) = &product.ref_depth {
                pfm::write_pfm(&args.out.join(format!("ref_depth_{j}.pfm")), ref_depth)?;
            }
        } else {
            // No grid: the correlation mask needs rendered depth, so only
            // the void mask is meaningful.
            png_io::write_png_rgb(&args.out.join(format!("warped_rgb_{j}.png")), &fw.rgb)?;
            png_io::write_png_mask(&args.out.join(format!("m_warp_{j}.png")), &fw.m_warp)?;
            png_io::write_png_mask(&args.out.join(format!("m_unreliable_{j}.png")), &fw.m_warp)?;
            pfm::write_pfm(&args.out.join(format!("warped_depth_{j}.pfm")), &fw.depth)?;
        }
    }
    println!("wrote {} warp products to {}", targets.len(), args.out.display());
    Ok(())
}

fn cmd_oracle_gen(args: OracleGenArgs) -> Result<()> {
    let text = fs::read_to_string(&args.scene_spec)
        .with_context(|| format!("reading scene spec {}", args.scene_spec.display()))?;
    let spec =
        SceneSpec::from_toml_str(&text).map_err(|e| anyhow!("scene spec invalid: {e}"))?;
    if args.views == 0 {
        bail!("--views must be >= 1");
    }
    let train = generate_oracle_views(&spec, args.views, args.seed, "r");
    let test = generate_oracle_views(
        &spec,
        args.test_views,
        args.seed.wrapping_add(0x5851F42D4C957F2D),
        "t",
    );
    fs::create_dir_all(&args.out)?;
    let bbox = spec.scene.bbox();
    let near_far = (spec.cameras.near, spec.cameras.far);
    for (split, views) in [("train", &train), ("test", &test)] {
        if views.is_empty() {
            continue;
        }
        let frames: Vec<nerf::OutFrame<'_>> = views
            .iter()
            .map(|v| nerf::OutFrame {
                name: v.name.clone(),
                camera: &v.camera,
                rgb: &v.rgb,
                depth: if args.write_depth { v.depth.as_ref() } else { None },
            })
            .collect();
        nerf::write_nerf_synthetic_split(&args.out, split, &frames, bbox, near_far)?;
    }
    // Render one reference view of the scene center for quick inspection.
    let center_cam = spec
        .cameras
        .camera_at(spec.scene.center(), 60.0, 45.0)
        .map_err(|e| anyhow!("rig camera: {e}"))?;
    let (preview, _) = render_oracle(&spec.scene, &center_cam, spec.cameras.far);
    png_io::write_png_rgb(&args.out.join("preview.png"), &preview)?;
    println!(
        "wrote {} train and {} test views to {}",
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}
