//! Coarse-to-fine training loop: Adam updates on the voxel grid,
//! reliability-guided gradient scaling, periodic warp refresh, and stage
//! transitions.
//!
//! Determinism: batch sampling comes from one seeded ChaCha stream, forward
//! rendering parallelizes over rays with order-preserving collection, and
//! gradient accumulation is sequential, so a fixed seed + config + data
//! reproduces the run bit for bit.


use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::geometry::{sample_warp_poses, GeometryError, Ray, WarpPoseMode, WarpPoseSpec};
use crate::img::DepthMap;
use crate::losses::{
    self, loss_total, DeltaMetric, LossError, LossReport, LossWeights,
};

/// Pairwise-difference metric selector for the smoothing loss; Huber takes
/// its delta from `huber_delta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    L1,
    L2,
    Huber,
}
use crate::render::{
    backprop_ray, camera_ray, render_image, render_ray, Background, RayRender, RenderConfig,
    RenderError,
};
use crate::voxel::{accumulate_reliability, ReliabilityField, VoxelError, VoxelGrid};
use crate::warp::{forward_warp, DepthProvider, WarpError, WarpProduct};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config invalid: {0}")]
    BadConfig(String),
    #[error("non-finite value in parameter block '{0}' after update")]
    Numeric(&'static str),
    #[error("reliability field dims {0:?} do not match grid dims {1:?}")]
    FieldDimsMismatch([usize; 3], [usize; 3]),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Img(#[from] crate::img::ImgError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// When the reliability field is recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReliabilityRefresh {
    /// At every warp refresh (default).
    Warp,
    /// Once per stage.
    Stage,
}

/// Loss weights as configured; the ordering margin and correlation
/// threshold are scene-relative and resolve against the bbox diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    #[serde(default = "default_lambda_rel")]
    pub lambda_rel: f64,
    #[serde(default = "default_lambda_unr")]
    pub lambda_unr: f64,
    #[serde(default = "default_lambda_f")]
    pub lambda_f: f64,
    #[serde(default = "default_lambda_d")]
    pub lambda_d: f64,
    #[serde(default = "default_lambda_ds")]
    pub lambda_ds: f64,
    /// Ordering margin as a fraction of the scene bbox diagonal.
    #[serde(default = "default_margin_scale")]
    pub margin_scale: f64,
    #[serde(default = "default_window")]
    pub window: u32,
    #[serde(default = "default_tau_d")]
    pub tau_d: f64,
    #[serde(default = "default_n_pairs")]
    pub n_pairs: u32,
    #[serde(default = "default_metric_kind")]
    pub metric: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub huber_delta: Option<f64>,
}

fn default_lambda_rel() -> f64 {
    0.1
}
fn default_lambda_unr() -> f64 {
    0.01
}
fn default_lambda_f() -> f64 {
    5e-5
}
fn default_lambda_d() -> f64 {
    5e-4
}
fn default_lambda_ds() -> f64 {
    5e-5
}
fn default_margin_scale() -> f64 {
    1e-4
}
fn default_window() -> u32 {
    7
}
fn default_tau_d() -> f64 {
    0.05
}
fn default_n_pairs() -> u32 {
    8
}
fn default_metric_kind() -> MetricKind {
    MetricKind::L2
}

impl Default for StageWeights {
    fn default() -> Self {
        Self {
            lambda_rel: default_lambda_rel(),
            lambda_unr: default_lambda_unr(),
            lambda_f: default_lambda_f(),
            lambda_d: default_lambda_d(),
            lambda_ds: default_lambda_ds(),
            margin_scale: default_margin_scale(),
            window: default_window(),
            tau_d: default_tau_d(),
            n_pairs: default_n_pairs(),
            metric: default_metric_kind(),
            huber_delta: None,
        }
    }
}

impl StageWeights {
    pub fn delta_metric(&self) -> Result<DeltaMetric, TrainError> {
        match self.metric {
            MetricKind::L1 => Ok(DeltaMetric::L1),
            MetricKind::L2 => Ok(DeltaMetric::L2),
            MetricKind::Huber => match self.huber_delta {
                Some(d) if d > 0.0 => Ok(DeltaMetric::Huber(d)),
                _ => Err(TrainError::BadConfig(
                    "metric = \"huber\" requires a positive huber_delta".into(),
                )),
            },
        }
    }

    pub fn resolve(&self, bbox_diagonal: f64) -> LossWeights {
        LossWeights {
            lambda_rel: self.lambda_rel,
            lambda_unr: self.lambda_unr,
            lambda_f: self.lambda_f,
            lambda_d: self.lambda_d,
            lambda_ds: self.lambda_ds,
            margin: self.margin_scale * bbox_diagonal,
            window: self.window,
            tau_d: self.tau_d,
            n_pairs: self.n_pairs,
            delta_metric: self
                .delta_metric()
                .expect("validated at config load"),
        }
    }

    pub fn zeroed() -> Self {
        Self {
            lambda_rel: 0.0,
            lambda_unr: 0.0,
            lambda_f: 0.0,
            lambda_d: 0.0,
            lambda_ds: 0.0,
            ..Self::default()
        }
    }
}

/// One coarse-to-fine stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub dims: [usize; 3],
    pub steps: u32,
    #[serde(default = "default_lr_density")]
    pub lr_density: f64,
    #[serde(default = "default_lr_color")]
    pub lr_color: f64,
    #[serde(default)]
    pub weights: StageWeights,
}

fn default_lr_density() -> f64 {
    0.1
}
fn default_lr_color() -> f64 {
    0.01
}

/// Full training configuration; serializes to/from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    pub stages: Vec<StageConfig>,
    #[serde(default = "default_refresh_period")]
    pub warp_refresh_period: u32,
    /// Resample warp poses at every refresh (true) or fix them once.
    #[serde(default = "default_true")]
    pub warp_resample: bool,
    #[serde(default = "default_warp_poses")]
    pub warp_poses: WarpPoseSpec,
    #[serde(default = "default_reliability_refresh")]
    pub reliability_refresh: ReliabilityRefresh,
    /// Scale voxel gradients by `1 + rho(v)` before the optimizer step.
    #[serde(default = "default_true")]
    pub reliability_weighting: bool,
    #[serde(default = "default_ray_cap")]
    pub reliability_ray_cap: u32,
    #[serde(default = "default_provider")]
    pub depth_provider: DepthProvider,
    /// Apply the ordering loss on input views against external per-view
    /// depth when the dataset carries it.
    #[serde(default = "default_true")]
    pub input_depth_reg: bool,
    #[serde(default = "default_background")]
    pub background: Background,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_density_shift")]
    pub density_shift: f64,
    #[serde(default = "default_true")]
    pub sigmoid_color: bool,
    #[serde(default = "default_early_stop")]
    pub early_stop_t: f64,
    #[serde(default = "default_batch_rays")]
    pub batch_rays: u32,
    #[serde(default = "default_frac_rgb")]
    pub frac_rgb: f64,
    #[serde(default = "default_frac_rel")]
    pub frac_rel: f64,
    #[serde(default = "default_frac_unr")]
    pub frac_unr: f64,
    #[serde(default = "default_ds_patches")]
    pub ds_patches_per_step: u32,
    #[serde(default = "default_ds_patch_size")]
    pub ds_patch_size: u32,
    /// Correlation threshold as a fraction of the bbox diagonal.
    #[serde(default = "default_eps_scale")]
    pub eps_scale: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Learning-rate decay factor applied exponentially over each stage.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    /// Apply the voxel smoothing term every N steps (gradients scaled by N
    /// so the expected update is unchanged); trims CPU cost on fine grids.
    #[serde(default = "default_rs_every")]
    pub rs_every: u32,
    /// Single fine-only stage scheme for forward-facing scenes.
    #[serde(default)]
    pub llff_mode: bool,
    /// Near/far overrides; dataset defaults apply when absent.
    #[serde(default)]
    pub near: Option<f64>,
    #[serde(default)]
    pub far: Option<f64>,
}

fn default_refresh_period() -> u32 {
    1000
}
fn default_true() -> bool {
    true
}
fn default_warp_poses() -> WarpPoseSpec {
    WarpPoseSpec {
        mode: WarpPoseMode::SphericalOffset,
        angle_lo: 5.0,
        angle_hi: 10.0,
        count: 1,
    }
}
fn default_reliability_refresh() -> ReliabilityRefresh {
    ReliabilityRefresh::Warp
}
fn default_ray_cap() -> u32 {
    1 << 18
}
fn default_provider() -> DepthProvider {
    DepthProvider::GeometricFallback
}
fn default_background() -> Background {
    Background::White
}
fn default_step_size() -> f64 {
    0.5
}
fn default_density_shift() -> f64 {
    -4.0
}
fn default_early_stop() -> f64 {
    1e-4
}
fn default_batch_rays() -> u32 {
    4096
}
fn default_frac_rgb() -> f64 {
    0.5
}
fn default_frac_rel() -> f64 {
    0.35
}
fn default_frac_unr() -> f64 {
    0.15
}
fn default_ds_patches() -> u32 {
    4
}
fn default_ds_patch_size() -> u32 {
    8
}
fn default_eps_scale() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_lr_decay() -> f64 {
    0.1
}
fn default_rs_every() -> u32 {
    1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stages.is_empty() {
            return Err(TrainError::BadConfig("at least one stage required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.steps == 0 {
                return Err(TrainError::BadConfig(format!("stage {i} has zero steps")));
            }
            if !(s.lr_density > 0.0 && s.lr_color > 0.0) {
                return Err(TrainError::BadConfig(format!(
                    "stage {i} learning rates must be positive"
                )));
            }
            if s.dims.iter().any(|&d| d < 2) {
                return Err(TrainError::BadConfig(format!(
                    "stage {i} dims must be >= 2 per axis"
                )));
            }
            if i > 0 && (0..3).any(|a| s.dims[a] < self.stages[i - 1].dims[a]) {
                return Err(TrainError::BadConfig(format!(
                    "stage {i} dims must not shrink"
                )));
            }
            s.weights.delta_metric()?;
        }
        if self.warp_refresh_period == 0 {
            return Err(TrainError::BadConfig("warp_refresh_period must be >= 1".into()));
        }
        for (name, v) in [
            ("frac_rgb", self.frac_rgb),
            ("frac_rel", self.frac_rel),
            ("frac_unr", self.frac_unr),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::BadConfig(format!("{name} outside [0, 1]")));
            }
        }
        if self.batch_rays == 0 {
            return Err(TrainError::BadConfig("batch_rays must be >= 1".into()));
        }
        if self.ds_patch_size < 2 {
            return Err(TrainError::BadConfig("ds_patch_size must be >= 2".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::BadConfig("lr_decay must be in (0, 1]".into()));
        }
        if self.rs_every == 0 {
            return Err(TrainError::BadConfig("rs_every must be >= 1".into()));
        }
        self.warp_poses
            .validate()
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// 64^3 -> 128^3 schedule sized for CPU runs on generated scenes.
    pub fn desk_preset() -> Self {
        TrainConfig {
            seed: 0,
            stages: vec![
                StageConfig {
                    dims: [64, 64, 64],
                    steps: 1000,
                    lr_density: 0.1,
                    lr_color: 0.01,
                    weights: StageWeights::default(),
                },
                StageConfig {
                    dims: [128, 128, 128],
                    steps: 2000,
                    lr_density: 0.1,
                    lr_color: 0.01,
                    weights: StageWeights::default(),
                },
            ],
            warp_refresh_period: default_refresh_period(),
            warp_resample: true,
            warp_poses: default_warp_poses(),
            reliability_refresh: default_reliability_refresh(),
            reliability_weighting: true,
            reliability_ray_cap: default_ray_cap(),
            depth_provider: default_provider(),
            input_depth_reg: true,
            background: default_background(),
            step_size: default_step_size(),
            density_shift: default_density_shift(),
            sigmoid_color: true,
            early_stop_t: default_early_stop(),
            batch_rays: default_batch_rays(),
            frac_rgb: default_frac_rgb(),
            frac_rel: default_frac_rel(),
            frac_unr: default_frac_unr(),
            ds_patches_per_step: default_ds_patches(),
            ds_patch_size: default_ds_patch_size(),
            eps_scale: default_eps_scale(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            lr_decay: default_lr_decay(),
            rs_every: default_rs_every(),
            llff_mode: false,
            near: None,
            far: None,
        }
    }

    /// Coarse/fine schedule with the published synthetic-scene weights.
    pub fn paper_synthetic_preset() -> Self {
        let coarse = StageWeights {
            lambda_rel: 0.1,
            lambda_unr: 0.01,
            lambda_d: 5e-4,
            lambda_f: 5e-5,
            lambda_ds: 5e-5,
            ..StageWeights::default()
        };
        let fine = StageWeights {
            lambda_rel: 0.1,
            lambda_unr: 0.01,
            lambda_d: 5e-5,
            lambda_f: 1e-5,
            lambda_ds: 5e-5,
            ..StageWeights::default()
        };
        let mut cfg = Self::desk_preset();
        cfg.stages = vec![
            StageConfig {
                dims: [96, 96, 96],
                steps: 2000,
                lr_density: 0.1,
                lr_color: 0.01,
                weights: coarse,
            },
            StageConfig {
                dims: [160, 160, 160],
                steps: 6000,
                lr_density: 0.1,
                lr_color: 0.01,
                weights: fine,
            },
        ];
        cfg
    }

    /// Fine-only scheme for forward-facing scenes with the published
    /// weights and pose interpolation.
    pub fn paper_llff_preset() -> Self {
        let fine = StageWeights {
            lambda_rel: 1e-1,
            lambda_unr: 1e-3,
            lambda_d: 5e-5,
            lambda_f: 5e-6,
            lambda_ds: 5e-4,
            ..StageWeights::default()
        };
        let mut cfg = Self::desk_preset();
        cfg.llff_mode = true;
        cfg.warp_poses = WarpPoseSpec {
            mode: WarpPoseMode::Interpolation,
            angle_lo: 0.0,
            angle_hi: 0.0,
            count: 2,
        };
        cfg.stages = vec![StageConfig {
            dims: [160, 160, 160],
            steps: 8000,
            lr_density: 0.1,
            lr_color: 0.01,
            weights: fine,
        }];
        cfg
    }
}

/// First/second moment buffers for one parameter block.
#[derive(Debug, Clone)]
struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamMoments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Adam state for the density and color blocks. Shapes track the grid;
/// reset on stage transitions.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    density: AdamMoments,
    color: AdamMoments,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl OptimizerState {
    pub fn new(grid: &VoxelGrid, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            density: AdamMoments::new(grid.node_count()),
            color: AdamMoments::new(3 * grid.node_count()),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Scale every voxel's density and color gradients by `1 + rho(v)`.
/// Element-wise, so the parallel path matches the sequential one exactly.
pub fn apply_reliability_weights(
    grid: &mut VoxelGrid,
    field: &ReliabilityField,
) -> Result<(), TrainError> {
    if field.dims() != grid.dims() {
        return Err(TrainError::FieldDimsMismatch(field.dims(), grid.dims()));
    }
    let rho = field.rho();
    let (_, _, dgrad, cgrad) = grid.params_mut();
    let kernel = |rho: &[f64], dgrad: &mut [f64], cgrad: &mut [f64]| {
        for (i, &r) in rho.iter().enumerate() {
            let w = 1.0 + r;
            dgrad[i] *= w;
            cgrad[3 * i] *= w;
            cgrad[3 * i + 1] *= w;
            cgrad[3 * i + 2] *= w;
        }
    };
    #[cfg(feature = "parallel")]
    {
        const CHUNK: usize = 1 << 16;
        rho.par_chunks(CHUNK)
            .zip(dgrad.par_chunks_mut(CHUNK).zip(cgrad.par_chunks_mut(3 * CHUNK)))
            .for_each(|(rho, (dgrad, cgrad))| kernel(rho, dgrad, cgrad));
    }
    #[cfg(not(feature = "parallel"))]
    kernel(rho, dgrad, cgrad);
    Ok(())
}

/// One bias-corrected Adam update from the grid's accumulated gradients.
/// Gradients are zeroed afterwards; non-finite values are a numeric error
/// naming the block. The update is element-wise, so the parallel path is
/// bit-identical to the sequential one.
pub fn adam_step(
    grid: &mut VoxelGrid,
    state: &mut OptimizerState,
    lr_density: f64,
    lr_color: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (beta1, beta2, eps) = (state.beta1, state.beta2, state.eps);
    let (density, color, dgrad, cgrad) = grid.params_mut();

    let kernel = |values: &mut [f64],
                  grads: &mut [f64],
                  m: &mut [f64],
                  v: &mut [f64],
                  lr: f64,
                  block: &'static str|
     -> Result<(), TrainError> {
        for i in 0..values.len() {
            let g = grads[i];
            if !g.is_finite() {
                return Err(TrainError::Numeric(block));
            }
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            if !values[i].is_finite() {
                return Err(TrainError::Numeric(block));
            }
            grads[i] = 0.0;
        }
        Ok(())
    };

    let update = |values: &mut [f64],
                  grads: &mut [f64],
                  moments: &mut AdamMoments,
                  lr: f64,
                  block: &'static str|
     -> Result<(), TrainError> {
        #[cfg(feature = "parallel")]
        {
            const CHUNK: usize = 1 << 16;
            values
                .par_chunks_mut(CHUNK)
                .zip(grads.par_chunks_mut(CHUNK))
                .zip(
                    moments
                        .m
                        .par_chunks_mut(CHUNK)
                        .zip(moments.v.par_chunks_mut(CHUNK)),
                )
                .try_for_each(|((values, grads), (m, v))| kernel(values, grads, m, v, lr, block))
        }
        #[cfg(not(feature = "parallel"))]
        {
            kernel(values, grads, &mut moments.m, &mut moments.v, lr, block)
        }
    };
    update(density, dgrad, &mut state.density, lr_density, "density")?;
    update(color, cgrad, &mut state.color, lr_color, "color")?;
    Ok(())
}

/// Per-step log record; serialized as one JSON line.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: usize,
    #[serde(flatten)]
    pub losses: LossReport,
    #[serde(serialize_with = "crate::train::serialize_maybe_inf")]
    pub psnr_train_batch: f64,
    pub ms: u64,
}

pub(crate) fn serialize_maybe_inf<S: serde::Serializer>(
    v: &f64,
    s: S,
) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "+inf" } else { "-inf" })
    }
}

pub struct TrainOutput {
    pub grid: VoxelGrid,
    pub records: Vec<StepRecord>,
}

enum ColorTarget {
    Rgb([f64; 3]),
    Rel([f64; 3]),
}

/// A sampled ray with its loss role for one step.
struct RayTask {
    ray: Ray,
    depth_scale: f64,
    color_target: Option<ColorTarget>,
}

/// Group of rays entering the ordering loss: index 0 is the anchor.
struct OrderingGroup {
    ray_indices: Vec<usize>,
    ref_depths: Vec<f64>,
}

struct DsPatchTask {
    ray_indices: Vec<usize>,
    width: u32,
    height: u32,
}

/// Incremental trainer; `step` runs one optimization step including stage
/// transitions and scheduled warp refreshes.
pub struct Trainer {
    cfg: TrainConfig,
    dataset: Dataset,
    render_cfg: RenderConfig,
    grid: VoxelGrid,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    stage_idx: usize,
    step_in_stage: u32,
    global_step: u64,
    refresh_counter: u64,
    products: Vec<WarpProduct>,
    reliable_index: Vec<(usize, u32, u32)>,
    unreliable_index: Vec<(usize, u32, u32)>,
    field: ReliabilityField,
    rs_factors: Vec<f64>,
    last_l_fc: f64,
    last_l_sigma: f64,
    near: f64,
    far: f64,
}

impl Trainer {
    pub fn new(dataset: Dataset, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        dataset.validate()?;
        let render_cfg = RenderConfig {
            step_size: cfg.step_size,
            background: cfg.background,
            density_shift: cfg.density_shift,
            sigmoid_color: cfg.sigmoid_color,
            early_stop_t: cfg.early_stop_t,
        };
        render_cfg.validate()?;
        let grid = VoxelGrid::new(dataset.bbox_min, dataset.bbox_max, cfg.stages[0].dims)?;
        let optimizer = OptimizerState::new(&grid, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let near = cfg.near.unwrap_or(dataset.near);
        let far = cfg.far.unwrap_or(dataset.far);
        if !(near > 0.0 && near < far) {
            return Err(TrainError::BadConfig(format!(
                "bad near/far: {near} / {far}"
            )));
        }
        let field = ReliabilityField::empty(cfg.stages[0].dims);
        Ok(Self {
            cfg,
            dataset,
            render_cfg,
            grid,
            optimizer,
            rng,
            stage_idx: 0,
            step_in_stage: 0,
            global_step: 0,
            refresh_counter: 0,
            products: Vec::new(),
            reliable_index: Vec::new(),
            unreliable_index: Vec::new(),
            field,
            rs_factors: Vec::new(),
            last_l_fc: 0.0,
            last_l_sigma: 0.0,
            near,
            far,
        })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.grid
    }

    pub fn render_cfg(&self) -> &RenderConfig {
        &self.render_cfg
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn near_far(&self) -> (f64, f64) {
        (self.near, self.far)
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.stages.iter().map(|s| s.steps as u64).sum()
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn is_done(&self) -> bool {
        self.global_step >= self.total_steps()
    }

    pub fn warp_products(&self) -> &[WarpProduct] {
        &self.products
    }

    /// How many warp refreshes have run so far.
    pub fn refresh_count(&self) -> u64 {
        self.refresh_counter
    }

    pub fn reliability_field(&self) -> &ReliabilityField {
        &self.field
    }

    fn stage(&self) -> &StageConfig {
        &self.cfg.stages[self.stage_idx]
    }

    fn weights(&self) -> LossWeights {
        self.stage()
            .weights
            .resolve(self.dataset.bbox_diagonal())
    }

    /// The warp/reliability machinery only runs when something consumes it.
    fn needs_warps(&self) -> bool {
        let w = &self.stage().weights;
        w.lambda_rel > 0.0
            || w.lambda_unr > 0.0
            || w.lambda_f > 0.0
            || w.lambda_d > 0.0
            || self.cfg.reliability_weighting
    }

    /// Advance to the next stage: trilinear upsample, fresh optimizer.
    fn advance_stage(&mut self) -> Result<(), TrainError> {
        self.stage_idx += 1;
        self.step_in_stage = 0;
        let dims = self.cfg.stages[self.stage_idx].dims;
        self.grid = self.grid.upsample(dims)?;
        self.optimizer = OptimizerState::new(
            &self.grid,
            self.cfg.adam_beta1,
            self.cfg.adam_beta2,
            self.cfg.adam_eps,
        );
        Ok(())
    }

    fn render_depth_image(&self, cam: &crate::geometry::Camera) -> Result<DepthMap, TrainError> {
        let (_, depth) = render_image(&self.grid, cam, &self.render_cfg, self.near, self.far)?;
        Ok(depth)
    }

    /// Rebuild warp products from the current grid state and (per policy)
    /// the reliability field.
    fn refresh_warps(&mut self) -> Result<(), TrainError> {
        let spec = self.cfg.warp_poses;
        let base_cams: Vec<_> = self.dataset.train.iter().map(|v| v.camera.clone()).collect();
        let pose_seed = if self.cfg.warp_resample {
            self.cfg
                .seed
                .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(self.refresh_counter + 1))
        } else {
            self.cfg.seed.wrapping_add(0x9E3779B97F4A7C15)
        };
        let targets = sample_warp_poses(&base_cams, &spec, self.dataset.center(), pose_seed)?;
        let eps = self.cfg.eps_scale * self.dataset.bbox_diagonal();

        // Source-view assignment mirrors the sampler's output order.
        let mut pairs: Vec<(usize, crate::geometry::Camera)> = Vec::new();
        match spec.mode {
            WarpPoseMode::SphericalOffset => {
                let per_view = 4 * spec.count as usize;
                for (j, cam) in targets.into_iter().enumerate() {
                    pairs.push((j / per_view, cam));
                }
            }
            WarpPoseMode::Interpolation => {
                // Each adjacent pair yields `count` poses; warp from both
                // endpoints.
                let per_pair = spec.count as usize;
                for (j, cam) in targets.into_iter().enumerate() {
                    let pair_idx = j / per_pair;
                    pairs.push((pair_idx, cam.clone()));
                    pairs.push((pair_idx + 1, cam));
                }
            }
        }

        let mut src_depths: Vec<Option<DepthMap>> = vec![None; self.dataset.train.len()];
        let mut products = Vec::new();
        for (src, target) in pairs {
            if src_depths[src].is_none() {
                src_depths[src] = Some(self.render_depth_image(&self.dataset.train[src].camera)?);
            }
            let src_depth = src_depths[src].as_ref().expect("just rendered");
            let view = &self.dataset.train[src];
            let fw = forward_warp(&view.rgb, src_depth, &view.camera, &target)?;
            if fw.m_warp.count_set() == fw.m_warp.len() {
                continue; // nothing landed; degenerate pose
            }
            let rendered_dst = self.render_depth_image(&target)?;
            let mut product =
                WarpProduct::build(src, &view.camera, &target, src_depth, fw, &rendered_dst, eps)?;
            product.attach_ref_depth(&self.cfg.depth_provider)?;
            products.push(product);
        }
        self.products = products;

        self.reliable_index.clear();
        self.unreliable_index.clear();
        for (pi, product) in self.products.iter().enumerate() {
            for (x, y) in product.reliable_pixels() {
                self.reliable_index.push((pi, x, y));
            }
            for (x, y) in product.unreliable_pixels() {
                self.unreliable_index.push((pi, x, y));
            }
        }

        let rebuild_field = match self.cfg.reliability_refresh {
            ReliabilityRefresh::Warp => true,
            ReliabilityRefresh::Stage => self.step_in_stage == 0,
        };
        if rebuild_field {
            self.rebuild_reliability()?;
        }
        self.refresh_counter += 1;
        Ok(())
    }

    /// One ray per reliable warp pixel, capped by uniform subsampling.
    fn rebuild_reliability(&mut self) -> Result<(), TrainError> {
        let cap = self.cfg.reliability_ray_cap as usize;
        let mut picks: Vec<(usize, u32, u32)> = self.reliable_index.clone();
        if picks.len() > cap {
            // Deterministic partial shuffle from the main stream.
            for i in 0..cap {
                let j = i + (self.rng.random_range(0..(picks.len() - i) as u64)) as usize;
                picks.swap(i, j);
            }
            picks.truncate(cap);
        }
        let mut rays = Vec::with_capacity(picks.len());
        for (pi, x, y) in picks {
            let cam = &self.products[pi].target;
            let pr = camera_ray(cam, x, y, self.near, self.far)?;
            rays.push(pr.ray);
        }
        let (bmin, bmax) = self.grid.bbox();
        self.field = accumulate_reliability(self.grid.dims(), bmin, bmax, &rays);
        self.rs_factors = self.field.rho().iter().map(|&r| 1.0 + (-r).exp()).collect();
        Ok(())
    }

    /// Run one optimization step; returns the step record.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        assert!(!self.is_done(), "trainer already finished");
        let t0 = std::time::Instant::now();
        if self.step_in_stage >= self.stage().steps {
            self.advance_stage()?;
        }
        let needs_warps = self.needs_warps();
        if needs_warps && self.step_in_stage % self.cfg.warp_refresh_period == 0 {
            self.refresh_warps()?;
        }
        let weights = self.weights();
        let stage = self.stage().clone();

        // ---- Assemble the ray batch -------------------------------------
        let mut tasks: Vec<RayTask> = Vec::new();
        let batch = self.cfg.batch_rays as usize;

        // Input-view color supervision.
        let n_rgb = ((self.cfg.frac_rgb * batch as f64).round() as usize).max(1);
        let img_w = self.dataset.train[0].rgb.width();
        let img_h = self.dataset.train[0].rgb.height();
        for _ in 0..n_rgb {
            let vi = self.rng.random_range(0..self.dataset.train.len() as u64) as usize;
            let x = self.rng.random_range(0..img_w as u64) as u32;
            let y = self.rng.random_range(0..img_h as u64) as u32;
            let view = &self.dataset.train[vi];
            let pr = camera_ray(&view.camera, x, y, self.near, self.far)?;
            tasks.push(RayTask {
                ray: pr.ray,
                depth_scale: pr.depth_scale,
                color_target: Some(ColorTarget::Rgb(view.rgb.get(x, y))),
            });
        }

        // Reliable warp pixels: color supervision from the warped image.
        let mut n_rel_drawn = 0usize;
        if weights.lambda_rel > 0.0 && !self.reliable_index.is_empty() {
            let n_rel = (self.cfg.frac_rel * batch as f64).round() as usize;
            for _ in 0..n_rel {
                let pick =
                    self.rng.random_range(0..self.reliable_index.len() as u64) as usize;
                let (pi, x, y) = self.reliable_index[pick];
                let product = &self.products[pi];
                let pr = camera_ray(&product.target, x, y, self.near, self.far)?;
                tasks.push(RayTask {
                    ray: pr.ray,
                    depth_scale: pr.depth_scale,
                    color_target: Some(ColorTarget::Rel(product.rgb.get(x, y))),
                });
                n_rel_drawn += 1;
            }
        }

        // Unreliable anchors with their depth-ordering neighborhoods.
        let mut groups: Vec<OrderingGroup> = Vec::new();
        if weights.lambda_unr > 0.0 && !self.unreliable_index.is_empty() {
            let ray_budget = (self.cfg.frac_unr * batch as f64).round() as usize;
            let per_anchor = 1 + weights.n_pairs as usize;
            let n_anchors = (ray_budget / per_anchor).max(1);
            for _ in 0..n_anchors {
                let pick =
                    self.rng.random_range(0..self.unreliable_index.len() as u64) as usize;
                let (pi, x, y) = self.unreliable_index[pick];
                let product = &self.products[pi];
                let Some(ref_depth) = &product.ref_depth else {
                    continue;
                };
                let neighbors = losses::build_neighborhood(
                    ref_depth,
                    (x, y),
                    weights.window,
                    weights.tau_d,
                    weights.n_pairs,
                    self.cfg.seed ^ self.refresh_counter,
                );
                if neighbors.is_empty() {
                    continue;
                }
                let mut ray_indices = Vec::with_capacity(1 + neighbors.len());
                let mut ref_depths = Vec::with_capacity(1 + neighbors.len());
                let pr = camera_ray(&product.target, x, y, self.near, self.far)?;
                ray_indices.push(tasks.len());
                ref_depths.push(ref_depth.get(x, y));
                tasks.push(RayTask {
                    ray: pr.ray,
                    depth_scale: pr.depth_scale,
                    color_target: None,
                });
                for (qx, qy) in neighbors {
                    let pr = camera_ray(&product.target, qx, qy, self.near, self.far)?;
                    ray_indices.push(tasks.len());
                    ref_depths.push(ref_depth.get(qx, qy));
                    tasks.push(RayTask {
                        ray: pr.ray,
                        depth_scale: pr.depth_scale,
                        color_target: None,
                    });
                }
                groups.push(OrderingGroup {
                    ray_indices,
                    ref_depths,
                });
            }
        }

        // Ordering regularization on input views against external depth.
        if self.cfg.input_depth_reg && weights.lambda_unr > 0.0 {
            let candidates: Vec<usize> = self
                .dataset
                .train
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.depth.as_ref().map(|_| i))
                .collect();
            if !candidates.is_empty() {
                let n_anchors = 4;
                for _ in 0..n_anchors {
                    let vi = candidates
                        [self.rng.random_range(0..candidates.len() as u64) as usize];
                    let view = &self.dataset.train[vi];
                    let ref_depth = view.depth.as_ref().expect("filtered above");
                    let x = self.rng.random_range(0..img_w as u64) as u32;
                    let y = self.rng.random_range(0..img_h as u64) as u32;
                    let neighbors = losses::build_neighborhood(
                        ref_depth,
                        (x, y),
                        weights.window,
                        weights.tau_d,
                        weights.n_pairs,
                        self.cfg.seed ^ 0xD6E8FEB86659FD93,
                    );
                    if neighbors.is_empty() {
                        continue;
                    }
                    let mut ray_indices = Vec::with_capacity(1 + neighbors.len());
                    let mut ref_depths = Vec::with_capacity(1 + neighbors.len());
                    let pr = camera_ray(&view.camera, x, y, self.near, self.far)?;
                    ray_indices.push(tasks.len());
                    ref_depths.push(ref_depth.get(x, y));
                    tasks.push(RayTask {
                        ray: pr.ray,
                        depth_scale: pr.depth_scale,
                        color_target: None,
                    });
                    for (qx, qy) in neighbors {
                        let pr = camera_ray(&view.camera, qx, qy, self.near, self.far)?;
                        ray_indices.push(tasks.len());
                        ref_depths.push(ref_depth.get(qx, qy));
                        tasks.push(RayTask {
                            ray: pr.ray,
                            depth_scale: pr.depth_scale,
                            color_target: None,
                        });
                    }
                    groups.push(OrderingGroup {
                        ray_indices,
                        ref_depths,
                    });
                }
            }
        }

        // Depth-smoothness patches around sampled poses.
        let mut patches: Vec<DsPatchTask> = Vec::new();
        if weights.lambda_ds > 0.0 {
            let ps = self.cfg.ds_patch_size;
            for _ in 0..self.cfg.ds_patches_per_step {
                // Prefer warp targets (they regularize unobserved poses),
                // fall back to train views.
                let cam = if !self.products.is_empty() {
                    let pi = self.rng.random_range(0..self.products.len() as u64) as usize;
                    self.products[pi].target.clone()
                } else {
                    let vi = self.rng.random_range(0..self.dataset.train.len() as u64) as usize;
                    self.dataset.train[vi].camera.clone()
                };
                if cam.width() < ps || cam.height() < ps {
                    continue;
                }
                let x0 = self.rng.random_range(0..(cam.width() - ps + 1) as u64) as u32;
                let y0 = self.rng.random_range(0..(cam.height() - ps + 1) as u64) as u32;
                let mut ray_indices = Vec::with_capacity((ps * ps) as usize);
                for dy in 0..ps {
                    for dx in 0..ps {
                        let pr = camera_ray(&cam, x0 + dx, y0 + dy, self.near, self.far)?;
                        ray_indices.push(tasks.len());
                        tasks.push(RayTask {
                            ray: pr.ray,
                            depth_scale: pr.depth_scale,
                            color_target: None,
                        });
                    }
                }
                patches.push(DsPatchTask {
                    ray_indices,
                    width: ps,
                    height: ps,
                });
            }
        }

        // ---- Forward ----------------------------------------------------
        #[cfg(feature = "parallel")]
        let outs: Result<Vec<RayRender>, RenderError> = tasks
            .par_iter()
            .map(|t| render_ray(&self.grid, &t.ray, &self.render_cfg))
            .collect();
        #[cfg(not(feature = "parallel"))]
        let outs: Result<Vec<RayRender>, RenderError> = tasks
            .iter()
            .map(|t| render_ray(&self.grid, &t.ray, &self.render_cfg))
            .collect();
        let outs = outs?;

        let mut d_color = vec![[0.0f64; 3]; tasks.len()];
        let mut d_depth_t = vec![0.0f64; tasks.len()];

        // ---- Color losses -----------------------------------------------
        let mut rgb_rendered = Vec::new();
        let mut rgb_target = Vec::new();
        let mut rgb_idx = Vec::new();
        let mut rel_rendered = Vec::new();
        let mut rel_target = Vec::new();
        let mut rel_idx = Vec::new();
        for (i, task) in tasks.iter().enumerate() {
            match &task.color_target {
                Some(ColorTarget::Rgb(c)) => {
                    rgb_rendered.push(outs[i].color);
                    rgb_target.push(*c);
                    rgb_idx.push(i);
                }
                Some(ColorTarget::Rel(c)) => {
                    rel_rendered.push(outs[i].color);
                    rel_target.push(*c);
                    rel_idx.push(i);
                }
                None => {}
            }
        }
        let (l_rgb, rgb_grads) = losses::loss_rgb(&rgb_rendered, &rgb_target);
        for (k, &i) in rgb_idx.iter().enumerate() {
            d_color[i] = rgb_grads[k];
        }
        let (l_rel, rel_grads) = losses::loss_rgb(&rel_rendered, &rel_target);
        for (k, &i) in rel_idx.iter().enumerate() {
            for ch in 0..3 {
                d_color[i][ch] += weights.lambda_rel * rel_grads[k][ch];
            }
        }

        // ---- Ordering loss ------------------------------------------------
        let mut l_unr = 0.0;
        let mut unr_pairs: u64 = 0;
        {
            let mut total = 0.0;
            let mut contribs: Vec<(usize, f64)> = Vec::new();
            for group in &groups {
                let anchor = group.ray_indices[0];
                let za = outs[anchor].depth * tasks[anchor].depth_scale;
                for k in 1..group.ray_indices.len() {
                    let qi = group.ray_indices[k];
                    let zq = outs[qi].depth * tasks[qi].depth_scale;
                    let (v, gp, gq) = losses::pair_penalty(
                        za,
                        zq,
                        group.ref_depths[0],
                        group.ref_depths[k],
                        weights.margin,
                    );
                    total += v;
                    unr_pairs += 1;
                    if gp != 0.0 {
                        contribs.push((anchor, gp));
                    }
                    if gq != 0.0 {
                        contribs.push((qi, gq));
                    }
                }
            }
            if unr_pairs > 0 {
                l_unr = total / unr_pairs as f64;
                let denom = unr_pairs as f64;
                for (i, g) in contribs {
                    // Chain z = t * depth_scale and the lambda weight.
                    d_depth_t[i] += weights.lambda_unr * g / denom * tasks[i].depth_scale;
                }
            }
        }

        // ---- Depth smoothness ---------------------------------------------
        let mut l_ds = 0.0;
        if !patches.is_empty() {
            let mut maps = Vec::with_capacity(patches.len());
            for p in &patches {
                let mut map = DepthMap::new(p.width, p.height)?;
                for (j, &ri) in p.ray_indices.iter().enumerate() {
                    let x = j as u32 % p.width;
                    let y = j as u32 / p.width;
                    map.set(x, y, outs[ri].depth * tasks[ri].depth_scale);
                }
                maps.push(map);
            }
            let (value, grads) = losses::loss_ds(&maps)?;
            l_ds = value;
            for (p, grad) in patches.iter().zip(&grads) {
                for (j, &ri) in p.ray_indices.iter().enumerate() {
                    let x = j as u32 % p.width;
                    let y = j as u32 / p.width;
                    d_depth_t[ri] +=
                        weights.lambda_ds * grad.get(x, y) * tasks[ri].depth_scale;
                }
            }
        }

        // ---- Backward -----------------------------------------------------
        self.grid.zero_grads();
        for (i, task) in tasks.iter().enumerate() {
            if d_color[i] == [0.0; 3] && d_depth_t[i] == 0.0 {
                continue;
            }
            backprop_ray(
                &mut self.grid,
                &task.ray,
                &self.render_cfg,
                &outs[i].trace,
                d_color[i],
                d_depth_t[i],
            )?;
        }

        // ---- Voxel smoothing (direct grid gradients) ----------------------
        if (weights.lambda_f > 0.0 || weights.lambda_d > 0.0)
            && self.step_in_stage % self.cfg.rs_every == 0
        {
            if self.rs_factors.len() != self.grid.node_count()
                || self.field.dims() != self.grid.dims()
            {
                // No matching field yet (fresh stage without warps): the
                // factor degenerates to 2 everywhere.
                self.rs_factors = vec![2.0; self.grid.node_count()];
            }
            let mut scaled = weights;
            scaled.lambda_f *= self.cfg.rs_every as f64;
            scaled.lambda_d *= self.cfg.rs_every as f64;
            let dims = self.grid.dims();
            let (fc, sigma) =
                losses::loss_rs_with_factors(&mut self.grid, &self.rs_factors, dims, &scaled)?;
            self.last_l_fc = fc;
            self.last_l_sigma = sigma;
        }
        let l_fc = self.last_l_fc;
        let l_sigma = self.last_l_sigma;

        let report = loss_total(
            l_rgb,
            l_rel,
            l_unr,
            l_fc,
            l_sigma,
            l_ds,
            &weights,
            (
                rgb_idx.len() as u64,
                n_rel_drawn as u64,
                unr_pairs,
                patches.len() as u64,
            ),
        )?;

        // ---- Reliability weighting + optimizer ----------------------------
        if self.cfg.reliability_weighting && self.field.dims() == self.grid.dims() {
            apply_reliability_weights(&mut self.grid, &self.field)?;
        }
        let frac = self.step_in_stage as f64 / stage.steps as f64;
        let decay = self.cfg.lr_decay.powf(frac);
        adam_step(
            &mut self.grid,
            &mut self.optimizer,
            stage.lr_density * decay,
            stage.lr_color * decay,
        )?;

        let psnr_train_batch = if l_rgb > 0.0 {
            10.0 * (1.0 / l_rgb).log10()
        } else {
            f64::INFINITY
        };
        let record = StepRecord {
            step: self.global_step,
            stage: self.stage_idx,
            losses: report,
            psnr_train_batch,
            ms: t0.elapsed().as_millis() as u64,
        };
        self.step_in_stage += 1;
        self.global_step += 1;
        Ok(record)
    }
}

/// Run the full schedule, invoking `on_step` with every record.
pub fn train(
    dataset: Dataset,
    cfg: TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutput, TrainError> {
    let mut trainer = Trainer::new(dataset, cfg)?;
    let mut records = Vec::with_capacity(trainer.total_steps() as usize);
    while !trainer.is_done() {
        let record = trainer.step()?;
        on_step(&record);
        records.push(record);
    }
    Ok(TrainOutput {
        grid: trainer.into_grid(),
        records,
    })
}
