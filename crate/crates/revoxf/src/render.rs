//! Discretized emission-absorption volume rendering of color and depth
//! along rays, forward and backward.
//!
//! Quadrature: fixed-step sampling over the ray segment clipped to the grid
//! bounding box, `alpha = 1 - exp(-sigma * delta)`, weights `w = T * alpha`.
//! Transmittance is updated as `T -= w`, so `sum(w) + T_final == 1` holds
//! exactly in floating point.
//!
//! Per-ray depth is in ray-length units. Image-space depth maps are
//! camera-frame z; `Camera::depth_scale` converts between the two per pixel.

use nalgebra::Vector2;
use thiserror::Error;

use crate::geometry::{pixel_to_ray, Camera, GeometryError, Ray};
use crate::img::{DepthMap, ImageRgb, ImgError};
use crate::voxel::{clip_to_bbox, VoxelError, VoxelGrid};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("render config invalid: {0}")]
    BadConfig(String),
    #[error("non-finite {0} encountered at t = {1:.4} (training bug signal)")]
    NonFinite(&'static str, f64),
    #[error("ray has unbounded t_far; set scene bounds before rendering")]
    UnboundedRay,
    #[error("trace was recorded at grid epoch {trace} but grid is at {grid}")]
    StaleTrace { trace: u64, grid: u64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Img(#[from] ImgError),
}

/// Rendered background behind the scene content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    White,
    Black,
}

impl Background {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Background::White => [1.0, 1.0, 1.0],
            Background::Black => [0.0, 0.0, 0.0],
        }
    }
}

/// Quadrature and activation settings for volume rendering.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    /// Step length as a fraction of the voxel diagonal.
    pub step_size: f64,
    pub background: Background,
    /// Raw density passes through softplus(raw + shift); the negative
    /// default keeps fresh grids near-transparent.
    pub density_shift: f64,
    /// Pass raw color through a sigmoid. Disable for grids baked with
    /// literal color values.
    pub sigmoid_color: bool,
    /// Stop marching once transmittance falls below this floor. Zero
    /// disables early stopping (gradient tests rely on that).
    pub early_stop_t: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            background: Background::White,
            density_shift: -4.0,
            sigmoid_color: true,
            early_stop_t: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.step_size > 0.0 && self.step_size <= 2.0) {
            return Err(RenderError::BadConfig(format!(
                "step_size {} outside (0, 2]",
                self.step_size
            )));
        }
        if !(0.0..=1e-2).contains(&self.early_stop_t) {
            return Err(RenderError::BadConfig(format!(
                "early_stop_t {} outside [0, 1e-2]",
                self.early_stop_t
            )));
        }
        Ok(())
    }
}

/// One quadrature sample along a ray: activated density and color plus the
/// compositing coefficients derived from them.
#[derive(Debug, Clone, Copy)]
pub struct TraceSample {
    pub t: f64,
    pub delta: f64,
    pub sigma: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    pub weight: f64,
}

/// Full record of a forward render along one ray; consumed by the adjoint.
#[derive(Debug, Clone)]
pub struct RaySampleTrace {
    pub samples: Vec<TraceSample>,
    /// Transmittance remaining after the last sample.
    pub t_final: f64,
    /// Grid epoch at forward time; the adjoint refuses stale traces.
    pub epoch: u64,
}

/// Color and expected ray-length depth for one ray, plus the trace needed
/// to backpropagate through the quadrature.
#[derive(Debug, Clone)]
pub struct RayRender {
    pub color: [f64; 3],
    pub depth: f64,
    pub trace: RaySampleTrace,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 34.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of softplus expressed through its output: sigma = softplus(x)
/// implies softplus'(x) = 1 - exp(-sigma).
#[inline]
fn softplus_grad_from_output(sigma: f64) -> f64 {
    1.0 - (-sigma).exp()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid; clamps away from 0 and 1 for bakeable colors.
pub fn logit(y: f64) -> f64 {
    let y = y.clamp(1e-7, 1.0 - 1e-7);
    (y / (1.0 - y)).ln()
}

/// Inverse of `softplus(raw + shift) = sigma` for baking density.
pub fn inverse_density_activation(sigma: f64, shift: f64) -> f64 {
    let sigma = sigma.max(1e-12);
    let raw = if sigma > 34.0 {
        sigma
    } else {
        (sigma.exp() - 1.0).max(1e-300).ln()
    };
    raw - shift
}

fn march<const RECORD: bool>(
    grid: &VoxelGrid,
    ray: &Ray,
    cfg: &RenderConfig,
) -> Result<RayRender, RenderError> {
    if !ray.t_far.is_finite() {
        return Err(RenderError::UnboundedRay);
    }
    let bg = cfg.background.rgb();
    let (bmin, bmax) = grid.bbox();
    let Some((t0, t1)) = clip_to_bbox(ray, bmin, bmax) else {
        return Ok(RayRender {
            color: bg,
            depth: ray.t_far,
            trace: RaySampleTrace {
                samples: Vec::new(),
                t_final: 1.0,
                epoch: grid.epoch(),
            },
        });
    };

    let span = t1 - t0;
    let step = cfg.step_size * grid.voxel_diagonal();
    let n = ((span / step).ceil() as usize).max(1);
    let delta = span / n as f64;

    let mut samples = Vec::with_capacity(if RECORD { n } else { 0 });
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for k in 0..n {
        let t = t0 + (k as f64 + 0.5) * delta;
        let p = ray.at(t);
        let (raw_sigma, raw_color) = match grid.sample_density_color(p) {
            Ok(v) => v,
            // Boundary-grazing samples can fall a ulp outside the box.
            Err(VoxelError::OutsideBbox(..)) => continue,
            Err(e) => return Err(e.into()),
        };
        let sigma = softplus(raw_sigma + cfg.density_shift);
        if !sigma.is_finite() {
            return Err(RenderError::NonFinite("density", t));
        }
        let c = if cfg.sigmoid_color {
            [sigmoid(raw_color[0]), sigmoid(raw_color[1]), sigmoid(raw_color[2])]
        } else {
            raw_color
        };
        if c.iter().any(|v| !v.is_finite()) {
            return Err(RenderError::NonFinite("color", t));
        }
        let alpha = 1.0 - (-sigma * delta).exp();
        let weight = transmittance * alpha;
        color[0] += weight * c[0];
        color[1] += weight * c[1];
        color[2] += weight * c[2];
        depth += weight * t;
        transmittance -= weight;
        if RECORD {
            samples.push(TraceSample {
                t,
                delta,
                sigma,
                color: c,
                alpha,
                weight,
            });
        }
        if transmittance < cfg.early_stop_t {
            break;
        }
    }
    color[0] += transmittance * bg[0];
    color[1] += transmittance * bg[1];
    color[2] += transmittance * bg[2];
    depth += transmittance * ray.t_far;
    Ok(RayRender {
        color,
        depth,
        trace: RaySampleTrace {
            samples,
            t_final: transmittance,
            epoch: grid.epoch(),
        },
    })
}

/// Render one ray against the grid, recording the trace the adjoint needs.
/// Rays missing the bounding box return pure background, depth `t_far`,
/// and an empty trace.
pub fn render_ray(grid: &VoxelGrid, ray: &Ray, cfg: &RenderConfig) -> Result<RayRender, RenderError> {
    march::<true>(grid, ray, cfg)
}

/// Forward-only render: identical quadrature without the trace. Use for
/// evaluation and depth-map generation where no backward pass follows.
pub fn render_ray_forward(
    grid: &VoxelGrid,
    ray: &Ray,
    cfg: &RenderConfig,
) -> Result<([f64; 3], f64), RenderError> {
    let out = march::<false>(grid, ray, cfg)?;
    Ok((out.color, out.depth))
}

/// Adjoint of `render_ray`: accumulates
/// `d(d_color . color + d_depth * depth) / d(raw grid values)` into the
/// grid's gradient buffers. The trace must come from a forward call on the
/// current grid state.
pub fn backprop_ray(
    grid: &mut VoxelGrid,
    ray: &Ray,
    cfg: &RenderConfig,
    trace: &RaySampleTrace,
    d_color: [f64; 3],
    d_depth: f64,
) -> Result<(), RenderError> {
    if trace.epoch != grid.epoch() {
        return Err(RenderError::StaleTrace {
            trace: trace.epoch,
            grid: grid.epoch(),
        });
    }
    let bg = cfg.background.rgb();
    let value_bg = d_color[0] * bg[0] + d_color[1] * bg[1] + d_color[2] * bg[2] + d_depth * ray.t_far;

    // Suffix accumulator: s_k = sum_{j>k} w_j u_j + T_final * u_bg, where
    // u_j = d_color . c_j + d_depth * t_j. Then
    //   dL/d sigma_k = delta_k * (T_{k+1} u_k - s_k)
    // with T_{k+1} rebuilt backwards from T_final.
    let mut suffix = trace.t_final * value_bg;
    let mut t_next = trace.t_final;
    for s in trace.samples.iter().rev() {
        let u = d_color[0] * s.color[0] + d_color[1] * s.color[1] + d_color[2] * s.color[2]
            + d_depth * s.t;
        let d_sigma = s.delta * (t_next * u - suffix);
        let d_raw_sigma = d_sigma * softplus_grad_from_output(s.sigma);

        let mut d_raw_color = [0.0; 3];
        for ch in 0..3 {
            let dc = s.weight * d_color[ch];
            d_raw_color[ch] = if cfg.sigmoid_color {
                dc * s.color[ch] * (1.0 - s.color[ch])
            } else {
                dc
            };
        }

        let p = ray.at(s.t);
        match grid.backprop_density_color(p, d_raw_sigma, d_raw_color) {
            Ok(()) => {}
            Err(VoxelError::OutsideBbox(..)) => {}
            Err(e) => return Err(e.into()),
        }

        suffix += s.weight * u;
        t_next += s.weight;
    }
    Ok(())
}

/// A camera ray through a pixel center plus the factor converting its
/// ray-length depth to camera-frame z.
#[derive(Debug, Clone)]
pub struct PixelRay {
    pub ray: Ray,
    pub depth_scale: f64,
}

/// Build the bounded ray through pixel center `(x + 0.5, y + 0.5)`.
pub fn camera_ray(
    cam: &Camera,
    x: u32,
    y: u32,
    t_near: f64,
    t_far: f64,
) -> Result<PixelRay, GeometryError> {
    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
    let ray = pixel_to_ray(cam, p)?.with_bounds(t_near, t_far)?;
    Ok(PixelRay {
        ray,
        depth_scale: cam.depth_scale(p),
    })
}

/// Render a full image: per-pixel `render_ray` over all pixel centers.
/// The returned depth map holds camera-frame z. Deterministic.
pub fn render_image(
    grid: &VoxelGrid,
    cam: &Camera,
    cfg: &RenderConfig,
    t_near: f64,
    t_far: f64,
) -> Result<(ImageRgb, DepthMap), RenderError> {
    cfg.validate()?;
    let w = cam.width();
    let h = cam.height();

    let render_row = |y: u32| -> Result<Vec<([f64; 3], f64)>, RenderError> {
        let mut row = Vec::with_capacity(w as usize);
        for x in 0..w {
            let pr = camera_ray(cam, x, y, t_near, t_far)?;
            let (color, depth) = render_ray_forward(grid, &pr.ray, cfg)?;
            row.push((color, depth * pr.depth_scale));
        }
        Ok(row)
    };

    #[cfg(feature = "parallel")]
    let rows: Result<Vec<_>, RenderError> = (0..h).into_par_iter().map(render_row).collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Result<Vec<_>, RenderError> = (0..h).map(render_row).collect();
    let rows = rows?;

    let mut rgb = ImageRgb::new(w, h)?;
    let mut depth = DepthMap::new(w, h)?;
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d)) in row.into_iter().enumerate() {
            rgb.set(x as u32, y as u32, c);
            depth.set(x as u32, y as u32, d);
        }
    }
    Ok((rgb, depth))
}
