//! Calibrated pinhole cameras, ray generation, and cross-view pixel
//! transport.
//!
//! Conventions used throughout the crate:
//! - Camera frame: +x right, +y down, +z forward. A point in front of the
//!   camera has camera-frame z > 0, and "depth" always means that z.
//! - Continuous pixel coordinates span `[0, width) x [0, height)` with the
//!   center of integer pixel `(i, j)` at `(i + 0.5, j + 0.5)`.
//! - Extrinsics map world to camera; the stored matrix is the inverse of the
//!   camera-to-world pose.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pixel ({0:.3}, {1:.3}) outside image bounds {2}x{3}")]
    PixelOutOfBounds(f64, f64, u32, u32),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("point behind camera (camera-frame z = {0:.6})")]
    BehindCamera(f64),
    #[error("intrinsics must be invertible with positive focal lengths")]
    BadIntrinsics,
    #[error("extrinsic rotation block is not a rotation (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("image size {0}x{1} is invalid")]
    BadImageSize(u32, u32),
    #[error("ray bounds invalid: t_near {0}, t_far {1}")]
    BadRayBounds(f64, f64),
    #[error("warp pose spec invalid: {0}")]
    BadPoseSpec(String),
    #[error("pose sampling needs at least {needed} base camera(s), got {got}")]
    NotEnoughBases { needed: usize, got: usize },
}

/// Calibrated pinhole camera: intrinsics, world-to-camera extrinsics, and
/// image size. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    world_to_cam: Matrix4<f64>,
    cam_to_world: Matrix4<f64>,
    width: u32,
    height: u32,
}

impl Camera {
    /// Build a camera from intrinsics `k` and a rigid world-to-camera
    /// transform `world_to_cam`. Validates invertibility of `k`, positive
    /// focal lengths, and orthonormality of the rotation block.
    pub fn new(
        k: Matrix3<f64>,
        world_to_cam: Matrix4<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::BadImageSize(width, height));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(GeometryError::BadIntrinsics);
        }
        let k_inv = k.try_inverse().ok_or(GeometryError::BadIntrinsics)?;
        let r = world_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        if dev > ROTATION_TOL || (r.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotARotation(dev));
        }
        let bottom_ok = world_to_cam.row(3) == Matrix4::identity().row(3);
        if !bottom_ok {
            return Err(GeometryError::NotARotation(f64::NAN));
        }
        let mut cam_to_world = Matrix4::identity();
        let rt = r.transpose();
        let t = world_to_cam.fixed_view::<3, 1>(0, 3).into_owned();
        cam_to_world.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        cam_to_world
            .fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&(-rt * t));
        Ok(Self {
            k,
            k_inv,
            world_to_cam,
            cam_to_world,
            width,
            height,
        })
    }

    /// Simple symmetric-pinhole constructor: focal lengths and principal
    /// point in pixels, identity skew.
    pub fn from_pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_cam: Matrix4<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self::new(k, world_to_cam, width, height)
    }

    /// Camera at `eye` aimed at `target`, rolled so that world `up` maps to
    /// image up (-y).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        k: Matrix3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(GeometryError::BadPoseSpec(
                "look-at eye coincides with target".into(),
            ));
        }
        let z_axis = forward.normalize();
        let mut x_axis = z_axis.cross(&up);
        if x_axis.norm() < 1e-9 {
            // Viewing direction parallel to up; fall back to world x.
            x_axis = z_axis.cross(&Vector3::x());
            if x_axis.norm() < 1e-9 {
                x_axis = z_axis.cross(&Vector3::y());
            }
        }
        let x_axis = x_axis.normalize();
        let y_axis = z_axis.cross(&x_axis);
        let r = Matrix3::from_rows(&[x_axis.transpose(), y_axis.transpose(), z_axis.transpose()]);
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-r * eye));
        Self::new(k, w2c, width, height)
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    #[inline]
    pub fn world_to_cam(&self) -> &Matrix4<f64> {
        &self.world_to_cam
    }

    #[inline]
    pub fn cam_to_world(&self) -> &Matrix4<f64> {
        &self.cam_to_world
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        self.cam_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// World-space viewing direction (camera +z).
    pub fn forward(&self) -> Vector3<f64> {
        self.cam_to_world.fixed_view::<3, 1>(0, 2).into_owned()
    }

    /// Rotation block of the world-to-camera transform.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_cam.fixed_view::<3, 3>(0, 0).into_owned()
    }

    fn in_bounds(&self, p: Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }

    /// Back-projected camera-frame direction of a pixel, z normalized to 1.
    #[inline]
    fn pixel_dir_cam(&self, p: Vector2<f64>) -> Vector3<f64> {
        self.k_inv * Vector3::new(p.x, p.y, 1.0)
    }

    /// Conversion factor from ray-length units to camera-frame depth for the
    /// ray through pixel `p`: `z = depth_scale(p) * t` for a unit-direction
    /// ray. Always in (0, 1].
    pub fn depth_scale(&self, p: Vector2<f64>) -> f64 {
        1.0 / self.pixel_dir_cam(p).norm()
    }

    /// Same camera with intrinsics and image size scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, GeometryError> {
        let mut k = self.k;
        k[(0, 0)] *= factor;
        k[(1, 1)] *= factor;
        k[(0, 2)] *= factor;
        k[(1, 2)] *= factor;
        k[(0, 1)] *= factor;
        let w = (self.width as f64 * factor).round() as u32;
        let h = (self.height as f64 * factor).round() as u32;
        Self::new(k, self.world_to_cam, w, h)
    }
}

/// World-space ray with unit direction and sampling bounds in scene units.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(
        origin: Vector3<f64>,
        direction: Vector3<f64>,
        t_near: f64,
        t_far: f64,
    ) -> Result<Self, GeometryError> {
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(GeometryError::BadRayBounds(t_near, t_far));
        }
        let n = direction.norm();
        if n < 1e-12 || !n.is_finite() {
            return Err(GeometryError::BadRayBounds(t_near, t_far));
        }
        Ok(Self {
            origin,
            direction: direction / n,
            t_near,
            t_far,
        })
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    pub fn with_bounds(&self, t_near: f64, t_far: f64) -> Result<Self, GeometryError> {
        Ray::new(self.origin, self.direction, t_near, t_far)
    }
}

/// Ray through a pixel center, cast from the camera's optical center.
/// Bounds default to `[0, +inf)`; callers clamp to scene bounds.
pub fn pixel_to_ray(cam: &Camera, p: Vector2<f64>) -> Result<Ray, GeometryError> {
    if !cam.in_bounds(p) {
        return Err(GeometryError::PixelOutOfBounds(
            p.x, p.y, cam.width, cam.height,
        ));
    }
    let dir_cam = cam.pixel_dir_cam(p);
    let dir_world = cam.cam_to_world.fixed_view::<3, 3>(0, 0) * dir_cam;
    Ray::new(cam.position(), dir_world, 0.0, f64::INFINITY)
}

/// Lift pixel `p` to the world point at camera-frame depth `depth`.
pub fn pixel_to_world(
    cam: &Camera,
    p: Vector2<f64>,
    depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let x_cam = cam.pixel_dir_cam(p) * depth;
    let h = cam.cam_to_world * Vector4::new(x_cam.x, x_cam.y, x_cam.z, 1.0);
    Ok(h.xyz())
}

/// Perspective projection of a world point; returns the continuous pixel
/// coordinate and the camera-frame depth. The pixel may land outside the
/// image bounds; points at or behind the camera plane are an error.
pub fn world_to_pixel(
    cam: &Camera,
    x: Vector3<f64>,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    let h = cam.world_to_cam * Vector4::new(x.x, x.y, x.z, 1.0);
    let z = h.z;
    if !(z > 0.0) {
        return Err(GeometryError::BehindCamera(z));
    }
    let proj = cam.k * h.xyz();
    Ok((Vector2::new(proj.x / z, proj.y / z), z))
}

/// Transport a source pixel with known depth into the destination view:
/// the composition of `pixel_to_world` and `world_to_pixel`.
pub fn warp_pixel(
    src: &Camera,
    dst: &Camera,
    p: Vector2<f64>,
    depth: f64,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    let world = pixel_to_world(src, p, depth)?;
    world_to_pixel(dst, world)
}

/// How pseudo-novel warp target poses are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarpPoseMode {
    /// Offset each base pose on its viewing sphere by random polar/azimuth
    /// angles and re-aim at the scene center (inward-facing scenes).
    SphericalOffset,
    /// Interpolate between adjacent base poses (forward-facing scenes).
    Interpolation,
}

/// Sampling spec for warp target poses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WarpPoseSpec {
    pub mode: WarpPoseMode,
    /// Lower bound of the angular offset, degrees.
    pub angle_lo: f64,
    /// Upper bound of the angular offset, degrees.
    pub angle_hi: f64,
    /// Spherical mode: (theta, phi) draws per base view, each expanded to
    /// the four sign combinations. Interpolation mode: poses per adjacent
    /// pair.
    pub count: u32,
}

impl WarpPoseSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(0.0 <= self.angle_lo && self.angle_lo <= self.angle_hi && self.angle_hi < 90.0) {
            return Err(GeometryError::BadPoseSpec(format!(
                "angle range [{}, {}] must satisfy 0 <= lo <= hi < 90",
                self.angle_lo, self.angle_hi
            )));
        }
        if self.count == 0 {
            return Err(GeometryError::BadPoseSpec("count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pose with translation linearly interpolated and rotation spherically
/// interpolated between two cameras. `w = 0` and `w = 1` reproduce the
/// endpoints exactly.
pub fn interpolate_pose(a: &Camera, b: &Camera, w: f64) -> Result<Camera, GeometryError> {
    if w == 0.0 {
        return Ok(a.clone());
    }
    if w == 1.0 {
        return Ok(b.clone());
    }
    let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(a.rotation()));
    let qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(b.rotation()));
    let q = qa.slerp(&qb, w);
    let r = q.to_rotation_matrix().into_inner();
    let eye = a.position() * (1.0 - w) + b.position() * w;
    let mut w2c = Matrix4::identity();
    w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-r * eye));
    Camera::new(*a.intrinsics(), w2c, a.width(), a.height())
}

/// Sample pseudo-novel warp target poses around the base cameras.
///
/// Spherical-offset mode assumes every base camera looks at `scene_center`;
/// each draw of (theta, phi) in `[angle_lo, angle_hi]` degrees yields the
/// four offsets {(t,p), (-t,p), (t,-p), (-t,-p)} applied to the base
/// position's polar/azimuth coordinates (world +z up), after which the
/// camera is re-aimed at the center. Interpolation mode draws `count`
/// random blend weights per adjacent base pair. Deterministic given `seed`.
pub fn sample_warp_poses(
    bases: &[Camera],
    spec: &WarpPoseSpec,
    scene_center: Vector3<f64>,
    seed: u64,
) -> Result<Vec<Camera>, GeometryError> {
    spec.validate()?;
    if bases.is_empty() {
        return Err(GeometryError::NotEnoughBases { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    match spec.mode {
        WarpPoseMode::SphericalOffset => {
            for base in bases {
                for _ in 0..spec.count {
                    let theta = deg_to_rad(draw_angle(&mut rng, spec));
                    let phi = deg_to_rad(draw_angle(&mut rng, spec));
                    for (st, sp) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                        out.push(offset_on_sphere(
                            base,
                            scene_center,
                            st * theta,
                            sp * phi,
                        )?);
                    }
                }
            }
        }
        WarpPoseMode::Interpolation => {
            if bases.len() < 2 {
                return Err(GeometryError::NotEnoughBases {
                    needed: 2,
                    got: bases.len(),
                });
            }
            for pair in bases.windows(2) {
                for _ in 0..spec.count {
                    let w: f64 = rng.random();
                    out.push(interpolate_pose(&pair[0], &pair[1], w)?);
                }
            }
        }
    }
    Ok(out)
}

fn draw_angle(rng: &mut ChaCha8Rng, spec: &WarpPoseSpec) -> f64 {
    if spec.angle_hi == spec.angle_lo {
        spec.angle_lo
    } else {
        let u: f64 = rng.random();
        spec.angle_lo + u * (spec.angle_hi - spec.angle_lo)
    }
}

fn deg_to_rad(d: f64) -> f64 {
    d * std::f64::consts::PI / 180.0
}

/// Move a camera on its viewing sphere around `center` by polar offset
/// `d_polar` and azimuth offset `d_azimuth` (radians), then re-aim at the
/// center. Polar angle is measured from world +z.
fn offset_on_sphere(
    base: &Camera,
    center: Vector3<f64>,
    d_polar: f64,
    d_azimuth: f64,
) -> Result<Camera, GeometryError> {
    let rel = base.position() - center;
    let radius = rel.norm();
    if radius < 1e-12 {
        return Err(GeometryError::BadPoseSpec(
            "base camera sits on the scene center".into(),
        ));
    }
    let polar = (rel.z / radius).clamp(-1.0, 1.0).acos();
    let azimuth = rel.y.atan2(rel.x);
    let polar = (polar + d_polar).clamp(1e-6, std::f64::consts::PI - 1e-6);
    let azimuth = azimuth + d_azimuth;
    let eye = center
        + radius
            * Vector3::new(
                polar.sin() * azimuth.cos(),
                polar.sin() * azimuth.sin(),
                polar.cos(),
            );
    Camera::look_at(
        eye,
        center,
        Vector3::z(),
        *base.intrinsics(),
        base.width(),
        base.height(),
    )
}

/// Recover (polar, azimuth) of a camera position relative to `center`,
/// radians. Used by pose-sampling tests and the warp-degree sweep.
pub fn polar_azimuth(position: Vector3<f64>, center: Vector3<f64>) -> (f64, f64) {
    let rel = position - center;
    let r = rel.norm();
    ((rel.z / r).clamp(-1.0, 1.0).acos(), rel.y.atan2(rel.x))
}
