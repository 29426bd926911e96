//! Dataset ingestion, image and depth file I/O, checkpoint persistence,
//! and the procedural oracle scene generator.

pub mod checkpoint;
pub mod llff;
pub mod nerf;
pub mod oracle;
pub mod pfm;
pub mod png_io;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::Camera;
use crate::img::{DepthMap, ImageRgb};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset load error at {path}: {reason}")]
    Load { path: String, reason: String },
    #[error(transparent)]
    Png(#[from] png_io::PngError),
    #[error(transparent)]
    Pfm(#[from] pfm::PfmError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

pub(crate) fn load_err(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> DataError {
    DataError::Load {
        path: path.as_ref().display().to_string(),
        reason: reason.into(),
    }
}

/// One posed input or evaluation view.
#[derive(Debug, Clone)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub rgb: ImageRgb,
    /// External per-view depth (e.g. from an offline estimator); optional.
    pub depth: Option<DepthMap>,
}

/// A loaded scene: train/test views plus scene geometry defaults.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Dataset {
    pub fn center(&self) -> Vector3<f64> {
        (self.bbox_min + self.bbox_max) * 0.5
    }

    pub fn bbox_diagonal(&self) -> f64 {
        (self.bbox_max - self.bbox_min).norm()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.train.is_empty() {
            return Err(load_err("<dataset>", "no training views"));
        }
        if (0..3).any(|a| !(self.bbox_min[a] < self.bbox_max[a])) {
            return Err(load_err("<dataset>", "degenerate scene bbox"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(load_err(
                "<dataset>",
                format!("bad near/far: {} / {}", self.near, self.far),
            ));
        }
        let dims: Vec<(u32, u32)> = self
            .train
            .iter()
            .map(|v| (v.rgb.width(), v.rgb.height()))
            .collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(load_err("<dataset>", "train views differ in image size"));
        }
        for v in self.train.iter().chain(self.test.iter()) {
            if v.camera.width() != v.rgb.width() || v.camera.height() != v.rgb.height() {
                return Err(load_err(&v.name, "camera size differs from image size"));
            }
            if let Some(d) = &v.depth {
                if d.width() != v.rgb.width() || d.height() != v.rgb.height() {
                    return Err(load_err(&v.name, "depth size differs from image size"));
                }
            }
        }
        Ok(())
    }

    /// Near/far defaults from camera distances to the bbox when the dataset
    /// format does not carry them.
    pub fn derive_near_far(
        cameras: &[Camera],
        bbox_min: Vector3<f64>,
        bbox_max: Vector3<f64>,
    ) -> (f64, f64) {
        let center = (bbox_min + bbox_max) * 0.5;
        let radius = (bbox_max - bbox_min).norm() * 0.5;
        let mut dmin = f64::INFINITY;
        let mut dmax: f64 = 0.0;
        for cam in cameras {
            let d = (cam.position() - center).norm();
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        if !dmin.is_finite() {
            return (0.05, 1.0);
        }
        ((dmin - radius).max(0.05), dmax + radius)
    }
}
