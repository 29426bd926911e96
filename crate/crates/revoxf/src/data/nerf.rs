//! NeRF-synthetic dataset loading and writing (`transforms_*.json` plus
//! per-frame PNGs).
//!
//! The JSON stores OpenGL-style camera-to-world matrices (camera looks down
//! -z, +y up); they are converted to this crate's +z-forward convention on
//! load. RGBA images are composited over the configured background.
//! Optional extension keys `scene_bbox_min`, `scene_bbox_max`, `near`, and
//! `far` carry scene geometry; defaults apply when absent.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use super::{load_err, png_io, DataError, Dataset, View};
use crate::geometry::Camera;

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    scene_bbox_min: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scene_bbox_max: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    far: Option<f64>,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    depth_path: Option<String>,
}

/// OpenGL camera-to-world (columns x right, y up, z backward) to this
/// crate's world-to-camera (x right, y down, z forward).
pub fn gl_c2w_to_internal_w2c(c2w_gl: &Matrix4<f64>) -> Matrix4<f64> {
    let flip = Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, 1.0));
    let c2w_cv = c2w_gl * flip;
    let r = c2w_cv.fixed_view::<3, 3>(0, 0).transpose();
    let t = c2w_cv.fixed_view::<3, 1>(0, 3).into_owned();
    let mut w2c = Matrix4::identity();
    w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-r * t));
    w2c
}

/// Inverse of `gl_c2w_to_internal_w2c`, for writing datasets.
pub fn internal_w2c_to_gl_c2w(cam: &Camera) -> Matrix4<f64> {
    let flip = Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, 1.0));
    cam.cam_to_world() * flip
}

fn parse_transforms(path: &Path) -> Result<TransformsFile, DataError> {
    let text = fs::read_to_string(path)
        .map_err(|e| load_err(path, format!("cannot read: {e}")))?;
    serde_json::from_str(&text).map_err(|e| load_err(path, format!("malformed JSON: {e}")))
}

fn resolve_image(dir: &Path, rel: &str) -> PathBuf {
    let mut p = dir.join(rel.trim_start_matches("./"));
    if p.extension().is_none() {
        p.set_extension("png");
    }
    p
}

fn load_split(
    dir: &Path,
    tf: &TransformsFile,
    background: [f64; 3],
) -> Result<Vec<View>, DataError> {
    let mut views = Vec::with_capacity(tf.frames.len());
    for frame in &tf.frames {
        let img_path = resolve_image(dir, &frame.file_path);
        let png = png_io::read_png(&img_path)?;
        let rgb = png.composite_over(background);
        let w = rgb.width();
        let h = rgb.height();
        let fx = 0.5 * w as f64 / (0.5 * tf.camera_angle_x).tan();
        let k = Matrix3::new(
            fx,
            0.0,
            w as f64 / 2.0,
            0.0,
            fx,
            h as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        let c2w = Matrix4::from_fn(|r, c| frame.transform_matrix[r][c]);
        let w2c = gl_c2w_to_internal_w2c(&c2w);
        let camera = Camera::new(k, w2c, w, h)
            .map_err(|e| load_err(&img_path, format!("bad camera: {e}")))?;
        let depth = match &frame.depth_path {
            Some(rel) => Some(super::pfm::read_pfm(&dir.join(rel.trim_start_matches("./")))?),
            None => None,
        };
        views.push(View {
            name: frame.file_path.clone(),
            camera,
            rgb,
            depth,
        });
    }
    Ok(views)
}

/// Load a NeRF-synthetic-format dataset directory containing
/// `transforms_train.json` and `transforms_test.json`.
pub fn load_nerf_synthetic(dir: &Path, background: [f64; 3]) -> Result<Dataset, DataError> {
    let train_path = dir.join("transforms_train.json");
    let test_path = dir.join("transforms_test.json");
    if !train_path.exists() {
        return Err(load_err(&train_path, "missing transforms_train.json"));
    }
    if !test_path.exists() {
        return Err(load_err(&test_path, "missing transforms_test.json"));
    }
    let tf_train = parse_transforms(&train_path)?;
    let tf_test = parse_transforms(&test_path)?;
    let train = load_split(dir, &tf_train, background)?;
    let test = load_split(dir, &tf_test, background)?;
    if train.is_empty() {
        return Err(load_err(&train_path, "no frames in training split"));
    }

    let bbox_min = Vector3::from(tf_train.scene_bbox_min.unwrap_or([-1.5, -1.5, -1.5]));
    let bbox_max = Vector3::from(tf_train.scene_bbox_max.unwrap_or([1.5, 1.5, 1.5]));
    let cams: Vec<Camera> = train.iter().map(|v| v.camera.clone()).collect();
    let (near_default, far_default) = Dataset::derive_near_far(&cams, bbox_min, bbox_max);
    let ds = Dataset {
        train,
        test,
        bbox_min,
        bbox_max,
        near: tf_train.near.unwrap_or(near_default),
        far: tf_train.far.unwrap_or(far_default),
    };
    ds.validate()?;
    Ok(ds)
}

/// Frame spec for `write_nerf_synthetic`.
pub struct OutFrame<'a> {
    pub name: String,
    pub camera: &'a Camera,
    pub rgb: &'a crate::img::ImageRgb,
    pub depth: Option<&'a crate::img::DepthMap>,
}

/// Write a split (`train` or `test`) of a NeRF-synthetic-format dataset:
/// PNGs under `<dir>/<split>/` and a `transforms_<split>.json`. All
/// cameras must share one field of view.
pub fn write_nerf_synthetic_split(
    dir: &Path,
    split: &str,
    frames: &[OutFrame<'_>],
    scene_bbox: (Vector3<f64>, Vector3<f64>),
    near_far: (f64, f64),
) -> Result<(), DataError> {
    if frames.is_empty() {
        return Err(load_err(dir, "cannot write an empty split"));
    }
    let cam0 = frames[0].camera;
    let fx = cam0.intrinsics()[(0, 0)];
    let camera_angle_x = 2.0 * (0.5 * cam0.width() as f64 / fx).atan();

    let split_dir = dir.join(split);
    fs::create_dir_all(&split_dir).map_err(|e| load_err(&split_dir, format!("mkdir: {e}")))?;

    let mut entries = Vec::with_capacity(frames.len());
    for frame in frames {
        let rel = format!("./{split}/{}", frame.name);
        let img_path = split_dir.join(format!("{}.png", frame.name));
        png_io::write_png_rgb(&img_path, frame.rgb)?;
        let depth_path = match frame.depth {
            Some(depth) => {
                let rel_d = format!("./{split}/{}_depth.pfm", frame.name);
                super::pfm::write_pfm(&split_dir.join(format!("{}_depth.pfm", frame.name)), depth)?;
                Some(rel_d)
            }
            None => None,
        };
        let c2w = internal_w2c_to_gl_c2w(frame.camera);
        let mut mat = [[0f64; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                mat[r][c] = c2w[(r, c)];
            }
        }
        entries.push(FrameEntry {
            file_path: rel,
            transform_matrix: mat,
            depth_path,
        });
    }
    let tf = TransformsFile {
        camera_angle_x,
        scene_bbox_min: Some([scene_bbox.0.x, scene_bbox.0.y, scene_bbox.0.z]),
        scene_bbox_max: Some([scene_bbox.1.x, scene_bbox.1.y, scene_bbox.1.z]),
        near: Some(near_far.0),
        far: Some(near_far.1),
        frames: entries,
    };
    let json_path = dir.join(format!("transforms_{split}.json"));
    let text = serde_json::to_string_pretty(&tf).expect("serializable");
    fs::write(&json_path, text).map_err(|e| load_err(&json_path, format!("write: {e}")))?;
    Ok(())
}
