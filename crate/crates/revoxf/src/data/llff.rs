//! LLFF-style forward-facing dataset loading: a `poses_bounds` array file
//! (N x 17 f64: a 3x5 pose+hwf block, then near and far) plus images.
//!
//! Both the numpy `.npy` container and a raw little-endian f64 dump are
//! accepted; shape anomalies are hard errors. Every 8th view (starting at
//! index 0) is reserved for testing.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use super::{load_err, png_io, DataError, Dataset, View};
use crate::geometry::Camera;

/// Raw rows parsed from a poses_bounds file.
#[derive(Debug, Clone)]
pub struct PosesBounds {
    /// One row = 15 pose+hwf values (3x5, row-major) + near + far.
    pub rows: Vec<[f64; 17]>,
}

/// Parse `poses_bounds` bytes: `.npy` when the numpy magic is present,
/// otherwise a raw little-endian f64 array whose length must be a multiple
/// of 17.
pub fn parse_poses_bounds(path: &Path, bytes: &[u8]) -> Result<PosesBounds, DataError> {
    let payload: Vec<f64> = if bytes.starts_with(b"\x93NUMPY") {
        parse_npy_f64(path, bytes)?
    } else {
        if bytes.is_empty() || bytes.len() % 8 != 0 {
            return Err(load_err(path, "raw poses_bounds size not a multiple of 8"));
        }
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    if payload.is_empty() || payload.len() % 17 != 0 {
        return Err(load_err(
            path,
            format!("expected N x 17 values, got {}", payload.len()),
        ));
    }
    let rows = payload
        .chunks_exact(17)
        .map(|c| {
            let mut row = [0f64; 17];
            row.copy_from_slice(c);
            row
        })
        .collect();
    Ok(PosesBounds { rows })
}

fn parse_npy_f64(path: &Path, bytes: &[u8]) -> Result<Vec<f64>, DataError> {
    // v1 header: magic(6) ver(2) header_len(u16 LE) header_dict.
    if bytes.len() < 10 {
        return Err(load_err(path, "npy header truncated"));
    }
    let major = bytes[6];
    let header_len = if major == 1 {
        u16::from_le_bytes([bytes[8], bytes[9]]) as usize
    } else {
        return Err(load_err(path, format!("unsupported npy version {major}")));
    };
    let header_end = 10 + header_len;
    if bytes.len() < header_end {
        return Err(load_err(path, "npy header truncated"));
    }
    let header = String::from_utf8_lossy(&bytes[10..header_end]);
    if !header.contains("<f8") {
        return Err(load_err(path, format!("npy dtype must be <f8, got {header}")));
    }
    if header.contains("'fortran_order': True") {
        return Err(load_err(path, "fortran-ordered npy not supported"));
    }
    let data = &bytes[header_end..];
    if data.len() % 8 != 0 {
        return Err(load_err(path, "npy payload size not a multiple of 8"));
    }
    Ok(data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Write a minimal v1 `.npy` for an N x 17 f64 array. Fixture helper and
/// the inverse of the loader.
pub fn write_poses_bounds_npy(path: &Path, rows: &[[f64; 17]]) -> Result<(), DataError> {
    let dict = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, 17), }}",
        rows.len()
    );
    // Pad the header so magic+header is a multiple of 64 and ends in \n.
    let mut header = dict.into_bytes();
    let total = 10 + header.len() + 1;
    let pad = (64 - total % 64) % 64;
    header.extend(std::iter::repeat_n(b' ', pad));
    header.push(b'\n');
    let mut out = Vec::new();
    out.extend_from_slice(b"\x93NUMPY");
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(&header);
    for row in rows {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| load_err(path, format!("write: {e}")))
}

/// Convert one poses_bounds row into an internal camera. The 3x5 block is
/// `[down right back | t | hwf]` in LLFF's convention; columns are permuted
/// to the OpenGL layout and then converted to +z-forward.
pub fn camera_from_row(row: &[f64; 17]) -> Result<(Camera, f64, f64), DataError> {
    let m = |r: usize, c: usize| row[5 * r + c];
    let h = m(0, 4);
    let w = m(1, 4);
    let f = m(2, 4);
    if !(h > 0.0 && w > 0.0 && f > 0.0) {
        return Err(load_err("poses_bounds", "non-positive hwf entry"));
    }
    // LLFF columns [c0 c1 c2 t]; OpenGL c2w columns are [c1, -c0, c2, t].
    let mut c2w = Matrix4::identity();
    for r in 0..3 {
        c2w[(r, 0)] = m(r, 1);
        c2w[(r, 1)] = -m(r, 0);
        c2w[(r, 2)] = m(r, 2);
        c2w[(r, 3)] = m(r, 3);
    }
    let w2c = super::nerf::gl_c2w_to_internal_w2c(&c2w);
    let k = Matrix3::new(f, 0.0, w / 2.0, 0.0, f, h / 2.0, 0.0, 0.0, 1.0);
    let cam = Camera::new(k, w2c, w as u32, h as u32)
        .map_err(|e| load_err("poses_bounds", format!("bad pose row: {e}")))?;
    Ok((cam, row[15], row[16]))
}

/// Indices reserved for testing under the keep-every-8th protocol.
pub fn llff_test_indices(n: usize) -> Vec<usize> {
    (0..n).filter(|i| i % 8 == 0).collect()
}

/// Load an LLFF-style directory: `poses_bounds.npy` (or `.bin` raw dump)
/// plus PNG images under `images/`, sorted by filename.
pub fn load_llff(dir: &Path, background: [f64; 3]) -> Result<Dataset, DataError> {
    let pb_path = ["poses_bounds.npy", "poses_bounds.bin"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| load_err(dir, "poses_bounds.npy (or .bin) not found"))?;
    let bytes = fs::read(&pb_path).map_err(|e| load_err(&pb_path, format!("read: {e}")))?;
    let pb = parse_poses_bounds(&pb_path, &bytes)?;

    let img_dir = dir.join("images");
    let mut img_paths: Vec<_> = fs::read_dir(&img_dir)
        .map_err(|e| load_err(&img_dir, format!("read dir: {e}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    img_paths.sort();
    if img_paths.len() != pb.rows.len() {
        return Err(load_err(
            &img_dir,
            format!(
                "{} images but {} pose rows",
                img_paths.len(),
                pb.rows.len()
            ),
        ));
    }

    let mut views = Vec::new();
    let mut near = f64::INFINITY;
    let mut far: f64 = 0.0;
    for (row, img_path) in pb.rows.iter().zip(&img_paths) {
        let (camera, n, f) = camera_from_row(row)?;
        near = near.min(n);
        far = far.max(f);
        let rgb = png_io::read_png(img_path)?.composite_over(background);
        if rgb.width() != camera.width() || rgb.height() != camera.height() {
            return Err(load_err(
                img_path,
                format!(
                    "image {}x{} does not match hwf {}x{}",
                    rgb.width(),
                    rgb.height(),
                    camera.width(),
                    camera.height()
                ),
            ));
        }
        views.push(View {
            name: img_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            camera,
            rgb,
            depth: None,
        });
    }

    let test_idx = llff_test_indices(views.len());
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, v) in views.into_iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(v);
        } else {
            train.push(v);
        }
    }

    // Forward-facing scenes carry no bbox; bound the sampled frusta.
    let mut bmin = Vector3::repeat(f64::INFINITY);
    let mut bmax = Vector3::repeat(f64::NEG_INFINITY);
    for v in train.iter().chain(test.iter()) {
        for t in [near, far] {
            let p = v.camera.position() + v.camera.forward() * t;
            bmin = bmin.inf(&p);
            bmax = bmax.sup(&p);
        }
        let p = v.camera.position();
        bmin = bmin.inf(&p);
        bmax = bmax.sup(&p);
    }
    let margin = (bmax - bmin).norm() * 0.05 + 1e-6;
    let ds = Dataset {
        train,
        test,
        bbox_min: bmin - Vector3::repeat(margin),
        bbox_max: bmax + Vector3::repeat(margin),
        near: (near * 0.9).max(0.01),
        far: far * 1.1,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::ImageRgb;
    use approx::assert_relative_eq;

    fn fixture_row(eye: Vector3<f64>, size: f64, focal: f64) -> [f64; 17] {
        // Build an internal camera, convert to the LLFF layout, and emit
        // the row; camera_from_row must invert this exactly.
        let k = Matrix3::new(
            focal,
            0.0,
            size / 2.0,
            0.0,
            focal,
            size / 2.0,
            0.0,
            0.0,
            1.0,
        );
        let cam = Camera::look_at(
            eye,
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::y(),
            k,
            size as u32,
            size as u32,
        )
        .unwrap();
        let c2w = super::super::nerf::internal_w2c_to_gl_c2w(&cam);
        let mut row = [0f64; 17];
        for r in 0..3 {
            row[5 * r] = -c2w[(r, 1)];
            row[5 * r + 1] = c2w[(r, 0)];
            row[5 * r + 2] = c2w[(r, 2)];
            row[5 * r + 3] = c2w[(r, 3)];
        }
        row[4] = size;
        row[9] = size;
        row[14] = focal;
        row[15] = 1.0;
        row[16] = 10.0;
        row
    }

    #[test]
    fn camera_recovers_from_fixture_row() {
        let eye = Vector3::new(0.4, 0.2, 1.0);
        let row = fixture_row(eye, 16.0, 20.0);
        let (cam, near, far) = camera_from_row(&row).unwrap();
        assert_relative_eq!(cam.position(), eye, epsilon = 1e-9);
        assert_eq!((near, far), (1.0, 10.0));
        assert_eq!(cam.width(), 16);
        assert_relative_eq!(cam.intrinsics()[(0, 0)], 20.0);
    }

    #[test]
    fn npy_round_trip_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<[f64; 17]> = (0..8)
            .map(|i| fixture_row(Vector3::new(0.1 * i as f64, 0.0, 1.0), 8.0, 10.0))
            .collect();
        write_poses_bounds_npy(&dir.path().join("poses_bounds.npy"), &rows).unwrap();
        let img_dir = dir.path().join("images");
        std::fs::create_dir_all(&img_dir).unwrap();
        for i in 0..8 {
            let img = ImageRgb::filled(8, 8, [0.5, 0.5, 0.5]).unwrap();
            png_io::write_png_rgb(&img_dir.join(format!("im_{i:03}.png")), &img).unwrap();
        }
        let ds = load_llff(dir.path(), [1.0; 3]).unwrap();
        // N = 8: one test view (index 0), seven train candidates.
        assert_eq!(ds.test.len(), 1);
        assert_eq!(ds.train.len(), 7);
        assert_eq!(ds.test[0].name, "im_000");
    }

    #[test]
    fn empty_file_is_load_error() {
        let err = parse_poses_bounds(Path::new("x"), &[]).unwrap_err();
        assert!(err.to_string().contains("multiple of 8"));
    }

    #[test]
    fn wrong_shape_is_load_error() {
        let bytes: Vec<u8> = (0..16u8).flat_map(|_| 1.0f64.to_le_bytes()).collect();
        let err = parse_poses_bounds(Path::new("x"), &bytes).unwrap_err();
        assert!(err.to_string().contains("N x 17"));
    }

    #[test]
    fn raw_f64_dump_accepted() {
        let rows = [fixture_row(Vector3::new(0.0, 0.0, 1.0), 8.0, 10.0)];
        let bytes: Vec<u8> = rows[0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let pb = parse_poses_bounds(Path::new("raw"), &bytes).unwrap();
        assert_eq!(pb.rows.len(), 1);
        assert_eq!(pb.rows[0], rows[0]);
    }
}
