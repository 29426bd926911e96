//! RVXF checkpoint persistence for voxel grids.
//!
//! Layout, all little-endian: magic `RVXF`, format version u32, bbox as
//! 6 x f64 (min xyz then max xyz), dims as 3 x u32, then the density array
//! and the color array (rgb interleaved per node) as f32 in x-fastest
//! order.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::voxel::{VoxelError, VoxelGrid};

pub const MAGIC: &[u8; 4] = b"RVXF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not an RVXF checkpoint)")]
    BadMagic { path: String },
    #[error("{path}: unsupported format version {got}")]
    BadVersion { path: String, got: u32 },
    #[error("{path}: truncated or oversized payload (expected {expected} bytes, got {got})")]
    BadLength {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("{path}: invalid grid header: {source}")]
    BadGrid {
        path: String,
        source: VoxelError,
    },
}

/// Serialize the grid's raw values. Values are written as f32; the file
/// round-trips bit-exactly.
pub fn save_checkpoint(path: &Path, grid: &VoxelGrid) -> Result<(), CheckpointError> {
    let dims = grid.dims();
    let (bmin, bmax) = grid.bbox();
    let n = grid.node_count();
    let mut buf = Vec::with_capacity(4 + 4 + 48 + 12 + 4 * n + 12 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [bmin.x, bmin.y, bmin.z, bmax.x, bmax.y, bmax.z] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in grid.density_values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in grid.color_values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CheckpointError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
    }
    fs::write(path, buf).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Load a checkpoint into a fresh grid (gradients zeroed).
pub fn load_checkpoint(path: &Path) -> Result<VoxelGrid, CheckpointError> {
    let pstr = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: pstr.clone(),
        source: e,
    })?;
    let header = 4 + 4 + 48 + 12;
    if bytes.len() < header {
        return Err(CheckpointError::BadLength {
            path: pstr,
            expected: header,
            got: bytes.len(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic { path: pstr });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            path: pstr,
            got: version,
        });
    }
    let mut f64s = [0f64; 6];
    for (i, v) in f64s.iter_mut().enumerate() {
        let off = 8 + 8 * i;
        *v = f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 56 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or(CheckpointError::BadLength {
            path: pstr.clone(),
            expected: usize::MAX,
            got: bytes.len(),
        })?;
    let expected = header + 4 * n + 12 * n;
    if bytes.len() != expected {
        return Err(CheckpointError::BadLength {
            path: pstr,
            expected,
            got: bytes.len(),
        });
    }
    let bmin = Vector3::new(f64s[0], f64s[1], f64s[2]);
    let bmax = Vector3::new(f64s[3], f64s[4], f64s[5]);
    let mut grid = VoxelGrid::new(bmin, bmax, dims).map_err(|source| CheckpointError::BadGrid {
        path: pstr.clone(),
        source,
    })?;
    {
        let (density, color) = grid.values_mut();
        for (i, v) in density.iter_mut().enumerate() {
            let off = header + 4 * i;
            *v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as f64;
        }
        let color_base = header + 4 * n;
        for (i, v) in color.iter_mut().enumerate() {
            let off = color_base + 4 * i;
            *v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as f64;
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn f32_valued_grid(seed: u64) -> VoxelGrid {
        let mut grid = VoxelGrid::new(
            Vector3::new(-1.0, -0.5, 0.0),
            Vector3::new(1.0, 1.5, 2.0),
            [5, 4, 3],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c) = grid.values_mut();
        for v in d.iter_mut() {
            *v = rng.random::<f32>() as f64 * 8.0 - 4.0;
        }
        for v in c.iter_mut() {
            *v = rng.random::<f32>() as f64 * 2.0 - 1.0;
        }
        // Quantize to f32 so the round trip below is exact.
        for v in d.iter_mut() {
            *v = *v as f32 as f64;
        }
        for v in c.iter_mut() {
            *v = *v as f32 as f64;
        }
        grid
    }

    #[test]
    fn round_trip_grid_and_file_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.rvxf");
        let grid = f32_valued_grid(3);
        save_checkpoint(&path, &grid).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.dims(), grid.dims());
        assert_eq!(loaded.bbox(), grid.bbox());
        assert_eq!(loaded.density_values(), grid.density_values());
        assert_eq!(loaded.color_values(), grid.color_values());

        // Save -> load -> save must be byte-identical.
        let path2 = dir.path().join("g2.rvxf");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rvxf");
        let grid = f32_valued_grid(5);
        save_checkpoint(&path, &grid).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadLength { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rvxf");
        std::fs::write(&path, vec![0u8; 128]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rvxf");
        let grid = f32_valued_grid(7);
        save_checkpoint(&path, &grid).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadLength { .. })
        ));
    }
}
