//! PFM (portable float map) reading and writing, grayscale "Pf" variant.
//!
//! Header: `Pf\n<width> <height>\n<scale>\n` followed by one f32 per pixel,
//! rows stored bottom-to-top. A negative scale marks little-endian data; we
//! always write scale -1.0.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::img::DepthMap;

#[derive(Debug, Error)]
pub enum PfmError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a grayscale PFM (magic {got:?})")]
    BadMagic { path: String, got: String },
    #[error("{path}: malformed header field {field}")]
    BadHeader { path: String, field: &'static str },
    #[error("{path}: payload truncated (expected {expected} bytes, got {got})")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> PfmError {
    PfmError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a depth map as little-endian grayscale PFM. Values are stored as
/// f32; the round trip is bit-exact for f32-valued data.
pub fn write_pfm(path: &Path, map: &DepthMap) -> Result<(), PfmError> {
    let w = map.width() as usize;
    let h = map.height() as usize;
    let mut buf = Vec::with_capacity(64 + 4 * w * h);
    write!(buf, "Pf\n{} {}\n-1.0\n", w, h).expect("write to vec");
    for row in (0..h).rev() {
        for col in 0..w {
            let v = map.get(col as u32, row as u32) as f32;
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Read a grayscale PFM. Both endiannesses are accepted on read.
pub fn read_pfm(path: &Path) -> Result<DepthMap, PfmError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let pstr = path.display().to_string();

    let mut pos = 0usize;
    let mut token = |field: &'static str| -> Result<String, PfmError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PfmError::BadHeader {
                path: pstr.clone(),
                field,
            });
        }
        // Consume exactly one whitespace after the token.
        let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        if pos < bytes.len() {
            pos += 1;
        }
        Ok(tok)
    };

    let magic = token("magic")?;
    if magic != "Pf" {
        return Err(PfmError::BadMagic {
            path: pstr,
            got: magic,
        });
    }
    let w: usize = token("width")?.parse().map_err(|_| PfmError::BadHeader {
        path: pstr.clone(),
        field: "width",
    })?;
    let h: usize = token("height")?.parse().map_err(|_| PfmError::BadHeader {
        path: pstr.clone(),
        field: "height",
    })?;
    let scale: f64 = token("scale")?.parse().map_err(|_| PfmError::BadHeader {
        path: pstr.clone(),
        field: "scale",
    })?;
    if w == 0 || h == 0 {
        return Err(PfmError::BadHeader {
            path: pstr,
            field: "dimensions",
        });
    }
    let little_endian = scale < 0.0;
    let expected = 4 * w * h;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PfmError::Truncated {
            path: pstr,
            expected,
            got: payload.len(),
        });
    }
    let mut map = DepthMap::new(w as u32, h as u32).expect("nonzero dims");
    for (i, chunk) in payload[..expected].chunks_exact(4).enumerate() {
        let arr: [u8; 4] = chunk.try_into().expect("chunk of 4");
        let v = if little_endian {
            f32::from_le_bytes(arr)
        } else {
            f32::from_be_bytes(arr)
        };
        let col = (i % w) as u32;
        let row_from_bottom = (i / w) as u32;
        let row = h as u32 - 1 - row_from_bottom;
        map.set(col, row, v as f64);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = DepthMap::from_fn(13, 9, |_, _| rng.random::<f32>() as f64 * 10.0).unwrap();
        write_pfm(&path, &map).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.width(), 13);
        assert_eq!(back.height(), 9);
        for (x, y, v) in back.enumerate() {
            let orig = map.get(x, y) as f32;
            assert_eq!(v as f32, orig);
            assert_eq!((v as f32).to_bits(), orig.to_bits());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.pfm");
        std::fs::write(&path, b"PF\n2 2\n-1.0\n0000000000000000").unwrap();
        assert!(matches!(read_pfm(&path), Err(PfmError::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pfm");
        std::fs::write(&path, b"Pf\n4 4\n-1.0\n\x00\x00\x80\x3f").unwrap();
        assert!(matches!(read_pfm(&path), Err(PfmError::Truncated { .. })));
    }

    #[test]
    fn big_endian_read_supported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.pfm");
        let mut buf = b"Pf\n1 1\n1.0\n".to_vec();
        buf.extend_from_slice(&2.5f32.to_be_bytes());
        std::fs::write(&path, buf).unwrap();
        let map = read_pfm(&path).unwrap();
        assert_eq!(map.get(0, 0), 2.5);
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.pfm");
        let map = DepthMap::from_fn(2, 2, |x, y| (10 * y + x) as f64).unwrap();
        write_pfm(&path, &map).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = b"Pf\n2 2\n-1.0\n".len();
        let first = f32::from_le_bytes(bytes[header_len..header_len + 4].try_into().unwrap());
        // First stored value is the bottom-left pixel (0, 1) = 10.
        assert_eq!(first, 10.0);
    }
}
