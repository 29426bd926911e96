//! 8-bit PNG reading and writing for images and masks.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::img::{ImageRgb, Mask, Plane};

#[derive(Debug, Error)]
pub enum PngError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("png error on {path}: {source}")]
    Codec {
        path: String,
        source: png::DecodingError,
    },
    #[error("png encode error on {path}: {source}")]
    Encode {
        path: String,
        source: png::EncodingError,
    },
    #[error("{path}: unsupported png layout ({0:?} {1:?})", .color, .depth)]
    Unsupported {
        path: String,
        color: png::ColorType,
        depth: png::BitDepth,
    },
}

/// Decoded 8-bit PNG: RGB in [0, 1] plus the alpha plane when present.
#[derive(Debug, Clone)]
pub struct PngImage {
    pub rgb: ImageRgb,
    pub alpha: Option<Plane<f64>>,
}

impl PngImage {
    /// Composite over a background color: `a * c + (1 - a) * bg`.
    /// Opaque images pass through unchanged.
    pub fn composite_over(&self, bg: [f64; 3]) -> ImageRgb {
        match &self.alpha {
            None => self.rgb.clone(),
            Some(alpha) => ImageRgb::from_fn(self.rgb.width(), self.rgb.height(), |x, y| {
                let a = alpha.get(x, y);
                let c = self.rgb.get(x, y);
                [
                    a * c[0] + (1.0 - a) * bg[0],
                    a * c[1] + (1.0 - a) * bg[1],
                    a * c[2] + (1.0 - a) * bg[2],
                ]
            })
            .expect("nonzero dims"),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an RGB image as 8-bit PNG; channel values clamp to [0, 1].
pub fn write_png_rgb(path: &Path, img: &ImageRgb) -> Result<(), PngError> {
    let mut data = Vec::with_capacity(img.len() * 3);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let c = img.get(x, y);
            data.push(quantize(c[0]));
            data.push(quantize(c[1]));
            data.push(quantize(c[2]));
        }
    }
    write_png_raw(path, img.width(), img.height(), png::ColorType::Rgb, &data)
}

/// Write a binary mask as an 8-bit grayscale PNG with values 0 / 255.
pub fn write_png_mask(path: &Path, mask: &Mask) -> Result<(), PngError> {
    let mut data = Vec::with_capacity(mask.len());
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            data.push(if mask.get(x, y) { 255 } else { 0 });
        }
    }
    write_png_raw(
        path,
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        &data,
    )
}

fn write_png_raw(
    path: &Path,
    width: u32,
    height: u32,
    color: png::ColorType,
    data: &[u8],
) -> Result<(), PngError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| PngError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
    }
    let file = fs::File::create(path).map_err(|e| PngError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width, height);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| PngError::Encode {
        path: path.display().to_string(),
        source: e,
    })?;
    writer.write_image_data(data).map_err(|e| PngError::Encode {
        path: path.display().to_string(),
        source: e,
    })
}

/// Read an 8-bit RGB or RGBA PNG (grayscale accepted and expanded).
pub fn read_png(path: &Path) -> Result<PngImage, PngError> {
    let pstr = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| PngError::Io {
        path: pstr.clone(),
        source: e,
    })?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| PngError::Codec {
        path: pstr.clone(),
        source: e,
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size().expect("png buffer size")];
    let info = reader.next_frame(&mut buf).map_err(|e| PngError::Codec {
        path: pstr.clone(),
        source: e,
    })?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(PngError::Unsupported {
            path: pstr,
            color: info.color_type,
            depth: info.bit_depth,
        });
    }
    let w = info.width;
    let h = info.height;
    let to_f = |b: u8| b as f64 / 255.0;
    let mut rgb = ImageRgb::new(w, h).expect("nonzero dims");
    let mut alpha: Option<Plane<f64>> = None;
    match info.color_type {
        png::ColorType::Rgb => {
            for (i, px) in buf[..(w * h * 3) as usize].chunks_exact(3).enumerate() {
                rgb.values_mut()[i] = [to_f(px[0]), to_f(px[1]), to_f(px[2])];
            }
        }
        png::ColorType::Rgba => {
            let mut a = Plane::<f64>::new(w, h).expect("nonzero dims");
            for (i, px) in buf[..(w * h * 4) as usize].chunks_exact(4).enumerate() {
                rgb.values_mut()[i] = [to_f(px[0]), to_f(px[1]), to_f(px[2])];
                a.values_mut()[i] = to_f(px[3]);
            }
            alpha = Some(a);
        }
        png::ColorType::Grayscale => {
            for (i, px) in buf[..(w * h) as usize].iter().enumerate() {
                let v = to_f(*px);
                rgb.values_mut()[i] = [v, v, v];
            }
        }
        other => {
            return Err(PngError::Unsupported {
                path: pstr,
                color: other,
                depth: info.bit_depth,
            })
        }
    }
    Ok(PngImage { rgb, alpha })
}
