//! Image quality metrics (PSNR, SSIM) and the evaluation report format.
//!
//! Metrics run in f64 regardless of image storage precision.

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::img::{ImageRgb, ImgError, Plane};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Shape(#[from] ImgError),
    #[error("image {0}x{1} too small for an 11x11 SSIM window")]
    TooSmallForSsim(u32, u32),
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricError> {
    a.same_shape(b)?;
    let mut total = 0.0;
    for (pa, pb) in a.values().iter().zip(b.values()) {
        for ch in 0..3 {
            let e = pa[ch] - pb[ch];
            total += e * e;
        }
    }
    Ok(total / (3 * a.len()) as f64)
}

/// Peak signal-to-noise ratio in dB for unit-range images. Identical
/// images return +inf (serialized as the string "+inf").
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Rec. 601 luminance.
fn luminance(img: &ImageRgb) -> Plane<f64> {
    let mut out = Plane::<f64>::new(img.width(), img.height()).expect("nonzero dims");
    for (i, c) in img.values().iter().enumerate() {
        out.values_mut()[i] = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    }
    out
}

fn gaussian_kernel_11() -> [f64; 121] {
    let sigma = 1.5f64;
    let mut k = [0.0; 121];
    let mut sum = 0.0;
    for y in 0..11 {
        for x in 0..11 {
            let dx = x as f64 - 5.0;
            let dy = y as f64 - 5.0;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            k[y * 11 + x] = v;
            sum += v;
        }
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Structural similarity on luminance: 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1, mean over all fully interior
/// window positions.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricError> {
    a.same_shape(b)?;
    let w = a.width();
    let h = a.height();
    if w < 11 || h < 11 {
        return Err(MetricError::TooSmallForSsim(w, h));
    }
    let la = luminance(a);
    let lb = luminance(b);
    let kernel = gaussian_kernel_11();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);

    let mut total = 0.0;
    let mut count = 0u64;
    for wy in 0..=(h - 11) {
        for wx in 0..=(w - 11) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..11 {
                for kx in 0..11 {
                    let kw = kernel[(ky * 11 + kx) as usize];
                    let va = la.get(wx + kx, wy + ky);
                    let vb = lb.get(wx + kx, wy + ky);
                    mu_a += kw * va;
                    mu_b += kw * vb;
                    aa += kw * va * va;
                    bb += kw * vb * vb;
                    ab += kw * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("+inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewMetrics {
    pub view: String,
    #[serde(serialize_with = "serialize_db")]
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-view and aggregate metrics for an evaluation run. Timings are
/// omitted in strict (deterministic) mode.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub view_count: usize,
    #[serde(serialize_with = "serialize_db")]
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    /// Reserved for external perceptual-metric post-processing.
    pub lpips: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
    pub views: Vec<ViewMetrics>,
}

impl MetricReport {
    pub fn from_views(views: Vec<ViewMetrics>, wall_clock_ms: Option<u64>) -> Self {
        let n = views.len().max(1) as f64;
        let mean_psnr_db = views.iter().map(|v| v.psnr_db).sum::<f64>() / n;
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        MetricReport {
            view_count: views.len(),
            mean_psnr_db,
            mean_ssim,
            lpips: None,
            wall_clock_ms,
            views,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_images_hit_the_inf_sentinel() {
        let a = ImageRgb::filled(16, 16, [0.3, 0.5, 0.7]).unwrap();
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let report = MetricReport::from_views(
            vec![ViewMetrics {
                view: "v0".into(),
                psnr_db: f64::INFINITY,
                ssim: 1.0,
            }],
            None,
        );
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"+inf\""));
    }

    #[test]
    fn uniform_error_is_twenty_db() {
        let a = ImageRgb::filled(20, 20, [0.25, 0.4, 0.6]).unwrap();
        let b = ImageRgb::filled(20, 20, [0.35, 0.5, 0.7]).unwrap();
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn mse_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ImageRgb::from_fn(13, 9, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
        let b = ImageRgb::from_fn(13, 9, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
        let m = mse(&a, &b).unwrap();
        let mut total = 0.0;
        let mut n = 0u64;
        for y in 0..9 {
            for x in 0..13 {
                for ch in 0..3 {
                    let e = a.get(x, y)[ch] - b.get(x, y)[ch];
                    total += e * e;
                    n += 1;
                }
            }
        }
        assert_relative_eq!(m, total / n as f64, epsilon = 1e-10);
        assert_relative_eq!(psnr(&a, &b).unwrap(), 10.0 * (1.0 / m).log10(), epsilon = 1e-10);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = ImageRgb::new(8, 8).unwrap();
        let b = ImageRgb::new(8, 9).unwrap();
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = ImageRgb::from_fn(24, 18, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_brightness_shift_dominated_by_luminance_term() {
        let a = ImageRgb::filled(32, 32, [0.2, 0.2, 0.2]).unwrap();
        let b = ImageRgb::filled(32, 32, [0.7, 0.7, 0.7]).unwrap();
        let s = ssim(&a, &b).unwrap();
        // Constant images: structure/contrast terms are neutral, so the
        // windowed formula reduces to the luminance ratio.
        let mu_a = 0.2;
        let mu_b = 0.7;
        let c1 = 0.0001;
        let c2 = 0.0009;
        let expect = ((2.0 * mu_a * mu_b + c1) * c2) / ((mu_a * mu_a + mu_b * mu_b + c1) * c2);
        assert_relative_eq!(s, expect, epsilon = 1e-9);
        assert!(s < 1.0);
    }

    #[test]
    fn ssim_inverted_checker_has_negative_structure() {
        let a = ImageRgb::from_fn(33, 33, |x, y| {
            let v = if (x / 3 + y / 3) % 2 == 0 { 0.85 } else { 0.15 };
            [v, v, v]
        })
        .unwrap();
        let b = ImageRgb::from_fn(33, 33, |x, y| {
            let v = if (x / 3 + y / 3) % 2 == 0 { 0.15 } else { 0.85 };
            [v, v, v]
        })
        .unwrap();
        // Windowed-formula oracle on one window to assert the sign, then
        // the mean must also be negative.
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "anti-correlated structure must go negative, got {s}");
    }

    #[test]
    fn ssim_too_small_image_is_error() {
        let a = ImageRgb::new(10, 12).unwrap();
        assert!(matches!(
            ssim(&a, &a),
            Err(MetricError::TooSmallForSsim(10, 12))
        ));
    }
}
