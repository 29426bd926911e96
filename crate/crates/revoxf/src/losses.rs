//! Training objectives: color reconstruction, reliable-region appearance,
//! relative depth ordering over unreliable regions, reliability-aware voxel
//! smoothing, and depth smoothness — each with its gradient w.r.t. the
//! rendered quantities (chained into the renderer's adjoint) or the raw
//! grid values.
//!
//! All pixel / pair / patch sums are means, so the loss weights are
//! independent of image resolution and batch composition.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::img::{DepthMap, ImgError, Mask};
use crate::voxel::{ReliabilityField, VoxelGrid};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss weights invalid: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Shape(#[from] ImgError),
    #[error("reliability field dims {0:?} do not match grid dims {1:?}")]
    FieldDimsMismatch([usize; 3], [usize; 3]),
    #[error("depth patch must be at least 2x2, got {0}x{1}")]
    PatchTooSmall(u32, u32),
    #[error("huber metric requires a positive delta parameter")]
    MissingHuberDelta,
    #[error("non-finite value in loss term {0}")]
    NonFinite(&'static str),
}

/// Error metric for voxel-difference smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "metric", content = "delta")]
pub enum DeltaMetric {
    L1,
    L2,
    Huber(f64),
}

impl DeltaMetric {
    /// (value, d/d lhs) of the pairwise difference metric.
    #[inline]
    fn eval(&self, a: f64, b: f64) -> (f64, f64) {
        let e = a - b;
        match *self {
            DeltaMetric::L2 => (e * e, 2.0 * e),
            DeltaMetric::L1 => (e.abs(), if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 }),
            DeltaMetric::Huber(delta) => {
                if e.abs() <= delta {
                    (0.5 * e * e, e)
                } else {
                    (delta * (e.abs() - 0.5 * delta), delta * e.signum())
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if let DeltaMetric::Huber(d) = self {
            if !(*d > 0.0) {
                return Err(LossError::MissingHuberDelta);
            }
        }
        Ok(())
    }
}

/// All loss weights and the knobs of the ordering-loss neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rel: f64,
    pub lambda_unr: f64,
    pub lambda_f: f64,
    pub lambda_d: f64,
    pub lambda_ds: f64,
    /// Ordering-penalty margin, scene units.
    pub margin: f64,
    /// Neighborhood window side (odd, >= 3).
    pub window: u32,
    /// Relative depth-similarity gate for neighborhood membership.
    pub tau_d: f64,
    /// Max pairs per anchor pixel.
    pub n_pairs: u32,
    pub delta_metric: DeltaMetric,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rel: 0.1,
            lambda_unr: 0.01,
            lambda_f: 5e-5,
            lambda_d: 5e-4,
            lambda_ds: 5e-5,
            margin: 1e-4,
            window: 7,
            tau_d: 0.05,
            n_pairs: 8,
            delta_metric: DeltaMetric::L2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_rel", self.lambda_rel),
            ("lambda_unr", self.lambda_unr),
            ("lambda_f", self.lambda_f),
            ("lambda_d", self.lambda_d),
            ("lambda_ds", self.lambda_ds),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LossError::BadWeights(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(LossError::BadWeights(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.tau_d > 0.0) {
            return Err(LossError::BadWeights(format!(
                "tau_d must be > 0, got {}",
                self.tau_d
            )));
        }
        if self.n_pairs == 0 {
            return Err(LossError::BadWeights("n_pairs must be >= 1".into()));
        }
        self.delta_metric.validate()
    }
}

/// Per-step scalar values of every term plus contribution counts.
/// `l_total = l_rgb + l_bgc + l_rs + lambda_ds * l_ds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rgb: f64,
    pub l_rel: f64,
    pub l_unr: f64,
    pub l_bgc: f64,
    pub l_fc: f64,
    pub l_sigma: f64,
    pub l_rs: f64,
    pub l_ds: f64,
    pub l_total: f64,
    pub n_rgb_rays: u64,
    pub n_rel_pixels: u64,
    pub n_unr_pairs: u64,
    pub n_ds_patches: u64,
}

/// Mean squared color error over rays and channels. Returns the loss and
/// the per-ray gradient w.r.t. the rendered colors. Empty input yields
/// zero loss and no gradients.
pub fn loss_rgb(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    assert_eq!(rendered.len(), target.len(), "ray count mismatch");
    let n = rendered.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let denom = (3 * n) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (r, t) in rendered.iter().zip(target) {
        let mut g = [0.0; 3];
        for ch in 0..3 {
            let e = r[ch] - t[ch];
            total += e * e;
            g[ch] = 2.0 * e / denom;
        }
        grads.push(g);
    }
    (total / denom, grads)
}

/// Appearance loss over the reliable pixels of a warped view: mean squared
/// color error restricted to `reliable` (callers pass NOT m_unreliable).
/// Returns per-pixel gradients for the rendered image and the pixel count.
pub fn loss_rel(
    rendered: &crate::img::ImageRgb,
    warped: &crate::img::ImageRgb,
    reliable: &Mask,
) -> Result<(f64, Vec<(u32, u32, [f64; 3])>, u64), LossError> {
    rendered.same_shape(warped)?;
    rendered.same_shape(reliable)?;
    let pixels = reliable.set_pixels();
    if pixels.is_empty() {
        return Ok((0.0, Vec::new(), 0));
    }
    let denom = (3 * pixels.len()) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pixels.len());
    for (x, y) in pixels.iter().copied() {
        let r = rendered.get(x, y);
        let w = warped.get(x, y);
        let mut g = [0.0; 3];
        for ch in 0..3 {
            let e = r[ch] - w[ch];
            total += e * e;
            g[ch] = 2.0 * e / denom;
        }
        grads.push((x, y, g));
    }
    Ok((total / denom, grads, pixels.len() as u64))
}

/// Ordering hinge between one pixel pair (Eq. 10 shape): penalize
/// `|d_s_q - d_s_p| - margin` when the rendered ordering contradicts the
/// reference ordering. Returns (value, d/d d_s_p, d/d d_s_q); subgradients
/// at the kinks are zero.
pub fn pair_penalty(
    d_s_p: f64,
    d_s_q: f64,
    d_ref_p: f64,
    d_ref_q: f64,
    margin: f64,
) -> (f64, f64, f64) {
    let delta_s = d_s_q - d_s_p;
    let delta_ref = d_ref_q - d_ref_p;
    if delta_ref * delta_s >= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let excess = delta_s.abs() - margin;
    if excess <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let sign = delta_s.signum();
    (excess, -sign, sign)
}

/// Pixels in the k x k window around `p` whose reference depth lies within
/// `tau_d * ref(p)` of the anchor's, excluding `p` itself, deterministically
/// subsampled to at most `n_pairs` by the seed.
pub fn build_neighborhood(
    ref_depth: &DepthMap,
    p: (u32, u32),
    window: u32,
    tau_d: f64,
    n_pairs: u32,
    seed: u64,
) -> Vec<(u32, u32)> {
    let (px, py) = p;
    let half = (window / 2) as i64;
    let w = ref_depth.width() as i64;
    let h = ref_depth.height() as i64;
    let anchor = ref_depth.get(px, py);
    let gate = tau_d * anchor;
    let mut candidates = Vec::new();
    for dy in -half..=half {
        for dx in -half..=half {
            if dx == 0 && dy == 0 {
                continue;
            }
            let qx = px as i64 + dx;
            let qy = py as i64 + dy;
            if qx < 0 || qy < 0 || qx >= w || qy >= h {
                continue;
            }
            let q = (qx as u32, qy as u32);
            if (ref_depth.get(q.0, q.1) - anchor).abs() < gate {
                candidates.push(q);
            }
        }
    }
    if candidates.len() <= n_pairs as usize {
        return candidates;
    }
    // Partial Fisher-Yates keyed by a per-pixel mix of the seed.
    let mut state = seed
        ^ (0x9E3779B97F4A7C15u64.wrapping_mul(px as u64 + 1))
        ^ (0xC2B2AE3D27D4EB4Fu64.wrapping_mul(py as u64 + 1));
    let mut next = move || {
        // splitmix64
        state = state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    };
    for i in 0..n_pairs as usize {
        let j = i + (next() as usize) % (candidates.len() - i);
        candidates.swap(i, j);
    }
    candidates.truncate(n_pairs as usize);
    candidates
}

/// Relative depth regularization over unreliable pixels: the mean ordering
/// hinge over the sampled (anchor, neighbor) pairs, with per-pixel
/// gradients w.r.t. the rendered depth. Zero unreliable pixels yield zero.
pub fn loss_unr(
    rendered_depth: &DepthMap,
    ref_depth: &DepthMap,
    unreliable: &Mask,
    weights: &LossWeights,
    seed: u64,
) -> Result<(f64, DepthMap, u64), LossError> {
    rendered_depth.same_shape(ref_depth)?;
    rendered_depth.same_shape(unreliable)?;
    let mut grad = DepthMap::new(rendered_depth.width(), rendered_depth.height())?;
    let anchors = unreliable.set_pixels();
    if anchors.is_empty() {
        return Ok((0.0, grad, 0));
    }
    let mut pairs: Vec<((u32, u32), (u32, u32))> = Vec::new();
    for p in anchors {
        for q in build_neighborhood(ref_depth, p, weights.window, weights.tau_d, weights.n_pairs, seed)
        {
            pairs.push((p, q));
        }
    }
    if pairs.is_empty() {
        return Ok((0.0, grad, 0));
    }
    let denom = pairs.len() as f64;
    let mut total = 0.0;
    for (p, q) in &pairs {
        let (v, gp, gq) = pair_penalty(
            rendered_depth.get(p.0, p.1),
            rendered_depth.get(q.0, q.1),
            ref_depth.get(p.0, p.1),
            ref_depth.get(q.0, q.1),
            weights.margin,
        );
        total += v;
        if gp != 0.0 {
            let cur = grad.get(p.0, p.1);
            grad.set(p.0, p.1, cur + gp / denom);
        }
        if gq != 0.0 {
            let cur = grad.get(q.0, q.1);
            grad.set(q.0, q.1, cur + gq / denom);
        }
    }
    Ok((total / denom, grad, pairs.len() as u64))
}

/// Bilateral geometric consistency: weighted sum of the reliable-region
/// appearance loss and the unreliable-region ordering loss.
pub fn loss_bgc(l_rel: f64, l_unr: f64, weights: &LossWeights) -> f64 {
    weights.lambda_rel * l_rel + weights.lambda_unr * l_unr
}

/// Reliability-aware voxel smoothing over the 6-neighborhood: every ordered
/// (voxel, neighbor) pair contributes `(1 + exp(-rho(v))) * delta(v, v_hat)`
/// from its own endpoint, normalized by the ordered pair count. Color uses
/// the per-channel mean of the metric. Gradients, scaled by `lambda_f` /
/// `lambda_d`, accumulate into the grid buffers. Returns the unweighted
/// `(l_fc, l_sigma)` means.
pub fn loss_rs(
    grid: &mut VoxelGrid,
    field: &ReliabilityField,
    weights: &LossWeights,
) -> Result<(f64, f64), LossError> {
    let factors: Vec<f64> = field.rho().iter().map(|&r| 1.0 + (-r).exp()).collect();
    loss_rs_with_factors(grid, &factors, field.dims(), weights)
}

/// `loss_rs` with the per-voxel factors `1 + exp(-rho(v))` precomputed;
/// trainers reuse them across steps between reliability refreshes.
///
/// Gather formulation: each voxel sums its own-endpoint value terms and the
/// full (both-endpoint) gradient over its 6-neighborhood, so layers
/// parallelize with disjoint writes and the result stays deterministic.
pub fn loss_rs_with_factors(
    grid: &mut VoxelGrid,
    factors: &[f64],
    factor_dims: [usize; 3],
    weights: &LossWeights,
) -> Result<(f64, f64), LossError> {
    weights.delta_metric.validate()?;
    if factor_dims != grid.dims() {
        return Err(LossError::FieldDimsMismatch(factor_dims, grid.dims()));
    }
    let dims = grid.dims();
    let nx = dims[0];
    let ny = dims[1];
    let nz = dims[2];
    let unordered = (nx.saturating_sub(1) * ny * nz
        + nx * ny.saturating_sub(1) * nz
        + nx * ny * nz.saturating_sub(1)) as u64;
    if unordered == 0 {
        return Ok((0.0, 0.0));
    }
    // Ordered pair count: every unordered pair appears from both endpoints.
    let denom = 2.0 * unordered as f64;
    let metric = weights.delta_metric;
    let gd = weights.lambda_d / denom;
    let gf = weights.lambda_f / (3.0 * denom);
    let sy = nx as i64;
    let sz = (nx * ny) as i64;
    let layer = nx * ny;
    let (density, color, dgrad, cgrad) = grid.params_mut();

    let kernel = |z: usize, dgrad_layer: &mut [f64], cgrad_layer: &mut [f64]| -> (f64, f64) {
        let mut l_fc = 0.0;
        let mut l_sigma = 0.0;
        for y in 0..ny {
            for x in 0..nx {
                let v = x + nx * y + layer * z;
                let local = x + nx * y;
                let fv = factors[v];
                let mut gsum = 0.0;
                let mut csum = [0.0; 3];
                let mut visit = |n: i64| {
                    let n = n as usize;
                    let fpair = fv + factors[n];
                    let (dv, dg) = metric.eval(density[v], density[n]);
                    l_sigma += fv * dv;
                    gsum += fpair * dg;
                    let mut cv = 0.0;
                    for ch in 0..3 {
                        let (val, g) = metric.eval(color[3 * v + ch], color[3 * n + ch]);
                        cv += val;
                        csum[ch] += fpair * g;
                    }
                    l_fc += fv * cv / 3.0;
                };
                let vi = v as i64;
                if x + 1 < nx {
                    visit(vi + 1);
                }
                if x > 0 {
                    visit(vi - 1);
                }
                if y + 1 < ny {
                    visit(vi + sy);
                }
                if y > 0 {
                    visit(vi - sy);
                }
                if z + 1 < nz {
                    visit(vi + sz);
                }
                if z > 0 {
                    visit(vi - sz);
                }
                dgrad_layer[local] += gd * gsum;
                for ch in 0..3 {
                    cgrad_layer[3 * local + ch] += gf * csum[ch];
                }
            }
        }
        (l_fc, l_sigma)
    };

    #[cfg(feature = "parallel")]
    let partials: Vec<(f64, f64)> = {
        use rayon::prelude::*;
        dgrad
            .par_chunks_mut(layer)
            .zip(cgrad.par_chunks_mut(3 * layer))
            .enumerate()
            .map(|(z, (dl, cl))| kernel(z, dl, cl))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<(f64, f64)> = dgrad
        .chunks_mut(layer)
        .zip(cgrad.chunks_mut(3 * layer))
        .enumerate()
        .map(|(z, (dl, cl))| kernel(z, dl, cl))
        .collect();

    let mut l_fc = 0.0;
    let mut l_sigma = 0.0;
    for (fc, sigma) in partials {
        l_fc += fc;
        l_sigma += sigma;
    }
    Ok((l_fc / denom, l_sigma / denom))
}

/// Literal per-endpoint double sum: the slow reference the fused pass is
/// checked against. Returns raw (unnormalized) l_fc and l_sigma, the
/// ordered pair count, and sparse gradient contributions.
#[cfg(test)]
#[allow(clippy::type_complexity)]
fn smoothness_terms(
    dims: [usize; 3],
    density: &[f64],
    color: &[f64],
    rho: &[f64],
    metric: DeltaMetric,
) -> (f64, f64, u64, Vec<(usize, f64)>, Vec<(usize, f64)>) {
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    let mut l_fc = 0.0;
    let mut l_sigma = 0.0;
    let mut pairs: u64 = 0;
    let mut dgrad = vec![0.0; density.len()];
    let mut cgrad = vec![0.0; color.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = idx(x, y, z);
                let factor = 1.0 + (-rho[v]).exp();
                let mut visit = |n: usize| {
                    pairs += 1;
                    let (dv, dg) = metric.eval(density[v], density[n]);
                    l_sigma += factor * dv;
                    dgrad[v] += factor * dg;
                    dgrad[n] -= factor * dg;
                    let mut cv = 0.0;
                    for ch in 0..3 {
                        let (val, g) = metric.eval(color[3 * v + ch], color[3 * n + ch]);
                        cv += val;
                        // Per-channel mean inside the color metric.
                        cgrad[3 * v + ch] += factor * g / 3.0;
                        cgrad[3 * n + ch] -= factor * g / 3.0;
                    }
                    l_fc += factor * cv / 3.0;
                };
                if x + 1 < dims[0] {
                    visit(idx(x + 1, y, z));
                }
                if x > 0 {
                    visit(idx(x - 1, y, z));
                }
                if y + 1 < dims[1] {
                    visit(idx(x, y + 1, z));
                }
                if y > 0 {
                    visit(idx(x, y - 1, z));
                }
                if z + 1 < dims[2] {
                    visit(idx(x, y, z + 1));
                }
                if z > 0 {
                    visit(idx(x, y, z - 1));
                }
            }
        }
    }
    let dsparse = dgrad
        .into_iter()
        .enumerate()
        .filter(|(_, v)| *v != 0.0)
        .collect();
    let csparse = cgrad
        .into_iter()
        .enumerate()
        .filter(|(_, v)| *v != 0.0)
        .collect();
    (l_fc, l_sigma, pairs, dsparse, csparse)
}

/// Unnormalized smoothness of one depth patch: squared differences to the
/// right and down neighbors, border terms skipped. Returns the sum and its
/// gradient image.
fn patch_smoothness(patch: &DepthMap) -> (f64, DepthMap) {
    let w = patch.width();
    let h = patch.height();
    let mut total = 0.0;
    let mut grad = DepthMap::new(w, h).expect("nonzero dims");
    for y in 0..h {
        for x in 0..w {
            let d = patch.get(x, y);
            if y + 1 < h {
                let e = d - patch.get(x, y + 1);
                total += e * e;
                grad.set(x, y, grad.get(x, y) + 2.0 * e);
                grad.set(x, y + 1, grad.get(x, y + 1) - 2.0 * e);
            }
            if x + 1 < w {
                let e = d - patch.get(x + 1, y);
                total += e * e;
                grad.set(x, y, grad.get(x, y) + 2.0 * e);
                grad.set(x + 1, y, grad.get(x + 1, y) - 2.0 * e);
            }
        }
    }
    (total, grad)
}

/// Depth smoothness over rendered patches, averaged over the patch count.
/// Patches must be at least 2x2.
pub fn loss_ds(patches: &[DepthMap]) -> Result<(f64, Vec<DepthMap>), LossError> {
    if patches.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    for p in patches {
        if p.width() < 2 || p.height() < 2 {
            return Err(LossError::PatchTooSmall(p.width(), p.height()));
        }
    }
    let denom = patches.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(patches.len());
    for p in patches {
        let (v, mut g) = patch_smoothness(p);
        total += v;
        for gv in g.values_mut() {
            *gv /= denom;
        }
        grads.push(g);
    }
    Ok((total / denom, grads))
}

/// Assemble the step's loss report; the total follows
/// `l_total = l_rgb + l_bgc + l_rs + lambda_ds * l_ds`. Any non-finite
/// component is an error naming the term.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    l_rgb: f64,
    l_rel: f64,
    l_unr: f64,
    l_fc: f64,
    l_sigma: f64,
    l_ds: f64,
    weights: &LossWeights,
    counts: (u64, u64, u64, u64),
) -> Result<LossReport, LossError> {
    for (name, v) in [
        ("l_rgb", l_rgb),
        ("l_rel", l_rel),
        ("l_unr", l_unr),
        ("l_fc", l_fc),
        ("l_sigma", l_sigma),
        ("l_ds", l_ds),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    let l_bgc = loss_bgc(l_rel, l_unr, weights);
    let l_rs = weights.lambda_f * l_fc + weights.lambda_d * l_sigma;
    let l_total = l_rgb + l_bgc + l_rs + weights.lambda_ds * l_ds;
    Ok(LossReport {
        l_rgb,
        l_rel,
        l_unr,
        l_bgc,
        l_fc,
        l_sigma,
        l_rs,
        l_ds,
        l_total,
        n_rgb_rays: counts.0,
        n_rel_pixels: counts.1,
        n_unr_pairs: counts.2,
        n_ds_patches: counts.3,
    })
}
