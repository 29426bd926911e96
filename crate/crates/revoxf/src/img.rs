//! Row-major 2D containers for images, depth maps, and binary masks.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("plane dimensions must be nonzero, got {0}x{1}")]
    EmptyPlane(u32, u32),
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
}

/// A dense row-major plane of per-pixel values. Pixel (0, 0) is the top-left
/// corner; `x` runs along the width, `y` down the height.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

/// RGB image with channel values in [0, 1].
pub type ImageRgb = Plane<[f64; 3]>;
/// Per-pixel depth in scene units (camera-frame z unless stated otherwise).
pub type DepthMap = Plane<f64>;
/// Binary per-pixel mask.
pub type Mask = Plane<bool>;

impl<T: Copy + Default> Plane<T> {
    pub fn new(width: u32, height: u32) -> Result<Self, ImgError> {
        if width == 0 || height == 0 {
            return Err(ImgError::EmptyPlane(width, height));
        }
        Ok(Self {
            width,
            height,
            data: vec![T::default(); width as usize * height as usize],
        })
    }

    pub fn filled(width: u32, height: u32, value: T) -> Result<Self, ImgError> {
        let mut p = Self::new(width, height)?;
        p.data.fill(value);
        Ok(p)
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> T,
    ) -> Result<Self, ImgError> {
        let mut p = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                p.data[(y * width + x) as usize] = f(x, y);
            }
        }
        Ok(p)
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Result<Self, ImgError> {
        if width == 0 || height == 0 || data.len() != width as usize * height as usize {
            return Err(ImgError::EmptyPlane(width, height));
        }
        Ok(Self { width, height, data })
    }
}

impl<T: Copy> Plane<T> {
    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> T {
        debug_assert!(x < self.width && y < self.height);
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: T) {
        debug_assert!(x < self.width && y < self.height);
        self.data[(y * self.width + x) as usize] = value;
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U: Copy>(&self, other: &Plane<U>) -> Result<(), ImgError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImgError::ShapeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Iterate `(x, y, value)` in row-major order.
    pub fn enumerate(&self) -> impl Iterator<Item = (u32, u32, T)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (i as u32 % w, i as u32 / w, *v))
    }
}

impl Mask {
    /// Elementwise OR; both masks must share a shape.
    pub fn or(&self, other: &Mask) -> Result<Mask, ImgError> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a || *b)
            .collect();
        Ok(Mask {
            width: self.width,
            height: self.height,
            data,
        })
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// Pixel coordinates where the mask is set, row-major order.
    pub fn set_pixels(&self) -> Vec<(u32, u32)> {
        self.enumerate()
            .filter_map(|(x, y, b)| b.then_some((x, y)))
            .collect()
    }

    /// Morphological dilation by one pixel (4-neighborhood plus diagonals).
    pub fn dilate(&self) -> Mask {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    continue;
                }
                let mut hit = false;
                'scan: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let nx = x as i64 + dx;
                        let ny = y as i64 + dy;
                        if nx >= 0
                            && ny >= 0
                            && (nx as u32) < self.width
                            && (ny as u32) < self.height
                            && self.get(nx as u32, ny as u32)
                        {
                            hit = true;
                            break 'scan;
                        }
                    }
                }
                if hit {
                    out.set(x, y, true);
                }
            }
        }
        out
    }
}
