//! Row-major 2D buffers used for images, depth maps and masks.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Linear RGB in [0, 1].
pub type RgbImage = Plane<[f64; 3]>;
/// Planar depth; `NaN` marks invalid pixels.
pub type DepthMap = Plane<f64>;
pub type Mask = Plane<bool>;

impl<T: Clone> Plane<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Plane<T> {
    /// Panics if `data.len() != width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "plane size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Plane<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Plane<U> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Nearest pixel to continuous coordinates, with pixel centres at
    /// integer positions.
    pub fn nearest_index(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let x = u.round();
        let y = v.round();
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (x, y) = (x as usize, y as usize);
        (x < self.width && y < self.height).then_some((x, y))
    }
}

impl DepthMap {
    pub fn depth_at(&self, x: usize, y: usize) -> Option<f64> {
        let d = *self.get(x, y);
        d.is_finite().then_some(d)
    }

    /// Bilinear sample at continuous coordinates. Every contributing corner
    /// must be valid.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        if x0 >= self.width || y0 >= self.height {
            return None;
        }
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let d00 = self.depth_at(x0, y0)?;
        let d10 = self.depth_at(x1, y0)?;
        let d01 = self.depth_at(x0, y1)?;
        let d11 = self.depth_at(x1, y1)?;
        Some(
            d00 * (1.0 - fx) * (1.0 - fy)
                + d10 * fx * (1.0 - fy)
                + d01 * (1.0 - fx) * fy
                + d11 * fx * fy,
        )
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| d.is_finite()).count()
    }
}

impl Mask {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction_true(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count_true() as f64 / self.data.len() as f64
        }
    }
}
