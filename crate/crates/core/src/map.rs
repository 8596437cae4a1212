//! Per-pixel maps with validity masks.

use nalgebra::Vector3;

use crate::geometry::PlaneHypothesis;

/// Dense per-pixel values plus a validity flag per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Clone> GridMap<T> {
    /// Map filled with `fill`, every pixel marked invalid.
    pub fn invalid(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            values: vec![fill; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Map filled with `fill`, every pixel valid.
    pub fn filled(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            values: vec![fill; width * height],
            valid: vec![true; width * height],
        }
    }
}

impl<T> GridMap<T> {
    pub fn from_parts(width: usize, height: usize, values: Vec<T>, valid: Vec<bool>) -> Self {
        assert_eq!(values.len(), width * height);
        assert_eq!(valid.len(), width * height);
        Self {
            width,
            height,
            values,
            valid,
        }
    }

    pub fn from_fn<F: FnMut(usize, usize) -> Option<T>>(width: usize, height: usize, default: T, mut f: F) -> Self
    where
        T: Clone,
    {
        let mut values = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x, y) {
                    Some(v) => {
                        values.push(v);
                        valid.push(true);
                    }
                    None => {
                        values.push(default.clone());
                        valid.push(false);
                    }
                }
            }
        }
        Self::from_parts(width, height, values, valid)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape<U>(&self, other: &GridMap<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Value at a pixel if valid.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<&T> {
        let i = self.index(x, y);
        self.valid[i].then(|| &self.values[i])
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize) -> &T {
        &self.values[self.index(x, y)]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[self.index(x, y)]
    }

    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = self.index(x, y);
        self.values[i] = value;
        self.valid[i] = true;
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = self.index(x, y);
        self.valid[i] = false;
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn map<U, F: FnMut(&T) -> U>(&self, f: F) -> GridMap<U> {
        GridMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(f).collect(),
            valid: self.valid.clone(),
        }
    }

    /// Iterates `(x, y, value)` over valid pixels in row-major order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, &T)> + '_ {
        let w = self.width;
        self.values
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter(|(_, (_, v))| **v)
            .map(move |(i, (val, _))| (i % w, i / w, val))
    }
}

/// Depth in scene units (camera-frame z).
pub type DepthMap = GridMap<f64>;
/// Camera-frame unit normals.
pub type NormalMap = GridMap<Vector3<f64>>;
/// PatchMatch state: one plane hypothesis per pixel.
pub type DepthNormalMap = GridMap<PlaneHypothesis>;

impl DepthNormalMap {
    pub fn depth_map(&self) -> DepthMap {
        self.map(|h| h.depth)
    }

    pub fn normal_map(&self) -> NormalMap {
        self.map(|h| h.normal)
    }

    /// Combines depth and normal maps; a pixel is valid when both are.
    pub fn from_depth_normal(depth: &DepthMap, normal: &NormalMap) -> Self {
        assert!(depth.same_shape(normal));
        let values = depth
            .values()
            .iter()
            .zip(normal.values())
            .map(|(d, n)| PlaneHypothesis::new(*d, *n))
            .collect();
        let valid = depth.mask().iter().zip(normal.mask()).map(|(a, b)| *a && *b).collect();
        Self::from_parts(depth.width(), depth.height(), values, valid)
    }
}
