use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Smallest accepted extent along any axis.
pub const MIN_EXTENT: usize = 8;

/// Occupancy threshold used when binarizing soft grids.
pub const BINARIZE_THRESHOLD: f32 = 0.5;

/// A dense 3D occupancy grid stored in `(d, h, w)` row-major order.
///
/// Axis 0 runs inferior to superior, axis 1 posterior to anterior and
/// axis 2 left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    values: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], values: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&n| n < MIN_EXTENT) {
            return Err(invalid(format!(
                "grid dims {dims:?} must be at least {MIN_EXTENT} along every axis"
            )));
        }
        let len = dims.iter().product::<usize>();
        if values.len() != len {
            return Err(invalid(format!(
                "grid dims {dims:?} need {len} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("grid values must be finite"));
        }
        Ok(Self {
            dims,
            spacing: [1.0; 3],
            values,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, vec![0.0; dims.iter().product()])
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.values[self.index(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: f32) {
        let i = self.index(d, h, w);
        self.values[i] = v;
    }

    /// Every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn binarize(&self, threshold: f32) -> VoxelGrid {
        VoxelGrid {
            dims: self.dims,
            spacing: self.spacing,
            values: self
                .values
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Number of voxels at or above the binarization threshold.
    pub fn occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v >= BINARIZE_THRESHOLD).count()
    }

    pub fn same_shape(&self, other: &VoxelGrid) -> Result<()> {
        if self.dims != other.dims {
            return Err(invalid(format!(
                "grid shapes differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Whether every occupied voxel of `self` is occupied in `other`.
    pub fn is_subset_of(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(&a, &b)| a < BINARIZE_THRESHOLD || b >= BINARIZE_THRESHOLD)
    }
}

/// Half-open voxel box `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn contains(&self, d: usize, h: usize, w: usize) -> bool {
        let p = [d, h, w];
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    /// Fraction of the occupied voxels of `grid` that fall inside the box;
    /// `None` when the grid is empty.
    pub fn fraction_inside(&self, grid: &VoxelGrid) -> Option<f64> {
        let [nd, nh, nw] = grid.dims();
        let (mut inside, mut total) = (0usize, 0usize);
        for d in 0..nd {
            for h in 0..nh {
                for w in 0..nw {
                    if grid.get(d, h, w) >= BINARIZE_THRESHOLD {
                        total += 1;
                        if self.contains(d, h, w) {
                            inside += 1;
                        }
                    }
                }
            }
        }
        (total > 0).then(|| inside as f64 / total as f64)
    }
}

/// Majority-vote pooling over `factor^3` blocks; ties resolve to empty.
pub fn downsample(grid: &VoxelGrid, factor: usize) -> Result<VoxelGrid> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(invalid(format!("downsample factor {factor} is not a power of two")));
    }
    let dims = grid.dims();
    if dims.iter().any(|n| n % factor != 0) {
        return Err(invalid(format!(
            "grid dims {dims:?} are not divisible by {factor}"
        )));
    }
    let out_dims = [dims[0] / factor, dims[1] / factor, dims[2] / factor];
    let block = factor * factor * factor;
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for od in 0..out_dims[0] {
        for oh in 0..out_dims[1] {
            for ow in 0..out_dims[2] {
                let mut ones = 0usize;
                for d in od * factor..(od + 1) * factor {
                    for h in oh * factor..(oh + 1) * factor {
                        for w in ow * factor..(ow + 1) * factor {
                            if grid.get(d, h, w) >= BINARIZE_THRESHOLD {
                                ones += 1;
                            }
                        }
                    }
                }
                out.push(if 2 * ones > block { 1.0 } else { 0.0 });
            }
        }
    }
    let sp = grid.spacing();
    let f = factor as f64;
    Ok(VoxelGrid::new(out_dims, out)?.with_spacing([sp[0] * f, sp[1] * f, sp[2] * f]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_mismatched() {
        assert!(VoxelGrid::zeros([4, 8, 8]).is_err());
        assert!(VoxelGrid::new([8, 8, 8], vec![0.0; 10]).is_err());
        assert!(VoxelGrid::new([8, 8, 8], vec![f32::NAN; 512]).is_err());
    }

    #[test]
    fn downsample_identity_and_uniform() {
        let mut g = VoxelGrid::zeros([8, 8, 16]).unwrap();
        g.set(1, 2, 3, 1.0);
        assert_eq!(downsample(&g, 1).unwrap(), g);
        let ones = VoxelGrid::new([16, 16, 16], vec![1.0; 4096]).unwrap();
        let small = downsample(&ones, 2).unwrap();
        assert_eq!(small.dims(), [8, 8, 8]);
        assert!(small.values().iter().all(|&v| v == 1.0));
        assert!(downsample(&g, 3).is_err());
        assert!(downsample(&ones, 32).is_err());
    }

    #[test]
    fn downsample_majority_rule() {
        let mut g = VoxelGrid::zeros([16, 16, 16]).unwrap();
        let block = [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0), (1, 1, 1)];
        for &(d, h, w) in &block {
            g.set(d, h, w, 1.0);
        }
        // a second block with exactly half occupied
        for &(d, h, w) in &block[..4] {
            g.set(d + 2, h, w, 1.0);
        }
        let small = downsample(&g, 2).unwrap();
        assert_eq!(small.get(0, 0, 0), 1.0);
        assert_eq!(small.get(1, 0, 0), 0.0);
        assert_eq!(small.spacing(), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn bounding_box_fraction() {
        let mut g = VoxelGrid::zeros([8, 8, 8]).unwrap();
        g.set(1, 1, 1, 1.0);
        g.set(6, 6, 6, 1.0);
        let b = BoundingBox { min: [0, 0, 0], max: [4, 4, 4] };
        assert_eq!(b.fraction_inside(&g), Some(0.5));
        assert_eq!(b.fraction_inside(&VoxelGrid::zeros([8, 8, 8]).unwrap()), None);
    }
}
