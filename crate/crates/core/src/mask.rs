//! Boolean voxel masks and 3×3×3 morphology.

use serde::{Deserialize, Serialize};

/// Per-voxel membership flags over a volume grid (x fastest, then y, then z).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    dims: [usize; 3],
    voxels: Vec<bool>,
    count: usize,
}

impl Mask {
    /// Panics if `voxels.len()` does not match the grid size.
    pub fn new(dims: [usize; 3], voxels: Vec<bool>) -> Self {
        assert_eq!(
            voxels.len(),
            dims[0] * dims[1] * dims[2],
            "mask length does not match dims"
        );
        let count = voxels.iter().filter(|&&v| v).count();
        Self { dims, voxels, count }
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self::new(dims, vec![false; dims[0] * dims[1] * dims[2]])
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut voxels = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Number of voxels set.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn contains(&self, index: usize) -> bool {
        self.voxels[index]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.voxels
    }

    /// Linear indices of the set voxels, ascending.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.voxels
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
    }

    pub fn complement(&self) -> Self {
        Self::new(self.dims, self.voxels.iter().map(|v| !v).collect())
    }

    pub fn union(&self, other: &Mask) -> Self {
        assert_eq!(self.dims, other.dims);
        Self::new(
            self.dims,
            self.voxels
                .iter()
                .zip(&other.voxels)
                .map(|(a, b)| *a || *b)
                .collect(),
        )
    }

    pub fn intersection(&self, other: &Mask) -> Self {
        assert_eq!(self.dims, other.dims);
        Self::new(
            self.dims,
            self.voxels
                .iter()
                .zip(&other.voxels)
                .map(|(a, b)| *a && *b)
                .collect(),
        )
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.voxels.iter().zip(&other.voxels).all(|(a, b)| !(*a && *b))
    }

    /// Sørensen–Dice overlap, 1.0 for two empty masks.
    pub fn dice(&self, other: &Mask) -> f64 {
        assert_eq!(self.dims, other.dims);
        let both = self.intersection(other).count;
        let total = self.count + other.count;
        if total == 0 {
            1.0
        } else {
            2.0 * both as f64 / total as f64
        }
    }

    /// Binary dilation with a 3×3×3 cube; voxels outside the grid count as unset.
    pub fn dilate(&self) -> Self {
        let [nx, ny, nz] = self.dims;
        let mut out = vec![false; self.voxels.len()];
        for i in self.indices() {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            for zz in z.saturating_sub(1)..=(z + 1).min(nz - 1) {
                for yy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                    let row = nx * (yy + ny * zz);
                    for xx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                        out[row + xx] = true;
                    }
                }
            }
        }
        Self::new(self.dims, out)
    }

    /// Binary erosion with a 3×3×3 cube; voxels outside the grid count as set,
    /// so erosion never eats into a mask from the volume border.
    pub fn erode(&self) -> Self {
        self.complement().dilate().complement()
    }

    /// Dilation followed by erosion. Always a superset of `self`.
    pub fn close(&self) -> Self {
        self.dilate().erode()
    }
}
