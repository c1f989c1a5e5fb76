//! Scalar 3D volumes, NIfTI-1 I/O and synthetic phantoms.

mod nifti;
mod phantom;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nifti::{read_nifti, read_nifti_bytes, write_nifti, write_nifti_with, Datatype, WriteOptions};
pub use phantom::{generate_phantom, GroundTruth, InnerEllipsoid, PhantomSpec};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid dimensions {0:?}: every axis needs at least one voxel")]
    InvalidDims([usize; 3]),
    #[error("data length {actual} does not match dims (expected {expected})")]
    DataLength { expected: usize, actual: usize },
    #[error("spacing {0:?} must be strictly positive and finite")]
    InvalidSpacing([f32; 3]),
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("not a NIfTI-1 file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI variant: {0}")]
    UnsupportedVariant(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated data: expected {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("invalid phantom spec: {0}")]
    InvalidPhantom(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Affine = [[f32; 4]; 4];

/// A 3D scalar intensity grid.
///
/// Voxels are stored x-fastest (`x + nx * (y + ny * z)`), so each axial
/// slice `z` is one contiguous block of `nx * ny` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
    affine: Affine,
    metadata: BTreeMap<String, String>,
}

impl Volume {
    /// Builds a volume with a diagonal affine from `spacing`.
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::InvalidDims(dims));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(VolumeError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            affine: diagonal_affine(spacing),
            metadata: BTreeMap::new(),
        })
    }

    /// Unit spacing, diagonal affine.
    pub fn from_data(dims: [usize; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        Self::new(dims, [1.0; 3], data)
    }

    pub fn with_affine(mut self, affine: Affine) -> Self {
        self.affine = affine;
        self
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    /// Same geometry and metadata, new intensities.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self, VolumeError> {
        Ok(Self::new(self.dims, self.spacing, data)?
            .with_affine(self.affine)
            .with_metadata(self.metadata.clone()))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self, VolumeError> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let [nx, ny, _] = self.dims;
        (index % nx, (index / nx) % ny, index / (nx * ny))
    }

    /// Axial slice `z`, x-fastest.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.dims[0] * self.dims[1];
        &self.data[z * n..(z + 1) * n]
    }

    /// Sum of squared intensities, accumulated in f64.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }
}

pub(crate) fn diagonal_affine(spacing: [f32; 3]) -> Affine {
    [
        [spacing[0], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[2], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(
            Volume::from_data([0, 1, 1], vec![]),
            Err(VolumeError::InvalidDims(_))
        ));
        assert!(matches!(
            Volume::from_data([2, 2, 2], vec![0.0; 7]),
            Err(VolumeError::DataLength { expected: 8, actual: 7 })
        ));
        assert!(matches!(
            Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]),
            Err(VolumeError::InvalidSpacing(_))
        ));
        assert!(matches!(
            Volume::from_data([1, 1, 2], vec![0.0, f32::NAN]),
            Err(VolumeError::NonFinite(1))
        ));
    }

    #[test]
    fn indexing_is_x_fastest() {
        let v = Volume::from_data([2, 3, 4], (0..24).map(|i| i as f32).collect()).unwrap();
        assert_eq!(v.get(1, 0, 0), 1.0);
        assert_eq!(v.get(0, 1, 0), 2.0);
        assert_eq!(v.get(0, 0, 1), 6.0);
        assert_eq!(v.coords(23), (1, 2, 3));
        assert_eq!(v.slice(2), &[12.0, 13.0, 14.0, 15.0, 16.0, 17.0]);
    }
}
