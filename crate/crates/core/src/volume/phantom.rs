//! Ellipsoid phantoms with known ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Volume, VolumeError};
use crate::mask::Mask;

/// Optional second compartment nested in the main ellipsoid, used as a
/// contrast target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerEllipsoid {
    pub semi_axes: [f64; 3],
    pub intensity: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub tissue_intensity: f32,
    /// Semi-axes in voxels, centred on the grid centre.
    pub semi_axes: [f64; 3],
    pub background_noise_sigma: f32,
    pub seed: u64,
    #[serde(default)]
    pub inner: Option<InnerEllipsoid>,
    #[serde(default = "unit_spacing")]
    pub spacing: [f32; 3],
}

fn unit_spacing() -> [f32; 3] {
    [1.0; 3]
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            tissue_intensity: 100.0,
            semi_axes: [20.0, 24.0, 18.0],
            background_noise_sigma: 5.0,
            seed: 0,
            inner: None,
            spacing: unit_spacing(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), VolumeError> {
        let bad = |m: String| Err(VolumeError::InvalidPhantom(m));
        if self.dims.contains(&0) {
            return bad(format!("dims {:?}", self.dims));
        }
        if !(self.tissue_intensity.is_finite() && self.tissue_intensity > 0.0) {
            return bad(format!("tissue_intensity {} must be > 0", self.tissue_intensity));
        }
        if !(self.background_noise_sigma.is_finite() && self.background_noise_sigma >= 0.0) {
            return bad(format!("background_noise_sigma {} must be >= 0", self.background_noise_sigma));
        }
        for axis in 0..3 {
            let a = self.semi_axes[axis];
            if !(a.is_finite() && a > 0.0 && a <= self.dims[axis] as f64 / 2.0) {
                return bad(format!(
                    "semi-axis {a} does not fit in dimension {} of size {}",
                    axis, self.dims[axis]
                ));
            }
        }
        if let Some(inner) = &self.inner {
            if !inner.intensity.is_finite() {
                return bad("inner intensity must be finite".into());
            }
            for axis in 0..3 {
                let a = inner.semi_axes[axis];
                if !(a.is_finite() && a > 0.0 && a <= self.semi_axes[axis]) {
                    return bad(format!("inner semi-axis {a} must lie within the outer ellipsoid"));
                }
            }
        }
        Ok(())
    }

    fn inside(&self, semi: [f64; 3], x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        (0..3)
            .map(|a| {
                let c = (self.dims[a] as f64 - 1.0) / 2.0;
                let d = (p[a] - c) / semi[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }
}

/// What the phantom is known to contain.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub foreground: Mask,
    pub inner: Option<Mask>,
    /// Exact mean of the foreground voxel values.
    pub mu_f: f64,
    /// Nominal background noise standard deviation.
    pub sigma_b: f64,
}

/// Ellipsoidal tissue on a background of i.i.d. zero-mean Gaussian noise.
/// Deterministic in `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, GroundTruth), VolumeError> {
    spec.validate()?;
    let fg = Mask::from_fn(spec.dims, |x, y, z| spec.inside(spec.semi_axes, x, y, z));
    let inner = spec
        .inner
        .map(|inner| Mask::from_fn(spec.dims, |x, y, z| spec.inside(inner.semi_axes, x, y, z)));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f64, spec.background_noise_sigma as f64)
        .map_err(|e| VolumeError::InvalidPhantom(e.to_string()))?;
    let mut data = Vec::with_capacity(fg.len());
    let mut fg_sum = 0.0f64;
    for i in 0..fg.len() {
        let v = if inner.as_ref().is_some_and(|m| m.contains(i)) {
            spec.inner.unwrap().intensity
        } else if fg.contains(i) {
            spec.tissue_intensity
        } else if spec.background_noise_sigma > 0.0 {
            noise.sample(&mut rng) as f32
        } else {
            0.0
        };
        if fg.contains(i) {
            fg_sum += v as f64;
        }
        data.push(v);
    }
    let truth = GroundTruth {
        mu_f: fg_sum / fg.count().max(1) as f64,
        sigma_b: spec.background_noise_sigma as f64,
        foreground: fg,
        inner,
    };
    Ok((Volume::new(spec.dims, spec.spacing, data)?, truth))
}
