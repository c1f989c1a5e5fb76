//! Foreground/background partition of a volume.
//!
//! Foreground is the largest 26-connected component of the Otsu-thresholded
//! volume, closed once with a 3×3×3 cube. Background is everything outside
//! the foreground dilated by one voxel, so a one-voxel guard band belongs
//! to neither region.

use thiserror::Error;

pub use crate::mask::Mask;
use crate::volume::Volume;

const OTSU_BINS: usize = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentationError {
    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),
}

/// Otsu threshold expressed as a histogram bin: voxels in bins `> bin` are
/// foreground.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtsuThreshold {
    pub bin: usize,
    pub min: f64,
    pub max: f64,
}

impl OtsuThreshold {
    pub fn bin_of(&self, value: f32) -> usize {
        histogram_bin(value as f64, self.min, self.max)
    }

    /// Intensity at the upper edge of the threshold bin.
    pub fn value(&self) -> f64 {
        self.min + (self.max - self.min) * (self.bin + 1) as f64 / OTSU_BINS as f64
    }
}

fn histogram_bin(v: f64, min: f64, max: f64) -> usize {
    let t = (v - min) / (max - min) * OTSU_BINS as f64;
    (t.max(0.0) as usize).min(OTSU_BINS - 1)
}

/// 256-bin Otsu threshold; ties resolve to the lowest bin.
pub fn otsu_threshold(data: &[f32]) -> Result<OtsuThreshold, SegmentationError> {
    let (min, max) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    if data.is_empty() || min >= max {
        return Err(SegmentationError::DegenerateVolume(
            "constant intensity, Otsu threshold undefined".into(),
        ));
    }
    let mut hist = [0u64; OTSU_BINS];
    for &v in data {
        hist[histogram_bin(v as f64, min, max)] += 1;
    }
    let total = data.len() as f64;
    let total_moment: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();

    let mut best = (0usize, f64::NEG_INFINITY);
    let (mut w0, mut m0) = (0.0f64, 0.0f64);
    for (k, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        m0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = m0 / w0;
        let mu1 = (total_moment - m0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.1 {
            best = (k, between);
        }
    }
    Ok(OtsuThreshold { bin: best.0, min, max })
}

/// Largest 26-connected component of `mask`; equal-sized components are
/// resolved in favour of the one reached first in scan order.
pub fn largest_component(mask: &Mask) -> Mask {
    let [nx, ny, nz] = mask.dims();
    let mut label = vec![0u32; mask.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for seed in mask.indices() {
        if label[seed] != 0 {
            continue;
        }
        next += 1;
        label[seed] = next;
        stack.push(seed);
        let mut size = 0usize;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            for zz in z.saturating_sub(1)..=(z + 1).min(nz - 1) {
                for yy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                        let j = xx + nx * (yy + ny * zz);
                        if mask.contains(j) && label[j] == 0 {
                            label[j] = next;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    Mask::new(mask.dims(), label.iter().map(|&l| l != 0 && l == best.0).collect())
}

pub fn foreground_mask(v: &Volume) -> Result<Mask, SegmentationError> {
    let otsu = otsu_threshold(v.data())?;
    let raw = Mask::new(v.dims(), v.data().iter().map(|&x| otsu.bin_of(x) > otsu.bin).collect());
    let fg = largest_component(&raw).close();
    if fg.count() == fg.len() {
        return Err(SegmentationError::DegenerateVolume(
            "foreground covers the whole volume".into(),
        ));
    }
    Ok(fg)
}

/// Complement of the one-voxel dilation of `fg`.
pub fn background_mask(v: &Volume, fg: &Mask) -> Mask {
    assert_eq!(v.dims(), fg.dims(), "mask does not match volume");
    fg.dilate().complement()
}
