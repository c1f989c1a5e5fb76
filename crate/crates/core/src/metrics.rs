//! The fifteen no-reference quality indicators.
//!
//! Definitions follow MRQy conventions as far as they are documented; the
//! exact formulas used here are:
//!
//! | column | definition |
//! |--------|------------|
//! | MEAN | μ_F |
//! | RNG  | max_F − min_F |
//! | VAR  | σ_F² |
//! | CV   | σ_F / \|μ_F\| |
//! | CPP  | mean \|8·I − Σ in-plane 8-neighbours\| over foreground (zero padded) |
//! | PSNR | 10·log10(max_F² / MSE(I, median₃(I))) over foreground |
//! | SNR1 | μ_F / σ_B |
//! | SNR2 | μ_P / σ_B |
//! | SNR3 | μ_P / σ_P |
//! | SNR4 | μ_P / σ_BP |
//! | CNR  | \|μ_P − μ_BP\| / σ_BP |
//! | CVP  | σ_P / \|μ_P\| |
//! | CJV  | (σ_F + σ_B) / \|μ_F − μ_B\| |
//! | EFC  | normalised entropy of \|I\| over the whole volume, see [`efc`] |
//! | FBER | median(F²) / median(B²) |
//!
//! `P` is the set of foreground voxels in the 5×5×5 box centred on the
//! foreground centroid, `BP` the background voxels in the first volume
//! corner box (same size) that contains any. `median₃` is a 3×3×3 median
//! filter with edge replication. Standard deviations are population
//! (divide by n). Medians of even-sized sets average the two middle values.
//!
//! A metric whose denominator vanishes is reported as undefined with a
//! cause instead of being zeroed.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::Mask;
use crate::volume::Volume;

const PATCH: usize = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("empty {0} region")]
    EmptyRegion(&'static str),
    #[error("mask dims {mask:?} do not match volume dims {volume:?}")]
    DimMismatch { volume: [usize; 3], mask: [usize; 3] },
    #[error("volume has no nonzero voxel")]
    AllZeroVolume,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Mean,
    Rng,
    Var,
    Cv,
    Cpp,
    Psnr,
    Snr1,
    Snr2,
    Snr3,
    Snr4,
    Cnr,
    Cvp,
    Cjv,
    Efc,
    Fber,
}

impl MetricName {
    /// Fixed column order of every metrics table.
    pub const ALL: [MetricName; 15] = [
        MetricName::Mean,
        MetricName::Rng,
        MetricName::Var,
        MetricName::Cv,
        MetricName::Cpp,
        MetricName::Psnr,
        MetricName::Snr1,
        MetricName::Snr2,
        MetricName::Snr3,
        MetricName::Snr4,
        MetricName::Cnr,
        MetricName::Cvp,
        MetricName::Cjv,
        MetricName::Efc,
        MetricName::Fber,
    ];

    pub fn column(self) -> &'static str {
        match self {
            MetricName::Mean => "MEAN",
            MetricName::Rng => "RNG",
            MetricName::Var => "VAR",
            MetricName::Cv => "CV",
            MetricName::Cpp => "CPP",
            MetricName::Psnr => "PSNR",
            MetricName::Snr1 => "SNR1",
            MetricName::Snr2 => "SNR2",
            MetricName::Snr3 => "SNR3",
            MetricName::Snr4 => "SNR4",
            MetricName::Cnr => "CNR",
            MetricName::Cvp => "CVP",
            MetricName::Cjv => "CJV",
            MetricName::Efc => "EFC",
            MetricName::Fber => "FBER",
        }
    }

    /// Unchanged when every intensity is multiplied by a positive constant.
    pub fn is_scale_invariant(self) -> bool {
        !matches!(
            self,
            MetricName::Mean | MetricName::Rng | MetricName::Var | MetricName::Cpp | MetricName::Psnr
        )
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UndefinedMetric {
    pub metric: MetricName,
    pub cause: String,
}

/// Foreground/background summary statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FgBgStats {
    pub mu_f: f64,
    pub sigma_f: f64,
    pub mu_b: f64,
    pub sigma_b: f64,
    pub n_f: usize,
    pub n_b: usize,
    pub max_f: f64,
    pub min_f: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub mean: Option<f64>,
    pub rng: Option<f64>,
    pub var: Option<f64>,
    pub cv: Option<f64>,
    pub cpp: Option<f64>,
    pub psnr: Option<f64>,
    pub snr1: Option<f64>,
    pub snr2: Option<f64>,
    pub snr3: Option<f64>,
    pub snr4: Option<f64>,
    pub cnr: Option<f64>,
    pub cvp: Option<f64>,
    pub cjv: Option<f64>,
    pub efc: Option<f64>,
    pub fber: Option<f64>,
    /// Why each `None` above is missing.
    #[serde(default)]
    pub undefined: Vec<UndefinedMetric>,
}

impl QualityMetrics {
    pub fn get(&self, name: MetricName) -> Option<f64> {
        *self.slot(name)
    }

    fn slot(&self, name: MetricName) -> &Option<f64> {
        match name {
            MetricName::Mean => &self.mean,
            MetricName::Rng => &self.rng,
            MetricName::Var => &self.var,
            MetricName::Cv => &self.cv,
            MetricName::Cpp => &self.cpp,
            MetricName::Psnr => &self.psnr,
            MetricName::Snr1 => &self.snr1,
            MetricName::Snr2 => &self.snr2,
            MetricName::Snr3 => &self.snr3,
            MetricName::Snr4 => &self.snr4,
            MetricName::Cnr => &self.cnr,
            MetricName::Cvp => &self.cvp,
            MetricName::Cjv => &self.cjv,
            MetricName::Efc => &self.efc,
            MetricName::Fber => &self.fber,
        }
    }

    fn slot_mut(&mut self, name: MetricName) -> &mut Option<f64> {
        match name {
            MetricName::Mean => &mut self.mean,
            MetricName::Rng => &mut self.rng,
            MetricName::Var => &mut self.var,
            MetricName::Cv => &mut self.cv,
            MetricName::Cpp => &mut self.cpp,
            MetricName::Psnr => &mut self.psnr,
            MetricName::Snr1 => &mut self.snr1,
            MetricName::Snr2 => &mut self.snr2,
            MetricName::Snr3 => &mut self.snr3,
            MetricName::Snr4 => &mut self.snr4,
            MetricName::Cnr => &mut self.cnr,
            MetricName::Cvp => &mut self.cvp,
            MetricName::Cjv => &mut self.cjv,
            MetricName::Efc => &mut self.efc,
            MetricName::Fber => &mut self.fber,
        }
    }

    /// Stores `value` if finite, otherwise flags the metric with `cause`.
    fn set(&mut self, name: MetricName, value: f64, cause: &str) {
        if value.is_finite() {
            *self.slot_mut(name) = Some(value);
        } else {
            self.flag(name, cause);
        }
    }

    fn flag(&mut self, name: MetricName, cause: &str) {
        *self.slot_mut(name) = None;
        self.undefined.push(UndefinedMetric {
            metric: name,
            cause: cause.to_string(),
        });
    }

    pub fn cause(&self, name: MetricName) -> Option<&str> {
        self.undefined
            .iter()
            .find(|u| u.metric == name)
            .map(|u| u.cause.as_str())
    }

    pub fn tsv_header() -> String {
        MetricName::ALL.map(MetricName::column).join("\t")
    }

    /// Values in [`MetricName::ALL`] order; undefined metrics print as `NA`.
    pub fn tsv_row(&self) -> String {
        MetricName::ALL
            .map(|m| self.get(m).map_or_else(|| "NA".to_string(), |v| v.to_string()))
            .join("\t")
    }
}

#[derive(Clone, Copy, Debug)]
struct RegionStats {
    n: usize,
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
}

fn region_stats(values: impl Iterator<Item = f64> + Clone) -> Option<RegionStats> {
    let (n, sum, min, max) = values.clone().fold(
        (0usize, 0.0f64, f64::INFINITY, f64::NEG_INFINITY),
        |(n, s, lo, hi), v| (n + 1, s + v, lo.min(v), hi.max(v)),
    );
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    Some(RegionStats {
        n,
        mean,
        std: (ss / n as f64).sqrt(),
        min,
        max,
    })
}

fn masked<'a>(v: &'a Volume, m: &'a Mask) -> impl Iterator<Item = f64> + Clone + 'a {
    v.data()
        .iter()
        .zip(m.as_slice())
        .filter_map(|(&x, &keep)| keep.then_some(x as f64))
}

fn check_dims(v: &Volume, m: &Mask) -> Result<(), MetricsError> {
    if v.dims() != m.dims() {
        return Err(MetricsError::DimMismatch {
            volume: v.dims(),
            mask: m.dims(),
        });
    }
    Ok(())
}

pub fn fg_bg_stats(v: &Volume, fg: &Mask, bg: &Mask) -> Result<FgBgStats, MetricsError> {
    check_dims(v, fg)?;
    check_dims(v, bg)?;
    let f = region_stats(masked(v, fg)).ok_or(MetricsError::EmptyRegion("foreground"))?;
    let b = region_stats(masked(v, bg)).ok_or(MetricsError::EmptyRegion("background"))?;
    Ok(FgBgStats {
        mu_f: f.mean,
        sigma_f: f.std,
        mu_b: b.mean,
        sigma_b: b.std,
        n_f: f.n,
        n_b: b.n,
        max_f: f.max,
        min_f: f.min,
    })
}

/// Entropy focus criterion in [0, 1].
///
/// With `b = sqrt(Σ x²)` over all `N` voxels, EFC is
/// `Σ (|x|/b)·ln(|x|/b) / (√N · ln(1/√N))`. Zero voxels contribute nothing.
/// A single nonzero voxel gives 0, a constant volume gives 1.
pub fn efc(v: &Volume) -> Result<f64, MetricsError> {
    let energy = v.energy();
    if energy == 0.0 {
        return Err(MetricsError::AllZeroVolume);
    }
    let n = v.len() as f64;
    if v.len() == 1 {
        return Ok(0.0);
    }
    let b = energy.sqrt();
    let entropy: f64 = v
        .data()
        .iter()
        .filter(|&&x| x != 0.0)
        .map(|&x| {
            let p = (x as f64).abs() / b;
            p * p.ln()
        })
        .sum();
    let max_entropy = n.sqrt() * (1.0 / n.sqrt()).ln();
    Ok((entropy / max_entropy).clamp(0.0, 1.0))
}

fn median(values: &mut [f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let (_, &mut hi, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        return Some(hi);
    }
    let lo = values[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((lo + hi) / 2.0)
}

/// Mean absolute in-plane Laplacian-style response over the foreground.
fn cpp(v: &Volume, fg: &Mask) -> f64 {
    let [nx, ny, _] = v.dims();
    let mut sum = 0.0f64;
    for i in fg.indices() {
        let (x, y, z) = v.coords(i);
        let mut acc = 8.0 * v.data()[i] as f64;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                if xx >= 0 && yy >= 0 && (xx as usize) < nx && (yy as usize) < ny {
                    acc -= v.get(xx as usize, yy as usize, z) as f64;
                }
            }
        }
        sum += acc.abs();
    }
    sum / fg.count() as f64
}

/// 3×3×3 median (edge-replicated) at voxel `i`.
fn median3_at(v: &Volume, i: usize) -> f64 {
    let [nx, ny, nz] = v.dims();
    let (x, y, z) = v.coords(i);
    let clamp = |c: usize, d: i64, n: usize| (c as i64 + d).clamp(0, n as i64 - 1) as usize;
    let mut window = [0.0f64; 27];
    let mut k = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                window[k] = v.get(clamp(x, dx, nx), clamp(y, dy, ny), clamp(z, dz, nz)) as f64;
                k += 1;
            }
        }
    }
    window.select_nth_unstable_by(13, f64::total_cmp);
    window[13]
}

/// Voxel nearest to the foreground centroid, snapped into the foreground.
fn patch_center(v: &Volume, fg: &Mask) -> (usize, usize, usize) {
    let mut c = [0.0f64; 3];
    for i in fg.indices() {
        let (x, y, z) = v.coords(i);
        c[0] += x as f64;
        c[1] += y as f64;
        c[2] += z as f64;
    }
    let n = fg.count() as f64;
    let dims = v.dims();
    let r: [usize; 3] = std::array::from_fn(|a| ((c[a] / n).round() as usize).min(dims[a] - 1));
    if fg.get(r[0], r[1], r[2]) {
        return (r[0], r[1], r[2]);
    }
    let dist = |i: usize| {
        let (x, y, z) = v.coords(i);
        let d = [x as i64 - r[0] as i64, y as i64 - r[1] as i64, z as i64 - r[2] as i64];
        d.iter().map(|e| e * e).sum::<i64>()
    };
    // min_by_key keeps the first minimum, i.e. the lowest linear index.
    let best = fg.indices().min_by_key(|&i| dist(i)).expect("foreground is nonempty");
    v.coords(best)
}

fn box_values<'a>(
    v: &'a Volume,
    m: &'a Mask,
    origin: [usize; 3],
) -> impl Iterator<Item = f64> + Clone + 'a {
    let dims = v.dims();
    let end: [usize; 3] = std::array::from_fn(|a| (origin[a] + PATCH).min(dims[a]));
    (origin[2]..end[2]).flat_map(move |z| {
        (origin[1]..end[1]).flat_map(move |y| {
            (origin[0]..end[0]).filter_map(move |x| {
                let i = v.index(x, y, z);
                m.contains(i).then_some(v.data()[i] as f64)
            })
        })
    })
}

fn patch_stats(v: &Volume, fg: &Mask) -> RegionStats {
    let (cx, cy, cz) = patch_center(v, fg);
    let origin = [
        cx.saturating_sub(PATCH / 2),
        cy.saturating_sub(PATCH / 2),
        cz.saturating_sub(PATCH / 2),
    ];
    region_stats(box_values(v, fg, origin)).expect("centre voxel is foreground")
}

/// Background voxels of the first corner box (x, then y, then z toggled)
/// that contains any.
fn corner_patch_stats(v: &Volume, bg: &Mask) -> Option<RegionStats> {
    let dims = v.dims();
    (0..8).find_map(|corner: usize| {
        let origin: [usize; 3] = std::array::from_fn(|a| {
            if corner & (1 << a) != 0 {
                dims[a].saturating_sub(PATCH)
            } else {
                0
            }
        });
        region_stats(box_values(v, bg, origin))
    })
}

pub fn compute_metrics(v: &Volume, fg: &Mask, bg: &Mask) -> Result<QualityMetrics, MetricsError> {
    let s = fg_bg_stats(v, fg, bg)?;
    let mut m = QualityMetrics::default();
    use MetricName::*;

    m.set(Mean, s.mu_f, "foreground mean not finite");
    m.set(Rng, s.max_f - s.min_f, "foreground range not finite");
    m.set(Var, s.sigma_f * s.sigma_f, "foreground variance not finite");
    m.set(Cv, s.sigma_f / s.mu_f.abs(), "foreground mean is zero");
    m.set(Cpp, cpp(v, fg), "high-pass response not finite");

    let mse = fg
        .indices()
        .map(|i| {
            let d = v.data()[i] as f64 - median3_at(v, i);
            d * d
        })
        .sum::<f64>()
        / s.n_f as f64;
    if mse == 0.0 {
        m.flag(Psnr, "foreground equals its median-filtered version (MSE = 0)");
    } else {
        m.set(Psnr, 10.0 * (s.max_f * s.max_f / mse).log10(), "foreground maximum is zero");
    }

    m.set(Snr1, s.mu_f / s.sigma_b, "background standard deviation is zero");

    let p = patch_stats(v, fg);
    m.set(Snr2, p.mean / s.sigma_b, "background standard deviation is zero");
    m.set(Snr3, p.mean / p.std, "foreground patch standard deviation is zero");
    m.set(Cvp, p.std / p.mean.abs(), "foreground patch mean is zero");
    match corner_patch_stats(v, bg) {
        Some(bp) => {
            m.set(Snr4, p.mean / bp.std, "background patch standard deviation is zero");
            m.set(
                Cnr,
                (p.mean - bp.mean).abs() / bp.std,
                "background patch standard deviation is zero",
            );
        }
        None => {
            m.flag(Snr4, "no background voxel in any corner patch");
            m.flag(Cnr, "no background voxel in any corner patch");
        }
    }

    m.set(
        Cjv,
        (s.sigma_f + s.sigma_b) / (s.mu_f - s.mu_b).abs(),
        "foreground and background means coincide",
    );

    match efc(v) {
        Ok(e) => m.set(Efc, e, "entropy not finite"),
        Err(e) => m.flag(Efc, &e.to_string()),
    }

    let mut f2: Vec<f64> = masked(v, fg).map(|x| x * x).collect();
    let mut b2: Vec<f64> = masked(v, bg).map(|x| x * x).collect();
    let (mf, mb) = (median(&mut f2).unwrap(), median(&mut b2).unwrap());
    m.set(Fber, mf / mb, "median background energy is zero");

    m.undefined.sort_by_key(|u| u.metric);
    Ok(m)
}
