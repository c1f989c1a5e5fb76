//! Seeded acquisition artifacts.
//!
//! Every corruption is applied per axial slice in k-space (except the bias
//! field, which is a smooth 3D multiplicative field). Phase-encode lines
//! are k-space rows (the y axis). Applying an artifact happens in two
//! steps: random parameters are drawn into a [`Realized`] record, then the
//! record is rendered onto the volume. [`replay`] renders stored records
//! again, so a [`ProvenanceRecord`] reproduces its output bit for bit.
//!
//! Fixed severity maps:
//!
//! * motion: phase-encode lines are interleaved over `shots` shots
//!   (default 4; line `ky` belongs to shot `ky mod shots`); every shot
//!   except the one holding the k-space centre gets a rigid
//!   translation, drawn as per-axis phase slopes uniform in
//!   `±severity·π/4` radians per k-space sample.
//! * ghosting: every `period`-th line (default 2, counted from the centre
//!   line) is scaled by `1 − 0.8·severity`.
//! * aliasing: only every `R`-th line is kept, `R = 1 + round(3·severity)`
//!   unless overridden.
//! * noise: complex Gaussian noise in k-space whose image-domain standard
//!   deviation per channel is `severity · sigma_ref`; `sigma_ref` defaults
//!   to half the mean of the voxels brighter than the volume mean.
//! * bias field: `I · (1 + severity · f)` where `f` is a random polynomial
//!   of total degree `1..=order` (default 2) in normalised coordinates,
//!   scaled to `max |f| = 1`.
//!
//! Outputs are magnitudes, clamped at zero. A severity of exactly zero is a
//! no-op and returns the input unchanged.

mod kspace;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kspace::{from_kspace, to_kspace, KSpace, Plane};

use crate::volume::{Volume, VolumeError};

const GHOST_ATTENUATION: f64 = 0.8;
const DEFAULT_GHOST_PERIOD: usize = 2;
const DEFAULT_SHOTS: usize = 4;
const DEFAULT_BIAS_ORDER: usize = 2;
const MAX_BIAS_ORDER: usize = 3;
const NOISE_REFERENCE_FRACTION: f64 = 0.5;
/// RNG stream reserved for volume-level draws (slice streams use the slice index).
const VOLUME_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("invalid artifact parameters: {0}")]
    InvalidParams(String),
    #[error("slice of {nx}x{ny} voxels is too small for a k-space transform (need 2x2)")]
    SliceTooSmall { nx: usize, ny: usize },
    #[error("provenance was recorded on dims {recorded:?}, volume has {actual:?}")]
    DimMismatch { recorded: [usize; 3], actual: [usize; 3] },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Motion,
    Ghosting,
    Aliasing,
    Noise,
    BiasField,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 5] = [
        ArtifactKind::Motion,
        ArtifactKind::Ghosting,
        ArtifactKind::Aliasing,
        ArtifactKind::Noise,
        ArtifactKind::BiasField,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Motion => "motion",
            ArtifactKind::Ghosting => "ghosting",
            ArtifactKind::Aliasing => "aliasing",
            ArtifactKind::Noise => "noise",
            ArtifactKind::BiasField => "bias_field",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactKind {
    type Err = ArtifactError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArtifactKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s || (s == "bias" && *k == ArtifactKind::BiasField))
            .ok_or_else(|| ArtifactError::InvalidParams(format!("unknown artifact kind {s:?}")))
    }
}

/// Kind-specific overrides. Each kind accepts only its own keys.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactParams {
    /// Ghosting: spacing of attenuated lines, `2..=ny`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    /// Aliasing: keep every R-th line, `1..=ny`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undersampling: Option<usize>,
    /// Motion: number of segments, `1..=ny`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    /// Bias field: polynomial order, `1..=3`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    /// Noise: reference standard deviation, `> 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_ref: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub kind: ArtifactKind,
    pub severity: f64,
    pub seed: u64,
    #[serde(default)]
    pub params: ArtifactParams,
}

impl ArtifactSpec {
    pub fn new(kind: ArtifactKind, severity: f64, seed: u64) -> Self {
        Self {
            kind,
            severity,
            seed,
            params: ArtifactParams::default(),
        }
    }

    pub fn with_params(mut self, params: ArtifactParams) -> Self {
        self.params = params;
        self
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<(), ArtifactError> {
        let bad = |m: String| Err(ArtifactError::InvalidParams(m));
        if !(self.severity.is_finite() && (0.0..=1.0).contains(&self.severity)) {
            return bad(format!("severity {} outside [0, 1]", self.severity));
        }
        let p = &self.params;
        let ny = dims[1];
        let supplied = [
            ("period", p.period.is_some(), ArtifactKind::Ghosting),
            ("undersampling", p.undersampling.is_some(), ArtifactKind::Aliasing),
            ("shots", p.shots.is_some(), ArtifactKind::Motion),
            ("order", p.order.is_some(), ArtifactKind::BiasField),
            ("sigma_ref", p.sigma_ref.is_some(), ArtifactKind::Noise),
        ];
        for (name, set, owner) in supplied {
            if set && owner != self.kind {
                return bad(format!("parameter `{name}` does not apply to {}", self.kind));
            }
        }
        if let Some(period) = p.period {
            if !(2..=ny).contains(&period) {
                return bad(format!("period {period} outside 2..={ny}"));
            }
        }
        if let Some(r) = p.undersampling {
            if !(1..=ny).contains(&r) {
                return bad(format!("undersampling {r} outside 1..={ny}"));
            }
        }
        if let Some(shots) = p.shots {
            if !(1..=ny).contains(&shots) {
                return bad(format!("shots {shots} outside 1..={ny}"));
            }
        }
        if let Some(order) = p.order {
            if !(1..=MAX_BIAS_ORDER).contains(&order) {
                return bad(format!("order {order} outside 1..={MAX_BIAS_ORDER}"));
            }
        }
        if let Some(s) = p.sigma_ref {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("sigma_ref {s} must be positive"));
            }
        }
        if self.kind != ArtifactKind::BiasField && self.severity > 0.0 && (dims[0] < 2 || ny < 2) {
            return Err(ArtifactError::SliceTooSmall { nx: dims[0], ny });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasTerm {
    /// Exponents of the normalised x, y, z coordinates.
    pub powers: [u32; 3],
    pub coefficient: f64,
}

/// Parameters actually used for one application.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Realized {
    NoOp,
    Motion {
        /// Phase-encode line indices acquired by each shot.
        shot_lines: Vec<Vec<usize>>,
        /// Per slice, per shot: phase slope (radians per k-space sample) along kx, ky.
        slopes: Vec<Vec<[f64; 2]>>,
    },
    Ghosting {
        period: usize,
        factor: f64,
        lines: Vec<usize>,
    },
    Aliasing {
        factor: usize,
        dropped_lines: Vec<usize>,
    },
    Noise {
        /// Image-domain standard deviation per real/imaginary channel.
        sigma: f64,
        seed: u64,
    },
    BiasField {
        gain: f64,
        terms: Vec<BiasTerm>,
        normalization: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedArtifact {
    pub spec: ArtifactSpec,
    pub realized: Realized,
}

/// Ground truth of what was done to a clean volume, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub dims: [usize; 3],
    pub steps: Vec<AppliedArtifact>,
}

impl ProvenanceRecord {
    pub fn new(dims: [usize; 3]) -> Self {
        Self { dims, steps: Vec::new() }
    }

    /// Steps that changed the volume.
    pub fn effective(&self) -> impl Iterator<Item = &AppliedArtifact> {
        self.steps.iter().filter(|s| s.realized != Realized::NoOp)
    }

    pub fn is_noop(&self) -> bool {
        self.effective().next().is_none()
    }

    /// Distinct kinds that changed the volume, sorted.
    pub fn kinds(&self) -> Vec<ArtifactKind> {
        let mut kinds: Vec<_> = self.effective().map(|s| s.spec.kind).collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    pub fn max_severity(&self) -> f64 {
        self.effective().map(|s| s.spec.severity).fold(0.0, f64::max)
    }

    /// Compact JSON with object keys in sorted order.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("provenance is always serializable");
        serde_json::to_string(&value).expect("json value serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn slice_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn centered(j: usize, n: usize) -> i64 {
    j as i64 - (n / 2) as i64
}

fn noise_reference(v: &Volume) -> f64 {
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let (sum, n) = v
        .data()
        .iter()
        .map(|&x| x as f64)
        .filter(|&x| x > mean)
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        NOISE_REFERENCE_FRACTION * sum / n as f64
    }
}

fn monomials(order: usize) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for total in 1..=order as u32 {
        for a in (0..=total).rev() {
            for b in (0..=total - a).rev() {
                out.push([a, b, total - a - b]);
            }
        }
    }
    out
}

fn normalized_coord(i: usize, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

fn bias_value(terms: &[BiasTerm], u: [f64; 3]) -> f64 {
    terms
        .iter()
        .map(|t| {
            t.coefficient
                * u[0].powi(t.powers[0] as i32)
                * u[1].powi(t.powers[1] as i32)
                * u[2].powi(t.powers[2] as i32)
        })
        .sum()
}

fn realize(v: &Volume, spec: &ArtifactSpec) -> Result<Realized, ArtifactError> {
    spec.validate(v.dims())?;
    if spec.severity == 0.0 {
        return Ok(Realized::NoOp);
    }
    let [nx, ny, nz] = v.dims();
    let s = spec.severity;
    let p = &spec.params;
    Ok(match spec.kind {
        ArtifactKind::Motion => {
            let shots = p.shots.unwrap_or(DEFAULT_SHOTS).min(ny);
            let shot_lines: Vec<Vec<usize>> = (0..shots)
                .map(|k| (0..ny).filter(|&y| centered(y, ny).rem_euclid(shots as i64) == k as i64).collect())
                .collect();
            let max_slope = s * PI / 4.0;
            let slopes = (0..nz)
                .map(|z| {
                    let mut rng = slice_rng(spec.seed, z as u64);
                    (0..shots)
                        .map(|shot| {
                            let draw = [
                                rng.random_range(-max_slope..=max_slope),
                                rng.random_range(-max_slope..=max_slope),
                            ];
                            if shot == 0 {
                                [0.0, 0.0]
                            } else {
                                draw
                            }
                        })
                        .collect()
                })
                .collect();
            Realized::Motion { shot_lines, slopes }
        }
        ArtifactKind::Ghosting => {
            let period = p.period.unwrap_or(DEFAULT_GHOST_PERIOD).min(ny);
            let lines = (0..ny)
                .filter(|&j| centered(j, ny).rem_euclid(period as i64) == 0)
                .collect();
            Realized::Ghosting {
                period,
                factor: 1.0 - s * GHOST_ATTENUATION,
                lines,
            }
        }
        ArtifactKind::Aliasing => {
            let factor = p.undersampling.unwrap_or(1 + (3.0 * s).round() as usize).min(ny);
            let dropped_lines = (0..ny)
                .filter(|&j| centered(j, ny).rem_euclid(factor as i64) != 0)
                .collect();
            Realized::Aliasing { factor, dropped_lines }
        }
        ArtifactKind::Noise => Realized::Noise {
            sigma: s * p.sigma_ref.unwrap_or_else(|| noise_reference(v)),
            seed: spec.seed,
        },
        ArtifactKind::BiasField => {
            let order = p.order.unwrap_or(DEFAULT_BIAS_ORDER);
            let mut rng = slice_rng(spec.seed, VOLUME_STREAM);
            let terms: Vec<BiasTerm> = monomials(order)
                .into_iter()
                .map(|powers| BiasTerm {
                    powers,
                    coefficient: rng.random_range(-1.0..=1.0),
                })
                .collect();
            let mut normalization = 0.0f64;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let u = [normalized_coord(x, nx), normalized_coord(y, ny), normalized_coord(z, nz)];
                        normalization = normalization.max(bias_value(&terms, u).abs());
                    }
                }
            }
            Realized::BiasField {
                gain: s,
                terms,
                normalization,
            }
        }
    })
}

/// Applies a k-space edit to every axial slice and returns magnitudes.
fn per_slice_kspace(
    v: &Volume,
    edit: impl Fn(usize, &mut KSpace) + Sync,
) -> Result<Vec<f32>, ArtifactError> {
    let [nx, ny, nz] = v.dims();
    let slices: Result<Vec<Vec<f32>>, ArtifactError> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut k = to_kspace(&Plane::new(nx, ny, v.slice(z).to_vec()))?;
            edit(z, &mut k);
            let img = from_kspace(&k)?;
            Ok(img.data.iter().map(|c| c.norm() as f32).collect())
        })
        .collect();
    Ok(slices?.concat())
}

fn render(v: &Volume, realized: &Realized) -> Result<Volume, ArtifactError> {
    let [nx, ny, nz] = v.dims();
    let data = match realized {
        Realized::NoOp => return Ok(v.clone()),
        Realized::Motion { shot_lines, slopes } => per_slice_kspace(v, |z, k| {
            for (lines, slope) in shot_lines.iter().zip(&slopes[z]) {
                for &y in lines {
                    let ky = centered(y, ny) as f64;
                    for (x, c) in k.line_mut(y).iter_mut().enumerate() {
                        let kx = centered(x, nx) as f64;
                        *c *= Complex64::from_polar(1.0, -(slope[0] * kx + slope[1] * ky));
                    }
                }
            }
        })?,
        Realized::Ghosting { factor, lines, .. } => per_slice_kspace(v, |_, k| {
            for &y in lines {
                for c in k.line_mut(y) {
                    *c *= *factor;
                }
            }
        })?,
        Realized::Aliasing { dropped_lines, .. } => per_slice_kspace(v, |_, k| {
            for &y in dropped_lines {
                k.line_mut(y).fill(Complex64::default());
            }
        })?,
        Realized::Noise { sigma, seed } => {
            let scale = sigma * ((nx * ny) as f64).sqrt();
            per_slice_kspace(v, |z, k| {
                let mut rng = slice_rng(*seed, z as u64);
                for c in &mut k.data {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    *c += Complex64::new(re * scale, im * scale);
                }
            })?
        }
        Realized::BiasField {
            gain,
            terms,
            normalization,
        } => {
            let mut out = Vec::with_capacity(v.len());
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let u = [normalized_coord(x, nx), normalized_coord(y, ny), normalized_coord(z, nz)];
                        let field = if *normalization > 0.0 {
                            bias_value(terms, u) / normalization
                        } else {
                            0.0
                        };
                        let value = v.get(x, y, z) as f64 * (1.0 + gain * field);
                        out.push(value.max(0.0) as f32);
                    }
                }
            }
            out
        }
    };
    Ok(v.with_data(data)?)
}

pub fn apply_artifact(v: &Volume, spec: &ArtifactSpec) -> Result<(Volume, ProvenanceRecord), ArtifactError> {
    apply_artifacts(v, std::slice::from_ref(spec))
}

/// Applies `specs` in order; each step's random draws see the output of
/// the previous one.
pub fn apply_artifacts(
    v: &Volume,
    specs: &[ArtifactSpec],
) -> Result<(Volume, ProvenanceRecord), ArtifactError> {
    let mut record = ProvenanceRecord::new(v.dims());
    let mut current = v.clone();
    for spec in specs {
        let realized = realize(&current, spec)?;
        current = render(&current, &realized)?;
        record.steps.push(AppliedArtifact {
            spec: spec.clone(),
            realized,
        });
    }
    Ok((current, record))
}

/// Re-renders every recorded step onto `clean`.
pub fn replay(clean: &Volume, record: &ProvenanceRecord) -> Result<Volume, ArtifactError> {
    if clean.dims() != record.dims {
        return Err(ArtifactError::DimMismatch {
            recorded: record.dims,
            actual: clean.dims(),
        });
    }
    record
        .steps
        .iter()
        .try_fold(clean.clone(), |v, step| render(&v, &step.realized))
}
