//! Centred 2D discrete Fourier transform of axial slices.
//!
//! `to_kspace` computes `fftshift(fft2(ifftshift(img)))` with an
//! unnormalised forward transform, `from_kspace` the exact inverse with the
//! `1/N` factor on the way back. Index `j` of either axis of the k-space
//! grid holds frequency `j - n/2` (integer division).

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

use super::ArtifactError;

/// A dense 2D grid, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn new(nx: usize, ny: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), nx * ny, "plane data does not match its size");
        Self { nx, ny, data }
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[x + self.nx * y]
    }
}

pub type KSpace = Plane<Complex64>;

impl KSpace {
    /// Centred frequency of row `y` (the phase-encode index).
    pub fn ky(&self, y: usize) -> i64 {
        y as i64 - (self.ny / 2) as i64
    }

    pub fn kx(&self, x: usize) -> i64 {
        x as i64 - (self.nx / 2) as i64
    }

    /// Mutable view of phase-encode line `y`.
    pub fn line_mut(&mut self, y: usize) -> &mut [Complex64] {
        &mut self.data[y * self.nx..(y + 1) * self.nx]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Circularly moves element `i` to `(i + shift) % n` along both axes.
fn roll<T: Copy + Default>(p: &Plane<T>, sx: usize, sy: usize) -> Plane<T> {
    let mut out = vec![T::default(); p.data.len()];
    for y in 0..p.ny {
        let yy = (y + sy) % p.ny;
        for x in 0..p.nx {
            out[(x + sx) % p.nx + p.nx * yy] = p.data[x + p.nx * y];
        }
    }
    Plane::new(p.nx, p.ny, out)
}

fn fftshift<T: Copy + Default>(p: &Plane<T>) -> Plane<T> {
    roll(p, p.nx / 2, p.ny / 2)
}

fn ifftshift<T: Copy + Default>(p: &Plane<T>) -> Plane<T> {
    roll(p, p.nx.div_ceil(2), p.ny.div_ceil(2))
}

fn fft2(p: &mut Plane<Complex64>, direction: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let row: Arc<dyn Fft<f64>> = planner.plan_fft(p.nx, direction);
    let col: Arc<dyn Fft<f64>> = planner.plan_fft(p.ny, direction);
    row.process(&mut p.data);
    let mut column = vec![Complex64::default(); p.ny];
    for x in 0..p.nx {
        for (y, c) in column.iter_mut().enumerate() {
            *c = p.data[x + p.nx * y];
        }
        col.process(&mut column);
        for (y, c) in column.iter().enumerate() {
            p.data[x + p.nx * y] = *c;
        }
    }
}

fn check_size(nx: usize, ny: usize) -> Result<(), ArtifactError> {
    if nx < 2 || ny < 2 {
        return Err(ArtifactError::SliceTooSmall { nx, ny });
    }
    Ok(())
}

pub fn to_kspace(slice: &Plane<f32>) -> Result<KSpace, ArtifactError> {
    check_size(slice.nx, slice.ny)?;
    let complex = Plane::new(
        slice.nx,
        slice.ny,
        slice.data.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect(),
    );
    let mut k = ifftshift(&complex);
    fft2(&mut k, FftDirection::Forward);
    Ok(fftshift(&k))
}

/// Complex image of a centred k-space grid.
pub fn from_kspace(k: &KSpace) -> Result<Plane<Complex64>, ArtifactError> {
    check_size(k.nx, k.ny)?;
    let mut img = ifftshift(k);
    fft2(&mut img, FftDirection::Inverse);
    let scale = 1.0 / (k.nx * k.ny) as f64;
    for c in &mut img.data {
        *c *= scale;
    }
    Ok(fftshift(&img))
}
