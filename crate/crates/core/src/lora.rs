//! Low-rank adapter arithmetic: `W' = W0 + (alpha / r) · B · A`.
//!
//! `W0` is `d_out × d_in` and frozen, `A` is `r × d_in`, `B` is `d_out × r`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Singular values below this fraction of the largest one count as zero.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LoraError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid rank {rank} for a {d_out}x{d_in} layer")]
    InvalidRank { rank: usize, d_in: usize, d_out: usize },
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    w0: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    alpha: f64,
}

impl LoraAdapter {
    pub fn new(w0: DMatrix<f64>, a: DMatrix<f64>, b: DMatrix<f64>, alpha: f64) -> Result<Self, LoraError> {
        let (d_out, d_in) = w0.shape();
        let r = a.nrows();
        if r == 0 || r > d_in.min(d_out) {
            return Err(LoraError::InvalidRank { rank: r, d_in, d_out });
        }
        if a.ncols() != d_in {
            return Err(LoraError::ShapeMismatch(format!(
                "A is {}x{}, expected {r}x{d_in}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.shape() != (d_out, r) {
            return Err(LoraError::ShapeMismatch(format!(
                "B is {}x{}, expected {d_out}x{r}",
                b.nrows(),
                b.ncols()
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LoraError::InvalidAlpha(alpha));
        }
        Ok(Self { w0, a, b, alpha })
    }

    /// Standard initialisation: `A ~ U(-init_scale, init_scale)`, `B = 0`.
    pub fn init(w0: DMatrix<f64>, rank: usize, alpha: f64, init_scale: f64, seed: u64) -> Result<Self, LoraError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = w0.ncols();
        let d_out = w0.nrows();
        let a = DMatrix::from_fn(rank, d_in, |_, _| rng.random_range(-init_scale..=init_scale));
        Self::new(w0, a, DMatrix::zeros(d_out, rank), alpha)
    }

    /// Every entry of W0, A and B uniform in [-1, 1].
    pub fn random(d_in: usize, d_out: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self, LoraError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..=1.0));
        let w0 = draw(d_out, d_in);
        let a = draw(rank, d_in);
        let b = draw(d_out, rank);
        Self::new(w0, a, b, alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn d_in(&self) -> usize {
        self.w0.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.nrows()
    }

    pub fn w0(&self) -> &DMatrix<f64> {
        &self.w0
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn with_b(&self, b: DMatrix<f64>) -> Result<Self, LoraError> {
        Self::new(self.w0.clone(), self.a.clone(), b, self.alpha)
    }

    pub fn with_a(&self, a: DMatrix<f64>) -> Result<Self, LoraError> {
        Self::new(self.w0.clone(), a, self.b.clone(), self.alpha)
    }

    /// Low-rank update `(alpha / r) · B · A`.
    pub fn delta(&self) -> DMatrix<f64> {
        (&self.b * &self.a) * self.scaling()
    }
}

/// Seeded vector with entries uniform in [-1, 1].
pub fn random_vector(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0))
}

/// Dense merged weight `W0 + (alpha / r) · B · A`.
pub fn merge(ad: &LoraAdapter) -> DMatrix<f64> {
    &ad.w0 + ad.delta()
}

/// `W0·x + (alpha / r)·B·(A·x)` without forming `B·A`.
pub fn forward(ad: &LoraAdapter, x: &DVector<f64>) -> Result<DVector<f64>, LoraError> {
    if x.len() != ad.d_in() {
        return Err(LoraError::ShapeMismatch(format!(
            "input has length {}, adapter expects {}",
            x.len(),
            ad.d_in()
        )));
    }
    let low = &ad.a * x;
    Ok(&ad.w0 * x + (&ad.b * low) * ad.scaling())
}

/// Share of a dense layer's parameters that an adapter of rank `r` trains.
pub fn trainable_fraction(d_in: usize, d_out: usize, r: usize) -> Result<f64, LoraError> {
    if r == 0 || r > d_in.min(d_out) {
        return Err(LoraError::InvalidRank { rank: r, d_in, d_out });
    }
    Ok((r * (d_in + d_out)) as f64 / (d_in * d_out) as f64)
}

/// Singular values of `m` above `RANK_TOLERANCE · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * max).count()
}

/// Squared error `‖W'x − target‖²` of the adapted layer.
pub fn loss(ad: &LoraAdapter, x: &DVector<f64>, target: &DVector<f64>) -> Result<f64, LoraError> {
    let y = forward(ad, x)?;
    if y.len() != target.len() {
        return Err(LoraError::ShapeMismatch(format!(
            "target has length {}, output has {}",
            target.len(),
            y.len()
        )));
    }
    Ok((y - target).norm_squared())
}

/// Analytic gradients of [`loss`] with respect to `A` and `B`.
pub fn gradients(
    ad: &LoraAdapter,
    x: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), LoraError> {
    let y = forward(ad, x)?;
    if y.len() != target.len() {
        return Err(LoraError::ShapeMismatch("target length".into()));
    }
    let g = (y - target) * 2.0;
    let s = ad.scaling();
    let grad_b = (&g * (&ad.a * x).transpose()) * s;
    let grad_a = ((ad.b.transpose() * &g) * x.transpose()) * s;
    Ok((grad_a, grad_b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FdScheme {
    Central,
    Forward,
}

/// Entry-wise finite-difference gradients of [`loss`].
pub fn finite_difference_gradients(
    ad: &LoraAdapter,
    x: &DVector<f64>,
    target: &DVector<f64>,
    eps: f64,
    scheme: FdScheme,
) -> Result<(DMatrix<f64>, DMatrix<f64>), LoraError> {
    let base = loss(ad, x, target)?;
    let fd = |perturb: &dyn Fn(f64) -> LoraAdapter| -> Result<f64, LoraError> {
        let up = loss(&perturb(eps), x, target)?;
        Ok(match scheme {
            FdScheme::Central => (up - loss(&perturb(-eps), x, target)?) / (2.0 * eps),
            FdScheme::Forward => (up - base) / eps,
        })
    };
    let mut grad_a = DMatrix::zeros(ad.a.nrows(), ad.a.ncols());
    for i in 0..ad.a.nrows() {
        for j in 0..ad.a.ncols() {
            grad_a[(i, j)] = fd(&|h| {
                let mut a = ad.a.clone();
                a[(i, j)] += h;
                LoraAdapter { a, ..ad.clone() }
            })?;
        }
    }
    let mut grad_b = DMatrix::zeros(ad.b.nrows(), ad.b.ncols());
    for i in 0..ad.b.nrows() {
        for j in 0..ad.b.ncols() {
            grad_b[(i, j)] = fd(&|h| {
                let mut b = ad.b.clone();
                b[(i, j)] += h;
                LoraAdapter { b, ..ad.clone() }
            })?;
        }
    }
    Ok((grad_a, grad_b))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are (numerically) zero.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale < 1e-300 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub eps: f64,
    pub grad_a_norm: f64,
    pub grad_b_norm: f64,
    pub rel_error_a: f64,
    pub rel_error_b: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
pub const GRAD_CHECK_EPS: f64 = 1e-5;
pub const GRAD_CHECK_MAX_DIM: usize = 32;

/// Compares analytic and central-difference gradients of the squared error
/// with respect to `A` and `B`. `W0` is frozen and not differentiated.
pub fn grad_check(ad: &LoraAdapter, x: &DVector<f64>, target: &DVector<f64>) -> Result<GradCheckReport, LoraError> {
    if ad.d_in() > GRAD_CHECK_MAX_DIM || ad.d_out() > GRAD_CHECK_MAX_DIM {
        return Err(LoraError::ShapeMismatch(format!(
            "grad_check is limited to {GRAD_CHECK_MAX_DIM}x{GRAD_CHECK_MAX_DIM} layers"
        )));
    }
    let (ga, gb) = gradients(ad, x, target)?;
    let (fa, fb) = finite_difference_gradients(ad, x, target, GRAD_CHECK_EPS, FdScheme::Central)?;
    let rel_error_a = relative_error(&ga, &fa);
    let rel_error_b = relative_error(&gb, &fb);
    Ok(GradCheckReport {
        loss: loss(ad, x, target)?,
        eps: GRAD_CHECK_EPS,
        grad_a_norm: ga.norm(),
        grad_b_norm: gb.norm(),
        rel_error_a,
        rel_error_b,
        tolerance: GRAD_CHECK_TOLERANCE,
        passed: rel_error_a <= GRAD_CHECK_TOLERANCE && rel_error_b <= GRAD_CHECK_TOLERANCE,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub eps: f64,
    pub scheme: FdScheme,
    /// Larger of the A and B relative errors.
    pub rel_error: f64,
}

/// Finite-difference error as a function of step size.
pub fn fd_sweep(
    ad: &LoraAdapter,
    x: &DVector<f64>,
    target: &DVector<f64>,
    steps: &[f64],
    scheme: FdScheme,
) -> Result<Vec<SweepPoint>, LoraError> {
    let (ga, gb) = gradients(ad, x, target)?;
    steps
        .iter()
        .map(|&eps| {
            let (fa, fb) = finite_difference_gradients(ad, x, target, eps, scheme)?;
            Ok(SweepPoint {
                eps,
                scheme,
                rel_error: relative_error(&ga, &fa).max(relative_error(&gb, &fb)),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_b_merges_to_w0() {
        let ad = LoraAdapter::init(DMatrix::from_fn(5, 4, |i, j| (i * 4 + j) as f64), 2, 8.0, 0.1, 1).unwrap();
        assert_eq!(merge(&ad), *ad.w0());
    }

    #[test]
    fn alpha_equal_to_rank_gives_unit_scaling() {
        let ad = LoraAdapter::random(32, 32, 16, 16.0, 4).unwrap();
        assert_eq!(ad.scaling(), 1.0);
        assert!((merge(&ad) - (ad.w0() + ad.b() * ad.a())).abs().max() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        let w0 = DMatrix::zeros(3, 4);
        assert!(matches!(
            LoraAdapter::new(w0.clone(), DMatrix::zeros(2, 5), DMatrix::zeros(3, 2), 1.0),
            Err(LoraError::ShapeMismatch(_))
        ));
        assert!(matches!(
            LoraAdapter::new(w0.clone(), DMatrix::zeros(4, 4), DMatrix::zeros(3, 4), 1.0),
            Err(LoraError::InvalidRank { rank: 4, .. })
        ));
        assert!(matches!(
            LoraAdapter::new(w0, DMatrix::zeros(2, 4), DMatrix::zeros(3, 2), 0.0),
            Err(LoraError::InvalidAlpha(_))
        ));
        let ad = LoraAdapter::random(4, 3, 1, 1.0, 0).unwrap();
        assert!(forward(&ad, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn forward_edge_cases() {
        let ad = LoraAdapter::random(6, 4, 2, 3.0, 9).unwrap();
        assert_eq!(forward(&ad, &DVector::zeros(6)).unwrap(), DVector::zeros(4));
        let id = LoraAdapter::new(DMatrix::identity(4, 4), DMatrix::zeros(2, 4), DMatrix::zeros(4, 2), 2.0).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        assert_eq!(forward(&id, &x).unwrap(), x);
    }

    #[test]
    fn trainable_fraction_values() {
        assert_eq!(trainable_fraction(4096, 4096, 16).unwrap(), 1.0 / 128.0);
        assert_eq!(trainable_fraction(2, 2, 1).unwrap(), 1.0);
        for d in [2usize, 3, 8, 17] {
            let full = trainable_fraction(d, d, d).unwrap();
            assert_eq!(full, 2.0);
            let half = trainable_fraction(d, d, d / 2).unwrap();
            assert!(half <= 1.0, "d={d}: {half}");
        }
        assert!(trainable_fraction(4, 4, 5).is_err());
        assert!(trainable_fraction(4, 4, 0).is_err());
    }

    #[test]
    fn stationary_at_optimum() {
        let ad = LoraAdapter::random(7, 5, 3, 6.0, 12).unwrap();
        let x = DVector::from_fn(7, |i, _| (i as f64 * 0.3).sin());
        let target = forward(&ad, &x).unwrap();
        let (ga, gb) = gradients(&ad, &x, &target).unwrap();
        assert!(ga.norm() < 1e-8 && gb.norm() < 1e-8);
    }

    #[test]
    fn zero_adapter_gradient_structure() {
        let w0 = DMatrix::from_fn(4, 6, |i, j| ((i + 2 * j) as f64).cos());
        let x = DVector::from_fn(6, |i, _| 1.0 + i as f64);
        let target = DVector::from_element(4, 3.0);

        let zero = LoraAdapter::new(w0.clone(), DMatrix::zeros(2, 6), DMatrix::zeros(4, 2), 2.0).unwrap();
        let (ga, gb) = gradients(&zero, &x, &target).unwrap();
        assert_eq!(ga.norm(), 0.0);
        assert_eq!(gb.norm(), 0.0);

        let init = LoraAdapter::init(w0, 2, 2.0, 0.5, 3).unwrap();
        let (ga, gb) = gradients(&init, &x, &target).unwrap();
        assert_eq!(ga.norm(), 0.0);
        assert!(gb.norm() > 0.0);
        let report = grad_check(&init, &x, &target).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
