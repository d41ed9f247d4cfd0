//! Dense linear algebra on `f64` matrices: SVD, truncation, Procrustes
//! orthonormalization, eigen-whitening and running means.
//!
//! Inputs arrive in `f32` working precision and are widened; every
//! decomposition runs in `f64`.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Matrix = DMatrix<f64>;

/// Default epsilon added to Gram eigenvalues before the inverse square root.
pub const WHITEN_EPS: f64 = 1e-12;

/// Thin SVD factors `A = U diag(S) Vᵀ` with singular values non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `d × r`, columns are left singular vectors.
    pub u: Matrix,
    pub s: Vec<f64>,
    /// `m × r`, columns are right singular vectors.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    /// Keeps the leading `k` singular triplets.
    pub fn truncate(&self, k: usize) -> Result<SvdFactors> {
        if k == 0 || k > self.rank() {
            return Err(Error::RankOutOfRange {
                k,
                max: self.rank(),
            });
        }
        Ok(SvdFactors {
            u: self.u.columns(0, k).into_owned(),
            s: self.s[..k].to_vec(),
            v: self.v.columns(0, k).into_owned(),
        })
    }

    /// `U diag(S) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, &sigma) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(sigma);
        }
        us * self.v.transpose()
    }

    /// Rounds every factor entry to the nearest `f32`, so the factors survive
    /// an `f32` container round-trip bit for bit.
    pub fn round_to_f32(&self) -> SvdFactors {
        let round = |m: &Matrix| m.map(|x| f64::from(x as f32));
        SvdFactors {
            u: round(&self.u),
            s: self.s.iter().map(|&x| f64::from(x as f32)).collect(),
            v: round(&self.v),
        }
    }
}

fn check_finite(a: &Matrix) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteMatrix)
    }
}

/// Thin SVD with `r = min(d, m)`.
///
/// Column signs are normalized so that the largest-magnitude entry of each
/// left singular vector is positive; the output is deterministic for a build.
pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    check_finite(a)?;
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::DimensionMismatch(format!(
            "cannot decompose a {rows}x{cols} matrix"
        )));
    }
    let max_iter = 200 * (rows + cols).max(10);
    let decomposition = SVD::try_new(a.clone(), true, true, f64::EPSILON * 5.0, max_iter)
        .ok_or(Error::SvdNoConvergence { rows, cols })?;
    let mut u = decomposition.u.expect("U requested");
    let mut v = decomposition.v_t.expect("Vᵀ requested").transpose();
    let s: Vec<f64> = decomposition.singular_values.iter().copied().collect();
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::SvdNoConvergence { rows, cols });
    }
    for j in 0..s.len() {
        let col = u.column(j);
        let pivot = col.iter().fold(
            0.0f64,
            |best, &x| if x.abs() > best.abs() { x } else { best },
        );
        if pivot < 0.0 {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }
    Ok(SvdFactors { u, s, v })
}

/// Nearest matrix with orthonormal columns (or rows, for wide input) in
/// Frobenius norm: `P Qᵀ` from the SVD `X = P D Qᵀ`.
///
/// For rank-deficient `X` the null-space part of the result depends on the
/// SVD backend and is not unique.
pub fn procrustes(x: &Matrix) -> Result<Matrix> {
    let f = svd(x)?;
    Ok(&f.u * f.v.transpose())
}

/// `X Q diag(1/√(|λ|+eps)) Qᵀ` where `XᵀX = Q Λ Qᵀ`.
pub fn whiten_eigen(x: &Matrix, eps: f64) -> Result<Matrix> {
    check_finite(x)?;
    let gram = x.transpose() * x;
    let n = gram.nrows();
    let eig = SymmetricEigen::try_new(gram, f64::EPSILON * 5.0, 200 * n.max(10))
        .ok_or(Error::EigenNoConvergence(n))?;
    let scale = DVector::from_iterator(
        n,
        eig.eigenvalues
            .iter()
            .map(|&l| 1.0 / (l.abs() + eps).sqrt()),
    );
    let q = &eig.eigenvectors;
    let inv_sqrt = q * DMatrix::from_diagonal(&scale) * q.transpose();
    Ok(x * inv_sqrt)
}

/// How a concatenated basis is made orthonormal.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum OrthoMethod {
    /// `P Qᵀ` from an SVD.
    #[default]
    Procrustes,
    /// `X (XᵀX)^{-1/2}` via a symmetric eigendecomposition with the given epsilon.
    EigenWhiten(f64),
}

impl OrthoMethod {
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match *self {
            OrthoMethod::Procrustes => procrustes(x),
            OrthoMethod::EigenWhiten(eps) => whiten_eigen(x, eps),
        }
    }
}

impl std::fmt::Display for OrthoMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrthoMethod::Procrustes => f.write_str("procrustes"),
            OrthoMethod::EigenWhiten(eps) => write!(f, "eigen(eps={eps:e})"),
        }
    }
}

pub fn frobenius(a: &Matrix) -> f64 {
    a.norm()
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`; returns the absolute error when `b` is zero.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).norm();
    let denom = b.norm();
    if denom > f64::MIN_POSITIVE {
        diff / denom
    } else {
        diff
    }
}

/// `‖AᵀA − I‖_F`.
pub fn orthonormality_defect(a: &Matrix) -> f64 {
    let gram = a.transpose() * a;
    (gram - Matrix::identity(a.ncols(), a.ncols())).norm()
}

/// Running elementwise mean, `mean += (x − mean) / count`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WelfordMean {
    count: u64,
    shape: Vec<usize>,
    mean: Vec<f64>,
}

impl WelfordMean {
    pub fn new() -> WelfordMean {
        WelfordMean::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn update(&mut self, x: &Tensor) -> Result<()> {
        self.update_with(x.shape(), x.data().iter().map(|&v| f64::from(v)))
    }

    pub fn update_slice(&mut self, shape: &[usize], x: &[f64]) -> Result<()> {
        self.update_with(shape, x.iter().copied())
    }

    fn update_with(
        &mut self,
        shape: &[usize],
        x: impl ExactSizeIterator<Item = f64>,
    ) -> Result<()> {
        if self.count == 0 {
            self.shape = shape.to_vec();
            self.mean = vec![0.0; x.len()];
        } else if self.shape != shape || self.mean.len() != x.len() {
            return Err(Error::ShapeMismatch {
                name: "welford accumulator".into(),
                expected: self.shape.clone(),
                found: shape.to_vec(),
            });
        }
        self.count += 1;
        let n = self.count as f64;
        for (m, v) in self.mean.iter_mut().zip(x) {
            *m += (v - *m) / n;
        }
        Ok(())
    }
}
