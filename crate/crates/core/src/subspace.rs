//! Numerical subspace arithmetic on orthonormal bases.
//!
//! A [`Subspace`] is an immutable value: every operation builds a new one.
//! Rank decisions are made on singular values against `tol * scale`, where the
//! scale is either the largest singular value of the matrix at hand or, for the
//! `_scaled` variants, a caller-supplied norm. The scaled variants matter when
//! the matrix being factored is a projection residual that may be pure rounding
//! noise.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Result};
use crate::linalg::{check_finite, hcat, norm2, svd_full_v, svd_u, vcat};

#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
    tol: f64,
}

/// `max(rows, cols) * eps`, the conventional numerical-rank factor.
pub fn default_tol(rows: usize, cols: usize) -> f64 {
    rows.max(cols).max(1) as f64 * f64::EPSILON
}

impl Subspace {
    pub fn trivial(ambient: usize) -> Self {
        Subspace {
            basis: DMatrix::zeros(ambient, 0),
            tol: default_tol(ambient, ambient),
        }
    }

    pub fn full(ambient: usize) -> Self {
        Subspace {
            basis: DMatrix::identity(ambient, ambient),
            tol: default_tol(ambient, ambient),
        }
    }

    /// Span of the columns of `m`, orthonormalised.
    pub fn span(m: &DMatrix<f64>, tol: f64) -> Result<Self> {
        image(m, tol)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient(&self) -> usize {
        self.basis.nrows()
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// Euclidean distance from `v` to the subspace.
    pub fn distance(&self, v: &DVector<f64>) -> f64 {
        let proj = &self.basis * (self.basis.transpose() * v);
        (v - proj).norm()
    }

    /// `other ⊆ self` up to `tol` (largest residual of other's basis).
    pub fn contains(&self, other: &Subspace, tol: f64) -> bool {
        if other.ambient() != self.ambient() {
            return false;
        }
        if other.dim() == 0 {
            return true;
        }
        let resid = other.basis() - &self.basis * (self.basis.transpose() * other.basis());
        norm2(&resid) <= tol
    }

    pub fn complement(&self) -> Subspace {
        let n = self.ambient();
        let resid = DMatrix::identity(n, n) - self.projector();
        // Orthogonal complement of an orthonormal basis: rank threshold on 1.
        image_scaled(&resid, 1e-8, 1.0).expect("finite projector")
    }

    /// Same subspace with its basis right-multiplied by an orthogonal matrix.
    pub fn rotated(&self, q: &DMatrix<f64>) -> Subspace {
        Subspace {
            basis: &self.basis * q,
            tol: self.tol,
        }
    }
}

/// Column space of `m`; rank decided by singular values above `tol * sigma_max`.
pub fn image(m: &DMatrix<f64>, tol: f64) -> Result<Subspace> {
    let (s, _) = svd_u_checked(m)?;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    image_scaled(m, tol, smax)
}

/// Column space of `m` with the rank threshold `tol * scale`.
pub fn image_scaled(m: &DMatrix<f64>, tol: f64, scale: f64) -> Result<Subspace> {
    let (s, u) = svd_u_checked(m)?;
    let cut = tol * scale;
    let keep: Vec<usize> = (0..s.len()).filter(|&i| s[i] > cut && s[i] > 0.0).collect();
    let mut basis = DMatrix::zeros(m.nrows(), keep.len());
    for (j, &i) in keep.iter().enumerate() {
        basis.set_column(j, &u.column(i));
    }
    Ok(Subspace { basis, tol })
}

fn svd_u_checked(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if m.nrows() == 0 {
        return Err(dim_err("matrix has no rows"));
    }
    check_finite(m, "matrix")?;
    Ok(svd_u(m))
}

/// Null space of `m`; dim = cols − numerical rank.
pub fn kernel(m: &DMatrix<f64>, tol: f64) -> Result<Subspace> {
    check_finite(m, "matrix")?;
    let (s, _) = svd_full_v(m);
    let smax = s.iter().cloned().fold(0.0, f64::max);
    kernel_scaled(m, tol, smax)
}

pub fn kernel_scaled(m: &DMatrix<f64>, tol: f64, scale: f64) -> Result<Subspace> {
    check_finite(m, "matrix")?;
    let n = m.ncols();
    let (s, v) = svd_full_v(m);
    let cut = tol * scale;
    // Singular values beyond min(rows, cols) are implicit zeros.
    let drop: Vec<usize> = (0..n)
        .filter(|&i| i >= s.len() || !(s[i] > cut && s[i] > 0.0))
        .collect();
    let mut basis = DMatrix::zeros(n, drop.len());
    for (j, &i) in drop.iter().enumerate() {
        basis.set_column(j, &v.column(i));
    }
    Ok(Subspace { basis, tol })
}

/// `{x : A x ∈ S}` as the kernel of `(I − BBᵀ) A`, thresholded against `‖A‖`.
pub fn preimage(a: &DMatrix<f64>, s: &Subspace) -> Result<Subspace> {
    preimage_tol(a, s, s.tol)
}

pub fn preimage_tol(a: &DMatrix<f64>, s: &Subspace, tol: f64) -> Result<Subspace> {
    if a.nrows() != s.ambient() {
        return Err(dim_err(format!(
            "preimage: A has {} rows, subspace ambient {}",
            a.nrows(),
            s.ambient()
        )));
    }
    check_finite(a, "A")?;
    let n = a.ncols();
    if a.nrows() == 0 {
        return Ok(Subspace {
            basis: DMatrix::identity(n, n),
            tol,
        });
    }
    let resid = a - s.basis() * (s.basis().transpose() * a);
    let scale = norm2(a);
    let mut out = kernel_scaled(&resid, tol, scale)?;
    out.tol = tol;
    Ok(out)
}

fn same_ambient(s1: &Subspace, s2: &Subspace) -> Result<()> {
    if s1.ambient() != s2.ambient() {
        Err(dim_err(format!(
            "ambient dimensions {} and {}",
            s1.ambient(),
            s2.ambient()
        )))
    } else {
        Ok(())
    }
}

/// `S1 ∩ S2` as the kernel of the stacked complement projectors.
pub fn intersect(s1: &Subspace, s2: &Subspace) -> Result<Subspace> {
    same_ambient(s1, s2)?;
    let n = s1.ambient();
    let tol = s1.tol.max(s2.tol);
    if n == 0 || s1.dim() == 0 || s2.dim() == 0 {
        return Ok(Subspace {
            basis: DMatrix::zeros(n, 0),
            tol,
        });
    }
    let id = DMatrix::<f64>::identity(n, n);
    let stacked = vcat(&(&id - s1.projector()), &(&id - s2.projector()));
    kernel_scaled(&stacked, tol.max(1e-12), 1.0)
}

/// `S1 + S2` as the image of the concatenated bases.
pub fn sum(s1: &Subspace, s2: &Subspace) -> Result<Subspace> {
    same_ambient(s1, s2)?;
    let tol = s1.tol.max(s2.tol);
    if s1.ambient() == 0 {
        return Ok(Subspace::trivial(0));
    }
    image_scaled(&hcat(s1.basis(), s2.basis()), tol.max(1e-12), 1.0)
}

/// Projector distance test.
pub fn equals(s1: &Subspace, s2: &Subspace, tol: f64) -> bool {
    s1.ambient() == s2.ambient()
        && s1.dim() == s2.dim()
        && norm2(&(s1.projector() - s2.projector())) <= tol
}

pub fn projector_distance(s1: &Subspace, s2: &Subspace) -> f64 {
    norm2(&(s1.projector() - s2.projector()))
}

/// Image of the subspace under a linear map, thresholded against `‖M‖`.
pub fn map(m: &DMatrix<f64>, s: &Subspace, tol: f64) -> Result<Subspace> {
    if m.ncols() != s.ambient() {
        return Err(dim_err("map: column count differs from ambient"));
    }
    if m.nrows() == 0 {
        return Ok(Subspace::trivial(0));
    }
    image_scaled(&(m * s.basis()), tol, norm2(m))
}
