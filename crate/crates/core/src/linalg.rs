//! Small dense helpers shared by the modules. SVDs use a one-sided Jacobi
//! sweep; symmetric eigenproblems go to nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const JACOBI_SWEEPS: usize = 80;

/// One-sided Jacobi SVD of a tall matrix (rows >= cols).
///
/// Returns descending singular values, the thin `U` (rows × cols) and the
/// square `V`. nalgebra's bidiagonal SVD can lose five or more digits on some
/// small orthonormal-ish inputs, which is fatal for subspace images; Jacobi
/// rotations keep the factorization accurate to a few ulps. Columns of `U`
/// belonging to zero singular values are left at zero.
fn jacobi_tall(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = m.ncols();
    let mut u = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut u, &mut v] {
                    for i in 0..mat.nrows() {
                        let (a, b) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * a - s * b;
                        mat[(i, q)] = s * a + c * b;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| u.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut uo = DMatrix::zeros(m.nrows(), n);
    let mut vo = DMatrix::zeros(n, n);
    for (j, &k) in order.iter().enumerate() {
        if norms[k] > 0.0 {
            uo.set_column(j, &(u.column(k) / norms[k]));
        }
        vo.set_column(j, &v.column(k));
    }
    (order.iter().map(|&k| norms[k]).collect(), uo, vo)
}

/// Thin SVD `M = U diag(s) V^T` for any shape, k = min(rows, cols).
fn svd_thin(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    if m.nrows() >= m.ncols() {
        jacobi_tall(m)
    } else {
        let (s, u, v) = jacobi_tall(&m.transpose());
        (s, v, u)
    }
}

/// Full SVD `M = U diag(s) V^T` where `V` is square (cols × cols).
///
/// Wide matrices are padded with zero rows first; this keeps the null space
/// columns of `V`.
pub(crate) fn svd_full_v(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (r, c) = m.shape();
    if c == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    if r == 0 {
        return (vec![0.0; c], DMatrix::identity(c, c));
    }
    let padded = if r < c {
        let mut p = DMatrix::zeros(c, c);
        p.view_mut((0, 0), (r, c)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let (s, _, v) = jacobi_tall(&padded);
    (s, v)
}

/// Thin SVD returning (singular values, U) with U of shape rows × min(rows, cols).
pub(crate) fn svd_u(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return (Vec::new(), DMatrix::zeros(r, 0));
    }
    let (s, u, _) = svd_thin(m);
    (s, u)
}

/// Singular values, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    svd_thin(m).0
}

/// Spectral norm; zero for empty matrices.
pub fn norm2(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

pub fn cond(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

pub fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigvals(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Moore-Penrose pseudo-inverse with relative cutoff `tol * sigma_max`.
pub fn pinv(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let (s, u, v) = svd_thin(m);
    let smax = s.first().copied().unwrap_or(0.0);
    let cut = tol * smax;
    let mut out = DMatrix::zeros(c, r);
    for (i, &si) in s.iter().enumerate() {
        if si > cut && si > 0.0 {
            out += v.column(i) * u.column(i).transpose() / si;
        }
    }
    out
}

/// Block matrix from rows of blocks. All blocks in a row share a height and
/// all rows share a total width.
pub fn block(rows: &[&[&DMatrix<f64>]]) -> DMatrix<f64> {
    let h: usize = rows.iter().map(|r| r.first().map_or(0, |b| b.nrows())).sum();
    let w: usize = rows
        .first()
        .map_or(0, |r| r.iter().map(|b| b.ncols()).sum());
    let mut out = DMatrix::zeros(h, w);
    let mut i = 0;
    for r in rows {
        let mut j = 0;
        let bh = r.first().map_or(0, |b| b.nrows());
        for b in r.iter() {
            debug_assert_eq!(b.nrows(), bh);
            out.view_mut((i, j), b.shape()).copy_from(b);
            j += b.ncols();
        }
        debug_assert_eq!(j, w);
        i += bh;
    }
    out
}

pub fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

pub fn vcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

pub fn from_rows(rows: &[&[f64]]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

pub fn col(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

/// Solve a square system via LU, failing on (near) singularity.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular("linear solve".into()))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruction(m: &DMatrix<f64>) -> f64 {
        let (s, u, v) = svd_thin(m);
        let k = s.len();
        (u * DMatrix::from_diagonal(&DVector::from_vec(s)) * v.columns(0, k).transpose() - m).norm()
    }

    #[test]
    fn svd_is_accurate_on_rank_deficient_projection() {
        // Top rows of an orthonormal 5x3 basis; nalgebra's SVD misses this by ~2e-5.
        let m = DMatrix::from_column_slice(
            4,
            3,
            &[
                0.0,
                0.006617065675129467,
                -0.026468262700518344,
                0.05955359107616616,
                -0.17192086126903577,
                -0.11251109790574769,
                -0.40955991472218933,
                0.8785295928076671,
                0.5865744548536752,
                0.7351265336004735,
                -0.007633860133514571,
                0.1638197990138272,
            ],
        );
        assert!(reconstruction(&m) < 1e-14);
        assert!(reconstruction(&m.transpose()) < 1e-14);
        let s = singular_values(&m);
        assert!(s[2] < 1e-14 && s[1] > 0.9);
    }

    #[test]
    fn full_v_is_orthogonal_for_wide_input() {
        let m = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 3.0, 1.0]);
        let (s, v) = svd_full_v(&m);
        assert_eq!(v.shape(), (4, 4));
        assert!((v.transpose() * &v - DMatrix::identity(4, 4)).norm() < 1e-14);
        assert!(s[2].abs() < 1e-15 && s[3].abs() < 1e-15);
        assert!((&m * v.column(3)).norm() < 1e-14);
    }

    #[test]
    fn pinv_inverts_square() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        assert!((pinv(&m, 1e-12) * &m - DMatrix::identity(2, 2)).norm() < 1e-14);
    }
}
