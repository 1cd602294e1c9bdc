//! Matrix pencils `sE − A`: Wong sequences, regularity, index, rational rank
//! and the quasi-Weierstraß transform for index-one pencils.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{check_finite, cond, hcat, norm2, singular_values};
use crate::subspace::{self, Subspace};

/// Relative rank tolerance used for every pencil computation.
pub const PENCIL_TOL: f64 = 1e-10;

/// Condition-number guard for inverting `[E V, A W]`.
pub const QWF_COND_MAX: f64 = 1e12;

const SAMPLE_POINTS: [f64; 5] = [0.718, 1.414, 2.236, 3.141, 5.669];
const SAMPLE_SEED: u64 = 0x5eed_0f_5e;

pub const DEFAULT_SAMPLES: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPencil {
    e: DMatrix<f64>,
    a: DMatrix<f64>,
}

impl MatrixPencil {
    pub fn new(e: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        if e.shape() != a.shape() {
            return Err(dim_err(format!(
                "pencil: E is {:?}, A is {:?}",
                e.shape(),
                a.shape()
            )));
        }
        check_finite(&e, "E")?;
        check_finite(&a, "A")?;
        Ok(MatrixPencil { e, a })
    }

    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rows(&self) -> usize {
        self.e.nrows()
    }

    pub fn cols(&self) -> usize {
        self.e.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    /// `λE − A`.
    pub fn at(&self, lambda: f64) -> DMatrix<f64> {
        &self.e * lambda - &self.a
    }
}

#[derive(Debug, Clone)]
pub struct WongResult {
    pub v_star: Subspace,
    pub w_star: Subspace,
    pub k_star: usize,
    pub l_star: usize,
}

/// Full Wong chains (`𝒱⁰ ⊇ 𝒱¹ ⊇ …`, `𝒲⁰ ⊆ 𝒲¹ ⊆ …`) up to and including the
/// first repeated element.
#[derive(Debug, Clone)]
pub struct WongChains {
    pub v: Vec<Subspace>,
    pub w: Vec<Subspace>,
}

fn same(s1: &Subspace, s2: &Subspace) -> bool {
    // The chains are nested, so equal dimension already means equal subspace;
    // the projector test only guards against numerical drift.
    subspace::equals(s1, s2, 1e-6)
}

pub fn wong_chains(p: &MatrixPencil) -> Result<WongChains> {
    wong_chains_tol(p, PENCIL_TOL)
}

pub fn wong_chains_tol(p: &MatrixPencil, tol: f64) -> Result<WongChains> {
    let n = p.cols();
    let mut v = vec![Subspace::full(n)];
    for _ in 0..=n {
        let cur = v.last().unwrap();
        let next = subspace::preimage_tol(p.a(), &subspace::map(p.e(), cur, tol)?, tol)?;
        let done = same(&next, cur);
        v.push(next);
        if done {
            break;
        }
    }
    let mut w = vec![Subspace::trivial(n)];
    for _ in 0..=n {
        let cur = w.last().unwrap();
        let next = subspace::preimage_tol(p.e(), &subspace::map(p.a(), cur, tol)?, tol)?;
        let done = same(&next, cur);
        w.push(next);
        if done {
            break;
        }
    }
    Ok(WongChains { v, w })
}

/// Wong limits with termination steps. `k_star` counts the strict steps of the
/// 𝒱-chain, `l_star` those of the 𝒲-chain.
pub fn wong_limits(p: &MatrixPencil) -> Result<WongResult> {
    let chains = wong_chains(p)?;
    let k_star = chains.v.len() - 2;
    let l_star = chains.w.len() - 2;
    Ok(WongResult {
        v_star: chains.v[k_star].clone(),
        w_star: chains.w[l_star].clone(),
        k_star,
        l_star,
    })
}

/// Deterministic evaluation points: five fixed values, then seeded draws.
pub fn sample_points(n_samples: usize) -> Vec<f64> {
    let mut pts: Vec<f64> = SAMPLE_POINTS.iter().copied().take(n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    while pts.len() < n_samples {
        pts.push(rng.gen_range(-4.0..4.0));
    }
    pts
}

fn rank_at(p: &MatrixPencil, lambda: f64) -> usize {
    let m = p.at(lambda);
    let scale = lambda.abs() * norm2(p.e()) + norm2(p.a());
    let cut = PENCIL_TOL * scale;
    singular_values(&m).iter().filter(|&&s| s > cut && s > 0.0).count()
}

/// Square and `det(λE − A) ≠ 0` at one of the sample points.
pub fn is_regular(p: &MatrixPencil, n_samples: usize) -> bool {
    if !p.is_square() {
        return false;
    }
    let n = p.cols();
    sample_points(n_samples.max(1))
        .into_iter()
        .any(|l| rank_at(p, l) == n)
}

/// Rank over the rational functions, as the maximum sampled numerical rank.
pub fn rational_rank(p: &MatrixPencil, n_samples: usize) -> usize {
    sample_points(n_samples.max(1))
        .into_iter()
        .map(|l| rank_at(p, l))
        .max()
        .unwrap_or(0)
}

/// Index of a regular pencil from the 𝒲-chain termination step.
pub fn pencil_index(p: &MatrixPencil) -> Result<usize> {
    if !is_regular(p, DEFAULT_SAMPLES) {
        return Err(Error::NotRegular);
    }
    Ok(wong_limits(p)?.l_star)
}

/// Quasi-Weierstraß transform of a regular index ≤ 1 pencil.
///
/// `n = [V, W]`, `m = [E V, A W]⁻¹`; then `m E n = diag(I_r, 0)` and
/// `m A n = diag(a_r, I)`. Only the block structure is canonical: V and W are
/// whatever orthonormal bases the subspace module produced.
#[derive(Debug, Clone)]
pub struct QwfTransform {
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub r: usize,
    pub a_r: DMatrix<f64>,
    pub wong: WongResult,
}

pub fn qwf_transform(p: &MatrixPencil) -> Result<QwfTransform> {
    if !is_regular(p, DEFAULT_SAMPLES) {
        return Err(Error::NotRegular);
    }
    let wong = wong_limits(p)?;
    if wong.l_star > 1 {
        return Err(Error::IndexTooHigh(wong.l_star));
    }
    let size = p.cols();
    let (v, w) = (wong.v_star.basis(), wong.w_star.basis());
    if v.ncols() + w.ncols() != size {
        return Err(Error::Dimension(format!(
            "dim V* + dim W* = {} + {} differs from {size}",
            v.ncols(),
            w.ncols()
        )));
    }
    let t = hcat(&(p.e() * v), &(p.a() * w));
    let c = cond(&t);
    if !(c <= QWF_COND_MAX) {
        return Err(Error::IllConditioned(c));
    }
    let m = t
        .try_inverse()
        .ok_or_else(|| Error::Singular("[E V, A W]".into()))?;
    let n = hcat(v, w);
    let r = v.ncols();
    let man = &m * p.a() * &n;
    let a_r = man.view((0, 0), (r, r)).into_owned();
    Ok(QwfTransform { m, n, r, a_r, wong })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::from_rows;

    fn pencil(e: DMatrix<f64>, a: DMatrix<f64>) -> MatrixPencil {
        MatrixPencil::new(e, a).unwrap()
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(MatrixPencil::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn ode_pencil() {
        let a = from_rows(&[&[0.0, 1.0, 0.0], &[-2.0, -3.0, 1.0], &[0.5, 0.0, -1.0]]);
        let p = pencil(DMatrix::identity(3, 3), a.clone());
        let w = wong_limits(&p).unwrap();
        assert_eq!((w.v_star.dim(), w.w_star.dim(), w.k_star, w.l_star), (3, 0, 0, 0));
        assert!(is_regular(&p, DEFAULT_SAMPLES));
        assert_eq!(pencil_index(&p).unwrap(), 0);
        assert_eq!(rational_rank(&p, DEFAULT_SAMPLES), 3);
        let q = qwf_transform(&p).unwrap();
        assert_eq!(q.r, 3);
        let man = &q.m * &a * &q.n;
        assert!((&man - &q.a_r).norm() < 1e-12);
        // A_r is A in the V basis.
        let back = &q.n * &q.a_r * q.n.transpose();
        assert!((back - a).norm() < 1e-10);
    }

    #[test]
    fn zero_pencil_is_singular() {
        let p = pencil(DMatrix::zeros(2, 2), from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
        assert!(!is_regular(&p, DEFAULT_SAMPLES));
        assert_eq!(rational_rank(&p, DEFAULT_SAMPLES), 1);
        assert_eq!(pencil_index(&p), Err(Error::NotRegular));
        assert!(matches!(qwf_transform(&p), Err(Error::NotRegular)));
    }

    #[test]
    fn nilpotent_block_has_index_three() {
        let nil = from_rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 0.0, 0.0]]);
        let p = pencil(nil, DMatrix::identity(3, 3));
        assert_eq!(pencil_index(&p).unwrap(), 3);
        assert!(matches!(qwf_transform(&p), Err(Error::IndexTooHigh(3))));
    }

    #[test]
    fn square_index_one_pencil() {
        // Gain-installed pencil of the two-state square example.
        let e = from_rows(&[&[1.0, -1.0, 0.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        let a = from_rows(&[&[-1.0, 0.0, 15.0], &[0.0, 1.0, -7.0], &[1.0, 1.0, 1.0]]);
        let p = pencil(e.clone(), a.clone());
        let w = wong_limits(&p).unwrap();
        let v_ref = subspace::image(&from_rows(&[&[8.0], &[-7.0], &[-1.0]]), 1e-12).unwrap();
        let w_ref = subspace::image(
            &from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]),
            1e-12,
        )
        .unwrap();
        assert!(subspace::equals(&w.v_star, &v_ref, 1e-10));
        assert!(subspace::equals(&w.w_star, &w_ref, 1e-10));
        assert_eq!((w.k_star, w.l_star), (1, 1));
        assert!(is_regular(&p, DEFAULT_SAMPLES));
        assert_eq!(pencil_index(&p).unwrap(), 1);

        let q = qwf_transform(&p).unwrap();
        assert_eq!(q.r, 1);
        let men = &q.m * &e * &q.n;
        let man = &q.m * &a * &q.n;
        let mut men_ref = DMatrix::zeros(3, 3);
        men_ref[(0, 0)] = 1.0;
        assert!((men - men_ref).norm() < 1e-10);
        assert!(man.view((1, 1), (2, 2)).into_owned().relative_eq(
            &DMatrix::identity(2, 2),
            1e-10,
            1e-10
        ));
        assert!(man[(0, 1)].abs() < 1e-10 && man[(1, 0)].abs() < 1e-10);
    }

    #[test]
    fn sample_points_are_deterministic() {
        let a = sample_points(8);
        assert_eq!(a, sample_points(8));
        assert_eq!(&a[..5], &SAMPLE_POINTS[..]);
    }
}
