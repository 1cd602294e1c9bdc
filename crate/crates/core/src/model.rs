//! System data, observer gains and the augmented matrices built from them.
//!
//! Plant:      `E ẋ = A x + B_L f_L(x,u,y) + B_M f_M(Jx,u,y)`, `y = C x + h(u)`.
//! Estimator:  `E ż = A z + L1 d + B f(z,u,y)`, `0 = C z − y + h(u) + L2 d`.
//!
//! Stacking `(z, d)` gives the pencil `s𝓔 − 𝓐` with `𝓔 = diag(E, 0)` and
//! `𝓐 = [[A, L1], [C, L2]]`.

use nalgebra::DMatrix;

use crate::error::{dim_err, Error, Result};
use crate::expr::VectorFunction;
use crate::linalg::{block, check_finite, hcat, singular_values, vcat};
use crate::pencil::{self, MatrixPencil};

/// (l, n, m, p, q_L, q_M, j).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub l: usize,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q_l: usize,
    pub q_m: usize,
    pub j: usize,
}

impl Dims {
    pub fn q(&self) -> usize {
        self.q_l + self.q_m
    }

    /// The `k` a square augmented pencil needs.
    pub fn square_k(&self) -> Option<usize> {
        (self.l + self.p).checked_sub(self.n)
    }
}

#[derive(Debug, Clone)]
pub struct DaeSystem {
    pub e: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b_l: DMatrix<f64>,
    pub b_m: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Lipschitz certificate for `f_L`.
    pub f: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub mu: f64,
    pub f_l: VectorFunction,
    pub f_m: VectorFunction,
    pub h: VectorFunction,
    pub m: usize,
}

fn shape(name: &str, mat: &DMatrix<f64>, r: usize, c: usize) -> Result<()> {
    if mat.shape() != (r, c) {
        return Err(dim_err(format!(
            "{name} is {}x{}, expected {r}x{c}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    Ok(())
}

impl DaeSystem {
    pub fn dims(&self) -> Dims {
        Dims {
            l: self.e.nrows(),
            n: self.e.ncols(),
            m: self.m,
            p: self.c.nrows(),
            q_l: self.b_l.ncols(),
            q_m: self.b_m.ncols(),
            j: self.f.nrows(),
        }
    }

    /// Shape consistency, finiteness, `rk J = q_M` and function signatures.
    pub fn validate(&self) -> Result<Dims> {
        let d = self.dims();
        shape("A", &self.a, d.l, d.n)?;
        shape("B_L", &self.b_l, d.l, d.q_l)?;
        shape("B_M", &self.b_m, d.l, d.q_m)?;
        shape("J", &self.j, d.q_m, d.n)?;
        shape("C", &self.c, d.p, d.n)?;
        shape("F", &self.f, d.j, d.n)?;
        shape("Theta", &self.theta, d.q_m, d.q_m)?;
        for (name, mat) in [
            ("E", &self.e),
            ("A", &self.a),
            ("B_L", &self.b_l),
            ("B_M", &self.b_m),
            ("J", &self.j),
            ("C", &self.c),
            ("F", &self.f),
            ("Theta", &self.theta),
        ] {
            check_finite(mat, name)?;
        }
        if !self.mu.is_finite() {
            return Err(Error::NonFinite("mu"));
        }
        let s = singular_values(&self.j);
        let rank = s
            .iter()
            .filter(|&&v| v > 1e-10 * s.first().copied().unwrap_or(0.0))
            .count();
        if rank != d.q_m {
            return Err(dim_err(format!("rank J = {rank}, expected q_M = {}", d.q_m)));
        }
        let sig = |name: &str, f: &VectorFunction, out: usize, ins: (usize, usize, usize)| {
            if f.out_dim() != out || f.in_dims() != ins {
                Err(dim_err(format!(
                    "{name} maps {:?} -> {}, expected {:?} -> {out}",
                    f.in_dims(),
                    f.out_dim(),
                    ins
                )))
            } else {
                Ok(())
            }
        };
        sig("f_L", &self.f_l, d.q_l, (d.n, d.m, d.p))?;
        sig("f_M", &self.f_m, d.q_m, (d.q_m, d.m, d.p))?;
        sig("h", &self.h, d.p, (d.m, d.m, 0))?;
        Ok(d)
    }

    pub fn b(&self) -> DMatrix<f64> {
        hcat(&self.b_l, &self.b_m)
    }

    pub fn pencil(&self) -> Result<MatrixPencil> {
        MatrixPencil::new(self.e.clone(), self.a.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverGains {
    pub l1: DMatrix<f64>,
    pub l2: DMatrix<f64>,
}

impl ObserverGains {
    pub fn new(l1: DMatrix<f64>, l2: DMatrix<f64>) -> Result<Self> {
        if l1.ncols() != l2.ncols() {
            return Err(dim_err(format!(
                "L1 has {} columns, L2 has {}",
                l1.ncols(),
                l2.ncols()
            )));
        }
        check_finite(&l1, "L1")?;
        check_finite(&l2, "L2")?;
        Ok(ObserverGains { l1, l2 })
    }

    /// No innovations: the estimator is a copy of the plant.
    pub fn none(l: usize, p: usize) -> Self {
        ObserverGains {
            l1: DMatrix::zeros(l, 0),
            l2: DMatrix::zeros(p, 0),
        }
    }

    pub fn k(&self) -> usize {
        self.l1.ncols()
    }

    /// `L̂ = [0_{(l+p)×n}, [L1; L2]]`.
    pub fn embed(&self, n: usize) -> DMatrix<f64> {
        let stacked = vcat(&self.l1, &self.l2);
        hcat(&DMatrix::zeros(stacked.nrows(), n), &stacked)
    }

    /// Inverse of [`embed`](Self::embed): last k columns split at row l.
    pub fn from_lhat(lhat: &DMatrix<f64>, l: usize, n: usize) -> Result<Self> {
        if lhat.ncols() < n || lhat.nrows() < l {
            return Err(dim_err("L_hat smaller than (l, n)"));
        }
        let k = lhat.ncols() - n;
        let p = lhat.nrows() - l;
        ObserverGains::new(
            lhat.view((0, n), (l, k)).into_owned(),
            lhat.view((l, n), (p, k)).into_owned(),
        )
    }
}

/// Matrices of the stacked error system, all sized from (l, n, p, k, q_L, q_M, j).
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub cal_e: DMatrix<f64>,
    pub cal_a: DMatrix<f64>,
    pub cal_b: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub cal_f: DMatrix<f64>,
    pub theta_hat: DMatrix<f64>,
    pub cal_j: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub mu: f64,
    pub dims: Dims,
    pub k: usize,
}

impl AugmentedSystem {
    pub fn lhat(&self) -> DMatrix<f64> {
        &self.cal_a - &self.a_hat
    }

    pub fn gains(&self) -> ObserverGains {
        ObserverGains::from_lhat(&self.lhat(), self.dims.l, self.dims.n).expect("consistent shapes")
    }

    /// `s𝓔 − 𝓐`.
    pub fn pencil(&self) -> MatrixPencil {
        MatrixPencil::new(self.cal_e.clone(), self.cal_a.clone()).expect("finite by construction")
    }

    /// `s[𝓔, 0] − [𝓐, 𝓑]` on the space of `(e, d, φ)`.
    pub fn bordered_pencil(&self) -> MatrixPencil {
        let q = self.cal_b.ncols();
        let e = hcat(&self.cal_e, &DMatrix::zeros(self.cal_e.nrows(), q));
        let a = hcat(&self.cal_a, &self.cal_b);
        MatrixPencil::new(e, a).expect("finite by construction")
    }

    /// Dimension `n + k` of the estimator state `(z, d)`.
    pub fn size(&self) -> usize {
        self.dims.n + self.k
    }
}

pub fn build_augmented(sys: &DaeSystem, gains: &ObserverGains) -> Result<AugmentedSystem> {
    let d = sys.validate()?;
    if gains.l1.nrows() != d.l || gains.l2.nrows() != d.p {
        return Err(dim_err(format!(
            "gains are {}x{} / {}x{}, expected {} / {} rows",
            gains.l1.nrows(),
            gains.l1.ncols(),
            gains.l2.nrows(),
            gains.l2.ncols(),
            d.l,
            d.p
        )));
    }
    assemble(sys, d, &gains.embed(d.n))
}

pub fn build_augmented_from_l(sys: &DaeSystem, lhat: &DMatrix<f64>) -> Result<AugmentedSystem> {
    let d = sys.validate()?;
    if lhat.nrows() != d.l + d.p || lhat.ncols() < d.n {
        return Err(dim_err(format!(
            "L_hat is {}x{}, expected {} rows and at least {} columns",
            lhat.nrows(),
            lhat.ncols(),
            d.l + d.p,
            d.n
        )));
    }
    check_finite(lhat, "L_hat")?;
    if lhat.columns(0, d.n).iter().any(|&v| v != 0.0) {
        return Err(dim_err("L_hat has nonzero entries in its first n columns"));
    }
    assemble(sys, d, lhat)
}

fn assemble(sys: &DaeSystem, d: Dims, lhat: &DMatrix<f64>) -> Result<AugmentedSystem> {
    let k = lhat.ncols() - d.n;
    let (l, n, p, q) = (d.l, d.n, d.p, d.q());
    let z = DMatrix::zeros;
    let cal_e = block(&[&[&sys.e, &z(l, k)], &[&z(p, n), &z(p, k)]]);
    let a_hat = block(&[&[&sys.a, &z(l, k)], &[&sys.c, &z(p, k)]]);
    let cal_a = &a_hat + lhat;
    let cal_b = vcat(&sys.b(), &z(p, q));
    let mut h = z(n + k, n + k);
    for i in n..n + k {
        h[(i, i)] = 1.0;
    }
    let cal_f = hcat(&sys.f, &z(d.j, k));
    let mut theta_hat = z(n + k, q);
    theta_hat
        .view_mut((0, d.q_l), (n, d.q_m))
        .copy_from(&(sys.j.transpose() * &sys.theta));
    let mut cal_j = z(n + k, n + k);
    cal_j
        .view_mut((0, 0), (n, n))
        .copy_from(&(sys.j.transpose() * &sys.j));
    let mut lambda = z(q, q);
    for i in 0..d.q_l {
        lambda[(i, i)] = 1.0;
    }
    Ok(AugmentedSystem {
        cal_e,
        cal_a,
        cal_b,
        a_hat,
        h,
        cal_f,
        theta_hat,
        cal_j,
        lambda,
        mu: sys.mu,
        dims: d,
        k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankCheck {
    pub rational_rank: usize,
    pub n: usize,
    pub n_le_l_plus_p: bool,
}

impl RankCheck {
    pub fn holds(&self) -> bool {
        self.rational_rank == self.n
    }
}

/// Necessary condition for any state estimator: `rk_{ℝ(s)} [sE − A; C] = n`.
pub fn necessary_rank_check(sys: &DaeSystem) -> Result<RankCheck> {
    let d = sys.validate()?;
    let e = vcat(&sys.e, &DMatrix::zeros(d.p, d.n));
    let a = vcat(&sys.a, &(-&sys.c));
    let pen = MatrixPencil::new(e, a)?;
    Ok(RankCheck {
        rational_rank: pencil::rational_rank(&pen, pencil::DEFAULT_SAMPLES),
        n: d.n,
        n_le_l_plus_p: d.n <= d.l + d.p,
    })
}
