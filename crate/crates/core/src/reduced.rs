//! Index-one reduction of the estimator: with `(z, d) = N (x1, x2)` the
//! augmented DAE splits into
//!
//! ```text
//! ẋ1 = A_r x1 + B̂1 g(ξ, u, y)
//!  0 = x2 + B̂2 g(ξ, u, y)            =: G(x1, x2, u, y)
//! ```
//!
//! where `g = (f_L(x,u,y), f_M(Jx,u,y), h(u) − y)` and `x = [I_n, 0] ξ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::VarKind;
use crate::linalg::{block, norm2, solve};
use crate::model::{build_augmented, AugmentedSystem, DaeSystem, ObserverGains};
use crate::pencil::{qwf_transform, QwfTransform};

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITERS: usize = 50;

/// Where the measurement comes from when evaluating `g`.
#[derive(Debug, Clone, Copy)]
pub enum Output<'a> {
    /// Measured `y` supplied by the plant.
    External(&'a [f64]),
    /// `y = C x + h(u)` computed from the state itself; used to run the plant
    /// inside the estimator's coordinates, where it forces `L2 d = 0`.
    SelfFed,
}

#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub sys: DaeSystem,
    pub aug: AugmentedSystem,
    pub qwf: QwfTransform,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    /// `[I_n, 0] N`, maps `(x1, x2)` to the physical state.
    pub nbar: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x2: DVector<f64>,
    pub iters: usize,
    pub residual: f64,
}

impl ReducedSystem {
    pub fn new(sys: &DaeSystem, gains: &ObserverGains) -> Result<Self> {
        let aug = build_augmented(sys, gains)?;
        let qwf = qwf_transform(&aug.pencil())?;
        let d = aug.dims;
        let z = DMatrix::zeros;
        let inject = block(&[
            &[&sys.b_l, &sys.b_m, &z(d.l, d.p)],
            &[&z(d.p, d.q_l), &z(d.p, d.q_m), &DMatrix::identity(d.p, d.p)],
        ]);
        let bhat = &qwf.m * inject;
        let r = qwf.r;
        let rest = bhat.nrows() - r;
        let b1 = bhat.rows(0, r).into_owned();
        let b2 = bhat.rows(r, rest).into_owned();
        let nbar = qwf.n.rows(0, d.n).into_owned();
        Ok(ReducedSystem {
            sys: sys.clone(),
            aug,
            qwf,
            b1,
            b2,
            nbar,
        })
    }

    pub fn r(&self) -> usize {
        self.qwf.r
    }

    pub fn x2_dim(&self) -> usize {
        self.b2.nrows()
    }

    pub fn xi(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(x1.len() + x2.len());
        v.rows_mut(0, x1.len()).copy_from(x1);
        v.rows_mut(x1.len(), x2.len()).copy_from(x2);
        &self.qwf.n * v
    }

    /// `(x1, x2) = N⁻¹ ξ`.
    pub fn split(&self, xi: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let c = solve(&self.qwf.n, xi)?;
        let r = self.r();
        Ok((c.rows(0, r).into_owned(), c.rows(r, c.len() - r).into_owned()))
    }

    /// Physical state and measurement for a given `ξ`.
    fn x_and_y(&self, xi: &DVector<f64>, u: &[f64], out: Output) -> Result<(DVector<f64>, DVector<f64>)> {
        let d = self.aug.dims;
        let x = xi.rows(0, d.n).into_owned();
        let y = match out {
            Output::External(y) => DVector::from_column_slice(y),
            Output::SelfFed => &self.sys.c * &x + self.sys.h.eval(u, u, &[])?,
        };
        Ok((x, y))
    }

    /// `g(ξ)` and its Jacobian with respect to `ξ`.
    pub fn g(&self, xi: &DVector<f64>, u: &[f64], out: Output) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.aug.dims;
        let size = xi.len();
        let (x, y) = self.x_and_y(xi, u, out)?;
        let w = &self.sys.j * &x;
        let (xs, ys, ws) = (x.as_slice(), y.as_slice(), w.as_slice());

        let fl = self.sys.f_l.eval(xs, u, ys)?;
        let fm = self.sys.f_m.eval(ws, u, ys)?;
        let hu = self.sys.h.eval(u, u, &[])?;
        let mut g = DVector::zeros(d.q() + d.p);
        g.rows_mut(0, d.q_l).copy_from(&fl);
        g.rows_mut(d.q_l, d.q_m).copy_from(&fm);
        g.rows_mut(d.q(), d.p).copy_from(&(hu - &y));

        // d g / d x, then chained through x = [I_n, 0] ξ.
        let mut dgdx = DMatrix::zeros(d.q() + d.p, d.n);
        dgdx.rows_mut(0, d.q_l)
            .copy_from(&self.sys.f_l.jacobian(VarKind::X, xs, u, ys)?);
        dgdx.rows_mut(d.q_l, d.q_m)
            .copy_from(&(self.sys.f_m.jacobian(VarKind::W, ws, u, ys)? * &self.sys.j));
        if let Output::SelfFed = out {
            // y depends on x through C.
            let mut dgdy = DMatrix::zeros(d.q() + d.p, d.p);
            dgdy.rows_mut(0, d.q_l)
                .copy_from(&self.sys.f_l.jacobian(VarKind::Y, xs, u, ys)?);
            dgdy.rows_mut(d.q_l, d.q_m)
                .copy_from(&self.sys.f_m.jacobian(VarKind::Y, ws, u, ys)?);
            dgdy.rows_mut(d.q(), d.p).copy_from(&(-DMatrix::identity(d.p, d.p)));
            dgdx += dgdy * &self.sys.c;
        }
        let mut jac = DMatrix::zeros(d.q() + d.p, size);
        jac.columns_mut(0, d.n).copy_from(&dgdx);
        Ok((g, jac))
    }

    /// Jacobians of `g` with respect to `u` and external `y`.
    pub fn g_inputs(&self, xi: &DVector<f64>, u: &[f64], y: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let d = self.aug.dims;
        let x = xi.rows(0, d.n).into_owned();
        let w = &self.sys.j * &x;
        let (xs, ws) = (x.as_slice(), w.as_slice());
        let mut gu = DMatrix::zeros(d.q() + d.p, d.m);
        gu.rows_mut(0, d.q_l)
            .copy_from(&self.sys.f_l.jacobian(VarKind::U, xs, u, y)?);
        gu.rows_mut(d.q_l, d.q_m)
            .copy_from(&self.sys.f_m.jacobian(VarKind::U, ws, u, y)?);
        gu.rows_mut(d.q(), d.p)
            .copy_from(&self.sys.h.jacobian(VarKind::U, u, u, &[])?);
        let mut gy = DMatrix::zeros(d.q() + d.p, d.p);
        gy.rows_mut(0, d.q_l)
            .copy_from(&self.sys.f_l.jacobian(VarKind::Y, xs, u, y)?);
        gy.rows_mut(d.q_l, d.q_m)
            .copy_from(&self.sys.f_m.jacobian(VarKind::Y, ws, u, y)?);
        gy.rows_mut(d.q(), d.p).copy_from(&(-DMatrix::identity(d.p, d.p)));
        Ok((gu, gy))
    }

    /// `G(x1, x2)` and `∂G/∂x2`.
    pub fn residual(
        &self,
        x1: &DVector<f64>,
        x2: &DVector<f64>,
        u: &[f64],
        out: Output,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let xi = self.xi(x1, x2);
        let (g, jac) = self.g(&xi, u, out)?;
        let r = self.r();
        let res = x2 + &self.b2 * g;
        let n2 = self.qwf.n.columns(r, x2.len());
        let dx2 = DMatrix::identity(x2.len(), x2.len()) + &self.b2 * jac * n2;
        Ok((res, dx2))
    }

    /// `∂G/∂x1`.
    pub fn residual_x1(&self, x1: &DVector<f64>, x2: &DVector<f64>, u: &[f64], out: Output) -> Result<DMatrix<f64>> {
        let xi = self.xi(x1, x2);
        let (_, jac) = self.g(&xi, u, out)?;
        Ok(&self.b2 * jac * self.qwf.n.columns(0, self.r()))
    }

    /// Damped Newton on `G(x1, ·) = 0`.
    pub fn solve_x2(
        &self,
        x1: &DVector<f64>,
        guess: &DVector<f64>,
        u: &[f64],
        out: Output,
    ) -> Result<NewtonOutcome> {
        let mut x2 = guess.clone();
        let (mut res, mut jac) = self.residual(x1, &x2, u, out)?;
        let mut norm = res.norm();
        for it in 0..NEWTON_MAX_ITERS {
            if norm <= NEWTON_TOL {
                return Ok(NewtonOutcome { x2, iters: it, residual: norm });
            }
            let step = solve(&jac, &res).map_err(|_| {
                Error::Newton(format!("singular x2-Jacobian at iteration {it}"))
            })?;
            let mut lambda = 1.0;
            loop {
                let trial = &x2 - &step * lambda;
                match self.residual(x1, &trial, u, out) {
                    Ok((r2, j2)) if r2.norm() < norm || lambda < 1e-4 => {
                        x2 = trial;
                        res = r2;
                        jac = j2;
                        norm = res.norm();
                        break;
                    }
                    Err(e) if lambda < 1e-4 => return Err(e),
                    _ => lambda *= 0.5,
                }
            }
        }
        if norm <= NEWTON_TOL {
            return Ok(NewtonOutcome { x2, iters: NEWTON_MAX_ITERS, residual: norm });
        }
        Err(Error::Newton(format!(
            "no convergence in {NEWTON_MAX_ITERS} iterations (|G| = {norm:.3e})"
        )))
    }

    /// `A_r x1 + B̂1 g`.
    pub fn rhs(&self, x1: &DVector<f64>, x2: &DVector<f64>, u: &[f64], out: Output) -> Result<DVector<f64>> {
        let xi = self.xi(x1, x2);
        let (g, _) = self.g(&xi, u, out)?;
        Ok(&self.qwf.a_r * x1 + &self.b1 * g)
    }

    pub fn scale(&self) -> f64 {
        norm2(&self.b2).max(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::VectorFunction;
    use crate::linalg::from_rows;

    /// Scalar algebraic loop with a linear constraint: the Newton solve takes
    /// one step.
    fn linear() -> (DaeSystem, ObserverGains) {
        let sys = DaeSystem {
            e: from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]),
            a: from_rows(&[&[-1.0, 1.0], &[1.0, -2.0]]),
            b_l: DMatrix::zeros(2, 0),
            b_m: from_rows(&[&[0.0], &[1.0]]),
            j: from_rows(&[&[0.0, 1.0]]),
            c: from_rows(&[&[1.0, 0.0]]),
            f: DMatrix::zeros(0, 2),
            theta: DMatrix::identity(1, 1),
            mu: 0.0,
            f_l: VectorFunction::state(&[], 2, 1, 1).unwrap(),
            f_m: VectorFunction::monotone(&["0.5*w1 + u1".into()], 1, 1, 1).unwrap(),
            h: VectorFunction::output(&["u1".into()], 1).unwrap(),
            m: 1,
        };
        let g = ObserverGains::new(from_rows(&[&[0.0], &[0.0]]), from_rows(&[&[1.0]])).unwrap();
        (sys, g)
    }

    #[test]
    fn linear_constraint_solves_in_one_step() {
        let (sys, g) = linear();
        let red = ReducedSystem::new(&sys, &g).unwrap();
        let x1 = DVector::from_element(red.r(), 0.7);
        let guess = DVector::zeros(red.x2_dim());
        let out = red.solve_x2(&x1, &guess, &[0.3], Output::External(&[0.2])).unwrap();
        assert!(out.iters <= 2 && out.residual <= NEWTON_TOL);
    }

    #[test]
    fn pure_output_injection_is_explicit() {
        // f = 0: G = x2 + B̂2 (0, h(u) − y) so x2* = −B̂2 (h(u) − y).
        let (mut sys, g) = linear();
        sys.f_m = VectorFunction::monotone(&["0".into()], 1, 1, 1).unwrap();
        let red = ReducedSystem::new(&sys, &g).unwrap();
        let x1 = DVector::from_element(red.r(), -0.4);
        let out = red
            .solve_x2(&x1, &DVector::zeros(red.x2_dim()), &[0.3], Output::External(&[1.0]))
            .unwrap();
        let gv = DVector::from_vec(vec![0.0, 0.3 - 1.0]);
        let expect = -(&red.b2 * gv);
        assert!((out.x2 - expect).norm() < 1e-12);
    }
}
