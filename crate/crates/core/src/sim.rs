//! Simulation of plant and estimator through the index-one reduction: a
//! classical RK4 step on `x1` with `G(x1, x2) = 0` re-solved by Newton at
//! every stage.
//!
//! The plant runs inside the estimator's coordinates with its output fed back
//! (`y = C x + h(u)`), which pins the innovation to zero when `L2` has full
//! column rank.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::expr::VectorFunction;
use crate::model::{DaeSystem, ObserverGains};
use crate::reduced::{NewtonOutcome, Output, ReducedSystem, NEWTON_TOL};
use crate::subspace::{self, Subspace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        if !(t1 > t0 && t0.is_finite() && t1.is_finite()) {
            return Err(Error::Domain(format!("empty time span [{t0}, {t1}]")));
        }
        Ok(TimeGrid { t0, t1, dt })
    }

    pub fn steps(&self) -> usize {
        ((self.t1 - self.t0) / self.dt - 1e-9).ceil() as usize
    }

    pub fn time(&self, i: usize) -> f64 {
        (self.t0 + i as f64 * self.dt).min(self.t1)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimTrace {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub d: Vec<DVector<f64>>,
    /// `f(z, u, y) − f(x, u, y)`, stacked Lipschitz then monotone part.
    pub phi: Vec<DVector<f64>>,
    pub err_norm: Vec<f64>,
    pub d_norm: Vec<f64>,
    pub newton_iters: Vec<usize>,
    pub g_residual: Vec<f64>,
    /// Distance moved to make the initial data consistent (plant, estimator).
    pub init_projection: (f64, f64),
}

#[derive(Debug, Clone, Default)]
pub struct PlantTrace {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub newton_iters: Vec<usize>,
    pub g_residual: Vec<f64>,
    pub init_projection: f64,
}

/// Build the reduction and reject what it cannot represent.
pub fn reduce(sys: &DaeSystem, gains: &ObserverGains) -> Result<ReducedSystem> {
    let d = sys.validate()?;
    if d.square_k() != Some(gains.k()) {
        return Err(Error::Unsupported(format!(
            "augmented pencil is {}x{}, simulation needs it square",
            d.l + d.p,
            d.n + gains.k()
        )));
    }
    ReducedSystem::new(sys, gains).map_err(|e| match e {
        Error::NotRegular | Error::IndexTooHigh(_) | Error::IllConditioned(_) => {
            Error::Unsupported(format!("index-one reduction unavailable: {e}"))
        }
        other => other,
    })
}

/// Complete `x1` to a consistent state by Newton on `G(x1, ·) = 0`.
pub fn consistent_init(
    red: &ReducedSystem,
    x1: &DVector<f64>,
    guess: &DVector<f64>,
    u: &[f64],
    y: &[f64],
) -> Result<NewtonOutcome> {
    red.solve_x2(x1, guess, u, Output::External(y))
}

fn input_at(u: &VectorFunction, t: f64) -> Result<Vec<f64>> {
    if u.out_dim() == 0 {
        return Ok(Vec::new());
    }
    Ok(u.eval_t(t)?.as_slice().to_vec())
}

fn check_input(sys: &DaeSystem, u: &VectorFunction) -> Result<()> {
    if u.out_dim() != sys.m {
        return Err(Error::Dimension(format!(
            "input has {} components, system expects {}",
            u.out_dim(),
            sys.m
        )));
    }
    Ok(())
}

fn full_column_rank_l2(gains: &ObserverGains) -> bool {
    let k = gains.k();
    k == 0 || subspace::kernel(&gains.l2, 1e-10).map(|s| s.dim() == 0).unwrap_or(false)
}

/// Algebraic states of plant and estimator at the current stage.
#[derive(Debug, Clone)]
struct Warm {
    p2: DVector<f64>,
    o2: DVector<f64>,
}

struct Stage {
    deriv: DVector<f64>,
    iters: usize,
    residual: f64,
    x: DVector<f64>,
    xi_o: Option<DVector<f64>>,
    y: DVector<f64>,
}

struct Runner<'a> {
    red: &'a ReducedSystem,
    input: &'a VectorFunction,
    coupled: bool,
}

impl Runner<'_> {
    fn r(&self) -> usize {
        self.red.r()
    }

    fn eval(&self, t: f64, s: &DVector<f64>, warm: &mut Warm) -> Result<Stage> {
        let r = self.r();
        let u = input_at(self.input, t)?;
        let p1 = s.rows(0, r).into_owned();
        let wrap = |e: Error| match e {
            Error::Newton(m) => Error::Newton(format!("t = {t:.6}: {m}")),
            other => other,
        };
        let po = self.red.solve_x2(&p1, &warm.p2, &u, Output::SelfFed).map_err(wrap)?;
        warm.p2 = po.x2.clone();
        let xi_p = self.red.xi(&p1, &po.x2);
        let n = self.red.aug.dims.n;
        let x = xi_p.rows(0, n).into_owned();
        let y = &self.red.sys.c * &x + self.red.sys.h.eval(&u, &u, &[])?;
        let dp = self.red.rhs(&p1, &po.x2, &u, Output::SelfFed)?;
        if !self.coupled {
            return Ok(Stage {
                deriv: dp,
                iters: po.iters,
                residual: po.residual,
                x,
                xi_o: None,
                y,
            });
        }
        let o1 = s.rows(r, r).into_owned();
        let oo = self
            .red
            .solve_x2(&o1, &warm.o2, &u, Output::External(y.as_slice()))
            .map_err(wrap)?;
        warm.o2 = oo.x2.clone();
        let do_ = self.red.rhs(&o1, &oo.x2, &u, Output::External(y.as_slice()))?;
        let mut deriv = DVector::zeros(2 * r);
        deriv.rows_mut(0, r).copy_from(&dp);
        deriv.rows_mut(r, r).copy_from(&do_);
        Ok(Stage {
            deriv,
            iters: po.iters + oo.iters,
            residual: po.residual.max(oo.residual),
            x,
            xi_o: Some(self.red.xi(&o1, &oo.x2)),
            y,
        })
    }

    /// One classical RK4 step; the algebraic part is re-solved at each stage.
    fn step(&self, t: f64, s: &DVector<f64>, h: f64, warm: &mut Warm) -> Result<(DVector<f64>, usize)> {
        let k1 = self.eval(t, s, warm)?;
        let k2 = self.eval(t + h / 2.0, &(s + &k1.deriv * (h / 2.0)), warm)?;
        let k3 = self.eval(t + h / 2.0, &(s + &k2.deriv * (h / 2.0)), warm)?;
        let k4 = self.eval(t + h, &(s + &k3.deriv * h), warm)?;
        let next = s + (k1.deriv + k2.deriv * 2.0 + k3.deriv * 2.0 + k4.deriv) * (h / 6.0);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Newton(format!("t = {t:.6}: state overflow")));
        }
        Ok((next, k1.iters + k2.iters + k3.iters + k4.iters))
    }
}

fn project_plant(red: &ReducedSystem, x0: &DVector<f64>, u0: &[f64]) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let n = red.aug.dims.n;
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has {} entries, expected {n}", x0.len())));
    }
    let mut xi = DVector::zeros(red.aug.size());
    xi.rows_mut(0, n).copy_from(x0);
    let (x1, x2g) = red.split(&xi)?;
    let out = red.solve_x2(&x1, &x2g, u0, Output::SelfFed)?;
    let moved = (red.xi(&x1, &out.x2) - xi).norm();
    Ok((x1, out.x2, moved))
}

fn project_observer(
    red: &ReducedSystem,
    z0: &DVector<f64>,
    u0: &[f64],
    y0: &[f64],
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let n = red.aug.dims.n;
    if z0.len() != n {
        return Err(Error::Dimension(format!("z0 has {} entries, expected {n}", z0.len())));
    }
    let mut xi = DVector::zeros(red.aug.size());
    xi.rows_mut(0, n).copy_from(z0);
    let (o1, o2g) = red.split(&xi)?;
    let out = consistent_init(red, &o1, &o2g, u0, y0)?;
    let moved = (red.xi(&o1, &out.x2) - xi).norm();
    Ok((o1, out.x2, moved))
}

/// Plant trajectory from `x0` (projected to consistency).
pub fn simulate_plant(
    sys: &DaeSystem,
    gains: &ObserverGains,
    input: &VectorFunction,
    x0: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<PlantTrace> {
    check_input(sys, input)?;
    let red = reduce(sys, gains)?;
    if !full_column_rank_l2(gains) {
        return Err(Error::Unsupported("plant simulation needs L2 with full column rank".into()));
    }
    let runner = Runner { red: &red, input, coupled: false };
    let u0 = input_at(input, grid.t0)?;
    let (p1, p2, moved) = project_plant(&red, x0, &u0)?;
    let mut warm = Warm { p2, o2: DVector::zeros(0) };
    let mut s = p1;
    let mut tr = PlantTrace { init_projection: moved, ..PlantTrace::default() };
    let mut iters = 0;
    for i in 0..=grid.steps() {
        let t = grid.time(i);
        if i > 0 {
            let h = t - grid.time(i - 1);
            let (next, it) = runner.step(grid.time(i - 1), &s, h, &mut warm)?;
            s = next;
            iters = it;
        }
        let st = runner.eval(t, &s, &mut warm)?;
        tr.t.push(t);
        tr.x.push(st.x);
        tr.y.push(st.y);
        tr.newton_iters.push(iters + st.iters);
        tr.g_residual.push(st.residual);
    }
    Ok(tr)
}

fn phi(sys: &DaeSystem, z: &DVector<f64>, x: &DVector<f64>, u: &[f64], y: &[f64]) -> Result<DVector<f64>> {
    let d = sys.dims();
    let mut out = DVector::zeros(d.q());
    let fl = sys.f_l.eval(z.as_slice(), u, y)? - sys.f_l.eval(x.as_slice(), u, y)?;
    let (jz, jx) = (&sys.j * z, &sys.j * x);
    let fm = sys.f_m.eval(jz.as_slice(), u, y)? - sys.f_m.eval(jx.as_slice(), u, y)?;
    out.rows_mut(0, d.q_l).copy_from(&fl);
    out.rows_mut(d.q_l, d.q_m).copy_from(&fm);
    Ok(out)
}

/// Plant and estimator side by side; the estimator sees the plant's `u`, `y`.
pub fn simulate_coupled(
    sys: &DaeSystem,
    gains: &ObserverGains,
    input: &VectorFunction,
    x0: &DVector<f64>,
    z0: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<SimTrace> {
    check_input(sys, input)?;
    let red = reduce(sys, gains)?;
    if !full_column_rank_l2(gains) {
        return Err(Error::Unsupported("plant simulation needs L2 with full column rank".into()));
    }
    let runner = Runner { red: &red, input, coupled: true };
    let u0 = input_at(input, grid.t0)?;
    let (p1, p2, moved_p) = project_plant(&red, x0, &u0)?;
    let x_init = red.xi(&p1, &p2).rows(0, red.aug.dims.n).into_owned();
    let y0 = &sys.c * &x_init + sys.h.eval(&u0, &u0, &[])?;
    let (o1, o2, moved_o) = project_observer(&red, z0, &u0, y0.as_slice())?;
    let r = red.r();
    let mut s = DVector::zeros(2 * r);
    s.rows_mut(0, r).copy_from(&p1);
    s.rows_mut(r, r).copy_from(&o1);
    let mut warm = Warm { p2, o2 };
    let n = red.aug.dims.n;
    let mut tr = SimTrace { init_projection: (moved_p, moved_o), ..SimTrace::default() };
    let mut iters = 0;
    for i in 0..=grid.steps() {
        let t = grid.time(i);
        if i > 0 {
            let h = t - grid.time(i - 1);
            let (next, it) = runner.step(grid.time(i - 1), &s, h, &mut warm)?;
            s = next;
            iters = it;
        }
        let st = runner.eval(t, &s, &mut warm)?;
        let xi_o = st.xi_o.expect("coupled stage");
        let z = xi_o.rows(0, n).into_owned();
        let d = xi_o.rows(n, xi_o.len() - n).into_owned();
        let u = input_at(input, t)?;
        tr.phi.push(phi(sys, &z, &st.x, &u, st.y.as_slice())?);
        tr.err_norm.push((&z - &st.x).norm());
        tr.d_norm.push(d.norm());
        tr.t.push(t);
        tr.x.push(st.x);
        tr.z.push(z);
        tr.d.push(d);
        tr.newton_iters.push(iters + st.iters);
        tr.g_residual.push(st.residual);
    }
    Ok(tr)
}

/// Largest distance of `(e, d, φ)(t)` from `vstar` along the trace.
pub fn check_trajectory_subspace(trace: &SimTrace, vstar: &Subspace) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..trace.t.len() {
        let e = &trace.z[i] - &trace.x[i];
        let (d, p) = (&trace.d[i], &trace.phi[i]);
        let len = e.len() + d.len() + p.len();
        if len != vstar.ambient() {
            return Err(Error::Dimension(format!(
                "trace vectors have {len} entries, subspace lives in R^{}",
                vstar.ambient()
            )));
        }
        let mut v = DVector::zeros(len);
        v.rows_mut(0, e.len()).copy_from(&e);
        v.rows_mut(e.len(), d.len()).copy_from(d);
        v.rows_mut(e.len() + d.len(), p.len()).copy_from(p);
        worst = worst.max(vstar.distance(&v));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayEstimate {
    /// `−slope` of `log‖e‖` over the second half of the horizon.
    pub beta: f64,
    /// RMS residual of the log-linear fit.
    pub fit_residual: f64,
    pub decaying: bool,
}

/// Least-squares decay rate of `‖e(t)‖` on the tail half of the horizon.
/// Samples at or below `1e-300` are ignored; with fewer than two left the
/// error is treated as identically zero.
pub fn estimate_decay(t: &[f64], err: &[f64]) -> DecayEstimate {
    let none = DecayEstimate { beta: 0.0, fit_residual: 0.0, decaying: false };
    let (Some(&t0), Some(&t1)) = (t.first(), t.last()) else {
        return none;
    };
    let mid = 0.5 * (t0 + t1);
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(err)
        .filter(|(ti, e)| **ti >= mid && **e > 1e-300)
        .map(|(ti, e)| (*ti, e.ln()))
        .collect();
    if pts.len() < 2 {
        return none;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let stl: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let slope = if stt > 0.0 { stl / stt } else { 0.0 };
    let rss: f64 = pts
        .iter()
        .map(|p| (p.1 - ml - slope * (p.0 - mt)).powi(2))
        .sum();
    let beta = -slope;
    DecayEstimate {
        beta,
        fit_residual: (rss / n).sqrt(),
        decaying: beta > 1e-9,
    }
}

/// Residual bound used for the per-step algebraic check.
pub fn newton_tol() -> f64 {
    NEWTON_TOL
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::linalg::from_rows;
    use nalgebra::DMatrix;

    fn signal(texts: &[&str]) -> VectorFunction {
        let t: Vec<String> = texts.iter().map(|s| s.to_string()).collect();
        VectorFunction::signal(&t).unwrap()
    }

    fn ode(a: DMatrix<f64>) -> (DaeSystem, ObserverGains) {
        let n = a.nrows();
        let sys = DaeSystem {
            e: DMatrix::identity(n, n),
            a,
            b_l: DMatrix::zeros(n, 0),
            b_m: DMatrix::zeros(n, 0),
            j: DMatrix::zeros(0, n),
            c: DMatrix::zeros(0, n),
            f: DMatrix::zeros(0, n),
            theta: DMatrix::zeros(0, 0),
            mu: 0.0,
            f_l: VectorFunction::state(&[], n, 0, 0).unwrap(),
            f_m: VectorFunction::monotone(&[], 0, 0, 0).unwrap(),
            h: VectorFunction::output(&[], 0).unwrap(),
            m: 0,
        };
        (sys, ObserverGains::none(n, 0))
    }

    #[test]
    fn pure_ode_matches_matrix_exponential() {
        let a = from_rows(&[&[-0.5, 2.0], &[-2.0, -0.5]]);
        let (sys, g) = ode(a.clone());
        let x0 = DVector::from_vec(vec![1.0, -0.5]);
        let tr = simulate_plant(&sys, &g, &signal(&[]), &x0, &TimeGrid::new(0.0, 1.0, 0.01).unwrap()).unwrap();
        let exact = a.exp() * &x0;
        assert!((tr.x.last().unwrap() - exact).norm() < 1e-8);
    }

    #[test]
    fn rejects_bad_grid() {
        assert!(TimeGrid::new(0.0, 1.0, 0.0).is_err());
        assert!(TimeGrid::new(0.0, 1.0, -1e-3).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 1e-3).is_err());
    }

    #[test]
    fn overdetermined_example_is_unsupported() {
        let ex = corpus::overdetermined();
        let r = simulate_coupled(
            &ex.sys,
            &ex.gains,
            &signal(&[]),
            &DVector::zeros(2),
            &DVector::zeros(2),
            &TimeGrid::new(0.0, 1.0, 0.1).unwrap(),
        );
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn rlc_consistent_init_solves_constraint() {
        let ex = corpus::rlc();
        let red = reduce(&ex.sys, &ex.gains).unwrap();
        // Self-fed plant: the algebraic row is x3³ − x3 − x1 = 0.
        let x0 = DVector::from_vec(vec![0.5, 0.2, 1.2]);
        let (x1, x2, moved) = project_plant(&red, &x0, &[2.0]).unwrap();
        let x = red.xi(&x1, &x2).rows(0, 3).into_owned();
        assert!((x[2].powi(3) - x[2] - x[0]).abs() < 1e-9, "{x}");
        assert!((x[2] - 1.19).abs() < 0.01, "{x}");
        assert!(moved < 0.1);
    }

    #[test]
    fn rlc_plant_obeys_circuit_equations() {
        let ex = corpus::rlc();
        let dt = 1e-3;
        let input = signal(&["2"]);
        let x0 = DVector::from_vec(vec![0.5, 0.2, 1.2]);
        let tr = simulate_plant(&ex.sys, &ex.gains, &input, &x0, &TimeGrid::new(0.0, 2.0, dt).unwrap()).unwrap();
        let mut worst: f64 = 0.0;
        for i in 1..tr.t.len() - 1 {
            let dx = (&tr.x[i + 1] - &tr.x[i - 1]) / (2.0 * dt);
            let x = &tr.x[i];
            worst = worst.max((dx[0] - 2.0 * x[1]).abs());
            worst = worst.max((dx[1] + 2.0 * x[1] + x[2] - 1.0).abs());
            worst = worst.max((x[2].powi(3) - x[2] - x[0]).abs());
        }
        assert!(worst <= 1e-6, "{worst}");
        assert!(tr.g_residual.iter().all(|r| *r <= NEWTON_TOL));
        for (x, y) in tr.x.iter().zip(&tr.y) {
            assert!((y[0] - (x[0] - x[2])).abs() < 1e-12);
        }
    }

    #[test]
    fn rlc_error_decays() {
        let ex = corpus::rlc();
        let x0 = DVector::from_vec(vec![0.5, 0.2, 1.2]);
        let z0 = DVector::from_vec(vec![-0.5, 1.0, 0.0]);
        let tr = simulate_coupled(
            &ex.sys,
            &ex.gains,
            &signal(&["2"]),
            &x0,
            &z0,
            &TimeGrid::new(0.0, 20.0, 1e-2).unwrap(),
        )
        .unwrap();
        let (e0, e1) = (tr.err_norm[0], *tr.err_norm.last().unwrap());
        assert!(e1 <= 1e-3 * e0, "{e0} -> {e1}");
        assert!(estimate_decay(&tr.t, &tr.err_norm).decaying);
        let aug = crate::model::build_augmented(&ex.sys, &ex.gains).unwrap();
        let vstar = crate::pencil::wong_limits(&aug.bordered_pencil()).unwrap().v_star;
        assert!(check_trajectory_subspace(&tr, &vstar).unwrap() < 1e-8);
    }

    #[test]
    fn matched_start_stays_matched() {
        let ex = corpus::rlc();
        let x0 = DVector::from_vec(vec![0.5, 0.2, 1.2]);
        let tr = simulate_coupled(
            &ex.sys,
            &ex.gains,
            &signal(&["2"]),
            &x0,
            &x0,
            &TimeGrid::new(0.0, 2.0, 1e-2).unwrap(),
        )
        .unwrap();
        assert!(tr.err_norm.iter().all(|e| *e < 1e-9));
        assert!(tr.d_norm.iter().all(|d| *d < 1e-9));
    }

    #[test]
    fn decay_of_exact_exponential() {
        let t: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.01).collect();
        let e: Vec<f64> = t.iter().map(|t| 3.0 * (-2.0 * t).exp()).collect();
        let d = estimate_decay(&t, &e);
        assert!((d.beta - 2.0).abs() < 1e-6 && d.decaying);
        let flat = vec![0.3; t.len()];
        let d = estimate_decay(&t, &flat);
        assert!(d.beta.abs() < 1e-12 && !d.decaying);
    }
}
