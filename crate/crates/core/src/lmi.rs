//! Feasibility search for the subspace-restricted matrix inequalities with the
//! gains frozen, by alternating projections.
//!
//! The unknowns `θ = (vec 𝒫, last k columns of 𝒦, δ)` enter affinely into
//! `M1(θ) = Sᵀ𝒬S` and `M2(θ) = Ūᵀ𝓔ᵀ𝒫Ū`. We alternate between the affine set
//! `{(θ, Y1, Y2) : Y1 = M1(θ), Y2 = M2(θ), equalities}` and the product of
//! cones `{δ ≥ ε} × {Y1 ⪯ −εI} × {Y2 ⪰ εI}` (or `⪰ 0`). Every candidate is
//! handed to [`crate::synth`] before it is reported feasible; the method can
//! never prove infeasibility.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, sym_eigvals};
use crate::model::{build_augmented, AugmentedSystem, DaeSystem, ObserverGains};
use crate::pencil::wong_limits;
use crate::subspace;
use crate::synth::{
    build_q, check_square_estimator, check_state_estimator, extract_gains, projected_margins,
    CertificateReport, CheckOptions, LmiCertificate, Status,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// `𝓔ᵀ𝒫 ≻ 0` on V̄*.
    Thm1,
    /// `𝓔ᵀ𝒫 ⪰ 0` on V̄*, square augmentation, invertible 𝒫.
    Thm2,
}

/// Scaled half-vectorisation: `‖svec(M)‖ = ‖M‖_F` for symmetric `M`.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut v = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        v.push(m[(j, j)]);
        for i in j + 1..n {
            v.push(std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]));
        }
    }
    DVector::from_vec(v)
}

pub fn smat(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut it = v.iter();
    for j in 0..n {
        m[(j, j)] = *it.next().unwrap();
        for i in j + 1..n {
            let x = *it.next().unwrap() / std::f64::consts::SQRT_2;
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    m
}

/// Nearest (Frobenius) symmetric matrix with all eigenvalues `≤ bound`.
pub fn clamp_above(m: &DMatrix<f64>, bound: f64) -> DMatrix<f64> {
    clamp(m, |l| l.min(bound))
}

/// Nearest (Frobenius) symmetric matrix with all eigenvalues `≥ bound`.
pub fn clamp_below(m: &DMatrix<f64>, bound: f64) -> DMatrix<f64> {
    clamp(m, |l| l.max(bound))
}

fn clamp(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose()))
}

#[derive(Debug, Clone)]
pub struct LmiProblem {
    pub sys: DaeSystem,
    pub gains: ObserverGains,
    pub aug: AugmentedSystem,
    pub mode: Mode,
    pub eps: f64,
    /// Whether `𝒫ᵀL̂ = 𝒦H` is imposed (then 𝒦 follows from 𝒫).
    pub consistency: bool,
    p_shape: (usize, usize),
    k_cols: usize,
    m1_dim: usize,
    m2_dim: usize,
    m1_const: DVector<f64>,
    m1_lin: DMatrix<f64>,
    m2_const: DVector<f64>,
    m2_lin: DMatrix<f64>,
    /// Orthonormal basis of the solution space of the equalities.
    null: DMatrix<f64>,
}

impl LmiProblem {
    pub fn n_vars(&self) -> usize {
        let (r, c) = self.p_shape;
        r * c + c * self.k_cols + 1
    }

    pub fn decode(&self, theta: &DVector<f64>) -> LmiCertificate {
        let (r, c) = self.p_shape;
        let p = DMatrix::from_column_slice(r, c, &theta.as_slice()[..r * c]);
        let mut k = DMatrix::zeros(c, c);
        let kk = self.k_cols;
        let tail = DMatrix::from_column_slice(c, kk, &theta.as_slice()[r * c..r * c + c * kk]);
        k.columns_mut(c - kk, kk).copy_from(&tail);
        LmiCertificate { p, k, delta: theta[theta.len() - 1] }
    }

    pub fn encode(&self, cert: &LmiCertificate) -> DVector<f64> {
        let (r, c) = self.p_shape;
        let kk = self.k_cols;
        let mut v = Vec::with_capacity(self.n_vars());
        v.extend_from_slice(cert.p.as_slice());
        v.extend_from_slice(cert.k.columns(c - kk, kk).into_owned().as_slice());
        v.push(cert.delta);
        debug_assert_eq!(v.len(), r * c + c * kk + 1);
        DVector::from_vec(v)
    }

    /// `(M1(θ), M2(θ))` through the stored affine maps.
    pub fn maps(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let m1 = smat(&(&self.m1_const + &self.m1_lin * theta), self.m1_dim);
        let m2 = smat(&(&self.m2_const + &self.m2_lin * theta), self.m2_dim);
        (m1, m2)
    }

    /// `(M1, M2)` evaluated directly from 𝒬, bypassing the affine maps.
    pub fn maps_direct(&self, theta: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (s, u) = subspaces(&self.aug)?;
        direct(&self.aug, &self.decode(theta), &s, &u)
    }

    pub fn is_trivial(&self) -> bool {
        self.m1_dim == 0 && self.m2_dim == 0
    }
}

/// Bases of 𝒱* and V̄* exactly as the checks compute them.
fn subspaces(aug: &AugmentedSystem) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s = wong_limits(&aug.bordered_pencil())?.v_star.basis().clone();
    let dummy = LmiCertificate {
        p: DMatrix::zeros(aug.cal_e.nrows(), aug.cal_e.ncols()),
        k: DMatrix::zeros(aug.size(), aug.size()),
        delta: 1.0,
    };
    let u = projected_margins(aug, &dummy, &s, &CheckOptions::default())?
        .vbar
        .basis()
        .clone();
    Ok((s, u))
}

fn direct(
    aug: &AugmentedSystem,
    cert: &LmiCertificate,
    s: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = build_q(aug, cert)?;
    let m1 = symmetrize(&(s.transpose() * q * s));
    let m2 = symmetrize(&(u.transpose() * aug.cal_e.transpose() * &cert.p * u));
    Ok((m1, m2))
}

/// Freeze the gains (hence 𝒱*) and build the affine data of the problem.
pub fn assemble(
    sys: &DaeSystem,
    gains: &ObserverGains,
    mode: Mode,
    eps: f64,
    consistency: bool,
) -> Result<LmiProblem> {
    let aug = build_augmented(sys, gains)?;
    let (s, u) = subspaces(&aug)?;
    let rows = aug.cal_e.nrows();
    let cols = aug.size();
    let kk = aug.k;
    let n_vars = rows * cols + cols * kk + 1;
    let mut prob = LmiProblem {
        sys: sys.clone(),
        gains: gains.clone(),
        aug,
        mode,
        eps,
        consistency,
        p_shape: (rows, cols),
        k_cols: kk,
        m1_dim: s.ncols(),
        m2_dim: u.ncols(),
        m1_const: DVector::zeros(0),
        m1_lin: DMatrix::zeros(0, 0),
        m2_const: DVector::zeros(0),
        m2_lin: DMatrix::zeros(0, 0),
        null: DMatrix::zeros(0, 0),
    };
    // The maps are affine, so the constant part is the value at θ = 0 and
    // each column is the change along one coordinate.
    let at = |theta: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
        let (m1, m2) = direct(&prob.aug, &prob.decode(theta), &s, &u)?;
        Ok((svec(&m1), svec(&m2)))
    };
    let zero = DVector::zeros(n_vars);
    let (c1, c2) = at(&zero)?;
    let mut l1 = DMatrix::zeros(c1.len(), n_vars);
    let mut l2 = DMatrix::zeros(c2.len(), n_vars);
    for i in 0..n_vars {
        let mut e = zero.clone();
        e[i] = 1.0;
        let (v1, v2) = at(&e)?;
        l1.set_column(i, &(v1 - &c1));
        l2.set_column(i, &(v2 - &c2));
    }
    prob.m1_const = c1;
    prob.m1_lin = l1;
    prob.m2_const = c2;
    prob.m2_lin = l2;

    // Equalities: Pᵀ𝓔 − 𝓔ᵀP = 0 and optionally PᵀL̂ − KH = 0, both linear.
    let lhat = prob.aug.lhat();
    let mut eq_rows: Vec<DVector<f64>> = Vec::new();
    let probe = |theta: &DVector<f64>| -> DVector<f64> {
        let c = prob.decode(theta);
        let sym = c.p.transpose() * &prob.aug.cal_e - prob.aug.cal_e.transpose() * &c.p;
        let mut v: Vec<f64> = sym.as_slice().to_vec();
        if consistency {
            let r = c.p.transpose() * &lhat - &c.k * &prob.aug.h;
            v.extend_from_slice(r.as_slice());
        }
        DVector::from_vec(v)
    };
    for i in 0..n_vars {
        let mut e = zero.clone();
        e[i] = 1.0;
        eq_rows.push(probe(&e));
    }
    let n_eq = eq_rows[0].len();
    let mut eq = DMatrix::zeros(n_eq, n_vars);
    for (i, c) in eq_rows.iter().enumerate() {
        eq.set_column(i, c);
    }
    prob.null = if n_eq == 0 {
        DMatrix::identity(n_vars, n_vars)
    } else {
        subspace::kernel_scaled(&eq, 1e-12, 1.0)?.basis().clone()
    };
    Ok(prob)
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub seed: u64,
    pub warm_start: Option<LmiCertificate>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iters: 5000,
            seed: 42,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Feasible,
    /// Out of iterations or stalled; not a proof of infeasibility.
    Indeterminate,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub verdict: Verdict,
    pub cert: Option<LmiCertificate>,
    pub report: Option<CertificateReport>,
    pub iterations: usize,
    /// Distance between the affine point and its cone projection.
    pub residual: f64,
    pub trace: Vec<f64>,
}

/// Condition ids the solver is responsible for.
fn lmi_ids(mode: Mode, consistency: bool) -> Vec<&'static str> {
    let mut ids = vec!["ep_symmetric", "projected_q_negative"];
    ids.push(match mode {
        Mode::Thm1 => "ep_positive_on_vbar",
        Mode::Thm2 => "ep_semidefinite_on_vbar",
    });
    if consistency {
        ids.push("gain_consistency");
    }
    if mode == Mode::Thm2 {
        ids.push("p_invertible");
    }
    ids
}

/// Independent verification by the synth checks at margin `ε/2`.
fn gate(prob: &LmiProblem, cert: &LmiCertificate) -> Option<CertificateReport> {
    let opts = CheckOptions {
        margin: Some(prob.eps / 2.0),
        sample_pairs: 0,
        ..CheckOptions::default()
    };
    let rep = match prob.mode {
        Mode::Thm1 => check_state_estimator(&prob.sys, &prob.gains, cert, &opts),
        Mode::Thm2 => check_square_estimator(&prob.sys, &prob.gains, cert, &opts),
    };
    let ok = lmi_ids(prob.mode, prob.consistency)
        .into_iter()
        .all(|id| rep.status_of(id) == Some(Status::Pass));
    ok.then_some(rep)
}

fn lower_bound(prob: &LmiProblem) -> f64 {
    match prob.mode {
        Mode::Thm1 => prob.eps,
        Mode::Thm2 => 0.0,
    }
}

/// Margins met by the affine point itself (cheap pre-test before the gate).
fn promising(prob: &LmiProblem, theta: &DVector<f64>) -> bool {
    let (m1, m2) = prob.maps(theta);
    let half = prob.eps / 2.0;
    let ok1 = m1.nrows() == 0 || *sym_eigvals(&m1).last().unwrap() < -half;
    let floor = match prob.mode {
        Mode::Thm1 => half,
        Mode::Thm2 => -half,
    };
    let ok2 = m2.nrows() == 0 || sym_eigvals(&m2)[0] > floor;
    ok1 && ok2 && theta[theta.len() - 1] > 0.0
}

pub fn solve_feasibility(prob: &LmiProblem, opts: &SolveOptions) -> Result<SolveOutcome> {
    let nv = prob.n_vars();
    let null = &prob.null;
    let nd = null.ncols();
    let b1 = &prob.m1_lin * null;
    let b2 = &prob.m2_lin * null;
    // Normal matrix of the affine projection in the reduced coordinates φ
    // (θ = N φ, NᵀN = I).
    let normal = DMatrix::identity(nd, nd) + b1.transpose() * &b1 + b2.transpose() * &b2;
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Singular("affine projection normal matrix".into()))?;

    let mut theta = match &opts.warm_start {
        Some(c) => {
            let cert_ok = c.p.shape() == prob.p_shape && c.k.shape() == (prob.p_shape.1, prob.p_shape.1);
            if !cert_ok {
                return Err(Error::Dimension("warm start does not match the problem".into()));
            }
            let theta = prob.encode(c);
            // A warm start that already passes is returned untouched rather
            // than via encode/decode rounding.
            if c.check_shapes(&prob.aug).is_ok() && promising(prob, &theta) {
                if let Some(rep) = gate(prob, c) {
                    return Ok(SolveOutcome {
                        verdict: Verdict::Feasible,
                        cert: Some(c.clone()),
                        report: Some(rep),
                        iterations: 1,
                        residual: 0.0,
                        trace: vec![0.0],
                    });
                }
            }
            theta
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut t = DVector::from_fn(nv, |_, _| rng.gen_range(-0.1..0.1));
            t[nv - 1] = 1.0;
            t
        }
    };
    let (mut y1, mut y2) = prob.maps(&theta);
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iters {
        // Affine projection of (θ, Y1, Y2).
        let rhs = null.transpose() * &theta
            + b1.transpose() * (svec(&y1) - &prob.m1_const)
            + b2.transpose() * (svec(&y2) - &prob.m2_const);
        let phi = chol.solve(&rhs);
        let ta = null * phi;
        let (a1, a2) = prob.maps(&ta);

        if promising(prob, &ta) {
            let cert = prob.decode(&ta);
            if let Some(rep) = gate(prob, &cert) {
                trace.push(0.0);
                return Ok(SolveOutcome {
                    verdict: Verdict::Feasible,
                    cert: Some(cert),
                    report: Some(rep),
                    iterations: it,
                    residual: 0.0,
                    trace,
                });
            }
        }

        // Cone projection of the reflected point, then the Douglas-Rachford
        // update of the iterate.
        let r_theta = &ta * 2.0 - &theta;
        let (r1, r2) = (&a1 * 2.0 - &y1, &a2 * 2.0 - &y2);
        let mut tk = r_theta;
        tk[nv - 1] = tk[nv - 1].max(prob.eps);
        let k1 = clamp_above(&r1, -prob.eps);
        let k2 = clamp_below(&r2, lower_bound(prob));
        residual = ((&tk - &ta).norm_squared()
            + (&k1 - &a1).norm_squared()
            + (&k2 - &a2).norm_squared())
        .sqrt();
        trace.push(residual);
        theta += tk - &ta;
        y1 += k1 - &a1;
        y2 += k2 - &a2;
        if residual < 1e-9 {
            // At the intersection without passing the gate: numerically stuck.
            break;
        }
    }
    Ok(SolveOutcome {
        verdict: Verdict::Indeterminate,
        cert: None,
        report: None,
        iterations: trace.len(),
        residual,
        trace,
    })
}

#[derive(Debug, Clone)]
pub struct GainSearchOutcome {
    pub gains: ObserverGains,
    pub cert: LmiCertificate,
    pub report: CertificateReport,
    pub rounds: usize,
}

/// Alternate between solving for `(𝒫, 𝒦, δ)` at the current gains and
/// re-extracting the gains from `(𝒫, 𝒦)`. Each round first tries the current
/// gains with the image condition imposed; the returned pair always passes
/// the full check with the subspace recomputed for the final gains.
pub fn iterate_gain_search(
    sys: &DaeSystem,
    initial: &ObserverGains,
    rounds: usize,
    mode: Mode,
    eps: f64,
    opts: &SolveOptions,
) -> Result<GainSearchOutcome> {
    let d = sys.validate()?;
    let mut gains = initial.clone();
    let mut log = Vec::new();
    let check_opts = CheckOptions { margin: Some(eps / 2.0), ..CheckOptions::default() };
    let full_check = |g: &ObserverGains, c: &LmiCertificate| match mode {
        Mode::Thm1 => check_state_estimator(sys, g, c, &check_opts),
        Mode::Thm2 => check_square_estimator(sys, g, c, &check_opts),
    };
    for round in 1..=rounds.max(1) {
        let fixed = assemble(sys, &gains, mode, eps, true)?;
        let out = solve_feasibility(&fixed, opts)?;
        if let Some(cert) = out.cert {
            let report = full_check(&gains, &cert);
            if report.passed() {
                return Ok(GainSearchOutcome { gains, cert, report, rounds: round });
            }
            log.push(format!("round {round}: certificate found but full check gave {}", report.overall.as_str()));
        } else {
            log.push(format!("round {round}: fixed gains, residual {:.3e}", out.residual));
        }
        if gains.k() == 0 {
            break;
        }
        let free = assemble(sys, &gains, mode, eps, false)?;
        let out = solve_feasibility(&free, &SolveOptions { warm_start: None, ..opts.clone() })?;
        let Some(cert) = out.cert else {
            log.push(format!("round {round}: free gains, residual {:.3e}", out.residual));
            continue;
        };
        match extract_gains(&cert, d.l, d.n, Some(&gains)) {
            Ok(g) => {
                let report = full_check(&g, &cert);
                if report.passed() {
                    return Ok(GainSearchOutcome { gains: g, cert, report, rounds: round });
                }
                gains = g;
            }
            Err(e) => log.push(format!("round {round}: {e}")),
        }
    }
    Err(Error::NoGain(format!("gain search did not converge: {}", log.join("; "))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::linalg::from_rows;

    #[test]
    fn svec_roundtrip_and_norm() {
        let m = from_rows(&[&[1.0, 2.0, -1.0], &[2.0, 0.5, 3.0], &[-1.0, 3.0, 4.0]]);
        let v = svec(&m);
        assert!((v.norm() - m.norm()).abs() < 1e-12);
        assert!((smat(&v, 3) - m).norm() < 1e-12);
    }

    #[test]
    fn clamp_matches_grid_oracle() {
        // Exhaustive search over symmetric 2×2 matrices on a grid.
        let m = from_rows(&[&[0.3, 0.8], &[0.8, -0.4]]);
        let p = clamp_above(&m, -0.1);
        assert!(*sym_eigvals(&p).last().unwrap() <= -0.1 + 1e-12);
        let dist = (&p - &m).norm();
        let mut best = f64::INFINITY;
        let steps = 160;
        for i in 0..=steps {
            for j in 0..=steps {
                for k in 0..=steps / 4 {
                    let a = -2.0 + 2.0 * i as f64 / steps as f64;
                    let c = -2.0 + 2.0 * j as f64 / steps as f64;
                    let b = -1.0 + 2.0 * k as f64 / (steps / 4) as f64;
                    let cand = from_rows(&[&[a, b], &[b, c]]);
                    if *sym_eigvals(&cand).last().unwrap() <= -0.1 {
                        best = best.min((cand - &m).norm());
                    }
                }
            }
        }
        assert!(dist <= best + 1e-12, "{dist} vs grid {best}");
        assert!(best - dist < 0.05);
    }

    #[test]
    fn affine_maps_match_direct_evaluation() {
        let ex = corpus::overdetermined();
        let prob = assemble(&ex.sys, &ex.gains, Mode::Thm1, 1e-6, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let t = DVector::from_fn(prob.n_vars(), |_, _| rng.gen_range(-1.0..1.0));
            let (a1, a2) = prob.maps(&t);
            let (d1, d2) = prob.maps_direct(&t).unwrap();
            assert!((a1 - d1).norm() < 1e-10 && (a2 - d2).norm() < 1e-10);
        }
    }

    #[test]
    fn warm_start_at_published_certificate() {
        let ex = corpus::overdetermined();
        let prob = assemble(&ex.sys, &ex.gains, Mode::Thm1, 1e-6, true).unwrap();
        let out = solve_feasibility(
            &prob,
            &SolveOptions { warm_start: Some(ex.cert.clone()), ..SolveOptions::default() },
        )
        .unwrap();
        assert_eq!(out.verdict, Verdict::Feasible);
        assert!(out.iterations <= 5);
    }

    #[test]
    fn cold_start_square_example() {
        let ex = corpus::square();
        let prob = assemble(&ex.sys, &ex.gains, Mode::Thm2, 1e-6, true).unwrap();
        let out = solve_feasibility(&prob, &SolveOptions::default()).unwrap();
        assert_eq!(out.verdict, Verdict::Feasible, "residual {}", out.residual);
        let cert = out.cert.unwrap();
        let rep = check_square_estimator(&ex.sys, &ex.gains, &cert, &CheckOptions::default());
        assert!(rep.passed(), "{rep}");
    }

    #[test]
    fn counterexample_is_indeterminate() {
        let ex = corpus::counterexample();
        let prob = assemble(&ex.sys, &ex.gains, Mode::Thm1, 1e-6, true).unwrap();
        let out = solve_feasibility(&prob, &SolveOptions { max_iters: 300, ..SolveOptions::default() }).unwrap();
        assert_eq!(out.verdict, Verdict::Indeterminate);
        assert!(out.cert.is_none());
    }

    #[test]
    fn rlc_gain_search_is_a_fixed_point() {
        let ex = corpus::rlc();
        let out = iterate_gain_search(&ex.sys, &ex.gains, 3, Mode::Thm2, 1e-6, &SolveOptions::default()).unwrap();
        assert_eq!(out.rounds, 1);
        assert_eq!(out.gains, ex.gains);
        let copy = corpus::rlc_copy();
        let out = iterate_gain_search(&copy.sys, &copy.gains, 1, Mode::Thm1, 1e-6, &SolveOptions::default()).unwrap();
        assert!(out.report.passed());
    }
}
