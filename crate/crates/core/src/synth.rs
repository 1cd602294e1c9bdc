//! Certificate checks for the estimator conditions: the subspace-restricted
//! matrix inequalities, the square index-one variant, the purely algebraic
//! case and the sampled hypotheses for an asymptotic observer. Also builds
//! the matrix 𝒬 and extracts gains from a certificate.
//!
//! Strict inequalities are decided with a margin `ε = 1e-7·scale` unless the
//! caller supplies one: a largest eigenvalue below `−ε` passes, above `ε`
//! fails, and anything in between is reported as indeterminate.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::expr::{estimate_lipschitz_margin, estimate_monotonicity_margin, Func, SampleBox};
use crate::linalg::{block, cond, norm2, pinv, singular_values, sym_eigvals, symmetrize, to_rows};
use crate::model::{build_augmented, necessary_rank_check, AugmentedSystem, DaeSystem, ObserverGains};
use crate::pencil::{qwf_transform, wong_limits, QwfTransform, PENCIL_TOL};
use crate::reduced::{Output, ReducedSystem};
use crate::subspace::{self, Subspace};

/// Relative margin for strict inequalities.
pub const MARGIN_REL: f64 = 1e-7;
/// Relative tolerance for the equality conditions.
pub const EQ_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LmiCertificate {
    /// `(l+p) × (n+k)`.
    pub p: DMatrix<f64>,
    /// `(n+k) × (n+k)`; only the last `k` columns are meaningful.
    pub k: DMatrix<f64>,
    pub delta: f64,
}

impl LmiCertificate {
    pub fn new(p: DMatrix<f64>, k: DMatrix<f64>, delta: f64) -> Result<Self> {
        let c = LmiCertificate { p, k, delta };
        c.check_values()?;
        Ok(c)
    }

    fn check_values(&self) -> Result<()> {
        crate::linalg::check_finite(&self.p, "P")?;
        crate::linalg::check_finite(&self.k, "K")?;
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::Domain(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }

    /// Shapes against the augmented system. Entries of K outside the last k
    /// columns must vanish.
    pub fn check_shapes(&self, aug: &AugmentedSystem) -> Result<()> {
        let (rows, cols) = (aug.cal_e.nrows(), aug.cal_e.ncols());
        if self.p.shape() != (rows, cols) {
            return Err(dim_err(format!("P is {:?}, expected {rows}x{cols}", self.p.shape())));
        }
        if self.k.shape() != (cols, cols) {
            return Err(dim_err(format!("K is {:?}, expected {cols}x{cols}", self.k.shape())));
        }
        let n = aug.dims.n;
        if self.k.columns(0, n).iter().any(|v| *v != 0.0) {
            return Err(dim_err("K has nonzero entries outside its last k columns"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Indeterminate,
    /// Held on every sample; not a proof.
    SampledOnly,
    NotPresent,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Indeterminate => "indeterminate",
            Status::SampledOnly => "sampled-only",
            Status::NotPresent => "not present",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionRecord {
    pub id: String,
    pub status: Status,
    pub margin: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct NamedSubspace {
    pub name: String,
    pub dim: usize,
    pub ambient: usize,
    pub basis: Vec<Vec<f64>>,
}

impl NamedSubspace {
    fn new(name: &str, s: &Subspace) -> Self {
        NamedSubspace {
            name: name.into(),
            dim: s.dim(),
            ambient: s.ambient(),
            basis: to_rows(s.basis()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub check: String,
    pub overall: Status,
    /// What the data certify when every condition holds.
    pub claim: Option<String>,
    pub conditions: Vec<ConditionRecord>,
    pub subspaces: Vec<NamedSubspace>,
    /// Decay rate of the Lyapunov function implied by the certificate.
    pub beta: Option<f64>,
    pub notes: Vec<String>,
}

impl CertificateReport {
    fn new(check: &str) -> Self {
        CertificateReport {
            check: check.into(),
            overall: Status::Pass,
            claim: None,
            conditions: Vec::new(),
            subspaces: Vec::new(),
            beta: None,
            notes: Vec::new(),
        }
    }

    fn push(&mut self, id: &str, status: Status, margin: Option<f64>, detail: impl Into<String>) {
        self.conditions.push(ConditionRecord {
            id: id.into(),
            status,
            margin,
            detail: detail.into(),
        });
    }

    fn finish(mut self, claim: &str) -> Self {
        let any = |s: Status| self.conditions.iter().any(|c| c.status == s);
        self.overall = if any(Status::Fail) {
            Status::Fail
        } else if any(Status::Indeterminate) {
            Status::Indeterminate
        } else {
            Status::Pass
        };
        if self.overall == Status::Pass {
            self.claim = Some(claim.into());
        }
        self
    }

    pub fn passed(&self) -> bool {
        self.overall == Status::Pass
    }

    pub fn condition(&self, id: &str) -> Option<&ConditionRecord> {
        self.conditions.iter().find(|c| c.id == id)
    }

    pub fn status_of(&self, id: &str) -> Option<Status> {
        self.condition(id).map(|c| c.status)
    }
}

impl fmt::Display for CertificateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "check: {}  overall: {}", self.check, self.overall.as_str())?;
        if let Some(c) = &self.claim {
            writeln!(f, "claim: {c}")?;
        }
        let w = self.conditions.iter().map(|c| c.id.len()).max().unwrap_or(0);
        for c in &self.conditions {
            let m = c.margin.map(|v| format!("{v:+.6e}")).unwrap_or_else(|| "-".into());
            writeln!(f, "  {:<w$}  {:<13}  {:>14}  {}", c.id, c.status.as_str(), m, c.detail)?;
        }
        for s in &self.subspaces {
            writeln!(f, "  subspace {}: dim {} in R^{}", s.name, s.dim, s.ambient)?;
        }
        if let Some(b) = self.beta {
            writeln!(f, "  beta (Lyapunov decay rate): {b:.6e}")?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}

/// Options shared by the checks.
#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Absolute margin for strict inequalities; `None` means `1e-7·scale`.
    pub margin: Option<f64>,
    pub sample_box: SampleBox,
    pub sample_pairs: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            margin: None,
            sample_box: SampleBox::default(),
            sample_pairs: 400,
            seed: 42,
        }
    }
}

impl CheckOptions {
    fn eps(&self, scale: f64) -> f64 {
        self.margin.unwrap_or(MARGIN_REL * scale)
    }
}

fn strict_negative(lmax: f64, eps: f64) -> Status {
    if lmax < -eps {
        Status::Pass
    } else if lmax > eps {
        Status::Fail
    } else {
        Status::Indeterminate
    }
}

fn strict_below_one(value: f64) -> Status {
    // Scalar conditions of the form `value < 1`, decided at the same margin.
    strict_negative(value - 1.0, MARGIN_REL)
}

/// The symmetric matrix 𝒬 of size `n+k+q`.
pub fn build_q(aug: &AugmentedSystem, cert: &LmiCertificate) -> Result<DMatrix<f64>> {
    cert.check_shapes(aug)?;
    let p = &cert.p;
    let d = cert.delta;
    let top_left = aug.a_hat.transpose() * p
        + p.transpose() * &aug.a_hat
        + aug.h.transpose() * cert.k.transpose()
        + &cert.k * &aug.h
        + aug.cal_f.transpose() * &aug.cal_f * d
        - &aug.cal_j * aug.mu;
    let top_right = p.transpose() * &aug.cal_b + &aug.theta_hat;
    let bottom = -(&aug.lambda * d);
    let q = block(&[
        &[&top_left, &top_right],
        &[&top_right.transpose(), &bottom],
    ]);
    Ok(symmetrize(&q))
}

/// Eigenvalue data of the two restricted inequalities for a given basis `s`
/// of 𝒱* (the bordered pencil's limit).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedMargins {
    /// Largest eigenvalue of `Sᵀ𝒬S`.
    pub q_max: f64,
    pub q_eps: f64,
    /// Smallest and largest eigenvalue of `𝓔ᵀ𝒫` restricted to V̄*.
    pub ep_min: f64,
    pub ep_max: f64,
    pub ep_eps: f64,
    /// `dim ker(𝓔 V̄)`: nonzero means `𝓔ᵀ𝒫` vanishes on part of V̄* for any 𝒫.
    pub ep_kernel_dim: usize,
    pub vbar: Subspace,
}

pub fn projected_margins(
    aug: &AugmentedSystem,
    cert: &LmiCertificate,
    s: &DMatrix<f64>,
    opts: &CheckOptions,
) -> Result<ProjectedMargins> {
    let q = build_q(aug, cert)?;
    let size = aug.size();
    let (q_max, q_eps) = if s.ncols() == 0 {
        (f64::NEG_INFINITY, 0.0)
    } else {
        let m1 = symmetrize(&(s.transpose() * &q * s));
        (*sym_eigvals(&m1).last().unwrap(), opts.eps(norm2(&q)))
    };
    let vbar = subspace::image_scaled(&s.rows(0, size).into_owned(), PENCIL_TOL, 1.0)?;
    let ep = aug.cal_e.transpose() * &cert.p;
    let (ep_min, ep_max, ep_kernel_dim) = if vbar.dim() == 0 {
        (f64::INFINITY, 0.0, 0)
    } else {
        let u = vbar.basis();
        let m2 = symmetrize(&(u.transpose() * &ep * u));
        let ev = sym_eigvals(&m2);
        let ker = subspace::kernel_scaled(&(&aug.cal_e * u), PENCIL_TOL, norm2(&aug.cal_e).max(1.0))?;
        (ev[0], *ev.last().unwrap(), ker.dim())
    };
    Ok(ProjectedMargins {
        q_max,
        q_eps,
        ep_min,
        ep_max,
        ep_eps: opts.eps(norm2(&ep)),
        ep_kernel_dim,
        vbar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EpMode {
    /// `𝓔ᵀ𝒫 ≻ 0` on V̄*.
    Strict,
    /// `𝓔ᵀ𝒫 ⪰ 0` on V̄*.
    Semidefinite,
}

/// Symmetry, the two restricted inequalities and the image condition.
fn subspace_conditions(
    aug: &AugmentedSystem,
    cert: &LmiCertificate,
    opts: &CheckOptions,
    mode: EpMode,
    rep: &mut CertificateReport,
) -> Result<()> {
    let p = &cert.p;
    let e = &aug.cal_e;

    let asym = norm2(&(p.transpose() * e - e.transpose() * p));
    let tol = EQ_TOL * (norm2(p) * norm2(e)).max(1.0);
    let st = if asym <= tol { Status::Pass } else { Status::Fail };
    rep.push("ep_symmetric", st, Some(asym), format!("|P^T E - E^T P| = {asym:.3e} (tol {tol:.1e})"));

    let wong = wong_limits(&aug.bordered_pencil())?;
    let s = wong.v_star.basis().clone();
    let pm = projected_margins(aug, cert, &s, opts)?;
    rep.subspaces.push(NamedSubspace::new("V*", &wong.v_star));
    rep.subspaces.push(NamedSubspace::new("Vbar*", &pm.vbar));

    if s.ncols() == 0 {
        rep.push("projected_q_negative", Status::Pass, None, "V* = {0}, vacuous");
    } else {
        let st = strict_negative(pm.q_max, pm.q_eps);
        rep.push(
            "projected_q_negative",
            st,
            Some(pm.q_max),
            format!("lambda_max(S^T Q S) = {:.6e} (eps {:.1e})", pm.q_max, pm.q_eps),
        );
    }

    match mode {
        EpMode::Strict => {
            if pm.vbar.dim() == 0 {
                rep.push("ep_positive_on_vbar", Status::Pass, None, "Vbar* = {0}, vacuous");
            } else if pm.ep_kernel_dim > 0 {
                rep.push(
                    "ep_positive_on_vbar",
                    Status::Fail,
                    Some(pm.ep_min),
                    format!(
                        "E Vbar is rank deficient (kernel dimension {}): E^T P vanishes there for every P",
                        pm.ep_kernel_dim
                    ),
                );
            } else {
                let st = strict_negative(-pm.ep_min, pm.ep_eps);
                rep.push(
                    "ep_positive_on_vbar",
                    st,
                    Some(pm.ep_min),
                    format!("lambda_min(Vbar^T E^T P Vbar) = {:.6e} (eps {:.1e})", pm.ep_min, pm.ep_eps),
                );
            }
        }
        EpMode::Semidefinite => {
            if pm.vbar.dim() == 0 {
                rep.push("ep_semidefinite_on_vbar", Status::Pass, None, "Vbar* = {0}, vacuous");
            } else {
                let st = if pm.ep_min >= -pm.ep_eps { Status::Pass } else { Status::Fail };
                rep.push(
                    "ep_semidefinite_on_vbar",
                    st,
                    Some(pm.ep_min),
                    format!("lambda_min(Vbar^T E^T P Vbar) = {:.6e} (tol {:.1e})", pm.ep_min, pm.ep_eps),
                );
            }
        }
    }

    let lhat = aug.lhat();
    let kh = &cert.k * &aug.h;
    let resid = norm2(&(p.transpose() * &lhat - &kh));
    let tol = EQ_TOL * (norm2(p) * norm2(&lhat) + norm2(&cert.k)).max(1.0);
    let st = if resid <= tol { Status::Pass } else { Status::Fail };
    rep.push("gain_consistency", st, Some(resid), format!("|P^T L_hat - K H| = {resid:.3e} (tol {tol:.1e})"));

    let q_full = build_q(aug, cert)?;
    let full_max = *sym_eigvals(&q_full).last().unwrap_or(&f64::NEG_INFINITY);
    rep.notes.push(format!("lambda_max(Q) on the whole space = {full_max:.6e}"));
    if s.ncols() > 0 && pm.q_max < 0.0 && pm.ep_max > 0.0 && pm.ep_min > 0.0 {
        rep.beta = Some(-pm.q_max / pm.ep_max);
    }
    Ok(())
}

/// Lipschitz and monotonicity hypotheses on the nonlinearities, by sampling.
fn sampled_hypotheses(sys: &DaeSystem, opts: &CheckOptions, rep: &mut CertificateReport) {
    let d = sys.dims();
    if d.q_l > 0 {
        match estimate_lipschitz_margin(&sys.f_l, &sys.f, &opts.sample_box, opts.sample_pairs, opts.seed) {
            Ok(est) => {
                let st = if est.refuted { Status::Fail } else { Status::SampledOnly };
                let detail = if est.degenerate {
                    "f_L changes along ker F".to_string()
                } else {
                    format!("worst |df|/|F dx| = {:.6} over {} pairs", est.worst_ratio, est.samples)
                };
                rep.push("lipschitz_certificate", st, Some(est.worst_ratio), detail);
            }
            Err(e) => rep.push("lipschitz_certificate", Status::Indeterminate, None, e.to_string()),
        }
    }
    if d.q_m > 0 {
        match estimate_monotonicity_margin(
            &sys.f_m,
            &sys.theta,
            sys.mu,
            &opts.sample_box,
            opts.sample_pairs,
            opts.seed,
        ) {
            Ok(est) => {
                let st = if est.refuted { Status::Fail } else { Status::SampledOnly };
                rep.push(
                    "monotonicity_certificate",
                    st,
                    Some(est.worst_slack),
                    format!("worst slack {:.6e} over {} pairs", est.worst_slack, est.samples),
                );
            }
            Err(e) => rep.push("monotonicity_certificate", Status::Indeterminate, None, e.to_string()),
        }
    }
}

/// Common preamble: data validation, augmentation and certificate shapes.
fn prepare(
    sys: &DaeSystem,
    gains: &ObserverGains,
    cert: &LmiCertificate,
    rep: &mut CertificateReport,
) -> Option<AugmentedSystem> {
    let aug = match build_augmented(sys, gains) {
        Ok(a) => a,
        Err(e) => {
            rep.push("system_data", Status::Fail, None, e.to_string());
            return None;
        }
    };
    if let Err(e) = cert.check_values().and_then(|_| cert.check_shapes(&aug)) {
        rep.push("certificate_shape", Status::Fail, None, e.to_string());
        return None;
    }
    Some(aug)
}

fn rank_condition(sys: &DaeSystem, rep: &mut CertificateReport) -> bool {
    let d = sys.dims();
    if d.n > d.l + d.p {
        rep.push(
            "n_le_l_plus_p",
            Status::Fail,
            None,
            format!("n = {} exceeds l + p = {}: no state estimator exists", d.n, d.l + d.p),
        );
        return false;
    }
    rep.push("n_le_l_plus_p", Status::Pass, None, format!("n = {} <= l + p = {}", d.n, d.l + d.p));
    match necessary_rank_check(sys) {
        Ok(rc) if rc.holds() => {
            rep.push("rank_condition", Status::Pass, None, format!("rk [sE - A; C] = {}", rc.rational_rank));
            true
        }
        Ok(rc) => {
            rep.push(
                "rank_condition",
                Status::Fail,
                None,
                format!("rk [sE - A; C] = {} < n = {}", rc.rational_rank, rc.n),
            );
            false
        }
        Err(e) => {
            rep.push("rank_condition", Status::Fail, None, e.to_string());
            false
        }
    }
}

/// Subspace-restricted inequalities with `𝓔ᵀ𝒫` positive definite on V̄*.
pub fn check_state_estimator(
    sys: &DaeSystem,
    gains: &ObserverGains,
    cert: &LmiCertificate,
    opts: &CheckOptions,
) -> CertificateReport {
    let mut rep = CertificateReport::new("state_estimator");
    if let Err(e) = sys.validate() {
        rep.push("system_data", Status::Fail, None, e.to_string());
        return rep.finish("");
    }
    if !rank_condition(sys, &mut rep) {
        return rep.finish("");
    }
    let Some(aug) = prepare(sys, gains, cert, &mut rep) else {
        return rep.finish("");
    };
    sampled_hypotheses(sys, opts, &mut rep);
    if let Err(e) = subspace_conditions(&aug, cert, opts, EpMode::Strict, &mut rep) {
        rep.push("subspace_computation", Status::Indeterminate, None, e.to_string());
    }
    rep.finish("state estimator")
}

/// Solve `PᵀL̂ = KH` in least squares. When `Pᵀ` lacks full column rank the
/// solution closest to `hint` is returned (minimum norm without one).
pub fn extract_gains(
    cert: &LmiCertificate,
    l: usize,
    n: usize,
    hint: Option<&ObserverGains>,
) -> Result<ObserverGains> {
    let (rows, cols) = cert.p.shape();
    if rows < l || cols < n || cert.k.shape() != (cols, cols) {
        return Err(dim_err(format!(
            "certificate shapes P {:?}, K {:?} do not fit l = {l}, n = {n}",
            cert.p.shape(),
            cert.k.shape()
        )));
    }
    let k = cols - n;
    let p = rows - l;
    let pt = cert.p.transpose();
    let mut kh = cert.k.clone();
    kh.columns_mut(0, n).fill(0.0);
    let pinv_pt = pinv(&pt, PENCIL_TOL);
    let mut lhat = &pinv_pt * &kh;
    if let Some(h) = hint {
        if h.l1.shape() != (l, k) || h.l2.shape() != (p, k) {
            return Err(dim_err("gain hint does not match the certificate"));
        }
        let free = DMatrix::identity(rows, rows) - &pinv_pt * &pt;
        lhat += free * h.embed(n);
    }
    lhat.columns_mut(0, n).fill(0.0);
    let resid = norm2(&(&pt * &lhat - &kh));
    let tol = 1e-8 * (norm2(&pt) * norm2(&lhat) + norm2(&kh)).max(1.0);
    if resid > tol {
        return Err(Error::NoGain(format!(
            "im K H is not contained in im P^T (residual {resid:.3e})"
        )));
    }
    ObserverGains::from_lhat(&lhat, l, n)
}

fn gl_gm_from(sys: &DaeSystem, qwf: &QwfTransform) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = sys.dims();
    let r = qwf.r;
    let size = qwf.n.ncols();
    let tail = qwf.m.rows(r, size - r).into_owned();
    let w_top = qwf.n.view((0, r), (d.n, size - r)).into_owned();
    let pad = |b: &DMatrix<f64>| crate::linalg::vcat(b, &DMatrix::zeros(d.p, b.ncols()));
    let gl = -(&w_top * &tail * pad(&sys.b_l));
    let gm = -(&w_top * &tail * pad(&sys.b_m));
    (gl, gm)
}

/// `G_L` and `G_M` of the gain-installed index-one pencil.
pub fn compute_gl_gm(sys: &DaeSystem, gains: &ObserverGains) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let aug = build_augmented(sys, gains)?;
    let qwf = qwf_transform(&aug.pencil())?;
    Ok(gl_gm_from(sys, &qwf))
}

/// Quantities entering the monotone and mixed bounds.
#[derive(Debug, Clone)]
pub struct GainBounds {
    pub gl: DMatrix<f64>,
    pub gm: DMatrix<f64>,
    pub fgl_norm: f64,
    /// `Θ (J G_M)⁻¹`, absent when `J G_M` is singular.
    pub theta_tilde: Option<DMatrix<f64>>,
    pub gamma_max: Option<f64>,
    /// Left-hand side of the mixed bound; `None` if it cannot be formed.
    pub mixed_value: Option<f64>,
    pub ker_j_in_ker_f: bool,
}

pub fn gain_bounds(sys: &DaeSystem, gl: DMatrix<f64>, gm: DMatrix<f64>) -> Result<GainBounds> {
    let d = sys.dims();
    let fgl_norm = norm2(&(&sys.f * &gl));
    let jgm = &sys.j * &gm;
    let theta_tilde = if d.q_m > 0 && cond(&jgm) <= 1e12 {
        jgm.clone().try_inverse().map(|inv| &sys.theta * inv)
    } else {
        None
    };
    let gamma = theta_tilde.as_ref().map(|t| t + t.transpose());
    let gamma_max = gamma.as_ref().map(|g| *sym_eigvals(g).last().unwrap());

    let ker_j = subspace::kernel_scaled(&sys.j, PENCIL_TOL, norm2(&sys.j).max(1.0))?;
    let ker_j_in_ker_f =
        ker_j.dim() == 0 || norm2(&(&sys.f * ker_j.basis())) <= 1e-9 * norm2(&sys.f).max(1.0);

    let mixed_value = match (&theta_tilde, &gamma, gamma_max) {
        (Some(tt), Some(g), Some(gmax)) if ker_j_in_ker_f && sys.mu > gmax && fgl_norm < 1.0 => {
            let alpha = norm2(&(&sys.f * pinv(&sys.j, PENCIL_TOL)));
            let shifted = g - DMatrix::identity(d.q_m, d.q_m) * sys.mu;
            let inv = shifted
                .try_inverse()
                .ok_or_else(|| Error::Singular("Gamma - mu I".into()))?;
            let s = symmetrize(&(tt.transpose() * &inv * tt));
            let smax = *sym_eigvals(&s).last().unwrap();
            let xi = &inv * (tt.transpose() - DMatrix::identity(d.q_m, d.q_m) * sys.mu);
            let jgl = norm2(&(&sys.j * &gl));
            Some(alpha * jgl / (1.0 - fgl_norm) * ((smax.max(0.0) / (sys.mu - gmax)).sqrt() + norm2(&xi)))
        }
        _ => None,
    };
    Ok(GainBounds {
        gl,
        gm,
        fgl_norm,
        theta_tilde,
        gamma_max,
        mixed_value,
        ker_j_in_ker_f,
    })
}

/// Square augmentation, invertible 𝒫, `𝓔ᵀ𝒫 ⪰ 0` on V̄*, index-one pencil and
/// the gain bounds on `G_L`, `G_M`.
pub fn check_square_estimator(
    sys: &DaeSystem,
    gains: &ObserverGains,
    cert: &LmiCertificate,
    opts: &CheckOptions,
) -> CertificateReport {
    let mut rep = CertificateReport::new("square_estimator");
    let d = match sys.validate() {
        Ok(d) => d,
        Err(e) => {
            rep.push("system_data", Status::Fail, None, e.to_string());
            return rep.finish("");
        }
    };
    let k = gains.k();
    match d.square_k() {
        Some(sk) if sk == k => {
            rep.push("square_augmentation", Status::Pass, None, format!("k = l + p - n = {k}"));
        }
        _ => {
            rep.push(
                "square_augmentation",
                Status::Fail,
                None,
                format!("k = {k} but the condition needs k = l + p - n ({} + {} - {})", d.l, d.p, d.n),
            );
            rep.push(
                "pencil_regular_index_le1",
                Status::Fail,
                None,
                "augmented pencil is not square, hence not regular",
            );
            return rep.finish("");
        }
    }
    let Some(aug) = prepare(sys, gains, cert, &mut rep) else {
        return rep.finish("");
    };

    let sv = singular_values(&cert.p);
    let smin = sv.last().copied().unwrap_or(0.0);
    let c = cond(&cert.p);
    let st = if sv.is_empty() || c <= 1e12 { Status::Pass } else { Status::Fail };
    rep.push("p_invertible", st, Some(smin), format!("sigma_min(P) = {smin:.6e}, cond {c:.3e}"));

    sampled_hypotheses(sys, opts, &mut rep);
    if let Err(e) = subspace_conditions(&aug, cert, opts, EpMode::Semidefinite, &mut rep) {
        rep.push("subspace_computation", Status::Indeterminate, None, e.to_string());
    }

    let qwf = qwf_transform(&aug.pencil());
    let qwf = match qwf {
        Ok(q) => {
            rep.push(
                "pencil_regular_index_le1",
                Status::Pass,
                None,
                format!("regular, index {}", q.wong.l_star),
            );
            q
        }
        Err(e) => {
            rep.push("pencil_regular_index_le1", Status::Fail, None, e.to_string());
            let skip = |rep: &mut CertificateReport, id: &str, absent: bool| {
                if absent {
                    rep.push(id, Status::NotPresent, None, "nonlinearity class absent");
                } else {
                    rep.push(id, Status::Indeterminate, None, "not evaluated: needs a regular index-one pencil");
                }
            };
            skip(&mut rep, "lipschitz_gain_contraction", d.q_l == 0);
            skip(&mut rep, "monotone_gain_bound", d.q_m == 0);
            skip(&mut rep, "mixed_gain_bound", d.q_l == 0 || d.q_m == 0);
            return rep.finish("");
        }
    };
    let (gl, gm) = gl_gm_from(sys, &qwf);
    let gb = match gain_bounds(sys, gl, gm) {
        Ok(g) => g,
        Err(e) => {
            rep.push("gain_bounds", Status::Indeterminate, None, e.to_string());
            return rep.finish("");
        }
    };

    if d.q_l == 0 {
        rep.push("lipschitz_gain_contraction", Status::NotPresent, None, "no Lipschitz part");
    } else {
        rep.push(
            "lipschitz_gain_contraction",
            strict_below_one(gb.fgl_norm),
            Some(gb.fgl_norm),
            format!("|F G_L| = {:.6e} < 1", gb.fgl_norm),
        );
    }

    if d.q_m == 0 {
        rep.push("monotone_gain_bound", Status::NotPresent, None, "no monotone part");
    } else {
        match gb.gamma_max {
            None => rep.push("monotone_gain_bound", Status::Fail, None, "J G_M is singular"),
            Some(gmax) => {
                let eps = MARGIN_REL * gmax.abs().max(sys.mu.abs()).max(1.0);
                rep.push(
                    "monotone_gain_bound",
                    strict_negative(gmax - sys.mu, eps),
                    Some(gmax),
                    format!("lambda_max(Gamma) = {gmax:.6e} < mu = {}", sys.mu),
                );
            }
        }
    }

    if d.q_l == 0 || d.q_m == 0 {
        rep.push("mixed_gain_bound", Status::NotPresent, None, "needs both nonlinearity classes");
    } else if !gb.ker_j_in_ker_f {
        rep.push("mixed_gain_bound", Status::Fail, None, "ker J is not contained in ker F");
    } else {
        match gb.mixed_value {
            Some(v) => rep.push(
                "mixed_gain_bound",
                strict_below_one(v),
                Some(v),
                format!("mixed bound value {v:.6e} < 1"),
            ),
            None => rep.push(
                "mixed_gain_bound",
                Status::Fail,
                None,
                "not defined: needs J G_M invertible, mu > lambda_max(Gamma) and |F G_L| < 1",
            ),
        }
    }
    rep.finish("state estimator")
}

/// The purely algebraic case `E = 0`: the restricted inequality collapses to
/// a `q × q` eigenvalue test that does not involve 𝒫.
pub fn check_algebraic_case(
    sys: &DaeSystem,
    gains: &ObserverGains,
    cert: &LmiCertificate,
    opts: &CheckOptions,
) -> CertificateReport {
    let mut rep = CertificateReport::new("algebraic_case");
    if let Err(e) = sys.validate() {
        rep.push("system_data", Status::Fail, None, e.to_string());
        return rep.finish("");
    }
    if sys.e.iter().any(|v| *v != 0.0) {
        rep.push("e_zero", Status::Fail, None, "E is not the zero matrix");
        return rep.finish("");
    }
    let Some(aug) = prepare(sys, gains, cert, &mut rep) else {
        return rep.finish("");
    };
    let ca = &aug.cal_a;
    let inv = if ca.is_square() && cond(ca) <= 1e12 {
        ca.clone().try_inverse()
    } else {
        None
    };
    let Some(inv) = inv else {
        rep.push("cal_a_invertible", Status::Fail, None, "augmented A is singular or not square");
        return rep.finish("");
    };
    rep.push("cal_a_invertible", Status::Pass, Some(cond(ca)), "condition number");
    let x = inv * &aug.cal_b;
    let fx = &aug.cal_f * &x;
    let r = (fx.transpose() * &fx - &aug.lambda) * cert.delta
        - x.transpose() * &aug.theta_hat
        - aug.theta_hat.transpose() * &x
        - x.transpose() * &aug.cal_j * &x * sys.mu;
    let r = symmetrize(&r);
    if r.nrows() == 0 {
        rep.push("reduced_q_negative", Status::Pass, None, "no nonlinearity, vacuous");
        return rep.finish("state estimator");
    }
    let lmax = *sym_eigvals(&r).last().unwrap();
    let eps = opts.eps(norm2(&r));
    rep.push(
        "reduced_q_negative",
        strict_negative(lmax, eps),
        Some(lmax),
        format!("lambda_max of the reduced matrix = {lmax:.6e} (eps {eps:.1e})"),
    );
    rep.finish("state estimator")
}

/// How the sampled conditions of the asymptotic-observer check are probed.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub sample_box: SampleBox,
    pub samples: usize,
    pub seed: u64,
    /// Constant `c` of the growth bound `ω(t) = c(1 + t)`; fitted when absent.
    pub omega_c: Option<f64>,
    /// The user declared bounded state/input/output domains.
    pub bounded_domain: bool,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            sample_box: SampleBox::default(),
            samples: 200,
            seed: 42,
            omega_c: None,
            bounded_domain: false,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, n: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    (0..n)
        .map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo })
        .collect()
}

/// The square-estimator conditions plus sampled checks of the hypotheses
/// that make the estimator an asymptotic observer. Global hypotheses are
/// never reported as proven.
pub fn check_asymptotic_observer(
    sys: &DaeSystem,
    gains: &ObserverGains,
    cert: &LmiCertificate,
    plan: &SamplingPlan,
    opts: &CheckOptions,
) -> CertificateReport {
    let base = check_square_estimator(sys, gains, cert, opts);
    let mut rep = CertificateReport::new("asymptotic_observer");
    rep.conditions = base.conditions.clone();
    rep.subspaces = base.subspaces.clone();
    rep.beta = base.beta;
    rep.notes = base.notes.clone();
    if !base.passed() {
        rep.notes.push("square-estimator conditions not met; sampled checks skipped".into());
        return rep.finish("");
    }
    let red = match ReducedSystem::new(sys, gains) {
        Ok(r) => r,
        Err(e) => {
            rep.push("reduction", Status::Fail, None, e.to_string());
            return rep.finish("");
        }
    };
    let d = sys.dims();
    let bx = plan.sample_box;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let (mut roots_found, mut diverged, mut domain, mut singular, mut distinct, mut growth_viol) =
        (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
    let mut worst_inv_cond = f64::INFINITY;
    let mut c_fit: f64 = 0.0;
    for _ in 0..plan.samples {
        let x1 = DVector::from_vec(draw(&mut rng, red.r(), bx.x));
        let u = draw(&mut rng, d.m, bx.u);
        let y = draw(&mut rng, d.p, bx.y);
        let starts = [
            DVector::zeros(red.x2_dim()),
            DVector::from_vec(draw(&mut rng, red.x2_dim(), bx.x)),
        ];
        let mut roots: Vec<DVector<f64>> = Vec::new();
        for s in &starts {
            match red.solve_x2(&x1, s, &u, Output::External(&y)) {
                Ok(o) => roots.push(o.x2),
                Err(Error::Newton(_)) => diverged += 1,
                Err(_) => domain += 1,
            }
        }
        if roots.len() == 2 && (&roots[0] - &roots[1]).norm() > 1e-6 * (1.0 + roots[0].norm()) {
            distinct += 1;
        }
        let Some(x2) = roots.first() else { continue };
        roots_found += 1;
        let out = Output::External(&y);
        let (Ok((_, jx2)), Ok(jx1)) = (red.residual(&x1, x2, &u, out), red.residual_x1(&x1, x2, &u, out))
        else {
            domain += 1;
            continue;
        };
        let c = cond(&jx2);
        worst_inv_cond = worst_inv_cond.min(1.0 / c);
        if !(c <= 1e12) {
            singular += 1;
            continue;
        }
        let xi = red.xi(&x1, x2);
        let Ok((gu, gy)) = red.g_inputs(&xi, &u, &y) else {
            domain += 1;
            continue;
        };
        let dg = crate::linalg::hcat(&crate::linalg::hcat(&jx1, &(&red.b2 * gu)), &(&red.b2 * gy));
        let inv = jx2.try_inverse().expect("conditioned");
        let ratio = norm2(&inv) * norm2(&dg);
        let bound = 1.0 + x2.norm();
        c_fit = c_fit.max(ratio / bound);
        if let Some(cu) = plan.omega_c {
            if ratio > cu * bound * (1.0 + 1e-12) {
                growth_viol += 1;
            }
        }
    }

    let tally = format!(
        "{roots_found} of {} samples solved, {diverged} Newton failures, {domain} domain errors",
        plan.samples
    );
    let st = if singular > 0 {
        Status::Fail
    } else if diverged > 0 || roots_found == 0 {
        Status::Indeterminate
    } else {
        Status::SampledOnly
    };
    rep.push(
        "x2_jacobian_invertible",
        st,
        Some(worst_inv_cond),
        format!("{singular} singular Jacobians; {tally}"),
    );

    let st = if growth_viol > 0 {
        Status::Fail
    } else if roots_found == 0 {
        Status::Indeterminate
    } else {
        Status::SampledOnly
    };
    let detail = match plan.omega_c {
        Some(cu) => format!("omega(t) = {cu}(1+t) exceeded at {growth_viol} samples; smallest fitting c = {c_fit:.6e}"),
        None => format!("omega(t) = c(1+t) with fitted c = {c_fit:.6e}"),
    };
    rep.push("growth_bound", st, Some(c_fit), detail);

    let st = if distinct > 0 { Status::Fail } else { Status::SampledOnly };
    rep.push(
        "zero_set_connected",
        st,
        None,
        if distinct > 0 {
            format!("two distinct roots of G found at {distinct} samples")
        } else {
            "assumed; one root per sample from two Newton starts".to_string()
        },
    );

    let flagged = [Func::Abs, Func::Sqrt, Func::Log, Func::Sign];
    if sys.f_m.uses_any(&flagged) || sys.f_l.uses_any(&flagged) || sys.h.uses_any(&flagged) {
        rep.push(
            "fm_locally_lipschitz",
            Status::Indeterminate,
            None,
            "flagged: expression uses abs, sqrt, log or sign",
        );
    } else {
        rep.push("fm_locally_lipschitz", Status::Pass, None, "smooth primitives only");
    }
    if plan.bounded_domain {
        rep.push(
            "unbounded_domain",
            Status::Indeterminate,
            None,
            "bounded domains declared; the conditions assume the whole spaces",
        );
    }
    rep.finish("asymptotic observer (global hypotheses verified by sampling only)")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::expr::VectorFunction;
    use crate::linalg::from_rows;

    fn opts() -> CheckOptions {
        CheckOptions { sample_pairs: 200, ..CheckOptions::default() }
    }

    #[test]
    fn q_of_zero_certificate() {
        let mut ex = corpus::overdetermined();
        ex.sys.mu = 0.0;
        ex.sys.theta = DMatrix::zeros(1, 1);
        ex.sys.f = DMatrix::zeros(1, 2);
        let aug = build_augmented(&ex.sys, &ex.gains).unwrap();
        let cert = LmiCertificate::new(DMatrix::zeros(5, 4), DMatrix::zeros(4, 4), 1.0).unwrap();
        let q = build_q(&aug, &cert).unwrap();
        let mut expect = DMatrix::zeros(6, 6);
        expect[(4, 4)] = -1.0;
        assert_eq!(q, expect);
    }

    #[test]
    fn overdetermined_passes_state_estimator() {
        let ex = corpus::overdetermined();
        let rep = check_state_estimator(&ex.sys, &ex.gains, &ex.cert, &opts());
        assert!(rep.passed(), "{rep}");
        assert!(rep.condition("projected_q_negative").unwrap().margin.unwrap() < 0.0);
        assert!(rep.condition("ep_positive_on_vbar").unwrap().margin.unwrap() > 0.0);
        assert!(rep.beta.unwrap() > 0.0);
        // Negative definiteness fails on the whole space.
        let aug = build_augmented(&ex.sys, &ex.gains).unwrap();
        let q = build_q(&aug, &ex.cert).unwrap();
        assert!(*sym_eigvals(&q).last().unwrap() >= 0.0);
        // Published V*.
        let published = subspace::image(&corpus::overdetermined_vstar(), 1e-12).unwrap();
        let vs = wong_limits(&aug.bordered_pencil()).unwrap().v_star;
        assert!(subspace::projector_distance(&vs, &published) <= 1e-8);
    }

    #[test]
    fn overdetermined_fails_square_conditions() {
        let ex = corpus::overdetermined();
        let rep = check_square_estimator(&ex.sys, &ex.gains, &ex.cert, &opts());
        assert_eq!(rep.overall, Status::Fail);
        assert_eq!(rep.status_of("pencil_regular_index_le1"), Some(Status::Fail));
    }

    #[test]
    fn gains_from_certificate() {
        let ex = corpus::overdetermined();
        let g = extract_gains(&ex.cert, 4, 2, Some(&ex.gains)).unwrap();
        assert!((&g.l1 - &ex.gains.l1).norm() < 1e-12 && (&g.l2 - &ex.gains.l2).norm() < 1e-12);
        // Without a hint the minimum-norm solution still satisfies PᵀL̂ = KH.
        let g0 = extract_gains(&ex.cert, 4, 2, None).unwrap();
        let lhat = g0.embed(2);
        let mut kh = ex.cert.k.clone();
        kh.columns_mut(0, 2).fill(0.0);
        assert!((ex.cert.p.transpose() * lhat - kh).norm() < 1e-12);
        // KH = 0 gives zero gains.
        let zero = LmiCertificate::new(ex.cert.p.clone(), DMatrix::zeros(4, 4), 1.0).unwrap();
        let g = extract_gains(&zero, 4, 2, None).unwrap();
        assert_eq!(g.l1.norm() + g.l2.norm(), 0.0);
    }

    #[test]
    fn image_condition_failure_is_reported() {
        let ex = corpus::counterexample();
        // Pᵀ = [[1,0],[0,0],[0,0]]: a K with a nonzero second row is out of reach.
        let mut k = DMatrix::zeros(3, 3);
        k[(1, 2)] = 1.0;
        let cert = LmiCertificate::new(ex.cert.p.clone(), k, 1.0).unwrap();
        assert!(matches!(extract_gains(&cert, 1, 1, None), Err(Error::NoGain(_))));
    }

    #[test]
    fn square_example_quantities() {
        let ex = corpus::square();
        let (gl, gm) = compute_gl_gm(&ex.sys, &ex.gains).unwrap();
        let v = 1.0 / 15.0;
        assert!((gl - from_rows(&[&[v], &[v]])).norm() < 1e-10);
        assert!((&gm + from_rows(&[&[v], &[v]])).norm() < 1e-10);
        let gb = gain_bounds(&ex.sys, compute_gl_gm(&ex.sys, &ex.gains).unwrap().0, gm).unwrap();
        assert!((gb.gamma_max.unwrap() + 15.0).abs() < 1e-9);
        assert!((gb.mixed_value.unwrap() - 19.0 / 221.0).abs() < 1e-12);

        let rep = check_square_estimator(&ex.sys, &ex.gains, &ex.cert, &opts());
        assert!(rep.passed(), "{rep}");
        for id in [
            "ep_semidefinite_on_vbar",
            "pencil_regular_index_le1",
            "lipschitz_gain_contraction",
            "monotone_gain_bound",
            "mixed_gain_bound",
        ] {
            assert_eq!(rep.status_of(id), Some(Status::Pass), "{id}");
        }
        let rep1 = check_state_estimator(&ex.sys, &ex.gains, &ex.cert, &opts());
        assert_eq!(rep1.status_of("ep_positive_on_vbar"), Some(Status::Fail), "{rep1}");
    }

    #[test]
    fn counterexample_fails_structurally() {
        let ex = corpus::counterexample();
        let rep = check_state_estimator(&ex.sys, &ex.gains, &ex.cert, &opts());
        let c = rep.condition("ep_positive_on_vbar").unwrap();
        assert_eq!(c.status, Status::Fail);
        assert!(c.detail.contains("rank deficient"));
        let vbar = rep.subspaces.iter().find(|s| s.name == "Vbar*").unwrap();
        let got = DMatrix::from_row_slice(3, vbar.dim, &vbar.basis.concat());
        let want = from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let (a, b) = (
            subspace::image(&got, 1e-12).unwrap(),
            subspace::image(&want, 1e-12).unwrap(),
        );
        assert!(subspace::equals(&a, &b, 1e-10));
    }

    #[test]
    fn rlc_certificates() {
        let copy = corpus::rlc_copy();
        let rep = check_state_estimator(&copy.sys, &copy.gains, &copy.cert, &opts());
        assert!(rep.passed(), "{rep}");
        let ex = corpus::rlc();
        let rep = check_square_estimator(&ex.sys, &ex.gains, &ex.cert, &opts());
        assert!(rep.passed(), "{rep}");
        let rep = check_asymptotic_observer(&ex.sys, &ex.gains, &ex.cert, &SamplingPlan::default(), &opts());
        assert!(rep.passed(), "{rep}");
        for id in ["x2_jacobian_invertible", "growth_bound", "zero_set_connected"] {
            assert_eq!(rep.status_of(id), Some(Status::SampledOnly), "{id}");
        }
        assert!(rep.claim.unwrap().contains("sampling only"));
    }

    #[test]
    fn monotone_bounds_absent_without_monotone_part() {
        let mut ex = corpus::square();
        ex.sys.b_m = DMatrix::zeros(2, 0);
        ex.sys.j = DMatrix::zeros(0, 2);
        ex.sys.theta = DMatrix::zeros(0, 0);
        ex.sys.f_m = VectorFunction::monotone(&[], 0, 0, 1).unwrap();
        let aug = build_augmented(&ex.sys, &ex.gains).unwrap();
        let k = DMatrix::zeros(3, 3);
        let cert = LmiCertificate::new(DMatrix::identity(3, 3), k, 1.0).unwrap();
        assert_eq!(aug.size(), 3);
        let rep = check_square_estimator(&ex.sys, &ex.gains, &cert, &opts());
        assert_eq!(rep.status_of("monotone_gain_bound"), Some(Status::NotPresent));
        assert_eq!(rep.status_of("mixed_gain_bound"), Some(Status::NotPresent));
    }

    fn algebraic(b: DMatrix<f64>, f: DMatrix<f64>, q_l: usize) -> (DaeSystem, ObserverGains) {
        let q = b.ncols();
        let q_m = q - q_l;
        let b_l = b.columns(0, q_l).into_owned();
        let b_m = b.columns(q_l, q_m).into_owned();
        let mut j = DMatrix::zeros(q_m, 2);
        for i in 0..q_m {
            j[(i, i)] = 1.0;
        }
        let fl: Vec<String> = (0..q_l).map(|_| "0".to_string()).collect();
        let fm: Vec<String> = (0..q_m).map(|_| "0".to_string()).collect();
        let sys = DaeSystem {
            e: DMatrix::zeros(2, 2),
            a: from_rows(&[&[2.0, 0.5], &[0.0, 1.0]]),
            b_l,
            b_m,
            j,
            c: from_rows(&[&[1.0, 1.0]]),
            f,
            theta: DMatrix::identity(q_m, q_m),
            mu: 0.0,
            f_l: VectorFunction::state(&fl, 2, 0, 1).unwrap(),
            f_m: VectorFunction::monotone(&fm, q_m, 0, 1).unwrap(),
            h: VectorFunction::output(&["0".into()], 0).unwrap(),
            m: 0,
        };
        let g = ObserverGains::new(from_rows(&[&[1.0], &[0.0]]), from_rows(&[&[1.0]])).unwrap();
        (sys, g)
    }

    #[test]
    fn algebraic_case_without_coupling_is_indeterminate() {
        let (sys, g) = algebraic(DMatrix::zeros(2, 2), DMatrix::zeros(1, 2), 1);
        let cert = LmiCertificate::new(DMatrix::identity(3, 3), DMatrix::zeros(3, 3), 1.0).unwrap();
        let rep = check_algebraic_case(&sys, &g, &cert, &opts());
        assert_eq!(rep.status_of("reduced_q_negative"), Some(Status::Indeterminate), "{rep}");
    }

    #[test]
    fn algebraic_case_contraction_passes() {
        let (sys, g) = algebraic(from_rows(&[&[0.3], &[0.1]]), from_rows(&[&[1.0, 0.0]]), 1);
        let cert = LmiCertificate::new(DMatrix::identity(3, 3), DMatrix::zeros(3, 3), 0.7).unwrap();
        let rep = check_algebraic_case(&sys, &g, &cert, &opts());
        assert_eq!(rep.status_of("reduced_q_negative"), Some(Status::Pass), "{rep}");
    }
}
