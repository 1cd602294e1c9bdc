//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero if any of them fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use daeobs::corpus::{self, Example};
use daeobs::expr::{self, Env, Var, VarKind, VectorFunction};
use daeobs::linalg::{from_rows, sym_eigvals};
use daeobs::lmi::{self, Mode, SolveOptions, Verdict};
use daeobs::model::{build_augmented, DaeSystem, ObserverGains};
use daeobs::pencil::{self, MatrixPencil};
use daeobs::sim::{self, TimeGrid};
use daeobs::subspace::{self, Subspace};
use daeobs::synth::{self, CheckOptions, Status};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn opts() -> CheckOptions {
    CheckOptions { sample_pairs: 200, ..CheckOptions::default() }
}

fn margin(rep: &synth::CertificateReport, id: &str) -> Result<f64, String> {
    rep.condition(id)
        .and_then(|c| c.margin)
        .ok_or_else(|| format!("no margin for {id}"))
}

fn vstar(ex: &Example) -> Result<Subspace, String> {
    let aug = build_augmented(&ex.sys, &ex.gains).map_err(|e| e.to_string())?;
    pencil::wong_limits(&aug.bordered_pencil())
        .map(|w| w.v_star)
        .map_err(|e| e.to_string())
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let el = start.elapsed();
    ensure(el < limit, format!("took {el:.2?}, limit {limit:?}"))
}

// ---------------------------------------------------------------- 1, 2

fn overdetermined_certificate() -> Outcome {
    let start = Instant::now();
    let ex = corpus::overdetermined();
    let rep = synth::check_state_estimator(&ex.sys, &ex.gains, &ex.cert, &opts());
    ensure(rep.passed(), format!("check failed:\n{rep}"))?;
    let qmax = margin(&rep, "projected_q_negative")?;
    let epmin = margin(&rep, "ep_positive_on_vbar")?;
    ensure(qmax < 0.0 && epmin > 0.0, "margins have the wrong sign")?;
    let aug = build_augmented(&ex.sys, &ex.gains).map_err(|e| e.to_string())?;
    let q = synth::build_q(&aug, &ex.cert).map_err(|e| e.to_string())?;
    let full = *sym_eigvals(&q).last().unwrap();
    ensure(full >= 0.0, format!("Q is negative definite on the full space ({full:e})"))?;
    within(start, Duration::from_secs(1))?;
    Ok(format!(
        "max eig S^T Q S = {qmax:.4e}, min eig Vbar^T E^T P Vbar = {epmin:.4e}, max eig Q = {full:.4e}"
    ))
}

fn overdetermined_vstar() -> Outcome {
    let ex = corpus::overdetermined();
    let got = vstar(&ex)?;
    let want = subspace::image(&corpus::overdetermined_vstar(), 1e-12).map_err(|e| e.to_string())?;
    let d = subspace::projector_distance(&got, &want);
    ensure(got.dim() == 3 && d <= 1e-8, format!("dim {}, distance {d:e}", got.dim()))?;
    Ok(format!("dim 3, projector distance {d:.2e}"))
}

// ---------------------------------------------------------------- 3, 4

fn square_pipeline() -> Outcome {
    let start = Instant::now();
    let ex = corpus::square();
    let aug = build_augmented(&ex.sys, &ex.gains).map_err(|e| e.to_string())?;
    let index = pencil::pencil_index(&aug.pencil()).map_err(|e| e.to_string())?;
    ensure(index == 1, format!("index {index}"))?;
    let (gl, gm) = synth::compute_gl_gm(&ex.sys, &ex.gains).map_err(|e| e.to_string())?;
    let v = 1.0 / 15.0;
    let want = from_rows(&[&[v], &[v]]);
    let (egl, egm) = ((&gl - &want).norm(), (&gm + &want).norm());
    ensure(egl < 1e-10 && egm < 1e-10, format!("G_L error {egl:e}, G_M error {egm:e}"))?;
    let gb = synth::gain_bounds(&ex.sys, gl, gm).map_err(|e| e.to_string())?;
    let gmax = gb.gamma_max.ok_or("Gamma undefined")?;
    ensure((gmax + 15.0).abs() <= 1e-9, format!("lambda_max(Gamma) = {gmax}"))?;
    let mixed = gb.mixed_value.ok_or("mixed bound undefined")?;
    ensure((mixed - 19.0 / 221.0).abs() <= 1e-12, format!("mixed bound {mixed}"))?;
    ensure((ex.cert.delta - 1.5).abs() < 1e-15, "delta is not 1.5")?;
    let rep = synth::check_square_estimator(&ex.sys, &ex.gains, &ex.cert, &opts());
    ensure(rep.passed(), format!("square check failed:\n{rep}"))?;
    let rep1 = synth::check_state_estimator(&ex.sys, &ex.gains, &ex.cert, &opts());
    ensure(
        rep1.status_of("ep_positive_on_vbar") == Some(Status::Fail),
        format!("strict positivity did not fail:\n{rep1}"),
    )?;
    within(start, Duration::from_secs(1))?;
    Ok(format!(
        "index 1, lambda_max(Gamma) = {gmax:.12}, mixed = {mixed:.15} (19/221 = {:.15})",
        19.0 / 221.0
    ))
}

fn counterexample() -> Outcome {
    let ex = corpus::counterexample();
    let rep = synth::check_state_estimator(&ex.sys, &ex.gains, &ex.cert, &opts());
    let c = rep.condition("ep_positive_on_vbar").ok_or("condition missing")?;
    ensure(c.status == Status::Fail, format!("status {}", c.status.as_str()))?;
    ensure(c.detail.contains("rank deficient"), format!("reason: {}", c.detail))?;
    let vbar = rep.subspaces.iter().find(|s| s.name == "Vbar*").ok_or("Vbar* missing")?;
    let got = DMatrix::from_row_slice(vbar.ambient, vbar.dim, &vbar.basis.concat());
    let got = subspace::image(&got, 1e-12).map_err(|e| e.to_string())?;
    let want = subspace::image(&from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]), 1e-12).unwrap();
    let d = subspace::projector_distance(&got, &want);
    ensure(got.dim() == 2 && d <= 1e-10, format!("Vbar* distance {d:e}"))?;
    Ok(format!("Vbar* distance {d:.2e}, failure reason: {}", c.detail))
}

// ---------------------------------------------------------------- 5, 6

struct Run {
    name: &'static str,
    ex: Example,
    x0: Vec<f64>,
    z0: Vec<f64>,
    t1: f64,
}

fn corpus_runs() -> Vec<Run> {
    vec![
        Run {
            name: "square",
            ex: corpus::square(),
            x0: vec![0.3, -0.2],
            z0: vec![0.0, 0.0],
            t1: 10.0,
        },
        Run {
            name: "rlc",
            ex: corpus::rlc(),
            x0: vec![0.5, 0.2, 1.2],
            z0: vec![-0.5, 1.0, 0.0],
            t1: 20.0,
        },
    ]
}

fn coupled(run: &Run) -> Result<sim::SimTrace, String> {
    let input = VectorFunction::signal(&run.ex.input).map_err(|e| e.to_string())?;
    let grid = TimeGrid::new(0.0, run.t1, 1e-3).map_err(|e| e.to_string())?;
    sim::simulate_coupled(
        &run.ex.sys,
        &run.ex.gains,
        &input,
        &DVector::from_vec(run.x0.clone()),
        &DVector::from_vec(run.z0.clone()),
        &grid,
    )
    .map_err(|e| e.to_string())
}

fn rlc() -> Outcome {
    let start = Instant::now();
    let copy = corpus::rlc_copy();
    ensure(copy.gains.k() == 0, "copy certificate has innovations")?;
    let rep = synth::check_state_estimator(&copy.sys, &copy.gains, &copy.cert, &opts());
    ensure(rep.passed(), format!("copy check failed:\n{rep}"))?;
    let ex = corpus::rlc();
    let want_l1 = from_rows(&[&[-1.0], &[5.0], &[5.0]]);
    ensure(ex.gains.l1 == want_l1 && ex.gains.l2 == from_rows(&[&[4.0]]), "unexpected gains")?;
    let rep = synth::check_square_estimator(&ex.sys, &ex.gains, &ex.cert, &opts());
    ensure(rep.passed(), format!("square check failed:\n{rep}"))?;
    let run = corpus_runs().into_iter().find(|r| r.name == "rlc").unwrap();
    let tr = coupled(&run)?;
    let (e0, e1) = (tr.err_norm[0], *tr.err_norm.last().unwrap());
    let decay = sim::estimate_decay(&tr.t, &tr.err_norm);
    ensure(e1 <= 1e-3 * e0, format!("|e(20)| = {e1:e}, |e(0)| = {e0:e}"))?;
    ensure(decay.beta > 0.0, format!("beta_est = {}", decay.beta))?;
    within(start, Duration::from_secs(30))?;
    Ok(format!(
        "|e(20)|/|e(0)| = {:.3e}, beta_est = {:.4}, {:.2?}",
        e1 / e0,
        decay.beta,
        start.elapsed()
    ))
}

fn confinement() -> Outcome {
    let mut parts = Vec::new();
    for run in corpus_runs() {
        let rep = synth::check_square_estimator(&run.ex.sys, &run.ex.gains, &run.ex.cert, &opts());
        ensure(rep.passed(), format!("{} is not certified", run.name))?;
        let tr = coupled(&run)?;
        let d = sim::check_trajectory_subspace(&tr, &vstar(&run.ex)?).map_err(|e| e.to_string())?;
        ensure(d <= 1e-6, format!("{}: sup distance {d:e}", run.name))?;
        parts.push(format!("{} {d:.2e}", run.name));
    }
    Ok(format!("sup distance to V*: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 7

/// A random descriptor system with one `sin` Lipschitz term and one output.
fn random_instance(seed: u64) -> (DaeSystem, ObserverGains) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.gen_range(2..4);
    let mut g = |rows: usize, cols: usize, s: f64| DMatrix::from_fn(rows, cols, |_, _| r.gen_range(-s..s));
    let mut e = DMatrix::identity(n, n);
    if seed % 3 == 0 {
        // Singular E: the last equation is algebraic.
        e[(n - 1, n - 1)] = 0.0;
    }
    let shift = if seed % 2 == 0 { -1.5 } else { 0.5 };
    let a = DMatrix::identity(n, n) * shift + g(n, n, 1.0);
    let b_l = g(n, 1, 0.5);
    let c = g(1, n, 1.0);
    let mut f = DMatrix::zeros(1, n);
    f[(0, 0)] = 1.0;
    let l1 = g(n, 1, 0.5);
    let sys = DaeSystem {
        e,
        a,
        b_l,
        b_m: DMatrix::zeros(n, 0),
        j: DMatrix::zeros(0, n),
        c,
        f,
        theta: DMatrix::zeros(0, 0),
        mu: 0.0,
        f_l: VectorFunction::state(&["sin(x1)".to_string()], n, 0, 1).unwrap(),
        f_m: VectorFunction::monotone(&[], 0, 0, 1).unwrap(),
        h: VectorFunction::output(&["0".to_string()], 0).unwrap(),
        m: 0,
    };
    (sys, ObserverGains::new(l1, from_rows(&[&[1.0]])).unwrap())
}

fn lmi_soundness() -> Outcome {
    let (mut feasible, mut undecided, mut violations) = (0, 0, 0);
    for seed in 0..100u64 {
        let (sys, gains) = random_instance(seed);
        let prob = match lmi::assemble(&sys, &gains, Mode::Thm1, 1e-6, false) {
            Ok(p) => p,
            Err(_) => {
                undecided += 1;
                continue;
            }
        };
        let out = lmi::solve_feasibility(&prob, &SolveOptions { max_iters: 1500, seed, warm_start: None })
            .map_err(|e| e.to_string())?;
        if out.verdict != Verdict::Feasible {
            undecided += 1;
            continue;
        }
        feasible += 1;
        let cert = out.cert.ok_or("feasible without a certificate")?;
        let check = CheckOptions { margin: Some(5e-7), sample_pairs: 0, seed, ..CheckOptions::default() };
        let rep = synth::check_state_estimator(&sys, &gains, &cert, &check);
        let ok = ["ep_symmetric", "projected_q_negative", "ep_positive_on_vbar"]
            .iter()
            .all(|id| rep.status_of(id) == Some(Status::Pass));
        if !ok {
            violations += 1;
        }
    }
    ensure(violations == 0, format!("{violations} feasible verdicts failed re-verification"))?;
    ensure(feasible > 0, "no instance was found feasible")?;

    let mut warm = Vec::new();
    for (ex, mode) in [
        (corpus::overdetermined(), Mode::Thm1),
        (corpus::square(), Mode::Thm2),
        (corpus::rlc(), Mode::Thm2),
        (corpus::rlc_copy(), Mode::Thm1),
    ] {
        let prob = lmi::assemble(&ex.sys, &ex.gains, mode, 1e-6, true).map_err(|e| e.to_string())?;
        let out = lmi::solve_feasibility(&prob, &SolveOptions { warm_start: Some(ex.cert.clone()), ..SolveOptions::default() })
            .map_err(|e| e.to_string())?;
        ensure(
            out.verdict == Verdict::Feasible && out.iterations <= 5,
            format!("{}: warm start took {} iterations ({:?})", ex.name, out.iterations, out.verdict),
        )?;
        warm.push(format!("{} {}", ex.name, out.iterations));
    }
    Ok(format!(
        "{feasible} feasible / {undecided} indeterminate of 100, 0 violations; warm-start iterations: {}",
        warm.join(", ")
    ))
}

// ---------------------------------------------------------------- 8

fn with_rank(r: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(rows, rank, |_, _| r.gen_range(-1.0..1.0));
    let b = DMatrix::from_fn(rank, cols, |_, _| r.gen_range(-1.0..1.0));
    a * b
}

fn random_expr(r: &mut ChaCha8Rng, depth: usize) -> String {
    if depth == 0 || r.gen_bool(0.25) {
        return match r.gen_range(0..3) {
            0 => "x1".into(),
            1 => "x2".into(),
            _ => format!("{:.2}", r.gen_range(-2.0..2.0)),
        };
    }
    let a = random_expr(r, depth - 1);
    match r.gen_range(0..9) {
        0 => format!("({a} + {})", random_expr(r, depth - 1)),
        1 => format!("({a} * {})", random_expr(r, depth - 1)),
        2 => format!("({a}) / (2 + ({})^2)", random_expr(r, depth - 1)),
        3 => format!("sin({a})"),
        4 => format!("cos({a})"),
        5 => format!("tanh({a})"),
        6 => format!("exp(tanh({a}))"),
        7 => format!("log(1 + ({a})^2)"),
        _ => format!("sqrt(1 + ({a})^2)"),
    }
}

fn properties() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2024);

    for _ in 0..500 {
        let (rows, cols) = (r.gen_range(1..7), r.gen_range(1..7));
        let rank = r.gen_range(0..=rows.min(cols));
        let m = with_rank(&mut r, rows, cols, rank);
        let im = subspace::image(&m, 1e-10).map_err(|e| e.to_string())?;
        let ker = subspace::kernel(&m, 1e-10).map_err(|e| e.to_string())?;
        ensure(im.dim() == rank && im.dim() + ker.dim() == cols, "rank-nullity violated")?;
    }

    let mut longest = 0;
    for _ in 0..200 {
        let (l, n) = (r.gen_range(1..6), r.gen_range(1..6));
        let er = r.gen_range(0..=l.min(n));
        let e = with_rank(&mut r, l, n, er);
        let a = DMatrix::from_fn(l, n, |_, _| r.gen_range(-1.0..1.0));
        let ch = pencil::wong_chains(&MatrixPencil::new(e, a).unwrap()).map_err(|e| e.to_string())?;
        ensure(ch.v.windows(2).all(|w| w[0].contains(&w[1], 1e-6)), "V chain not nested")?;
        ensure(ch.w.windows(2).all(|w| w[1].contains(&w[0], 1e-6)), "W chain not nested")?;
        let steps = ch.v.len().max(ch.w.len()) - 2;
        ensure(steps <= n + 1, format!("{steps} steps for n = {n}"))?;
        longest = longest.max(steps);
    }

    let mut worst_qwf: f64 = 0.0;
    for _ in 0..100 {
        let n = r.gen_range(1..7);
        let k = r.gen_range(0..=n);
        let wc = |r: &mut ChaCha8Rng| {
            DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0)) * (0.4 / n as f64)
        };
        let (m, nn) = (wc(&mut r), wc(&mut r));
        let mut ce = DMatrix::zeros(n, n);
        let mut ca = DMatrix::identity(n, n);
        for i in 0..k {
            ce[(i, i)] = 1.0;
        }
        let ar = DMatrix::from_fn(k, k, |_, _| r.gen_range(-1.0..1.0));
        ca.view_mut((0, 0), (k, k)).copy_from(&ar);
        let (mi, ni) = (m.try_inverse().unwrap(), nn.try_inverse().unwrap());
        let (e, a) = (&mi * &ce * &ni, &mi * &ca * &ni);
        let q = pencil::qwf_transform(&MatrixPencil::new(e.clone(), a.clone()).unwrap()).map_err(|e| e.to_string())?;
        let mut re = DMatrix::zeros(n, n);
        let mut ra = DMatrix::identity(n, n);
        for i in 0..q.r {
            re[(i, i)] = 1.0;
        }
        ra.view_mut((0, 0), (q.r, q.r)).copy_from(&q.a_r);
        let (qmi, qni) = (q.m.clone().try_inverse().unwrap(), q.n.clone().try_inverse().unwrap());
        let err = ((&qmi * &re * &qni - &e).norm() / e.norm().max(1.0))
            .max((&qmi * &ra * &qni - &a).norm() / a.norm().max(1.0));
        ensure(q.r == k && err <= 1e-8, format!("QWF error {err:e}"))?;
        worst_qwf = worst_qwf.max(err);
    }

    let mut worst_d: f64 = 0.0;
    for _ in 0..200 {
        let text = random_expr(&mut r, 4);
        let (x1, x2) = (r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
        let e = expr::parse(&text).map_err(|e| e.to_string())?;
        let d = expr::differentiate(&e, Var::new(VarKind::X, 0));
        let at = |a: f64| e.eval(&Env { x: &[a, x2], ..Env::default() }).unwrap();
        let h = 1e-5;
        let fd = (at(x1 + h) - at(x1 - h)) / (2.0 * h);
        let exact = d.eval(&Env { x: &[x1, x2], ..Env::default() }).unwrap();
        let rel = (exact - fd).abs() / exact.abs().max(at(x1).abs()).max(1.0);
        ensure(rel <= 1e-6, format!("{text}: relative error {rel:e}"))?;
        worst_d = worst_d.max(rel);
    }

    let ratio = rk4_ratio()?;
    ensure(ratio >= 8.0, format!("RK4 error ratio {ratio}"))?;
    Ok(format!(
        "rank-nullity 500/500, Wong 200/200 (max {longest} steps), QWF 100/100 (max err {worst_qwf:.1e}), \
         derivatives 200/200 (max rel {worst_d:.1e}), RK4 ratio {ratio:.2}"
    ))
}

/// Error ratio of the logistic equation `ẋ = x − x²` when dt is halved.
fn rk4_ratio() -> Result<f64, String> {
    let sys = DaeSystem {
        e: from_rows(&[&[1.0]]),
        a: from_rows(&[&[0.0]]),
        b_l: from_rows(&[&[1.0]]),
        b_m: DMatrix::zeros(1, 0),
        j: DMatrix::zeros(0, 1),
        c: from_rows(&[&[1.0]]),
        f: from_rows(&[&[3.0]]),
        theta: DMatrix::zeros(0, 0),
        mu: 0.0,
        f_l: VectorFunction::state(&["x1 - x1^2".to_string()], 1, 0, 1).unwrap(),
        f_m: VectorFunction::monotone(&[], 0, 0, 1).unwrap(),
        h: VectorFunction::output(&["0".to_string()], 0).unwrap(),
        m: 0,
    };
    let gains = ObserverGains::new(from_rows(&[&[0.0]]), from_rows(&[&[1.0]])).unwrap();
    let u = VectorFunction::signal(&[]).unwrap();
    let x0 = 0.2;
    let exact = 1.0 / (1.0 + (1.0 / x0 - 1.0) * (-1.0f64).exp());
    let err = |dt: f64| -> Result<f64, String> {
        let grid = TimeGrid::new(0.0, 1.0, dt).map_err(|e| e.to_string())?;
        let tr = sim::simulate_plant(&sys, &gains, &u, &DVector::from_vec(vec![x0]), &grid)
            .map_err(|e| e.to_string())?;
        Ok((tr.x.last().unwrap()[0] - exact).abs())
    };
    Ok(err(0.1)? / err(0.05)?)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("overdetermined example certificate", overdetermined_certificate),
        ("overdetermined example V*", overdetermined_vstar),
        ("square example gain pipeline", square_pipeline),
        ("rank-deficient counterexample", counterexample),
        ("RLC circuit certificates and simulation", rlc),
        ("trajectory confinement to V*", confinement),
        ("LMI engine soundness and warm starts", lmi_soundness),
        ("property suites", properties),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = f();
        let el = start.elapsed();
        match res {
            Ok(detail) => println!("criterion {}: PASS  {name} [{el:.2?}]  {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} [{el:.2?}]  {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
