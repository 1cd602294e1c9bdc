//! Subcommand implementations. Each returns the process exit code; errors
//! bubble up as `anyhow::Error` and map to the input-error code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{bail, ensure, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use daeobs::lmi::{self, GainSearchOutcome, Mode, SolveOptions};
use daeobs::model::{build_augmented, necessary_rank_check, ObserverGains};
use daeobs::pencil::{self, pencil_index, wong_limits, MatrixPencil};
use daeobs::sim::{self, TimeGrid};
use daeobs::subspace::{self, Subspace};
use daeobs::synth::{self, CertificateReport};
use daeobs::Error as CoreError;

use crate::file::{ModeName, SystemFile};

pub const EXIT_PASS: u8 = 0;
pub const EXIT_FAIL: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_INDETERMINATE: u8 = 3;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_ROUNDS: usize = 5;

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, Serialize)]
pub struct SubspaceInfo {
    pub dim: usize,
    pub ambient: usize,
    pub basis: Vec<Vec<f64>>,
}

impl SubspaceInfo {
    fn new(s: &Subspace) -> Self {
        SubspaceInfo { dim: s.dim(), ambient: s.ambient(), basis: rows(s.basis()) }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PencilInfo {
    pub label: String,
    pub k: usize,
    pub rows: usize,
    pub cols: usize,
    pub square: bool,
    pub regular: bool,
    /// `None` unless the pencil is regular.
    pub index: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub name: String,
    pub n: usize,
    pub l: usize,
    pub m: usize,
    pub p: usize,
    pub rank_e: usize,
    pub v_star: SubspaceInfo,
    pub w_star: SubspaceInfo,
    pub k_star: usize,
    pub l_star: usize,
    pub plant: PencilInfo,
    pub rational_rank: usize,
    pub rank_condition_holds: bool,
    pub n_le_l_plus_p: bool,
    pub augmented: Vec<PencilInfo>,
}

fn pencil_info(label: &str, k: usize, p: &MatrixPencil) -> PencilInfo {
    let regular = pencil::is_regular(p, pencil::DEFAULT_SAMPLES);
    PencilInfo {
        label: label.into(),
        k,
        rows: p.rows(),
        cols: p.cols(),
        square: p.is_square(),
        regular,
        index: if regular { pencil_index(p).ok() } else { None },
    }
}

pub fn analyze(file: &SystemFile) -> Result<AnalyzeReport> {
    let sys = file.system()?;
    let d = sys.dims();
    let plant = sys.pencil()?;
    let wong = wong_limits(&plant)?;
    let rank = necessary_rank_check(&sys)?;
    let mut augmented = Vec::new();
    let copy = build_augmented(&sys, &ObserverGains::none(d.l, d.p))?;
    augmented.push(pencil_info("no innovations", 0, &copy.pencil()));
    if let Some(g) = file.gains()? {
        let aug = build_augmented(&sys, &g)?;
        augmented.push(pencil_info("file gains", g.k(), &aug.pencil()));
    }
    Ok(AnalyzeReport {
        name: file.display_name().into(),
        n: d.n,
        l: d.l,
        m: d.m,
        p: d.p,
        rank_e: subspace::image(&sys.e, subspace::default_tol(d.l, d.n))
            .map(|s| s.dim())
            .unwrap_or(0),
        v_star: SubspaceInfo::new(&wong.v_star),
        w_star: SubspaceInfo::new(&wong.w_star),
        k_star: wong.k_star,
        l_star: wong.l_star,
        plant: pencil_info("plant", 0, &plant),
        rational_rank: rank.rational_rank,
        rank_condition_holds: rank.holds(),
        n_le_l_plus_p: rank.n_le_l_plus_p,
        augmented,
    })
}

fn fmt_pencil(out: &mut String, p: &PencilInfo) {
    let index = p.index.map_or("-".to_string(), |i| i.to_string());
    let _ = writeln!(
        out,
        "  {:<16} k={}  {}x{}  regular: {:<5}  index: {}",
        p.label, p.k, p.rows, p.cols, p.regular, index
    );
}

impl AnalyzeReport {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "system: {}  (n={}, l={}, m={}, p={})", self.name, self.n, self.l, self.m, self.p);
        let _ = writeln!(s, "rank E: {}", self.rank_e);
        let _ = writeln!(
            s,
            "Wong limits of sE - A: dim V* = {} (k* = {}), dim W* = {} (l* = {})",
            self.v_star.dim, self.k_star, self.w_star.dim, self.l_star
        );
        for (name, sub) in [("V*", &self.v_star), ("W*", &self.w_star)] {
            if sub.dim == 0 {
                continue;
            }
            for row in &sub.basis {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>10.6}")).collect();
                let _ = writeln!(s, "  {name} basis row: [{}]", cells.join(" "));
            }
        }
        let _ = writeln!(
            s,
            "rank over R(s) of [sE - A; C]: {} of {}  ({})",
            self.rational_rank,
            self.n,
            if self.rank_condition_holds { "necessary condition holds" } else { "necessary condition fails" }
        );
        let _ = writeln!(s, "n <= l + p: {}", self.n_le_l_plus_p);
        let _ = writeln!(s, "pencils:");
        fmt_pencil(&mut s, &self.plant);
        for p in &self.augmented {
            fmt_pencil(&mut s, p);
        }
        s
    }
}

pub fn cmd_analyze(path: &Path, json: Option<&Path>) -> Result<u8> {
    let file = SystemFile::load(path)?;
    let rep = analyze(&file)?;
    print!("{}", rep.text());
    if let Some(j) = json {
        write_json(j, &rep)?;
    }
    Ok(if rep.rank_condition_holds { EXIT_PASS } else { EXIT_FAIL })
}

// ---------------------------------------------------------------- verify

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Theorem {
    StateEstimator,
    SquareEstimator,
    AsymptoticObserver,
}

impl Theorem {
    pub fn from_number(n: u8) -> Result<Self> {
        Ok(match n {
            1 => Theorem::StateEstimator,
            2 => Theorem::SquareEstimator,
            3 => Theorem::AsymptoticObserver,
            _ => bail!("--theorem must be 1, 2 or 3"),
        })
    }
}

pub fn verify(file: &SystemFile, theorem: Theorem, delta: Option<f64>, margin: Option<f64>) -> Result<CertificateReport> {
    let sys = file.system()?;
    let gains = file.gains_or_none()?;
    let cert = file
        .certificate(delta)?
        .context("the file has no certificate (fields `certificate` and `delta`)")?;
    let opts = file.check_options(margin);
    Ok(match theorem {
        Theorem::StateEstimator => synth::check_state_estimator(&sys, &gains, &cert, &opts),
        Theorem::SquareEstimator => synth::check_square_estimator(&sys, &gains, &cert, &opts),
        Theorem::AsymptoticObserver => {
            synth::check_asymptotic_observer(&sys, &gains, &cert, &file.sampling_plan(), &opts)
        }
    })
}

pub fn cmd_verify(
    path: &Path,
    theorem: Theorem,
    delta: Option<f64>,
    margin: Option<f64>,
    report: Option<&Path>,
) -> Result<u8> {
    if let Some(m) = margin {
        ensure!(m >= 0.0 && m.is_finite(), "--margin must be a non-negative number");
    }
    let file = SystemFile::load(path)?;
    let rep = verify(&file, theorem, delta, margin)?;
    print!("{rep}");
    if let Some(r) = report {
        write_json(r, &rep)?;
    }
    Ok(if rep.passed() { EXIT_PASS } else { EXIT_FAIL })
}

// ---------------------------------------------------------------- synthesize

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub k: Option<usize>,
    pub mode: Option<ModeName>,
    pub seed: Option<u64>,
    pub max_iters: Option<usize>,
    pub rounds: Option<usize>,
    pub eps: Option<f64>,
    pub jobs: usize,
    pub out: PathBuf,
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

pub enum SynthResult {
    Found { file: Box<SystemFile>, outcome: Box<GainSearchOutcome>, report: CertificateReport },
    Rejected { report: CertificateReport },
    Indeterminate { message: String, trace: Vec<f64> },
}

fn to_mode(m: ModeName) -> Mode {
    match m {
        ModeName::Thm1 => Mode::Thm1,
        ModeName::Thm2 => Mode::Thm2,
    }
}

/// Run the gain search and the in-process verification gate.
pub fn synthesize(file: &SystemFile, args: &SynthArgs) -> Result<SynthResult> {
    let sys = file.system()?;
    let d = sys.dims();
    let solver = file.solver.clone().unwrap_or_default();
    let mode = args.mode.or(solver.mode).unwrap_or(ModeName::Thm1);
    let k = match args.k.or(solver.k) {
        Some(k) => k,
        None => match mode {
            ModeName::Thm2 => d.square_k().context("n > l + p: no square augmentation exists")?,
            ModeName::Thm1 => file.gains()?.map_or(0, |g| g.k()),
        },
    };
    let eps = args.eps.or(solver.eps).unwrap_or(DEFAULT_EPS);
    ensure!(eps > 0.0 && eps.is_finite(), "eps must be positive");
    let seed = args.seed.or(solver.seed).unwrap_or(42);
    let max_iters = args.max_iters.or(solver.max_iters).unwrap_or(5000);
    ensure!(max_iters > 0, "--max-iters must be positive");
    let rounds = args.rounds.or(solver.rounds).unwrap_or(DEFAULT_ROUNDS);

    let file_gains = file.gains()?.filter(|g| g.k() == k);
    let initial = file_gains
        .clone()
        .unwrap_or_else(|| ObserverGains::new(DMatrix::zeros(d.l, k), DMatrix::zeros(d.p, k)).expect("zero gains"));
    let warm = match &file_gains {
        Some(_) => file.certificate(None).ok().flatten(),
        None => None,
    };
    let lmode = to_mode(mode);
    let search = |s: u64| {
        let opts = SolveOptions { max_iters, seed: s, warm_start: warm.clone() };
        lmi::iterate_gain_search(&sys, &initial, rounds, lmode, eps, &opts)
    };
    let jobs = args.jobs.max(1);
    let found = if jobs == 1 {
        search(seed)
    } else {
        // Multi-start: one seed per job, the lowest successful seed wins.
        let results: Vec<_> = thread::scope(|sc| {
            let handles: Vec<_> = (0..jobs as u64)
                .map(|i| {
                    let search = &search;
                    sc.spawn(move || search(seed + i))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut last = None;
        let mut ok = None;
        for r in results {
            match r {
                Ok(o) if ok.is_none() => ok = Some(o),
                Ok(_) => {}
                Err(e) => last = Some(e),
            }
        }
        ok.ok_or_else(|| last.expect("at least one job"))
    };
    let outcome = match found {
        Ok(o) => o,
        Err(CoreError::NoGain(msg)) => {
            let prob = lmi::assemble(&sys, &initial, lmode, eps, false)?;
            let out = lmi::solve_feasibility(&prob, &SolveOptions { max_iters, seed, warm_start: None })?;
            return Ok(SynthResult::Indeterminate { message: msg, trace: out.trace });
        }
        Err(e) => return Err(e.into()),
    };

    let mut written = file.clone();
    written.set_gains(&outcome.gains);
    written.set_certificate(&outcome.cert);
    let theorem = match mode {
        ModeName::Thm1 => Theorem::StateEstimator,
        ModeName::Thm2 => Theorem::SquareEstimator,
    };
    // Soundness gate: the file must pass `verify` exactly as a user would run it.
    let reloaded = SystemFile::from_json(&written.to_json())?;
    let report = verify(&reloaded, theorem, None, None)?;
    if !report.passed() {
        return Ok(SynthResult::Rejected { report });
    }
    Ok(SynthResult::Found { file: Box::new(reloaded), outcome: Box::new(outcome), report })
}

fn save_residuals(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["iteration", "residual"])?;
    for (i, r) in trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{r:.16e}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_synthesize(path: &Path, args: &SynthArgs) -> Result<u8> {
    let file = SystemFile::load(path)?;
    match synthesize(&file, args)? {
        SynthResult::Found { file, outcome, report } => {
            file.save(&args.out)?;
            println!(
                "certificate found in {} round(s); gains and certificate written to {}",
                outcome.rounds,
                args.out.display()
            );
            print!("{report}");
            if let Some(r) = &args.report {
                write_json(r, &report)?;
            }
            Ok(EXIT_PASS)
        }
        SynthResult::Rejected { report } => {
            eprintln!("solver candidate rejected by verification; nothing written");
            print!("{report}");
            Ok(EXIT_INDETERMINATE)
        }
        SynthResult::Indeterminate { message, trace } => {
            let tpath = args
                .trace
                .clone()
                .unwrap_or_else(|| args.out.with_extension("residuals.csv"));
            save_residuals(&tpath, &trace)?;
            eprintln!("solver indeterminate: {message}");
            eprintln!("residual trace saved to {}", tpath.display());
            Ok(EXIT_INDETERMINATE)
        }
    }
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, Default)]
pub struct SimArgs {
    pub t_span: Option<(f64, f64)>,
    pub dt: Option<f64>,
    pub x0: Option<Vec<f64>>,
    pub z0: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    pub err0: f64,
    pub err_end: f64,
    pub ratio: f64,
    pub beta_est: f64,
    pub decaying: bool,
    pub confinement: f64,
    pub max_g_residual: f64,
    pub init_projection: (f64, f64),
}

pub fn simulate(file: &SystemFile, args: &SimArgs) -> Result<(sim::SimTrace, SimSummary)> {
    let sys = file.system()?;
    let d = sys.dims();
    let gains = match file.gains()? {
        Some(g) => g,
        None if d.square_k() == Some(0) => ObserverGains::none(d.l, d.p),
        None => bail!("the file has no gains (field `gains`)"),
    };
    let defaults = file.simulation.clone().unwrap_or_default();
    let (t0, t1) = args
        .t_span
        .or(defaults.t_span.map(|s| (s[0], s[1])))
        .unwrap_or((0.0, 10.0));
    let dt = args.dt.or(defaults.dt).unwrap_or(1e-3);
    let grid = TimeGrid::new(t0, t1, dt)?;
    let vec_or_zero = |v: Option<Vec<f64>>, name: &str| -> Result<DVector<f64>> {
        let v = v.unwrap_or_else(|| vec![0.0; d.n]);
        ensure!(v.len() == d.n, "{name} has {} entries, the system has n = {}", v.len(), d.n);
        Ok(DVector::from_vec(v))
    };
    let x0 = vec_or_zero(args.x0.clone().or(defaults.x0), "x0")?;
    let z0 = vec_or_zero(args.z0.clone().or(defaults.z0), "z0")?;
    let input = file.input()?;
    let trace = sim::simulate_coupled(&sys, &gains, &input, &x0, &z0, &grid)?;
    let aug = build_augmented(&sys, &gains)?;
    let vstar = wong_limits(&aug.bordered_pencil())?.v_star;
    let confinement = sim::check_trajectory_subspace(&trace, &vstar)?;
    let decay = sim::estimate_decay(&trace.t, &trace.err_norm);
    let err0 = trace.err_norm[0];
    let err_end = *trace.err_norm.last().expect("non-empty trace");
    let summary = SimSummary {
        err0,
        err_end,
        ratio: if err0 > 0.0 { err_end / err0 } else { 0.0 },
        beta_est: decay.beta,
        decaying: decay.decaying,
        confinement,
        max_g_residual: trace.g_residual.iter().copied().fold(0.0, f64::max),
        init_projection: trace.init_projection,
    };
    Ok((trace, summary))
}

fn sig17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trace(path: &Path, trace: &sim::SimTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    let n = trace.x.first().map_or(0, |x| x.len());
    let k = trace.d.first().map_or(0, |d| d.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=n).map(|i| format!("z{i}")));
    header.extend((1..=k).map(|i| format!("d{i}")));
    header.extend(["err_norm", "d_norm", "newton_iters", "g_residual"].map(String::from));
    w.write_record(&header)?;
    for i in 0..trace.t.len() {
        let mut rec = vec![sig17(trace.t[i])];
        rec.extend(trace.x[i].iter().map(|v| sig17(*v)));
        rec.extend(trace.z[i].iter().map(|v| sig17(*v)));
        rec.extend(trace.d[i].iter().map(|v| sig17(*v)));
        rec.push(sig17(trace.err_norm[i]));
        rec.push(sig17(trace.d_norm[i]));
        rec.push(trace.newton_iters[i].to_string());
        rec.push(sig17(trace.g_residual[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_simulate(path: &Path, args: &SimArgs) -> Result<u8> {
    let file = SystemFile::load(path)?;
    let (trace, s) = simulate(&file, args)?;
    if let Some(out) = &args.out {
        write_trace(out, &trace)?;
        println!("trace: {} rows written to {}", trace.t.len(), out.display());
    }
    println!("|e(0)|           {:.6e}", s.err0);
    println!("|e(T)|           {:.6e}  (ratio {:.3e})", s.err_end, s.ratio);
    println!(
        "beta_est         {:.6e}  ({})",
        s.beta_est,
        if s.decaying { "decaying" } else { "not decaying" }
    );
    println!("dist to V*       {:.3e}", s.confinement);
    println!("max |G|          {:.3e}", s.max_g_residual);
    println!(
        "init projection  plant {:.3e}, estimator {:.3e}",
        s.init_projection.0, s.init_projection.1
    );
    Ok(EXIT_PASS)
}
