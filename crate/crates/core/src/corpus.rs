//! Reference systems with known gains and certificates. Used by the tests,
//! the acceptance run and to generate the CLI example files.

use nalgebra::DMatrix;

use crate::expr::VectorFunction;
use crate::linalg::from_rows;
use crate::model::{DaeSystem, ObserverGains};
use crate::synth::LmiCertificate;

#[derive(Debug, Clone)]
pub struct Example {
    pub name: &'static str,
    pub sys: DaeSystem,
    pub gains: ObserverGains,
    pub cert: LmiCertificate,
    /// Input signal `u(t)` for simulation.
    pub input: Vec<String>,
}

fn texts(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn k_last(size: usize, cols: &[&[f64]]) -> DMatrix<f64> {
    // `cols` lists the rows of the last k columns.
    let k = cols.first().map_or(0, |r| r.len());
    let mut m = DMatrix::zeros(size, size);
    for (i, row) in cols.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m[(i, size - k + j)] = *v;
        }
    }
    m
}

/// Four equations in two unknowns with one Lipschitz and one monotone term;
/// certified with two innovation channels.
pub fn overdetermined() -> Example {
    let (n, m, p) = (2, 0, 1);
    let sys = DaeSystem {
        e: from_rows(&[&[1.0, 0.0], &[1.0, 1.0], &[0.0, 0.0], &[0.0, 1.0]]),
        a: from_rows(&[&[0.0, -3.0], &[-2.0, 0.0], &[1.0, -2.0], &[0.0, 0.0]]),
        b_l: from_rows(&[&[0.0], &[1.0], &[0.0], &[1.0]]),
        b_m: from_rows(&[&[2.0], &[-1.0], &[1.0], &[0.0]]),
        j: from_rows(&[&[0.0, 1.0]]),
        c: from_rows(&[&[1.0, -1.0]]),
        f: from_rows(&[&[1.0, -1.0]]),
        theta: DMatrix::identity(1, 1),
        mu: 2.0,
        f_l: VectorFunction::state(&texts(&["sin(x1 - x2)"]), n, m, p).unwrap(),
        f_m: VectorFunction::monotone(&texts(&["w1 + exp(w1)"]), 1, m, p).unwrap(),
        h: VectorFunction::output(&texts(&["0"]), m).unwrap(),
        m,
    };
    let gains = ObserverGains::new(
        from_rows(&[&[4.0, 10.0], &[1.0, 9.0], &[9.0, 4.0], &[0.0, 0.0]]),
        from_rows(&[&[2.0, 1.0]]),
    )
    .unwrap();
    let p_cert = from_rows(&[
        &[2.0, -2.0, 0.0, 0.0],
        &[0.0, 0.0, 0.0, 0.0],
        &[0.0, 0.0, 0.0, 0.0],
        &[-2.0, 3.0, 0.0, 0.0],
        &[0.0, 0.0, 0.0, 0.0],
    ]) / 10.0;
    let k = k_last(4, &[&[4.0, 10.0], &[-4.0, -10.0], &[0.0, 0.0], &[0.0, 0.0]]) / 5.0;
    Example {
        name: "ex1",
        sys,
        gains,
        cert: LmiCertificate::new(p_cert, k, 1.0).unwrap(),
        input: Vec::new(),
    }
}

/// 𝒱* of the bordered pencil for [`overdetermined`], as published.
pub fn overdetermined_vstar() -> DMatrix<f64> {
    from_rows(&[
        &[1.0, 0.0, 0.0],
        &[0.0, 1.0, 0.0],
        &[5.0, -4.0, 0.0],
        &[-11.0, 9.0, 0.0],
        &[0.0, 0.0, 1.0],
        &[-2.0, 2.0, 0.0],
    ])
}

/// Square two-state system; its certificate is only positive semidefinite on
/// V̄*, so it needs the index-one conditions.
pub fn square() -> Example {
    let (n, m, p) = (2, 0, 1);
    let sys = DaeSystem {
        e: from_rows(&[&[1.0, -1.0], &[0.0, 0.0]]),
        a: from_rows(&[&[-1.0, 0.0], &[0.0, 1.0]]),
        b_l: from_rows(&[&[2.0], &[-1.0]]),
        b_m: from_rows(&[&[-1.0], &[1.0]]),
        j: from_rows(&[&[1.0, 1.0]]),
        c: from_rows(&[&[1.0, 1.0]]),
        f: from_rows(&[&[1.0, 1.0]]),
        theta: DMatrix::identity(1, 1),
        mu: 2.0,
        f_l: VectorFunction::state(&texts(&["sin(x1 + x2)"]), n, m, p).unwrap(),
        f_m: VectorFunction::monotone(&texts(&["w1 + exp(w1)"]), 1, m, p).unwrap(),
        h: VectorFunction::output(&texts(&["0"]), m).unwrap(),
        m,
    };
    let gains = ObserverGains::new(from_rows(&[&[15.0], &[-7.0]]), from_rows(&[&[1.0]])).unwrap();
    let p_cert = from_rows(&[&[1.0, -1.0, 0.0], &[1.0, 17.0, 0.0], &[0.0, 0.0, 17.0]]) / 10.0;
    let k = k_last(3, &[&[8.0], &[-134.0], &[17.0]]) / 10.0;
    Example {
        name: "ex2",
        sys,
        gains,
        cert: LmiCertificate::new(p_cert, k, 1.5).unwrap(),
        input: Vec::new(),
    }
}

fn rlc_system() -> DaeSystem {
    let (n, m, p) = (3, 1, 1);
    DaeSystem {
        e: from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0]]),
        a: from_rows(&[&[0.0, 2.0, 0.0], &[0.0, -2.0, -1.0], &[-1.0, 0.0, -1.0]]),
        b_l: from_rows(&[&[0.0], &[1.0], &[0.0]]),
        b_m: from_rows(&[&[0.0], &[0.0], &[1.0]]),
        j: from_rows(&[&[0.0, 0.0, 1.0]]),
        c: from_rows(&[&[1.0, 0.0, -1.0]]),
        f: DMatrix::zeros(1, 3),
        theta: DMatrix::identity(1, 1),
        mu: 0.0,
        // Source voltage enters as u1; in scaled units the forcing is u1 - 1.
        f_l: VectorFunction::state(&texts(&["u1 - 1"]), n, m, p).unwrap(),
        f_m: VectorFunction::monotone(&texts(&["w1^3"]), 1, m, p).unwrap(),
        h: VectorFunction::output(&texts(&["0"]), m).unwrap(),
        m,
    }
}

/// Nonlinear RLC circuit with one innovation channel.
pub fn rlc() -> Example {
    let sys = rlc_system();
    let gains = ObserverGains::new(from_rows(&[&[-1.0], &[5.0], &[5.0]]), from_rows(&[&[4.0]])).unwrap();
    let p_cert = from_rows(&[
        &[12.0, 3.0, 0.0, 0.0],
        &[3.0, 18.0, 0.0, 0.0],
        &[0.0, 0.0, 1.0, 0.0],
        &[0.0, 0.0, 0.0, 1.0],
    ]);
    // K = Pᵀ L̂ makes the image condition hold exactly.
    let k = p_cert.transpose() * gains.embed(3);
    Example {
        name: "ex3",
        sys,
        gains,
        cert: LmiCertificate::new(p_cert, k, 20.0).unwrap(),
        input: texts(&["2"]),
    }
}

/// The RLC circuit without innovations: the plant copy is the estimator.
pub fn rlc_copy() -> Example {
    let sys = rlc_system();
    let gains = ObserverGains::none(3, 1);
    let p_cert = from_rows(&[&[6.6, 5.0, 0.0], &[5.0, 5.7, 0.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
    Example {
        name: "ex3_copy",
        sys,
        gains,
        cert: LmiCertificate::new(p_cert, DMatrix::zeros(3, 3), 12.0).unwrap(),
        input: texts(&["2"]),
    }
}

/// `ẋ = −x` with a useless output and a two-channel innovation whose
/// algebraic part leaves a direction of V̄* invisible to 𝓔.
pub fn counterexample() -> Example {
    let (n, m, p) = (1, 0, 1);
    let sys = DaeSystem {
        e: from_rows(&[&[1.0]]),
        a: from_rows(&[&[-1.0]]),
        b_l: DMatrix::zeros(1, 0),
        b_m: DMatrix::zeros(1, 0),
        j: DMatrix::zeros(0, 1),
        c: from_rows(&[&[0.0]]),
        f: DMatrix::zeros(0, 1),
        theta: DMatrix::zeros(0, 0),
        mu: 0.0,
        f_l: VectorFunction::state(&[], n, m, p).unwrap(),
        f_m: VectorFunction::monotone(&[], 0, m, p).unwrap(),
        h: VectorFunction::output(&texts(&["0"]), m).unwrap(),
        m,
    };
    let gains = ObserverGains::new(from_rows(&[&[0.0, 0.0]]), from_rows(&[&[1.0, -1.0]])).unwrap();
    let p_cert = from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
    Example {
        name: "counterexample",
        sys,
        gains,
        cert: LmiCertificate::new(p_cert, DMatrix::zeros(3, 3), 1.0).unwrap(),
        input: Vec::new(),
    }
}

pub fn all() -> Vec<Example> {
    vec![overdetermined(), square(), rlc(), rlc_copy(), counterexample()]
}
