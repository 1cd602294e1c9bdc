//! The system file: a strict JSON schema holding plant data, nonlinearities,
//! optional gains and certificate, and defaults for sampling, solver and
//! simulation. Unknown fields are rejected so the shipped examples double as
//! documentation.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use daeobs::corpus::Example;
use daeobs::expr::{SampleBox, VectorFunction};
use daeobs::model::{DaeSystem, ObserverGains};
use daeobs::synth::{CheckOptions, LmiCertificate, SamplingPlan};

pub const FORMAT_VERSION: u32 = 1;

/// Dense matrix with an explicit shape, so `0 × n` blocks are representable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matrix {
    pub shape: [usize; 2],
    pub rows: Vec<Vec<f64>>,
}

impl Matrix {
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        Matrix {
            shape: [m.nrows(), m.ncols()],
            rows: (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect(),
        }
    }

    pub fn to_dmatrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let [r, c] = self.shape;
        ensure!(
            self.rows.len() == r,
            "{name}: shape says {r} rows, found {}",
            self.rows.len()
        );
        for (i, row) in self.rows.iter().enumerate() {
            ensure!(row.len() == c, "{name}: row {i} has {} entries, shape says {c}", row.len());
            ensure!(row.iter().all(|v| v.is_finite()), "{name}: row {i} has a non-finite entry");
        }
        Ok(DMatrix::from_fn(r, c, |i, j| self.rows[i][j]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gains {
    #[serde(rename = "L1")]
    pub l1: Matrix,
    #[serde(rename = "L2")]
    pub l2: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    #[serde(rename = "P")]
    pub p: Matrix,
    #[serde(rename = "K")]
    pub k: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    #[serde(default = "default_interval")]
    pub x: [f64; 2],
    #[serde(default = "default_interval")]
    pub u: [f64; 2],
    #[serde(default = "default_interval")]
    pub y: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_c: Option<f64>,
    #[serde(default)]
    pub bounded_domain: bool,
}

fn default_interval() -> [f64; 2] {
    [-3.0, 3.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Thm1,
    Thm2,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Solver {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Simulation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_span: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Number of inputs `m`.
    #[serde(default)]
    pub inputs: usize,
    #[serde(rename = "E")]
    pub e: Matrix,
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "B_L")]
    pub b_l: Matrix,
    #[serde(rename = "B_M")]
    pub b_m: Matrix,
    #[serde(rename = "J")]
    pub j: Matrix,
    #[serde(rename = "C")]
    pub c: Matrix,
    #[serde(rename = "F")]
    pub f: Matrix,
    #[serde(rename = "Theta")]
    pub theta: Matrix,
    pub mu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(rename = "f_L", default)]
    pub f_l: Vec<String>,
    #[serde(rename = "f_M", default)]
    pub f_m: Vec<String>,
    #[serde(default)]
    pub h: Vec<String>,
    /// Input signal `u(t)`, one expression in `t` per input.
    #[serde(default)]
    pub u: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<Gains>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<Certificate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<Sampling>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<Solver>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<Simulation>,
}

impl SystemFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: SystemFile = serde_json::from_str(text).context("invalid system file")?;
        if file.format_version != FORMAT_VERSION {
            bail!(
                "unsupported format_version {} (this build reads {FORMAT_VERSION})",
                file.format_version
            );
        }
        file.system()?;
        file.gains()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("system file serializes");
        let mut out = String::new();
        write_compact(&value, 0, &mut out);
        out.push('\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn display_name(&self) -> &str {
        self.name.as_deref().unwrap_or("system")
    }

    pub fn system(&self) -> Result<DaeSystem> {
        let e = self.e.to_dmatrix("E")?;
        let n = e.ncols();
        let m = self.inputs;
        let c = self.c.to_dmatrix("C")?;
        let p = c.nrows();
        let j = self.j.to_dmatrix("J")?;
        let sys = DaeSystem {
            e,
            a: self.a.to_dmatrix("A")?,
            b_l: self.b_l.to_dmatrix("B_L")?,
            b_m: self.b_m.to_dmatrix("B_M")?,
            c,
            f: self.f.to_dmatrix("F")?,
            theta: self.theta.to_dmatrix("Theta")?,
            mu: self.mu,
            f_l: VectorFunction::state(&self.f_l, n, m, p).context("f_L")?,
            f_m: VectorFunction::monotone(&self.f_m, j.nrows(), m, p).context("f_M")?,
            h: VectorFunction::output(&self.h, m).context("h")?,
            j,
            m,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// Input signal; constant zero when the system has no inputs.
    pub fn input(&self) -> Result<VectorFunction> {
        ensure!(
            self.u.len() == self.inputs,
            "u has {} expressions, the system has {} inputs",
            self.u.len(),
            self.inputs
        );
        Ok(VectorFunction::signal(&self.u).context("u")?)
    }

    pub fn gains(&self) -> Result<Option<ObserverGains>> {
        let Some(g) = &self.gains else {
            return Ok(None);
        };
        let l1 = g.l1.to_dmatrix("L1")?;
        let l2 = g.l2.to_dmatrix("L2")?;
        ensure!(
            l1.nrows() == self.e.shape[0] && l2.nrows() == self.c.shape[0],
            "gains: L1 must have {} rows and L2 {} rows",
            self.e.shape[0],
            self.c.shape[0]
        );
        Ok(Some(ObserverGains::new(l1, l2)?))
    }

    /// File gains, or the empty gains when the file has none.
    pub fn gains_or_none(&self) -> Result<ObserverGains> {
        Ok(self
            .gains()?
            .unwrap_or_else(|| ObserverGains::none(self.e.shape[0], self.c.shape[0])))
    }

    pub fn certificate(&self, delta: Option<f64>) -> Result<Option<LmiCertificate>> {
        let Some(c) = &self.certificate else {
            return Ok(None);
        };
        let delta = delta
            .or(self.delta)
            .context("certificate present but no delta given (file field `delta` or --delta)")?;
        Ok(Some(LmiCertificate::new(c.p.to_dmatrix("P")?, c.k.to_dmatrix("K")?, delta)?))
    }

    pub fn sample_box(&self) -> SampleBox {
        match &self.sampling {
            Some(s) => SampleBox { x: (s.x[0], s.x[1]), u: (s.u[0], s.u[1]), y: (s.y[0], s.y[1]) },
            None => SampleBox::default(),
        }
    }

    pub fn check_options(&self, margin: Option<f64>) -> CheckOptions {
        let mut o = CheckOptions { margin, sample_box: self.sample_box(), ..CheckOptions::default() };
        if let Some(s) = &self.sampling {
            o.sample_pairs = s.pairs.unwrap_or(o.sample_pairs);
            o.seed = s.seed.unwrap_or(o.seed);
        }
        o
    }

    pub fn sampling_plan(&self) -> SamplingPlan {
        let mut plan = SamplingPlan { sample_box: self.sample_box(), ..SamplingPlan::default() };
        if let Some(s) = &self.sampling {
            plan.samples = s.samples.unwrap_or(plan.samples);
            plan.seed = s.seed.unwrap_or(plan.seed);
            plan.omega_c = s.omega_c;
            plan.bounded_domain = s.bounded_domain;
        }
        plan
    }

    pub fn set_gains(&mut self, g: &ObserverGains) {
        self.gains = Some(Gains {
            l1: Matrix::from_dmatrix(&g.l1),
            l2: Matrix::from_dmatrix(&g.l2),
        });
    }

    pub fn set_certificate(&mut self, c: &LmiCertificate) {
        self.certificate = Some(Certificate {
            p: Matrix::from_dmatrix(&c.p),
            k: Matrix::from_dmatrix(&c.k),
        });
        self.delta = Some(c.delta);
    }

    /// File form of a corpus example.
    pub fn from_example(ex: &Example) -> Self {
        let s = &ex.sys;
        let mut file = SystemFile {
            format_version: FORMAT_VERSION,
            name: Some(ex.name.to_string()),
            description: None,
            inputs: s.m,
            e: Matrix::from_dmatrix(&s.e),
            a: Matrix::from_dmatrix(&s.a),
            b_l: Matrix::from_dmatrix(&s.b_l),
            b_m: Matrix::from_dmatrix(&s.b_m),
            j: Matrix::from_dmatrix(&s.j),
            c: Matrix::from_dmatrix(&s.c),
            f: Matrix::from_dmatrix(&s.f),
            theta: Matrix::from_dmatrix(&s.theta),
            mu: s.mu,
            delta: None,
            f_l: s.f_l.texts().to_vec(),
            f_m: s.f_m.texts().to_vec(),
            h: s.h.texts().to_vec(),
            u: ex.input.clone(),
            gains: None,
            certificate: None,
            sampling: None,
            solver: None,
            simulation: None,
        };
        file.set_gains(&ex.gains);
        file.set_certificate(&ex.cert);
        file
    }
}

/// Pretty printing with arrays of scalars kept on one line, so matrices read
/// row by row.
fn write_compact(v: &serde_json::Value, indent: usize, out: &mut String) {
    use serde_json::Value;
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Array(items) if items.iter().all(|x| !x.is_array() && !x.is_object()) => {
            let cells: Vec<String> = items.iter().map(|x| x.to_string()).collect();
            out.push('[');
            out.push_str(&cells.join(", "));
            out.push(']');
        }
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, x) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_compact(x, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) => {
            out.push_str("{\n");
            for (i, (k, x)) in map.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_compact(x, indent + 1, out);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}
