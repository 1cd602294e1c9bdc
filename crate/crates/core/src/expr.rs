//! Scalar expressions for the nonlinearities `f_L`, `f_M`, `h` and inputs `u(t)`.
//!
//! Grammar (whitespace is ignored):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | var | func '(' expr ')' | '(' expr ')'
//! var    := ('x' | 'u' | 'y' | 'w') digits | 't'
//! func   := sin | cos | exp | log | tanh | sqrt | abs | sign
//! ```
//!
//! `^` binds tighter than unary minus (`-x^2 = -(x^2)`) and is right
//! associative; the other binary operators associate to the left. Variable
//! indices are 1-based in text and 0-based in the tree.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    X,
    U,
    Y,
    W,
    T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    pub kind: VarKind,
    pub index: usize,
}

impl Var {
    pub fn new(kind: VarKind, index: usize) -> Self {
        Var { kind, index }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self.kind {
            VarKind::X => 'x',
            VarKind::U => 'u',
            VarKind::Y => 'y',
            VarKind::W => 'w',
            VarKind::T => return write!(f, "t"),
        };
        write!(f, "{c}{}", self.index + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
    Sqrt,
    Abs,
    Sign,
}

impl Func {
    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "tanh" => Func::Tanh,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "sign" => Func::Sign,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Tanh => "tanh",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sign => "sign",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Call(Func, Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax(String),
    UnknownIdentifier(String),
    Arity { func: String, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}", self.describe())]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

impl ParseError {
    fn describe(&self) -> String {
        match &self.kind {
            ParseErrorKind::Syntax(m) => format!("syntax error at offset {}: {m}", self.offset),
            ParseErrorKind::UnknownIdentifier(s) => {
                format!("unknown identifier '{s}' at offset {}", self.offset)
            }
            ParseErrorKind::Arity { func, got } => format!(
                "{func} takes 1 argument, got {got} (offset {})",
                self.offset
            ),
        }
    }
}

/// Which variables an expression may mention, with their dimensions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Scope {
    pub x: usize,
    pub u: usize,
    pub y: usize,
    pub w: usize,
    pub t: bool,
}

impl Scope {
    fn admits(&self, v: Var) -> bool {
        match v.kind {
            VarKind::X => v.index < self.x,
            VarKind::U => v.index < self.u,
            VarKind::Y => v.index < self.y,
            VarKind::W => v.index < self.w,
            VarKind::T => self.t,
        }
    }

    fn dim(&self, kind: VarKind) -> usize {
        match kind {
            VarKind::X => self.x,
            VarKind::U => self.u,
            VarKind::Y => self.y,
            VarKind::W => self.w,
            VarKind::T => usize::from(self.t),
        }
    }
}

// ---------------------------------------------------------------- lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(u8),
    End,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn next(&mut self) -> std::result::Result<(usize, Tok), ParseError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = self.src.get(self.pos) else {
            return Ok((start, Tok::End));
        };
        if c.is_ascii_digit() || c == b'.' {
            let mut end = self.pos;
            while end < self.src.len() && (self.src[end].is_ascii_digit() || self.src[end] == b'.')
            {
                end += 1;
            }
            if end < self.src.len() && (self.src[end] == b'e' || self.src[end] == b'E') {
                let mut k = end + 1;
                if k < self.src.len() && (self.src[k] == b'+' || self.src[k] == b'-') {
                    k += 1;
                }
                if k < self.src.len() && self.src[k].is_ascii_digit() {
                    while k < self.src.len() && self.src[k].is_ascii_digit() {
                        k += 1;
                    }
                    end = k;
                }
            }
            let text = std::str::from_utf8(&self.src[start..end]).unwrap();
            let v: f64 = text.parse().map_err(|_| ParseError {
                offset: start,
                kind: ParseErrorKind::Syntax(format!("malformed number '{text}'")),
            })?;
            self.pos = end;
            return Ok((start, Tok::Num(v)));
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let mut end = self.pos;
            while end < self.src.len()
                && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
            {
                end += 1;
            }
            let text = std::str::from_utf8(&self.src[start..end]).unwrap().to_string();
            self.pos = end;
            return Ok((start, Tok::Ident(text)));
        }
        if b"+-*/^(),".contains(&c) {
            self.pos += 1;
            return Ok((start, Tok::Op(c)));
        }
        Err(ParseError {
            offset: start,
            kind: ParseErrorKind::Syntax(format!("unexpected character '{}'", c as char)),
        })
    }
}

// ---------------------------------------------------------------- parser

struct Parser<'a> {
    lex: Lexer<'a>,
    tok: Tok,
    at: usize,
    scope: Option<Scope>,
}

type PResult<T> = std::result::Result<T, ParseError>;

impl<'a> Parser<'a> {
    fn bump(&mut self) -> PResult<()> {
        let (at, tok) = self.lex.next()?;
        self.at = at;
        self.tok = tok;
        Ok(())
    }

    fn syntax<T>(&self, msg: impl Into<String>) -> PResult<T> {
        Err(ParseError {
            offset: self.at,
            kind: ParseErrorKind::Syntax(msg.into()),
        })
    }

    fn expect(&mut self, op: u8) -> PResult<()> {
        if self.tok == Tok::Op(op) {
            self.bump()
        } else {
            self.syntax(format!("expected '{}'", op as char))
        }
    }

    fn expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.tok {
                Tok::Op(b'+') => BinOp::Add,
                Tok::Op(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump()?;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.tok {
                Tok::Op(b'*') => BinOp::Mul,
                Tok::Op(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump()?;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.tok == Tok::Op(b'-') {
            self.bump()?;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.tok == Tok::Op(b'^') {
            self.bump()?;
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> PResult<Expr> {
        match self.tok.clone() {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Expr::Num(v))
            }
            Tok::Op(b'(') => {
                self.bump()?;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let at = self.at;
                self.bump()?;
                if let Some(func) = Func::from_name(&name) {
                    if self.tok != Tok::Op(b'(') {
                        return self.syntax(format!("expected '(' after {name}"));
                    }
                    self.bump()?;
                    let mut args = Vec::new();
                    if self.tok != Tok::Op(b')') {
                        args.push(self.expr()?);
                        while self.tok == Tok::Op(b',') {
                            self.bump()?;
                            args.push(self.expr()?);
                        }
                    }
                    self.expect(b')')?;
                    if args.len() != 1 {
                        return Err(ParseError {
                            offset: at,
                            kind: ParseErrorKind::Arity {
                                func: name,
                                got: args.len(),
                            },
                        });
                    }
                    return Ok(Expr::Call(func, Box::new(args.pop().unwrap())));
                }
                let var = parse_var(&name).filter(|v| self.scope.is_none_or(|s| s.admits(*v)));
                match var {
                    Some(v) => Ok(Expr::Var(v)),
                    None => Err(ParseError {
                        offset: at,
                        kind: ParseErrorKind::UnknownIdentifier(name),
                    }),
                }
            }
            Tok::End => self.syntax("unexpected end of input"),
            Tok::Op(c) => self.syntax(format!("unexpected '{}'", c as char)),
        }
    }
}

fn parse_var(name: &str) -> Option<Var> {
    if name == "t" {
        return Some(Var::new(VarKind::T, 0));
    }
    let kind = match name.as_bytes().first()? {
        b'x' => VarKind::X,
        b'u' => VarKind::U,
        b'y' => VarKind::Y,
        b'w' => VarKind::W,
        _ => return None,
    };
    let digits = &name[1..];
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0')
    {
        return None;
    }
    let idx: usize = digits.parse().ok()?;
    Some(Var::new(kind, idx - 1))
}

fn parse_with(text: &str, scope: Option<Scope>) -> PResult<Expr> {
    let mut p = Parser {
        lex: Lexer {
            src: text.as_bytes(),
            pos: 0,
        },
        tok: Tok::End,
        at: 0,
        scope,
    };
    p.bump()?;
    let e = p.expr()?;
    if p.tok != Tok::End {
        return p.syntax("unexpected trailing input");
    }
    Ok(e)
}

/// Parse with any well-formed variable name accepted.
pub fn parse(text: &str) -> std::result::Result<Expr, ParseError> {
    parse_with(text, None)
}

/// Parse, rejecting variables outside `scope` as unknown identifiers.
pub fn parse_in(text: &str, scope: &Scope) -> std::result::Result<Expr, ParseError> {
    parse_with(text, Some(*scope))
}

// ---------------------------------------------------------------- printing

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Neg(_) => 3,
        Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => 3,
        Expr::Bin(BinOp::Pow, ..) => 4,
        _ => 5,
    }
}

fn wrap(f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool) -> fmt::Result {
    if paren {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => {
                write!(f, "-{:?}", -v)
            }
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                wrap(f, a, prec(a) < 3)
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
            Expr::Bin(op, l, r) => {
                let (sym, p) = match op {
                    BinOp::Add => ("+", 1),
                    BinOp::Sub => ("-", 1),
                    BinOp::Mul => ("*", 2),
                    BinOp::Div => ("/", 2),
                    BinOp::Pow => ("^", 4),
                };
                if *op == BinOp::Pow {
                    wrap(f, l, prec(l) <= 4)?;
                    write!(f, "^")?;
                    wrap(f, r, prec(r) < 3)
                } else {
                    wrap(f, l, prec(l) < p)?;
                    write!(f, " {sym} ")?;
                    wrap(f, r, prec(r) <= p)
                }
            }
        }
    }
}

// ---------------------------------------------------------------- evaluation

/// Variable values for evaluation. Slices shorter than a referenced index are
/// a dimension error.
#[derive(Debug, Clone, Copy, Default)]
pub struct Env<'a> {
    pub x: &'a [f64],
    pub u: &'a [f64],
    pub y: &'a [f64],
    pub w: &'a [f64],
    pub t: f64,
}

impl<'a> Env<'a> {
    fn get(&self, v: Var) -> Result<f64> {
        let slice = match v.kind {
            VarKind::X => self.x,
            VarKind::U => self.u,
            VarKind::Y => self.y,
            VarKind::W => self.w,
            VarKind::T => return Ok(self.t),
        };
        slice
            .get(v.index)
            .copied()
            .ok_or_else(|| Error::Dimension(format!("variable {v} not supplied")))
    }
}

fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

impl Expr {
    pub fn eval(&self, env: &Env) -> Result<f64> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Var(v) => env.get(*v)?,
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Call(func, a) => {
                let a = a.eval(env)?;
                match func {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Log if a <= 0.0 => return Err(domain(format!("log of {a}"))),
                    Func::Log => a.ln(),
                    Func::Tanh => a.tanh(),
                    Func::Sqrt if a < 0.0 => return Err(domain(format!("sqrt of {a}"))),
                    Func::Sqrt => a.sqrt(),
                    Func::Abs => a.abs(),
                    Func::Sign if a == 0.0 => 0.0,
                    Func::Sign => a.signum(),
                }
            }
            Expr::Bin(op, l, r) => {
                let a = l.eval(env)?;
                let b = r.eval(env)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div if b == 0.0 => return Err(domain("division by zero")),
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b)?,
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(domain(format!("non-finite value in {self}")))
        }
    }

    pub fn vars(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<Var>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                out.insert(*v);
            }
            Expr::Neg(a) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Bin(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
        }
    }

    pub fn depends_on(&self, v: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on(v),
            Expr::Bin(_, l, r) => l.depends_on(v) || r.depends_on(v),
        }
    }

    /// True if any of the given functions occurs in the tree.
    pub fn uses_any(&self, funcs: &[Func]) -> bool {
        match self {
            Expr::Num(_) | Expr::Var(_) => false,
            Expr::Neg(a) => a.uses_any(funcs),
            Expr::Call(f, a) => funcs.contains(f) || a.uses_any(funcs),
            Expr::Bin(_, l, r) => l.uses_any(funcs) || r.uses_any(funcs),
        }
    }
}

fn pow(a: f64, b: f64) -> Result<f64> {
    if b.fract() == 0.0 && b.abs() < i32::MAX as f64 {
        if a == 0.0 && b < 0.0 {
            return Err(domain("zero to a negative power"));
        }
        return Ok(a.powi(b as i32));
    }
    if a < 0.0 {
        return Err(domain(format!("negative base {a} with non-integer exponent {b}")));
    }
    Ok(a.powf(b))
}

// ---------------------------------------------------------------- derivatives

fn num(v: f64) -> Expr {
    Expr::Num(v)
}

fn is_num(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Num(x) if *x == v)
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => num(-v),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        _ if is_num(&a, 0.0) => b,
        _ if is_num(&b, 0.0) => a,
        (Expr::Num(x), Expr::Num(y)) => num(x + y),
        _ => Expr::Bin(BinOp::Add, Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        _ if is_num(&b, 0.0) => a,
        _ if is_num(&a, 0.0) => neg(b),
        (Expr::Num(x), Expr::Num(y)) => num(x - y),
        _ => Expr::Bin(BinOp::Sub, Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        _ if is_num(&a, 0.0) || is_num(&b, 0.0) => num(0.0),
        _ if is_num(&a, 1.0) => b,
        _ if is_num(&b, 1.0) => a,
        (Expr::Num(x), Expr::Num(y)) => num(x * y),
        _ => Expr::Bin(BinOp::Mul, Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    if is_num(&a, 0.0) {
        return num(0.0);
    }
    if is_num(&b, 1.0) {
        return a;
    }
    Expr::Bin(BinOp::Div, Box::new(a), Box::new(b))
}

fn powe(a: Expr, b: Expr) -> Expr {
    if is_num(&b, 1.0) {
        return a;
    }
    if is_num(&b, 0.0) {
        return num(1.0);
    }
    Expr::Bin(BinOp::Pow, Box::new(a), Box::new(b))
}

fn call(f: Func, a: Expr) -> Expr {
    Expr::Call(f, Box::new(a))
}

/// Exact symbolic derivative with light constant folding. The derivative of
/// `abs` is `sign`, which is zero at the origin.
pub fn differentiate(e: &Expr, v: Var) -> Expr {
    match e {
        Expr::Num(_) => num(0.0),
        Expr::Var(w) => num(if *w == v { 1.0 } else { 0.0 }),
        Expr::Neg(a) => neg(differentiate(a, v)),
        Expr::Call(f, a) => {
            let da = differentiate(a, v);
            if is_num(&da, 0.0) {
                return num(0.0);
            }
            let a = (**a).clone();
            let outer = match f {
                Func::Sin => call(Func::Cos, a),
                Func::Cos => neg(call(Func::Sin, a)),
                Func::Exp => call(Func::Exp, a),
                Func::Log => return div(da, a),
                Func::Tanh => sub(num(1.0), powe(call(Func::Tanh, a), num(2.0))),
                Func::Sqrt => return div(da, mul(num(2.0), call(Func::Sqrt, a))),
                Func::Abs => call(Func::Sign, a),
                Func::Sign => return num(0.0),
            };
            mul(outer, da)
        }
        Expr::Bin(op, l, r) => {
            let dl = differentiate(l, v);
            let dr = differentiate(r, v);
            let (l, r) = ((**l).clone(), (**r).clone());
            match op {
                BinOp::Add => add(dl, dr),
                BinOp::Sub => sub(dl, dr),
                BinOp::Mul => add(mul(dl, r.clone()), mul(l, dr)),
                BinOp::Div => {
                    if is_num(&dr, 0.0) {
                        div(dl, r)
                    } else {
                        div(
                            sub(mul(dl, r.clone()), mul(l, dr)),
                            powe(r, num(2.0)),
                        )
                    }
                }
                BinOp::Pow => {
                    if !r.depends_on(v) {
                        if is_num(&dl, 0.0) {
                            return num(0.0);
                        }
                        let reduced = match &r {
                            Expr::Num(c) => num(c - 1.0),
                            _ => sub(r.clone(), num(1.0)),
                        };
                        mul(mul(r, powe(l, reduced)), dl)
                    } else {
                        // d(a^b) = a^b (b' ln a + b a'/a)
                        let inner = add(
                            mul(dr, call(Func::Log, l.clone())),
                            div(mul(r.clone(), dl), l.clone()),
                        );
                        mul(powe(l, r), inner)
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------- vector functions

/// An ordered list of expressions sharing a scope. `primary` names the slot
/// filled by the first argument of [`VectorFunction::eval`].
#[derive(Debug, Clone)]
pub struct VectorFunction {
    exprs: Vec<Expr>,
    texts: Vec<String>,
    scope: Scope,
    primary: VarKind,
}

impl VectorFunction {
    pub fn new(texts: &[String], scope: Scope, primary: VarKind) -> Result<Self> {
        let exprs = texts
            .iter()
            .map(|t| parse_in(t, &scope))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(VectorFunction {
            exprs,
            texts: texts.to_vec(),
            scope,
            primary,
        })
    }

    /// `f_L(x, u, y)` with `x ∈ ℝⁿ`.
    pub fn state(texts: &[String], n: usize, m: usize, p: usize) -> Result<Self> {
        let scope = Scope { x: n, u: m, y: p, ..Scope::default() };
        Self::new(texts, scope, VarKind::X)
    }

    /// `f_M(w, u, y)` with `w = Jx ∈ ℝ^{q_M}`.
    pub fn monotone(texts: &[String], q: usize, m: usize, p: usize) -> Result<Self> {
        let scope = Scope { w: q, u: m, y: p, ..Scope::default() };
        Self::new(texts, scope, VarKind::W)
    }

    /// `h(u)`.
    pub fn output(texts: &[String], m: usize) -> Result<Self> {
        let scope = Scope { u: m, ..Scope::default() };
        Self::new(texts, scope, VarKind::U)
    }

    /// Input signal `u(t)`.
    pub fn signal(texts: &[String]) -> Result<Self> {
        let scope = Scope { t: true, ..Scope::default() };
        Self::new(texts, scope, VarKind::T)
    }

    pub fn out_dim(&self) -> usize {
        self.exprs.len()
    }

    pub fn exprs(&self) -> &[Expr] {
        &self.exprs
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn primary(&self) -> VarKind {
        self.primary
    }

    /// (primary dim, m, p).
    pub fn in_dims(&self) -> (usize, usize, usize) {
        (self.scope.dim(self.primary), self.scope.u, self.scope.y)
    }

    fn env<'a>(&self, arg: &'a [f64], u: &'a [f64], y: &'a [f64]) -> Env<'a> {
        let mut env = Env { u, y, ..Env::default() };
        match self.primary {
            VarKind::X => env.x = arg,
            VarKind::W => env.w = arg,
            VarKind::U => env.u = arg,
            VarKind::Y => env.y = arg,
            VarKind::T => env.t = arg.first().copied().unwrap_or(0.0),
        }
        env
    }

    fn check_dims(&self, arg: &[f64], u: &[f64], y: &[f64]) -> Result<()> {
        let (np, m, p) = self.in_dims();
        let ok = match self.primary {
            VarKind::U => arg.len() == m,
            VarKind::T => arg.len() == 1,
            _ => arg.len() == np && u.len() >= m && y.len() >= p,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "function expects primary dim {np}, got {}",
                arg.len()
            )))
        }
    }

    /// Componentwise evaluation; the first argument fills the primary slot.
    pub fn eval(&self, arg: &[f64], u: &[f64], y: &[f64]) -> Result<DVector<f64>> {
        self.check_dims(arg, u, y)?;
        let env = self.env(arg, u, y);
        let vals = self
            .exprs
            .iter()
            .map(|e| e.eval(&env))
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(vals))
    }

    pub fn eval_t(&self, t: f64) -> Result<DVector<f64>> {
        self.eval(&[t], &[], &[])
    }

    /// Jacobian with respect to every variable of kind `wrt`.
    pub fn jacobian(&self, wrt: VarKind, arg: &[f64], u: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dims(arg, u, y)?;
        let env = self.env(arg, u, y);
        let cols = self.scope.dim(wrt);
        let mut jac = DMatrix::zeros(self.exprs.len(), cols);
        for (i, e) in self.exprs.iter().enumerate() {
            for j in 0..cols {
                let v = Var::new(wrt, j);
                if e.depends_on(v) {
                    jac[(i, j)] = differentiate(e, v).eval(&env)?;
                }
            }
        }
        Ok(jac)
    }

    pub fn uses_any(&self, funcs: &[Func]) -> bool {
        self.exprs.iter().any(|e| e.uses_any(funcs))
    }

    pub fn is_constant_in(&self, kind: VarKind) -> bool {
        self.exprs
            .iter()
            .all(|e| e.vars().iter().all(|v| v.kind != kind))
    }
}

// ---------------------------------------------------------------- sampling

/// Axis-aligned box for certificate sampling, one interval per variable kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleBox {
    pub x: (f64, f64),
    pub u: (f64, f64),
    pub y: (f64, f64),
}

impl SampleBox {
    pub fn symmetric(r: f64) -> Self {
        SampleBox { x: (-r, r), u: (-r, r), y: (-r, r) }
    }
}

impl Default for SampleBox {
    fn default() -> Self {
        SampleBox::symmetric(3.0)
    }
}

fn draw(rng: &mut ChaCha8Rng, n: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    (0..n)
        .map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo })
        .collect()
}

/// Pair generator: half the pairs are independent draws, half are close pairs
/// at shrinking distances so suprema attained near the diagonal are seen.
fn pair(rng: &mut ChaCha8Rng, i: usize, n: usize, bx: (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    let x = draw(rng, n, bx);
    let z = if i % 2 == 0 {
        draw(rng, n, bx)
    } else {
        let scale = 10f64.powi(-(((i / 2) % 6) as i32) - 1);
        x.iter().map(|v| v + scale * rng.gen_range(-1.0..1.0)).collect()
    };
    (x, z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    /// Largest sampled `‖Δf‖ / ‖F Δx‖`; infinite for degenerate pairs.
    pub worst_ratio: f64,
    pub refuted: bool,
    pub degenerate: bool,
    pub samples: usize,
}

/// Sampled check of `‖f(z,u,y) − f(x,u,y)‖ ≤ ‖F(z − x)‖`. A ratio above one
/// refutes the certificate; staying below is evidence only.
pub fn estimate_lipschitz_margin(
    f: &VectorFunction,
    cert: &DMatrix<f64>,
    bx: &SampleBox,
    n_pairs: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    let (n, m, p) = f.in_dims();
    if cert.ncols() != n {
        return Err(Error::Dimension(format!(
            "certificate has {} columns, function expects {n}",
            cert.ncols()
        )));
    }
    // Directions invisible to F are probed explicitly: any change of f along
    // them refutes the certificate outright.
    let blind = crate::subspace::kernel(cert, 1e-12)
        .map(|k| k.basis().clone())
        .unwrap_or_else(|_| DMatrix::zeros(n, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut degenerate = false;
    let mut samples = 0;
    for i in 0..n_pairs {
        let (x, z) = if i % 3 == 2 && blind.ncols() > 0 {
            let x = draw(&mut rng, n, bx.x);
            let c = DVector::from_vec(draw(&mut rng, blind.ncols(), (-1.0, 1.0)));
            let step = &blind * c;
            let z = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            (x, z)
        } else {
            pair(&mut rng, i, n, bx.x)
        };
        let u = draw(&mut rng, m, bx.u);
        let y = draw(&mut rng, p, bx.y);
        let (Ok(fx), Ok(fz)) = (f.eval(&x, &u, &y), f.eval(&z, &u, &y)) else {
            continue;
        };
        samples += 1;
        let df = (fz - fx).norm();
        let dx = DVector::from_vec(z.iter().zip(&x).map(|(a, b)| a - b).collect());
        let fdx = (cert * &dx).norm();
        // Pairs (numerically) inside ker F: only a visible change of f counts.
        if fdx <= 1e-10 * dx.norm() {
            if df > 1e-8 * dx.norm() {
                degenerate = true;
                worst = f64::INFINITY;
            }
            continue;
        }
        worst = worst.max(df / fdx);
    }
    Ok(LipschitzEstimate {
        worst_ratio: worst,
        refuted: degenerate || worst > 1.0 + 1e-9,
        degenerate,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityEstimate {
    /// Smallest sampled `(z−x)ᵀΘ(f(z)−f(x)) − ½μ‖z−x‖²`.
    pub worst_slack: f64,
    pub refuted: bool,
    pub samples: usize,
}

pub fn estimate_monotonicity_margin(
    f: &VectorFunction,
    theta: &DMatrix<f64>,
    mu: f64,
    bx: &SampleBox,
    n_pairs: usize,
    seed: u64,
) -> Result<MonotonicityEstimate> {
    let (q, m, p) = f.in_dims();
    if theta.shape() != (q, q) {
        return Err(Error::Dimension(format!(
            "Theta is {:?}, expected {q}x{q}",
            theta.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    let mut samples = 0;
    for i in 0..n_pairs {
        let (x, z) = pair(&mut rng, i, q, bx.x);
        let u = draw(&mut rng, m, bx.u);
        let y = draw(&mut rng, p, bx.y);
        let (Ok(fx), Ok(fz)) = (f.eval(&x, &u, &y), f.eval(&z, &u, &y)) else {
            continue;
        };
        samples += 1;
        let dx = DVector::from_vec(z.iter().zip(&x).map(|(a, b)| a - b).collect());
        let slack = dx.dot(&(theta * (fz - fx))) - 0.5 * mu * dx.norm_squared();
        worst = worst.min(slack);
    }
    Ok(MonotonicityEstimate {
        worst_slack: worst,
        refuted: worst < -1e-12,
        samples,
    })
}
