//! A small text format for user ODE models.
//!
//! ```text
//! params: a [0, inf], b [0, inf], c [0, inf]
//! states: V, R
//! dV = c*(V - V^3/3 + R)
//! dR = -(1/c)*(V - a + b*R)
//! ```
//!
//! Statements are separated by newlines or `;`, `#` starts a comment. When the
//! `states:` line is absent the states are taken from the `d<name>` lines in
//! order; when `params:` is absent every other free symbol becomes an
//! unbounded parameter in order of first use. Jacobians come from forward-mode
//! dual numbers evaluated over a flat instruction tape.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use super::{Dynamics, OdeError, OdeSystem};

#[derive(Debug, Error)]
pub enum DslError {
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("undefined symbol `{name}` at line {line}, column {col}")]
    UndefinedSymbol { name: String, line: usize, col: usize },
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    Sep,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, DslError> {
    let mut out = Vec::new();
    for (li, raw_line) in src.lines().enumerate() {
        let line = li + 1;
        let text = raw_line.split('#').next().unwrap_or("");
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s: String = chars[start..i].iter().collect();
                let v = s.parse::<f64>().map_err(|_| DslError::Parse {
                    line,
                    col,
                    msg: format!("malformed number `{s}`"),
                })?;
                out.push(Token { tok: Tok::Num(v), line, col });
            } else if c.is_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                out.push(Token { tok: Tok::Ident(s), line, col });
            } else if c == ';' {
                out.push(Token { tok: Tok::Sep, line, col });
                i += 1;
            } else if "+-*/^()=,[]:".contains(c) {
                out.push(Token { tok: Tok::Sym(c), line, col });
                i += 1;
            } else {
                return Err(DslError::Parse {
                    line,
                    col,
                    msg: format!("unexpected character `{c}`"),
                });
            }
        }
        out.push(Token {
            tok: Tok::Sep,
            line,
            col: chars.len() + 1,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
}

impl Func {
    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "exp" => Func::Exp,
            "log" | "ln" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
enum Expr {
    Num(f64),
    Sym { name: String, line: usize, col: usize },
    Neg(Box<Expr>),
    Bin(char, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

struct Parser<'a> {
    toks: &'a [Token],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Token {
        &self.toks[self.pos.min(self.toks.len() - 1)]
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn next(&mut self) -> Token {
        let t = self.peek().clone();
        self.pos += 1;
        t
    }

    fn err<T>(&self, tok: &Token, msg: impl Into<String>) -> Result<T, DslError> {
        Err(DslError::Parse {
            line: tok.line,
            col: tok.col,
            msg: msg.into(),
        })
    }

    fn eat_sym(&mut self, c: char) -> bool {
        if !self.at_end() && self.peek().tok == Tok::Sym(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, c: char) -> Result<(), DslError> {
        if self.eat_sym(c) {
            Ok(())
        } else {
            let t = self.peek().clone();
            self.err(&t, format!("expected `{c}`"))
        }
    }

    fn expr(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat_sym('+') {
                lhs = Expr::Bin('+', Box::new(lhs), Box::new(self.term()?));
            } else if self.eat_sym('-') {
                lhs = Expr::Bin('-', Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_sym('*') {
                lhs = Expr::Bin('*', Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat_sym('/') {
                lhs = Expr::Bin('/', Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, DslError> {
        if self.eat_sym('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_sym('+') {
            return self.unary();
        }
        self.power()
    }

    // `^` binds tighter than unary minus on its left and is right-associative.
    fn power(&mut self) -> Result<Expr, DslError> {
        let base = self.primary()?;
        if self.eat_sym('^') {
            let exp = self.unary()?;
            return Ok(Expr::Bin('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, DslError> {
        let tok = self.next();
        match &tok.tok {
            Tok::Num(v) => Ok(Expr::Num(*v)),
            Tok::Ident(name) => {
                if self.eat_sym('(') {
                    let Some(f) = Func::from_name(name) else {
                        return self.err(&tok, format!("unknown function `{name}`"));
                    };
                    let arg = self.expr()?;
                    self.expect_sym(')')?;
                    Ok(Expr::Call(f, Box::new(arg)))
                } else {
                    Ok(Expr::Sym {
                        name: name.clone(),
                        line: tok.line,
                        col: tok.col,
                    })
                }
            }
            Tok::Sym('(') => {
                let e = self.expr()?;
                self.expect_sym(')')?;
                Ok(e)
            }
            _ => self.err(&tok, "expected a number, symbol or `(`"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Var(usize),
    Time,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Powi(usize, i32),
    Powf(usize, f64),
    Pow(usize, usize),
    Call(Func, usize),
}

/// Compiled model: one instruction tape shared by all equations.
struct Tape {
    ops: Vec<Op>,
    outputs: Vec<usize>,
    n_states: usize,
    n_params: usize,
}

impl Tape {
    fn push(&mut self, op: Op) -> usize {
        self.ops.push(op);
        self.ops.len() - 1
    }

    fn compile(&mut self, e: &Expr, lookup: &dyn Fn(&str) -> Option<Op>) -> Result<usize, DslError> {
        let slot = match e {
            Expr::Num(v) => self.push(Op::Const(*v)),
            Expr::Sym { name, line, col } => match lookup(name) {
                Some(op) => self.push(op),
                None => {
                    return Err(DslError::UndefinedSymbol {
                        name: name.clone(),
                        line: *line,
                        col: *col,
                    })
                }
            },
            Expr::Neg(a) => {
                let a = self.compile(a, lookup)?;
                self.push(Op::Neg(a))
            }
            Expr::Call(f, a) => {
                let a = self.compile(a, lookup)?;
                self.push(Op::Call(*f, a))
            }
            Expr::Bin(c, a, b) => {
                let ia = self.compile(a, lookup)?;
                if *c == '^' {
                    if let Some(k) = const_value(b) {
                        if k.fract() == 0.0 && k.abs() <= i32::MAX as f64 {
                            return Ok(self.push(Op::Powi(ia, k as i32)));
                        }
                        return Ok(self.push(Op::Powf(ia, k)));
                    }
                }
                let ib = self.compile(b, lookup)?;
                self.push(match c {
                    '+' => Op::Add(ia, ib),
                    '-' => Op::Sub(ia, ib),
                    '*' => Op::Mul(ia, ib),
                    '/' => Op::Div(ia, ib),
                    _ => Op::Pow(ia, ib),
                })
            }
        };
        Ok(slot)
    }

    fn values(&self, theta: &[f64], x: &[f64], t: f64, v: &mut [f64]) {
        for (k, op) in self.ops.iter().enumerate() {
            v[k] = match *op {
                Op::Const(c) => c,
                Op::Var(i) => self.var(theta, x, i),
                Op::Time => t,
                Op::Add(a, b) => v[a] + v[b],
                Op::Sub(a, b) => v[a] - v[b],
                Op::Mul(a, b) => v[a] * v[b],
                Op::Div(a, b) => v[a] / v[b],
                Op::Neg(a) => -v[a],
                Op::Powi(a, n) => v[a].powi(n),
                Op::Powf(a, p) => v[a].powf(p),
                Op::Pow(a, b) => v[a].powf(v[b]),
                Op::Call(f, a) => apply(f, v[a]),
            };
        }
    }

    fn var(&self, theta: &[f64], x: &[f64], i: usize) -> f64 {
        if i < self.n_states {
            x[i]
        } else {
            theta[i - self.n_states]
        }
    }

    /// Values plus tangents with respect to every state and parameter;
    /// `g[k * nv + s]` is the derivative of slot `k` along seed `s`.
    fn duals(&self, theta: &[f64], x: &[f64], t: f64, v: &mut [f64], g: &mut [f64]) {
        let nv = self.n_states + self.n_params;
        g.fill(0.0);
        for (k, op) in self.ops.iter().enumerate() {
            let (head, tail) = g.split_at_mut(k * nv);
            let gk = &mut tail[..nv];
            let ga = |a: usize| &head[a * nv..(a + 1) * nv];
            match *op {
                Op::Const(c) => v[k] = c,
                Op::Var(i) => {
                    v[k] = self.var(theta, x, i);
                    gk[i] = 1.0;
                }
                Op::Time => v[k] = t,
                Op::Add(a, b) => {
                    v[k] = v[a] + v[b];
                    lin2(gk, ga(a), 1.0, ga(b), 1.0);
                }
                Op::Sub(a, b) => {
                    v[k] = v[a] - v[b];
                    lin2(gk, ga(a), 1.0, ga(b), -1.0);
                }
                Op::Mul(a, b) => {
                    v[k] = v[a] * v[b];
                    lin2(gk, ga(a), v[b], ga(b), v[a]);
                }
                Op::Div(a, b) => {
                    let q = v[a] / v[b];
                    v[k] = q;
                    lin2(gk, ga(a), 1.0 / v[b], ga(b), -q / v[b]);
                }
                Op::Neg(a) => {
                    v[k] = -v[a];
                    lin1(gk, ga(a), -1.0);
                }
                Op::Powi(a, n) => {
                    v[k] = v[a].powi(n);
                    let d = if n == 0 { 0.0 } else { n as f64 * v[a].powi(n - 1) };
                    lin1(gk, ga(a), d);
                }
                Op::Powf(a, p) => {
                    v[k] = v[a].powf(p);
                    lin1(gk, ga(a), p * v[a].powf(p - 1.0));
                }
                Op::Pow(a, b) => {
                    let r = v[a].powf(v[b]);
                    v[k] = r;
                    lin2(gk, ga(a), v[b] * v[a].powf(v[b] - 1.0), ga(b), r * v[a].ln());
                }
                Op::Call(f, a) => {
                    let u = v[a];
                    v[k] = apply(f, u);
                    let d = match f {
                        Func::Exp => v[k],
                        Func::Log => 1.0 / u,
                        Func::Sin => u.cos(),
                        Func::Cos => -u.sin(),
                        Func::Sqrt => 0.5 / v[k],
                    };
                    lin1(gk, ga(a), d);
                }
            }
        }
    }
}

fn apply(f: Func, u: f64) -> f64 {
    match f {
        Func::Exp => u.exp(),
        Func::Log => u.ln(),
        Func::Sin => u.sin(),
        Func::Cos => u.cos(),
        Func::Sqrt => u.sqrt(),
    }
}

fn lin1(out: &mut [f64], a: &[f64], ca: f64) {
    for (o, x) in out.iter_mut().zip(a) {
        *o = ca * x;
    }
}

// Skips zero coefficients so that an inf/NaN tangent on an inert branch does
// not poison the result.
fn lin2(out: &mut [f64], a: &[f64], ca: f64, b: &[f64], cb: f64) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        let l = if *x == 0.0 { 0.0 } else { ca * x };
        let r = if *y == 0.0 { 0.0 } else { cb * y };
        *o = l + r;
    }
}

fn const_value(e: &Expr) -> Option<f64> {
    match e {
        Expr::Num(v) => Some(*v),
        Expr::Neg(a) => const_value(a).map(|v| -v),
        Expr::Bin(c, a, b) => {
            let (a, b) = (const_value(a)?, const_value(b)?);
            Some(match c {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                '/' => a / b,
                _ => a.powf(b),
            })
        }
        Expr::Call(f, a) => const_value(a).map(|v| apply(*f, v)),
        Expr::Sym { .. } => None,
    }
}

struct DslDynamics {
    tape: Tape,
}

impl Dynamics for DslDynamics {
    fn dim_x(&self) -> usize {
        self.tape.n_states
    }

    fn dim_theta(&self) -> usize {
        self.tape.n_params
    }

    fn rhs(&self, theta: &[f64], x: &[f64], t: f64, out: &mut [f64]) {
        let mut v = vec![0.0; self.tape.ops.len()];
        self.tape.values(theta, x, t, &mut v);
        for (o, &k) in out.iter_mut().zip(&self.tape.outputs) {
            *o = v[k];
        }
    }

    fn jac_x(&self, theta: &[f64], x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.tape.n_states;
        let mut f = vec![0.0; d];
        let mut jt = vec![0.0; self.tape.n_params * d];
        self.eval_all(theta, x, t, &mut f, out, &mut jt);
    }

    fn jac_theta(&self, theta: &[f64], x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.tape.n_states;
        let mut f = vec![0.0; d];
        let mut jx = vec![0.0; d * d];
        self.eval_all(theta, x, t, &mut f, &mut jx, out);
    }

    fn eval_all(&self, theta: &[f64], x: &[f64], t: f64, f: &mut [f64], jx: &mut [f64], jt: &mut [f64]) {
        let tape = &self.tape;
        let (d, p) = (tape.n_states, tape.n_params);
        let nv = d + p;
        let mut v = vec![0.0; tape.ops.len()];
        let mut g = vec![0.0; tape.ops.len() * nv];
        tape.duals(theta, x, t, &mut v, &mut g);
        for (j, &k) in tape.outputs.iter().enumerate() {
            f[j] = v[k];
            let gk = &g[k * nv..(k + 1) * nv];
            for i in 0..d {
                jx[i * d + j] = gk[i];
            }
            for i in 0..p {
                jt[i * d + j] = gk[d + i];
            }
        }
    }
}

struct Equation {
    state: String,
    expr: Expr,
    line: usize,
    col: usize,
}

fn parse_bound(p: &mut Parser) -> Result<f64, DslError> {
    let neg = p.eat_sym('-');
    if !neg {
        p.eat_sym('+');
    }
    let tok = p.next();
    let v = match &tok.tok {
        Tok::Num(v) => *v,
        Tok::Ident(s) if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") => f64::INFINITY,
        _ => return p.err(&tok, "expected a numeric bound or `inf`"),
    };
    Ok(if neg { -v } else { v })
}

fn ident_at(tok: &Token) -> Option<&str> {
    match &tok.tok {
        Tok::Ident(s) => Some(s),
        _ => None,
    }
}

pub fn parse_ode_dsl(source: &str) -> Result<OdeSystem, DslError> {
    let toks = lex(source)?;
    let mut params: Option<Vec<(String, f64, f64)>> = None;
    let mut states: Option<Vec<String>> = None;
    let mut equations: Vec<Equation> = Vec::new();

    // Split into statements.
    let mut stmts: Vec<&[Token]> = Vec::new();
    let mut start = 0;
    for (i, t) in toks.iter().enumerate() {
        if t.tok == Tok::Sep {
            if i > start {
                stmts.push(&toks[start..i]);
            }
            start = i + 1;
        }
    }

    for stmt in stmts {
        let mut p = Parser { toks: stmt, pos: 0 };
        let head = p.next();
        let Some(name) = ident_at(&head).map(str::to_string) else {
            return p.err(&head, "expected `params:`, `states:` or an equation `d<state> = ...`");
        };
        if (name == "params" || name == "states") && p.eat_sym(':') {
            if name == "params" {
                if params.is_some() {
                    return p.err(&head, "duplicate `params:` declaration");
                }
                let mut list: Vec<(String, f64, f64)> = Vec::new();
                while !p.at_end() {
                    let tok = p.next();
                    let Some(pn) = ident_at(&tok).map(str::to_string) else {
                        return p.err(&tok, "expected a parameter name");
                    };
                    let (lo, hi) = if p.eat_sym('[') {
                        let lo = parse_bound(&mut p)?;
                        p.expect_sym(',')?;
                        let hi = parse_bound(&mut p)?;
                        p.expect_sym(']')?;
                        (lo, hi)
                    } else {
                        (f64::NEG_INFINITY, f64::INFINITY)
                    };
                    if list.iter().any(|(n, _, _)| *n == pn) {
                        return p.err(&tok, format!("parameter `{pn}` declared twice"));
                    }
                    list.push((pn, lo, hi));
                    if !p.at_end() {
                        p.expect_sym(',')?;
                    }
                }
                params = Some(list);
            } else {
                if states.is_some() {
                    return p.err(&head, "duplicate `states:` declaration");
                }
                let mut list = Vec::new();
                while !p.at_end() {
                    let tok = p.next();
                    let Some(sn) = ident_at(&tok).map(str::to_string) else {
                        return p.err(&tok, "expected a state name");
                    };
                    if list.contains(&sn) {
                        return p.err(&tok, format!("state `{sn}` declared twice"));
                    }
                    list.push(sn);
                    if !p.at_end() {
                        p.expect_sym(',')?;
                    }
                }
                states = Some(list);
            }
            continue;
        }
        if name.len() < 2 || !name.starts_with('d') {
            return p.err(&head, "equations must have the form `d<state> = <expression>`");
        }
        p.expect_sym('=')?;
        let expr = p.expr()?;
        if !p.at_end() {
            let t = p.peek().clone();
            return p.err(&t, "unexpected token after expression");
        }
        equations.push(Equation {
            state: name[1..].to_string(),
            expr,
            line: head.line,
            col: head.col,
        });
    }

    if equations.is_empty() {
        return Err(DslError::Model("no equations found".into()));
    }
    let states = match states {
        Some(s) => s,
        None => equations.iter().map(|e| e.state.clone()).collect(),
    };
    let mut ordered: Vec<Option<&Equation>> = vec![None; states.len()];
    for eq in &equations {
        let Some(idx) = states.iter().position(|s| *s == eq.state) else {
            return Err(DslError::UndefinedSymbol {
                name: eq.state.clone(),
                line: eq.line,
                col: eq.col + 1,
            });
        };
        if ordered[idx].is_some() {
            return Err(DslError::Parse {
                line: eq.line,
                col: eq.col,
                msg: format!("second equation for state `{}`", eq.state),
            });
        }
        ordered[idx] = Some(eq);
    }
    if let Some(i) = ordered.iter().position(Option::is_none) {
        return Err(DslError::Model(format!("state `{}` has no equation", states[i])));
    }
    let ordered: Vec<&Equation> = ordered.into_iter().flatten().collect();

    let params = match params {
        Some(p) => p,
        None => {
            let mut found: Vec<String> = Vec::new();
            for eq in &ordered {
                collect_symbols(&eq.expr, &mut found);
            }
            found
                .into_iter()
                .filter(|s| s != "t" && !states.contains(s))
                .map(|s| (s, f64::NEG_INFINITY, f64::INFINITY))
                .collect()
        }
    };

    let mut index: HashMap<String, Op> = HashMap::new();
    for (i, s) in states.iter().enumerate() {
        index.insert(s.clone(), Op::Var(i));
    }
    for (i, (pn, _, _)) in params.iter().enumerate() {
        if index.contains_key(pn) {
            return Err(DslError::Model(format!("`{pn}` is both a state and a parameter")));
        }
        index.insert(pn.clone(), Op::Var(states.len() + i));
    }
    if !index.contains_key("t") {
        index.insert("t".into(), Op::Time);
    }
    let lookup = |s: &str| index.get(s).copied();

    let mut tape = Tape {
        ops: Vec::new(),
        outputs: Vec::new(),
        n_states: states.len(),
        n_params: params.len(),
    };
    for eq in &ordered {
        let out = tape.compile(&eq.expr, &lookup)?;
        tape.outputs.push(out);
    }

    let (lower, upper): (Vec<f64>, Vec<f64>) = params.iter().map(|(_, lo, hi)| (*lo, *hi)).unzip();
    let system = OdeSystem::new("dsl", Arc::new(DslDynamics { tape }), lower, upper)?
        .with_component_names(states)
        .with_param_names(params.into_iter().map(|(n, _, _)| n).collect());
    Ok(system)
}

fn collect_symbols(e: &Expr, out: &mut Vec<String>) {
    match e {
        Expr::Num(_) => {}
        Expr::Sym { name, .. } => {
            if !out.contains(name) {
                out.push(name.clone());
            }
        }
        Expr::Neg(a) | Expr::Call(_, a) => collect_symbols(a, out),
        Expr::Bin(_, a, b) => {
            collect_symbols(a, out);
            collect_symbols(b, out);
        }
    }
}
