//! Coefficient expression language.
//!
//! Grammar (whitespace is insignificant):
//!
//! ```text
//! expr    = term { ("+" | "-") term } ;
//! term    = unary { "*" unary } ;
//! unary   = "-" unary | primary ;
//! primary = number | "t" | "pi" | "e"
//!         | "x" index "(" lag ")"          (* segment read ξ^i(lag) *)
//!         | "z" index                      (* ξ^i(0) − N^i(ξ) *)
//!         | ("min" | "max") "(" expr "," expr { "," expr } ")"
//!         | ("tanh" | "abs") "(" expr ")"
//!         | "(" expr ")" ;
//! lag     = [ "-" ] ( number | "r0" ) ;
//! index   = digit { digit } ;               (* 1-based component *)
//! number  = digits [ "." digits ] [ ("e" | "E") [ "+" | "-" ] digits ] ;
//! ```
//!
//! Unary minus binds tighter than `*`, which binds tighter than binary `+`/`-`.
//! Every primitive is Lipschitz, so bounded expressions satisfy a global
//! Lipschitz bound in the segment sup-norm.

use std::fmt;

use crate::error::{Error, Result};
use crate::segments::SegmentView;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lag {
    /// A fixed lag `s ∈ [−r0, 0]`.
    Fixed(f64),
    /// The symbolic lag `−r0`.
    NegR0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Min,
    Max,
    Tanh,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Pi,
    E,
    Time,
    /// `x_i(lag)`, `comp` is 1-based.
    Read { comp: usize, lag: Lag },
    /// `z_i`, `comp` is 1-based.
    Z(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Where an expression is allowed to look.
#[derive(Debug, Clone, Copy)]
pub struct ExprContext {
    pub d: usize,
    pub r0: f64,
    /// Grid spacing for the alignment check; `None` skips it.
    pub dt: Option<f64>,
    pub allow_reads: bool,
    pub allow_z: bool,
}

/// Evaluation environment: time, the current segment and resolved `z` values.
#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub t: f64,
    pub seg: Option<SegmentView<'a>>,
    pub z: &'a [f64],
}

impl<'a> Env<'a> {
    pub fn time_only(t: f64) -> Self {
        Env { t, seg: None, z: &[] }
    }
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn eval(&self, env: &Env<'_>) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Pi => std::f64::consts::PI,
            Expr::E => std::f64::consts::E,
            Expr::Time => env.t,
            Expr::Read { comp, lag } => {
                let seg = env.seg.expect("segment read evaluated without a segment");
                match lag {
                    Lag::NegR0 => seg.at(0, comp - 1),
                    Lag::Fixed(s) => seg.at_lag(comp - 1, *s),
                }
            }
            Expr::Z(comp) => env.z[comp - 1],
            Expr::Neg(a) => -a.eval(env),
            Expr::Add(a, b) => a.eval(env) + b.eval(env),
            Expr::Sub(a, b) => a.eval(env) - b.eval(env),
            Expr::Mul(a, b) => a.eval(env) * b.eval(env),
            Expr::Call(f, args) => match f {
                Func::Min => args.iter().map(|a| a.eval(env)).fold(f64::INFINITY, f64::min),
                Func::Max => args.iter().map(|a| a.eval(env)).fold(f64::NEG_INFINITY, f64::max),
                Func::Tanh => args[0].eval(env).tanh(),
                Func::Abs => args[0].eval(env).abs(),
            },
        }
    }

    fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Neg(a) => vec![a],
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => vec![a, b],
            Expr::Call(_, args) => args.iter().collect(),
            _ => vec![],
        }
    }

    /// Pre-order traversal.
    pub fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        for c in self.children() {
            c.visit(f);
        }
    }

    /// All `(component, lag)` segment reads.
    pub fn reads(&self) -> Vec<(usize, Lag)> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Read { comp, lag } = e {
                out.push((*comp, *lag));
            }
        });
        out
    }

    pub fn z_refs(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Z(i) = e {
                out.push(*i);
            }
        });
        out
    }

    /// True if some read is at lag 0 (the current state).
    pub fn reads_present(&self) -> bool {
        self.reads().iter().any(|(_, lag)| matches!(lag, Lag::Fixed(s) if *s == 0.0))
    }

    pub fn is_zero_literal(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    /// Checks component indices, lag range and grid alignment.
    pub fn validate(&self, ctx: &ExprContext) -> Result<()> {
        let mut err = None;
        self.visit(&mut |e| {
            if err.is_some() {
                return;
            }
            match e {
                Expr::Read { comp, lag } => {
                    if !ctx.allow_reads {
                        err = Some(Error::InvalidExpr(format!(
                            "segment read x{comp}(..) not allowed here"
                        )));
                    } else if *comp == 0 || *comp > ctx.d {
                        err = Some(Error::InvalidExpr(format!(
                            "component index {comp} out of range 1..={}",
                            ctx.d
                        )));
                    } else if let Lag::Fixed(s) = lag {
                        let tol = 1e-9 * ctx.r0.max(1e-300);
                        if *s > 0.0 || *s < -ctx.r0 - tol {
                            err = Some(Error::InvalidExpr(format!(
                                "lag must lie in [-r0, 0] (r0 = {}), got {s}",
                                ctx.r0
                            )));
                        } else if let Some(dt) = ctx.dt {
                            let steps = -s / dt;
                            if (steps - steps.round()).abs() > 1e-9 * steps.abs().max(1.0) {
                                err = Some(Error::InvalidExpr(format!(
                                    "lag {s} is not a multiple of dt = {dt}"
                                )));
                            }
                        }
                    }
                }
                Expr::Z(i) => {
                    if !ctx.allow_z {
                        err = Some(Error::InvalidExpr(format!("z{i} not allowed here")));
                    } else if *i == 0 || *i > ctx.d {
                        err = Some(Error::InvalidExpr(format!(
                            "component index {i} out of range 1..={}",
                            ctx.d
                        )));
                    }
                }
                _ => {}
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Pi => write!(f, "pi"),
            Expr::E => write!(f, "e"),
            Expr::Time => write!(f, "t"),
            Expr::Read { comp, lag: Lag::NegR0 } => write!(f, "x{comp}(-r0)"),
            Expr::Read { comp, lag: Lag::Fixed(s) } => {
                if *s == 0.0 {
                    write!(f, "x{comp}(0)")
                } else {
                    write!(f, "x{comp}(-{})", -s)
                }
            }
            Expr::Z(i) => write!(f, "z{i}"),
            Expr::Neg(a) => write!(f, "-{a}"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Parses an expression. Rejects positive lags and zero component indices;
/// range checks that need `d` and `r0` are done by [`Expr::validate`].
pub fn parse_expr(text: &str) -> Result<Expr> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    p.skip_ws();
    if p.at_end() {
        return Err(Error::Syntax { pos: 0, msg: "empty expression".into() });
    }
    let e = p.expr()?;
    p.skip_ws();
    if !p.at_end() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(e)
}

/// Parses and validates against `ctx`.
pub fn parse_with(text: &str, ctx: &ExprContext) -> Result<Expr> {
    let e = parse_expr(text)?;
    e.validate(ctx)?;
    Ok(e)
}

struct Parser<'s> {
    src: &'s [u8],
    pos: usize,
}

impl<'s> Parser<'s> {
    fn error(&self, msg: &str) -> Error {
        Error::Syntax { pos: self.pos, msg: msg.to_string() }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(&format!("expected '{}'", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while self.eat(b'*') {
            lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(b'-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while matches!(p.peek(), Some(c) if c.is_ascii_digit()) {
                p.pos += 1;
            }
            p.pos - s
        };
        let mut n = digits(self);
        if self.peek() == Some(b'.') {
            self.pos += 1;
            n += digits(self);
        }
        if n == 0 {
            self.pos = start;
            return Err(self.error("expected a number"));
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>()
            .map_err(|_| Error::Syntax { pos: start, msg: format!("bad number '{text}'") })
    }

    fn ident(&mut self) -> Option<(usize, &'s str)> {
        self.skip_ws();
        let start = self.pos;
        if !matches!(self.peek(), Some(c) if c.is_ascii_alphabetic()) {
            return None;
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        Some((start, std::str::from_utf8(&self.src[start..self.pos]).expect("ascii")))
    }

    fn component(name: &str, start: usize) -> Result<usize> {
        let idx: usize = name[1..].parse().map_err(|_| Error::Syntax {
            pos: start,
            msg: format!("bad component index in '{name}'"),
        })?;
        if idx == 0 {
            return Err(Error::Syntax {
                pos: start,
                msg: "component indices are 1-based".into(),
            });
        }
        Ok(idx)
    }

    fn lag(&mut self) -> Result<Lag> {
        let neg = self.eat(b'-');
        self.skip_ws();
        let start = self.pos;
        if let Some((_, name)) = self.ident() {
            if name == "r0" && neg {
                return Ok(Lag::NegR0);
            }
            return Err(Error::Syntax {
                pos: start,
                msg: "lag must lie in [-r0, 0]".into(),
            });
        }
        let v = self.number()?;
        if v != 0.0 && !neg {
            return Err(Error::Syntax { pos: start, msg: "lag must lie in [-r0, 0]".into() });
        }
        Ok(Lag::Fixed(if neg && v != 0.0 { -v } else { 0.0 }))
    }

    fn primary(&mut self) -> Result<Expr> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::Num(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() => {
                let (start, name) = self.ident().expect("alphabetic");
                match name {
                    "t" => Ok(Expr::Time),
                    "pi" => Ok(Expr::Pi),
                    "e" => Ok(Expr::E),
                    "min" | "max" | "tanh" | "abs" => {
                        let func = match name {
                            "min" => Func::Min,
                            "max" => Func::Max,
                            "tanh" => Func::Tanh,
                            _ => Func::Abs,
                        };
                        self.expect(b'(')?;
                        let mut args = vec![self.expr()?];
                        while self.eat(b',') {
                            args.push(self.expr()?);
                        }
                        self.expect(b')')?;
                        let ok = match func {
                            Func::Min | Func::Max => args.len() >= 2,
                            _ => args.len() == 1,
                        };
                        if !ok {
                            return Err(Error::Syntax {
                                pos: start,
                                msg: format!("wrong number of arguments to {name}"),
                            });
                        }
                        Ok(Expr::Call(func, args))
                    }
                    _ if name.starts_with('x') && name.len() > 1 => {
                        let comp = Self::component(name, start)?;
                        self.expect(b'(')?;
                        let lag = self.lag()?;
                        self.expect(b')')?;
                        Ok(Expr::Read { comp, lag })
                    }
                    _ if name.starts_with('z') && name.len() > 1 => {
                        Ok(Expr::Z(Self::component(name, start)?))
                    }
                    _ => Err(Error::Syntax { pos: start, msg: format!("unknown identifier '{name}'") }),
                }
            }
            Some(c) => Err(self.error(&format!("unexpected character '{}'", c as char))),
        }
    }
}
