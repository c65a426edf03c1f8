//! Scalar expressions over state variables `x1..xn`.
//!
//! Expressions are parsed from text, evaluated in double precision and
//! differentiated symbolically. Variables are stored zero-based, so `x1`
//! is `Var(0)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {msg}")]
    Syntax { offset: usize, msg: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdent { name: String, offset: usize },
    #[error("`{name}` at byte {offset} expects {expected} argument(s), got {got}")]
    Arity {
        name: String,
        offset: usize,
        expected: usize,
        got: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("variable x{} out of range for a {dim}-dimensional state", .index + 1)]
    VarOutOfRange { index: usize, dim: usize },
    #[error("cannot differentiate {0}")]
    NotDifferentiable(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Sin,
    Cos,
    Tan,
    Exp,
    Sqrt,
    Abs,
}

impl UnOp {
    fn name(self) -> &'static str {
        match self {
            UnOp::Neg => "-",
            UnOp::Sin => "sin",
            UnOp::Cos => "cos",
            UnOp::Tan => "tan",
            UnOp::Exp => "exp",
            UnOp::Sqrt => "sqrt",
            UnOp::Abs => "abs",
        }
    }

    fn from_name(s: &str) -> Option<UnOp> {
        Some(match s {
            "sin" => UnOp::Sin,
            "cos" => UnOp::Cos,
            "tan" => UnOp::Tan,
            "exp" => UnOp::Exp,
            "sqrt" => UnOp::Sqrt,
            "abs" => UnOp::Abs,
            _ => return None,
        })
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

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }

    fn prec(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Var(usize),
    Unary(UnOp, Expr),
    Binary(BinOp, Expr, Expr),
}

/// Immutable expression tree. Cloning is cheap (shared nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct Expr(Arc<Node>);

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr(Arc::new(Node::Const(c)))
    }

    pub fn var(index: usize) -> Expr {
        Expr(Arc::new(Node::Var(index)))
    }

    pub fn zero() -> Expr {
        Expr::constant(0.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match *self.0 {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn unary(op: UnOp, a: Expr) -> Expr {
        if let Some(c) = a.as_const() {
            let v = apply_unary(op, c);
            if let Ok(v) = v {
                return Expr::constant(v);
            }
        }
        Expr(Arc::new(Node::Unary(op, a)))
    }

    pub fn binary(op: BinOp, a: Expr, b: Expr) -> Expr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if let Ok(v) = apply_binary(op, x, y) {
                return Expr::constant(v);
            }
        }
        match op {
            BinOp::Add if a.is_zero() => return b,
            BinOp::Add | BinOp::Sub if b.is_zero() => return a,
            BinOp::Sub if a.is_zero() => return Expr::unary(UnOp::Neg, b),
            BinOp::Mul if a.is_zero() || b.is_zero() => return Expr::zero(),
            BinOp::Mul if a.as_const() == Some(1.0) => return b,
            BinOp::Mul | BinOp::Div if b.as_const() == Some(1.0) => return a,
            BinOp::Div if a.is_zero() => return Expr::zero(),
            BinOp::Pow if b.is_zero() => return Expr::constant(1.0),
            BinOp::Pow if b.as_const() == Some(1.0) => return a,
            _ => {}
        }
        Expr(Arc::new(Node::Binary(op, a, b)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, o: Expr) -> Expr {
        Expr::binary(BinOp::Add, self, o)
    }
    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, o: Expr) -> Expr {
        Expr::binary(BinOp::Sub, self, o)
    }
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, o: Expr) -> Expr {
        Expr::binary(BinOp::Mul, self, o)
    }
    #[allow(clippy::should_implement_trait)]
    pub fn div(self, o: Expr) -> Expr {
        Expr::binary(BinOp::Div, self, o)
    }
    pub fn pow(self, o: Expr) -> Expr {
        Expr::binary(BinOp::Pow, self, o)
    }
    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Expr {
        Expr::unary(UnOp::Neg, self)
    }
    pub fn scale(self, k: f64) -> Expr {
        Expr::constant(k).mul(self)
    }

    /// Sum of expressions; empty sum is zero.
    pub fn sum<I: IntoIterator<Item = Expr>>(it: I) -> Expr {
        it.into_iter().fold(Expr::zero(), Expr::add)
    }

    /// Largest variable index referenced plus one (0 for constants).
    pub fn arity(&self) -> usize {
        match &*self.0 {
            Node::Const(_) => 0,
            Node::Var(i) => i + 1,
            Node::Unary(_, a) => a.arity(),
            Node::Binary(_, a, b) => a.arity().max(b.arity()),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, ExprError> {
        match &*self.0 {
            Node::Const(c) => Ok(*c),
            Node::Var(i) => x.get(*i).copied().ok_or(ExprError::VarOutOfRange {
                index: *i,
                dim: x.len(),
            }),
            Node::Unary(op, a) => apply_unary(*op, a.eval(x)?),
            Node::Binary(op, a, b) => apply_binary(*op, a.eval(x)?, b.eval(x)?),
        }
    }

    /// Symbolic partial derivative with respect to the zero-based variable `var`.
    pub fn diff(&self, var: usize) -> Result<Expr, ExprError> {
        Ok(match &*self.0 {
            Node::Const(_) => Expr::zero(),
            Node::Var(i) => Expr::constant(if *i == var { 1.0 } else { 0.0 }),
            Node::Unary(op, a) => {
                let da = a.diff(var)?;
                if da.is_zero() && *op != UnOp::Abs {
                    return Ok(Expr::zero());
                }
                match op {
                    UnOp::Neg => da.neg(),
                    UnOp::Sin => Expr::unary(UnOp::Cos, a.clone()).mul(da),
                    UnOp::Cos => Expr::unary(UnOp::Sin, a.clone()).neg().mul(da),
                    UnOp::Tan => da.div(Expr::unary(UnOp::Cos, a.clone()).pow(Expr::constant(2.0))),
                    UnOp::Exp => self.clone().mul(da),
                    UnOp::Sqrt => da.div(self.clone().scale(2.0)),
                    UnOp::Abs => {
                        if da.is_zero() {
                            return Ok(Expr::zero());
                        }
                        return Err(ExprError::NotDifferentiable(format!("abs({a})")));
                    }
                }
            }
            Node::Binary(op, a, b) => {
                let da = a.diff(var)?;
                let db = b.diff(var)?;
                match op {
                    BinOp::Add => da.add(db),
                    BinOp::Sub => da.sub(db),
                    BinOp::Mul => da.mul(b.clone()).add(a.clone().mul(db)),
                    BinOp::Div => da
                        .mul(b.clone())
                        .sub(a.clone().mul(db))
                        .div(b.clone().pow(Expr::constant(2.0))),
                    BinOp::Pow => match b.as_const() {
                        Some(c) => Expr::constant(c)
                            .mul(a.clone().pow(Expr::constant(c - 1.0)))
                            .mul(da),
                        None if db.is_zero() => b
                            .clone()
                            .mul(a.clone().pow(b.clone().sub(Expr::constant(1.0))))
                            .mul(da),
                        None => {
                            return Err(ExprError::NotDifferentiable(format!(
                                "variable exponent in {self}"
                            )))
                        }
                    },
                }
            }
        })
    }

    pub fn gradient(&self, n: usize) -> Result<ExprVec, ExprError> {
        (0..n).map(|v| self.diff(v)).collect::<Result<Vec<_>, _>>().map(ExprVec::new)
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8) -> fmt::Result {
        match &*self.0 {
            Node::Const(c) => {
                if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                    write!(f, "({c:?})")
                } else {
                    write!(f, "{c:?}")
                }
            }
            Node::Var(i) => write!(f, "x{}", i + 1),
            Node::Unary(UnOp::Neg, a) => {
                // unary minus binds tighter than * but looser than ^
                let wrap = parent > 3;
                if wrap {
                    write!(f, "(")?;
                }
                write!(f, "-")?;
                a.fmt_prec(f, 3)?;
                if wrap {
                    write!(f, ")")?;
                }
                Ok(())
            }
            Node::Unary(op, a) => {
                write!(f, "{}(", op.name())?;
                a.fmt_prec(f, 0)?;
                write!(f, ")")
            }
            Node::Binary(op, a, b) => {
                let p = op.prec();
                let wrap = p < parent || (p == parent && *op == BinOp::Pow);
                if wrap {
                    write!(f, "(")?;
                }
                // left-assoc: right child needs strictly higher precedence
                let (lp, rp) = if *op == BinOp::Pow { (p + 1, p) } else { (p, p + 1) };
                a.fmt_prec(f, lp)?;
                write!(f, " {} ", op.symbol())?;
                b.fmt_prec(f, rp)?;
                if wrap {
                    write!(f, ")")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

fn apply_unary(op: UnOp, a: f64) -> Result<f64, ExprError> {
    Ok(match op {
        UnOp::Neg => -a,
        UnOp::Sin => a.sin(),
        UnOp::Cos => a.cos(),
        UnOp::Tan => a.tan(),
        UnOp::Exp => a.exp(),
        UnOp::Sqrt => {
            if a < 0.0 {
                return Err(ExprError::Domain(format!("sqrt of negative value {a}")));
            }
            a.sqrt()
        }
        UnOp::Abs => a.abs(),
    })
}

fn apply_binary(op: BinOp, a: f64, b: f64) -> Result<f64, ExprError> {
    Ok(match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == 0.0 {
                return Err(ExprError::Domain("division by zero".into()));
            }
            a / b
        }
        BinOp::Pow => {
            if b.fract() == 0.0 && b.abs() <= i32::MAX as f64 {
                if a == 0.0 && b < 0.0 {
                    return Err(ExprError::Domain("zero raised to a negative power".into()));
                }
                a.powi(b as i32)
            } else {
                if a < 0.0 {
                    return Err(ExprError::Domain(format!(
                        "negative base {a} with non-integer exponent {b}"
                    )));
                }
                a.powf(b)
            }
        }
    })
}

/// Column of expressions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExprVec(Vec<Expr>);

impl ExprVec {
    pub fn new(items: Vec<Expr>) -> Self {
        ExprVec(items)
    }

    pub fn zeros(n: usize) -> Self {
        ExprVec(vec![Expr::zero(); n])
    }

    pub fn parse_all<S: AsRef<str>>(srcs: &[S]) -> Result<Self, ExprError> {
        srcs.iter().map(|s| parse(s.as_ref())).collect::<Result<Vec<_>, _>>().map(ExprVec)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn items(&self) -> &[Expr] {
        &self.0
    }

    pub fn get(&self, i: usize) -> &Expr {
        &self.0[i]
    }

    pub fn arity(&self) -> usize {
        self.0.iter().map(Expr::arity).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>, ExprError> {
        let mut out = DVector::zeros(self.0.len());
        for (o, e) in out.iter_mut().zip(&self.0) {
            *o = e.eval(x)?;
        }
        Ok(out)
    }

    /// Weighted sum `wᵀ self`.
    pub fn dot(&self, w: &[f64]) -> Expr {
        Expr::sum(self.0.iter().zip(w).map(|(e, &k)| e.clone().scale(k)))
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.0.iter().map(|e| e.to_string()).collect()
    }
}

impl FromIterator<Expr> for ExprVec {
    fn from_iter<I: IntoIterator<Item = Expr>>(iter: I) -> Self {
        ExprVec(iter.into_iter().collect())
    }
}

/// Row-major matrix of expressions with fixed shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprMat {
    rows: usize,
    cols: usize,
    data: Vec<Expr>,
}

impl ExprMat {
    pub fn new(rows: usize, cols: usize, data: Vec<Expr>) -> Result<Self, ExprError> {
        if data.len() != rows * cols {
            return Err(ExprError::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(ExprMat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ExprMat { rows, cols, data: vec![Expr::zero(); rows * cols] }
    }

    /// Parse from nested rows of text.
    pub fn parse_rows<S: AsRef<str>>(rows: &[Vec<S>]) -> Result<Self, ExprError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(ExprError::Shape(format!("ragged row of length {} (expected {c})", row.len())));
            }
            for s in row {
                data.push(parse(s.as_ref())?);
            }
        }
        ExprMat::new(r, c, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> &Expr {
        &self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, e: Expr) {
        self.data[r * self.cols + c] = e;
    }

    pub fn column(&self, c: usize) -> ExprVec {
        (0..self.rows).map(|r| self.get(r, c).clone()).collect()
    }

    pub fn arity(&self) -> usize {
        self.data.iter().map(Expr::arity).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> Result<DMatrix<f64>, ExprError> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                m[(r, c)] = self.get(r, c).eval(x)?;
            }
        }
        Ok(m)
    }

    pub fn to_strings(&self) -> Vec<Vec<String>> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.get(r, c).to_string()).collect())
            .collect()
    }
}

/// Jacobian of `v` with respect to `x1..xn`; row per component, column per variable.
pub fn jacobian(v: &ExprVec, n: usize) -> Result<ExprMat, ExprError> {
    let mut data = Vec::with_capacity(v.len() * n);
    for e in v.items() {
        for var in 0..n {
            data.push(e.diff(var)?);
        }
    }
    ExprMat::new(v.len(), n, data)
}

pub fn parse(src: &str) -> Result<Expr, ExprError> {
    let mut p = Parser { src: src.as_bytes(), pos: 0 };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> ExprError {
        ExprError::Syntax { offset: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr(Arc::new(Node::Binary(op, lhs, rhs)));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr(Arc::new(Node::Binary(op, lhs, rhs)));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            let a = self.unary()?;
            return Ok(Expr(Arc::new(Node::Unary(UnOp::Neg, a))));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.eat(b'^') {
            // right-associative, exponent may carry its own sign
            let exp = self.unary()?;
            return Ok(Expr(Arc::new(Node::Binary(BinOp::Pow, base, exp))));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            Some(_) => Err(self.err("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let s = self.src;
        let mut i = self.pos;
        while i < s.len() && (s[i].is_ascii_digit() || s[i] == b'.') {
            i += 1;
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            if j < s.len() && s[j].is_ascii_digit() {
                while j < s.len() && s[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = std::str::from_utf8(&s[start..i]).unwrap_or("");
        let v: f64 = text
            .parse()
            .map_err(|_| ExprError::Syntax { offset: start, msg: format!("bad number `{text}`") })?;
        self.pos = i;
        Ok(Expr::constant(v))
    }

    fn ident(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("").to_string();
        let args = if self.peek() == Some(b'(') {
            self.pos += 1;
            let mut args = Vec::new();
            if !self.eat(b')') {
                loop {
                    args.push(self.expr()?);
                    if self.eat(b')') {
                        break;
                    }
                    if !self.eat(b',') {
                        return Err(self.err("expected `,` or `)`"));
                    }
                }
            }
            Some(args)
        } else {
            None
        };

        if let Some(idx) = var_index(&name) {
            return match args {
                None => Ok(Expr::var(idx)),
                Some(a) => Err(ExprError::Arity { name, offset: start, expected: 0, got: a.len() }),
            };
        }
        if name == "pi" && args.is_none() {
            return Ok(Expr::constant(std::f64::consts::PI));
        }
        let op = UnOp::from_name(&name).ok_or_else(|| ExprError::UnknownIdent {
            name: name.clone(),
            offset: start,
        })?;
        match args {
            Some(mut a) if a.len() == 1 => Ok(Expr(Arc::new(Node::Unary(op, a.remove(0))))),
            Some(a) => Err(ExprError::Arity { name, offset: start, expected: 1, got: a.len() }),
            None => Err(ExprError::Arity { name, offset: start, expected: 1, got: 0 }),
        }
    }
}

fn var_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('x')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    digits.parse::<usize>().ok().map(|k| k - 1)
}
