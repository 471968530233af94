//! Scalar expression language for user-defined coefficient functions.
//!
//! Grammar (loosest binding first):
//!
//! ```text
//! sum     := product (("+" | "-") product)*
//! product := unary (("*" | "/") unary)*
//! unary   := "-" unary | power
//! power   := atom ("^" unary)?
//! atom    := number | ident | ident "(" sum ("," sum)* ")" | "(" sum ")"
//! ```
//!
//! `t`, `x` and `c` are the time, the compartment state and its capacity.
//! Every other identifier is a named constant resolved by [`Expression::bind`].
//! Available functions: `min`, `max` (two or more arguments), `clamp(v, lo, hi)`
//! and `abs`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parse error at character {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero in `{0}`")]
    DivisionByZero(String),
    #[error("non-finite result {value} in `{expr}`")]
    NonFinite { expr: String, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    T,
    X,
    C,
}

impl Variable {
    fn name(self) -> &'static str {
        match self {
            Variable::T => "t",
            Variable::X => "x",
            Variable::C => "c",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "t" => Some(Variable::T),
            "x" => Some(Variable::X),
            "c" => Some(Variable::C),
            _ => None,
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

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Min,
    Max,
    Clamp,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::Clamp => "clamp",
            Func::Abs => "abs",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "min" => Some(Func::Min),
            "max" => Some(Func::Max),
            "clamp" => Some(Func::Clamp),
            "abs" => Some(Func::Abs),
            _ => None,
        }
    }

    fn arity_ok(self, k: usize) -> bool {
        match self {
            Func::Min | Func::Max => k >= 2,
            Func::Clamp => k == 3,
            Func::Abs => k == 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(Variable),
    Const(String),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// Parsed expression. Printing gives a fully parenthesized form that parses
/// back to the same printed text.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> std::result::Result<Vec<(Token, usize)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        if ch.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if ch.is_ascii_digit() || (ch == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
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
            let text: String = chars[start..i].iter().collect();
            let value: f64 = text.parse().map_err(|_| ParseError {
                position: start,
                message: format!("malformed number `{text}`"),
            })?;
            if !value.is_finite() {
                return Err(ParseError {
                    position: start,
                    message: format!("number `{text}` is out of range"),
                });
            }
            out.push((Token::Num(value), start));
        } else if ch.is_alphabetic() || ch == '_' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Token::Ident(chars[start..i].iter().collect()), start));
        } else {
            let tok = match ch {
                '+' | '-' | '*' | '/' | '^' => Token::Op(ch),
                '(' => Token::LParen,
                ')' => Token::RParen,
                ',' => Token::Comma,
                _ => {
                    return Err(ParseError {
                        position: start,
                        message: format!("unexpected character `{ch}`"),
                    })
                }
            };
            out.push((tok, start));
            i += 1;
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn here(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(_, p)| *p)
    }

    fn error<T>(&self, message: impl Into<String>) -> std::result::Result<T, ParseError> {
        Err(ParseError {
            position: self.here(),
            message: message.into(),
        })
    }

    fn sum(&mut self) -> std::result::Result<Node, ParseError> {
        let mut lhs = self.product()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek() {
            let op = if *op == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn product(&mut self) -> std::result::Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek() {
            let op = if *op == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> std::result::Result<Node, ParseError> {
        if let Some(Token::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> std::result::Result<Node, ParseError> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> std::result::Result<Node, ParseError> {
        let Some((tok, at)) = self.tokens.get(self.pos).cloned() else {
            return self.error("unexpected end of input");
        };
        match tok {
            Token::Num(v) => {
                self.pos += 1;
                Ok(Node::Num(v))
            }
            Token::LParen => {
                self.pos += 1;
                let inner = self.sum()?;
                if self.peek() != Some(&Token::RParen) {
                    return self.error("expected `)`");
                }
                self.pos += 1;
                Ok(inner)
            }
            Token::Ident(name) => {
                self.pos += 1;
                if self.peek() == Some(&Token::LParen) {
                    let Some(func) = Func::from_name(&name) else {
                        return Err(ParseError {
                            position: at,
                            message: format!("unknown function `{name}`"),
                        });
                    };
                    self.pos += 1;
                    let mut args = vec![self.sum()?];
                    while self.peek() == Some(&Token::Comma) {
                        self.pos += 1;
                        args.push(self.sum()?);
                    }
                    if self.peek() != Some(&Token::RParen) {
                        return self.error("expected `,` or `)`");
                    }
                    self.pos += 1;
                    if !func.arity_ok(args.len()) {
                        return Err(ParseError {
                            position: at,
                            message: format!("`{name}` does not take {} argument(s)", args.len()),
                        });
                    }
                    Ok(Node::Call(func, args))
                } else if let Some(v) = Variable::from_name(&name) {
                    Ok(Node::Var(v))
                } else if Func::from_name(&name).is_some() {
                    Err(ParseError {
                        position: at,
                        message: format!("function `{name}` used without arguments"),
                    })
                } else {
                    Ok(Node::Const(name))
                }
            }
            _ => self.error("expected a number, identifier or `(`"),
        }
    }
}

impl Expression {
    pub fn parse(src: &str) -> std::result::Result<Self, ParseError> {
        let tokens = tokenize(src)?;
        if tokens.is_empty() {
            return Err(ParseError {
                position: 0,
                message: "empty expression".into(),
            });
        }
        let mut p = Parser {
            tokens,
            pos: 0,
            end: src.chars().count(),
        };
        let root = p.sum()?;
        if p.pos != p.tokens.len() {
            return p.error("unexpected trailing input");
        }
        Ok(Self { root })
    }

    pub fn constant(value: f64) -> Self {
        Self { root: Node::Num(value) }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    /// Variables among `t`, `x`, `c` that occur.
    pub fn free_vars(&self) -> BTreeSet<Variable> {
        let mut out = BTreeSet::new();
        walk(&self.root, &mut |n| {
            if let Node::Var(v) = n {
                out.insert(*v);
            }
        });
        out
    }

    /// Names of the constants that occur.
    pub fn constants(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        walk(&self.root, &mut |n| {
            if let Node::Const(c) = n {
                out.insert(c.clone());
            }
        });
        out
    }

    /// Resolve every constant from `constants`; fails on the first unknown name.
    pub fn bind(&self, constants: &BTreeMap<String, f64>) -> Result<BoundExpr> {
        Ok(BoundExpr {
            node: bind_node(&self.root, constants)?,
            text: self.to_string(),
        })
    }
}

fn walk(n: &Node, f: &mut impl FnMut(&Node)) {
    f(n);
    match n {
        Node::Neg(a) => walk(a, f),
        Node::Bin(_, a, b) => {
            walk(a, f);
            walk(b, f);
        }
        Node::Call(_, args) => args.iter().for_each(|a| walk(a, f)),
        Node::Num(_) | Node::Var(_) | Node::Const(_) => {}
    }
}

fn bind_node(n: &Node, constants: &BTreeMap<String, f64>) -> Result<Node> {
    Ok(match n {
        Node::Const(name) => match constants.get(name) {
            Some(&v) => Node::Num(v),
            None => return Err(Error::UnknownIdentifier(name.clone())),
        },
        Node::Num(_) | Node::Var(_) => n.clone(),
        Node::Neg(a) => Node::Neg(Box::new(bind_node(a, constants)?)),
        Node::Bin(op, a, b) => Node::Bin(*op, Box::new(bind_node(a, constants)?), Box::new(bind_node(b, constants)?)),
        Node::Call(f, args) => Node::Call(*f, args.iter().map(|a| bind_node(a, constants)).collect::<Result<_>>()?),
    })
}

fn fmt_node(n: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match n {
        Node::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => write!(f, "(-{:?})", -v),
        Node::Num(v) => write!(f, "{v:?}"),
        Node::Var(v) => f.write_str(v.name()),
        Node::Const(c) => f.write_str(c),
        Node::Neg(a) => {
            f.write_str("(-")?;
            fmt_node(a, f)?;
            f.write_str(")")
        }
        Node::Bin(op, a, b) => {
            f.write_str("(")?;
            fmt_node(a, f)?;
            write!(f, " {} ", op.symbol())?;
            fmt_node(b, f)?;
            f.write_str(")")
        }
        Node::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (k, a) in args.iter().enumerate() {
                if k > 0 {
                    f.write_str(", ")?;
                }
                fmt_node(a, f)?;
            }
            f.write_str(")")
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_node(&self.root, f)
    }
}

impl std::str::FromStr for Expression {
    type Err = ParseError;

    fn from_str(s: &str) -> std::result::Result<Self, ParseError> {
        Expression::parse(s)
    }
}

impl Serialize for Expression {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expression {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Expression::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Expression with all constants resolved, ready for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundExpr {
    node: Node,
    text: String,
}

impl BoundExpr {
    pub fn eval(&self, t: f64, x: f64, c: f64) -> std::result::Result<f64, EvalError> {
        let v = eval_node(&self.node, t, x, c, &self.text)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite {
                expr: self.text.clone(),
                value: v,
            })
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// True when the expression is the literal `0`.
    pub fn is_zero(&self) -> bool {
        matches!(self.node, Node::Num(v) if v == 0.0)
    }

    pub fn depends_on(&self, var: Variable) -> bool {
        let mut found = false;
        walk(&self.node, &mut |n| found |= matches!(n, Node::Var(v) if *v == var));
        found
    }
}

fn eval_node(n: &Node, t: f64, x: f64, c: f64, text: &str) -> std::result::Result<f64, EvalError> {
    Ok(match n {
        Node::Num(v) => *v,
        Node::Var(Variable::T) => t,
        Node::Var(Variable::X) => x,
        Node::Var(Variable::C) => c,
        Node::Const(_) => unreachable!("constants are resolved when binding"),
        Node::Neg(a) => -eval_node(a, t, x, c, text)?,
        Node::Bin(op, a, b) => {
            let l = eval_node(a, t, x, c, text)?;
            let r = eval_node(b, t, x, c, text)?;
            match op {
                BinOp::Add => l + r,
                BinOp::Sub => l - r,
                BinOp::Mul => l * r,
                BinOp::Div => {
                    if r == 0.0 {
                        return Err(EvalError::DivisionByZero(text.to_string()));
                    }
                    l / r
                }
                BinOp::Pow => {
                    let v = l.powf(r);
                    if !v.is_finite() {
                        return Err(EvalError::NonFinite {
                            expr: text.to_string(),
                            value: v,
                        });
                    }
                    v
                }
            }
        }
        Node::Call(func, args) => {
            let mut vals = Vec::with_capacity(args.len());
            for a in args {
                vals.push(eval_node(a, t, x, c, text)?);
            }
            match func {
                Func::Min => vals.into_iter().fold(f64::INFINITY, f64::min),
                Func::Max => vals.into_iter().fold(f64::NEG_INFINITY, f64::max),
                Func::Clamp => vals[0].max(vals[1]).min(vals[2]),
                Func::Abs => vals[0].abs(),
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slope")]
pub enum Direction {
    Nonincreasing,
    Nondecreasing,
    /// `f(y) - f(x) >= s (y - x)` for `x <= y`.
    SlopeAtLeast(f64),
}

/// Sampled monotonicity verdict; a pass is evidence, not proof.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum MonotonicityVerdict {
    PassedAtSamples { samples: usize, worst_margin: f64 },
    Violated { x1: f64, x2: f64, f1: f64, f2: f64 },
}

impl MonotonicityVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, MonotonicityVerdict::PassedAtSamples { .. })
    }
}

/// Check `direction` for `f` on `[lo, hi]` at `samples` grid points, refined
/// by the midpoints of each grid cell. Consecutive refined points and every
/// grid point against every later one are compared.
pub fn check_monotone(
    f: impl Fn(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    direction: Direction,
    samples: usize,
    tol: f64,
) -> Result<MonotonicityVerdict> {
    if !(lo <= hi) {
        return Err(Error::InvalidParameter(format!("empty interval [{lo}, {hi}]")));
    }
    let k = samples.max(2);
    let m = 2 * (k - 1);
    let pts: Vec<f64> = (0..=m).map(|i| lo + (hi - lo) * i as f64 / m as f64).collect();
    let vals: Vec<f64> = pts.iter().map(|&z| f(z)).collect::<Result<_>>()?;
    let margin = |i: usize, j: usize| -> f64 {
        let (dx, df) = (pts[j] - pts[i], vals[j] - vals[i]);
        match direction {
            Direction::Nonincreasing => -df,
            Direction::Nondecreasing => df,
            Direction::SlopeAtLeast(s) => df - s * dx,
        }
    };
    let mut worst = f64::INFINITY;
    let mut record = |i: usize, j: usize| -> Option<MonotonicityVerdict> {
        let mg = margin(i, j);
        worst = worst.min(mg);
        (mg < -tol).then(|| MonotonicityVerdict::Violated {
            x1: pts[i],
            x2: pts[j],
            f1: vals[i],
            f2: vals[j],
        })
    };
    for i in 0..m {
        if let Some(v) = record(i, i + 1) {
            return Ok(v);
        }
    }
    // Coarse grid pairs catch drift that stays below tol per step.
    for i in (0..=m).step_by(2) {
        for j in ((i + 2)..=m).step_by(2) {
            if let Some(v) = record(i, j) {
                return Ok(v);
            }
        }
    }
    Ok(MonotonicityVerdict::PassedAtSamples {
        samples: m + 1,
        worst_margin: if worst.is_finite() { worst } else { 0.0 },
    })
}

/// [`check_monotone`] for a bound expression in `var`, with the other two
/// variables held at `fixed` (`[t, x, c]`).
pub fn check_monotonicity(
    f: &BoundExpr,
    var: Variable,
    interval: (f64, f64),
    direction: Direction,
    samples: usize,
    fixed: [f64; 3],
) -> Result<MonotonicityVerdict> {
    check_monotone(
        |z| {
            let mut a = fixed;
            a[var as usize] = z;
            Ok(f.eval(a[0], a[1], a[2])?)
        },
        interval.0,
        interval.1,
        direction,
        samples,
        1e-12,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn consts(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn eval(src: &str, x: f64) -> f64 {
        Expression::parse(src).unwrap().bind(&BTreeMap::new()).unwrap().eval(0.0, x, 1.0).unwrap()
    }

    #[test]
    fn greenshields_parse() {
        let e = Expression::parse("vf*(1 - x/rho_max)").unwrap();
        assert_eq!(e.free_vars(), BTreeSet::from([Variable::X]));
        assert_eq!(e.constants(), BTreeSet::from(["rho_max".to_string(), "vf".to_string()]));
        let b = e.bind(&consts(&[("vf", 2.0), ("rho_max", 4.0)])).unwrap();
        assert_eq!(b.eval(0.0, 1.0, 0.0).unwrap(), 1.5);
        assert_eq!(e.to_string(), "(vf * (1.0 - (x / rho_max)))");
    }

    #[test]
    fn guarded_division_and_clamp() {
        let b = Expression::parse("1/(x-1)").unwrap().bind(&BTreeMap::new()).unwrap();
        assert!(matches!(b.eval(0.0, 1.0, 0.0), Err(EvalError::DivisionByZero(_))));
        assert_eq!(eval("min(1, max(0, x))", 2.0), 1.0);
        assert_eq!(eval("clamp(x, 0, 1)", -3.0), 0.0);
        assert_eq!(eval("abs(x)", -3.0), 3.0);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval("-x^2", 3.0), -9.0);
        assert_eq!(eval("2^3^2", 0.0), 512.0);
        assert_eq!(eval("2^-1", 0.0), 0.5);
        assert_eq!(eval("8/4/2", 0.0), 1.0);
        assert_eq!(eval("1-2-3", 0.0), -4.0);
        assert_eq!(eval("1+2*3", 0.0), 7.0);
        assert_eq!(eval("-2*-3", 0.0), 6.0);
        assert_eq!(eval("1.5e1 + .5", 0.0), 15.5);
    }

    #[test]
    fn errors_carry_character_positions() {
        let e = Expression::parse("1 + ").unwrap_err();
        assert_eq!(e.position, 4);
        assert!(Expression::parse("ρ + 1").unwrap().constants().contains("ρ"));
        let e = Expression::parse("é * foo(x)").unwrap_err();
        assert_eq!(e.position, 4);
        assert!(e.message.contains("unknown function"));
        let e = Expression::parse("(x + 1").unwrap_err();
        assert_eq!(e.position, 6);
        let e = Expression::parse("x $ 2").unwrap_err();
        assert_eq!(e.position, 2);
        assert!(Expression::parse("").is_err());
        assert!(Expression::parse("clamp(x, 1)").is_err());
        assert!(Expression::parse("min").is_err());
        let unknown = Expression::parse("k * x").unwrap().bind(&BTreeMap::new()).unwrap_err();
        assert!(matches!(unknown, Error::UnknownIdentifier(ref k) if k == "k"));
    }

    #[test]
    fn monotonicity_examples() {
        let h = Expression::parse("1 - x").unwrap().bind(&BTreeMap::new()).unwrap();
        let v = check_monotonicity(&h, Variable::X, (0.0, 1.0), Direction::Nonincreasing, 64, [0.0; 3]).unwrap();
        assert!(v.passed());
        let g = Expression::parse("x").unwrap().bind(&BTreeMap::new()).unwrap();
        let v = check_monotonicity(&g, Variable::X, (0.0, 1.0), Direction::SlopeAtLeast(1.0), 64, [0.0; 3]).unwrap();
        assert!(v.passed());
        let bump = Expression::parse("x*(1-x)").unwrap().bind(&BTreeMap::new()).unwrap();
        match check_monotonicity(&bump, Variable::X, (0.0, 1.0), Direction::Nonincreasing, 64, [0.0; 3]).unwrap() {
            MonotonicityVerdict::Violated { x1, x2, .. } => {
                assert!(x1 < x2 && x1 < 0.5);
            }
            other => panic!("expected violation, got {other:?}"),
        }
    }

    fn arb_node() -> impl Strategy<Value = Node> {
        let leaf = prop_oneof![
            (0.0f64..100.0).prop_map(Node::Num),
            prop_oneof![Just(Variable::T), Just(Variable::X), Just(Variable::C)].prop_map(Node::Var),
            "[a-z][a-z_]{1,4}"
                .prop_filter("reserved", |s| Func::from_name(s).is_none())
                .prop_map(Node::Const),
        ];
        leaf.prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Node::Neg(Box::new(a))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Node::Bin(op, Box::new(a), Box::new(b))),
                proptest::collection::vec(inner.clone(), 2..4).prop_map(|a| Node::Call(Func::Max, a)),
                proptest::collection::vec(inner, 3..=3).prop_map(|a| Node::Call(Func::Clamp, a)),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(node in arb_node()) {
            let e = Expression { root: node };
            let printed = e.to_string();
            let back = Expression::parse(&printed).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(back.to_string(), printed);
        }

        #[test]
        fn evaluation_is_deterministic(node in arb_node(), x in 0.0f64..1.0) {
            let e = Expression { root: node };
            let names = e.constants();
            let k: BTreeMap<String, f64> = names.into_iter().enumerate().map(|(i, n)| (n, 0.5 + i as f64)).collect();
            let b = e.bind(&k).unwrap();
            prop_assert_eq!(format!("{:?}", b.eval(0.3, x, 1.0)), format!("{:?}", b.eval(0.3, x, 1.0)));
        }
    }
}
