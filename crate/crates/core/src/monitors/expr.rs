//! Closed arithmetic language over feature keys.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | primary
//! primary := number | '(' expr ')' | func '(' expr (',' expr)* ')' | feature-key
//! ```

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::features::{FeatureKey, FeatureVector, ValueKind};
use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("type error: {0}")]
    Type(String),
    #[error("missing feature `{0}`")]
    Missing(FeatureKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Norm,
    Dot,
    Arccos,
    Abs,
    Min,
    Max,
    X,
    Y,
    Z,
    Xy,
    Vec,
}

impl Func {
    fn parse(name: &str) -> Option<Func> {
        Some(match name {
            "norm" => Func::Norm,
            "dot" => Func::Dot,
            "arccos" => Func::Arccos,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "x" => Func::X,
            "y" => Func::Y,
            "z" => Func::Z,
            "xy" => Func::Xy,
            "vec" => Func::Vec,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        match self {
            Func::Dot | Func::Min | Func::Max => 2,
            Func::Vec => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Key(FeatureKey),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Val {
    S(f64),
    V(Vec3),
}

/// A parsed, type-checked scalar expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
    keys: Vec<FeatureKey>,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr, ExprError> {
        let mut p = Parser { src: source, pos: 0 };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != source.len() {
            return Err(p.err("unexpected trailing input"));
        }
        if type_of(&root)? != ValueKind::Scalar {
            return Err(ExprError::Type("expression must evaluate to a scalar".into()));
        }
        let mut keys = Vec::new();
        collect_keys(&root, &mut keys);
        keys.sort();
        keys.dedup();
        Ok(Expr {
            source: source.to_string(),
            root,
            keys,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn keys(&self) -> &[FeatureKey] {
        &self.keys
    }

    pub fn eval(&self, z: &FeatureVector) -> Result<f64, ExprError> {
        match eval(&self.root, z)? {
            Val::S(x) => Ok(x),
            Val::V(_) => unreachable!("type checked at parse time"),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Expr::parse(&s).map_err(serde::de::Error::custom)
    }
}

fn collect_keys(n: &Node, out: &mut Vec<FeatureKey>) {
    match n {
        Node::Num(_) => {}
        Node::Key(k) => out.push(k.clone()),
        Node::Neg(a) => collect_keys(a, out),
        Node::Bin(_, a, b) => {
            collect_keys(a, out);
            collect_keys(b, out);
        }
        Node::Call(_, args) => args.iter().for_each(|a| collect_keys(a, out)),
    }
}

fn type_of(n: &Node) -> Result<ValueKind, ExprError> {
    use ValueKind::*;
    Ok(match n {
        Node::Num(_) => Scalar,
        Node::Key(k) => k.kind(),
        Node::Neg(a) => type_of(a)?,
        Node::Bin(op, a, b) => match (op, type_of(a)?, type_of(b)?) {
            (_, Scalar, Scalar) => Scalar,
            (BinOp::Add | BinOp::Sub, Vector, Vector) => Vector,
            (BinOp::Mul, Scalar, Vector) | (BinOp::Mul, Vector, Scalar) => Vector,
            (BinOp::Div, Vector, Scalar) => Vector,
            (op, l, r) => {
                return Err(ExprError::Type(format!("{op:?} not defined for {l:?} and {r:?}")))
            }
        },
        Node::Call(f, args) => {
            let kinds = args.iter().map(type_of).collect::<Result<Vec<_>, _>>()?;
            let want: &[ValueKind] = match f {
                Func::Norm | Func::X | Func::Y | Func::Z | Func::Xy => &[Vector],
                Func::Dot => &[Vector, Vector],
                Func::Arccos | Func::Abs => &[Scalar],
                Func::Min | Func::Max => &[Scalar, Scalar],
                Func::Vec => &[Scalar, Scalar, Scalar],
            };
            if kinds != want {
                return Err(ExprError::Type(format!("{f:?} expects {want:?}, got {kinds:?}")));
            }
            match f {
                Func::Xy | Func::Vec => Vector,
                _ => Scalar,
            }
        }
    })
}

fn eval(n: &Node, z: &FeatureVector) -> Result<Val, ExprError> {
    Ok(match n {
        Node::Num(x) => Val::S(*x),
        Node::Key(k) => match k.kind() {
            ValueKind::Scalar => Val::S(z.scalar(k).ok_or_else(|| ExprError::Missing(k.clone()))?),
            ValueKind::Vector => Val::V(z.vector(k).ok_or_else(|| ExprError::Missing(k.clone()))?),
        },
        Node::Neg(a) => match eval(a, z)? {
            Val::S(x) => Val::S(-x),
            Val::V(v) => Val::V(-v),
        },
        Node::Bin(op, a, b) => match (op, eval(a, z)?, eval(b, z)?) {
            (BinOp::Add, Val::S(x), Val::S(y)) => Val::S(x + y),
            (BinOp::Sub, Val::S(x), Val::S(y)) => Val::S(x - y),
            (BinOp::Mul, Val::S(x), Val::S(y)) => Val::S(x * y),
            (BinOp::Div, Val::S(x), Val::S(y)) => Val::S(x / y),
            (BinOp::Add, Val::V(u), Val::V(v)) => Val::V(u + v),
            (BinOp::Sub, Val::V(u), Val::V(v)) => Val::V(u - v),
            (BinOp::Mul, Val::S(s), Val::V(v)) | (BinOp::Mul, Val::V(v), Val::S(s)) => Val::V(v * s),
            (BinOp::Div, Val::V(v), Val::S(s)) => Val::V(v / s),
            _ => unreachable!("type checked at parse time"),
        },
        Node::Call(f, args) => {
            let a: Vec<Val> = args.iter().map(|x| eval(x, z)).collect::<Result<_, _>>()?;
            let s = |i: usize| match a[i] {
                Val::S(x) => x,
                Val::V(_) => unreachable!(),
            };
            let v = |i: usize| match a[i] {
                Val::V(x) => x,
                Val::S(_) => unreachable!(),
            };
            match f {
                Func::Norm => Val::S(v(0).norm()),
                Func::Dot => Val::S(v(0).dot(&v(1))),
                Func::Arccos => Val::S(s(0).clamp(-1.0, 1.0).acos()),
                Func::Abs => Val::S(s(0).abs()),
                Func::Min => Val::S(s(0).min(s(1))),
                Func::Max => Val::S(s(0).max(s(1))),
                Func::X => Val::S(v(0).x),
                Func::Y => Val::S(v(0).y),
                Func::Z => Val::S(v(0).z),
                Func::Xy => Val::V(Vec3::new(v(0).x, v(0).y, 0.0)),
                Func::Vec => Val::V(Vec3::new(s(0), s(1), s(2))),
            }
        }
    })
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> ExprError {
        ExprError::Parse {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
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

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat(b'+') {
                BinOp::Add
            } else if self.eat(b'-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat(b'*') {
                BinOp::Mul
            } else if self.eat(b'/') {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat(b'-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Node, ExprError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            None => Err(self.err("unexpected end of expression")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                while self
                    .peek()
                    .is_some_and(|c| c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E')
                {
                    // exponent sign
                    if matches!(self.peek(), Some(b'e' | b'E'))
                        && matches!(self.src.as_bytes().get(self.pos + 1), Some(b'-' | b'+'))
                    {
                        self.pos += 1;
                    }
                    self.pos += 1;
                }
                self.src[start..self.pos]
                    .parse()
                    .map(Node::Num)
                    .map_err(|_| ExprError::Parse {
                        pos: start,
                        msg: "malformed number".into(),
                    })
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                while self
                    .peek()
                    .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
                {
                    self.pos += 1;
                }
                let name = &self.src[start..self.pos];
                self.skip_ws();
                if let Some(f) = Func::parse(name).filter(|_| self.peek() == Some(b'(')) {
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.eat(b',') {
                        args.push(self.expr()?);
                    }
                    if !self.eat(b')') {
                        return Err(self.err("expected `)`"));
                    }
                    if args.len() != f.arity() {
                        return Err(ExprError::Parse {
                            pos: start,
                            msg: format!("`{name}` takes {} argument(s)", f.arity()),
                        });
                    }
                    return Ok(Node::Call(f, args));
                }
                let end = if self.peek() == Some(b'(') {
                    let close = self.src[self.pos..].find(')').ok_or_else(|| self.err("expected `)`"))?;
                    self.pos + close + 1
                } else {
                    self.pos
                };
                let text = &self.src[start..end];
                let key: FeatureKey = text.parse().map_err(|_| ExprError::Parse {
                    pos: start,
                    msg: format!("unknown feature key `{}`", text.trim()),
                })?;
                self.pos = end;
                Ok(Node::Key(key))
            }
            Some(_) => Err(self.err("unexpected character")),
        }
    }
}
