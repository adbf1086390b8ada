//! Gateway conditions and task parameter expressions.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! or   := and ("or" and)*
//! and  := not ("and" not)*
//! not  := "not" not | cmp
//! cmp  := atom (("=" | "==" | "!=" | "≠" | "<" | "<=" | "≤" | ">" | ">=" | "≥") atom)?
//! atom := "true" | "false" | integer | "text" | 'text' | identifier | "(" or ")"
//! ```
//!
//! `${...}` around the whole expression is stripped. Evaluation is strict:
//! both operands of `and`/`or` are evaluated, and a missing variable is an
//! error rather than false.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::value::{Value, ValueKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub const ALL: [CmpOp; 6] = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn is_ordering(self) -> bool {
        !matches!(self, CmpOp::Eq | CmpOp::Ne)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Lit(Value),
    Var(String),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message} at offset {offset}")]
pub struct ExprSyntaxError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExprTypeError {
    #[error("undeclared variable {0}")]
    Undeclared(String),
    #[error("{op} expects {expected}, found {found}")]
    Mismatch {
        op: String,
        expected: String,
        found: ValueKind,
    },
    #[error("cannot compare {0} with {1}")]
    Incomparable(ValueKind, ValueKind),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("missing variable {0}")]
    MissingVariable(String),
    #[error("{op} expects {expected}, found {found}")]
    Type {
        op: String,
        expected: &'static str,
        found: Value,
    },
    #[error("cannot compare {0} with {1}")]
    Incomparable(Value, Value),
}

pub type Vars = BTreeMap<String, Value>;

impl Expr {
    pub fn parse(text: &str) -> Result<Expr, ExprSyntaxError> {
        let trimmed = text.trim();
        let (body, base) = match trimmed.strip_prefix("${").and_then(|s| s.strip_suffix('}')) {
            Some(inner) => (inner, text.find("${").unwrap_or(0) + 2),
            None => (trimmed, text.len() - text.trim_start().len()),
        };
        let tokens = lex(body).map_err(|mut e| {
            e.offset += base;
            e
        })?;
        let mut p = Parser {
            tokens,
            pos: 0,
            end: body.len(),
        };
        let e = p.or().map_err(|mut e| {
            e.offset += base;
            e
        })?;
        if let Some((off, t)) = p.tokens.get(p.pos) {
            return Err(ExprSyntaxError {
                offset: base + off,
                message: format!("unexpected {t}"),
            });
        }
        Ok(e)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn lit(v: impl Into<Value>) -> Expr {
        Expr::Lit(v.into())
    }

    pub fn variables(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Var(v) => out.push(v),
            Expr::Not(e) => e.collect_vars(out),
            Expr::And(a, b) | Expr::Or(a, b) | Expr::Cmp(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn type_of(&self, decls: &BTreeMap<String, ValueKind>) -> Result<ValueKind, ExprTypeError> {
        let want_bool = |op: &str, e: &Expr| -> Result<(), ExprTypeError> {
            match e.type_of(decls)? {
                ValueKind::Boolean => Ok(()),
                found => Err(ExprTypeError::Mismatch {
                    op: op.to_string(),
                    expected: "boolean".into(),
                    found,
                }),
            }
        };
        match self {
            Expr::Lit(v) => Ok(v.kind()),
            Expr::Var(v) => decls
                .get(v)
                .copied()
                .ok_or_else(|| ExprTypeError::Undeclared(v.clone())),
            Expr::Not(e) => want_bool("not", e).map(|_| ValueKind::Boolean),
            Expr::And(a, b) => {
                want_bool("and", a)?;
                want_bool("and", b)?;
                Ok(ValueKind::Boolean)
            }
            Expr::Or(a, b) => {
                want_bool("or", a)?;
                want_bool("or", b)?;
                Ok(ValueKind::Boolean)
            }
            Expr::Cmp(op, a, b) => {
                let (ka, kb) = (a.type_of(decls)?, b.type_of(decls)?);
                if ka != kb {
                    return Err(ExprTypeError::Incomparable(ka, kb));
                }
                if op.is_ordering() && ka != ValueKind::Integer {
                    return Err(ExprTypeError::Mismatch {
                        op: op.symbol().to_string(),
                        expected: "integer".into(),
                        found: ka,
                    });
                }
                Ok(ValueKind::Boolean)
            }
        }
    }

    pub fn eval(&self, vars: &Vars) -> Result<Value, EvalError> {
        let as_bool = |op: &str, v: Value| match v {
            Value::Bool(b) => Ok(b),
            found => Err(EvalError::Type {
                op: op.to_string(),
                expected: "boolean",
                found,
            }),
        };
        Ok(match self {
            Expr::Lit(v) => v.clone(),
            Expr::Var(name) => vars
                .get(name)
                .cloned()
                .ok_or_else(|| EvalError::MissingVariable(name.clone()))?,
            Expr::Not(e) => Value::Bool(!as_bool("not", e.eval(vars)?)?),
            Expr::And(a, b) => {
                let (x, y) = (a.eval(vars)?, b.eval(vars)?);
                Value::Bool(as_bool("and", x)? & as_bool("and", y)?)
            }
            Expr::Or(a, b) => {
                let (x, y) = (a.eval(vars)?, b.eval(vars)?);
                Value::Bool(as_bool("or", x)? | as_bool("or", y)?)
            }
            Expr::Cmp(op, a, b) => {
                let (x, y) = (a.eval(vars)?, b.eval(vars)?);
                if x.kind() != y.kind() {
                    return Err(EvalError::Incomparable(x, y));
                }
                let r = match op {
                    CmpOp::Eq => x == y,
                    CmpOp::Ne => x != y,
                    _ => {
                        let (Value::Int(i), Value::Int(j)) = (&x, &y) else {
                            return Err(EvalError::Type {
                                op: op.symbol().to_string(),
                                expected: "integer",
                                found: x,
                            });
                        };
                        match op {
                            CmpOp::Lt => i < j,
                            CmpOp::Le => i <= j,
                            CmpOp::Gt => i > j,
                            _ => i >= j,
                        }
                    }
                };
                Value::Bool(r)
            }
        })
    }
}

pub fn evaluate_condition(e: &Expr, vars: &Vars) -> Result<bool, EvalError> {
    match e.eval(vars)? {
        Value::Bool(b) => Ok(b),
        found => Err(EvalError::Type {
            op: "condition".into(),
            expected: "boolean",
            found,
        }),
    }
}

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Or(..) => 1,
        Expr::And(..) => 2,
        Expr::Not(_) => 3,
        Expr::Cmp(..) => 4,
        Expr::Lit(_) | Expr::Var(_) => 5,
    }
}

struct Wrapped<'a>(&'a Expr, u8);

impl fmt::Display for Wrapped<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if prec(self.0) < self.1 {
            write!(f, "({})", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(Value::Text(s)) => write!(f, "\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\"")),
            Expr::Lit(v) => write!(f, "{v}"),
            Expr::Var(v) => f.write_str(v),
            Expr::Not(e) => write!(f, "not {}", Wrapped(e, 3)),
            Expr::And(a, b) => write!(f, "{} and {}", Wrapped(a, 2), Wrapped(b, 3)),
            Expr::Or(a, b) => write!(f, "{} or {}", Wrapped(a, 1), Wrapped(b, 2)),
            Expr::Cmp(op, a, b) => write!(f, "{} {} {}", Wrapped(a, 5), op.symbol(), Wrapped(b, 5)),
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Expr::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Int(i64),
    Text(String),
    Ident(String),
    Op(CmpOp),
    LParen,
    RParen,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Int(i) => write!(f, "{i}"),
            Tok::Text(s) => write!(f, "{s:?}"),
            Tok::Ident(s) => write!(f, "'{s}'"),
            Tok::Op(o) => write!(f, "'{}'", o.symbol()),
            Tok::LParen => f.write_str("'('"),
            Tok::RParen => f.write_str("')'"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ExprSyntaxError> {
    let err = |offset, message: String| ExprSyntaxError { offset, message };
    let mut out = Vec::new();
    let mut it = src.char_indices().peekable();
    while let Some(&(i, c)) = it.peek() {
        if c.is_whitespace() {
            it.next();
            continue;
        }
        let two = src[i..].get(..2).unwrap_or("");
        let (tok, len) = match c {
            '(' => (Tok::LParen, 1),
            ')' => (Tok::RParen, 1),
            '≠' => (Tok::Op(CmpOp::Ne), c.len_utf8()),
            '≤' => (Tok::Op(CmpOp::Le), c.len_utf8()),
            '≥' => (Tok::Op(CmpOp::Ge), c.len_utf8()),
            '=' if two == "==" => (Tok::Op(CmpOp::Eq), 2),
            '=' => (Tok::Op(CmpOp::Eq), 1),
            '!' if two == "!=" => (Tok::Op(CmpOp::Ne), 2),
            '<' if two == "<=" => (Tok::Op(CmpOp::Le), 2),
            '<' if two == "<>" => (Tok::Op(CmpOp::Ne), 2),
            '<' => (Tok::Op(CmpOp::Lt), 1),
            '>' if two == ">=" => (Tok::Op(CmpOp::Ge), 2),
            '>' => (Tok::Op(CmpOp::Gt), 1),
            '"' | '\'' => {
                let quote = c;
                let mut s = String::new();
                let mut j = i + 1;
                let mut closed = false;
                let mut chars = src[j..].chars();
                while let Some(ch) = chars.next() {
                    j += ch.len_utf8();
                    if ch == '\\' {
                        match chars.next() {
                            Some(n) => {
                                j += n.len_utf8();
                                s.push(n);
                            }
                            None => break,
                        }
                    } else if ch == quote {
                        closed = true;
                        break;
                    } else {
                        s.push(ch);
                    }
                }
                if !closed {
                    return Err(err(i, "unterminated string".into()));
                }
                (Tok::Text(s), j - i)
            }
            '-' | '0'..='9' => {
                let rest = &src[i + 1..];
                let digits = rest.find(|ch: char| !ch.is_ascii_digit()).unwrap_or(rest.len());
                let text = &src[i..i + 1 + digits];
                if text == "-" {
                    return Err(err(i, "expected digits after '-'".into()));
                }
                let n = text
                    .parse()
                    .map_err(|_| err(i, format!("integer out of range: {text}")))?;
                (Tok::Int(n), text.len())
            }
            c if c.is_alphabetic() || c == '_' => {
                let rest = &src[i..];
                let len = rest
                    .find(|ch: char| !(ch.is_alphanumeric() || ch == '_' || ch == '.'))
                    .unwrap_or(rest.len());
                (Tok::Ident(rest[..len].to_string()), len)
            }
            other => return Err(err(i, format!("unexpected character {other:?}"))),
        };
        out.push((i, tok));
        let target = i + len;
        while it.peek().is_some_and(|&(k, _)| k < target) {
            it.next();
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Ident(s)) if s == kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn or(&mut self) -> Result<Expr, ExprSyntaxError> {
        let mut lhs = self.and()?;
        while self.keyword("or") {
            lhs = Expr::Or(Box::new(lhs), Box::new(self.and()?));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, ExprSyntaxError> {
        let mut lhs = self.not()?;
        while self.keyword("and") {
            lhs = Expr::And(Box::new(lhs), Box::new(self.not()?));
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr, ExprSyntaxError> {
        if self.keyword("not") {
            return Ok(Expr::Not(Box::new(self.not()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr, ExprSyntaxError> {
        let lhs = self.atom()?;
        if let Some(Tok::Op(op)) = self.peek() {
            let op = *op;
            self.pos += 1;
            let rhs = self.atom()?;
            return Ok(Expr::Cmp(op, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Expr, ExprSyntaxError> {
        let offset = self.offset();
        let tok = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        match tok {
            Some(Tok::Int(i)) => Ok(Expr::Lit(Value::Int(i))),
            Some(Tok::Text(s)) => Ok(Expr::Lit(Value::Text(s))),
            Some(Tok::Ident(s)) => match s.as_str() {
                "true" => Ok(Expr::Lit(Value::Bool(true))),
                "false" => Ok(Expr::Lit(Value::Bool(false))),
                "and" | "or" | "not" => Err(ExprSyntaxError {
                    offset,
                    message: format!("unexpected keyword '{s}'"),
                }),
                _ => Ok(Expr::Var(s)),
            },
            Some(Tok::LParen) => {
                let e = self.or()?;
                match self.peek() {
                    Some(Tok::RParen) => {
                        self.pos += 1;
                        Ok(e)
                    }
                    _ => Err(ExprSyntaxError {
                        offset: self.offset(),
                        message: "expected ')'".into(),
                    }),
                }
            }
            Some(t) => Err(ExprSyntaxError {
                offset,
                message: format!("unexpected {t}"),
            }),
            None => Err(ExprSyntaxError {
                offset,
                message: "unexpected end of expression".into(),
            }),
        }
    }
}
