//! Single-variable expression language for coefficient functions.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          // right-associative
//! primary := number | 'x' | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Named functions: `exp`, `log`, `sqrt`, `abs`, `pow`, `sin`, `cos`.
//! Evaluation never returns a non-finite value; undefined points and
//! overflow are reported as [`EvalError`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown identifier `{name}` at position {position}")]
    UnknownIdentifier { position: usize, name: String },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match self {
            ParseError::Syntax { position, .. } | ParseError::UnknownIdentifier { position, .. } => {
                *position
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalErrorKind {
    Domain,
    DivisionByZero,
    Overflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("{kind:?} evaluating `{op}` at x = {x}")]
pub struct EvalError {
    pub kind: EvalErrorKind,
    pub op: &'static str,
    pub x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Abs,
    Sin,
    Cos,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sin => "sin",
            Func::Cos => "cos",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var,
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed, immutable expression in the variable `x`.
///
/// Cloning is cheap; the tree is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Arc<Node>,
}

impl Expression {
    pub fn parse(source: &str) -> Result<Self, ParseError> {
        parse(source)
    }

    pub fn from_node(node: Node) -> Self {
        Expression { root: Arc::new(node) }
    }

    pub fn constant(value: f64) -> Self {
        Self::from_node(Node::Const(value))
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn evaluate(&self, x: f64) -> Result<f64, EvalError> {
        eval_node(&self.root, x)
    }

    /// `self / other`, built on the tree without numeric evaluation.
    pub fn div(&self, other: &Expression) -> Expression {
        Self::binary(BinOp::Div, self, other)
    }

    pub fn mul(&self, other: &Expression) -> Expression {
        Self::binary(BinOp::Mul, self, other)
    }

    pub fn square(&self) -> Expression {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Expression {
        Self::from_node(Node::Call(Func::Sqrt, Box::new((*self.root).clone())))
    }

    fn binary(op: BinOp, lhs: &Expression, rhs: &Expression) -> Expression {
        Self::from_node(Node::Binary(
            op,
            Box::new((*lhs.root).clone()),
            Box::new((*rhs.root).clone()),
        ))
    }

    /// True when the tree is a literal constant equal to `value`.
    pub fn is_constant(&self, value: f64) -> bool {
        matches!(*self.root, Node::Const(v) if v == value)
    }
}

impl FromStr for Expression {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(&self.root, f)
    }
}

impl Serialize for Expression {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Expression {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse(&text).map_err(serde::de::Error::custom)
    }
}

// Fully parenthesized; constants use shortest round-trip scientific notation.
fn write_node(node: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match node {
        Node::Const(v) if *v < 0.0 => write!(f, "(-{:e})", -v),
        Node::Const(v) => write!(f, "{v:e}"),
        Node::Var => f.write_str("x"),
        Node::Neg(inner) => {
            f.write_str("(-")?;
            write_node(inner, f)?;
            f.write_str(")")
        }
        Node::Binary(op, lhs, rhs) => {
            let sym = match op {
                BinOp::Add => "+",
                BinOp::Sub => "-",
                BinOp::Mul => "*",
                BinOp::Div => "/",
                BinOp::Pow => "^",
            };
            f.write_str("(")?;
            write_node(lhs, f)?;
            f.write_str(sym)?;
            write_node(rhs, f)?;
            f.write_str(")")
        }
        Node::Call(func, arg) => {
            write!(f, "{}(", func.name())?;
            write_node(arg, f)?;
            f.write_str(")")
        }
    }
}

fn checked(value: f64, op: &'static str, x: f64) -> Result<f64, EvalError> {
    if value.is_finite() {
        Ok(value)
    } else {
        let kind = if value.is_nan() {
            EvalErrorKind::Domain
        } else {
            EvalErrorKind::Overflow
        };
        Err(EvalError { kind, op, x })
    }
}

fn eval_node(node: &Node, x: f64) -> Result<f64, EvalError> {
    match node {
        Node::Const(v) => Ok(*v),
        Node::Var => checked(x, "x", x),
        Node::Neg(inner) => Ok(-eval_node(inner, x)?),
        Node::Binary(op, lhs, rhs) => {
            let a = eval_node(lhs, x)?;
            let b = eval_node(rhs, x)?;
            match op {
                BinOp::Add => checked(a + b, "+", x),
                BinOp::Sub => checked(a - b, "-", x),
                BinOp::Mul => checked(a * b, "*", x),
                BinOp::Div => {
                    if b == 0.0 {
                        Err(EvalError {
                            kind: EvalErrorKind::DivisionByZero,
                            op: "/",
                            x,
                        })
                    } else {
                        checked(a / b, "/", x)
                    }
                }
                BinOp::Pow => pow(a, b, x),
            }
        }
        Node::Call(func, arg) => {
            let a = eval_node(arg, x)?;
            match func {
                Func::Exp => checked(a.exp(), "exp", x),
                Func::Log => {
                    if a <= 0.0 {
                        Err(EvalError {
                            kind: EvalErrorKind::Domain,
                            op: "log",
                            x,
                        })
                    } else {
                        checked(a.ln(), "log", x)
                    }
                }
                Func::Sqrt => {
                    if a < 0.0 {
                        Err(EvalError {
                            kind: EvalErrorKind::Domain,
                            op: "sqrt",
                            x,
                        })
                    } else {
                        Ok(a.sqrt())
                    }
                }
                Func::Abs => Ok(a.abs()),
                Func::Sin => Ok(a.sin()),
                Func::Cos => Ok(a.cos()),
            }
        }
    }
}

fn pow(base: f64, exponent: f64, x: f64) -> Result<f64, EvalError> {
    if base == 0.0 && exponent < 0.0 {
        return Err(EvalError {
            kind: EvalErrorKind::DivisionByZero,
            op: "^",
            x,
        });
    }
    if exponent == 2.0 {
        return checked(base * base, "^", x);
    }
    checked(base.powf(exponent), "^", x)
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokenize(source: &'a str) -> Result<Vec<(Token, usize)>, ParseError> {
        let mut lexer = Lexer {
            src: source.as_bytes(),
            pos: 0,
        };
        let mut tokens = Vec::new();
        loop {
            lexer.skip_whitespace();
            let start = lexer.pos;
            let Some(&ch) = lexer.src.get(lexer.pos) else {
                tokens.push((Token::End, start));
                return Ok(tokens);
            };
            let token = match ch {
                b'+' => Token::Plus,
                b'-' => Token::Minus,
                b'*' => Token::Star,
                b'/' => Token::Slash,
                b'^' => Token::Caret,
                b'(' => Token::LParen,
                b')' => Token::RParen,
                b',' => Token::Comma,
                b'0'..=b'9' | b'.' => {
                    tokens.push((lexer.number()?, start));
                    continue;
                }
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    tokens.push((lexer.ident(), start));
                    continue;
                }
                _ => {
                    return Err(ParseError::Syntax {
                        position: start,
                        message: format!("unexpected character `{}`", ch as char),
                    })
                }
            };
            lexer.pos += 1;
            tokens.push((token, start));
        }
    }

    fn skip_whitespace(&mut self) {
        while self.src.get(self.pos).is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn number(&mut self) -> Result<Token, ParseError> {
        let start = self.pos;
        let digits = |lx: &mut Self| {
            while lx.src.get(lx.pos).is_some_and(u8::is_ascii_digit) {
                lx.pos += 1;
            }
        };
        digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            digits(self);
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if self.src.get(self.pos).is_some_and(u8::is_ascii_digit) {
                digits(self);
            } else {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii slice");
        text.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Token::Number)
            .ok_or_else(|| ParseError::Syntax {
                position: start,
                message: format!("malformed number `{text}`"),
            })
    }

    fn ident(&mut self) -> Token {
        let start = self.pos;
        while self
            .src
            .get(self.pos)
            .is_some_and(|c| c.is_ascii_alphanumeric() || *c == b'_')
        {
            self.pos += 1;
        }
        Token::Ident(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    idx: usize,
}

pub fn parse(source: &str) -> Result<Expression, ParseError> {
    if source.trim().is_empty() {
        return Err(ParseError::Syntax {
            position: 0,
            message: "empty expression".into(),
        });
    }
    let tokens = Lexer::tokenize(source)?;
    let mut parser = Parser { tokens, idx: 0 };
    let node = parser.expr()?;
    match parser.peek() {
        Token::End => Ok(Expression::from_node(node)),
        other => Err(parser.error(format!("unexpected token {other:?}"))),
    }
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.idx].0
    }

    fn position(&self) -> usize {
        self.tokens[self.idx].1
    }

    fn advance(&mut self) -> Token {
        let token = self.tokens[self.idx].0.clone();
        if self.idx + 1 < self.tokens.len() {
            self.idx += 1;
        }
        token
    }

    fn error(&self, message: String) -> ParseError {
        ParseError::Syntax {
            position: self.position(),
            message,
        }
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<(), ParseError> {
        if *self.peek() == want {
            self.advance();
            Ok(())
        } else {
            Err(self.error(format!("expected {what}")))
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Token::Plus => BinOp::Add,
                Token::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Token::Star => BinOp::Mul,
                Token::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if *self.peek() == Token::Minus {
            self.advance();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.primary()?;
        if *self.peek() == Token::Caret {
            self.advance();
            let exponent = self.unary()?;
            return Ok(Node::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let position = self.position();
        match self.advance() {
            Token::Number(v) => Ok(Node::Const(v)),
            Token::LParen => {
                let inner = self.expr()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(inner)
            }
            Token::Ident(name) => self.identifier(name, position),
            Token::End => Err(ParseError::Syntax {
                position,
                message: "unexpected end of input".into(),
            }),
            other => Err(ParseError::Syntax {
                position,
                message: format!("unexpected token {other:?}"),
            }),
        }
    }

    fn identifier(&mut self, name: String, position: usize) -> Result<Node, ParseError> {
        if name == "x" {
            return Ok(Node::Var);
        }
        let func = match name.as_str() {
            "exp" => Some(Func::Exp),
            "log" => Some(Func::Log),
            "sqrt" => Some(Func::Sqrt),
            "abs" => Some(Func::Abs),
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "pow" => None,
            _ => return Err(ParseError::UnknownIdentifier { position, name }),
        };
        self.expect(Token::LParen, &format!("`(` after `{name}`"))?;
        let first = self.expr()?;
        let node = match func {
            Some(func) => Node::Call(func, Box::new(first)),
            None => {
                self.expect(Token::Comma, "`,` in pow(base, exponent)")?;
                let exponent = self.expr()?;
                Node::Binary(BinOp::Pow, Box::new(first), Box::new(exponent))
            }
        };
        self.expect(Token::RParen, "`)`")?;
        Ok(node)
    }
}
