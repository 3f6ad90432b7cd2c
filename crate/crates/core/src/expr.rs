//! Small arithmetic expression language for scalar coefficient functions.
//!
//! Used for the affine coefficients Theta_i(mu) and for boundary/initial
//! data given in run configurations. Supports `+ - * / ^`, unary minus,
//! parentheses, floating literals, named variables (`mu0`, `mu1`, ...,
//! `x`, `y`, depending on the evaluation context), the constant `pi`, and
//! the functions `sin`, `cos`, `exp`, `sqrt`, `abs`.

use crate::error::{Error, Result};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Number(f64),
    Variable(String),
    Unary(Box<Node>),
    Binary(char, Box<Node>, Box<Node>),
    Call(Builtin, Box<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Builtin {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
}

/// A parsed expression; evaluation never re-parses.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
    source: String,
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let mut p = Parser {
            bytes: source.as_bytes(),
            pos: 0,
        };
        p.skip_ws();
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(Error::Parse {
                position: p.pos,
                message: format!("unexpected trailing input in `{source}`"),
            });
        }
        Ok(Self {
            root,
            source: source.to_string(),
        })
    }

    /// Evaluate with variables given as (name, value) pairs.
    pub fn eval(&self, vars: &[(&str, f64)]) -> Result<f64> {
        eval_node(&self.root, vars)
    }

    /// Evaluate with `mu0..muK` bound to the parameter vector entries.
    pub fn eval_mu(&self, mu: &[f64]) -> Result<f64> {
        let names: Vec<String> = (0..mu.len()).map(|k| format!("mu{k}")).collect();
        let vars: Vec<(&str, f64)> = names
            .iter()
            .map(|n| n.as_str())
            .zip(mu.iter().copied())
            .collect();
        self.eval(&vars)
    }
}

fn eval_node(node: &Node, vars: &[(&str, f64)]) -> Result<f64> {
    Ok(match node {
        Node::Number(v) => *v,
        Node::Variable(name) => vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid(format!("unknown variable `{name}`")))?,
        Node::Unary(inner) => -eval_node(inner, vars)?,
        Node::Call(f, inner) => {
            let v = eval_node(inner, vars)?;
            match f {
                Builtin::Sin => v.sin(),
                Builtin::Cos => v.cos(),
                Builtin::Exp => v.exp(),
                Builtin::Sqrt => v.sqrt(),
                Builtin::Abs => v.abs(),
            }
        }
        Node::Binary(op, a, b) => {
            let (a, b) = (eval_node(a, vars)?, eval_node(b, vars)?);
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                '/' => a / b,
                '^' => a.powf(b),
                _ => unreachable!(),
            }
        }
    })
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            position: self.pos,
            message: message.into(),
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(op @ (b'+' | b'-')) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Node::Binary(op as char, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.factor()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(op @ (b'*' | b'/')) => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Node::Binary(op as char, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Node> {
        self.skip_ws();
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Node::Unary(Box::new(self.factor()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        self.skip_ws();
        if self.peek() == Some(b'^') {
            self.pos += 1;
            // Right associative; exponent may carry its own unary minus.
            let exp = self.factor()?;
            return Ok(Node::Binary('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.skip_ws();
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            Some(c) => Err(self.err(format!("unexpected character `{}`", c as char))),
            None => Err(self.err("unexpected end of expression")),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || c == b'.' {
                self.pos += 1;
            } else if (c == b'e' || c == b'E') && self.pos > start {
                self.pos += 1;
                if matches!(self.peek(), Some(b'+' | b'-')) {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Node::Number)
            .map_err(|_| Error::Parse {
                position: start,
                message: format!("invalid number `{text}`"),
            })
    }

    fn ident(&mut self) -> Result<Node> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == b'_' {
                self.pos += 1;
            } else {
                break;
            }
        }
        let name = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        self.skip_ws();
        if self.peek() == Some(b'(') {
            let builtin = match name {
                "sin" => Builtin::Sin,
                "cos" => Builtin::Cos,
                "exp" => Builtin::Exp,
                "sqrt" => Builtin::Sqrt,
                "abs" => Builtin::Abs,
                other => {
                    return Err(Error::Parse {
                        position: start,
                        message: format!("unknown function `{other}`"),
                    })
                }
            };
            self.pos += 1;
            let arg = self.expr()?;
            self.skip_ws();
            if self.peek() != Some(b')') {
                return Err(self.err("expected `)` after function argument"));
            }
            self.pos += 1;
            return Ok(Node::Call(builtin, Box::new(arg)));
        }
        if name == "pi" {
            return Ok(Node::Number(std::f64::consts::PI));
        }
        Ok(Node::Variable(name.to_string()))
    }
}
