//! A small arithmetic language for drift components in configs.
//!
//! Grammar: `+ - * / ^`, unary minus, parentheses, numbers, the variables
//! `t`, `u`, `x1..x3` (`x` is `x1`), named parameters, and the functions
//! `tanh exp ln sqrt abs sin cos sign step min max`. `step(z)` is `1` for
//! `z > 0` and `0` otherwise.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Time,
    Density,
    Coord(usize),
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Sign,
    Step,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<(Self, usize)> {
        Some(match name {
            "tanh" => (Self::Tanh, 1),
            "exp" => (Self::Exp, 1),
            "ln" => (Self::Ln, 1),
            "sqrt" => (Self::Sqrt, 1),
            "abs" => (Self::Abs, 1),
            "sin" => (Self::Sin, 1),
            "cos" => (Self::Cos, 1),
            "sign" => (Self::Sign, 1),
            "step" => (Self::Step, 1),
            "min" => (Self::Min, 2),
            "max" => (Self::Max, 2),
            _ => return None,
        })
    }
}

/// A parsed expression in `(t, x, u)`, with parameters folded to constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
    source: String,
}

impl Expr {
    pub fn parse(source: &str, dim: usize, params: &BTreeMap<String, f64>) -> Result<Self> {
        let tokens = tokenize(source)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            dim,
            params,
        };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expression(format!(
                "unexpected `{}` in `{source}`",
                p.tokens[p.pos]
            )));
        }
        Ok(Self {
            root,
            source: source.to_string(),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, t: f64, x: &[f64], u: f64) -> f64 {
        eval(&self.root, t, x, u)
    }
}

fn eval(n: &Node, t: f64, x: &[f64], u: f64) -> f64 {
    match n {
        Node::Const(c) => *c,
        Node::Time => t,
        Node::Density => u,
        Node::Coord(i) => x[*i],
        Node::Neg(a) => -eval(a, t, x, u),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, t, x, u), eval(b, t, x, u));
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => a / b,
                Op::Pow => a.powf(b),
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], t, x, u);
            match f {
                Func::Tanh => a.tanh(),
                Func::Exp => a.exp(),
                Func::Ln => a.ln(),
                Func::Sqrt => a.sqrt(),
                Func::Abs => a.abs(),
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Sign => {
                    if a > 0.0 {
                        1.0
                    } else if a < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                Func::Step => {
                    if a > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Func::Min => a.min(eval(&args[1], t, x, u)),
                Func::Max => a.max(eval(&args[1], t, x, u)),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Sym(char),
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Token::Num(v) => write!(f, "{v}"),
            Token::Ident(s) => write!(f, "{s}"),
            Token::Sym(c) => write!(f, "{c}"),
        }
    }
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
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
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Expression(format!("bad number `{text}`")))?;
            out.push(Token::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^(),".contains(c) {
            out.push(Token::Sym(c));
            i += 1;
        } else {
            return Err(Error::Expression(format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    dim: usize,
    params: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Token::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Expression(format!(
                "expected `{c}`, found {}",
                self.peek().map_or("end of input".to_string(), |t| format!("`{t}`"))
            )))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                Op::Add
            } else if self.eat('-') {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                Op::Mul
            } else if self.eat('/') {
                Op::Div
            } else {
                return Ok(lhs);
            };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat('^') {
            // right-associative, binds tighter than unary minus on the left
            let exp = self.unary()?;
            return Ok(Node::Bin(Op::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let tok = self
            .peek()
            .cloned()
            .ok_or_else(|| Error::Expression("unexpected end of expression".into()))?;
        self.pos += 1;
        match tok {
            Token::Num(v) => Ok(Node::Const(v)),
            Token::Sym('(') => {
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Token::Ident(name) => self.ident(&name),
            Token::Sym(c) => Err(Error::Expression(format!("unexpected `{c}`"))),
        }
    }

    fn ident(&mut self, name: &str) -> Result<Node> {
        if let Some((func, arity)) = Func::lookup(name) {
            self.expect('(')?;
            let mut args = vec![self.expr()?];
            while self.eat(',') {
                args.push(self.expr()?);
            }
            self.expect(')')?;
            if args.len() != arity {
                return Err(Error::Expression(format!(
                    "`{name}` takes {arity} argument(s), got {}",
                    args.len()
                )));
            }
            return Ok(Node::Call(func, args));
        }
        match name {
            "t" => return Ok(Node::Time),
            "u" => return Ok(Node::Density),
            "x" => return Ok(Node::Coord(0)),
            "pi" => return Ok(Node::Const(std::f64::consts::PI)),
            _ => {}
        }
        if let Some(k) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
            if k >= 1 && k <= self.dim {
                return Ok(Node::Coord(k - 1));
            }
            return Err(Error::Expression(format!(
                "coordinate `{name}` outside dimension {}",
                self.dim
            )));
        }
        self.params
            .get(name)
            .map(|v| Node::Const(*v))
            .ok_or_else(|| Error::Expression(format!("unknown identifier `{name}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Expr> {
        let mut p = BTreeMap::new();
        p.insert("c".to_string(), 2.0);
        Expr::parse(s, 2, &p)
    }

    #[test]
    fn precedence_and_functions() {
        let e = parse("c * tanh(u) + 1 - 2 ^ 3 / 4").unwrap();
        assert_eq!(e.eval(0.0, &[0.0, 0.0], 0.5), 2.0 * 0.5f64.tanh() + 1.0 - 2.0);
        assert_eq!(parse("-2^2").unwrap().eval(0.0, &[0.0, 0.0], 0.0), -4.0);
        assert_eq!(parse("2^-1").unwrap().eval(0.0, &[0.0, 0.0], 0.0), 0.5);
        assert_eq!(parse("min(u, 3) * step(x1) + x2").unwrap().eval(0.0, &[1.0, 0.25], 5.0), 3.25);
        assert_eq!(parse("t*1e-1").unwrap().eval(3.0, &[0.0, 0.0], 0.0), 0.30000000000000004);
    }

    #[test]
    fn errors_name_the_problem() {
        assert!(parse("foo(u)").unwrap_err().to_string().contains("foo"));
        assert!(parse("x3").unwrap_err().to_string().contains("outside dimension"));
        assert!(parse("min(u)").is_err());
        assert!(parse("(u").is_err());
        assert!(parse("u $ 2").is_err());
        assert!(parse("u u").is_err());
    }
}
