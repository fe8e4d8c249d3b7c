//! Scalar expressions in `x`, `u`, `u1`.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr   := term (("+" | "-") term)*
//! term   := unary (("*" | "/") unary)*
//! unary  := "-" unary | power
//! power  := atom ("^" unary)?          right-associative
//! atom   := number | "pi" | "e" | variable | func "(" expr ")" | "(" expr ")"
//! ```
//!
//! There is no implicit multiplication. Functions are `exp`, `log`, `sin`,
//! `cos`, `tan`, `atan` and `sqrt`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taylor::{Elementary, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Var {
    X,
    U,
    U1,
}

impl Var {
    pub const ALL: [Var; 3] = [Var::X, Var::U, Var::U1];

    pub fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::U => "u",
            Var::U1 => "u1",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_name(name: &str) -> Option<Var> {
        Self::ALL.into_iter().find(|v| v.name() == name)
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
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(Var),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Elementary, Box<Node>),
}

impl Node {
    pub fn binary(op: BinOp, a: Node, b: Node) -> Node {
        Node::Binary(op, Box::new(a), Box::new(b))
    }

    /// Integer value of an exponent written as an integer literal,
    /// possibly negated.
    fn integer_exponent(&self) -> Option<i32> {
        let (v, sign) = match self {
            Node::Const(v) => (*v, 1.0),
            Node::Neg(inner) => match **inner {
                Node::Const(v) => (v, -1.0),
                _ => return None,
            },
            _ => return None,
        };
        (v.fract() == 0.0 && v.abs() <= i32::MAX as f64).then_some((sign * v) as i32)
    }

    pub fn eval<S: Scalar>(&self, env: &Binding<S>) -> Result<S> {
        Ok(match self {
            Node::Const(c) => env.template()?.constant_like(*c),
            Node::Var(v) => env.get(*v)?,
            Node::Neg(a) => -a.eval(env)?,
            Node::Binary(op, a, b) => {
                let lhs = a.eval(env)?;
                match op {
                    BinOp::Add => lhs + b.eval(env)?,
                    BinOp::Sub => lhs - b.eval(env)?,
                    BinOp::Mul => lhs * b.eval(env)?,
                    BinOp::Div => lhs.checked_div(b.eval(env)?)?,
                    BinOp::Pow => match b.integer_exponent() {
                        Some(n) => lhs.powi(n)?,
                        None => {
                            let log = lhs.elementary(Elementary::Log).map_err(|_| Error::Domain {
                                func: "pow",
                                value: lhs.value(),
                            })?;
                            (b.eval(env)? * log).elementary(Elementary::Exp)?
                        }
                    },
                }
            }
            Node::Call(f, a) => a.eval(env)?.elementary(*f)?,
        })
    }

    fn is_zero(&self) -> bool {
        matches!(self, Node::Const(c) if *c == 0.0)
    }

    fn is_one(&self) -> bool {
        matches!(self, Node::Const(c) if *c == 1.0)
    }

    fn add(a: Node, b: Node) -> Node {
        match (a.is_zero(), b.is_zero()) {
            (true, _) => b,
            (_, true) => a,
            _ => Node::binary(BinOp::Add, a, b),
        }
    }

    fn sub(a: Node, b: Node) -> Node {
        match (a.is_zero(), b.is_zero()) {
            (_, true) => a,
            (true, _) => Node::Neg(Box::new(b)),
            _ => Node::binary(BinOp::Sub, a, b),
        }
    }

    fn mul(a: Node, b: Node) -> Node {
        if a.is_zero() || b.is_zero() {
            Node::Const(0.0)
        } else if a.is_one() {
            b
        } else if b.is_one() {
            a
        } else {
            Node::binary(BinOp::Mul, a, b)
        }
    }

    fn div(a: Node, b: Node) -> Node {
        if a.is_zero() {
            Node::Const(0.0)
        } else if b.is_one() {
            a
        } else {
            Node::binary(BinOp::Div, a, b)
        }
    }

    fn call(f: Elementary, a: Node) -> Node {
        Node::Call(f, Box::new(a))
    }

    /// Symbolic partial derivative with respect to `var`.
    pub fn derivative(&self, var: Var) -> Node {
        match self {
            Node::Const(_) => Node::Const(0.0),
            Node::Var(v) => Node::Const(if *v == var { 1.0 } else { 0.0 }),
            Node::Neg(a) => {
                let da = a.derivative(var);
                if da.is_zero() {
                    da
                } else {
                    Node::Neg(Box::new(da))
                }
            }
            Node::Binary(op, a, b) => {
                let (da, db) = (a.derivative(var), b.derivative(var));
                let (a, b) = ((**a).clone(), (**b).clone());
                match op {
                    BinOp::Add => Node::add(da, db),
                    BinOp::Sub => Node::sub(da, db),
                    BinOp::Mul => Node::add(Node::mul(da, b.clone()), Node::mul(a, db)),
                    BinOp::Div => Node::sub(
                        Node::div(da, b.clone()),
                        Node::div(Node::mul(a, db), Node::binary(BinOp::Pow, b, Node::Const(2.0))),
                    ),
                    BinOp::Pow => match b.integer_exponent() {
                        Some(n) => {
                            let lower = Node::binary(BinOp::Pow, a, integer_literal(n - 1));
                            Node::mul(Node::mul(Node::Const(n as f64), lower), da)
                        }
                        None => {
                            // a^b (b' log a + b a' / a)
                            let pow = Node::binary(BinOp::Pow, a.clone(), b.clone());
                            let inner = Node::add(
                                Node::mul(db, Node::call(Elementary::Log, a.clone())),
                                Node::div(Node::mul(b, da), a),
                            );
                            Node::mul(pow, inner)
                        }
                    },
                }
            }
            Node::Call(f, a) => {
                let da = a.derivative(var);
                if da.is_zero() {
                    return da;
                }
                let a = (**a).clone();
                let outer = match f {
                    Elementary::Exp => Node::call(Elementary::Exp, a),
                    Elementary::Log => Node::div(Node::Const(1.0), a),
                    Elementary::Sin => Node::call(Elementary::Cos, a),
                    Elementary::Cos => Node::Neg(Box::new(Node::call(Elementary::Sin, a))),
                    Elementary::Tan => Node::div(
                        Node::Const(1.0),
                        Node::binary(BinOp::Pow, Node::call(Elementary::Cos, a), Node::Const(2.0)),
                    ),
                    Elementary::Atan => Node::div(
                        Node::Const(1.0),
                        Node::add(Node::Const(1.0), Node::binary(BinOp::Pow, a, Node::Const(2.0))),
                    ),
                    Elementary::Sqrt => Node::div(Node::Const(0.5), Node::call(Elementary::Sqrt, a)),
                };
                Node::mul(outer, da)
            }
        }
    }

    /// Replaces variables by the trees returned from `subs`; variables
    /// mapped to `None` are kept.
    pub fn substitute(&self, subs: &impl Fn(Var) -> Option<Node>) -> Node {
        match self {
            Node::Const(_) => self.clone(),
            Node::Var(v) => subs(*v).unwrap_or_else(|| self.clone()),
            Node::Neg(a) => Node::Neg(Box::new(a.substitute(subs))),
            Node::Binary(op, a, b) => Node::binary(*op, a.substitute(subs), b.substitute(subs)),
            Node::Call(f, a) => Node::Call(*f, Box::new(a.substitute(subs))),
        }
    }

    fn collect_vars(&self, out: &mut Vec<Var>) {
        match self {
            Node::Const(_) => {}
            Node::Var(v) => {
                if !out.contains(v) {
                    out.push(*v);
                }
            }
            Node::Neg(a) | Node::Call(_, a) => a.collect_vars(out),
            Node::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }
}

fn integer_literal(n: i32) -> Node {
    if n < 0 {
        Node::Neg(Box::new(Node::Const(-(n as f64))))
    } else {
        Node::Const(n as f64)
    }
}

/// Fully parenthesized form; re-parses to the same tree.
impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Const(c) => write!(f, "{c:?}"),
            Node::Var(v) => f.write_str(v.name()),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// Values for the variables of an expression.
#[derive(Debug, Clone, Copy)]
pub struct Binding<S> {
    values: [Option<S>; 3],
}

impl<S: Scalar> Binding<S> {
    pub fn new() -> Self {
        Self { values: [None; 3] }
    }

    pub fn xyz(x: S, u: S, u1: S) -> Self {
        Self {
            values: [Some(x), Some(u), Some(u1)],
        }
    }

    pub fn from_array(v: [S; 3]) -> Self {
        Self::xyz(v[0], v[1], v[2])
    }

    pub fn with(mut self, var: Var, value: S) -> Self {
        self.values[var.index()] = Some(value);
        self
    }

    fn get(&self, var: Var) -> Result<S> {
        self.values[var.index()].ok_or(Error::UnboundVariable(var.name()))
    }

    fn template(&self) -> Result<S> {
        self.values
            .iter()
            .flatten()
            .next()
            .copied()
            .ok_or(Error::UnboundVariable("(any)"))
    }
}

impl<S: Scalar> Default for Binding<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
pub struct Expression {
    ast: Node,
    source: String,
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.ast == other.ast
    }
}

impl Expression {
    pub fn parse(text: &str, allowed: &[Var]) -> Result<Self> {
        let tokens = lex(text)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            allowed,
        };
        let ast = p.expr()?;
        let tok = p.peek();
        if tok.kind != Tok::End {
            return Err(Error::Syntax {
                offset: tok.offset,
                message: format!("unexpected {}", tok.kind.describe()),
            });
        }
        Ok(Self {
            ast,
            source: text.to_string(),
        })
    }

    pub fn from_node(ast: Node) -> Self {
        let source = ast.to_string();
        Self { ast, source }
    }

    pub fn ast(&self) -> &Node {
        &self.ast
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval<S: Scalar>(&self, env: &Binding<S>) -> Result<S> {
        self.ast.eval(env)
    }

    pub fn derivative(&self, var: Var) -> Self {
        Self::from_node(self.ast.derivative(var))
    }

    /// Variables that occur in the expression, in order of first use.
    pub fn variables(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.ast.collect_vars(&mut out);
        out
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.ast.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    offset: usize,
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                i += 1;
                Tok::Op(c as char)
            }
            b'(' => {
                i += 1;
                Tok::LParen
            }
            b')' => {
                i += 1;
                Tok::RParen
            }
            b',' => {
                i += 1;
                Tok::Comma
            }
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                // exponent only when digits follow, so `2e` stays a syntax error
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut k = i + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        while k < bytes.len() && bytes[k].is_ascii_digit() {
                            k += 1;
                        }
                        i = k;
                    }
                }
                let lit = &text[start..i];
                let v = lit.parse::<f64>().map_err(|_| Error::Syntax {
                    offset: start,
                    message: format!("malformed number `{lit}`"),
                })?;
                Tok::Num(v)
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                Tok::Ident(text[start..i].to_string())
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(Error::Syntax {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        };
        out.push(Token { kind, offset: start });
    }
    out.push(Token {
        kind: Tok::End,
        offset: text.len(),
    });
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    allowed: &'a [Var],
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if t.kind != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, kind: Tok) -> Result<()> {
        let t = self.next();
        if t.kind == kind {
            Ok(())
        } else {
            Err(Error::Syntax {
                offset: t.offset,
                message: format!("expected {}, found {}", kind.describe(), t.kind.describe()),
            })
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().kind {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.next();
            lhs = Node::binary(op, lhs, self.term()?);
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().kind {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.next();
            lhs = Node::binary(op, lhs, self.unary()?);
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek().kind == Tok::Op('-') {
            self.next();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.peek().kind == Tok::Op('^') {
            self.next();
            let exp = self.unary()?;
            return Ok(Node::binary(BinOp::Pow, base, exp));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let t = self.next();
        match t.kind {
            Tok::Num(v) => Ok(Node::Const(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Tok::Ident(name) => self.identifier(name, t.offset),
            other => Err(Error::Syntax {
                offset: t.offset,
                message: format!("unexpected {}", other.describe()),
            }),
        }
    }

    fn identifier(&mut self, name: String, offset: usize) -> Result<Node> {
        if let Some(func) = Elementary::from_name(&name) {
            self.expect(Tok::LParen)?;
            if self.peek().kind == Tok::RParen {
                return Err(Error::Arity {
                    func: name,
                    expected: 1,
                    found: 0,
                });
            }
            let arg = self.expr()?;
            let mut found = 1;
            while self.peek().kind == Tok::Comma {
                self.next();
                self.expr()?;
                found += 1;
            }
            if found != 1 {
                return Err(Error::Arity {
                    func: name,
                    expected: 1,
                    found,
                });
            }
            self.expect(Tok::RParen)?;
            return Ok(Node::Call(func, Box::new(arg)));
        }
        match name.as_str() {
            "pi" => return Ok(Node::Const(std::f64::consts::PI)),
            "e" => return Ok(Node::Const(std::f64::consts::E)),
            _ => {}
        }
        match Var::from_name(&name) {
            Some(v) if self.allowed.contains(&v) => Ok(Node::Var(v)),
            _ => Err(Error::UnknownIdentifier { name, offset }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taylor::lift_variables;
    use approx::assert_abs_diff_eq;

    const XUW: &[Var] = &[Var::X, Var::U, Var::U1];

    fn parse(s: &str) -> Result<Expression> {
        Expression::parse(s, XUW)
    }

    #[test]
    fn precedence() {
        let e = parse("u1^2 + x*u1").unwrap();
        let expected = Node::binary(
            BinOp::Add,
            Node::binary(BinOp::Pow, Node::Var(Var::U1), Node::Const(2.0)),
            Node::binary(BinOp::Mul, Node::Var(Var::X), Node::Var(Var::U1)),
        );
        assert_eq!(e.ast(), &expected);

        // ^ is right-associative and binds tighter than unary minus
        let e = parse("-x^2^3").unwrap();
        let expected = Node::Neg(Box::new(Node::binary(
            BinOp::Pow,
            Node::Var(Var::X),
            Node::binary(BinOp::Pow, Node::Const(2.0), Node::Const(3.0)),
        )));
        assert_eq!(e.ast(), &expected);

        let e = parse("1 - x - u").unwrap();
        assert_eq!(e.to_string(), "((1.0 - x) - u)");
    }

    #[test]
    fn syntax_errors() {
        assert_eq!(
            parse("(u1").unwrap_err(),
            Error::Syntax {
                offset: 3,
                message: "expected `)`, found end of input".into()
            }
        );
        assert!(matches!(parse("2x"), Err(Error::Syntax { offset: 1, .. })));
        assert!(matches!(parse(""), Err(Error::Syntax { offset: 0, .. })));
        assert!(matches!(parse("x $ u"), Err(Error::Syntax { offset: 2, .. })));
        assert!(matches!(parse("2e"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn identifiers() {
        assert_eq!(
            parse("exp(v)").unwrap_err(),
            Error::UnknownIdentifier {
                name: "v".into(),
                offset: 4
            }
        );
        assert!(matches!(parse("u_1"), Err(Error::UnknownIdentifier { .. })));
        assert!(matches!(
            Expression::parse("x + u", &[Var::X]),
            Err(Error::UnknownIdentifier { offset: 4, .. })
        ));
        assert!(matches!(parse("exp(x, u)"), Err(Error::Arity { found: 2, .. })));
        assert!(matches!(parse("sqrt()"), Err(Error::Arity { found: 0, .. })));
        assert_eq!(
            parse("pi").unwrap().eval(&Binding::xyz(0.0, 0.0, 0.0)).unwrap(),
            std::f64::consts::PI
        );
        assert_eq!(parse("1.5e-3").unwrap().ast(), &Node::Const(1.5e-3));
    }

    #[test]
    fn eval_reals() {
        let e = parse("u1^2").unwrap();
        assert_eq!(e.eval(&Binding::new().with(Var::U1, 3.0)).unwrap(), 9.0);
        let e = parse("1/x").unwrap();
        assert!(matches!(
            e.eval(&Binding::new().with(Var::X, 0.0)),
            Err(Error::DivisionBySingular(_))
        ));
        // integer powers of negative bases are fine, fractional ones are not
        let b = Binding::new().with(Var::X, -2.0);
        assert_eq!(parse("x^3").unwrap().eval(&b).unwrap(), -8.0);
        assert_eq!(parse("x^-2").unwrap().eval(&b).unwrap(), 0.25);
        assert!(matches!(
            parse("x^0.5").unwrap().eval(&b),
            Err(Error::Domain { func: "pow", .. })
        ));
        assert_abs_diff_eq!(
            parse("x^(1/2)")
                .unwrap()
                .eval(&Binding::new().with(Var::X, 4.0))
                .unwrap(),
            2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn eval_series() {
        let [x, u, w] = lift_variables([0.0, 0.0, 1.0], 2).unwrap();
        let s = parse("u1^2").unwrap().eval(&Binding::xyz(x, u, w)).unwrap();
        assert_eq!(s.coeff([0, 0, 0]), 1.0);
        assert_eq!(s.coeff([0, 0, 1]), 2.0);
        assert_eq!(s.coeff([0, 0, 2]), 1.0);
        assert!(s.coeffs()[1..]
            .iter()
            .enumerate()
            .all(|(k, &c)| c == 0.0 || k + 1 == 3 || k + 1 == 9));
    }

    #[test]
    fn unbound_variable() {
        let e = parse("x + u").unwrap();
        assert_eq!(
            e.eval(&Binding::new().with(Var::X, 1.0)).unwrap_err(),
            Error::UnboundVariable("u")
        );
        assert_eq!(e.variables(), vec![Var::X, Var::U]);
    }

    #[test]
    fn symbolic_derivative_matches_series() {
        let p = [0.4, 0.7, 1.3];
        for text in [
            "u1^3/3 + x*u1 + u^2 + 2",
            "exp(u1) + x*u^2 + sin(x*u1)",
            "u^x + sqrt(u1) - log(u) * cos(x)",
            "tan(u/2) + atan(x*u1) / (1 + u^-2)",
            "-(x - u)^-3",
        ] {
            let e = parse(text).unwrap();
            let series = e.eval(&Binding::from_array(lift_variables(p, 2).unwrap())).unwrap();
            for var in Var::ALL {
                let d = e.derivative(var).eval(&Binding::from_array(p)).unwrap();
                let expected = series.partial(unit(var.index())).unwrap();
                assert_abs_diff_eq!(d, expected, epsilon = 1e-12 * (1.0 + expected.abs()));
                let dd = e
                    .derivative(var)
                    .derivative(Var::U1)
                    .eval(&Binding::from_array(p))
                    .unwrap();
                let mut s = unit(var.index());
                s[2] += 1;
                let expected = series.partial(s).unwrap();
                assert_abs_diff_eq!(dd, expected, epsilon = 1e-12 * (1.0 + expected.abs()));
            }
        }
        assert_eq!(parse("x^2").unwrap().derivative(Var::U).source(), "0.0");
    }

    fn unit(k: usize) -> [usize; 3] {
        let mut s = [0; 3];
        s[k] = 1;
        s
    }
}
