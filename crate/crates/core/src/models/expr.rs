//! Arithmetic expressions in `q1..qn, p1..pn` with symbolic derivatives.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' unary)?          right associative
//! primary := number | 'pi' | var | func '(' expr ')' | '(' expr ')'
//! func    := sin | cos | exp | sqrt
//! ```
//!
//! Positions in errors are 0-based character offsets into the source.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Node {
    Const(f64),
    Var(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Pow(usize, usize),
    Neg(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Sqrt(usize),
    Ln(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Key {
    Const(u64),
    Var(usize),
    Bin(u8, usize, usize),
    Un(u8, usize),
}

impl Node {
    fn key(&self) -> Key {
        match *self {
            Node::Const(c) => Key::Const(c.to_bits()),
            Node::Var(i) => Key::Var(i),
            Node::Add(a, b) => Key::Bin(0, a, b),
            Node::Sub(a, b) => Key::Bin(1, a, b),
            Node::Mul(a, b) => Key::Bin(2, a, b),
            Node::Div(a, b) => Key::Bin(3, a, b),
            Node::Pow(a, b) => Key::Bin(4, a, b),
            Node::Neg(a) => Key::Un(0, a),
            Node::Sin(a) => Key::Un(1, a),
            Node::Cos(a) => Key::Un(2, a),
            Node::Exp(a) => Key::Un(3, a),
            Node::Sqrt(a) => Key::Un(4, a),
            Node::Ln(a) => Key::Un(5, a),
        }
    }
}

/// Hash-consed expression DAG; children always precede parents.
#[derive(Clone, Debug, Default)]
struct Arena {
    nodes: Vec<Node>,
    pos: Vec<usize>,
    index: HashMap<Key, usize>,
}

impl Arena {
    fn push(&mut self, node: Node, pos: usize) -> usize {
        let key = node.key();
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.nodes.push(node);
        self.pos.push(pos);
        let i = self.nodes.len() - 1;
        self.index.insert(key, i);
        i
    }

    fn constant(&self, i: usize) -> Option<f64> {
        match self.nodes[i] {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    fn konst(&mut self, c: f64) -> usize {
        self.push(Node::Const(c), 0)
    }

    fn add(&mut self, a: usize, b: usize, pos: usize) -> usize {
        match (self.constant(a), self.constant(b)) {
            (Some(x), Some(y)) => self.konst(x + y),
            (Some(x), _) if x == 0.0 => b,
            (_, Some(y)) if y == 0.0 => a,
            _ => self.push(Node::Add(a, b), pos),
        }
    }

    fn sub(&mut self, a: usize, b: usize, pos: usize) -> usize {
        match (self.constant(a), self.constant(b)) {
            (Some(x), Some(y)) => self.konst(x - y),
            (_, Some(y)) if y == 0.0 => a,
            (Some(x), _) if x == 0.0 => self.neg(b, pos),
            _ => self.push(Node::Sub(a, b), pos),
        }
    }

    fn mul(&mut self, a: usize, b: usize, pos: usize) -> usize {
        match (self.constant(a), self.constant(b)) {
            (Some(x), Some(y)) => self.konst(x * y),
            (Some(x), _) | (_, Some(x)) if x == 0.0 => self.konst(0.0),
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            _ => self.push(Node::Mul(a, b), pos),
        }
    }

    fn div(&mut self, a: usize, b: usize, pos: usize) -> usize {
        match (self.constant(a), self.constant(b)) {
            (Some(x), Some(y)) if y != 0.0 => self.konst(x / y),
            (Some(x), _) if x == 0.0 => self.konst(0.0),
            (_, Some(y)) if y == 1.0 => a,
            _ => self.push(Node::Div(a, b), pos),
        }
    }

    fn pow(&mut self, a: usize, b: usize, pos: usize) -> usize {
        match (self.constant(a), self.constant(b)) {
            (Some(x), Some(y)) if pow_checked(x, y).is_some() => self.konst(x.powf(y)),
            (_, Some(y)) if y == 1.0 => a,
            (_, Some(y)) if y == 0.0 => self.konst(1.0),
            _ => self.push(Node::Pow(a, b), pos),
        }
    }

    fn neg(&mut self, a: usize, pos: usize) -> usize {
        if let Some(x) = self.constant(a) {
            return self.konst(-x);
        }
        if let Node::Neg(inner) = self.nodes[a] {
            return inner;
        }
        self.push(Node::Neg(a), pos)
    }

    fn unary(&mut self, f: fn(usize) -> Node, a: usize, pos: usize) -> usize {
        let node = f(a);
        if let Some(x) = self.constant(a) {
            let folded = match node {
                Node::Sin(_) => Some(x.sin()),
                Node::Cos(_) => Some(x.cos()),
                Node::Exp(_) => Some(x.exp()),
                Node::Sqrt(_) if x >= 0.0 => Some(x.sqrt()),
                Node::Ln(_) if x > 0.0 => Some(x.ln()),
                _ => None,
            };
            if let Some(v) = folded.filter(|v| v.is_finite()) {
                return self.konst(v);
            }
        }
        self.push(node, pos)
    }

    /// Symbolic partial derivative of `root` with respect to `var`, memoised
    /// over the shared subexpressions.
    fn derivative(&mut self, root: usize, var: usize) -> usize {
        let mut memo: HashMap<usize, usize> = HashMap::new();
        self.diff(root, var, &mut memo)
    }

    fn diff(&mut self, i: usize, var: usize, memo: &mut HashMap<usize, usize>) -> usize {
        if let Some(&d) = memo.get(&i) {
            return d;
        }
        let pos = self.pos[i];
        let d = match self.nodes[i] {
            Node::Const(_) => self.konst(0.0),
            Node::Var(v) => self.konst(if v == var { 1.0 } else { 0.0 }),
            Node::Add(a, b) => {
                let (da, db) = (self.diff(a, var, memo), self.diff(b, var, memo));
                self.add(da, db, pos)
            }
            Node::Sub(a, b) => {
                let (da, db) = (self.diff(a, var, memo), self.diff(b, var, memo));
                self.sub(da, db, pos)
            }
            Node::Mul(a, b) => {
                let (da, db) = (self.diff(a, var, memo), self.diff(b, var, memo));
                let l = self.mul(da, b, pos);
                let r = self.mul(a, db, pos);
                self.add(l, r, pos)
            }
            Node::Div(a, b) => {
                // (a/b)' = a'/b − a b'/b²
                let (da, db) = (self.diff(a, var, memo), self.diff(b, var, memo));
                let first = self.div(da, b, pos);
                let ab = self.mul(a, db, pos);
                let bb = self.mul(b, b, pos);
                let second = self.div(ab, bb, pos);
                self.sub(first, second, pos)
            }
            Node::Pow(a, b) => {
                let da = self.diff(a, var, memo);
                let db = self.diff(b, var, memo);
                if let Some(c) = self.constant(b) {
                    // (a^c)' = c a^(c−1) a'
                    let cm1 = self.konst(c - 1.0);
                    let p = self.pow(a, cm1, pos);
                    let k = self.konst(c);
                    let kp = self.mul(k, p, pos);
                    self.mul(kp, da, pos)
                } else {
                    // (a^b)' = a^b (b' ln a + b a'/a)
                    let ln = self.unary(Node::Ln, a, pos);
                    let t1 = self.mul(db, ln, pos);
                    let bda = self.mul(b, da, pos);
                    let t2 = self.div(bda, a, pos);
                    let s = self.add(t1, t2, pos);
                    self.mul(i, s, pos)
                }
            }
            Node::Neg(a) => {
                let da = self.diff(a, var, memo);
                self.neg(da, pos)
            }
            Node::Sin(a) => {
                let da = self.diff(a, var, memo);
                let c = self.unary(Node::Cos, a, pos);
                self.mul(c, da, pos)
            }
            Node::Cos(a) => {
                let da = self.diff(a, var, memo);
                let s = self.unary(Node::Sin, a, pos);
                let ns = self.neg(s, pos);
                self.mul(ns, da, pos)
            }
            Node::Exp(a) => {
                let da = self.diff(a, var, memo);
                self.mul(i, da, pos)
            }
            Node::Sqrt(a) => {
                // (√a)' = a' / (2√a)
                let da = self.diff(a, var, memo);
                let two = self.konst(2.0);
                let den = self.mul(two, i, pos);
                self.div(da, den, pos)
            }
            Node::Ln(a) => {
                let da = self.diff(a, var, memo);
                self.div(da, a, pos)
            }
        };
        memo.insert(i, d);
        d
    }

    /// Node indices reachable from `roots`, in evaluation order.
    fn schedule(&self, roots: &[usize]) -> Vec<usize> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = roots.to_vec();
        while let Some(i) = stack.pop() {
            if needed[i] {
                continue;
            }
            needed[i] = true;
            match self.nodes[i] {
                Node::Const(_) | Node::Var(_) => {}
                Node::Add(a, b)
                | Node::Sub(a, b)
                | Node::Mul(a, b)
                | Node::Div(a, b)
                | Node::Pow(a, b) => {
                    stack.push(a);
                    stack.push(b);
                }
                Node::Neg(a)
                | Node::Sin(a)
                | Node::Cos(a)
                | Node::Exp(a)
                | Node::Sqrt(a)
                | Node::Ln(a) => stack.push(a),
            }
        }
        (0..self.nodes.len()).filter(|&i| needed[i]).collect()
    }
}

fn pow_checked(x: f64, y: f64) -> Option<f64> {
    if x < 0.0 && y.fract() != 0.0 {
        return None;
    }
    if x == 0.0 && y < 0.0 {
        return None;
    }
    let v = x.powf(y);
    v.is_finite().then_some(v)
}

/// A parsed expression together with its symbolic gradient and Hessian.
///
/// Variables are ordered `q1..qn, p1..pn`.
#[derive(Clone, Debug)]
pub struct ExpressionProgram {
    n: usize,
    source: String,
    arena: Arena,
    root: usize,
    grad: Vec<usize>,
    hess: Vec<usize>,
    value_plan: Vec<usize>,
    grad_plan: Vec<usize>,
    hess_plan: Vec<usize>,
}

impl ExpressionProgram {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn run(&self, plan: &[usize], q: &[f64], p: &[f64], vals: &mut [f64]) -> Result<()> {
        let n = self.n;
        if q.len() != n || p.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "expression in dimension {n} evaluated at q of length {}, p of length {}",
                q.len(),
                p.len()
            )));
        }
        for &i in plan {
            let pos = self.arena.pos[i];
            let dom = |op: &'static str| Error::DomainError { op, position: pos };
            let v = match self.arena.nodes[i] {
                Node::Const(c) => c,
                Node::Var(v) => {
                    if v < n {
                        q[v]
                    } else {
                        p[v - n]
                    }
                }
                Node::Add(a, b) => vals[a] + vals[b],
                Node::Sub(a, b) => vals[a] - vals[b],
                Node::Mul(a, b) => vals[a] * vals[b],
                Node::Div(a, b) => {
                    if vals[b] == 0.0 {
                        return Err(dom("/"));
                    }
                    vals[a] / vals[b]
                }
                Node::Pow(a, b) => pow_checked(vals[a], vals[b]).ok_or_else(|| dom("^"))?,
                Node::Neg(a) => -vals[a],
                Node::Sin(a) => vals[a].sin(),
                Node::Cos(a) => vals[a].cos(),
                Node::Exp(a) => vals[a].exp(),
                Node::Sqrt(a) => {
                    if vals[a] < 0.0 {
                        return Err(dom("sqrt"));
                    }
                    vals[a].sqrt()
                }
                Node::Ln(a) => {
                    if vals[a] <= 0.0 {
                        return Err(dom("ln"));
                    }
                    vals[a].ln()
                }
            };
            if !v.is_finite() {
                return Err(dom(op_name(&self.arena.nodes[i])));
            }
            vals[i] = v;
        }
        Ok(())
    }

    pub fn eval(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        let mut vals = vec![0.0; self.arena.nodes.len()];
        self.run(&self.value_plan, q, p, &mut vals)?;
        Ok(vals[self.root])
    }

    /// Value and gradient `(∂/∂q, ∂/∂p)` as a `2n` vector.
    pub fn eval_gradient(&self, q: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut vals = vec![0.0; self.arena.nodes.len()];
        self.run(&self.grad_plan, q, p, &mut vals)?;
        Ok((
            vals[self.root],
            self.grad.iter().map(|&g| vals[g]).collect(),
        ))
    }

    /// Value, gradient and the row-major `2n × 2n` Hessian.
    pub fn eval_hessian(&self, q: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut vals = vec![0.0; self.arena.nodes.len()];
        self.run(&self.hess_plan, q, p, &mut vals)?;
        Ok((
            vals[self.root],
            self.grad.iter().map(|&g| vals[g]).collect(),
            self.hess.iter().map(|&h| vals[h]).collect(),
        ))
    }

    /// Whether `∂/∂var` is identically zero as a tree.
    pub fn structurally_independent_of(&self, var: usize) -> bool {
        self.arena.constant(self.grad[var]) == Some(0.0)
    }

    /// Whether every mixed second derivative `∂²/∂q_i∂p_j` vanishes
    /// structurally, i.e. the expression splits as `T(p) + V(q)`.
    pub fn is_separable(&self) -> bool {
        let m = 2 * self.n;
        (0..self.n)
            .all(|i| (self.n..m).all(|j| self.arena.constant(self.hess[i * m + j]) == Some(0.0)))
    }
}

fn op_name(node: &Node) -> &'static str {
    match node {
        Node::Const(_) => "const",
        Node::Var(_) => "var",
        Node::Add(..) => "+",
        Node::Sub(..) => "-",
        Node::Mul(..) => "*",
        Node::Div(..) => "/",
        Node::Pow(..) => "^",
        Node::Neg(_) => "neg",
        Node::Sin(_) => "sin",
        Node::Cos(_) => "cos",
        Node::Exp(_) => "exp",
        Node::Sqrt(_) => "sqrt",
        Node::Ln(_) => "ln",
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>> {
    let chars: Vec<char> = text.chars().collect();
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
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v: f64 = s.parse().map_err(|_| Error::SyntaxError {
                position: start,
                message: format!("malformed number `{s}`"),
            })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), start));
        } else if "+-*/^(),".contains(c) {
            out.push((Tok::Op(c), i));
            i += 1;
        } else {
            return Err(Error::SyntaxError {
                position: i,
                message: format!("unexpected character `{c}`"),
            });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: &'a [(Tok, usize)],
    at: usize,
    end: usize,
    n: usize,
    arena: Arena,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|t| &t.0)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |t| t.1)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, op: char) -> Result<()> {
        if self.eat(op) {
            Ok(())
        } else {
            Err(Error::SyntaxError {
                position: self.pos(),
                message: format!("expected `{op}`"),
            })
        }
    }

    fn expr(&mut self) -> Result<usize> {
        let mut lhs = self.term()?;
        loop {
            let pos = self.pos();
            if self.eat('+') {
                let rhs = self.term()?;
                lhs = self.arena.add(lhs, rhs, pos);
            } else if self.eat('-') {
                let rhs = self.term()?;
                lhs = self.arena.sub(lhs, rhs, pos);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<usize> {
        let mut lhs = self.unary()?;
        loop {
            let pos = self.pos();
            if self.eat('*') {
                let rhs = self.unary()?;
                lhs = self.arena.mul(lhs, rhs, pos);
            } else if self.eat('/') {
                let rhs = self.unary()?;
                lhs = self.arena.div(lhs, rhs, pos);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<usize> {
        let pos = self.pos();
        if self.eat('-') {
            let a = self.unary()?;
            Ok(self.arena.neg(a, pos))
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<usize> {
        let base = self.primary()?;
        let pos = self.pos();
        if self.eat('^') {
            let exp = self.unary()?;
            Ok(self.arena.pow(base, exp, pos))
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<usize> {
        let pos = self.pos();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.at += 1;
                Ok(self.arena.konst(v))
            }
            Some(Tok::Op('(')) => {
                self.at += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.at += 1;
                self.identifier(&name, pos)
            }
            Some(Tok::Op(c)) => Err(Error::SyntaxError {
                position: pos,
                message: format!("unexpected `{c}`"),
            }),
            None => Err(Error::SyntaxError {
                position: pos,
                message: "unexpected end of expression".into(),
            }),
        }
    }

    fn identifier(&mut self, name: &str, pos: usize) -> Result<usize> {
        let func: Option<fn(usize) -> Node> = match name {
            "sin" => Some(Node::Sin),
            "cos" => Some(Node::Cos),
            "exp" => Some(Node::Exp),
            "sqrt" => Some(Node::Sqrt),
            _ => None,
        };
        if let Some(f) = func {
            self.expect('(')?;
            let arg = self.expr()?;
            self.expect(')')?;
            return Ok(self.arena.unary(f, arg, pos));
        }
        if name == "pi" {
            return Ok(self.arena.konst(std::f64::consts::PI));
        }
        let unknown = || Error::UnknownIdentifier {
            name: name.to_string(),
            position: pos,
        };
        let (kind, digits) = name.split_at(1);
        if (kind == "q" || kind == "p")
            && !digits.is_empty()
            && digits.chars().all(|c| c.is_ascii_digit())
            && !digits.starts_with('0')
        {
            let idx: usize = digits.parse().map_err(|_| unknown())?;
            if idx > self.n {
                return Err(Error::DimensionMismatch(format!(
                    "`{name}` at position {pos} exceeds dimension {}",
                    self.n
                )));
            }
            let var = if kind == "q" {
                idx - 1
            } else {
                self.n + idx - 1
            };
            return Ok(self.arena.push(Node::Var(var), pos));
        }
        Err(unknown())
    }
}

/// Parse `text` as a function of `q1..qn, p1..pn`.
pub fn parse_hamiltonian(text: &str, n: usize) -> Result<ExpressionProgram> {
    if n == 0 {
        return Err(Error::DimensionMismatch(
            "dimension must be positive".into(),
        ));
    }
    let toks = tokenize(text)?;
    if toks.is_empty() {
        return Err(Error::SyntaxError {
            position: 0,
            message: "empty expression".into(),
        });
    }
    let mut parser = Parser {
        toks: &toks,
        at: 0,
        end: text.chars().count(),
        n,
        arena: Arena::default(),
    };
    let root = parser.expr()?;
    if parser.at < toks.len() {
        return Err(Error::SyntaxError {
            position: parser.pos(),
            message: "unexpected trailing input".into(),
        });
    }
    let mut arena = parser.arena;
    let m = 2 * n;
    let grad: Vec<usize> = (0..m).map(|v| arena.derivative(root, v)).collect();
    let mut hess = vec![0; m * m];
    for i in 0..m {
        for j in i..m {
            let h = arena.derivative(grad[i], j);
            hess[i * m + j] = h;
            hess[j * m + i] = h;
        }
    }
    let value_plan = arena.schedule(&[root]);
    let mut roots = vec![root];
    roots.extend(&grad);
    let grad_plan = arena.schedule(&roots);
    roots.extend(&hess);
    let hess_plan = arena.schedule(&roots);
    Ok(ExpressionProgram {
        n,
        source: text.to_string(),
        arena,
        root,
        grad,
        hess,
        value_plan,
        grad_plan,
        hess_plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn kinetic_energy_evaluates() {
        let e = parse_hamiltonian("0.5*(p1^2+p2^2)", 2).unwrap();
        let (v, g) = e.eval_gradient(&[0.0, 0.0], &[0.3, 0.7]).unwrap();
        assert!((v - 0.29).abs() < 1e-15);
        assert_eq!(g, vec![0.0, 0.0, 0.3, 0.7]);
        assert!(e.is_separable());
    }

    #[test]
    fn shear_component_and_its_derivative() {
        let e = parse_hamiltonian("p1+sin(2*pi*q2)", 2).unwrap();
        let (v, g) = e.eval_gradient(&[0.0, 0.25], &[0.1, 0.0]).unwrap();
        assert!((v - 1.1).abs() < 1e-15);
        assert!(g[1].abs() < 1e-14);
        let (_, g0) = e.eval_gradient(&[0.0, 0.0], &[0.1, 0.0]).unwrap();
        assert!((g0[1] - 2.0 * PI).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_index_is_dimension_mismatch() {
        assert!(matches!(
            parse_hamiltonian("0.5*p3^2", 2),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn domain_errors_carry_positions() {
        let e = parse_hamiltonian("sqrt(p1-1)", 1).unwrap();
        assert_eq!(
            e.eval(&[0.0], &[0.0]),
            Err(Error::DomainError {
                op: "sqrt",
                position: 0
            })
        );
        let d = parse_hamiltonian("1 + q1/p1", 1).unwrap();
        assert_eq!(
            d.eval(&[0.5], &[0.0]),
            Err(Error::DomainError {
                op: "/",
                position: 6
            })
        );
    }

    #[test]
    fn syntax_and_identifier_errors() {
        assert!(matches!(
            parse_hamiltonian("p1 +", 1),
            Err(Error::SyntaxError { position: 4, .. })
        ));
        assert!(matches!(
            parse_hamiltonian("(p1", 1),
            Err(Error::SyntaxError { .. })
        ));
        assert!(matches!(
            parse_hamiltonian("p1 # 2", 1),
            Err(Error::SyntaxError { position: 3, .. })
        ));
        assert_eq!(
            parse_hamiltonian("2*x1", 1).unwrap_err(),
            Error::UnknownIdentifier {
                name: "x1".into(),
                position: 2
            }
        );
        assert!(matches!(
            parse_hamiltonian("q0", 1),
            Err(Error::UnknownIdentifier { .. })
        ));
        assert!(matches!(
            parse_hamiltonian("   ", 1),
            Err(Error::SyntaxError { .. })
        ));
    }

    #[test]
    fn precedence_and_associativity() {
        let cases = [
            ("-2^2", -4.0),
            ("2^3^2", 512.0),
            ("2^-1", 0.5),
            ("1-2-3", -4.0),
            ("8/4/2", 1.0),
            ("2*3+4*5", 26.0),
            ("1.5e1 + 2E-1", 15.2),
            ("exp(0)+cos(0)", 2.0),
        ];
        for (text, want) in cases {
            let e = parse_hamiltonian(text, 1).unwrap();
            assert!(
                (e.eval(&[0.0], &[0.0]).unwrap() - want).abs() < 1e-12,
                "{text}"
            );
        }
    }

    #[test]
    fn variable_exponent_derivative() {
        let e = parse_hamiltonian("p1^q1", 1).unwrap();
        let (v, g) = e.eval_gradient(&[1.5], &[2.0]).unwrap();
        assert!((v - 2f64.powf(1.5)).abs() < 1e-14);
        assert!((g[0] - v * 2f64.ln()).abs() < 1e-13);
        assert!((g[1] - 1.5 * 2f64.powf(0.5)).abs() < 1e-13);
    }

    #[test]
    fn hessian_is_symmetric_and_exact() {
        let e = parse_hamiltonian("p1*p2*sin(2*pi*q1) + 0.5*p2^2", 2).unwrap();
        let q = [0.1, 0.4];
        let p = [0.7, -0.3];
        let (_, _, h) = e.eval_hessian(&q, &p).unwrap();
        let c = 2.0 * PI * (2.0 * PI * q[0]).cos();
        // ∂²/∂q1∂p1 = p2·c, ∂²/∂q1∂p2 = p1·c, ∂²/∂p2² = 1
        assert!((h[2] - p[1] * c).abs() < 1e-13);
        assert!((h[3] - p[0] * c).abs() < 1e-13);
        assert!((h[3 * 4 + 3] - 1.0).abs() < 1e-15);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(h[i * 4 + j], h[j * 4 + i]);
            }
        }
        assert!(!e.is_separable());
    }
}
