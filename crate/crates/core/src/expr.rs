//! Symbolic loss expressions over the protected operator set.
//!
//! A [`LossExpr`] is stored as a flat prefix-order sequence of [`Symbol`]s.
//! Subtrees are contiguous slices, which keeps uniform node selection and
//! subtree replacement (the GP variation operators) linear and allocation-light.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar, PROTECT_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operator {
    Add,
    Sub,
    Mul,
    /// Analytic quotient `x₁ / √(1 + x₂²)`.
    Aq,
    Square,
    Abs,
    /// `√(|x| + ε)`.
    SqrtP,
    /// `ln(|x| + ε)`.
    LnP,
}

impl Operator {
    pub const ALL: [Operator; 8] = [
        Operator::Add,
        Operator::Sub,
        Operator::Mul,
        Operator::Aq,
        Operator::Square,
        Operator::Abs,
        Operator::SqrtP,
        Operator::LnP,
    ];
    pub const BINARY: [Operator; 4] = [Operator::Add, Operator::Sub, Operator::Mul, Operator::Aq];
    pub const UNARY: [Operator; 4] = [
        Operator::Square,
        Operator::Abs,
        Operator::SqrtP,
        Operator::LnP,
    ];

    pub fn arity(self) -> usize {
        match self {
            Operator::Add | Operator::Sub | Operator::Mul | Operator::Aq => 2,
            Operator::Square | Operator::Abs | Operator::SqrtP | Operator::LnP => 1,
        }
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, Operator::Add | Operator::Mul)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Operator::Add => "add",
            Operator::Sub => "sub",
            Operator::Mul => "mul",
            Operator::Aq => "aq",
            Operator::Square => "sq",
            Operator::Abs => "abs",
            Operator::SqrtP => "sqrt",
            Operator::LnP => "ln",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Operator> {
        Operator::ALL.into_iter().find(|op| op.mnemonic() == s)
    }

    /// Applies the operator; `b` is ignored for unary operators.
    #[inline]
    pub fn apply<T: Scalar>(self, a: T, b: T) -> T {
        let eps = T::of(PROTECT_EPS);
        match self {
            Operator::Add => a + b,
            Operator::Sub => a - b,
            Operator::Mul => a * b,
            Operator::Aq => scalar::analytic_quotient(a, b),
            Operator::Square => a * a,
            Operator::Abs => a.abs(),
            Operator::SqrtP => scalar::protected_sqrt(a, eps),
            Operator::LnP => scalar::protected_ln(a, eps),
        }
    }
}

/// Checked operator evaluation.
pub fn eval_operator<T: Scalar>(op: Operator, args: &[T]) -> Result<T> {
    if args.len() != op.arity() {
        return Err(Error::Contract(format!(
            "{} takes {} argument(s), got {}",
            op.mnemonic(),
            op.arity(),
            args.len()
        )));
    }
    if args.iter().any(|a| !a.is_finite()) {
        return Err(Error::Contract(format!(
            "non-finite argument to {}",
            op.mnemonic()
        )));
    }
    let b = args.get(1).copied().unwrap_or_else(T::zero);
    Ok(op.apply(args[0], b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Terminal {
    /// The base learner output `f_θ(x)`.
    Pred,
    /// The label `y`.
    Target,
    PlusOne,
    MinusOne,
}

impl Terminal {
    pub const ALL: [Terminal; 4] = [
        Terminal::Pred,
        Terminal::Target,
        Terminal::PlusOne,
        Terminal::MinusOne,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Terminal::Pred => "f",
            Terminal::Target => "y",
            Terminal::PlusOne => "1",
            Terminal::MinusOne => "-1",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Terminal> {
        match s {
            "f" => Some(Terminal::Pred),
            "y" => Some(Terminal::Target),
            "1" | "+1" => Some(Terminal::PlusOne),
            "-1" => Some(Terminal::MinusOne),
            _ => None,
        }
    }

    /// Constant value, if this terminal is a constant.
    pub fn constant(self) -> Option<f64> {
        match self {
            Terminal::PlusOne => Some(1.0),
            Terminal::MinusOne => Some(-1.0),
            _ => None,
        }
    }

    #[inline]
    pub fn value<T: Scalar>(self, y: T, f: T) -> T {
        match self {
            Terminal::Pred => f,
            Terminal::Target => y,
            Terminal::PlusOne => T::one(),
            Terminal::MinusOne => -T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Op(Operator),
    Term(Terminal),
}

impl Symbol {
    pub fn arity(self) -> usize {
        match self {
            Symbol::Op(op) => op.arity(),
            Symbol::Term(_) => 0,
        }
    }
}

/// A loss function `M(y, f)` as an ordered expression tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LossExpr {
    nodes: Vec<Symbol>,
}

impl LossExpr {
    /// Builds an expression from prefix-order symbols, checking arities.
    pub fn from_prefix(nodes: Vec<Symbol>) -> Result<Self> {
        if nodes.is_empty() || subtree_end(&nodes, 0) != Some(nodes.len()) {
            return Err(Error::Contract(
                "prefix sequence is not a single complete tree".into(),
            ));
        }
        Ok(LossExpr { nodes })
    }

    pub fn terminal(t: Terminal) -> Self {
        LossExpr {
            nodes: vec![Symbol::Term(t)],
        }
    }

    pub fn unary(op: Operator, child: LossExpr) -> Self {
        assert_eq!(op.arity(), 1, "{} is not unary", op.mnemonic());
        let mut nodes = Vec::with_capacity(child.nodes.len() + 1);
        nodes.push(Symbol::Op(op));
        nodes.extend(child.nodes);
        LossExpr { nodes }
    }

    pub fn binary(op: Operator, left: LossExpr, right: LossExpr) -> Self {
        assert_eq!(op.arity(), 2, "{} is not binary", op.mnemonic());
        let mut nodes = Vec::with_capacity(left.nodes.len() + right.nodes.len() + 1);
        nodes.push(Symbol::Op(op));
        nodes.extend(left.nodes);
        nodes.extend(right.nodes);
        LossExpr { nodes }
    }

    /// `(y − f)²`.
    pub fn squared_error() -> Self {
        LossExpr::unary(
            Operator::Square,
            LossExpr::binary(
                Operator::Sub,
                LossExpr::terminal(Terminal::Target),
                LossExpr::terminal(Terminal::Pred),
            ),
        )
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> Symbol {
        self.nodes[0]
    }

    /// Depth of every node (root = 0), in prefix order.
    pub fn node_depths(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut frames: Vec<(usize, usize)> = Vec::new();
        for sym in &self.nodes {
            let d = match frames.last_mut() {
                None => 0,
                Some((child_depth, remaining)) => {
                    *remaining -= 1;
                    *child_depth
                }
            };
            while matches!(frames.last(), Some(&(_, 0))) {
                frames.pop();
            }
            out.push(d);
            if sym.arity() > 0 {
                frames.push((d + 1, sym.arity()));
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        self.node_depths().into_iter().max().unwrap_or(0)
    }

    /// One past the last index of the subtree rooted at `index`.
    pub fn subtree_end(&self, index: usize) -> usize {
        subtree_end(&self.nodes, index).expect("valid tree")
    }

    /// Start indices of the children of the node at `index`, in order.
    pub fn children(&self, index: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(2);
        let mut next = index + 1;
        for _ in 0..self.nodes[index].arity() {
            out.push(next);
            next = self.subtree_end(next);
        }
        out
    }

    pub fn subtree(&self, index: usize) -> LossExpr {
        LossExpr {
            nodes: self.nodes[index..self.subtree_end(index)].to_vec(),
        }
    }

    /// Copy with the subtree at `index` replaced by `replacement`.
    pub fn replace_subtree(&self, index: usize, replacement: &LossExpr) -> LossExpr {
        let end = self.subtree_end(index);
        let mut nodes =
            Vec::with_capacity(self.nodes.len() - (end - index) + replacement.nodes.len());
        nodes.extend_from_slice(&self.nodes[..index]);
        nodes.extend_from_slice(&replacement.nodes);
        nodes.extend_from_slice(&self.nodes[end..]);
        LossExpr { nodes }
    }

    /// Symbolic evaluation at a single `(y, f)` point.
    pub fn eval<T: Scalar>(&self, y: T, f: T) -> T {
        let mut stack: Vec<T> = Vec::with_capacity(self.nodes.len());
        for sym in self.nodes.iter().rev() {
            match *sym {
                Symbol::Term(t) => stack.push(t.value(y, f)),
                Symbol::Op(op) => {
                    let a = stack.pop().expect("valid tree");
                    let b = if op.arity() == 2 {
                        stack.pop().expect("valid tree")
                    } else {
                        T::zero()
                    };
                    stack.push(op.apply(a, b));
                }
            }
        }
        stack.pop().expect("valid tree")
    }

    /// Whether `f` and `y` occur anywhere in the tree.
    pub fn contains_required_arguments(&self) -> (bool, bool) {
        let has = |t| self.nodes.contains(&Symbol::Term(t));
        (has(Terminal::Pred), has(Terminal::Target))
    }

    pub fn has_required_arguments(&self) -> bool {
        self.contains_required_arguments() == (true, true)
    }

    /// Indices of all terminal nodes.
    pub fn terminal_indices(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i], Symbol::Term(_)))
            .collect()
    }

    /// Normalised key: commutative operands sorted, constant-only subtrees
    /// folded to their value. Equal keys imply equal symbolic evaluation.
    pub fn canonical_key(&self) -> String {
        canonical(&self.nodes, 0).0
    }

    /// Prefix s-expression, e.g. `(sq (sub y f))`.
    pub fn to_sexp(&self) -> String {
        let mut out = String::new();
        write_sexp(&self.nodes, 0, &mut out);
        out
    }

    pub fn parse(text: &str) -> Result<LossExpr, ParseError> {
        Parser::new(text).parse()
    }
}

impl fmt::Display for LossExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_sexp())
    }
}

impl std::str::FromStr for LossExpr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossExpr::parse(s)
    }
}

fn subtree_end(nodes: &[Symbol], index: usize) -> Option<usize> {
    let mut need = 1usize;
    for (j, sym) in nodes.iter().enumerate().skip(index) {
        need = need - 1 + sym.arity();
        if need == 0 {
            return Some(j + 1);
        }
    }
    None
}

enum Canon {
    Const(f64),
    Expr,
}

fn canonical(nodes: &[Symbol], index: usize) -> (String, Canon, usize) {
    match nodes[index] {
        Symbol::Term(t) => {
            let (key, c) = match t.constant() {
                Some(v) => (const_key(v), Canon::Const(v)),
                None => (t.mnemonic().to_string(), Canon::Expr),
            };
            (key, c, index + 1)
        }
        Symbol::Op(op) => {
            let mut next = index + 1;
            let mut keys = Vec::with_capacity(2);
            let mut consts = Vec::with_capacity(2);
            for _ in 0..op.arity() {
                let (k, c, end) = canonical(nodes, next);
                next = end;
                keys.push(k);
                consts.push(match c {
                    Canon::Const(v) => Some(v),
                    Canon::Expr => None,
                });
            }
            if consts.iter().all(Option::is_some) {
                let a = consts[0].unwrap();
                let b = consts.get(1).copied().flatten().unwrap_or(0.0);
                let v = op.apply(a, b);
                return (const_key(v), Canon::Const(v), next);
            }
            if op.is_commutative() {
                keys.sort();
            }
            (
                format!("({} {})", op.mnemonic(), keys.join(" ")),
                Canon::Expr,
                next,
            )
        }
    }
}

fn const_key(v: f64) -> String {
    // Normalise -0.0 so that folding 1 + -1 and -1 + 1 agree.
    let v = if v == 0.0 { 0.0 } else { v };
    format!("#{v:?}")
}

fn write_sexp(nodes: &[Symbol], index: usize, out: &mut String) -> usize {
    match nodes[index] {
        Symbol::Term(t) => {
            out.push_str(t.mnemonic());
            index + 1
        }
        Symbol::Op(op) => {
            out.push('(');
            out.push_str(op.mnemonic());
            let mut next = index + 1;
            for _ in 0..op.arity() {
                out.push(' ');
                next = write_sexp(nodes, next, out);
            }
            out.push(')');
            next
        }
    }
}

// ---- parsing ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unknown symbol `{token}` at offset {position}")]
    UnknownSymbol { token: String, position: usize },
    #[error("`{operator}` expects {expected} argument(s) but got {found} at offset {position}")]
    ArityMismatch {
        operator: String,
        expected: usize,
        found: usize,
        position: usize,
    },
    #[error("unexpected `{token}` at offset {position}")]
    UnexpectedToken { token: String, position: usize },
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("trailing input at offset {position}")]
    TrailingInput { position: usize },
}

struct Parser<'a> {
    tokens: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let mut tokens = Vec::new();
        let mut start = None;
        for (i, ch) in text.char_indices() {
            match ch {
                '(' | ')' => {
                    if let Some(s) = start.take() {
                        tokens.push((s, &text[s..i]));
                    }
                    tokens.push((i, &text[i..i + 1]));
                }
                c if c.is_whitespace() => {
                    if let Some(s) = start.take() {
                        tokens.push((s, &text[s..i]));
                    }
                }
                _ => {
                    if start.is_none() {
                        start = Some(i);
                    }
                }
            }
        }
        if let Some(s) = start {
            tokens.push((s, &text[s..]));
        }
        Parser { tokens, pos: 0 }
    }

    fn parse(mut self) -> Result<LossExpr, ParseError> {
        let mut nodes = Vec::new();
        self.expr(&mut nodes)?;
        if let Some(&(position, _)) = self.tokens.get(self.pos) {
            return Err(ParseError::TrailingInput { position });
        }
        Ok(LossExpr { nodes })
    }

    fn next(&mut self) -> Result<(usize, &'a str), ParseError> {
        let tok = self
            .tokens
            .get(self.pos)
            .copied()
            .ok_or(ParseError::UnexpectedEnd)?;
        self.pos += 1;
        Ok(tok)
    }

    fn expr(&mut self, out: &mut Vec<Symbol>) -> Result<(), ParseError> {
        let (position, tok) = self.next()?;
        match tok {
            "(" => {
                let (op_pos, name) = self.next()?;
                let op = Operator::from_mnemonic(name).ok_or_else(|| {
                    if name == "(" || name == ")" {
                        ParseError::UnexpectedToken {
                            token: name.to_string(),
                            position: op_pos,
                        }
                    } else {
                        ParseError::UnknownSymbol {
                            token: name.to_string(),
                            position: op_pos,
                        }
                    }
                })?;
                out.push(Symbol::Op(op));
                let mut found = 0;
                loop {
                    match self.tokens.get(self.pos) {
                        None => return Err(ParseError::UnexpectedEnd),
                        Some(&(_, ")")) => {
                            self.pos += 1;
                            break;
                        }
                        Some(_) => {
                            if found == op.arity() {
                                // consume the surplus argument only to report it
                                found += 1;
                                let mut scratch = Vec::new();
                                self.expr(&mut scratch)?;
                                continue;
                            }
                            self.expr(out)?;
                            found += 1;
                        }
                    }
                }
                if found != op.arity() {
                    return Err(ParseError::ArityMismatch {
                        operator: op.mnemonic().to_string(),
                        expected: op.arity(),
                        found,
                        position,
                    });
                }
                Ok(())
            }
            ")" => Err(ParseError::UnexpectedToken {
                token: tok.to_string(),
                position,
            }),
            atom => match Terminal::from_mnemonic(atom) {
                Some(t) => {
                    out.push(Symbol::Term(t));
                    Ok(())
                }
                None => Err(ParseError::UnknownSymbol {
                    token: atom.to_string(),
                    position,
                }),
            },
        }
    }
}

// ---- random generation -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenMethod {
    Grow,
    Full,
}

/// Random tree with inner nodes from the function set and leaves from the
/// terminal set. `Full` puts every leaf at `depth_limit`; `Grow` stops early
/// with probability proportional to the terminal-set size.
pub fn generate_tree<R: Rng + ?Sized>(
    rng: &mut R,
    method: GenMethod,
    depth_limit: usize,
) -> LossExpr {
    let mut nodes = Vec::new();
    grow_into(rng, method, 0, depth_limit, &mut nodes);
    LossExpr { nodes }
}

fn grow_into<R: Rng + ?Sized>(
    rng: &mut R,
    method: GenMethod,
    depth: usize,
    limit: usize,
    out: &mut Vec<Symbol>,
) {
    let n_terms = Terminal::ALL.len();
    let n_ops = Operator::ALL.len();
    let pick_terminal = depth >= limit
        || (method == GenMethod::Grow && rng.random_range(0..n_terms + n_ops) < n_terms);
    if pick_terminal {
        out.push(Symbol::Term(Terminal::ALL[rng.random_range(0..n_terms)]));
        return;
    }
    let op = Operator::ALL[rng.random_range(0..n_ops)];
    out.push(Symbol::Op(op));
    for _ in 0..op.arity() {
        grow_into(rng, method, depth + 1, limit, out);
    }
}

/// Ramped half-and-half: depths cycle through `min_depth..=max_depth`, and each
/// depth ramp alternates between `Full` and `Grow`.
pub fn ramped_half_and_half<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    min_depth: usize,
    max_depth: usize,
) -> Vec<LossExpr> {
    assert!(min_depth >= 1 && min_depth <= max_depth);
    let span = max_depth - min_depth + 1;
    (0..count)
        .map(|i| {
            let depth = min_depth + i % span;
            let method = if (i / span).is_multiple_of(2) {
                GenMethod::Full
            } else {
                GenMethod::Grow
            };
            generate_tree(rng, method, depth)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn y() -> LossExpr {
        LossExpr::terminal(Terminal::Target)
    }
    fn f() -> LossExpr {
        LossExpr::terminal(Terminal::Pred)
    }
    fn one() -> LossExpr {
        LossExpr::terminal(Terminal::PlusOne)
    }
    fn minus_one() -> LossExpr {
        LossExpr::terminal(Terminal::MinusOne)
    }

    #[test]
    fn operator_examples() {
        assert_eq!(eval_operator(Operator::Aq, &[1.0_f64, 0.0]).unwrap(), 1.0);
        assert_eq!(eval_operator(Operator::Square, &[-3.0_f64]).unwrap(), 9.0);
        // ln(1e-7) = -7 ln 10
        let want = -7.0 * std::f64::consts::LN_10;
        assert!((eval_operator(Operator::LnP, &[0.0_f64]).unwrap() - want).abs() < 1e-12);
        assert!((want - (-16.118_095_650_958_32)).abs() < 1e-12);
    }

    #[test]
    fn operator_arity_and_finiteness_are_checked() {
        assert!(eval_operator(Operator::Add, &[1.0_f64]).is_err());
        assert!(eval_operator(Operator::Abs, &[f64::NAN]).is_err());
        for op in Operator::BINARY {
            assert_eq!(op.arity(), 2);
        }
        for op in Operator::UNARY {
            assert_eq!(op.arity(), 1);
        }
    }

    #[test]
    fn sexp_examples() {
        let e = LossExpr::squared_error();
        assert_eq!(e.to_sexp(), "(sq (sub y f))");
        assert_eq!(LossExpr::parse("(sq (sub y f))").unwrap(), e);
        let aq = LossExpr::parse("(aq y f)").unwrap();
        assert_eq!(aq, LossExpr::binary(Operator::Aq, y(), f()));
        assert_eq!(aq.children(0), vec![1, 2]);
    }

    #[test]
    fn parse_errors_carry_position() {
        assert!(matches!(
            LossExpr::parse("(add y)"),
            Err(ParseError::ArityMismatch {
                expected: 2,
                found: 1,
                position: 0,
                ..
            })
        ));
        assert!(matches!(
            LossExpr::parse("(sq y f)"),
            Err(ParseError::ArityMismatch {
                expected: 1,
                found: 2,
                ..
            })
        ));
        match LossExpr::parse("(add y (pow f 1))") {
            Err(ParseError::UnknownSymbol { token, position }) => {
                assert_eq!(token, "pow");
                assert_eq!(position, 8);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            LossExpr::parse("(add y f"),
            Err(ParseError::UnexpectedEnd)
        ));
        assert!(matches!(
            LossExpr::parse("y f"),
            Err(ParseError::TrailingInput { position: 2 })
        ));
        assert!(matches!(
            LossExpr::parse("z"),
            Err(ParseError::UnknownSymbol { .. })
        ));
    }

    #[test]
    fn canonical_key_examples() {
        let a = LossExpr::binary(Operator::Add, y(), f());
        let b = LossExpr::binary(Operator::Add, f(), y());
        assert_eq!(a.canonical_key(), b.canonical_key());
        let c = LossExpr::binary(Operator::Sub, y(), f());
        let d = LossExpr::binary(Operator::Sub, f(), y());
        assert_ne!(c.canonical_key(), d.canonical_key());
        // constant folding: (mul 1 -1) and -1 agree
        let folded = LossExpr::binary(Operator::Mul, one(), minus_one());
        assert_eq!(folded.canonical_key(), minus_one().canonical_key());
        let sum_zero = LossExpr::binary(Operator::Add, one(), minus_one());
        let sum_zero2 = LossExpr::binary(Operator::Add, minus_one(), one());
        assert_eq!(sum_zero.canonical_key(), "#0.0");
        assert_eq!(sum_zero.canonical_key(), sum_zero2.canonical_key());
    }

    #[test]
    fn required_arguments_examples() {
        assert_eq!(
            LossExpr::binary(Operator::Sub, y(), f()).contains_required_arguments(),
            (true, true)
        );
        assert_eq!(
            LossExpr::unary(Operator::LnP, y()).contains_required_arguments(),
            (false, true)
        );
        assert_eq!(
            LossExpr::binary(Operator::Mul, one(), minus_one()).contains_required_arguments(),
            (false, false)
        );
    }

    #[test]
    fn full_and_grow_respect_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let t = generate_tree(&mut rng, GenMethod::Full, 2);
            let depths = t.node_depths();
            for (i, sym) in t.symbols().iter().enumerate() {
                if let Symbol::Term(_) = sym {
                    assert_eq!(depths[i], 2);
                }
            }
            assert!(generate_tree(&mut rng, GenMethod::Grow, 3).depth() <= 3);
        }
    }

    #[test]
    fn generated_population_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..1000 {
            let limit = 2 + i % 5;
            let method = if i % 2 == 0 {
                GenMethod::Full
            } else {
                GenMethod::Grow
            };
            let t = generate_tree(&mut rng, method, limit);
            assert!(LossExpr::from_prefix(t.symbols().to_vec()).is_ok());
            assert!(t.depth() <= limit);
            if method == GenMethod::Full {
                assert_eq!(t.depth(), limit);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = ramped_half_and_half(&mut ChaCha8Rng::seed_from_u64(9), 25, 2, 6);
        let b = ramped_half_and_half(&mut ChaCha8Rng::seed_from_u64(9), 25, 2, 6);
        assert_eq!(a, b);
    }

    #[test]
    fn subtree_surgery() {
        let e = LossExpr::parse("(add (sq y) (sub f 1))").unwrap();
        assert_eq!(e.node_count(), 6);
        assert_eq!(e.depth(), 2);
        assert_eq!(e.children(0), vec![1, 3]);
        assert_eq!(e.subtree(3).to_sexp(), "(sub f 1)");
        let r = e.replace_subtree(1, &f());
        assert_eq!(r.to_sexp(), "(add f (sub f 1))");
        assert_eq!(e.replace_subtree(0, &y()), y());
    }

    fn arb_expr() -> impl Strategy<Value = LossExpr> {
        (any::<u64>(), 1usize..=6, any::<bool>()).prop_map(|(seed, depth, full)| {
            let method = if full {
                GenMethod::Full
            } else {
                GenMethod::Grow
            };
            generate_tree(&mut ChaCha8Rng::seed_from_u64(seed), method, depth)
        })
    }

    proptest! {
        #[test]
        fn sexp_round_trip(e in arb_expr()) {
            let back = LossExpr::parse(&e.to_sexp()).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(back.canonical_key(), e.canonical_key());
        }

        #[test]
        fn closure_on_bounded_inputs(seed in any::<u64>(), y in -1e6f64..1e6, f in -1e6f64..1e6) {
            // Magnitudes grow at most by squaring per level, so depth 5 stays
            // far below the f64 overflow threshold on this input box.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = generate_tree(&mut rng, GenMethod::Grow, 5);
            prop_assert!(e.eval(y, f).is_finite());
        }

        #[test]
        fn canonical_soundness(a in arb_expr(), b in arb_expr(), y in -10f64..10.0, f in -10f64..10.0) {
            // Swapping commutative operands must not change the key or the value.
            let swapped = swap_commutative(&a);
            prop_assert_eq!(swapped.canonical_key(), a.canonical_key());
            let (va, vs) = (a.eval(y, f), swapped.eval(y, f));
            prop_assert!(va == vs || (va - vs).abs() <= 1e-9 * va.abs().max(1.0));
            if a.canonical_key() == b.canonical_key() {
                let (va, vb) = (a.eval(y, f), b.eval(y, f));
                prop_assert!(va == vb || (va - vb).abs() <= 1e-9 * va.abs().max(1.0));
            }
        }
    }

    fn swap_commutative(e: &LossExpr) -> LossExpr {
        fn go(e: &LossExpr, i: usize) -> LossExpr {
            match e.symbols()[i] {
                Symbol::Term(t) => LossExpr::terminal(t),
                Symbol::Op(op) => {
                    let kids: Vec<LossExpr> = e.children(i).into_iter().map(|c| go(e, c)).collect();
                    match (op.arity(), op.is_commutative()) {
                        (1, _) => LossExpr::unary(op, kids[0].clone()),
                        (_, true) => LossExpr::binary(op, kids[1].clone(), kids[0].clone()),
                        _ => LossExpr::binary(op, kids[0].clone(), kids[1].clone()),
                    }
                }
            }
        }
        go(e, 0)
    }
}
