//! Parser for the kernel expression language.
//!
//! Two surface syntaxes are accepted and may be mixed:
//! call style `scale(rbf(ard))` and s-expressions `(scale (rbf ard))`.
//! Integer options are written `name=value` in either style.

use std::fmt;

use thiserror::Error;

use super::{FormKind, KernelExpr, Node, WarpKind, DEFAULT_NODE_BUDGET, MAX_ARCTAN_DEPTH, MAX_POLY_DEGREE, MAX_WARP_CHAIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax,
    UnknownPrimitive,
    Arity,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub message: String,
    /// Byte offset into the source.
    pub offset: usize,
    /// 1-based.
    pub line: usize,
    /// 1-based, counted in characters.
    pub column: usize,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} at line {}, column {} (offset {}): {}",
            match self.kind {
                ParseErrorKind::Syntax => "syntax error",
                ParseErrorKind::UnknownPrimitive => "unknown primitive",
                ParseErrorKind::Arity => "arity error",
                ParseErrorKind::Budget => "budget exceeded",
            },
            self.line,
            self.column,
            self.offset,
            self.message
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    LParen,
    RParen,
    Comma,
    Eq,
    Eof,
}

struct Lexer<'a> {
    src: &'a str,
    toks: Vec<(Tok, usize)>,
}

impl<'a> Lexer<'a> {
    fn run(src: &'a str) -> Result<Vec<(Tok, usize)>, ParseError> {
        let mut lx = Lexer { src, toks: Vec::new() };
        let bytes = src.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i];
            match c {
                b' ' | b'\t' | b'\n' | b'\r' => i += 1,
                b'#' => {
                    while i < bytes.len() && bytes[i] != b'\n' {
                        i += 1;
                    }
                }
                b'(' => {
                    lx.toks.push((Tok::LParen, i));
                    i += 1;
                }
                b')' => {
                    lx.toks.push((Tok::RParen, i));
                    i += 1;
                }
                b',' => {
                    lx.toks.push((Tok::Comma, i));
                    i += 1;
                }
                b'=' => {
                    lx.toks.push((Tok::Eq, i));
                    i += 1;
                }
                b'0'..=b'9' | b'-' => {
                    let start = i;
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                    let text = &src[start..i];
                    let v = text
                        .parse::<i64>()
                        .map_err(|_| error_at(src, start, ParseErrorKind::Syntax, format!("bad integer '{text}'")))?;
                    lx.toks.push((Tok::Int(v), start));
                }
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    let start = i;
                    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                        i += 1;
                    }
                    lx.toks.push((Tok::Ident(src[start..i].to_string()), start));
                }
                _ => {
                    let ch = src[i..].chars().next().unwrap_or('?');
                    return Err(error_at(src, i, ParseErrorKind::Syntax, format!("unexpected character '{ch}'")));
                }
            }
        }
        lx.toks.push((Tok::Eof, lx.src.len()));
        Ok(lx.toks)
    }
}

fn error_at(src: &str, offset: usize, kind: ParseErrorKind, message: String) -> ParseError {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    ParseError {
        kind,
        message,
        offset,
        line,
        column,
    }
}

/// Untyped application tree.
#[derive(Debug)]
struct Term {
    name: String,
    offset: usize,
    args: Vec<Term>,
    options: Vec<(String, i64, usize)>,
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        error_at(self.src, self.offset(), ParseErrorKind::Syntax, message.into())
    }

    fn describe(t: &Tok) -> String {
        match t {
            Tok::Ident(s) => format!("'{s}'"),
            Tok::Int(v) => format!("'{v}'"),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::Eq => "'='".into(),
            Tok::Eof => "end of input".into(),
        }
    }

    fn expect_ident(&mut self) -> Result<(String, usize), ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let (_, off) = self.bump();
                Ok((s, off))
            }
            other => Err(self.err(format!("expected a primitive name, found {}", Self::describe(&other)))),
        }
    }

    fn term(&mut self) -> Result<Term, ParseError> {
        if *self.peek() == Tok::LParen {
            self.bump();
            let (name, offset) = self.expect_ident()?;
            let mut t = Term {
                name,
                offset,
                args: Vec::new(),
                options: Vec::new(),
            };
            loop {
                match self.peek() {
                    Tok::RParen => {
                        self.bump();
                        return Ok(t);
                    }
                    Tok::Comma => {
                        self.bump();
                    }
                    _ => self.item(&mut t)?,
                }
            }
        }
        let (name, offset) = self.expect_ident()?;
        let mut t = Term {
            name,
            offset,
            args: Vec::new(),
            options: Vec::new(),
        };
        if *self.peek() == Tok::LParen {
            self.bump();
            if *self.peek() == Tok::RParen {
                self.bump();
                return Ok(t);
            }
            loop {
                self.item(&mut t)?;
                match self.peek() {
                    Tok::Comma => {
                        self.bump();
                    }
                    Tok::RParen => {
                        self.bump();
                        break;
                    }
                    other => {
                        let d = Self::describe(other);
                        return Err(self.err(format!("expected ',' or ')', found {d}")));
                    }
                }
            }
        }
        Ok(t)
    }

    /// Either a nested term or a `name=int` option.
    fn item(&mut self, parent: &mut Term) -> Result<(), ParseError> {
        if let Tok::Ident(name) = self.peek().clone() {
            if self.toks.get(self.pos + 1).map(|t| &t.0) == Some(&Tok::Eq) {
                let (_, off) = self.bump();
                self.bump();
                return match self.peek().clone() {
                    Tok::Int(v) => {
                        self.bump();
                        parent.options.push((name, v, off));
                        Ok(())
                    }
                    other => Err(self.err(format!("expected an integer, found {}", Self::describe(&other)))),
                };
            }
        }
        if *self.peek() == Tok::Eof {
            return Err(self.err("unexpected end of input"));
        }
        parent.args.push(self.term()?);
        Ok(())
    }
}

enum Prim {
    Input,
    Warp(WarpKind),
    Form(FormKind),
    Sum,
    Product,
    Scale,
}

fn lookup(name: &str) -> Option<Prim> {
    Some(match name {
        "x" => Prim::Input,
        "ard" => Prim::Warp(WarpKind::Ard),
        "center_scale" => Prim::Warp(WarpKind::CenterScale),
        "tanh" => Prim::Warp(WarpKind::Tanh),
        "arctan_layers" => Prim::Warp(WarpKind::ArctanLayers { depth: 2 }),
        "kumaraswamy_radial" => Prim::Warp(WarpKind::KumaraswamyRadial),
        "stereographic" => Prim::Warp(WarpKind::Stereographic),
        "unit_direction" => Prim::Warp(WarpKind::UnitDirection),
        "rbf" => Prim::Form(FormKind::Rbf),
        "matern52" => Prim::Form(FormKind::Matern52),
        "matern32" => Prim::Form(FormKind::Matern32),
        "rq" => Prim::Form(FormKind::Rq),
        "imq" => Prim::Form(FormKind::Imq),
        "linear" => Prim::Form(FormKind::Linear),
        "poly" => Prim::Form(FormKind::Poly { degree: 2 }),
        "cos_1d" => Prim::Form(FormKind::Cos1d),
        "periodic" => Prim::Form(FormKind::Periodic),
        "constant" => Prim::Form(FormKind::Constant),
        "sum" => Prim::Sum,
        "product" => Prim::Product,
        "scale" => Prim::Scale,
        _ => return None,
    })
}

struct Builder<'a> {
    src: &'a str,
}

impl<'a> Builder<'a> {
    fn arity(&self, t: &Term, message: String) -> ParseError {
        error_at(self.src, t.offset, ParseErrorKind::Arity, message)
    }

    fn option(&self, t: &Term, allowed: &str, default: i64, range: (i64, i64)) -> Result<i64, ParseError> {
        let mut value = default;
        for (name, v, off) in &t.options {
            if name != allowed {
                return Err(error_at(
                    self.src,
                    *off,
                    ParseErrorKind::Arity,
                    format!("'{}' takes no option '{name}'", t.name),
                ));
            }
            if *v < range.0 || *v > range.1 {
                return Err(error_at(
                    self.src,
                    *off,
                    ParseErrorKind::Arity,
                    format!("{name}={v} outside [{}, {}]", range.0, range.1),
                ));
            }
            value = *v;
        }
        Ok(value)
    }

    fn no_options(&self, t: &Term) -> Result<(), ParseError> {
        if let Some((name, _, off)) = t.options.first() {
            return Err(error_at(
                self.src,
                *off,
                ParseErrorKind::Arity,
                format!("'{}' takes no option '{name}'", t.name),
            ));
        }
        Ok(())
    }

    fn feature(&self, t: &Term) -> Result<Node, ParseError> {
        match lookup(&t.name) {
            Some(Prim::Input) => {
                if !t.args.is_empty() {
                    return Err(self.arity(t, "'x' takes no arguments".into()));
                }
                self.no_options(t)?;
                Ok(Node::Input)
            }
            Some(Prim::Warp(kind)) => {
                let kind = match kind {
                    WarpKind::ArctanLayers { .. } => WarpKind::ArctanLayers {
                        depth: self.option(t, "depth", 2, (1, MAX_ARCTAN_DEPTH as i64))? as u8,
                    },
                    k => {
                        self.no_options(t)?;
                        k
                    }
                };
                let child = match t.args.as_slice() {
                    [] => Node::Input,
                    [a] => self.feature(a)?,
                    _ => return Err(self.arity(t, format!("'{}' takes at most one input", t.name))),
                };
                Ok(Node::warp(kind, child))
            }
            Some(_) => Err(self.arity(
                t,
                format!("'{}' is a kernel, but a feature map (warp or x) is expected here", t.name),
            )),
            None => Err(error_at(
                self.src,
                t.offset,
                ParseErrorKind::UnknownPrimitive,
                format!("'{}'", t.name),
            )),
        }
    }

    fn kernel(&self, t: &Term) -> Result<Node, ParseError> {
        match lookup(&t.name) {
            Some(Prim::Form(FormKind::Constant)) => {
                self.no_options(t)?;
                if !t.args.is_empty() {
                    return Err(self.arity(t, "'constant' takes no arguments".into()));
                }
                Ok(Node::constant())
            }
            Some(Prim::Form(kind)) => {
                let kind = match kind {
                    FormKind::Poly { .. } => FormKind::Poly {
                        degree: self.option(t, "degree", 2, (1, MAX_POLY_DEGREE as i64))? as u8,
                    },
                    k => {
                        self.no_options(t)?;
                        k
                    }
                };
                let child = match t.args.as_slice() {
                    [] => Node::Input,
                    [a] => self.feature(a)?,
                    _ => return Err(self.arity(t, format!("'{}' takes exactly one feature input", t.name))),
                };
                Ok(Node::form(kind, child))
            }
            Some(Prim::Sum) | Some(Prim::Product) => {
                self.no_options(t)?;
                if t.args.len() < 2 {
                    return Err(self.arity(t, format!("'{}' needs at least two kernels", t.name)));
                }
                let cs = t.args.iter().map(|a| self.kernel(a)).collect::<Result<Vec<_>, _>>()?;
                Ok(if t.name == "sum" { Node::Sum(cs) } else { Node::Product(cs) })
            }
            Some(Prim::Scale) => {
                self.no_options(t)?;
                match t.args.as_slice() {
                    [a] => Ok(Node::scale(self.kernel(a)?)),
                    _ => Err(self.arity(t, "'scale' takes exactly one kernel".into())),
                }
            }
            Some(Prim::Input) | Some(Prim::Warp(_)) => Err(self.arity(
                t,
                format!("'{}' is a feature map, but a kernel is expected here", t.name),
            )),
            None => Err(error_at(
                self.src,
                t.offset,
                ParseErrorKind::UnknownPrimitive,
                format!("'{}'", t.name),
            )),
        }
    }
}

/// Parses DSL text into a kernel expression, enforcing the default node budget.
pub fn parse(text: &str) -> Result<KernelExpr, ParseError> {
    parse_with_budget(text, DEFAULT_NODE_BUDGET)
}

pub fn parse_with_budget(text: &str, budget: usize) -> Result<KernelExpr, ParseError> {
    let toks = Lexer::run(text)?;
    let mut p = Parser { src: text, toks, pos: 0 };
    if *p.peek() == Tok::Eof {
        return Err(p.err("empty expression"));
    }
    let term = p.term()?;
    if *p.peek() != Tok::Eof {
        let d = Parser::describe(p.peek());
        return Err(p.err(format!("trailing input starting at {d}")));
    }
    let root = Builder { src: text }.kernel(&term)?;
    check_structure(&root, budget).map_err(|mut e| {
        e.line = 1;
        e.column = 1;
        e
    })?;
    Ok(KernelExpr::new_unchecked(root))
}

/// Budget and nesting checks on an already typed tree.
pub(crate) fn check_structure(root: &Node, budget: usize) -> Result<(), ParseError> {
    let structural = |message: String, kind| ParseError {
        kind,
        message,
        offset: 0,
        line: 1,
        column: 1,
    };
    if !root.is_kernel() {
        return Err(structural("root must be a kernel".into(), ParseErrorKind::Arity));
    }
    let count = root.node_count();
    if count > budget {
        return Err(structural(
            format!("{count} nodes exceeds the budget of {budget}"),
            ParseErrorKind::Budget,
        ));
    }
    let chain = root.max_warp_chain();
    if chain > MAX_WARP_CHAIN {
        return Err(structural(
            format!("warp chain of length {chain} exceeds {MAX_WARP_CHAIN}"),
            ParseErrorKind::Budget,
        ));
    }
    fn typed(n: &Node) -> Result<(), String> {
        match n {
            Node::Input => Ok(()),
            Node::Warp { child, .. } => {
                if child.is_kernel() {
                    Err("warp applied to a kernel".into())
                } else {
                    typed(child)
                }
            }
            Node::Form { kind, child } => match (kind, child) {
                (FormKind::Constant, None) => Ok(()),
                (FormKind::Constant, Some(_)) => Err("constant takes no input".into()),
                (_, None) => Err(format!("{} needs an input", kind.name())),
                (_, Some(c)) if c.is_kernel() => Err(format!("{} applied to a kernel", kind.name())),
                (_, Some(c)) => typed(c),
            },
            Node::Sum(cs) | Node::Product(cs) => {
                if cs.len() < 2 {
                    return Err("sum/product need at least two kernels".into());
                }
                for c in cs {
                    if !c.is_kernel() {
                        return Err("sum/product children must be kernels".into());
                    }
                    typed(c)?;
                }
                Ok(())
            }
            Node::Scale(c) => {
                if c.is_kernel() {
                    typed(c)
                } else {
                    Err("scale child must be a kernel".into())
                }
            }
        }
    }
    typed(root).map_err(|m| structural(m, ParseErrorKind::Arity))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_program() {
        let e = parse("scale(rbf(ard))").unwrap();
        assert_eq!(e.node_count(), 3);
        assert_eq!(
            e.root(),
            &Node::scale(Node::form(FormKind::Rbf, Node::warp(WarpKind::Ard, Node::Input)))
        );
    }

    #[test]
    fn nested_fixture_matches_hand_built_tree() {
        let e = parse("sum(rq(ard), product(matern52(ard), linear(tanh(ard))))").unwrap();
        let ard = || Node::warp(WarpKind::Ard, Node::Input);
        let expected = Node::Sum(vec![
            Node::form(FormKind::Rq, ard()),
            Node::Product(vec![
                Node::form(FormKind::Matern52, ard()),
                Node::form(FormKind::Linear, Node::warp(WarpKind::Tanh, ard())),
            ]),
        ]);
        assert_eq!(e.root(), &expected);
        // sum, rq, ard, product, matern52, ard, linear, tanh, ard
        assert_eq!(e.node_count(), 9);
    }

    #[test]
    fn truncated_input_reports_offset() {
        let err = parse("rbf(").unwrap_err();
        assert_eq!(err.offset, 4);
        assert_eq!(err.kind, ParseErrorKind::Syntax);
        assert_eq!((err.line, err.column), (1, 5));
    }

    #[test]
    fn line_and_column_on_second_line() {
        let err = parse("sum(rbf(ard),\n    blorp(ard))").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownPrimitive);
        assert_eq!((err.line, err.column), (2, 5));
    }

    #[test]
    fn arity_violations() {
        assert_eq!(parse("sum(rbf(ard))").unwrap_err().kind, ParseErrorKind::Arity);
        assert_eq!(parse("rbf(rbf(ard))").unwrap_err().kind, ParseErrorKind::Arity);
        assert_eq!(parse("ard").unwrap_err().kind, ParseErrorKind::Arity);
        assert_eq!(parse("poly(ard, degree=7)").unwrap_err().kind, ParseErrorKind::Arity);
        assert_eq!(parse("rbf(ard, degree=2)").unwrap_err().kind, ParseErrorKind::Arity);
    }

    #[test]
    fn budget_enforced() {
        let deep = "rbf(ard(tanh(ard(tanh(ard)))))";
        assert_eq!(parse(deep).unwrap_err().kind, ParseErrorKind::Budget);
        let many = format!("sum({})", vec!["rbf(ard)"; 13].join(", "));
        assert_eq!(parse(&many).unwrap_err().kind, ParseErrorKind::Budget);
    }

    #[test]
    fn sexpr_and_call_styles_agree() {
        let a = parse("(scale (poly (tanh ard) degree=2))").unwrap();
        let b = parse("scale(poly(tanh(ard), degree=2))").unwrap();
        assert_eq!(a, b);
        let c = parse("arctan_layers_kernel").unwrap_err();
        assert_eq!(c.kind, ParseErrorKind::UnknownPrimitive);
    }

    #[test]
    fn options_round_trip() {
        for src in [
            "rbf(arctan_layers(ard, depth=3))",
            "rbf(arctan_layers(x, depth=1))",
            "poly(tanh(ard), degree=3)",
            "periodic(x)",
            "sum(constant, linear(x))",
        ] {
            let e = parse(src).unwrap();
            assert_eq!(parse(&e.render()).unwrap(), e, "{src}");
        }
    }

    #[test]
    fn comments_and_whitespace() {
        let e = parse("# leading comment\nscale(  rbf( ard ) ) # trailing").unwrap();
        assert_eq!(e.render(), "scale(rbf(ard))");
    }
}
