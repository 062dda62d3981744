//! Kernel expression language.
//!
//! A kernel is a tree of combinators (`sum`, `product`, `scale`) over
//! covariance forms, and each form reads a feature map built from a chain
//! of input warps ending at the raw input `x`.
//!
//! ```text
//! scale(product(matern52(ard), sum(poly(tanh(ard), degree=2), rq(ard))))
//! ```

mod eval;
mod params;
mod parse;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

pub use eval::{eval_gram, eval_gram_batched, EvalError, GramMatrix, GramTape, Kernel};
pub use params::{hyperparams, HyperparamSpec, ParamShape, Transform};
pub use parse::{parse, ParseError};

/// Default cap on the number of nodes in one expression.
pub const DEFAULT_NODE_BUDGET: usize = 24;
/// Maximum number of stacked warps.
pub const MAX_WARP_CHAIN: usize = 4;
pub const MAX_POLY_DEGREE: u8 = 3;
pub const MAX_ARCTAN_DEPTH: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WarpKind {
    Ard,
    CenterScale,
    Tanh,
    ArctanLayers { depth: u8 },
    KumaraswamyRadial,
    Stereographic,
    UnitDirection,
}

impl WarpKind {
    pub fn name(&self) -> &'static str {
        match self {
            WarpKind::Ard => "ard",
            WarpKind::CenterScale => "center_scale",
            WarpKind::Tanh => "tanh",
            WarpKind::ArctanLayers { .. } => "arctan_layers",
            WarpKind::KumaraswamyRadial => "kumaraswamy_radial",
            WarpKind::Stereographic => "stereographic",
            WarpKind::UnitDirection => "unit_direction",
        }
    }

    /// Output feature dimension for an input of dimension `m`.
    pub fn out_dim(&self, m: usize) -> usize {
        match self {
            WarpKind::KumaraswamyRadial => 1,
            WarpKind::Stereographic => m + 1,
            _ => m,
        }
    }
}

/// How a covariance form consumes its feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormDomain {
    Distance,
    InnerProduct,
    ScalarFeature,
    /// Per-coordinate differences (periodic).
    Difference,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FormKind {
    Rbf,
    Matern52,
    Matern32,
    Rq,
    Imq,
    Linear,
    Poly { degree: u8 },
    Cos1d,
    Periodic,
    Constant,
}

impl FormKind {
    pub fn name(&self) -> &'static str {
        match self {
            FormKind::Rbf => "rbf",
            FormKind::Matern52 => "matern52",
            FormKind::Matern32 => "matern32",
            FormKind::Rq => "rq",
            FormKind::Imq => "imq",
            FormKind::Linear => "linear",
            FormKind::Poly { .. } => "poly",
            FormKind::Cos1d => "cos_1d",
            FormKind::Periodic => "periodic",
            FormKind::Constant => "constant",
        }
    }

    pub fn domain(&self) -> FormDomain {
        match self {
            FormKind::Rbf | FormKind::Matern52 | FormKind::Matern32 | FormKind::Rq | FormKind::Imq => {
                FormDomain::Distance
            }
            FormKind::Linear | FormKind::Poly { .. } => FormDomain::InnerProduct,
            FormKind::Cos1d => FormDomain::ScalarFeature,
            FormKind::Periodic => FormDomain::Difference,
            FormKind::Constant => FormDomain::None,
        }
    }

    /// Stationary forms satisfy `k(x, x) >= k(x, x')`.
    pub fn is_stationary(&self) -> bool {
        matches!(self.domain(), FormDomain::Distance | FormDomain::Difference)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Node {
    /// The raw input point. Not counted as a node.
    Input,
    Warp { kind: WarpKind, child: Box<Node> },
    /// `child` is `None` only for `constant`.
    Form { kind: FormKind, child: Option<Box<Node>> },
    Sum(Vec<Node>),
    Product(Vec<Node>),
    Scale(Box<Node>),
}

impl Node {
    pub fn warp(kind: WarpKind, child: Node) -> Node {
        Node::Warp {
            kind,
            child: Box::new(child),
        }
    }

    pub fn form(kind: FormKind, child: Node) -> Node {
        Node::Form {
            kind,
            child: Some(Box::new(child)),
        }
    }

    pub fn constant() -> Node {
        Node::Form {
            kind: FormKind::Constant,
            child: None,
        }
    }

    pub fn scale(child: Node) -> Node {
        Node::Scale(Box::new(child))
    }

    /// True for nodes that produce a covariance (as opposed to features).
    pub fn is_kernel(&self) -> bool {
        matches!(
            self,
            Node::Form { .. } | Node::Sum(_) | Node::Product(_) | Node::Scale(_)
        )
    }

    pub fn node_count(&self) -> usize {
        match self {
            Node::Input => 0,
            Node::Warp { child, .. } => 1 + child.node_count(),
            Node::Form { child, .. } => 1 + child.as_ref().map_or(0, |c| c.node_count()),
            Node::Sum(cs) | Node::Product(cs) => 1 + cs.iter().map(Node::node_count).sum::<usize>(),
            Node::Scale(c) => 1 + c.node_count(),
        }
    }

    /// Longest run of directly stacked warps.
    pub fn max_warp_chain(&self) -> usize {
        match self {
            Node::Input => 0,
            Node::Warp { child, .. } => 1 + child.max_warp_chain(),
            Node::Form { child, .. } => child.as_ref().map_or(0, |c| c.max_warp_chain()),
            Node::Sum(cs) | Node::Product(cs) => cs.iter().map(Node::max_warp_chain).max().unwrap_or(0),
            Node::Scale(c) => c.max_warp_chain(),
        }
    }

    /// Output feature dimension of a feature node given the raw input dimension.
    pub fn feature_dim(&self, dim: usize) -> usize {
        match self {
            Node::Input => dim,
            Node::Warp { kind, child } => kind.out_dim(child.feature_dim(dim)),
            _ => 0,
        }
    }

    fn render_into(&self, out: &mut String) {
        match self {
            Node::Input => out.push('x'),
            Node::Warp { kind, child } => {
                out.push_str(kind.name());
                let needs_args = !matches!(**child, Node::Input) || matches!(kind, WarpKind::ArctanLayers { .. });
                if needs_args {
                    out.push('(');
                    if !matches!(**child, Node::Input) {
                        child.render_into(out);
                        if let WarpKind::ArctanLayers { depth } = kind {
                            out.push_str(&format!(", depth={depth}"));
                        }
                    } else if let WarpKind::ArctanLayers { depth } = kind {
                        out.push_str(&format!("x, depth={depth}"));
                    }
                    out.push(')');
                }
            }
            Node::Form { kind, child } => {
                out.push_str(kind.name());
                if let Some(c) = child {
                    out.push('(');
                    c.render_into(out);
                    if let FormKind::Poly { degree } = kind {
                        out.push_str(&format!(", degree={degree}"));
                    }
                    out.push(')');
                }
            }
            Node::Sum(cs) | Node::Product(cs) => {
                out.push_str(if matches!(self, Node::Sum(_)) { "sum(" } else { "product(" });
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    c.render_into(out);
                }
                out.push(')');
            }
            Node::Scale(c) => {
                out.push_str("scale(");
                c.render_into(out);
                out.push(')');
            }
        }
    }

    fn canonicalize(&self) -> Node {
        match self {
            Node::Input => Node::Input,
            Node::Warp { kind, child } => Node::warp(*kind, child.canonicalize()),
            Node::Form { kind, child } => Node::Form {
                kind: *kind,
                child: child.as_ref().map(|c| Box::new(c.canonicalize())),
            },
            Node::Sum(cs) | Node::Product(cs) => {
                let is_sum = matches!(self, Node::Sum(_));
                let mut flat = Vec::with_capacity(cs.len());
                for c in cs {
                    match (is_sum, c.canonicalize()) {
                        (true, Node::Sum(inner)) | (false, Node::Product(inner)) => flat.extend(inner),
                        (_, other) => flat.push(other),
                    }
                }
                let mut keyed: Vec<(String, Node)> = flat.into_iter().map(|n| (render_node(&n), n)).collect();
                keyed.sort_by(|a, b| a.0.cmp(&b.0));
                let children = keyed.into_iter().map(|(_, n)| n).collect();
                if is_sum {
                    Node::Sum(children)
                } else {
                    Node::Product(children)
                }
            }
            // Two positive scales multiply into one.
            Node::Scale(c) => match c.canonicalize() {
                inner @ Node::Scale(_) => inner,
                inner => Node::scale(inner),
            },
        }
    }
}

fn render_node(node: &Node) -> String {
    let mut s = String::new();
    node.render_into(&mut s);
    s
}

/// A parsed kernel expression. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KernelExpr {
    root: Node,
}

impl KernelExpr {
    /// Wraps a root node after checking structural constraints.
    pub fn new(root: Node) -> Result<Self, ParseError> {
        parse::check_structure(&root, DEFAULT_NODE_BUDGET)?;
        Ok(Self { root })
    }

    pub(crate) fn new_unchecked(root: Node) -> Self {
        Self { root }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn into_root(self) -> Node {
        self.root
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    pub fn render(&self) -> String {
        render_node(&self.root)
    }

    /// Children of sums and products sorted, nested same-operator
    /// combinators flattened.
    pub fn canonical(&self) -> KernelExpr {
        KernelExpr {
            root: self.root.canonicalize(),
        }
    }

    pub fn canonical_text(&self) -> String {
        self.canonical().render()
    }

    pub fn digest(&self) -> String {
        canonical_digest(self)
    }

    /// True if every form in the tree is stationary.
    pub fn is_stationary(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Input => true,
                Node::Warp { .. } => true,
                Node::Form { kind, child } => {
                    kind.is_stationary() && child.as_ref().map_or(true, |c| feature_is_translation_invariant(c))
                }
                Node::Sum(cs) | Node::Product(cs) => cs.iter().all(walk),
                Node::Scale(c) => walk(c),
            }
        }
        fn feature_is_translation_invariant(n: &Node) -> bool {
            match n {
                Node::Input => true,
                Node::Warp { kind, child } => matches!(kind, WarpKind::Ard) && feature_is_translation_invariant(child),
                _ => false,
            }
        }
        walk(&self.root)
    }
}

impl fmt::Display for KernelExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl std::str::FromStr for KernelExpr {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

impl Serialize for KernelExpr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for KernelExpr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse(&text).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 (hex) of the canonical rendering.
pub fn canonical_digest(expr: &KernelExpr) -> String {
    let mut h = Sha256::new();
    h.update(expr.canonical_text().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// The kernels every run starts from, plus the two extra reference kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKernel {
    Rbf,
    Matern52,
    Rq,
    Bock,
    Sl,
    Linear,
    Periodic,
}

impl BaseKernel {
    pub const INITIAL: [BaseKernel; 5] = [
        BaseKernel::Rbf,
        BaseKernel::Matern52,
        BaseKernel::Rq,
        BaseKernel::Bock,
        BaseKernel::Sl,
    ];
    pub const ALL: [BaseKernel; 7] = [
        BaseKernel::Rbf,
        BaseKernel::Matern52,
        BaseKernel::Rq,
        BaseKernel::Bock,
        BaseKernel::Sl,
        BaseKernel::Linear,
        BaseKernel::Periodic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaseKernel::Rbf => "rbf",
            BaseKernel::Matern52 => "matern52",
            BaseKernel::Rq => "rq",
            BaseKernel::Bock => "bock",
            BaseKernel::Sl => "sl",
            BaseKernel::Linear => "linear",
            BaseKernel::Periodic => "periodic",
        }
    }

    pub fn source(&self) -> &'static str {
        match self {
            BaseKernel::Rbf => "scale(rbf(ard))",
            BaseKernel::Matern52 => "scale(matern52(ard))",
            BaseKernel::Rq => "scale(rq(ard))",
            BaseKernel::Bock => {
                "scale(product(matern52(ard(kumaraswamy_radial(center_scale))), poly(unit_direction(center_scale), degree=3)))"
            }
            BaseKernel::Sl => "scale(poly(stereographic(ard(center_scale)), degree=1))",
            BaseKernel::Linear => "scale(linear(center_scale))",
            BaseKernel::Periodic => "scale(periodic(x))",
        }
    }

    pub fn expr(&self) -> KernelExpr {
        parse(self.source()).expect("base kernel sources are valid")
    }

    pub fn from_name(name: &str) -> Option<BaseKernel> {
        BaseKernel::ALL.into_iter().find(|b| b.name() == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_ignores_child_order() {
        let a = parse("sum(rbf(ard), matern52(ard))").unwrap();
        let b = parse("sum(matern52(ard), rbf(ard))").unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = parse("rbf(ard)").unwrap();
        let d = parse("matern52(ard)").unwrap();
        assert_ne!(c.digest(), d.digest());
    }

    #[test]
    fn renamed_duplicate_pair_shares_digest() {
        // Same RBF + RQ sum written twice with different operand order and
        // spelling, as two independently generated snippets would be.
        let a = parse("sum(rbf(ard), rq(ard))").unwrap();
        let b = parse("(sum (rq ard) (rbf ard))").unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn canonical_flattens_nested_sums() {
        let a = parse("sum(rbf(ard), sum(rq(ard), imq(ard)))").unwrap();
        let b = parse("sum(imq(ard), rbf(ard), rq(ard))").unwrap();
        assert_eq!(a.canonical_text(), b.canonical_text());
        assert_eq!(a.canonical_text(), "sum(imq(ard), rbf(ard), rq(ard))");
    }

    #[test]
    fn nested_scales_collapse() {
        let a = parse("scale(scale(scale(rq(ard))))").unwrap();
        assert_eq!(a.digest(), parse("scale(rq(ard))").unwrap().digest());
        assert_ne!(a.digest(), parse("rq(ard)").unwrap().digest());
    }

    #[test]
    fn base_kernels_parse_within_budget() {
        for b in BaseKernel::ALL {
            let e = b.expr();
            assert!(e.node_count() <= DEFAULT_NODE_BUDGET);
            assert_eq!(parse(&e.render()).unwrap(), e);
        }
    }

    #[test]
    fn feature_dims() {
        let e = parse("poly(stereographic(ard(center_scale)), degree=1)").unwrap();
        if let Node::Form { child: Some(c), .. } = e.root() {
            assert_eq!(c.feature_dim(4), 5);
        } else {
            panic!("unexpected root");
        }
        let k = parse("matern52(ard(kumaraswamy_radial(center_scale)))").unwrap();
        if let Node::Form { child: Some(c), .. } = k.root() {
            assert_eq!(c.feature_dim(9), 1);
        }
    }

    #[test]
    fn stationarity_flag() {
        assert!(BaseKernel::Rbf.expr().is_stationary());
        assert!(!BaseKernel::Linear.expr().is_stationary());
        assert!(!BaseKernel::Bock.expr().is_stationary());
    }
}
