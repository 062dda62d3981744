//! Plain-text mathematical rendering of kernel expressions.

use crate::dsl::{FormKind, KernelExpr, Node, WarpKind};

fn feature(n: &Node) -> String {
    match n {
        Node::Input => "x".into(),
        Node::Warp { kind, child } => {
            let inner = feature(child);
            match kind {
                WarpKind::Ard => format!("{inner} / l"),
                WarpKind::CenterScale => format!("({inner} - c) / r"),
                WarpKind::Tanh => format!("tanh({inner} / s)"),
                WarpKind::ArctanLayers { depth } => format!("arctan^{depth}({inner})"),
                WarpKind::KumaraswamyRadial => format!("Kuma_ab(||{inner}||)"),
                WarpKind::Stereographic => format!("stereo({inner})"),
                WarpKind::UnitDirection => format!("({inner}) / ||{inner}||"),
            }
        }
        other => describe_node(other),
    }
}

fn wrap(s: String, n: &Node) -> String {
    if matches!(n, Node::Sum(_)) {
        format!("({s})")
    } else {
        s
    }
}

fn describe_node(n: &Node) -> String {
    match n {
        Node::Input | Node::Warp { .. } => feature(n),
        Node::Form { kind, child } => {
            let z = child.as_deref().map(feature).unwrap_or_default();
            let (a, b) = (format!("u = {z}"), format!("v = {z}'"));
            match kind {
                FormKind::Rbf => format!("exp(-||u - v||^2 / 2) where {a}, {b}"),
                FormKind::Matern52 => format!("(1 + sqrt5 d + 5 d^2 / 3) exp(-sqrt5 d), d = ||u - v||, {a}, {b}"),
                FormKind::Matern32 => format!("(1 + sqrt3 d) exp(-sqrt3 d), d = ||u - v||, {a}, {b}"),
                FormKind::Rq => format!("(1 + ||u - v||^2 / (2 alpha))^(-alpha), {a}, {b}"),
                FormKind::Imq => format!("(1 + ||u - v||^2)^(-1/2), {a}, {b}"),
                FormKind::Linear => format!("<u, v>, {a}, {b}"),
                FormKind::Poly { degree } => format!("sum_p=0..{degree} w_p <u, v>^p, {a}, {b}"),
                FormKind::Cos1d => format!("cos(2 pi f (||u|| - ||v||)), {a}, {b}"),
                FormKind::Periodic => {
                    format!("prod_i exp(-2 sin^2(pi |u_i - v_i| / p_i) / l_i^2), {a}, {b}")
                }
                FormKind::Constant => "c".into(),
            }
        }
        Node::Sum(cs) => cs.iter().map(|c| format!("[{}]", describe_node(c))).collect::<Vec<_>>().join(" + "),
        Node::Product(cs) => cs
            .iter()
            .map(|c| wrap(format!("[{}]", describe_node(c)), c))
            .collect::<Vec<_>>()
            .join(" * "),
        Node::Scale(c) => format!("sigma^2 * {}", wrap(describe_node(c), c)),
    }
}

/// `k(x, x') = ...` in ASCII notation.
pub fn describe(expr: &KernelExpr) -> String {
    format!("k(x, x') = {}", describe_node(expr.root()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::BaseKernel;

    #[test]
    fn base_descriptions_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for b in BaseKernel::ALL {
            let d = describe(&b.expr());
            assert!(d.starts_with("k(x, x') = "));
            assert!(seen.insert(d));
        }
    }
}
