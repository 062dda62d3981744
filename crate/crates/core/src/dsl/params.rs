//! Hyperparameter extraction.
//!
//! Parameters are listed in pre-order: a node's own parameters come before
//! those of its children. Evaluation consumes them in the same order.

use serde::{Deserialize, Serialize};

use super::{FormKind, KernelExpr, Node, WarpKind};
use crate::primitives::{lengthscale_prior, LognormalPrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Log,
    /// Maps the real line onto the open bounds interval.
    Logit,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamShape {
    Scalar,
    PerDimension { index: usize, of: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamSpec {
    pub name: String,
    pub shape: ParamShape,
    pub transform: Transform,
    /// Natural-space bounds, `lo < hi`.
    pub bounds: (f64, f64),
    /// Natural-space initial value.
    pub init: f64,
    pub prior: Option<LognormalPrior>,
}

impl HyperparamSpec {
    pub fn to_unconstrained(&self, v: f64) -> f64 {
        let (lo, hi) = self.bounds;
        match self.transform {
            Transform::Log => v.ln(),
            Transform::Logit => {
                let p = ((v - lo) / (hi - lo)).clamp(1e-12, 1.0 - 1e-12);
                (p / (1.0 - p)).ln()
            }
            Transform::Identity => v,
        }
    }

    pub fn to_natural(&self, u: f64) -> f64 {
        let (lo, hi) = self.bounds;
        match self.transform {
            Transform::Log => u.exp(),
            Transform::Logit => lo + (hi - lo) / (1.0 + (-u).exp()),
            Transform::Identity => u,
        }
    }

    /// `d natural / d unconstrained` at `u`.
    pub fn jacobian(&self, u: f64) -> f64 {
        let (lo, hi) = self.bounds;
        match self.transform {
            Transform::Log => u.exp(),
            Transform::Logit => {
                let s = 1.0 / (1.0 + (-u).exp());
                (hi - lo) * s * (1.0 - s)
            }
            Transform::Identity => 1.0,
        }
    }

    /// Box in unconstrained space used by the optimizer.
    pub fn unconstrained_bounds(&self) -> (f64, f64) {
        match self.transform {
            Transform::Logit => (-30.0, 30.0),
            _ => (self.to_unconstrained(self.bounds.0), self.to_unconstrained(self.bounds.1)),
        }
    }

    /// Log prior density and its derivative in unconstrained space.
    pub fn log_prior(&self, u: f64) -> (f64, f64) {
        match (&self.prior, self.transform) {
            (Some(p), Transform::Log) => (p.log_density_at_log(u), p.d_log_density_at_log(u)),
            _ => (0.0, 0.0),
        }
    }
}

/// Lengthscale bounds shared by every `ard` warp.
pub const LENGTHSCALE_BOUNDS: (f64, f64) = (2.5e-2, 1e4);

struct Builder {
    out: Vec<HyperparamSpec>,
}

impl Builder {
    fn push(&mut self, path: &str, name: &str, shape: ParamShape, bounds: (f64, f64), init: f64) {
        self.push_full(path, name, shape, Transform::Log, bounds, init, None);
    }

    #[allow(clippy::too_many_arguments)]
    fn push_full(
        &mut self,
        path: &str,
        name: &str,
        shape: ParamShape,
        transform: Transform,
        bounds: (f64, f64),
        init: f64,
        prior: Option<LognormalPrior>,
    ) {
        let full = match shape {
            ParamShape::Scalar => format!("{path}.{name}"),
            ParamShape::PerDimension { index, .. } => format!("{path}.{name}[{index}]"),
        };
        self.out.push(HyperparamSpec {
            name: full,
            shape,
            transform,
            bounds,
            init: init.clamp(bounds.0, bounds.1),
            prior,
        });
    }

    fn per_dim(&mut self, path: &str, name: &str, m: usize, bounds: (f64, f64), init: f64, prior: Option<LognormalPrior>) {
        for i in 0..m {
            self.push_full(
                path,
                name,
                ParamShape::PerDimension { index: i, of: m },
                Transform::Log,
                bounds,
                init,
                prior,
            );
        }
    }

    fn node(&mut self, node: &Node, dim: usize, path: &str) {
        match node {
            Node::Input => {}
            Node::Warp { kind, child } => {
                let m = child.feature_dim(dim);
                let here = format!("{path}/{}", kind.name());
                match kind {
                    WarpKind::Ard => {
                        let prior = lengthscale_prior(m.max(1)).expect("m >= 1");
                        self.per_dim(&here, "lengthscale", m, LENGTHSCALE_BOUNDS, prior.mode(), Some(prior));
                    }
                    WarpKind::CenterScale => {
                        let r = (m as f64).sqrt();
                        self.push(&here, "radius", ParamShape::Scalar, (r * 1e-2, r * 1e2), r / 2.0);
                    }
                    WarpKind::Tanh => self.push(&here, "sigma", ParamShape::Scalar, (1e-2, 1e2), 1.0),
                    WarpKind::ArctanLayers { .. } => {
                        self.push(&here, "s", ParamShape::Scalar, (1e-2, 1e2), 1.0);
                        self.push(&here, "w", ParamShape::Scalar, (1e-2, 1e2), 1.0);
                    }
                    WarpKind::KumaraswamyRadial => {
                        self.push(&here, "alpha", ParamShape::Scalar, (0.1, 10.0), 1.0);
                        self.push(&here, "beta", ParamShape::Scalar, (0.1, 10.0), 1.0);
                    }
                    WarpKind::Stereographic | WarpKind::UnitDirection => {}
                }
                self.node(child, dim, &format!("{path}.0"));
            }
            Node::Form { kind, child } => {
                let here = format!("{path}/{}", kind.name());
                let m = child.as_ref().map_or(0, |c| c.feature_dim(dim));
                match kind {
                    FormKind::Rq => self.push(&here, "alpha", ParamShape::Scalar, (0.05, 1e6), 1.0),
                    FormKind::Poly { degree } => {
                        let n = *degree as usize + 1;
                        for p in 0..n {
                            self.push(&here, "weight", ParamShape::PerDimension { index: p, of: n }, (1e-4, 1e2), 1.0);
                        }
                    }
                    FormKind::Cos1d => self.push(&here, "frequency", ParamShape::Scalar, (1e-2, 1e2), 1.0),
                    FormKind::Periodic => {
                        self.per_dim(&here, "lengthscale", m, (1e-2, 1e2), 1.0, None);
                        self.per_dim(&here, "period", m, (1e-2, 1e2), 1.0, None);
                    }
                    FormKind::Constant => self.push(&here, "value", ParamShape::Scalar, (1e-4, 1e4), 1.0),
                    FormKind::Rbf | FormKind::Matern52 | FormKind::Matern32 | FormKind::Imq | FormKind::Linear => {}
                }
                if let Some(c) = child {
                    self.node(c, dim, &format!("{path}.0"));
                }
            }
            Node::Sum(cs) | Node::Product(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    self.node(c, dim, &format!("{path}.{i}"));
                }
            }
            Node::Scale(c) => {
                self.push(&format!("{path}/scale"), "variance", ParamShape::Scalar, (1e-4, 1e4), 1.0);
                self.node(c, dim, &format!("{path}.0"));
            }
        }
    }
}

/// Hyperparameters of `expr` for inputs of dimension `dim`, in evaluation order.
pub fn hyperparams(expr: &KernelExpr, dim: usize) -> Vec<HyperparamSpec> {
    let mut b = Builder { out: Vec::new() };
    b.node(expr.root(), dim, "k");
    b.out
}

/// Number of parameters owned directly by `node` (not its children).
pub(crate) fn own_param_count(node: &Node, dim: usize) -> usize {
    match node {
        Node::Input | Node::Sum(_) | Node::Product(_) => 0,
        Node::Scale(_) => 1,
        Node::Warp { kind, child } => match kind {
            WarpKind::Ard => child.feature_dim(dim),
            WarpKind::CenterScale | WarpKind::Tanh => 1,
            WarpKind::ArctanLayers { .. } | WarpKind::KumaraswamyRadial => 2,
            WarpKind::Stereographic | WarpKind::UnitDirection => 0,
        },
        Node::Form { kind, child } => match kind {
            FormKind::Rq | FormKind::Cos1d | FormKind::Constant => 1,
            FormKind::Poly { degree } => *degree as usize + 1,
            FormKind::Periodic => 2 * child.as_ref().map_or(0, |c| c.feature_dim(dim)),
            _ => 0,
        },
    }
}
