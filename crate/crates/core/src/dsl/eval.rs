//! Gram evaluation with a reverse pass.
//!
//! The forward pass records a tape holding every intermediate feature map
//! and Gram block; [`Kernel::backward`] pulls an adjoint matrix back through
//! it to produce parameter gradients (natural space) and input adjoints.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::params::own_param_count;
use super::{hyperparams, FormKind, HyperparamSpec, KernelExpr, Node, WarpKind};
use crate::primitives::{kumaraswamy, matern32_profile, matern52_profile, rbf_profile, rq_profile, RADIAL_EPS};

const SQRT_3: f64 = 1.732_050_807_568_877_2;
const SQRT_5: f64 = 2.236_067_977_499_79;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("input has {got} columns, kernel was built for {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch sizes differ: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },
    #[error("non-finite value produced at node {path}")]
    NonFinite { path: String },
}

/// A Gram block plus identifying metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub expr_digest: String,
    pub param_digest: String,
}

/// Row-major feature block, one row per point.
#[derive(Debug, Clone)]
struct Feat {
    n: usize,
    m: usize,
    v: Vec<f64>,
}

impl Feat {
    fn zeros(n: usize, m: usize) -> Self {
        Self { n, m, v: vec![0.0; n * m] }
    }

    fn from_points(x: &DMatrix<f64>) -> Self {
        let (n, m) = x.shape();
        let mut v = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                v.push(x[(i, j)]);
            }
        }
        Self { n, m, v }
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.m, &self.v)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.m..(i + 1) * self.m]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.v[i * self.m..(i + 1) * self.m]
    }
}

struct WarpStep {
    kind: WarpKind,
    offset: usize,
    input: Feat,
    output: Feat,
    /// Arctan intermediates (layer inputs), or raw norms for radial warps.
    layers: Vec<Feat>,
}

struct FeatTape {
    /// Innermost first.
    steps: Vec<WarpStep>,
    out: Feat,
}

/// Forward record of one Gram evaluation.
pub struct GramTape {
    root: Tape,
    n1: usize,
    n2: usize,
}

impl GramTape {
    pub fn gram(&self) -> &DMatrix<f64> {
        self.root.k()
    }
}

enum Tape {
    Form {
        kind: FormKind,
        offset: usize,
        k: DMatrix<f64>,
        /// Squared distances or inner products, depending on the form.
        aux: DMatrix<f64>,
        left: FeatTape,
        right: FeatTape,
    },
    Constant {
        offset: usize,
        k: DMatrix<f64>,
    },
    Sum {
        k: DMatrix<f64>,
        children: Vec<Tape>,
    },
    Product {
        k: DMatrix<f64>,
        children: Vec<Tape>,
    },
    Scale {
        offset: usize,
        k: DMatrix<f64>,
        child: Box<Tape>,
    },
}

impl Tape {
    fn k(&self) -> &DMatrix<f64> {
        match self {
            Tape::Form { k, .. }
            | Tape::Constant { k, .. }
            | Tape::Sum { k, .. }
            | Tape::Product { k, .. }
            | Tape::Scale { k, .. } => k,
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Backward {
    /// Gradient with respect to natural-space parameters.
    pub grad: Vec<f64>,
    /// Adjoint of the first input block (n1 x D).
    pub x1: DMatrix<f64>,
    /// Adjoint of the second input block (n2 x D).
    pub x2: DMatrix<f64>,
}

/// An expression bound to an input dimensionality.
#[derive(Debug, Clone)]
pub struct Kernel {
    expr: KernelExpr,
    dim: usize,
    specs: Vec<HyperparamSpec>,
}

impl Kernel {
    pub fn new(expr: KernelExpr, dim: usize) -> Self {
        let specs = hyperparams(&expr, dim);
        Self { expr, dim, specs }
    }

    pub fn expr(&self) -> &KernelExpr {
        &self.expr
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn specs(&self) -> &[HyperparamSpec] {
        &self.specs
    }

    pub fn n_params(&self) -> usize {
        self.specs.len()
    }

    pub fn default_params(&self) -> Vec<f64> {
        self.specs.iter().map(|s| s.init).collect()
    }

    fn check(&self, theta: &[f64], x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<(), EvalError> {
        if theta.len() != self.specs.len() {
            return Err(EvalError::ParamCount {
                expected: self.specs.len(),
                got: theta.len(),
            });
        }
        for x in [x1, x2] {
            if x.ncols() != self.dim {
                return Err(EvalError::DimensionMismatch {
                    expected: self.dim,
                    got: x.ncols(),
                });
            }
        }
        Ok(())
    }

    /// `K(x1, x2)` without recording a tape.
    pub fn gram(&self, theta: &[f64], x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>, EvalError> {
        Ok(self.forward(theta, x1, x2)?.root.k().clone())
    }

    pub fn forward(&self, theta: &[f64], x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<GramTape, EvalError> {
        self.check(theta, x1, x2)?;
        let f1 = Feat::from_points(x1);
        let f2 = Feat::from_points(x2);
        let mut cursor = 0;
        let root = self.node_forward(self.expr.root(), theta, &mut cursor, &f1, &f2, "k")?;
        debug_assert_eq!(cursor, theta.len());
        Ok(GramTape {
            root,
            n1: x1.nrows(),
            n2: x2.nrows(),
        })
    }

    /// Pulls `adjoint` (dL/dK, n1 x n2) back to parameters and inputs.
    pub fn backward(&self, tape: &GramTape, theta: &[f64], adjoint: &DMatrix<f64>) -> Backward {
        let mut grad = vec![0.0; theta.len()];
        let mut a1 = Feat::zeros(tape.n1, self.dim);
        let mut a2 = Feat::zeros(tape.n2, self.dim);
        self.node_backward(&tape.root, theta, adjoint, &mut grad, &mut a1, &mut a2);
        Backward {
            grad,
            x1: a1.to_matrix(),
            x2: a2.to_matrix(),
        }
    }

    fn node_forward(
        &self,
        node: &Node,
        theta: &[f64],
        cursor: &mut usize,
        x1: &Feat,
        x2: &Feat,
        path: &str,
    ) -> Result<Tape, EvalError> {
        let offset = *cursor;
        *cursor += own_param_count(node, self.dim);
        let tape = match node {
            Node::Input | Node::Warp { .. } => unreachable!("feature node in kernel position"),
            Node::Form { kind: FormKind::Constant, .. } => Tape::Constant {
                offset,
                k: DMatrix::from_element(x1.n, x2.n, theta[offset]),
            },
            Node::Form { kind, child } => {
                let child = child.as_ref().expect("non-constant forms have an input");
                let chain = self.chain(child, cursor);
                let left = apply_chain(&chain, x1, theta);
                let right = apply_chain(&chain, x2, theta);
                let (k, aux) = form_forward(*kind, offset, theta, &left.out, &right.out);
                Tape::Form {
                    kind: *kind,
                    offset,
                    k,
                    aux,
                    left,
                    right,
                }
            }
            Node::Sum(cs) | Node::Product(cs) => {
                let mut children = Vec::with_capacity(cs.len());
                for (i, c) in cs.iter().enumerate() {
                    children.push(self.node_forward(c, theta, cursor, x1, x2, &format!("{path}.{i}"))?);
                }
                let mut k = children[0].k().clone();
                if matches!(node, Node::Sum(_)) {
                    for c in &children[1..] {
                        k += c.k();
                    }
                    Tape::Sum { k, children }
                } else {
                    for c in &children[1..] {
                        k.component_mul_assign(c.k());
                    }
                    Tape::Product { k, children }
                }
            }
            Node::Scale(c) => {
                let child = self.node_forward(c, theta, cursor, x1, x2, &format!("{path}.0"))?;
                let k = child.k() * theta[offset];
                Tape::Scale {
                    offset,
                    k,
                    child: Box::new(child),
                }
            }
        };
        if tape.k().iter().any(|v| !v.is_finite()) {
            let name = match node {
                Node::Form { kind, .. } => kind.name(),
                Node::Sum(_) => "sum",
                Node::Product(_) => "product",
                Node::Scale(_) => "scale",
                _ => "?",
            };
            return Err(EvalError::NonFinite {
                path: format!("{path}/{name}"),
            });
        }
        Ok(tape)
    }

    /// Warps from outermost to innermost with their parameter offsets.
    fn chain(&self, node: &Node, cursor: &mut usize) -> Vec<(WarpKind, usize)> {
        let mut out = Vec::new();
        let mut cur = node;
        while let Node::Warp { kind, child } = cur {
            out.push((*kind, *cursor));
            *cursor += own_param_count(cur, self.dim);
            cur = child;
        }
        out
    }

    fn node_backward(&self, tape: &Tape, theta: &[f64], g: &DMatrix<f64>, grad: &mut [f64], a1: &mut Feat, a2: &mut Feat) {
        match tape {
            Tape::Constant { offset, .. } => grad[*offset] += g.sum(),
            Tape::Scale { offset, child, .. } => {
                grad[*offset] += g.dot(child.k());
                let inner = g * theta[*offset];
                self.node_backward(child, theta, &inner, grad, a1, a2);
            }
            Tape::Sum { children, .. } => {
                for c in children {
                    self.node_backward(c, theta, g, grad, a1, a2);
                }
            }
            Tape::Product { children, .. } => {
                for i in 0..children.len() {
                    let mut gi = g.clone();
                    for (j, c) in children.iter().enumerate() {
                        if j != i {
                            gi.component_mul_assign(c.k());
                        }
                    }
                    self.node_backward(&children[i], theta, &gi, grad, a1, a2);
                }
            }
            Tape::Form {
                kind,
                offset,
                k,
                aux,
                left,
                right,
            } => {
                let (fa, fb) = form_backward(*kind, *offset, theta, g, k, aux, &left.out, &right.out, grad);
                chain_backward(left, fa, theta, grad, a1);
                chain_backward(right, fb, theta, grad, a2);
            }
        }
    }
}

fn apply_chain(chain: &[(WarpKind, usize)], x: &Feat, theta: &[f64]) -> FeatTape {
    let mut cur = x.clone();
    let mut steps = Vec::with_capacity(chain.len());
    for &(kind, offset) in chain.iter().rev() {
        let (output, layers) = warp_forward(kind, offset, theta, &cur);
        let input = std::mem::replace(&mut cur, output.clone());
        steps.push(WarpStep {
            kind,
            offset,
            input,
            output,
            layers,
        });
    }
    FeatTape { steps, out: cur }
}

fn warp_forward(kind: WarpKind, off: usize, theta: &[f64], u: &Feat) -> (Feat, Vec<Feat>) {
    let (n, m) = (u.n, u.m);
    match kind {
        WarpKind::Ard => {
            let ls = &theta[off..off + m];
            let mut z = u.clone();
            for i in 0..n {
                for (v, l) in z.row_mut(i).iter_mut().zip(ls) {
                    *v /= l;
                }
            }
            (z, Vec::new())
        }
        WarpKind::CenterScale => {
            let s = theta[off];
            let mut z = u.clone();
            z.v.iter_mut().for_each(|v| *v = (*v - 0.5) / s);
            (z, Vec::new())
        }
        WarpKind::Tanh => {
            let s = theta[off];
            let mut z = u.clone();
            z.v.iter_mut().for_each(|v| *v = (*v / s).tanh());
            (z, Vec::new())
        }
        WarpKind::ArctanLayers { depth } => {
            let c = theta[off] * theta[off + 1];
            let mut layers = Vec::with_capacity(depth as usize);
            let mut z = u.clone();
            for i in 1..=depth as usize {
                let next = Feat {
                    n,
                    m,
                    v: z.v.iter().map(|v| (c * v).atan() / (i as f64).sqrt()).collect(),
                };
                layers.push(std::mem::replace(&mut z, next));
            }
            (z, layers)
        }
        WarpKind::KumaraswamyRadial => {
            let (a, b) = (theta[off], theta[off + 1]);
            let mut z = Feat::zeros(n, 1);
            let mut norms = Feat::zeros(n, 1);
            for i in 0..n {
                let r = u.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                norms.v[i] = r;
                z.v[i] = kumaraswamy(r.clamp(RADIAL_EPS, 1.0), a, b);
            }
            (z, vec![norms])
        }
        WarpKind::Stereographic => {
            let mut z = Feat::zeros(n, m + 1);
            for i in 0..n {
                let row = u.row(i);
                let n2: f64 = row.iter().map(|v| v * v).sum();
                let den = 1.0 + n2;
                let out = z.row_mut(i);
                for d in 0..m {
                    out[d] = 2.0 * row[d] / den;
                }
                out[m] = (n2 - 1.0) / den;
            }
            (z, Vec::new())
        }
        WarpKind::UnitDirection => {
            let mut z = Feat::zeros(n, m);
            for i in 0..n {
                let row = u.row(i);
                let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let out = z.row_mut(i);
                if nrm < NORM_EPS {
                    out[0] = 1.0;
                } else {
                    for d in 0..m {
                        out[d] = row[d] / nrm;
                    }
                }
            }
            (z, Vec::new())
        }
    }
}

/// Propagates the output-feature adjoint `zbar` down the chain into `xadj`.
fn chain_backward(tape: &FeatTape, mut zbar: Feat, theta: &[f64], grad: &mut [f64], xadj: &mut Feat) {
    for step in tape.steps.iter().rev() {
        zbar = warp_backward(step, theta, &zbar, grad);
    }
    for (a, g) in xadj.v.iter_mut().zip(&zbar.v) {
        *a += g;
    }
}

fn warp_backward(step: &WarpStep, theta: &[f64], zbar: &Feat, grad: &mut [f64]) -> Feat {
    let off = step.offset;
    let u = &step.input;
    let z = &step.output;
    let (n, m) = (u.n, u.m);
    let mut ubar = Feat::zeros(n, m);
    match step.kind {
        WarpKind::Ard => {
            let ls = &theta[off..off + m];
            for i in 0..n {
                let (zb, ur) = (zbar.row(i), u.row(i));
                let out = ubar.row_mut(i);
                for d in 0..m {
                    out[d] = zb[d] / ls[d];
                    grad[off + d] -= zb[d] * ur[d] / (ls[d] * ls[d]);
                }
            }
        }
        WarpKind::CenterScale => {
            let s = theta[off];
            let mut gs = 0.0;
            for ((ub, zb), uv) in ubar.v.iter_mut().zip(&zbar.v).zip(&u.v) {
                *ub = zb / s;
                gs -= zb * (uv - 0.5) / (s * s);
            }
            grad[off] += gs;
        }
        WarpKind::Tanh => {
            let s = theta[off];
            let mut gs = 0.0;
            for k in 0..u.v.len() {
                let dz = (1.0 - z.v[k] * z.v[k]) * zbar.v[k];
                ubar.v[k] = dz / s;
                gs -= dz * u.v[k] / (s * s);
            }
            grad[off] += gs;
        }
        WarpKind::ArctanLayers { .. } => {
            let (s, w) = (theta[off], theta[off + 1]);
            let c = s * w;
            let mut g = zbar.v.clone();
            let mut gc = 0.0;
            for (idx, layer) in step.layers.iter().enumerate().rev() {
                let scale = 1.0 / ((idx + 1) as f64).sqrt();
                for k in 0..g.len() {
                    let t = c * layer.v[k];
                    let d = scale / (1.0 + t * t);
                    gc += g[k] * d * layer.v[k];
                    g[k] *= d * c;
                }
            }
            grad[off] += gc * w;
            grad[off + 1] += gc * s;
            ubar.v = g;
        }
        WarpKind::KumaraswamyRadial => {
            let (a, b) = (theta[off], theta[off + 1]);
            let norms = &step.layers[0];
            let (mut ga, mut gb) = (0.0, 0.0);
            for i in 0..n {
                let zb = zbar.v[i];
                let raw = norms.v[i];
                let r = raw.clamp(RADIAL_EPS, 1.0);
                let ra = r.powf(a);
                let q = (1.0 - ra).max(1e-12);
                ga += zb * b * q.powf(b - 1.0) * ra * r.ln();
                gb -= zb * q.powf(b) * q.ln();
                if raw > RADIAL_EPS && raw < 1.0 {
                    let dzdr = a * b * r.powf(a - 1.0) * q.powf(b - 1.0);
                    let row = u.row(i);
                    let out = ubar.row_mut(i);
                    for d in 0..m {
                        out[d] = zb * dzdr * row[d] / raw;
                    }
                }
            }
            grad[off] += ga;
            grad[off + 1] += gb;
        }
        WarpKind::Stereographic => {
            for i in 0..n {
                let row = u.row(i);
                let zb = zbar.row(i);
                let n2: f64 = row.iter().map(|v| v * v).sum();
                let den = 1.0 + n2;
                let dot: f64 = (0..m).map(|d| zb[d] * row[d]).sum();
                let tail = zb[m];
                let out = ubar.row_mut(i);
                for k in 0..m {
                    out[k] = 2.0 * zb[k] / den - 4.0 * row[k] * dot / (den * den) + 4.0 * row[k] * tail / (den * den);
                }
            }
        }
        WarpKind::UnitDirection => {
            for i in 0..n {
                let row = u.row(i);
                let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm < NORM_EPS {
                    continue;
                }
                let zr = z.row(i);
                let zb = zbar.row(i);
                let proj: f64 = (0..m).map(|d| zr[d] * zb[d]).sum();
                let out = ubar.row_mut(i);
                for d in 0..m {
                    out[d] = (zb[d] - zr[d] * proj) / nrm;
                }
            }
        }
    }
    ubar
}

// Four partial sums let the compiler vectorize; the summation order is
// fixed, so results are reproducible.
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += (x - y) * (x - y);
    }
    s
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out^T` for a row-major block, i.e. an `m x n` column-major matrix.
fn same_points(a: &Feat, b: &Feat) -> bool {
    a.n == b.n && a.m == b.m && a.v == b.v
}

fn feat_t(f: &Feat) -> DMatrix<f64> {
    DMatrix::from_column_slice(f.m, f.n, &f.v)
}

fn feat_from_t(t: DMatrix<f64>) -> Feat {
    let (m, n) = t.shape();
    Feat {
        n,
        m,
        v: t.as_slice().to_vec(),
    }
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Value and derivative with respect to the squared distance.
fn radial(kind: FormKind, s: f64, alpha: f64) -> (f64, f64) {
    match kind {
        FormKind::Rbf => {
            let f = rbf_profile(s);
            (f, -0.5 * f)
        }
        FormKind::Matern52 => {
            let r = s.sqrt();
            let e = (-SQRT_5 * r).exp();
            (matern52_profile(r), -(5.0 / 6.0) * (1.0 + SQRT_5 * r) * e)
        }
        FormKind::Matern32 => {
            let r = s.sqrt();
            (matern32_profile(r), -1.5 * (-SQRT_3 * r).exp())
        }
        FormKind::Rq => {
            let f = rq_profile(s, alpha);
            (f, -0.5 * f / (1.0 + s / (2.0 * alpha)))
        }
        FormKind::Imq => {
            let f = 1.0 / (1.0 + s);
            (f, -f * f)
        }
        _ => unreachable!("not a distance form"),
    }
}

fn form_forward(kind: FormKind, off: usize, theta: &[f64], a: &Feat, b: &Feat) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n1, n2) = (a.n, b.n);
    let mut k = DMatrix::zeros(n1, n2);
    let mut aux = DMatrix::zeros(0, 0);
    match kind {
        FormKind::Rbf | FormKind::Matern52 | FormKind::Matern32 | FormKind::Rq | FormKind::Imq => {
            let alpha = if kind == FormKind::Rq { theta[off] } else { 0.0 };
            aux = DMatrix::zeros(n1, n2);
            let sym = same_points(a, b);
            for j in 0..n2 {
                let bj = b.row(j);
                for i in 0..if sym { j + 1 } else { n1 } {
                    let s = sq_dist(a.row(i), bj);
                    let v = radial(kind, s, alpha).0;
                    aux[(i, j)] = s;
                    k[(i, j)] = v;
                    if sym {
                        aux[(j, i)] = s;
                        k[(j, i)] = v;
                    }
                }
            }
        }
        FormKind::Linear | FormKind::Poly { .. } => {
            aux = DMatrix::zeros(n1, n2);
            let sym = same_points(a, b);
            for j in 0..n2 {
                let bj = b.row(j);
                for i in 0..if sym { j + 1 } else { n1 } {
                    let t = dot(a.row(i), bj);
                    let v = match kind {
                        FormKind::Poly { degree } => poly(&theta[off..off + degree as usize + 1], t).0,
                        _ => t,
                    };
                    aux[(i, j)] = t;
                    k[(i, j)] = v;
                    if sym {
                        aux[(j, i)] = t;
                        k[(j, i)] = v;
                    }
                }
            }
        }
        FormKind::Cos1d => {
            let w = 2.0 * PI * theta[off];
            let ra: Vec<f64> = (0..n1).map(|i| norm(a.row(i))).collect();
            let rb: Vec<f64> = (0..n2).map(|j| norm(b.row(j))).collect();
            for j in 0..n2 {
                for i in 0..n1 {
                    k[(i, j)] = (w * (ra[i] - rb[j]).abs()).cos();
                }
            }
        }
        FormKind::Periodic => {
            let m = a.m;
            let (ls, ps) = (&theta[off..off + m], &theta[off + m..off + 2 * m]);
            for j in 0..n2 {
                let bj = b.row(j);
                for i in 0..n1 {
                    let ai = a.row(i);
                    let mut acc = 0.0;
                    for d in 0..m {
                        let s = (PI * (ai[d] - bj[d]) / ps[d]).sin();
                        acc += s * s / (ls[d] * ls[d]);
                    }
                    k[(i, j)] = (-2.0 * acc).exp();
                }
            }
        }
        FormKind::Constant => unreachable!(),
    }
    (k, aux)
}

/// Polynomial value and derivative in `t`.
fn poly(w: &[f64], t: f64) -> (f64, f64) {
    let mut val = 0.0;
    let mut der = 0.0;
    let mut tp = 1.0;
    for (p, wp) in w.iter().enumerate() {
        if p > 0 {
            der += p as f64 * wp * tp;
            tp *= t;
        }
        val += wp * tp;
    }
    (val, der)
}

#[allow(clippy::too_many_arguments)]
fn form_backward(
    kind: FormKind,
    off: usize,
    theta: &[f64],
    g: &DMatrix<f64>,
    k: &DMatrix<f64>,
    aux: &DMatrix<f64>,
    a: &Feat,
    b: &Feat,
    grad: &mut [f64],
) -> (Feat, Feat) {
    let (n1, n2, m) = (a.n, b.n, a.m);
    let mut fa = Feat::zeros(n1, m);
    let mut fb = Feat::zeros(n2, m);
    match kind {
        FormKind::Rbf | FormKind::Matern52 | FormKind::Matern32 | FormKind::Rq | FormKind::Imq => {
            let alpha = if kind == FormKind::Rq { theta[off] } else { 0.0 };
            let mut galpha = 0.0;
            // c_ij = 2 g_ij dk/ds; then
            //   fa_i = sum_j c_ij (a_i - b_j),  fb_j = -sum_i c_ij (a_i - b_j).
            let mut c = DMatrix::zeros(n1, n2);
            for j in 0..n2 {
                for i in 0..n1 {
                    let gij = g[(i, j)];
                    if gij == 0.0 {
                        continue;
                    }
                    let s = aux[(i, j)];
                    let (f, df) = radial(kind, s, alpha);
                    if kind == FormKind::Rq {
                        let base = 1.0 + s / (2.0 * alpha);
                        galpha += gij * f * (-base.ln() + s / (2.0 * alpha * base));
                    }
                    c[(i, j)] = 2.0 * gij * df;
                }
            }
            if kind == FormKind::Rq {
                grad[off] += galpha;
            }
            let (at, bt) = (feat_t(a), feat_t(b));
            let rows = DVector::from_iterator(n1, c.row_iter().map(|r| r.sum()));
            let cols = DVector::from_iterator(n2, c.column_iter().map(|col| col.sum()));
            let mut fat = &bt * c.transpose();
            fat.neg_mut();
            for (i, mut col) in fat.column_iter_mut().enumerate() {
                col.axpy(rows[i], &at.column(i), 1.0);
            }
            let mut fbt = &at * &c;
            fbt.neg_mut();
            for (j, mut col) in fbt.column_iter_mut().enumerate() {
                col.axpy(cols[j], &bt.column(j), 1.0);
            }
            fa = feat_from_t(fat);
            fb = feat_from_t(fbt);
        }
        FormKind::Linear | FormKind::Poly { .. } => {
            let w: &[f64] = match kind {
                FormKind::Poly { degree } => &theta[off..off + degree as usize + 1],
                _ => &[],
            };
            // c_ij = g_ij dk/dt; fa_i = sum_j c_ij b_j, fb_j = sum_i c_ij a_i.
            let mut c = DMatrix::zeros(n1, n2);
            for j in 0..n2 {
                for i in 0..n1 {
                    let gij = g[(i, j)];
                    if gij == 0.0 {
                        continue;
                    }
                    let t = aux[(i, j)];
                    let dk = if w.is_empty() {
                        1.0
                    } else {
                        let mut tp = 1.0;
                        for (p, _) in w.iter().enumerate() {
                            grad[off + p] += gij * tp;
                            tp *= t;
                        }
                        poly(w, t).1
                    };
                    c[(i, j)] = gij * dk;
                }
            }
            let (at, bt) = (feat_t(a), feat_t(b));
            fa = feat_from_t(&bt * c.transpose());
            fb = feat_from_t(&at * &c);
        }
        FormKind::Cos1d => {
            let freq = theta[off];
            let w = 2.0 * PI * freq;
            let ra: Vec<f64> = (0..n1).map(|i| norm(a.row(i))).collect();
            let rb: Vec<f64> = (0..n2).map(|j| norm(b.row(j))).collect();
            let mut gra = vec![0.0; n1];
            let mut grb = vec![0.0; n2];
            let mut gf = 0.0;
            for j in 0..n2 {
                for i in 0..n1 {
                    let gij = g[(i, j)];
                    let diff = ra[i] - rb[j];
                    let sn = (w * diff).sin();
                    gra[i] -= gij * sn * w;
                    grb[j] += gij * sn * w;
                    gf -= gij * sn * 2.0 * PI * diff;
                }
            }
            grad[off] += gf;
            for (i, r) in ra.iter().enumerate() {
                if *r > NORM_EPS {
                    let ai = a.row(i).to_vec();
                    for (o, v) in fa.row_mut(i).iter_mut().zip(ai) {
                        *o = gra[i] * v / r;
                    }
                }
            }
            for (j, r) in rb.iter().enumerate() {
                if *r > NORM_EPS {
                    let bj = b.row(j).to_vec();
                    for (o, v) in fb.row_mut(j).iter_mut().zip(bj) {
                        *o = grb[j] * v / r;
                    }
                }
            }
        }
        FormKind::Periodic => {
            let (ls, ps) = (&theta[off..off + m], &theta[off + m..off + 2 * m]);
            let mut gl = vec![0.0; m];
            let mut gp = vec![0.0; m];
            for j in 0..n2 {
                let bj = b.row(j).to_vec();
                for i in 0..n1 {
                    let c = g[(i, j)] * k[(i, j)];
                    if c == 0.0 {
                        continue;
                    }
                    let ai = a.row(i).to_vec();
                    for d in 0..m {
                        let delta = ai[d] - bj[d];
                        let u = PI * delta / ps[d];
                        let (sn, s2) = (u.sin(), (2.0 * u).sin());
                        let l2 = ls[d] * ls[d];
                        let dk_ddelta = -2.0 * PI * s2 / (ps[d] * l2);
                        fa.row_mut(i)[d] += c * dk_ddelta;
                        fb.row_mut(j)[d] -= c * dk_ddelta;
                        gl[d] += c * 4.0 * sn * sn / (l2 * ls[d]);
                        gp[d] += c * 2.0 * PI * delta * s2 / (ps[d] * ps[d] * l2);
                    }
                }
            }
            for d in 0..m {
                grad[off + d] += gl[d];
                grad[off + m + d] += gp[d];
            }
        }
        FormKind::Constant => unreachable!(),
    }
    (fa, fb)
}

fn param_digest(theta: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in theta {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// `K(X1, X2)` for an expression at natural-space parameters.
pub fn eval_gram(
    expr: &KernelExpr,
    params: &[f64],
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
) -> Result<GramMatrix, EvalError> {
    if x1.ncols() != x2.ncols() {
        return Err(EvalError::DimensionMismatch {
            expected: x1.ncols(),
            got: x2.ncols(),
        });
    }
    let kernel = Kernel::new(expr.clone(), x1.ncols());
    let entries = kernel.gram(params, x1, x2)?;
    Ok(GramMatrix {
        entries,
        expr_digest: expr.digest(),
        param_digest: param_digest(params),
    })
}

/// Batched evaluation over a leading batch axis. A batch of size one on
/// either side broadcasts against the other.
pub fn eval_gram_batched(
    expr: &KernelExpr,
    params: &[f64],
    x1: &[DMatrix<f64>],
    x2: &[DMatrix<f64>],
) -> Result<Vec<GramMatrix>, EvalError> {
    let b = match (x1.len(), x2.len()) {
        (l, r) if l == r => l,
        (1, r) => r,
        (l, 1) => l,
        (l, r) => return Err(EvalError::BatchMismatch { left: l, right: r }),
    };
    (0..b)
        .map(|i| {
            let a = &x1[if x1.len() == 1 { 0 } else { i }];
            let c = &x2[if x2.len() == 1 { 0 } else { i }];
            eval_gram(expr, params, a, c)
        })
        .collect()
}
