//! Network-free proposer built on random structural edits of the DSL tree.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::describe::describe;
use super::{Outcome, Proposal, ProposalContext, ProposalStage, Proposer};
use crate::dsl::{FormKind, KernelExpr, Node, WarpKind, MAX_ARCTAN_DEPTH, MAX_POLY_DEGREE};

const MAX_TRIES: usize = 16;
const COMPOSE_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationOp {
    SwapForm,
    InsertWarp,
    DeleteWarp,
    ChangeCombinator,
    PerturbConstant,
    Crossover,
}

impl MutationOp {
    pub const ALL: [MutationOp; 6] = [
        MutationOp::SwapForm,
        MutationOp::InsertWarp,
        MutationOp::DeleteWarp,
        MutationOp::ChangeCombinator,
        MutationOp::PerturbConstant,
        MutationOp::Crossover,
    ];
}

const FORMS: [FormKind; 9] = [
    FormKind::Rbf,
    FormKind::Matern52,
    FormKind::Matern32,
    FormKind::Rq,
    FormKind::Imq,
    FormKind::Linear,
    FormKind::Poly { degree: 2 },
    FormKind::Cos1d,
    FormKind::Periodic,
];

const WARPS: [WarpKind; 7] = [
    WarpKind::Ard,
    WarpKind::CenterScale,
    WarpKind::Tanh,
    WarpKind::ArctanLayers { depth: 2 },
    WarpKind::KumaraswamyRadial,
    WarpKind::Stereographic,
    WarpKind::UnitDirection,
];

fn children(n: &Node) -> Vec<&Node> {
    match n {
        Node::Input => vec![],
        Node::Warp { child, .. } => vec![child],
        Node::Form { child, .. } => child.iter().map(|c| &**c).collect(),
        Node::Sum(cs) | Node::Product(cs) => cs.iter().collect(),
        Node::Scale(c) => vec![c],
    }
}

fn preorder<'a>(n: &'a Node, out: &mut Vec<&'a Node>) {
    out.push(n);
    for c in children(n) {
        preorder(c, out);
    }
}

fn nodes(n: &Node) -> Vec<&Node> {
    let mut v = Vec::new();
    preorder(n, &mut v);
    v
}

fn subtree_size(n: &Node) -> usize {
    1 + children(n).into_iter().map(subtree_size).sum::<usize>()
}

fn rebuild(n: &Node, target: usize, counter: &mut usize, with: &mut Option<Node>) -> Node {
    let me = *counter;
    *counter += 1;
    if me == target {
        *counter += subtree_size(n) - 1;
        return with.take().expect("replacement used once");
    }
    match n {
        Node::Input => Node::Input,
        Node::Warp { kind, child } => Node::warp(*kind, rebuild(child, target, counter, with)),
        Node::Form { kind, child } => Node::Form {
            kind: *kind,
            child: child.as_ref().map(|c| Box::new(rebuild(c, target, counter, with))),
        },
        Node::Sum(cs) => Node::Sum(cs.iter().map(|c| rebuild(c, target, counter, with)).collect()),
        Node::Product(cs) => Node::Product(cs.iter().map(|c| rebuild(c, target, counter, with)).collect()),
        Node::Scale(c) => Node::scale(rebuild(c, target, counter, with)),
    }
}

/// Copy of `root` with the pre-order node `idx` replaced.
fn replace(root: &Node, idx: usize, new: Node) -> Node {
    rebuild(root, idx, &mut 0, &mut Some(new))
}

fn pick<T: Copy>(v: &[T], rng: &mut ChaCha8Rng) -> Option<T> {
    v.choose(rng).copied()
}

fn indices(root: &Node, pred: impl Fn(&Node) -> bool) -> Vec<usize> {
    nodes(root).iter().enumerate().filter(|(_, n)| pred(n)).map(|(i, _)| i).collect()
}

fn random_form(rng: &mut ChaCha8Rng) -> FormKind {
    match FORMS[rng.gen_range(0..FORMS.len())] {
        FormKind::Poly { .. } => FormKind::Poly {
            degree: rng.gen_range(1..=MAX_POLY_DEGREE),
        },
        f => f,
    }
}

fn random_warp(rng: &mut ChaCha8Rng) -> WarpKind {
    match WARPS[rng.gen_range(0..WARPS.len())] {
        WarpKind::ArctanLayers { .. } => WarpKind::ArctanLayers {
            depth: rng.gen_range(1..=MAX_ARCTAN_DEPTH),
        },
        w => w,
    }
}

fn same_kind(a: FormKind, b: FormKind) -> bool {
    std::mem::discriminant(&a) == std::mem::discriminant(&b)
}

/// One edit of `a` (with `b` as the crossover donor). `None` when the
/// operator does not apply.
fn apply(op: MutationOp, a: &Node, b: &Node, rng: &mut ChaCha8Rng) -> Option<Node> {
    let all = nodes(a);
    match op {
        MutationOp::SwapForm => {
            let i = pick(&indices(a, |n| matches!(n, Node::Form { child: Some(_), .. })), rng)?;
            let Node::Form { kind, child } = all[i] else { unreachable!() };
            let mut new = random_form(rng);
            while same_kind(new, *kind) {
                new = random_form(rng);
            }
            Some(replace(a, i, Node::Form { kind: new, child: child.clone() }))
        }
        MutationOp::InsertWarp => {
            let i = pick(&indices(a, |n| matches!(n, Node::Input | Node::Warp { .. })), rng)?;
            Some(replace(a, i, Node::warp(random_warp(rng), all[i].clone())))
        }
        MutationOp::DeleteWarp => {
            let i = pick(&indices(a, |n| matches!(n, Node::Warp { .. })), rng)?;
            let Node::Warp { child, .. } = all[i] else { unreachable!() };
            Some(replace(a, i, (**child).clone()))
        }
        MutationOp::ChangeCombinator => {
            let combos = indices(a, |n| matches!(n, Node::Sum(_) | Node::Product(_)));
            if !combos.is_empty() && rng.gen_bool(0.5) {
                let i = pick(&combos, rng)?;
                let flipped = match all[i] {
                    Node::Sum(cs) => Node::Product(cs.clone()),
                    Node::Product(cs) => Node::Sum(cs.clone()),
                    _ => unreachable!(),
                };
                Some(replace(a, i, flipped))
            } else {
                // Join a kernel subtree with a fresh form over `ard`.
                let i = pick(&indices(a, |n| n.is_kernel()), rng)?;
                let fresh = Node::form(random_form(rng), Node::warp(WarpKind::Ard, Node::Input));
                let pair = vec![all[i].clone(), fresh];
                Some(replace(a, i, if rng.gen_bool(0.5) { Node::Sum(pair) } else { Node::Product(pair) }))
            }
        }
        MutationOp::PerturbConstant => {
            let i = pick(
                &indices(a, |n| {
                    matches!(n, Node::Form { kind: FormKind::Poly { .. }, .. } | Node::Warp { kind: WarpKind::ArctanLayers { .. }, .. })
                }),
                rng,
            )?;
            Some(match all[i] {
                Node::Form {
                    kind: FormKind::Poly { degree },
                    child,
                } => {
                    let mut d = rng.gen_range(1..=MAX_POLY_DEGREE);
                    while d == *degree {
                        d = rng.gen_range(1..=MAX_POLY_DEGREE);
                    }
                    replace(a, i, Node::Form { kind: FormKind::Poly { degree: d }, child: child.clone() })
                }
                Node::Warp {
                    kind: WarpKind::ArctanLayers { depth },
                    child,
                } => {
                    let mut d = rng.gen_range(1..=MAX_ARCTAN_DEPTH);
                    while d == *depth {
                        d = rng.gen_range(1..=MAX_ARCTAN_DEPTH);
                    }
                    replace(a, i, Node::warp(WarpKind::ArctanLayers { depth: d }, (**child).clone()))
                }
                _ => unreachable!(),
            })
        }
        MutationOp::Crossover => {
            let targets: Vec<usize> = indices(a, |n| n.is_kernel()).into_iter().filter(|&i| i > 0).collect();
            let i = pick(&targets, rng)?;
            let donors = nodes(b);
            let j = pick(&indices(b, |n| n.is_kernel()), rng)?;
            Some(replace(a, i, donors[j].clone()))
        }
    }
}

/// One mutation of a uniformly chosen parent. Retries up to 16 times for a
/// valid expression outside `population`; after that returns a clone of the
/// last parent, which de-duplication will reject.
pub fn mutate(population: &[KernelExpr], rng: &mut ChaCha8Rng) -> (KernelExpr, Option<MutationOp>) {
    assert!(!population.is_empty(), "mutation needs a parent");
    let seen: HashSet<String> = population.iter().map(|e| e.digest()).collect();
    let mut parent = &population[0];
    for _ in 0..MAX_TRIES {
        parent = population.choose(rng).expect("nonempty");
        let donor = population.choose(rng).expect("nonempty");
        let op = MutationOp::ALL[rng.gen_range(0..MutationOp::ALL.len())];
        let Some(root) = apply(op, parent.root(), donor.root(), rng) else { continue };
        let Ok(e) = KernelExpr::new(root) else { continue };
        if !seen.contains(&e.digest()) {
            return (e, Some(op));
        }
    }
    (parent.clone(), None)
}

/// Sum or product of two distinct members among the first `top_k`.
pub fn compose(top: &[KernelExpr], rng: &mut ChaCha8Rng) -> Option<KernelExpr> {
    if top.len() < 2 {
        return None;
    }
    for _ in 0..MAX_TRIES {
        let i = rng.gen_range(0..top.len());
        let mut j = rng.gen_range(0..top.len() - 1);
        if j >= i {
            j += 1;
        }
        let pair = vec![top[i].root().clone(), top[j].root().clone()];
        let root = if rng.gen_bool(0.5) { Node::Sum(pair) } else { Node::Product(pair) };
        if let Ok(e) = KernelExpr::new(root) {
            return Some(e);
        }
    }
    None
}

#[derive(Debug, Clone, Default)]
pub struct OfflineProposer;

impl Proposer for OfflineProposer {
    fn id(&self) -> String {
        "offline".into()
    }

    fn propose(&mut self, ctx: &ProposalContext) -> Vec<Proposal> {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let exprs: Vec<KernelExpr> = ctx.members.iter().map(|m| m.expr.clone()).collect();
        let mut out = Vec::with_capacity(2);
        if exprs.is_empty() {
            return out;
        }
        let (e, op) = mutate(&exprs, &mut rng);
        let mut p = Proposal::new(ctx.round, ProposalStage::Discovery, self.id());
        p.math_form = Some(describe(&e));
        p.dsl_text = Some(e.render());
        if op.is_none() {
            p.error = Some("no valid mutation found".into());
        }
        out.push(p);

        let top: Vec<KernelExpr> = exprs.iter().take(COMPOSE_TOP_K).cloned().collect();
        let mut p = Proposal::new(ctx.round, ProposalStage::Composition, self.id());
        match compose(&top, &mut rng) {
            Some(e) => {
                p.math_form = Some(describe(&e));
                p.dsl_text = Some(e.render());
            }
            None => p = p.failed(Outcome::ConversionFailed, "composition exceeds the node budget"),
        }
        if top.len() >= 2 {
            out.push(p);
        }
        out
    }
}
