//! Proposals from a chat model: formula discovery, conversion to the DSL,
//! and pairwise composition.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::describe::describe;
use super::provider::{ChatMessage, Completion, Provider};
use super::templates::{render, PromptRole, CONSTRAINTS, GRAMMAR, GUIDANCE};
use super::{MemberView, Outcome, Proposal, ProposalContext, ProposalStage, Proposer};
use crate::dsl::{parse, KernelExpr, Node};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Formulas requested per discovery call.
    pub discoveries: usize,
    /// Members shown to the composition prompt.
    pub top_k: usize,
    pub guidance: bool,
    pub discovery_temperature: f64,
    pub conversion_temperature: f64,
    /// Extra conversion attempts after a parse failure.
    pub repairs: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            discoveries: 1,
            top_k: 5,
            guidance: true,
            discovery_temperature: 0.7,
            conversion_temperature: 0.2,
            repairs: 2,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("no parseable expression after {attempts} attempts: {last_error}")]
pub struct ConversionFailed {
    pub attempts: usize,
    pub last_error: String,
}

/// Bodies of fenced blocks whose info string is `tag`.
pub fn extract_blocks(text: &str, tag: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let t = line.trim_start();
        let Some(info) = t.strip_prefix("```") else { continue };
        let matched = info.trim().eq_ignore_ascii_case(tag);
        let mut body = Vec::new();
        let mut closed = false;
        for l in lines.by_ref() {
            if l.trim_start().starts_with("```") {
                closed = true;
                break;
            }
            body.push(l);
        }
        if matched && closed {
            let b = body.join("\n").trim().to_string();
            if !b.is_empty() {
                out.push(b);
            }
        }
    }
    out
}

pub fn extract_formulas(text: &str) -> Vec<String> {
    extract_blocks(text, "formula")
}

/// Candidate DSL programs in a response: `dsl` blocks, then untagged
/// blocks, then individual lines.
fn dsl_candidates(text: &str) -> Vec<String> {
    let mut c = extract_blocks(text, "dsl");
    c.extend(extract_blocks(text, ""));
    c.extend(text.lines().map(|l| l.trim().trim_matches('`').to_string()).filter(|l| !l.is_empty()));
    c
}

/// Composition results must join exactly two kernels at the root.
pub fn check_composition_root(expr: &KernelExpr) -> Result<(), String> {
    match expr.root() {
        Node::Sum(cs) | Node::Product(cs) if cs.len() == 2 => Ok(()),
        Node::Sum(cs) | Node::Product(cs) => Err(format!("root combines {} kernels, expected 2", cs.len())),
        _ => Err("root must be sum or product".into()),
    }
}

fn population_block(members: &[MemberView], as_dsl: bool) -> String {
    members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let score = m.score.map_or("unscored".to_string(), |s| format!("{s:.4}"));
            let body = if as_dsl { m.expr.render() } else { m.math_form.clone() };
            format!("{}. [score {score}] {body}", i + 1)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct LlmProposer {
    provider: Box<dyn Provider>,
    cfg: LlmConfig,
}

struct Accounting {
    prompt_tokens: u64,
    completion_tokens: u64,
    start: Instant,
}

impl Accounting {
    fn new() -> Self {
        Self {
            prompt_tokens: 0,
            completion_tokens: 0,
            start: Instant::now(),
        }
    }

    fn add(&mut self, c: &Completion) {
        self.prompt_tokens += c.prompt_tokens;
        self.completion_tokens += c.completion_tokens;
    }

    fn stamp(&self, p: &mut Proposal) {
        p.prompt_tokens = self.prompt_tokens;
        p.completion_tokens = self.completion_tokens;
        p.latency_ms = self.start.elapsed().as_millis() as u64;
    }
}

impl LlmProposer {
    pub fn new(provider: Box<dyn Provider>, cfg: LlmConfig) -> Self {
        Self { provider, cfg }
    }

    fn ask(&self, prompt: &str, temperature: f64, acct: &mut Accounting) -> Result<String, String> {
        let c = self
            .provider
            .complete(&[ChatMessage::user(prompt)], temperature)
            .map_err(|e| e.to_string())?;
        acct.add(&c);
        Ok(c.text)
    }

    pub fn discovery_prompt(&self, members: &[MemberView]) -> String {
        let pop = population_block(members, false);
        let n = self.cfg.discoveries.to_string();
        let guidance = if self.cfg.guidance { GUIDANCE } else { "" };
        render(
            PromptRole::Discovery,
            &[("population", &pop), ("n", &n), ("constraints", CONSTRAINTS), ("guidance", guidance)],
        )
        .expect("discovery template slots")
        .rendered
    }

    pub fn propose_discovery(&self, members: &[MemberView]) -> Result<Vec<String>, String> {
        let mut acct = Accounting::new();
        let text = self.ask(&self.discovery_prompt(members), self.cfg.discovery_temperature, &mut acct)?;
        Ok(extract_formulas(&text))
    }

    fn conversion_prompt(&self, formula: &str, error: &str) -> String {
        render(
            PromptRole::Conversion,
            &[("formula", formula), ("grammar", GRAMMAR), ("constraints", CONSTRAINTS), ("error", error)],
        )
        .expect("conversion template slots")
        .rendered
    }

    fn convert_with(&self, formula: &str, acct: &mut Accounting) -> Result<(KernelExpr, String), ConversionFailed> {
        let mut error = String::new();
        let mut last_error = String::new();
        let attempts = 1 + self.cfg.repairs;
        for _ in 0..attempts {
            let text = self
                .ask(&self.conversion_prompt(formula, &error), self.cfg.conversion_temperature, acct)
                .map_err(|e| ConversionFailed {
                    attempts,
                    last_error: e,
                })?;
            let cands = dsl_candidates(&text);
            let mut first_err = None;
            for c in &cands {
                match parse(c) {
                    Ok(e) => return Ok((e, c.clone())),
                    Err(e) => {
                        first_err.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            last_error = first_err.unwrap_or_else(|| "response contained no expression".into());
            let shown = cands.first().cloned().unwrap_or_default();
            error = format!("Your previous answer `{shown}` was rejected: {last_error}. Correct it and reply with one ```dsl block.");
        }
        Err(ConversionFailed { attempts, last_error })
    }

    pub fn convert_to_dsl(&self, formula: &str) -> Result<KernelExpr, ConversionFailed> {
        self.convert_with(formula, &mut Accounting::new()).map(|(e, _)| e)
    }

    fn composition_prompt(&self, top: &[MemberView], error: &str) -> String {
        let pop = population_block(top, true);
        render(PromptRole::Composition, &[("population", &pop), ("grammar", GRAMMAR), ("error", error)])
            .expect("composition template slots")
            .rendered
    }

    /// Returns the composed expression, its DSL text, and the formula text
    /// (from the response or generated).
    pub fn propose_composition(&self, top: &[MemberView]) -> Result<(KernelExpr, String, String), ConversionFailed> {
        self.compose_with(top, &mut Accounting::new())
    }

    fn compose_with(&self, top: &[MemberView], acct: &mut Accounting) -> Result<(KernelExpr, String, String), ConversionFailed> {
        let attempts = 1 + self.cfg.repairs;
        if top.len() < 2 {
            return Err(ConversionFailed {
                attempts: 0,
                last_error: "need at least two members to compose".into(),
            });
        }
        let mut error = String::new();
        let mut last_error = String::new();
        for _ in 0..attempts {
            let text = self
                .ask(&self.composition_prompt(top, &error), self.cfg.conversion_temperature, acct)
                .map_err(|e| ConversionFailed {
                    attempts,
                    last_error: e,
                })?;
            let formula = extract_formulas(&text).into_iter().next();
            let mut parsed = None;
            let mut first_err = None;
            for c in dsl_candidates(&text) {
                match parse(&c) {
                    Ok(e) => {
                        parsed = Some((e, c));
                        break;
                    }
                    Err(e) => {
                        first_err.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            last_error = first_err.unwrap_or_else(|| "response contained no expression".into());
            if let Some((e, c)) = parsed {
                // A structurally wrong composition is final, not repaired.
                check_composition_root(&e).map_err(|m| ConversionFailed {
                    attempts,
                    last_error: m,
                })?;
                let f = formula.unwrap_or_else(|| describe(&e));
                return Ok((e, c, f));
            }
            error = format!("Your previous answer was rejected: {last_error}. Reply with one ```dsl block.");
        }
        Err(ConversionFailed { attempts, last_error })
    }
}

impl Proposer for LlmProposer {
    fn id(&self) -> String {
        self.provider.id()
    }

    fn propose(&mut self, ctx: &ProposalContext) -> Vec<Proposal> {
        let mut out = Vec::with_capacity(2);
        let id = self.provider.id();

        let mut acct = Accounting::new();
        let mut p = Proposal::new(ctx.round, ProposalStage::Discovery, id.clone());
        match self.ask(&self.discovery_prompt(&ctx.members), self.cfg.discovery_temperature, &mut acct) {
            Err(e) => p = p.failed(Outcome::ProviderFailed, e),
            Ok(text) => match extract_formulas(&text).into_iter().next() {
                None => p = p.failed(Outcome::ConversionFailed, "no formula block in response"),
                Some(f) => {
                    p.math_form = Some(f.clone());
                    match self.convert_with(&f, &mut acct) {
                        Ok((_, dsl)) => p.dsl_text = Some(dsl),
                        Err(e) => p = p.failed(Outcome::ConversionFailed, e.to_string()),
                    }
                }
            },
        }
        acct.stamp(&mut p);
        out.push(p);

        let top = ctx.top(self.cfg.top_k);
        if top.len() >= 2 {
            let mut acct = Accounting::new();
            let mut p = Proposal::new(ctx.round, ProposalStage::Composition, id);
            match self.compose_with(top, &mut acct) {
                Ok((_, dsl, f)) => {
                    p.math_form = Some(f);
                    p.dsl_text = Some(dsl);
                }
                Err(e) => p = p.failed(Outcome::ConversionFailed, e.to_string()),
            }
            acct.stamp(&mut p);
            out.push(p);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::BaseKernel;
    use crate::proposer::provider::MockProvider;
    use crate::proposer::Origin;

    fn members() -> Vec<MemberView> {
        BaseKernel::INITIAL
            .iter()
            .enumerate()
            .map(|(i, b)| MemberView {
                expr: b.expr(),
                math_form: describe(&b.expr()),
                score: Some(0.1 * (i + 1) as f64),
                origin: Origin::Initial,
            })
            .collect()
    }

    #[test]
    fn formula_extraction() {
        let one = "Idea:\n```formula\nk(x, x') = rbf * rq\n```\nthanks";
        assert_eq!(extract_formulas(one), vec!["k(x, x') = rbf * rq"]);
        assert!(extract_formulas("k(x,x') = rbf, no fences").is_empty());
        assert!(extract_formulas("```formula\nunterminated").is_empty());
    }

    #[test]
    fn conversion_and_repair() {
        let p = LlmProposer::new(
            Box::new(MockProvider::scripted(["```dsl\nproduct(matern52(ard), rq(ard))\n```"])),
            LlmConfig::default(),
        );
        let e = p.convert_to_dsl("product of Matern52 and RQ over shared ARD").unwrap();
        assert_eq!(e.render(), "product(matern52(ard), rq(ard))");

        let mock = MockProvider::scripted(["```dsl\nrbf(\n```", "```dsl\nrbf(ard)\n```"]);
        let p = LlmProposer::new(Box::new(mock), LlmConfig::default());
        assert_eq!(p.convert_to_dsl("rbf").unwrap().render(), "rbf(ard)");

        let p = LlmProposer::new(Box::new(MockProvider::with(|_| Ok("???".into()))), LlmConfig::default());
        let err = p.convert_to_dsl("gibberish").unwrap_err();
        assert_eq!(err.attempts, 3);
    }

    #[test]
    fn repair_prompt_carries_error() {
        let mock = std::sync::Arc::new(MockProvider::scripted(["```dsl\nrbf(\n```", "```dsl\nrbf(ard)\n```"]));
        let p = LlmProposer::new(Box::new(mock.clone()), LlmConfig::default());
        p.convert_to_dsl("rbf").unwrap();
        let reqs = mock.requests.lock().unwrap();
        assert!(reqs[1][0].content.contains("rbf("));
        assert!(reqs[1][0].content.contains("rejected"));
    }

    #[test]
    fn composition_root_rule() {
        let ok = LlmProposer::new(
            Box::new(MockProvider::scripted([
                "```dsl\nsum(scale(rbf(ard)), scale(product(matern52(ard(kumaraswamy_radial(center_scale))), poly(unit_direction(center_scale), degree=3))))\n```",
            ])),
            LlmConfig::default(),
        );
        let (e, _, f) = ok.propose_composition(&members()).unwrap();
        let Node::Sum(cs) = e.root() else { panic!() };
        let rbf = BaseKernel::Rbf.expr().digest();
        let bock = BaseKernel::Bock.expr().digest();
        let kids: Vec<String> = cs.iter().map(|c| KernelExpr::new(c.clone()).unwrap().digest()).collect();
        assert!(kids.contains(&rbf) && kids.contains(&bock));
        assert!(f.starts_with("k(x, x')"));

        let three = LlmProposer::new(
            Box::new(MockProvider::scripted(["```dsl\nsum(rbf(ard), rq(ard), matern52(ard))\n```"])),
            LlmConfig::default(),
        );
        assert!(three.propose_composition(&members()).unwrap_err().last_error.contains("3 kernels"));
    }

    #[test]
    fn proposer_orders_stages_and_degrades() {
        let mock = MockProvider::scripted([
            "```formula\nk = matern52 * rq\n```",
            "```dsl\nproduct(matern52(ard), rq(ard))\n```",
            "```dsl\nsum(scale(rbf(ard)), scale(rq(ard)))\n```",
        ]);
        let mut p = LlmProposer::new(Box::new(mock), LlmConfig::default());
        let ctx = ProposalContext {
            round: 3,
            members: members(),
            seed: 0,
        };
        let out = p.propose(&ctx);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].stage, ProposalStage::Discovery);
        assert_eq!(out[0].dsl_text.as_deref(), Some("product(matern52(ard), rq(ard))"));
        assert_eq!(out[1].stage, ProposalStage::Composition);
        for q in &out {
            assert!(q.dsl_text.is_none() || q.math_form.is_some());
        }
        // Exhausted provider: failures, not panics.
        let out = p.propose(&ctx);
        assert_eq!(out[0].outcome, Outcome::ProviderFailed);
        assert_eq!(out[1].outcome, Outcome::ConversionFailed);
    }

    #[test]
    fn guidance_block_is_optional() {
        let with = LlmProposer::new(Box::new(MockProvider::scripted(Vec::<String>::new())), LlmConfig::default());
        let without = LlmProposer::new(
            Box::new(MockProvider::scripted(Vec::<String>::new())),
            LlmConfig {
                guidance: false,
                ..Default::default()
            },
        );
        let first_line = GUIDANCE.lines().next().unwrap();
        assert!(with.discovery_prompt(&members()).contains(first_line));
        assert!(!without.discovery_prompt(&members()).contains(first_line));
    }
}
