//! Sources of new kernel candidates.
//!
//! Every proposer produces up to one discovery and one composition
//! proposal per round, in that order. Discovery yields a mathematical
//! description first and DSL text second; composition combines two
//! existing members at the root.

mod describe;
mod diversity;
mod llm;
mod offline;
mod provider;
mod templates;

use serde::{Deserialize, Serialize};

use crate::dsl::KernelExpr;
use crate::validation::Verdict;

pub use describe::describe;
pub use diversity::{gram_cosine_distance, DiversityError, REFERENCE_POINTS};
pub use llm::{check_composition_root, extract_blocks, extract_formulas, ConversionFailed, LlmConfig, LlmProposer};
pub use offline::{MutationOp, OfflineProposer};
pub use provider::{ChatMessage, Completion, HttpProvider, MockProvider, Provider, ProviderError};
pub use templates::{render, PromptBundle, PromptRole, TEMPLATE_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Initial,
    Discovered,
    Composed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStage {
    Discovery,
    Composition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Produced DSL text; not yet judged.
    Pending,
    Accepted,
    Duplicate,
    Rejected,
    ConversionFailed,
    ProviderFailed,
}

/// One attempt to add a kernel, kept in the run archive whatever happens
/// to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub round: usize,
    pub stage: ProposalStage,
    pub math_form: Option<String>,
    pub dsl_text: Option<String>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub provider: String,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub latency_ms: u64,
}

impl Proposal {
    pub fn new(round: usize, stage: ProposalStage, provider: impl Into<String>) -> Self {
        Self {
            round,
            stage,
            math_form: None,
            dsl_text: None,
            outcome: Outcome::Pending,
            verdict: None,
            error: None,
            provider: provider.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
            latency_ms: 0,
        }
    }

    pub fn failed(mut self, outcome: Outcome, error: impl Into<String>) -> Self {
        self.outcome = outcome;
        self.error = Some(error.into());
        self
    }
}

/// What a proposer may see of one population member. No observations.
#[derive(Debug, Clone)]
pub struct MemberView {
    pub expr: KernelExpr,
    pub math_form: String,
    pub score: Option<f64>,
    pub origin: Origin,
}

#[derive(Debug, Clone)]
pub struct ProposalContext {
    pub round: usize,
    /// Members ordered best first.
    pub members: Vec<MemberView>,
    /// Per-round seed for proposers that draw random numbers.
    pub seed: u64,
}

impl ProposalContext {
    pub fn top(&self, k: usize) -> &[MemberView] {
        &self.members[..k.min(self.members.len())]
    }
}

pub trait Proposer: Send {
    fn id(&self) -> String;
    /// Discovery first, then composition; either may be missing.
    fn propose(&mut self, ctx: &ProposalContext) -> Vec<Proposal>;
}

/// Proposes nothing; the run reduces to search over the fixed initial
/// population.
#[derive(Debug, Clone, Default)]
pub struct NullProposer;

impl Proposer for NullProposer {
    fn id(&self) -> String {
        "none".into()
    }

    fn propose(&mut self, _ctx: &ProposalContext) -> Vec<Proposal> {
        Vec::new()
    }
}
