//! The optimization loop: propose, validate, fit, select, acquire,
//! evaluate, discard, truncate.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acquisition::{optimize_acqf, sobol_points, AcqError};
use crate::dsl::{BaseKernel, KernelExpr};
use crate::gp::{fit_gp, Dataset, FittedGP, GpError};
use crate::harness::runlog::{
    truncate_log, Header, LogError, LogRecord, PhaseTimings, RoundRecord, RunLogWriter, ScoreEntry, Summary, LOG_SCHEMA,
};
use crate::harness::{builtin_objective, ConfigError, Objective, ObjectiveError, PluginObjective, ProposerKind, RunConfig};
use crate::proposer::{
    check_composition_root, describe, HttpProvider, LlmProposer, MemberView, NullProposer, OfflineProposer, Origin,
    Outcome, Proposal, ProposalContext, ProposalStage, Proposer, ProviderError,
};
use crate::selection::{rank, score_fitted, select_best, Candidate, Metric, Score};
use crate::validation::{check_psd, check_shape_agnostic, validate_and_fit_with, ValidationStats};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("objective: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("proposer: {0}")]
    Provider(#[from] ProviderError),
    #[error("initial kernel {name} failed validation: {detail}")]
    InitialKernel { name: String, detail: String },
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Acquisition(#[from] AcqError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("objective has dimension {got}, config says {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Seed for one random stream, derived from the master seed so that
/// streams are independent of each other and of execution order.
pub fn derive_seed(master: u64, stream: &str, round: usize, extra: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stream.as_bytes());
    h.update([0u8]);
    h.update((round as u64).to_le_bytes());
    h.update(extra.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub expr: KernelExpr,
    pub digest: String,
    pub origin: Origin,
    pub born_round: usize,
    pub fail_count: u32,
    /// Position in insertion order over the whole run; breaks score ties.
    pub insertion: u64,
    pub math_form: String,
    pub last_score: Option<Score>,
}

impl Member {
    pub fn new(expr: KernelExpr, origin: Origin, born_round: usize, insertion: u64, math_form: String) -> Self {
        Self {
            digest: expr.digest(),
            expr,
            origin,
            born_round,
            fail_count: 0,
            insertion,
            math_form,
            last_score: None,
        }
    }

    fn candidate(&self) -> Candidate<'_> {
        Candidate {
            digest: &self.digest,
            insertion: self.insertion,
            score: self.last_score.as_ref().map(|s| s.value),
        }
    }
}

/// The starting kernels. Linear and periodic are left out.
pub fn initial_population() -> Vec<KernelExpr> {
    BaseKernel::INITIAL.iter().map(|b| b.expr()).collect()
}

fn initial_members(round: usize, next_insertion: &mut u64) -> Vec<Member> {
    initial_population()
        .into_iter()
        .map(|e| {
            let form = describe(&e);
            let m = Member::new(e, Origin::Initial, round, *next_insertion, form);
            *next_insertion += 1;
            m
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiscardEffect {
    pub removed: Vec<String>,
    pub reset: bool,
}

/// Updates fail counts after `selected` was used for a batch. Non-initial
/// kernels go on their first miss, initial ones after `patience` misses in
/// a row. An emptied population is refilled with the initial kernels.
pub fn apply_discard(
    population: &mut Vec<Member>,
    selected: &str,
    improved: bool,
    patience: u32,
    round: usize,
    next_insertion: &mut u64,
) -> DiscardEffect {
    let mut effect = DiscardEffect::default();
    let Some(i) = population.iter().position(|m| m.digest == selected) else {
        return effect;
    };
    if improved {
        population[i].fail_count = 0;
    } else {
        let m = &mut population[i];
        m.fail_count += 1;
        if m.origin != Origin::Initial || m.fail_count >= patience {
            effect.removed.push(m.digest.clone());
            population.remove(i);
        }
    }
    if population.is_empty() {
        *population = initial_members(round, next_insertion);
        effect.reset = true;
    }
    effect
}

/// Keeps the `cap` best members by score; returns the digests dropped.
pub fn truncate_population(population: &mut Vec<Member>, cap: usize) -> Vec<String> {
    sort_best_first(population);
    if population.len() <= cap {
        return Vec::new();
    }
    population.split_off(cap).into_iter().map(|m| m.digest).collect()
}

fn sort_best_first(population: &mut [Member]) {
    population.sort_by(|a, b| rank(&a.candidate(), &b.candidate()));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Rounds completed.
    pub round: usize,
    pub x: Vec<Vec<f64>>,
    /// Objective values in the maximization convention.
    pub y: Vec<f64>,
    pub population: Vec<Member>,
    pub next_insertion: u64,
    /// Best of `y`.
    pub incumbent: f64,
    /// Digests that passed validation in this run.
    pub validated: BTreeSet<String>,
    /// Every proposal made, accepted or not.
    pub archive: Vec<Proposal>,
    pub stats: ValidationStats,
}

impl RunState {
    pub fn dataset(&self) -> Result<Dataset, GpError> {
        let dim = self.x.first().map_or(0, Vec::len);
        let x = DMatrix::from_fn(self.x.len(), dim, |i, j| self.x[i][j]);
        Dataset::new(x, self.y.clone())
    }

    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.y.iter().enumerate() {
            if *v > self.y[best] {
                best = i;
            }
        }
        best
    }
}

/// Final result of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best_x: Vec<f64>,
    /// In the objective's own direction.
    pub best_value: f64,
    pub evaluations: usize,
    pub state: RunState,
    /// False when the run stopped early on request.
    pub finished: bool,
}

fn build_objective(cfg: &RunConfig) -> Result<Box<dyn Objective>, EvolutionError> {
    let o = &cfg.objective;
    if o.name == "plugin" {
        let p = PluginObjective::new(
            o.command.clone(),
            o.dim,
            o.direction,
            Duration::from_secs_f64(o.timeout_secs.max(0.0)),
        )
        .map_err(ObjectiveError::from)?;
        Ok(Box::new(p))
    } else {
        Ok(Box::new(builtin_objective(&o.name, o.dim, o.seed)?))
    }
}

/// The API key is read from the environment variable named in the config.
fn build_proposer(cfg: &RunConfig) -> Result<Box<dyn Proposer>, EvolutionError> {
    let p = &cfg.proposer;
    Ok(match p.kind {
        ProposerKind::Offline => Box::new(OfflineProposer),
        ProposerKind::None => Box::new(NullProposer),
        ProposerKind::Llm => {
            let provider = HttpProvider::from_env(
                &p.endpoint,
                &p.model,
                &p.api_key_env,
                Duration::from_secs_f64(p.timeout_secs.max(0.0)),
            )?;
            Box::new(LlmProposer::new(Box::new(provider), p.llm.clone()))
        }
    })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub struct Engine {
    cfg: RunConfig,
    objective: Box<dyn Objective>,
    proposer: Box<dyn Proposer>,
    pool: rayon::ThreadPool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("objective", &self.objective.name())
            .field("proposer", &self.proposer.id())
            .finish()
    }
}

impl Engine {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, EvolutionError> {
        cfg.check()?;
        let objective = build_objective(cfg)?;
        let proposer = build_proposer(cfg)?;
        Self::new(cfg.clone(), objective, proposer)
    }

    pub fn new(cfg: RunConfig, objective: Box<dyn Objective>, proposer: Box<dyn Proposer>) -> Result<Self, EvolutionError> {
        cfg.check()?;
        if objective.dim() != cfg.objective.dim {
            return Err(EvolutionError::Dimension {
                expected: cfg.objective.dim,
                got: objective.dim(),
            });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.workers)
            .build()
            .map_err(|e| EvolutionError::Checkpoint(format!("worker pool: {e}")))?;
        Ok(Self {
            cfg,
            objective,
            proposer,
            pool,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn dim(&self) -> usize {
        self.cfg.objective.dim
    }

    fn seed(&self, stream: &str, round: usize, extra: &str) -> u64 {
        derive_seed(self.cfg.seed, stream, round, extra)
    }

    fn evaluate(&mut self, points: &DMatrix<f64>) -> Result<Vec<f64>, EvolutionError> {
        let raw = self.objective.evaluate(points)?;
        if raw.len() != points.nrows() {
            return Err(ObjectiveError::Arguments(format!("{} values for {} points", raw.len(), points.nrows())).into());
        }
        Ok(raw)
    }

    /// Validates the initial kernels, evaluates the initial design, and
    /// returns round 0 with its log header.
    pub fn init_state(&mut self) -> Result<(RunState, Header), EvolutionError> {
        let mut validated = BTreeSet::new();
        for (b, e) in BaseKernel::INITIAL.iter().zip(initial_population()) {
            let seed = self.seed("validate", 0, &e.digest());
            let agn = check_shape_agnostic(&e);
            let v = if agn.passed {
                check_psd(&e, self.cfg.run.psd_param_samples, self.cfg.run.psd_point_samples, seed)
            } else {
                agn
            };
            if !v.passed {
                return Err(EvolutionError::InitialKernel {
                    name: b.name().into(),
                    detail: v.detail,
                });
            }
            validated.insert(e.digest());
        }
        let x0 = sobol_points(self.cfg.run.initial_points, self.dim(), Some(self.seed("init", 0, "")))?;
        let raw = self.evaluate(&x0)?;
        let dir = self.objective.direction();
        let y: Vec<f64> = raw.iter().map(|v| dir.to_internal(*v)).collect();
        let mut next_insertion = 0;
        let population = initial_members(0, &mut next_insertion);
        let state = RunState {
            round: 0,
            x: rows(&x0),
            incumbent: y.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            y,
            population,
            next_insertion,
            validated,
            archive: Vec::new(),
            stats: ValidationStats::default(),
        };
        let header = Header {
            schema: LOG_SCHEMA,
            config: self.cfg.clone(),
            objective: self.objective.name().to_string(),
            dim: self.dim(),
            direction: dir,
            proposer: self.proposer.id(),
            init_x: state.x.clone(),
            init_y: raw,
            initial_population: state.population.iter().map(|m| m.digest.clone()).collect(),
        };
        Ok((state, header))
    }

    /// One round. `state` is left untouched; on error nothing is committed.
    pub fn step(&mut self, state: &RunState) -> Result<(RunState, RoundRecord), EvolutionError> {
        let mut s = state.clone();
        let t = s.round + 1;
        let dim = self.dim();
        let data = s.dataset()?;
        let fit_opts = self.cfg.run.fit_options();
        let metric: Metric = self.cfg.run.metric.effective(dim, self.cfg.run.dim_threshold);
        let mut timings = PhaseTimings::default();

        // Proposals.
        sort_best_first(&mut s.population);
        let ctx = ProposalContext {
            round: t,
            members: s
                .population
                .iter()
                .map(|m| MemberView {
                    expr: m.expr.clone(),
                    math_form: m.math_form.clone(),
                    score: m.last_score.as_ref().map(|sc| sc.value),
                    origin: m.origin,
                })
                .collect(),
            seed: self.seed("propose", t, ""),
        };
        let clock = Instant::now();
        let mut proposals = self.proposer.propose(&ctx);
        timings.proposer = clock.elapsed().as_secs_f64();

        let mut trial_fits: BTreeMap<String, FittedGP> = BTreeMap::new();
        let clock = Instant::now();
        for p in &mut proposals {
            p.round = t;
            match p.outcome {
                Outcome::ConversionFailed => {
                    s.stats.record_conversion_failure();
                    continue;
                }
                Outcome::Pending => {}
                _ => continue,
            }
            let Some(text) = p.dsl_text.clone() else {
                p.outcome = Outcome::ConversionFailed;
                p.error.get_or_insert_with(|| "no DSL text".into());
                s.stats.record_conversion_failure();
                continue;
            };
            let expr: KernelExpr = match text.parse() {
                Ok(e) => e,
                Err(e) => {
                    p.outcome = Outcome::ConversionFailed;
                    p.error = Some(format!("{e}"));
                    s.stats.record_conversion_failure();
                    continue;
                }
            };
            if p.stage == ProposalStage::Composition {
                if let Err(e) = check_composition_root(&expr) {
                    p.outcome = Outcome::Rejected;
                    p.error = Some(e);
                    continue;
                }
            }
            let digest = expr.digest();
            if s.population.iter().any(|m| m.digest == digest) {
                p.outcome = Outcome::Duplicate;
                continue;
            }
            let seed = self.seed("fit", t, &digest);
            let psd = (self.cfg.run.psd_param_samples, self.cfg.run.psd_point_samples);
            let (verdict, fit) = validate_and_fit_with(&expr, &data, &fit_opts, psd, seed);
            s.stats.record(&verdict);
            p.outcome = if verdict.passed { Outcome::Accepted } else { Outcome::Rejected };
            if verdict.passed {
                s.validated.insert(digest.clone());
                let origin = match p.stage {
                    ProposalStage::Discovery => Origin::Discovered,
                    ProposalStage::Composition => Origin::Composed,
                };
                let form = p.math_form.clone().unwrap_or_else(|| describe(&expr));
                s.population.push(Member::new(expr, origin, t, s.next_insertion, form));
                s.next_insertion += 1;
                if let Some(gp) = fit {
                    trial_fits.insert(digest, gp);
                }
            }
            p.verdict = Some(verdict);
        }
        timings.validation = clock.elapsed().as_secs_f64();

        // Fit every member that has no fit from this round yet.
        let clock = Instant::now();
        let todo: Vec<(usize, KernelExpr, String)> = s
            .population
            .iter()
            .enumerate()
            .filter(|(_, m)| !trial_fits.contains_key(&m.digest) && s.validated.contains(&m.digest))
            .map(|(i, m)| (i, m.expr.clone(), m.digest.clone()))
            .collect();
        let master = self.cfg.seed;
        let fitted: Vec<(usize, f64, Result<FittedGP, GpError>)> = self.pool.install(|| {
            todo.par_iter()
                .map(|(i, e, d)| {
                    let start = Instant::now();
                    let r = fit_gp(&data, e, &fit_opts, derive_seed(master, "fit", t, d));
                    (*i, start.elapsed().as_secs_f64(), r)
                })
                .collect()
        });
        timings.fit = clock.elapsed().as_secs_f64();

        let mut fits: Vec<Option<FittedGP>> = vec![None; s.population.len()];
        let mut entries: Vec<ScoreEntry> = s
            .population
            .iter()
            .map(|m| ScoreEntry {
                digest: m.digest.clone(),
                dsl: m.expr.render(),
                origin: m.origin,
                score: None,
                fit_seconds: 0.0,
                error: None,
            })
            .collect();
        for (i, m) in s.population.iter().enumerate() {
            if let Some(gp) = trial_fits.remove(&m.digest) {
                fits[i] = Some(gp);
            }
        }
        for (i, secs, r) in fitted {
            entries[i].fit_seconds = secs;
            match r {
                Ok(gp) => fits[i] = Some(gp),
                Err(e) => entries[i].error = Some(e.to_string()),
            }
        }
        for (i, m) in s.population.iter_mut().enumerate() {
            m.last_score = match &fits[i] {
                Some(gp) => match score_fitted(gp, metric) {
                    Ok(sc) if sc.value.is_finite() => Some(sc),
                    Ok(_) => {
                        entries[i].error = Some("non-finite score".into());
                        None
                    }
                    Err(e) => {
                        entries[i].error = Some(e.to_string());
                        None
                    }
                },
                None => None,
            };
            entries[i].score = m.last_score.as_ref().map(|sc| sc.value);
        }

        // Selection and acquisition.
        let candidates: Vec<Candidate> = s.population.iter().map(Member::candidate).collect();
        let selected = select_best(&candidates)
            .ok()
            .filter(|&i| s.population[i].last_score.is_some() && fits[i].is_some());
        let clock = Instant::now();
        let q = self.cfg.acquisition.q;
        let mut fallback = false;
        let batch = match selected {
            Some(i) => {
                let gp = fits[i].as_ref().expect("selected member was fitted");
                match optimize_acqf(gp, &self.cfg.acquisition, &data, self.seed("acquire", t, "")) {
                    Ok(b) => b,
                    Err(e) => {
                        log::warn!("round {t}: acquisition failed ({e}); using space-filling points");
                        fallback = true;
                        sobol_points(q, dim, Some(self.seed("fallback", t, "")))?
                    }
                }
            }
            None => {
                log::warn!("round {t}: no kernel could be fitted; using space-filling points");
                fallback = true;
                sobol_points(q, dim, Some(self.seed("fallback", t, "")))?
            }
        };
        timings.acquisition = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let raw = self.evaluate(&batch)?;
        timings.oracle = clock.elapsed().as_secs_f64();
        let dir = self.objective.direction();
        let internal: Vec<f64> = raw.iter().map(|v| dir.to_internal(*v)).collect();
        let batch_best = internal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let improved = batch_best > s.incumbent;

        let selected_digest = selected.map(|i| s.population[i].digest.clone());
        let selected_dsl = selected.map(|i| s.population[i].expr.render());
        let effect = match &selected_digest {
            Some(d) => apply_discard(
                &mut s.population,
                d,
                improved,
                self.cfg.run.patience,
                t,
                &mut s.next_insertion,
            ),
            None => DiscardEffect::default(),
        };
        let truncated = truncate_population(&mut s.population, self.cfg.run.population_cap);

        let batch_rows = rows(&batch);
        s.x.extend(batch_rows.iter().cloned());
        s.y.extend(internal);
        s.incumbent = s.incumbent.max(batch_best);
        s.round = t;
        s.archive.extend(proposals.iter().cloned());

        let record = RoundRecord {
            round: t,
            metric,
            selected: selected_digest,
            selected_dsl,
            scores: entries,
            proposals,
            batch: batch_rows,
            values: raw,
            improved,
            incumbent: dir.to_raw(s.incumbent),
            removed: effect.removed,
            truncated,
            reset: effect.reset,
            fallback,
            population: s.population.iter().map(|m| m.digest.clone()).collect(),
            validation: s.stats.clone(),
            timings,
        };
        Ok((s, record))
    }

    fn outcome(&self, state: RunState, finished: bool) -> RunOutcome {
        let i = state.best_index();
        RunOutcome {
            best_x: state.x[i].clone(),
            best_value: self.objective.direction().to_raw(state.y[i]),
            evaluations: state.y.len(),
            state,
            finished,
        }
    }

    /// Runs every round without touching the file system.
    pub fn run_in_memory(&mut self) -> Result<(Header, Vec<RoundRecord>, RunOutcome), EvolutionError> {
        let (mut state, header) = self.init_state()?;
        let mut records = Vec::new();
        while state.round < self.cfg.rounds() {
            let (next, rec) = self.step(&state)?;
            state = next;
            records.push(rec);
        }
        Ok((header, records, self.outcome(state, true)))
    }

    /// Fresh run writing the log and checkpoint under `cfg.output.dir`.
    /// With `stop_after`, returns once that many rounds are complete.
    pub fn start(&mut self, stop_after: Option<usize>) -> Result<RunOutcome, EvolutionError> {
        let (state, header) = self.init_state()?;
        let mut log = RunLogWriter::create(&self.cfg.output.log_path())?;
        log.write(&LogRecord::Header(Box::new(header)))?;
        write_checkpoint(&self.cfg.output.checkpoint_path(), &self.cfg, &state)?;
        self.drive(state, &mut log, stop_after)
    }

    /// Continues from `state`, appending to the existing log.
    pub fn continue_from(&mut self, state: RunState, stop_after: Option<usize>) -> Result<RunOutcome, EvolutionError> {
        let path = self.cfg.output.log_path();
        truncate_log(&path, state.round)?;
        let mut log = RunLogWriter::append(&path)?;
        self.drive(state, &mut log, stop_after)
    }

    fn drive(
        &mut self,
        mut state: RunState,
        log: &mut RunLogWriter,
        stop_after: Option<usize>,
    ) -> Result<RunOutcome, EvolutionError> {
        let total = self.cfg.rounds();
        let ckpt = self.cfg.output.checkpoint_path();
        while state.round < total {
            if stop_after.is_some_and(|k| state.round >= k) {
                return Ok(self.outcome(state, false));
            }
            let (next, rec) = self.step(&state)?;
            log::info!(
                "round {}/{}: incumbent {:.6}, selected {}",
                rec.round,
                total,
                rec.incumbent,
                rec.selected_dsl.as_deref().unwrap_or("-")
            );
            log.write(&LogRecord::Round(Box::new(rec)))?;
            write_checkpoint(&ckpt, &self.cfg, &next)?;
            state = next;
        }
        let out = self.outcome(state, true);
        log.write(&LogRecord::Summary(Summary {
            rounds: out.state.round,
            evaluations: out.evaluations,
            best_value: out.best_value,
            best_x: out.best_x.clone(),
        }))?;
        Ok(out)
    }
}

/// Runs `cfg` from scratch, writing under `cfg.output.dir`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, EvolutionError> {
    Engine::from_config(cfg)?.start(None)
}

/// Continues the run saved at `checkpoint`. The log is expected next to it.
pub fn resume(checkpoint: &Path, stop_after: Option<usize>) -> Result<RunOutcome, EvolutionError> {
    let ck = read_checkpoint(checkpoint)?;
    let mut cfg = ck.config;
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        cfg.output.dir = dir.to_path_buf();
    }
    Engine::from_config(&cfg)?.continue_from(ck.state, stop_after)
}
