//! Plain-text tables and machine-readable series built from a run log.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use crate::proposer::{Origin, Outcome};

use super::diagnostics::{boundary_hit_ratio, otsd};
use super::runlog::{PhaseTimings, RunLog};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub objective: String,
    pub direction: super::Direction,
    /// Evaluations after the initial design and after each round.
    pub evaluations: Vec<usize>,
    /// Best raw value at the same points.
    pub incumbent: Vec<f64>,
    pub selected: Vec<Option<String>>,
    pub boundary_hit_ratio: f64,
    pub otsd: f64,
}

pub fn series(log: &RunLog, boundary_tol: f64) -> Series {
    let mut evals = vec![log.header.init_x.len()];
    for r in &log.rounds {
        evals.push(evals.last().copied().unwrap_or(0) + r.batch.len());
    }
    let points = log.points();
    Series {
        objective: log.header.objective.clone(),
        direction: log.header.direction,
        evaluations: evals,
        incumbent: log.incumbent_trace(),
        selected: log.rounds.iter().map(|r| r.selected_dsl.clone()).collect(),
        boundary_hit_ratio: boundary_hit_ratio(&points, boundary_tol),
        otsd: otsd(&points),
    }
}

fn origin_name(o: Origin) -> &'static str {
    match o {
        Origin::Initial => "initial",
        Origin::Discovered => "discovered",
        Origin::Composed => "composed",
    }
}

#[derive(Default)]
struct KernelRow {
    dsl: String,
    origin: &'static str,
    selected: usize,
    improved: usize,
    last_score: Option<f64>,
    last_round: usize,
}

/// Renders every table. Output depends only on the log contents.
pub fn render(log: &RunLog, boundary_tol: f64) -> String {
    let h = &log.header;
    let s = series(log, boundary_tol);
    let mut out = String::new();
    let _ = writeln!(out, "objective   {} (D = {}, {:?})", h.objective, h.dim, h.direction);
    let _ = writeln!(out, "proposer    {}", h.proposer);
    let _ = writeln!(out, "seed        {}", h.config.seed);
    let _ = writeln!(
        out,
        "rounds      {} ({} evaluations)",
        log.rounds.len(),
        s.evaluations.last().copied().unwrap_or(0)
    );
    if let Some(sum) = &log.summary {
        let _ = writeln!(out, "best        {:.6}", sum.best_value);
    } else {
        let _ = writeln!(out, "best        {:.6} (run not finished)", s.incumbent.last().copied().unwrap_or(f64::NAN));
    }

    let _ = writeln!(out, "\n== incumbent trace ==");
    let _ = writeln!(out, "{:>5}  {:>6}  {:>14}  {:>8}  selected", "round", "evals", "incumbent", "improved");
    let _ = writeln!(out, "{:>5}  {:>6}  {:>14.6}  {:>8}  -", 0, s.evaluations[0], s.incumbent[0], "-");
    for (i, r) in log.rounds.iter().enumerate() {
        let sel = match (&r.selected_dsl, r.fallback) {
            (_, true) => "(space-filling fallback)".to_string(),
            (Some(d), false) => d.clone(),
            (None, false) => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{:>5}  {:>6}  {:>14.6}  {:>8}  {}",
            r.round,
            s.evaluations[i + 1],
            r.incumbent,
            if r.improved { "yes" } else { "no" },
            sel
        );
    }

    let mut rows: BTreeMap<String, KernelRow> = BTreeMap::new();
    for r in &log.rounds {
        for e in &r.scores {
            let row = rows.entry(e.digest.clone()).or_default();
            row.dsl = e.dsl.clone();
            row.origin = origin_name(e.origin);
            row.last_score = e.score;
            row.last_round = r.round;
        }
        if let Some(d) = &r.selected {
            let row = rows.entry(d.clone()).or_default();
            row.selected += 1;
            if r.improved {
                row.improved += 1;
            }
        }
    }
    let mut table: Vec<&KernelRow> = rows.values().collect();
    table.sort_by(|a, b| {
        b.selected
            .cmp(&a.selected)
            .then(b.last_round.cmp(&a.last_round))
            .then(a.dsl.cmp(&b.dsl))
    });
    let metric = log.rounds.last().map_or("-", |r| r.metric.name());
    let _ = writeln!(out, "\n== kernel scores ({metric}, lower is better; last round each kernel was scored) ==");
    let _ = writeln!(
        out,
        "{:>8}  {:>8}  {:>12}  {:>5}  {:<10}  kernel",
        "selected", "improved", "score", "round", "origin"
    );
    for r in table {
        let score = r.last_score.map_or("-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            out,
            "{:>8}  {:>8}  {:>12}  {:>5}  {:<10}  {}",
            r.selected, r.improved, score, r.last_round, r.origin, r.dsl
        );
    }

    let _ = writeln!(out, "\n== proposals ==");
    let mut outcomes: BTreeMap<&'static str, usize> = BTreeMap::new();
    for r in &log.rounds {
        for p in &r.proposals {
            let k = match p.outcome {
                Outcome::Pending => "pending",
                Outcome::Accepted => "accepted",
                Outcome::Duplicate => "duplicate",
                Outcome::Rejected => "rejected",
                Outcome::ConversionFailed => "conversion failed",
                Outcome::ProviderFailed => "provider failed",
            };
            *outcomes.entry(k).or_default() += 1;
        }
    }
    if outcomes.is_empty() {
        let _ = writeln!(out, "none");
    }
    for (k, v) in &outcomes {
        let _ = writeln!(out, "{k:<18} {v:>6}");
    }
    let stats = log.rounds.last().map(|r| r.validation.clone()).unwrap_or_default();
    let _ = writeln!(out, "\n== failure probability ==");
    let _ = writeln!(out, "attempted          {:>6}", stats.attempted);
    let _ = writeln!(out, "passed             {:>6}", stats.passed);
    let _ = writeln!(out, "failed: shape      {:>6}", stats.failed_agn);
    let _ = writeln!(out, "failed: psd        {:>6}", stats.failed_psd);
    let _ = writeln!(out, "failed: fit        {:>6}", stats.failed_fit);
    let _ = writeln!(out, "failed: conversion {:>6}", stats.failed_conversion);
    let _ = writeln!(out, "failure rate       {:>6.3}", stats.failure_rate());

    let mut t = PhaseTimings::default();
    for r in &log.rounds {
        t.add(&r.timings);
    }
    let total = t.total();
    let _ = writeln!(out, "\n== phase timings (seconds) ==");
    for (name, v) in [
        ("gp fitting", t.fit),
        ("proposer", t.proposer),
        ("validation", t.validation),
        ("acquisition", t.acquisition),
        ("oracle", t.oracle),
    ] {
        let share = if total > 0.0 { 100.0 * v / total } else { 0.0 };
        let _ = writeln!(out, "{name:<12} {v:>10.3}  {share:>5.1}%");
    }
    let _ = writeln!(out, "{:<12} {:>10.3}", "total", total);

    let _ = writeln!(out, "\n== diagnostics ==");
    let _ = writeln!(out, "boundary hit ratio {:.6} (tol {:e})", s.boundary_hit_ratio, boundary_tol);
    let _ = writeln!(out, "otsd               {:.6}", s.otsd);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::runlog::{Header, RoundRecord, LOG_SCHEMA};
    use crate::harness::{Direction, RunConfig};
    use crate::selection::Metric;
    use crate::validation::ValidationStats;

    #[test]
    fn tables_from_tiny_log() {
        let header = Header {
            schema: LOG_SCHEMA,
            config: RunConfig::default(),
            objective: "ackley".into(),
            dim: 2,
            direction: Direction::Minimize,
            proposer: "none".into(),
            init_x: vec![vec![0.0, 0.5], vec![0.5, 0.5]],
            init_y: vec![3.0, 2.0],
            initial_population: vec![],
        };
        let round = RoundRecord {
            round: 1,
            metric: Metric::LooCrps,
            selected: Some("d".into()),
            selected_dsl: Some("scale(rbf(ard))".into()),
            scores: vec![],
            proposals: vec![],
            batch: vec![vec![0.5, 0.9]],
            values: vec![1.0],
            improved: true,
            incumbent: 1.0,
            removed: vec![],
            truncated: vec![],
            reset: false,
            fallback: false,
            population: vec![],
            validation: ValidationStats::default(),
            timings: PhaseTimings::default(),
        };
        let log = RunLog {
            header,
            rounds: vec![round],
            summary: None,
        };
        let s = series(&log, 1e-6);
        assert_eq!(s.evaluations, vec![2, 3]);
        assert_eq!(s.incumbent, vec![2.0, 1.0]);
        assert!((s.boundary_hit_ratio - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.otsd - 0.9).abs() < 1e-12);
        let text = render(&log, 1e-6);
        assert!(text.contains("scale(rbf(ard))"));
        assert_eq!(text, render(&log, 1e-6));
    }
}
