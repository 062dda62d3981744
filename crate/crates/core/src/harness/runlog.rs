//! Line-delimited JSON run log: one header, one record per round, and a
//! summary when the run finishes. The log alone is enough to rebuild every
//! report.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::proposer::{Origin, Proposal};
use crate::selection::Metric;
use crate::validation::ValidationStats;

use super::config::RunConfig;
use super::objectives::Direction;

pub const LOG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: u32,
    pub config: RunConfig,
    pub objective: String,
    pub dim: usize,
    pub direction: Direction,
    pub proposer: String,
    /// Initial design and its raw objective values.
    pub init_x: Vec<Vec<f64>>,
    pub init_y: Vec<f64>,
    /// Digests of the initial population.
    pub initial_population: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub digest: String,
    pub dsl: String,
    pub origin: Origin,
    /// Lower is better; missing when the fit failed.
    pub score: Option<f64>,
    pub fit_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub fit: f64,
    pub proposer: f64,
    pub validation: f64,
    pub acquisition: f64,
    pub oracle: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.fit + self.proposer + self.validation + self.acquisition + self.oracle
    }

    pub fn add(&mut self, o: &PhaseTimings) {
        self.fit += o.fit;
        self.proposer += o.proposer;
        self.validation += o.validation;
        self.acquisition += o.acquisition;
        self.oracle += o.oracle;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub metric: Metric,
    pub selected: Option<String>,
    pub selected_dsl: Option<String>,
    pub scores: Vec<ScoreEntry>,
    pub proposals: Vec<Proposal>,
    pub batch: Vec<Vec<f64>>,
    /// Raw objective values of `batch`.
    pub values: Vec<f64>,
    pub improved: bool,
    /// Best raw value after this round.
    pub incumbent: f64,
    pub removed: Vec<String>,
    pub truncated: Vec<String>,
    pub reset: bool,
    /// True when the batch came from the space-filling fallback.
    pub fallback: bool,
    /// Population digests at the end of the round, best first.
    pub population: Vec<String>,
    /// Cumulative over the run.
    pub validation: ValidationStats,
    pub timings: PhaseTimings,
}

impl RoundRecord {
    /// JSON with every wall-clock field zeroed, for comparing runs.
    pub fn deterministic_json(&self) -> String {
        let mut r = self.clone();
        r.timings = PhaseTimings::default();
        for s in &mut r.scores {
            s.fit_seconds = 0.0;
        }
        for p in &mut r.proposals {
            p.latency_ms = 0;
            if let Some(v) = &mut p.verdict {
                v.fit_seconds = v.fit_seconds.map(|_| 0.0);
                if v.stage == crate::validation::Stage::FitTime && !v.passed {
                    v.detail.clear();
                }
            }
        }
        serde_json::to_string(&r).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub evaluations: usize,
    pub best_value: f64,
    pub best_x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Header(Box<Header>),
    Round(Box<RoundRecord>),
    Summary(Summary),
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{path} line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("{0}")]
    Layout(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> LogError {
    LogError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Append-only writer; every record is flushed as it is written.
#[derive(Debug)]
pub struct RunLogWriter {
    path: PathBuf,
    file: File,
}

impl RunLogWriter {
    pub fn create(path: &Path) -> Result<Self, LogError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(path: &Path) -> Result<Self, LogError> {
        let file = OpenOptions::new().append(true).open(path).map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, rec: &LogRecord) -> Result<(), LogError> {
        let mut line = serde_json::to_string(rec).map_err(|e| io_err(&self.path, e))?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| io_err(&self.path, e))?;
        self.file.flush().map_err(|e| io_err(&self.path, e))
    }
}

/// A parsed log.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: Header,
    pub rounds: Vec<RoundRecord>,
    pub summary: Option<Summary>,
}

impl RunLog {
    pub fn parse(text: &str, path: &Path) -> Result<Self, LogError> {
        let mut header = None;
        let mut rounds = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(line).map_err(|e| LogError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            match rec {
                LogRecord::Header(h) if header.is_none() => header = Some(*h),
                LogRecord::Header(_) => return Err(LogError::Layout("second header record".into())),
                LogRecord::Round(r) => rounds.push(*r),
                LogRecord::Summary(s) => summary = Some(s),
            }
        }
        let header = header.ok_or_else(|| LogError::Layout("missing header record".into()))?;
        if header.schema != LOG_SCHEMA {
            return Err(LogError::Layout(format!("log schema {} is not supported", header.schema)));
        }
        Ok(Self { header, rounds, summary })
    }

    pub fn read(path: &Path) -> Result<Self, LogError> {
        let f = File::open(path).map_err(|e| io_err(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(f).lines() {
            text.push_str(&line.map_err(|e| io_err(path, e))?);
            text.push('\n');
        }
        Self::parse(&text, path)
    }

    /// Query history in order, initial design first.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut p = self.header.init_x.clone();
        for r in &self.rounds {
            p.extend(r.batch.iter().cloned());
        }
        p
    }

    /// Best raw value after the initial design and after each round.
    pub fn incumbent_trace(&self) -> Vec<f64> {
        let dir = self.header.direction;
        let init = self
            .header
            .init_y
            .iter()
            .copied()
            .map(|v| dir.to_internal(v))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut t = vec![dir.to_raw(init)];
        t.extend(self.rounds.iter().map(|r| r.incumbent));
        t
    }
}

/// Keeps the header and rounds `1..=last_round` of an existing log and
/// drops anything after, so a resumed run appends where its checkpoint
/// left off.
pub fn truncate_log(path: &Path, last_round: usize) -> Result<(), LogError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(line).map_err(|e| LogError::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })?;
        let keep = match &rec {
            LogRecord::Header(_) => true,
            LogRecord::Round(r) => r.round <= last_round,
            LogRecord::Summary(_) => false,
        };
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), LogError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> Header {
        Header {
            schema: LOG_SCHEMA,
            config: RunConfig::default(),
            objective: "ackley".into(),
            dim: 2,
            direction: Direction::Minimize,
            proposer: "offline".into(),
            init_x: vec![vec![0.1, 0.2], vec![0.3, 0.4]],
            init_y: vec![3.0, 2.0],
            initial_population: vec!["a".into()],
        }
    }

    fn round(r: usize, inc: f64) -> RoundRecord {
        RoundRecord {
            round: r,
            metric: Metric::LooCrps,
            selected: Some("a".into()),
            selected_dsl: Some("scale(rbf(ard))".into()),
            scores: vec![],
            proposals: vec![],
            batch: vec![vec![0.5, 0.5]],
            values: vec![inc],
            improved: true,
            incumbent: inc,
            removed: vec![],
            truncated: vec![],
            reset: false,
            fallback: false,
            population: vec!["a".into()],
            validation: ValidationStats::default(),
            timings: PhaseTimings {
                fit: 1.5,
                ..Default::default()
            },
        }
    }

    #[test]
    fn write_read_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/run.jsonl");
        let mut w = RunLogWriter::create(&path).unwrap();
        w.write(&LogRecord::Header(Box::new(header()))).unwrap();
        for r in 1..=3 {
            w.write(&LogRecord::Round(Box::new(round(r, 2.0 - r as f64)))).unwrap();
        }
        drop(w);
        let log = RunLog::read(&path).unwrap();
        assert_eq!(log.rounds.len(), 3);
        assert_eq!(log.points().len(), 5);
        assert_eq!(log.incumbent_trace(), vec![2.0, 1.0, 0.0, -1.0]);

        truncate_log(&path, 1).unwrap();
        let log = RunLog::read(&path).unwrap();
        assert_eq!(log.rounds.len(), 1);
        let mut w = RunLogWriter::append(&path).unwrap();
        w.write(&LogRecord::Round(Box::new(round(2, 0.5)))).unwrap();
        assert_eq!(RunLog::read(&path).unwrap().rounds.len(), 2);
    }

    #[test]
    fn deterministic_json_ignores_timing() {
        let a = round(1, 0.0);
        let mut b = a.clone();
        b.timings.oracle = 9.0;
        assert_ne!(a, b);
        assert_eq!(a.deterministic_json(), b.deterministic_json());
    }

    #[test]
    fn missing_header_is_an_error() {
        let line = serde_json::to_string(&LogRecord::Round(Box::new(round(1, 0.0)))).unwrap();
        assert!(RunLog::parse(&line, Path::new("x")).is_err());
    }
}
