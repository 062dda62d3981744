//! External objectives run as child processes speaking a line protocol.
//!
//! Each evaluation writes one JSON line `{"points": [[x11, ..., x1D], ...]}`
//! to the child's stdin and reads one JSON line `{"values": [v1, ...]}` from
//! its stdout, one value per point, in order. Points are in `[0, 1]^D`.
//! The child is started on first use and restarted after a crash.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::objectives::{Direction, Objective, ObjectiveError};

#[derive(Debug, Error)]
pub enum PluginError {
    #[error("failed to start plugin {command:?}: {reason}")]
    Spawn { command: String, reason: String },
    #[error("plugin exited during batch {batch_index} ({status})")]
    ChildExited { batch_index: usize, status: String },
    #[error("plugin timed out after {seconds}s on batch {batch_index}")]
    Timeout { batch_index: usize, seconds: f64 },
    #[error("malformed plugin response on batch {batch_index}: {reason}; line: {line:?}")]
    Protocol { batch_index: usize, line: String, reason: String },
}

#[derive(Serialize)]
struct Request<'a> {
    points: &'a [Vec<f64>],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Response {
    values: Vec<f64>,
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Running {
    fn exit_status(&mut self) -> String {
        // Give a dying child a moment to be reaped.
        for _ in 0..50 {
            if let Ok(Some(s)) = self.child.try_wait() {
                return s.to_string();
            }
            thread::sleep(Duration::from_millis(10));
        }
        "still running".into()
    }
}

pub struct PluginObjective {
    name: String,
    command: Vec<String>,
    dim: usize,
    direction: Direction,
    timeout: Duration,
    running: Option<Running>,
    batches: usize,
}

impl PluginObjective {
    pub fn new(command: Vec<String>, dim: usize, direction: Direction, timeout: Duration) -> Result<Self, PluginError> {
        if command.is_empty() {
            return Err(PluginError::Spawn {
                command: String::new(),
                reason: "empty command".into(),
            });
        }
        Ok(Self {
            name: format!("plugin:{}", command.join(" ")),
            command,
            dim,
            direction,
            timeout,
            running: None,
            batches: 0,
        })
    }

    fn spawn(&self) -> Result<Running, PluginError> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| PluginError::Spawn {
                command: self.command.join(" "),
                reason: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(l).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(Running { child, stdin, lines: rx })
    }

    fn kill(&mut self) {
        if let Some(mut r) = self.running.take() {
            let _ = r.child.kill();
            let _ = r.child.wait();
        }
    }

    /// Sends one batch and waits for its response.
    pub fn call(&mut self, points: &[Vec<f64>]) -> Result<Vec<f64>, PluginError> {
        let batch_index = self.batches;
        self.batches += 1;
        if self.running.is_none() {
            self.running = Some(self.spawn()?);
        }
        let mut line = serde_json::to_string(&Request { points }).expect("serializable request");
        line.push('\n');
        let r = self.running.as_mut().expect("running child");
        if r.stdin.write_all(line.as_bytes()).and_then(|_| r.stdin.flush()).is_err() {
            let status = r.exit_status();
            self.kill();
            return Err(PluginError::ChildExited { batch_index, status });
        }
        let reply = match r.lines.recv_timeout(self.timeout) {
            Ok(l) => l,
            Err(RecvTimeoutError::Timeout) => {
                self.kill();
                return Err(PluginError::Timeout {
                    batch_index,
                    seconds: self.timeout.as_secs_f64(),
                });
            }
            Err(RecvTimeoutError::Disconnected) => {
                let status = r.exit_status();
                self.kill();
                return Err(PluginError::ChildExited { batch_index, status });
            }
        };
        let protocol = |reason: String| PluginError::Protocol {
            batch_index,
            line: reply.clone(),
            reason,
        };
        let resp: Response = serde_json::from_str(&reply).map_err(|e| protocol(e.to_string()))?;
        if resp.values.len() != points.len() {
            return Err(protocol(format!("expected {} values, got {}", points.len(), resp.values.len())));
        }
        Ok(resp.values)
    }
}

impl Drop for PluginObjective {
    fn drop(&mut self) {
        self.kill();
    }
}

impl Objective for PluginObjective {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn direction(&self) -> Direction {
        self.direction
    }

    fn evaluate(&mut self, points: &DMatrix<f64>) -> Result<Vec<f64>, ObjectiveError> {
        if points.ncols() != self.dim {
            return Err(ObjectiveError::Dimension {
                expected: self.dim,
                got: points.ncols(),
            });
        }
        let rows: Vec<Vec<f64>> = (0..points.nrows()).map(|i| points.row(i).iter().copied().collect()).collect();
        let vals = self.call(&rows)?;
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite(i));
        }
        Ok(vals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn python(script: &str) -> Vec<String> {
        vec!["python3".into(), "-c".into(), script.into()]
    }

    const SUM: &str = "import sys, json\nfor l in sys.stdin:\n    p = json.loads(l)['points']\n    print(json.dumps({'values': [sum(r) for r in p]}), flush=True)\n";

    #[test]
    fn sum_plugin_round_trip() {
        let mut p = PluginObjective::new(python(SUM), 3, Direction::Minimize, Duration::from_secs(20)).unwrap();
        let x = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 0.5, 0.5, 0.25]);
        let v = p.evaluate(&x).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 1.25).abs() < 1e-15);
        assert_eq!(p.evaluate(&x).unwrap(), v);
    }

    #[test]
    fn exit_then_restart() {
        let script = "import sys, json\nl = sys.stdin.readline()\nsys.exit(3)\n";
        let mut p = PluginObjective::new(python(script), 1, Direction::Minimize, Duration::from_secs(20)).unwrap();
        let err = p.call(&[vec![0.5]]).unwrap_err();
        assert!(matches!(err, PluginError::ChildExited { batch_index: 0, .. }), "{err}");
        let err = p.call(&[vec![0.5]]).unwrap_err();
        assert!(matches!(err, PluginError::ChildExited { batch_index: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_and_timeout() {
        let bad = "import sys\nfor l in sys.stdin:\n    print('not json', flush=True)\n";
        let mut p = PluginObjective::new(python(bad), 1, Direction::Minimize, Duration::from_secs(20)).unwrap();
        match p.call(&[vec![0.5]]).unwrap_err() {
            PluginError::Protocol { line, .. } => assert_eq!(line, "not json"),
            e => panic!("{e}"),
        }
        let slow = "import sys, time\nfor l in sys.stdin:\n    time.sleep(30)\n";
        let mut p = PluginObjective::new(python(slow), 1, Direction::Minimize, Duration::from_millis(300)).unwrap();
        assert!(matches!(p.call(&[vec![0.5]]).unwrap_err(), PluginError::Timeout { .. }));
    }
}
