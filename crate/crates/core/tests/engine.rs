use std::sync::Arc;

use nalgebra::DMatrix;

use evokernel::evolution::Engine;
use evokernel::harness::runlog::RoundRecord;
use evokernel::harness::{builtin_objective, Direction, Objective, ObjectiveError, RunConfig};
use evokernel::proposer::{LlmConfig, LlmProposer, MockProvider, OfflineProposer};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.objective.dim = 3;
    cfg.run.budget = 6;
    cfg.run.initial_points = 6;
    cfg.run.fit_restarts = 1;
    cfg.run.fit_max_iters = 15;
    cfg.run.psd_param_samples = 2;
    cfg.run.psd_point_samples = 1;
    cfg.run.workers = 1;
    cfg.acquisition.q = 2;
    cfg.acquisition.raw_candidates = 32;
    cfg.acquisition.restarts = 1;
    cfg.acquisition.max_iters = 10;
    cfg
}

const BOWL: &str = "import sys, json
for line in sys.stdin:
    out = []
    for row in json.loads(line)['points']:
        s = 0.0
        for v in row:
            s += (v - 0.3) * (v - 0.3)
        out.append(-s)
    print(json.dumps({'values': out}), flush=True)
";

/// The same function as `BOWL`, in process.
struct Bowl;

impl Objective for Bowl {
    fn name(&self) -> &str {
        "bowl"
    }

    fn dim(&self) -> usize {
        3
    }

    fn direction(&self) -> Direction {
        Direction::Maximize
    }

    fn evaluate(&mut self, points: &DMatrix<f64>) -> Result<Vec<f64>, ObjectiveError> {
        Ok((0..points.nrows())
            .map(|i| {
                let mut s = 0.0;
                for v in points.row(i).iter() {
                    s += (v - 0.3) * (v - 0.3);
                }
                -s
            })
            .collect())
    }
}

#[test]
fn plugin_and_in_process_objectives_give_the_same_run() {
    let mut cfg = small_config();
    cfg.objective.name = "plugin".into();
    cfg.objective.direction = Direction::Maximize;
    cfg.objective.command = vec!["python3".into(), "-c".into(), BOWL.into()];

    let (h1, r1, o1) = Engine::from_config(&cfg).unwrap().run_in_memory().unwrap();
    let (h2, r2, o2) = Engine::new(cfg, Box::new(Bowl), Box::new(OfflineProposer))
        .unwrap()
        .run_in_memory()
        .unwrap();
    assert_eq!(h1.init_y, h2.init_y);
    let a: Vec<String> = r1.iter().map(RoundRecord::deterministic_json).collect();
    let b: Vec<String> = r2.iter().map(RoundRecord::deterministic_json).collect();
    assert_eq!(a, b);
    assert_eq!(o1.best_value, o2.best_value);
    assert!(o1.best_value <= 0.0);
}

fn respond(messages: &[evokernel::proposer::ChatMessage]) -> String {
    let text = &messages[0].content;
    if text.starts_with("You design") {
        "```formula\nk(x, x') = Matern52(x, x') * RQ(x, x')\n```".into()
    } else if text.starts_with("Translate") {
        "```dsl\nproduct(matern52(ard), rq(ard))\n```".into()
    } else {
        "```dsl\nsum(scale(rbf(ard)), scale(matern52(ard)))\n```".into()
    }
}

#[test]
fn prompts_never_carry_observations() {
    let mut cfg = small_config();
    cfg.objective.name = "styblinski-tang".into();
    let mock = Arc::new(MockProvider::with(|m| Ok(respond(m))));
    let proposer = LlmProposer::new(Box::new(mock.clone()), LlmConfig::default());
    let objective = builtin_objective("styblinski-tang", 3, 0).unwrap();
    let (header, rounds, _) = Engine::new(cfg, Box::new(objective), Box::new(proposer))
        .unwrap()
        .run_in_memory()
        .unwrap();

    let mut needles = Vec::new();
    let mut add_x = |v: f64| needles.extend([format!("{v}"), format!("{v:.6}")]);
    for row in header.init_x.iter().chain(rounds.iter().flat_map(|r| r.batch.iter())) {
        row.iter().for_each(|&v| add_x(v));
    }
    for &v in header.init_y.iter().chain(rounds.iter().flat_map(|r| r.values.iter())) {
        for s in [v, -v] {
            needles.extend([format!("{s}"), format!("{s:.6}"), format!("{s:.4}")]);
        }
    }
    // Bound values such as "0" or "1" are too short to identify an observation.
    needles.retain(|n| n.trim_start_matches('-').len() >= 5);
    let requests = mock.requests.lock().unwrap();
    assert!(requests.len() >= 3 * rounds.len(), "{} requests", requests.len());
    for msgs in requests.iter() {
        for m in msgs {
            for n in &needles {
                assert!(!m.content.contains(n.as_str()), "prompt contains observation {n}:\n{}", m.content);
            }
        }
    }
}
