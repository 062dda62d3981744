use std::path::Path;
use std::process::{Command, Output};

fn evokernel(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evokernel"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn run_writes_two_rounds_for_budget_40() {
    let dir = tempfile::tempdir().unwrap();
    let out = evokernel(
        &["run", "--objective", "ackley", "--dim", "10", "--budget", "40", "--seed", "0", "--output", "out"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(dir.path().join("out/run.jsonl")).unwrap();
    let rounds = log.lines().filter(|l| l.contains("\"type\":\"round\"")).count();
    assert_eq!(rounds, 2);
    assert!(log.lines().last().unwrap().contains("\"type\":\"summary\""));
}

#[test]
fn distance_counterexample_fails_at_psd() {
    let dir = tempfile::tempdir().unwrap();
    let out = evokernel(&["validate-kernel", "--test-kernel", "distance-term"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("stage psd"));

    let out = evokernel(&["validate-kernel", "--test-kernel", "identity-add"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("stage agn"));
}

#[test]
fn valid_kernel_file_passes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("k.dsl"), "product(matern52(ard), sum(poly(tanh(ard)), rq(ard)))\n").unwrap();
    let out = evokernel(&["validate-kernel", "k.dsl", "--dim", "4"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn report_matches_golden_output() {
    let dir = tempfile::tempdir().unwrap();
    let log = fixture("golden_run.jsonl");
    let out = evokernel(&["report", log.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let want = std::fs::read(fixture("golden_report.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&want));

    let out = evokernel(&["report", "--json", log.to_str().unwrap()], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["incumbent"].as_array().unwrap().len(), 5);
}

#[test]
fn unknown_config_keys_are_all_listed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "sed = 1\n[loop]\nbuget = 3\npatience = 2\n").unwrap();
    let out = evokernel(&["run", "--config", "c.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sed") && err.contains("loop.buget"), "{err}");
}

#[test]
fn stop_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--objective", "levy", "--dim", "3", "--budget", "6", "--batch-size", "2", "--initial-points", "5"];
    let mut args = vec!["run", "--output", "a"];
    args.extend(common);
    assert!(evokernel(&args, dir.path()).status.success());

    let mut args = vec!["run", "--output", "b", "--stop-after", "1"];
    args.extend(common);
    let out = evokernel(&args, dir.path());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("stopped after round 1"));
    assert!(evokernel(&["resume", "b/checkpoint.json"], dir.path()).status.success());

    let rounds = |p: &str| -> Vec<serde_json::Value> {
        std::fs::read_to_string(dir.path().join(p))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .filter(|v| v["type"] == "round")
            .map(|mut v| {
                v["timings"] = serde_json::Value::Null;
                for s in v["scores"].as_array_mut().unwrap() {
                    s["fit_seconds"] = serde_json::Value::Null;
                }
                for p in v["proposals"].as_array_mut().unwrap() {
                    p["latency_ms"] = serde_json::Value::Null;
                    if p.get("verdict").is_some() {
                        p["verdict"]["fit_seconds"] = serde_json::Value::Null;
                    }
                }
                v
            })
            .collect()
    };
    let (a, b) = (rounds("a/run.jsonl"), rounds("b/run.jsonl"));
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
}

#[test]
fn diversity_of_identical_pool_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pool.txt"), "# pool\nscale(rbf(ard))\nscale(rbf(ard))\n").unwrap();
    let out = evokernel(&["diversity", "pool.txt", "--dim", "3"], dir.path());
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.000000000000");
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = evokernel(&["default-config"], dir.path());
    std::fs::write(dir.path().join("d.toml"), &out.stdout).unwrap();
    let out = evokernel(&["run", "--config", "d.toml", "--dim", "2", "--budget", "0", "--output", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
