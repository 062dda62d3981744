use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use evokernel::acquisition::sobol_points;
use evokernel::dsl::KernelExpr;
use evokernel::evolution::{self, Engine};
use evokernel::gp::{Dataset, FitOptions};
use evokernel::harness::report;
use evokernel::harness::runlog::RunLog;
use evokernel::harness::{builtin_objective, Objective, ProposerKind, RunConfig, DEFAULT_BOUNDARY_TOL};
use evokernel::proposer::gram_cosine_distance;
use evokernel::selection::Metric;
use evokernel::validation::{check_psd, check_shape_agnostic, validate_and_fit_with, TestKernel, Verdict};

#[derive(Parser)]
#[command(name = "evokernel", version, about = "Bayesian optimization with evolved GP kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProposerArg {
    Offline,
    Llm,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    LooCrps,
    LooCrpsBic,
    Mll,
    Bic,
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Objective name, e.g. ackley or "gp-sample(rbf, 0.2)".
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    /// Evaluations after the initial design.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    initial_points: Option<usize>,
    #[arg(long)]
    population_cap: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long, value_enum)]
    proposer: Option<ProposerArg>,
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for the run log and checkpoint.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.objective {
            cfg.objective.name = v.clone();
        }
        if let Some(v) = self.dim {
            cfg.objective.dim = v;
        }
        if let Some(v) = self.budget {
            cfg.run.budget = v;
        }
        if let Some(v) = self.batch_size {
            cfg.acquisition.q = v;
        }
        if let Some(v) = self.initial_points {
            cfg.run.initial_points = v;
        }
        if let Some(v) = self.population_cap {
            cfg.run.population_cap = v;
        }
        if let Some(v) = self.metric {
            cfg.run.metric = match v {
                MetricArg::LooCrps => Metric::LooCrps,
                MetricArg::LooCrpsBic => Metric::LooCrpsBic,
                MetricArg::Mll => Metric::Mll,
                MetricArg::Bic => Metric::Bic,
            };
        }
        if let Some(v) = self.proposer {
            cfg.proposer.kind = match v {
                ProposerArg::Offline => ProposerKind::Offline,
                ProposerArg::Llm => ProposerKind::Llm,
                ProposerArg::None => ProposerKind::None,
            };
        }
        if let Some(v) = self.workers {
            cfg.run.workers = v;
        }
        if let Some(v) = &self.output {
            cfg.output.dir = v.clone();
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Start a run. Flags override the config file.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Stop after this many rounds; the checkpoint can be resumed.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Continue a run from its checkpoint.
    Resume {
        checkpoint: PathBuf,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Print tables from a run log.
    Report {
        log: PathBuf,
        /// Print the machine-readable series instead.
        #[arg(long)]
        json: bool,
        #[arg(long, default_value_t = DEFAULT_BOUNDARY_TOL)]
        boundary_tol: f64,
    },
    /// Check a kernel: shape, positive semi-definiteness, fit time.
    ValidateKernel {
        /// File holding one DSL expression.
        file: Option<PathBuf>,
        /// Check a built-in counterexample instead.
        #[arg(long, conflicts_with = "file")]
        test_kernel: Option<String>,
        /// Dimension of the synthetic dataset for the fit-time stage.
        #[arg(long, default_value_t = 5)]
        dim: usize,
        #[arg(long, default_value_t = 60.0)]
        fit_budget: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gram-cosine diversity of the kernels in a file, one per line.
    Diversity {
        file: PathBuf,
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn print_verdict(label: &str, v: &Verdict) {
    let stage = v.stage.to_string();
    if v.passed {
        println!("{label}: pass ({} trials)", v.trials_run);
    } else {
        println!("{label}: FAIL at stage {stage}: {}", v.detail);
    }
}

fn validate_kernel(
    file: Option<&Path>,
    test_kernel: Option<&str>,
    dim: usize,
    fit_budget: f64,
    seed: u64,
) -> Result<bool, String> {
    if let Some(name) = test_kernel {
        let t = TestKernel::from_name(name).ok_or_else(|| {
            let names: Vec<&str> = TestKernel::ALL.iter().map(|t| t.name()).collect();
            format!("unknown test kernel {name:?}; expected one of {}", names.join(", "))
        })?;
        let mut v = check_shape_agnostic(&t);
        if v.passed {
            v = check_psd(&t, 5, 5, seed);
        }
        print_verdict(t.name(), &v);
        return Ok(v.passed);
    }
    let path = file.ok_or("give a DSL file or --test-kernel")?;
    let expr: KernelExpr = read(path)?.trim().parse().map_err(|e| format!("{}: {e}", path.display()))?;
    let x = sobol_points(20, dim, Some(seed)).map_err(|e| e.to_string())?;
    let mut f = builtin_objective("ackley", dim, 0).map_err(|e| e.to_string())?;
    let y = f.evaluate(&x).map_err(|e| e.to_string())?;
    let data = Dataset::new(x, y.iter().map(|v| -v).collect()).map_err(|e| e.to_string())?;
    let opts = FitOptions {
        budget: Duration::from_secs_f64(fit_budget),
        ..Default::default()
    };
    let (v, _) = validate_and_fit_with(&expr, &data, &opts, (5, 5), seed);
    print_verdict(&expr.render(), &v);
    Ok(v.passed)
}

fn diversity(file: &Path, dim: usize, seed: u64) -> Result<(), String> {
    let mut exprs = Vec::new();
    for (i, line) in read(file)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let e: KernelExpr = line.parse().map_err(|e| format!("{} line {}: {e}", file.display(), i + 1))?;
        exprs.push(e);
    }
    let d = gram_cosine_distance(&exprs, None, dim, seed).map_err(|e| e.to_string())?;
    println!("{d:.12}");
    Ok(())
}

fn run(cmd: Command) -> Result<bool, String> {
    match cmd {
        Command::Run {
            config,
            overrides,
            stop_after,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p).map_err(|e| e.to_string())?,
                None => RunConfig::default(),
            };
            overrides.apply(&mut cfg);
            cfg.check().map_err(|e| e.to_string())?;
            let out = Engine::from_config(&cfg)
                .and_then(|mut e| e.start(stop_after))
                .map_err(|e| e.to_string())?;
            report_outcome(&out, &cfg);
        }
        Command::Resume { checkpoint, stop_after } => {
            let out = evolution::resume(&checkpoint, stop_after).map_err(|e| e.to_string())?;
            let mut cfg = evolution::read_checkpoint(&checkpoint).map_err(|e| e.to_string())?.config;
            if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
                cfg.output.dir = dir.to_path_buf();
            }
            report_outcome(&out, &cfg);
        }
        Command::Report {
            log,
            json,
            boundary_tol,
        } => {
            let log = RunLog::read(&log).map_err(|e| e.to_string())?;
            if json {
                let s = report::series(&log, boundary_tol);
                println!("{}", serde_json::to_string_pretty(&s).map_err(|e| e.to_string())?);
            } else {
                print!("{}", report::render(&log, boundary_tol));
            }
        }
        Command::ValidateKernel {
            file,
            test_kernel,
            dim,
            fit_budget,
            seed,
        } => return validate_kernel(file.as_deref(), test_kernel.as_deref(), dim, fit_budget, seed),
        Command::Diversity { file, dim, seed } => diversity(&file, dim, seed)?,
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()),
    }
    Ok(true)
}

fn report_outcome(out: &evolution::RunOutcome, cfg: &RunConfig) {
    let state = if out.finished { "finished" } else { "stopped" };
    println!(
        "{state} after round {} ({} evaluations); best {:.6}",
        out.state.round, out.evaluations, out.best_value
    );
    println!("log: {}", cfg.output.log_path().display());
    println!("checkpoint: {}", cfg.output.checkpoint_path().display());
    let parts: Vec<String> = out.best_x.iter().map(|v| format!("{v:.6}")).collect();
    println!("best x: [{}]", parts.join(", "));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
