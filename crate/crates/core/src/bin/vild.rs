use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vild::checks::{report_csv, run_checks, CheckOptions, Status, Suite};
use vild::demogen::{save_dataset, NoiseKind};
use vild::harness::{
    eval_csv, evaluate_checkpoint, generate_corpus, return_table, run_experiment, Checkpoint, DemosSection, EnvKind,
    EnvSection, ExperimentConfig, Method,
};
use vild::VildError;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_ORACLE: u8 = 3;

#[derive(Parser)]
#[command(name = "vild", version, about = "Imitation learning from diverse-quality demonstrations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a demonstration corpus (JSONL) from noisy copies of the optimal policy.
    GenDemos(GenDemos),
    /// Train a method and write a run directory.
    Train(Train),
    /// Evaluate a checkpoint's policy.
    Eval(Eval),
    /// Run the brute-force oracle checks.
    Oracle(Oracle),
}

#[derive(Args)]
struct GenDemos {
    #[arg(long, default_value = "chain")]
    env: EnvKind,
    #[arg(long, default_value_t = 5)]
    states: usize,
    #[arg(long, default_value_t = 3)]
    actions: usize,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    slip: f64,
    /// Seed of the random tabular MDP.
    #[arg(long, default_value_t = 0)]
    env_seed: u64,
    #[arg(long, default_value = "gaussian")]
    noise: NoiseKind,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated noise scales, one per demonstrator.
    #[arg(long, value_delimiter = ',')]
    sigma: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `algo.method`.
    #[arg(long)]
    algo: Option<Method>,
    /// Overrides `demos.path`.
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `eval.csv` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Oracle {
    /// partition | bounds | grads | qpsi | all
    #[arg(long, default_value = "all")]
    check: String,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    max_states: usize,
    #[arg(long, default_value_t = 3)]
    max_actions: usize,
    #[arg(long, default_value_t = 3)]
    max_horizon: usize,
    /// Largest number of trajectories the oracle may enumerate.
    #[arg(long)]
    budget: Option<u128>,
    /// Relative perturbation applied to analytic gradients.
    #[arg(long, default_value_t = 0.0)]
    perturb_gradient: f64,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen_demos(a: GenDemos) -> Result<(), VildError> {
    let env = EnvSection {
        task: a.env,
        states: a.states,
        actions: a.actions,
        horizon: a.horizon,
        dim: a.dim,
        slip: a.slip,
        seed: a.env_seed,
    };
    let demos = DemosSection {
        noise: a.noise,
        k: a.k,
        n: a.n,
        seed: a.seed,
        sigma: a.sigma,
        path: None,
    };
    let corpus = generate_corpus(&env, &demos)?;
    save_dataset(&corpus.dataset, &a.out)?;
    print!("{}", return_table(&corpus));
    Ok(())
}

fn train(a: Train) -> Result<ExitCode, VildError> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = a.algo {
        cfg.algo.method = m;
    }
    if let Some(p) = a.demos {
        cfg.demos.path = Some(p);
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    cfg.apply_seed_override()?;
    let outcome = run_experiment(&cfg, &a.out)?;
    for (t, dir) in outcome.trials.iter().zip(&outcome.trial_dirs) {
        let last = t.metrics.last();
        println!(
            "trial {} seed {}: final return {} (stderr {}) -> {}",
            t.checkpoint.trial,
            t.checkpoint.seed,
            last.map_or(f64::NAN, |r| r.mean_return),
            last.map_or(f64::NAN, |r| r.stderr_return),
            dir.display()
        );
    }
    if outcome.any_diverged() {
        eprintln!("error: training diverged; partial metrics were written");
        return Ok(ExitCode::from(EXIT_RUNTIME));
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: Eval) -> Result<(), VildError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (m, se) = evaluate_checkpoint(&ck, a.episodes, a.seed)?;
    let out = a
        .out
        .unwrap_or_else(|| a.checkpoint.parent().map(|p| p.join("eval.csv")).unwrap_or_else(|| "eval.csv".into()));
    fs::write(&out, eval_csv(a.episodes, m, se))?;
    println!("mean return {m} (stderr {se}) over {} episodes", a.episodes);
    Ok(())
}

fn oracle(a: Oracle) -> Result<ExitCode, VildError> {
    let suites = Suite::parse_selection(&a.check)?;
    let mut opts = CheckOptions {
        instances: a.instances,
        seed: a.seed,
        max_states: a.max_states,
        max_actions: a.max_actions,
        max_horizon: a.max_horizon,
        perturb_gradient: a.perturb_gradient,
        ..CheckOptions::default()
    };
    if let Some(b) = a.budget {
        opts.budget.max_traj_count = b;
    }
    let rows = run_checks(&suites, &opts)?;
    let report = report_csv(&rows);
    match &a.out {
        Some(p) => fs::write(p, &report)?,
        None => print!("{report}"),
    }
    let failed = rows.iter().filter(|r| r.status == Status::Fail).count();
    let refused = rows.iter().filter(|r| r.status == Status::Refused).count();
    if refused > 0 {
        eprintln!("{refused} check(s) refused: enumeration budget exceeded");
    }
    if failed > 0 {
        eprintln!("{failed} check(s) failed");
    }
    Ok(if failed + refused > 0 {
        ExitCode::from(EXIT_ORACLE)
    } else {
        ExitCode::SUCCESS
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::GenDemos(a) => gen_demos(a).map(|_| ExitCode::SUCCESS),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Cmd::Oracle(a) => oracle(a),
    };
    match result {
        Ok(code) => code,
        Err(e @ VildError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
