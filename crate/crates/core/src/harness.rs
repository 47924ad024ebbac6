//! Experiment configuration, orchestration and persistence behind the
//! `vild` command-line tool.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    train_bc, train_bcd, train_coteaching, train_maxent_irl, BcPolicy, BcdParams, IrlParams, OfflineConfig,
};
use crate::demogen::{generate_demonstrations, returns_by_demonstrator, uniform_p_k, DemoDataset, NoiseKind, NoiseSpec};
use crate::env::{episode_returns, ExpertPolicy, PointMassMdp, Policy, TabularMdp, Task};
use crate::error::{Result, VildError};
use crate::math::{mean, std_error};
use crate::metrics::{fmt_f64, MetricRow, RunMetrics, TrainStatus};
use crate::rng::Rng;
use crate::vild::{train_vild, PolicyParams, TrainConfig, VildParams};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const SEED_ENV: &str = "VILD_SEED";
pub const AGGREGATE_HEADER: &str = "iter,trials,transition_samples,objective_mean,objective_stderr,return_mean,return_stderr";
pub const EVAL_HEADER: &str = "episodes,mean_return,stderr_return";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    #[default]
    Chain,
    Random,
    PointMass,
}

impl std::str::FromStr for EnvKind {
    type Err = VildError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(EnvKind::Chain),
            "random" => Ok(EnvKind::Random),
            "point-mass" => Ok(EnvKind::PointMass),
            other => Err(VildError::config(format!("unknown env `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub task: EnvKind,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    /// Point-mass dimension.
    pub dim: usize,
    /// Chain slip probability.
    pub slip: f64,
    /// Seed of the random tabular MDP.
    pub seed: u64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            task: EnvKind::Chain,
            states: 5,
            actions: 3,
            horizon: 10,
            dim: 1,
            slip: 0.1,
            seed: 0,
        }
    }
}

impl EnvSection {
    pub fn build(&self) -> Result<Task> {
        Ok(match self.task {
            EnvKind::Chain => Task::Tabular(TabularMdp::chain(self.states, self.horizon, self.slip)?),
            EnvKind::Random => Task::Tabular(TabularMdp::random(self.states, self.actions, self.horizon, self.seed)?),
            EnvKind::PointMass => Task::PointMass(PointMassMdp::new(self.dim, self.horizon)?),
        })
    }

    /// Identifier stored in corpus headers.
    pub fn id(&self) -> String {
        match self.task {
            EnvKind::Chain => format!("chain-s{}-t{}", self.states, self.horizon),
            EnvKind::Random => format!("random-s{}-a{}-t{}-seed{}", self.states, self.actions, self.horizon, self.seed),
            EnvKind::PointMass => format!("point-mass-d{}-t{}", self.dim, self.horizon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemosSection {
    pub noise: NoiseKind,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    /// Noise scales; the default grid when absent.
    pub sigma: Option<Vec<f64>>,
    /// Existing corpus to train on instead of generating one.
    pub path: Option<PathBuf>,
}

impl Default for DemosSection {
    fn default() -> Self {
        Self {
            noise: NoiseKind::Gaussian,
            k: 10,
            n: 100,
            seed: 0,
            sigma: None,
            path: None,
        }
    }
}

impl DemosSection {
    pub fn noise_spec(&self, d_a: usize) -> Result<NoiseSpec> {
        let sigma = self.sigma.clone().unwrap_or_else(|| NoiseSpec::default_sigmas(self.k));
        if sigma.len() != self.k {
            return Err(VildError::config("demos.sigma must have K entries"));
        }
        NoiseSpec::new(self.noise, sigma, d_a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    VildIs,
    Vild,
    MaxentIrl,
    Bc,
    Bcd,
    Coteach,
    /// The demonstrators' optimal policy; no learning.
    Expert,
}

impl Method {
    pub fn is_offline(self) -> bool {
        matches!(self, Method::Bc | Method::Bcd | Method::Coteach)
    }
}

impl std::str::FromStr for Method {
    type Err = VildError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vild-is" => Method::VildIs,
            "vild" => Method::Vild,
            "maxent-irl" => Method::MaxentIrl,
            "bc" => Method::Bc,
            "bcd" => Method::Bcd,
            "coteach" => Method::Coteach,
            "expert" => Method::Expert,
            other => return Err(VildError::config(format!("unknown algorithm `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AlgoSection {
    pub method: Method,
    pub train: TrainConfig,
    pub offline: OfflineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub interval: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: 10, interval: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub env: EnvSection,
    pub demos: DemosSection,
    pub algo: AlgoSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 5,
            env: EnvSection::default(),
            demos: DemosSection::default(),
            algo: AlgoSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| VildError::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| VildError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    /// Replaces the base seed with `VILD_SEED` when it is set.
    pub fn apply_seed_override(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| VildError::config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(VildError::config("trials must be at least 1"));
        }
        if self.eval.episodes == 0 || self.eval.interval == 0 {
            return Err(VildError::config("eval.episodes and eval.interval must be positive"));
        }
        if let Some(p) = &self.demos.path {
            if !p.exists() {
                return Err(VildError::config(format!("demonstration file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }

    /// Training settings for one trial, with the eval section and seed applied.
    pub fn train_config(&self, trial: usize) -> TrainConfig {
        TrainConfig {
            use_is: self.algo.method != Method::Vild,
            eval_interval: self.eval.interval,
            eval_episodes: self.eval.episodes,
            seed: self.trial_seed(trial),
            ..self.algo.train.clone()
        }
    }

    pub fn offline_config(&self, trial: usize) -> OfflineConfig {
        OfflineConfig {
            eval_interval: self.eval.interval,
            eval_episodes: self.eval.episodes,
            seed: self.trial_seed(trial),
            ..self.algo.offline.clone()
        }
    }
}

/// Demonstrations plus the true return of each.
pub struct Corpus {
    pub dataset: DemoDataset,
    /// Mean true return and count per demonstrator.
    pub returns: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn generate_corpus(env: &EnvSection, demos: &DemosSection) -> Result<Corpus> {
    if demos.k == 0 {
        return Err(VildError::config("K must be at least 1"));
    }
    if demos.n == 0 {
        return Err(VildError::config("N must be at least 1"));
    }
    let task = env.build()?;
    let expert = task.train_optimal_policy()?;
    let noise = demos.noise_spec(task.action_dim())?;
    let p_k = uniform_p_k(demos.k);
    let raw = generate_demonstrations(task.env(), &expert, &noise, &p_k, demos.n, demos.seed)?;
    let (returns, counts) = returns_by_demonstrator(&raw, demos.k);
    let dataset = DemoDataset {
        trajectories: raw.into_iter().map(|d| d.trajectory).collect(),
        k: demos.k,
        p_k,
        ground_truth: Some(noise),
        env_id: env.id(),
    };
    dataset.validate()?;
    Ok(Corpus {
        dataset,
        returns,
        counts,
    })
}

/// Per-demonstrator table printed by `gen-demos`.
pub fn return_table(corpus: &Corpus) -> String {
    let sigma = corpus.dataset.ground_truth.as_ref().map(|n| n.sigma.clone());
    let mut s = String::from("k,sigma,trajectories,mean_return\n");
    for k in 0..corpus.dataset.k {
        let sg = sigma.as_ref().map_or(f64::NAN, |v| v[k]);
        let _ = writeln!(s, "{},{},{},{}", k + 1, fmt_f64(sg), corpus.counts[k], fmt_f64(corpus.returns[k]));
    }
    s
}

/// Learned parameters of any method, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "params", rename_all = "kebab-case")]
pub enum TrainedParams {
    Vild(VildParams),
    MaxentIrl(IrlParams),
    Bc(BcPolicy),
    Bcd(BcdParams),
    Coteach(BcPolicy),
    Expert(ExpertPolicy),
}

impl Policy for TrainedParams {
    fn act(&self, t: usize, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        match self {
            TrainedParams::Vild(p) => p.policy.act(t, state, rng),
            TrainedParams::MaxentIrl(p) => p.act(t, state, rng),
            TrainedParams::Bc(p) | TrainedParams::Coteach(p) => p.act(t, state, rng),
            TrainedParams::Bcd(p) => p.act(t, state, rng),
            TrainedParams::Expert(p) => p.act(t, state, rng),
        }
    }
}

impl TrainedParams {
    pub fn policy_params(&self) -> Option<&PolicyParams> {
        match self {
            TrainedParams::Vild(p) => Some(&p.policy),
            TrainedParams::MaxentIrl(p) => Some(&p.policy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub trial: usize,
    pub seed: u64,
    pub config: ExperimentConfig,
    #[serde(flatten)]
    pub status: TrainStatus,
    pub trained: TrainedParams,
}

impl Checkpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| VildError::config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| VildError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(VildError::config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

pub struct TrialOutcome {
    pub metrics: RunMetrics,
    pub checkpoint: Checkpoint,
}

impl TrialOutcome {
    pub fn diverged(&self) -> bool {
        matches!(self.checkpoint.status, TrainStatus::Diverged { .. })
    }
}

/// Trains one trial of `cfg.algo.method` on `data`.
pub fn run_trial(cfg: &ExperimentConfig, task: &Task, data: &DemoDataset, trial: usize) -> Result<TrialOutcome> {
    let (trained, metrics, status) = match cfg.algo.method {
        Method::VildIs | Method::Vild => {
            let r = train_vild(task, data, &cfg.train_config(trial))?;
            (TrainedParams::Vild(r.params), r.metrics, r.status)
        }
        Method::MaxentIrl => {
            let r = train_maxent_irl(task, data, &cfg.train_config(trial))?;
            (TrainedParams::MaxentIrl(r.params), r.metrics, r.status)
        }
        Method::Bc => {
            let r = train_bc(task, data, &cfg.offline_config(trial))?;
            (TrainedParams::Bc(r.params), r.metrics, r.status)
        }
        Method::Coteach => {
            let r = train_coteaching(task, data, &cfg.offline_config(trial))?.result;
            (TrainedParams::Coteach(r.params), r.metrics, r.status)
        }
        Method::Bcd => {
            let r = train_bcd(task, data, &cfg.offline_config(trial))?.result;
            (TrainedParams::Bcd(r.params), r.metrics, r.status)
        }
        Method::Expert => {
            let expert = task.train_optimal_policy()?;
            let returns = episode_returns(task.env(), &expert, cfg.eval.episodes, cfg.trial_seed(trial))?;
            let mut m = RunMetrics::default();
            m.push(MetricRow {
                iter: 0,
                transition_samples: 0,
                objective: f64::NAN,
                mean_return: mean(&returns),
                stderr_return: std_error(&returns),
                expertise: vec![],
            });
            (TrainedParams::Expert(expert), m, TrainStatus::Completed)
        }
    };
    Ok(TrialOutcome {
        metrics,
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: cfg.hash(),
            trial,
            seed: cfg.trial_seed(trial),
            config: cfg.clone(),
            status,
            trained,
        },
    })
}

/// Loads `demos.path` when set, otherwise generates the configured corpus.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<DemoDataset> {
    match &cfg.demos.path {
        Some(p) => crate::demogen::load_dataset(p),
        None => Ok(generate_corpus(&cfg.env, &cfg.demos)?.dataset),
    }
}

/// Per-iteration mean and standard error across trials. Rows are
/// aligned by position and truncated to the shortest run.
pub fn aggregate_csv(runs: &[RunMetrics]) -> String {
    let mut s = String::from(AGGREGATE_HEADER);
    s.push('\n');
    let len = runs.iter().map(|r| r.rows.len()).min().unwrap_or(0);
    for i in 0..len {
        let col = |f: &dyn Fn(&MetricRow) -> f64| runs.iter().map(|r| f(&r.rows[i])).collect::<Vec<f64>>();
        let obj = col(&|r| r.objective);
        let ret = col(&|r| r.mean_return);
        let ts = col(&|r| r.transition_samples as f64);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            runs[0].rows[i].iter,
            runs.len(),
            fmt_f64(mean(&ts)),
            fmt_f64(mean(&obj)),
            fmt_f64(if runs.len() > 1 { std_error(&obj) } else { 0.0 }),
            fmt_f64(mean(&ret)),
            fmt_f64(if runs.len() > 1 { std_error(&ret) } else { 0.0 }),
        );
    }
    s
}

fn write_trial(dir: &Path, out: &TrialOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), out.metrics.to_csv())?;
    fs::write(dir.join("expertise.csv"), out.metrics.expertise_csv())?;
    let json = serde_json::to_string_pretty(&out.checkpoint).map_err(std::io::Error::from)?;
    fs::write(dir.join("checkpoint.json"), json + "\n")?;
    Ok(())
}

/// Summary of a `train` invocation.
pub struct ExperimentOutcome {
    pub trials: Vec<TrialOutcome>,
    /// Directory of each trial's files.
    pub trial_dirs: Vec<PathBuf>,
}

impl ExperimentOutcome {
    pub fn any_diverged(&self) -> bool {
        self.trials.iter().any(TrialOutcome::diverged)
    }
}

/// Runs every trial (in parallel) and writes the run directory:
/// `config.toml`, then either the trial files directly (one trial) or one
/// `trial-<i>` directory per trial plus `aggregate.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let task = cfg.env.build()?;
    let data = load_or_generate(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let trials: Vec<TrialOutcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| run_trial(cfg, &task, &data, i))
        .collect::<Result<_>>()?;
    let trial_dirs: Vec<PathBuf> = if cfg.trials == 1 {
        vec![out.to_path_buf()]
    } else {
        (0..cfg.trials).map(|i| out.join(format!("trial-{i}"))).collect()
    };
    for (t, dir) in trials.iter().zip(&trial_dirs) {
        write_trial(dir, t)?;
    }
    if cfg.trials > 1 {
        let runs: Vec<RunMetrics> = trials.iter().map(|t| t.metrics.clone()).collect();
        fs::write(out.join("aggregate.csv"), aggregate_csv(&runs))?;
    }
    Ok(ExperimentOutcome { trials, trial_dirs })
}

/// Mean and standard error of the checkpoint's policy over fresh episodes.
pub fn evaluate_checkpoint(ck: &Checkpoint, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(VildError::config("episodes must be at least 1"));
    }
    let task = ck.config.env.build()?;
    let returns = episode_returns(task.env(), &ck.trained, episodes, seed)?;
    Ok((mean(&returns), if episodes > 1 { std_error(&returns) } else { 0.0 }))
}

pub fn eval_csv(episodes: usize, mean_return: f64, stderr_return: f64) -> String {
    format!("{EVAL_HEADER}\n{episodes},{},{}\n", fmt_f64(mean_return), fmt_f64(stderr_return))
}
