//! The alternating training loop.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::*;
use super::objective::*;
use super::rl::{soft_policy_gradient, solve_tabular_policy};
use crate::demogen::DemoDataset;
use crate::env::{expected_return, rollouts, GaussianLinearPolicy, Task, TabularMdp, Trajectory};
use crate::error::{Result, VildError};
use crate::math::{Optimizer, OptimizerKind};
use crate::metrics::{MetricRow, RunMetrics, TrainStatus};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Stream id for evaluation seeds; shared by every method so that all of
/// them are scored on the same start states.
pub const EVAL_STREAM: u64 = 0x00E7_A100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub alpha: f64,
    pub gamma: f64,
    /// Per-coordinate execution-noise variance (`Sigma = sigma_exec * I`).
    pub sigma_exec: f64,
    pub step_size: f64,
    pub phi_step_size: Option<f64>,
    pub omega_step_size: Option<f64>,
    pub psi_step_size: Option<f64>,
    pub policy_step_size: Option<f64>,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub use_is: bool,
    pub noise_model: NoiseModel,
    pub bounded_reward: bool,
    pub reward_scale: f64,
    /// Reward representation on continuous tasks.
    pub reward_features: RewardFeatures,
    /// Transitions collected from the learner per iteration (buffer size B).
    pub replay_size: usize,
    /// Gauss–Hermite nodes per coordinate for posterior expectations;
    /// 0 selects Monte Carlo with `psi_samples` draws.
    pub quadrature_nodes: usize,
    pub psi_samples: usize,
    pub init_log_var: f64,
    /// Divide the covariance regularizer by `alpha` together with `H`.
    pub scaled_regularizer: bool,
    pub policy_init_log_std: f64,
    pub pretrain_steps: usize,
    pub psi_updates: usize,
    pub omega_updates: usize,
    pub phi_updates: usize,
    pub policy_updates: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            alpha: 1e-4,
            gamma: 0.99,
            sigma_exec: 1e-8,
            step_size: 3e-4,
            phi_step_size: None,
            omega_step_size: None,
            psi_step_size: None,
            policy_step_size: None,
            optimizer: OptimizerKind::Adam,
            batch_size: 256,
            use_is: true,
            noise_model: NoiseModel::Gaussian,
            bounded_reward: true,
            scaled_regularizer: false,
            reward_scale: 1.0,
            reward_features: RewardFeatures::NextState,
            replay_size: 1000,
            quadrature_nodes: 5,
            psi_samples: 1,
            init_log_var: 0.25f64.ln(),
            policy_init_log_std: 0.3f64.ln(),
            pretrain_steps: 1000,
            psi_updates: 1,
            omega_updates: 1,
            phi_updates: 1,
            policy_updates: 1,
            eval_interval: 10,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(VildError::config(format!("{name} must be positive")))
            }
        };
        pos(self.alpha, "alpha")?;
        pos(self.step_size, "step_size")?;
        for (v, n) in [
            (self.phi_step_size, "phi_step_size"),
            (self.omega_step_size, "omega_step_size"),
            (self.psi_step_size, "psi_step_size"),
            (self.policy_step_size, "policy_step_size"),
        ] {
            if let Some(v) = v {
                pos(v, n)?;
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(VildError::config("gamma must lie in (0, 1]"));
        }
        if !(self.sigma_exec >= 0.0) {
            return Err(VildError::config("sigma_exec must be nonnegative"));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.replay_size == 0 {
            return Err(VildError::config("iterations, batch_size and replay_size must be positive"));
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(VildError::config("eval_interval and eval_episodes must be positive"));
        }
        if self.quadrature_nodes == 0 && self.psi_samples == 0 {
            return Err(VildError::config("psi_samples must be positive when quadrature is off"));
        }
        pos(self.reward_scale, "reward_scale")
    }

    pub fn phi_step(&self) -> f64 {
        self.phi_step_size.unwrap_or(self.step_size)
    }

    pub fn omega_step(&self) -> f64 {
        self.omega_step_size.unwrap_or(self.step_size)
    }

    pub fn psi_step(&self) -> f64 {
        self.psi_step_size.unwrap_or(self.step_size)
    }

    pub fn policy_step(&self) -> f64 {
        self.policy_step_size.unwrap_or(self.step_size)
    }

    pub fn eval_seed(&self, iter: usize) -> u64 {
        eval_seed(self.seed, iter)
    }
}

/// Evaluation seed at iteration `iter` of a run seeded with `seed`.
pub fn eval_seed(seed: u64, iter: usize) -> u64 {
    derive_seed(derive_seed(seed, EVAL_STREAM), iter as u64)
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult<P> {
    pub params: P,
    pub metrics: RunMetrics,
    pub status: TrainStatus,
}

/// Checks that a dataset fits the task's shapes.
pub fn check_dataset(task: &Task, data: &DemoDataset) -> Result<()> {
    data.validate()?;
    if data.trajectories.is_empty() {
        return Err(VildError::shape("dataset has no trajectories"));
    }
    let horizon = task.horizon();
    let d = task.action_dim();
    for (i, tr) in data.trajectories.iter().enumerate() {
        tr.validate(horizon).map_err(|e| VildError::shape(format!("trajectory {i}: {e}")))?;
        if tr.actions.iter().any(|u| u.len() != d) {
            return Err(VildError::shape(format!("trajectory {i}: action dimension differs from {d}")));
        }
        match task {
            Task::Tabular(m) => {
                for s in &tr.states {
                    if s.len() != 1 || s[0] < 0.0 || s[0].fract() != 0.0 || s[0] as usize >= m.n_states {
                        return Err(VildError::shape(format!("trajectory {i}: invalid grid state {s:?}")));
                    }
                }
            }
            Task::PointMass(m) => {
                if tr.states.iter().any(|s| s.len() != m.dim) {
                    return Err(VildError::shape(format!("trajectory {i}: state dimension differs from {}", m.dim)));
                }
            }
        }
    }
    Ok(())
}

/// Datapoints grouped by zero-based demonstrator index.
pub fn points_by_demonstrator(data: &DemoDataset) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new(); data.k];
    for (n, tr) in data.trajectories.iter().enumerate() {
        if let Some(k) = tr.k_index() {
            out[k].extend((0..tr.len()).map(|t| (n, t)));
        }
    }
    out
}

/// Initial parameters. The posterior starts at the reward-free optimum
/// under the initial expertise: centered on `u` with variance
/// `alpha * C_init`, which is also the least-squares fit of its mean to `u`.
pub fn init_params(task: &Task, data: &DemoDataset, cfg: &TrainConfig) -> VildParams {
    let d = task.action_dim();
    let omega = ExpertiseParams::new(data.k, d, cfg.init_log_var);
    let prior_var = cfg.alpha * cfg.init_log_var.exp();
    match task {
        Task::Tabular(m) => {
            let horizon = m.horizon;
            let mut logits = vec![vec![0.0; m.n_actions()]; data.trajectories.len() * horizon];
            for (n, tr) in data.trajectories.iter().enumerate() {
                for t in 0..tr.len() {
                    let u = &tr.actions[t];
                    logits[n * horizon + t] = m
                        .actions
                        .iter()
                        .map(|a| -a.iter().zip(u).map(|(a, u)| (a - u) * (a - u)).sum::<f64>() / (2.0 * prior_var))
                        .collect();
                    let mx = logits[n * horizon + t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    logits[n * horizon + t].iter_mut().for_each(|v| *v -= mx);
                }
            }
            let mut reward = RewardParams::table(m.n_states, m.n_actions(), cfg.bounded_reward, cfg.reward_scale);
            reward.weights.iter_mut().for_each(|w| *w = 0.0);
            let policy = PolicyParams::Tabular(
                solve_tabular_policy(m, &reward.table_values(), cfg.alpha, cfg.gamma)
                    .expect("reward table matches the MDP by construction"),
            );
            VildParams {
                reward,
                omega,
                posterior: PosteriorParams::Grid { horizon, logits },
                policy,
            }
        }
        Task::PointMass(_) => VildParams {
            reward: RewardParams::continuous(cfg.reward_features, d, cfg.bounded_reward, cfg.reward_scale),
            omega,
            posterior: PosteriorParams::gaussian_identity(data.k, d, 0.5 * prior_var.ln()),
            policy: PolicyParams::Gaussian(GaussianLinearPolicy::new(d, cfg.policy_init_log_std)),
        },
    }
}

/// Alternating optimizer state for one run.
pub struct VildTrainer<'a> {
    pub task: &'a Task,
    pub data: &'a DemoDataset,
    pub cfg: TrainConfig,
    pub params: VildParams,
    pub spec: ObjectiveSpec,
    pub expectation: Expectation,
    pub agent: Vec<Trajectory>,
    pub transition_samples: u64,
    pub iter: usize,
    agent_batches: u64,
    opt_phi: Optimizer,
    opt_omega: Optimizer,
    opt_psi: Optimizer,
    opt_policy: Optimizer,
    rng: Rng,
    all_points: Vec<(usize, usize)>,
    by_k: Vec<Vec<(usize, usize)>>,
    tied: Vec<bool>,
}

impl<'a> VildTrainer<'a> {
    pub fn new(task: &'a Task, data: &'a DemoDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_dataset(task, data)?;
        let params = init_params(task, data, &cfg);
        Self::with_params(task, data, cfg, params)
    }

    pub fn with_params(task: &'a Task, data: &'a DemoDataset, cfg: TrainConfig, params: VildParams) -> Result<Self> {
        let d = task.action_dim();
        let spec = ObjectiveSpec {
            alpha: cfg.alpha,
            sigma_exec: vec![cfg.sigma_exec; d],
            noise_model: cfg.noise_model,
            p_k: data.p_k.clone(),
            horizon: task.horizon(),
            scaled_regularizer: cfg.scaled_regularizer,
        };
        let expectation = if cfg.quadrature_nodes > 0 {
            Expectation::Rule(Quadrature::gauss_hermite(cfg.quadrature_nodes, d))
        } else {
            Expectation::MonteCarlo {
                samples: cfg.psi_samples,
                seed: derive_seed(cfg.seed, 0x5A11),
            }
        };
        let mk = |n: usize, step: f64| Optimizer::new(cfg.optimizer, n, step);
        let n_policy = match &params.policy {
            PolicyParams::Gaussian(p) => p.to_vec().len(),
            PolicyParams::Tabular(_) => 0,
        };
        let counts = data.counts();
        let tied: Vec<bool> = counts.iter().map(|c| *c < 2).collect();
        let by_k = points_by_demonstrator(data);
        let all_points = DemoBatch::full(data).points;
        let mut tr = Self {
            task,
            data,
            opt_phi: mk(params.reward.weights.len(), cfg.phi_step()),
            opt_omega: mk(params.omega.k() * d, cfg.omega_step()),
            opt_psi: mk(params.posterior.to_vec().len(), cfg.psi_step()),
            opt_policy: mk(n_policy, cfg.policy_step()),
            rng: rng_from_seed(derive_seed(cfg.seed, 0x7EA1)),
            cfg,
            params,
            spec,
            expectation,
            agent: Vec::new(),
            transition_samples: 0,
            iter: 0,
            agent_batches: 0,
            all_points,
            by_k,
            tied,
        };
        tr.tie_expertise();
        Ok(tr)
    }

    fn problem(&self) -> Problem<'_> {
        match self.task {
            Task::Tabular(m) => Problem::Grid(m),
            Task::PointMass(_) => Problem::Continuous {
                agent: &self.agent,
                expectation: &self.expectation,
            },
        }
    }

    fn tabular(&self) -> Option<&'a TabularMdp> {
        match self.task {
            Task::Tabular(m) => Some(m),
            Task::PointMass(_) => None,
        }
    }

    /// Uniform batch over all datapoints (the whole set when it fits).
    pub fn data_batch(&mut self) -> DemoBatch {
        let n = self.all_points.len();
        if self.cfg.batch_size >= n {
            return DemoBatch {
                points: self.all_points.clone(),
                sampling: Sampling::Data,
            };
        }
        let points = (0..self.cfg.batch_size)
            .map(|_| self.all_points[self.rng.random_range(0..n)])
            .collect();
        DemoBatch {
            points,
            sampling: Sampling::Data,
        }
    }

    /// `k ~ p~`, then a uniform datapoint of demonstrator `k`.
    pub fn importance_batch(&mut self) -> Result<DemoBatch> {
        let st = is_distribution(&self.params.omega, &self.data.p_k)?;
        let mass: Vec<f64> = st
            .p_tilde
            .iter()
            .zip(&self.by_k)
            .map(|(p, pts)| if pts.is_empty() { 0.0 } else { *p })
            .collect();
        let total: f64 = mass.iter().sum();
        let mut points = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let x = self.rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut k = mass.iter().rposition(|m| *m > 0.0).unwrap_or(0);
            for (i, m) in mass.iter().enumerate() {
                acc += m;
                if x < acc {
                    k = i;
                    break;
                }
            }
            let pts = &self.by_k[k];
            points.push(pts[self.rng.random_range(0..pts.len())]);
        }
        Ok(DemoBatch {
            points,
            sampling: Sampling::Importance(st),
        })
    }

    /// Fills the buffer with fresh learner trajectories (continuous tasks).
    pub fn collect_agent(&mut self) -> Result<()> {
        if let (Task::PointMass(m), PolicyParams::Gaussian(_)) = (self.task, &self.params.policy) {
            let horizon = m.horizon;
            let n = self.cfg.replay_size.div_ceil(horizon).max(2);
            let seed = derive_seed(derive_seed(self.cfg.seed, 0xB0FF), self.agent_batches);
            self.agent_batches += 1;
            let sig = vec![self.cfg.sigma_exec; m.dim];
            self.agent = rollouts(m, &self.params.policy, &sig, n, seed)?
                .into_iter()
                .map(|r| r.trajectory)
                .collect();
            self.transition_samples += (n * horizon) as u64;
        }
        Ok(())
    }

    pub fn update_psi(&mut self) -> Result<Terms> {
        let batch = self.data_batch();
        let (terms, g) = objective_grad(&self.params, self.data, &batch, self.problem(), &self.spec)?;
        let mut v = self.params.posterior.to_vec();
        self.opt_psi.ascend(&mut v, &g.psi);
        self.params.posterior.set_from(&v);
        Ok(terms)
    }

    pub fn update_omega(&mut self) -> Result<Terms> {
        let batch = self.data_batch();
        let (terms, g) = objective_grad(&self.params, self.data, &batch, self.problem(), &self.spec)?;
        let (_, gl) = regularizer(&self.params, &self.spec);
        let grad: Vec<f64> = g.omega.iter().zip(&gl).map(|(a, b)| a + b).collect();
        let mut v = self.params.omega.to_vec();
        self.opt_omega.ascend(&mut v, &grad);
        self.params.omega.set_from(&v);
        self.tie_expertise();
        Ok(terms)
    }

    /// Demonstrators with fewer than two trajectories share the mean
    /// covariance of the others.
    fn tie_expertise(&mut self) {
        let free: Vec<usize> = (0..self.params.omega.k()).filter(|k| !self.tied[*k]).collect();
        if free.is_empty() || free.len() == self.params.omega.k() {
            return;
        }
        let d = self.params.omega.d_a();
        let mean: Vec<f64> = (0..d)
            .map(|j| {
                let m = free.iter().map(|k| self.params.omega.log_var[*k][j].exp()).sum::<f64>() / free.len() as f64;
                m.ln()
            })
            .collect();
        for k in 0..self.params.omega.k() {
            if self.tied[k] {
                self.params.omega.log_var[k] = mean.clone();
            }
        }
    }

    pub fn phi_batch(&mut self) -> Result<DemoBatch> {
        if self.cfg.use_is {
            self.importance_batch()
        } else {
            Ok(self.data_batch())
        }
    }

    /// One ascent step on the reward, importance-weighted when configured.
    pub fn update_phi_with(&mut self, batch: &DemoBatch) -> Result<Terms> {
        match (&batch.sampling, self.cfg.use_is) {
            (Sampling::Importance(_), false) => {
                return Err(VildError::Contract("importance-sampled batch given to a plain reward update".into()))
            }
            (Sampling::Data, true) => {
                return Err(VildError::Contract("reward update with importance sampling needs a batch drawn from p~".into()))
            }
            _ => {}
        }
        let (terms, g) = objective_grad(&self.params, self.data, batch, self.problem(), &self.spec)?;
        self.opt_phi.ascend(&mut self.params.reward.weights, &g.phi);
        Ok(terms)
    }

    pub fn update_phi(&mut self) -> Result<Terms> {
        let batch = self.phi_batch()?;
        self.update_phi_with(&batch)
    }

    pub fn update_theta(&mut self) -> Result<()> {
        match (self.task, &mut self.params.policy) {
            (Task::Tabular(m), PolicyParams::Tabular(p)) => {
                *p = solve_tabular_policy(m, &self.params.reward.table_values(), self.cfg.alpha, self.cfg.gamma)?;
            }
            (Task::PointMass(m), PolicyParams::Gaussian(p)) => {
                let g = soft_policy_gradient(p, &self.params.reward, m, &self.agent, self.cfg.alpha, self.cfg.gamma);
                let mut v = p.to_vec();
                self.opt_policy.ascend(&mut v, &g);
                p.set_from(&v);
            }
            _ => return Err(VildError::shape("policy representation does not match the task")),
        }
        Ok(())
    }

    /// One iteration: collect, then update psi, omega, phi, theta.
    pub fn step(&mut self) -> Result<()> {
        self.iter += 1;
        self.collect_agent()?;
        for _ in 0..self.cfg.psi_updates {
            self.update_psi()?;
        }
        for _ in 0..self.cfg.omega_updates {
            self.update_omega()?;
        }
        for _ in 0..self.cfg.phi_updates {
            self.update_phi()?;
        }
        for u in 0..self.cfg.policy_updates {
            if u > 0 {
                self.collect_agent()?;
            }
            self.update_theta()?;
        }
        Ok(())
    }

    /// Full-data objective with the current agent batch.
    pub fn objective(&self) -> Result<f64> {
        if self.agent.is_empty() && self.tabular().is_none() {
            return Ok(f64::NAN);
        }
        let batch = DemoBatch {
            points: self.all_points.clone(),
            sampling: Sampling::Data,
        };
        objective_h(&self.params, self.data, &batch, self.problem(), &self.spec)
    }

    pub fn evaluate(&self) -> Result<(f64, f64)> {
        expected_return(
            self.task.env(),
            &self.params.policy,
            self.cfg.eval_episodes,
            self.cfg.eval_seed(self.iter),
        )
    }

    pub fn metric_row(&self) -> Result<MetricRow> {
        let objective = self.objective()?;
        let (mean_return, stderr_return) = self.evaluate()?;
        Ok(MetricRow {
            iter: self.iter,
            transition_samples: self.transition_samples,
            objective,
            mean_return,
            stderr_return,
            expertise: self.params.omega.mean_diag(),
        })
    }

    pub fn run(mut self) -> Result<TrainResult<VildParams>> {
        let mut metrics = RunMetrics::default();
        let mut last_good = self.params.clone();
        for i in 1..=self.cfg.iterations {
            let outcome = self.step().and_then(|_| {
                if i % self.cfg.eval_interval == 0 || i == self.cfg.iterations {
                    let row = self.metric_row()?;
                    if !row.objective.is_finite() && !row.objective.is_nan() {
                        return Err(VildError::Numeric { term: "objective" });
                    }
                    metrics.push(row);
                }
                Ok(())
            });
            match outcome {
                Ok(()) => last_good.clone_from(&self.params),
                Err(VildError::Numeric { term }) => {
                    return Ok(TrainResult {
                        params: last_good,
                        metrics,
                        status: TrainStatus::Diverged {
                            iter: i,
                            reason: format!("non-finite {term} term"),
                        },
                    })
                }
                Err(e) => return Err(e),
            }
        }
        Ok(TrainResult {
            params: self.params,
            metrics,
            status: TrainStatus::Completed,
        })
    }
}

/// Runs the full loop.
pub fn train_vild(task: &Task, data: &DemoDataset, cfg: &TrainConfig) -> Result<TrainResult<VildParams>> {
    VildTrainer::new(task, data, cfg.clone())?.run()
}
