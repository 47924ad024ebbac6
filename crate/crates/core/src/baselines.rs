//! Comparison methods: behavior cloning, its noisy-label extension (BC-D),
//! co-teaching, and MaxEnt-IRL on pooled data.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::demogen::DemoDataset;
use crate::env::{expected_return, rollouts, Environment, Policy, Task, Trajectory};
use crate::error::{Result, VildError};
use crate::math::{least_squares, Optimizer, OptimizerKind, LN_2PI};
use crate::metrics::{MetricRow, RunMetrics, TrainStatus};
use crate::rng::{child_rng, derive_seed, Rng};
use crate::vild::{
    agent_term, check_dataset, eval_seed, init_params, soft_policy_gradient, solve_tabular_policy, ExpertiseParams,
    PolicyParams, Problem, RewardParams, TrainConfig, TrainResult,
};

/// Deterministic regressor from state to action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BcPolicy {
    /// One action vector per grid state, row-major `[s][j]`.
    Table { n_states: usize, dim: usize, values: Vec<f64> },
    /// Per coordinate `a_j = slope_j x_j + bias_j`.
    Linear { slope: Vec<f64>, bias: Vec<f64> },
}

impl BcPolicy {
    pub fn zeros(task: &Task) -> Self {
        match task {
            Task::Tabular(m) => BcPolicy::Table {
                n_states: m.n_states,
                dim: m.action_dim(),
                values: vec![0.0; m.n_states * m.action_dim()],
            },
            Task::PointMass(m) => BcPolicy::Linear {
                slope: vec![0.0; m.dim],
                bias: vec![0.0; m.dim],
            },
        }
    }

    pub fn predict(&self, s: &[f64]) -> Vec<f64> {
        match self {
            BcPolicy::Table { dim, values, .. } => {
                let i = s[0] as usize;
                values[i * dim..(i + 1) * dim].to_vec()
            }
            BcPolicy::Linear { slope, bias } => (0..slope.len()).map(|j| slope[j] * s[j] + bias[j]).collect(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            BcPolicy::Table { values, .. } => values.clone(),
            BcPolicy::Linear { slope, bias } => slope.iter().chain(bias).copied().collect(),
        }
    }

    pub fn set_params(&mut self, v: &[f64]) {
        match self {
            BcPolicy::Table { values, .. } => values.copy_from_slice(v),
            BcPolicy::Linear { slope, bias } => {
                let d = slope.len();
                slope.copy_from_slice(&v[..d]);
                bias.copy_from_slice(&v[d..]);
            }
        }
    }

    /// Squared error `||u - pi(s)||^2`.
    pub fn loss(&self, s: &[f64], u: &[f64]) -> f64 {
        self.predict(s).iter().zip(u).map(|(p, u)| (u - p) * (u - p)).sum()
    }

    /// Adds `coef * d loss / d params`.
    fn add_loss_grad(&self, s: &[f64], u: &[f64], coef: f64, g: &mut [f64]) {
        let p = self.predict(s);
        match self {
            BcPolicy::Table { dim, .. } => {
                let i = s[0] as usize;
                for j in 0..*dim {
                    g[i * dim + j] -= 2.0 * coef * (u[j] - p[j]);
                }
            }
            BcPolicy::Linear { slope, .. } => {
                let d = slope.len();
                for j in 0..d {
                    let e = -2.0 * coef * (u[j] - p[j]);
                    g[j] += e * s[j];
                    g[d + j] += e;
                }
            }
        }
    }
}

impl Policy for BcPolicy {
    fn act(&self, _t: usize, state: &[f64], _rng: &mut Rng) -> Vec<f64> {
        self.predict(state)
    }
}

/// Weighted least-squares fit of `targets` at the given states; table
/// cells without data keep their previous value.
fn fit_exact(policy: &mut BcPolicy, states: &[&[f64]], targets: &[Vec<f64>], ridge: f64) -> Result<()> {
    match policy {
        BcPolicy::Table { dim, values, .. } => {
            let d = *dim;
            let mut sum = vec![0.0; values.len()];
            let mut cnt = vec![0usize; values.len() / d];
            for (s, y) in states.iter().zip(targets) {
                let i = s[0] as usize;
                cnt[i] += 1;
                for j in 0..d {
                    sum[i * d + j] += y[j];
                }
            }
            for (i, c) in cnt.iter().enumerate() {
                if *c > 0 {
                    for j in 0..d {
                        values[i * d + j] = sum[i * d + j] / *c as f64;
                    }
                }
            }
        }
        BcPolicy::Linear { slope, bias } => {
            for j in 0..slope.len() {
                let rows: Vec<Vec<f64>> = states.iter().map(|s| vec![s[j], 1.0]).collect();
                let y: Vec<f64> = targets.iter().map(|t| t[j]).collect();
                let w = least_squares(&rows, &y, ridge)
                    .ok_or_else(|| VildError::Training("least-squares system is singular".into()))?;
                slope[j] = w[0];
                bias[j] = w[1];
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BcSolver {
    #[default]
    Exact,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    pub solver: BcSolver,
    pub steps: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub optimizer: OptimizerKind,
    pub ridge: f64,
    /// Co-teaching: final keep ratio and the fraction of steps over which
    /// the ratio decays linearly from 1 to it.
    pub keep_floor: f64,
    pub warmup_fraction: f64,
    /// BC-D: EM sweeps, variance floor, initial noise log-variance.
    pub sweeps: usize,
    pub var_floor: f64,
    pub init_log_var: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            solver: BcSolver::Exact,
            steps: 2000,
            batch_size: 256,
            step_size: 1e-2,
            optimizer: OptimizerKind::Adam,
            ridge: 1e-10,
            keep_floor: 0.5,
            warmup_fraction: 0.2,
            sweeps: 50,
            var_floor: 1e-8,
            init_log_var: 0.25f64.ln(),
            eval_interval: 10,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.sweeps == 0 {
            return Err(VildError::config("steps, batch_size and sweeps must be positive"));
        }
        if !(self.step_size > 0.0) {
            return Err(VildError::config("step_size must be positive"));
        }
        if !(self.keep_floor > 0.0 && self.keep_floor <= 1.0) {
            return Err(VildError::config("keep-ratio must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(VildError::config("warmup_fraction must lie in [0, 1]"));
        }
        if !(self.var_floor > 0.0) {
            return Err(VildError::config("var_floor must be positive"));
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(VildError::config("eval_interval and eval_episodes must be positive"));
        }
        Ok(())
    }

    /// Keep ratio at (1-based) step `step` of `steps`.
    pub fn keep_ratio(&self, step: usize) -> f64 {
        let warm = self.warmup_fraction * self.steps as f64;
        if warm <= 0.0 {
            return self.keep_floor;
        }
        let frac = (step as f64 / warm).min(1.0);
        1.0 - (1.0 - self.keep_floor) * frac
    }
}

fn all_points(data: &DemoDataset) -> Vec<(usize, usize)> {
    data.trajectories
        .iter()
        .enumerate()
        .flat_map(|(n, tr)| (0..tr.len()).map(move |t| (n, t)))
        .collect()
}

fn mean_loss(policy: &BcPolicy, data: &DemoDataset, points: &[(usize, usize)]) -> f64 {
    let tot: f64 = points
        .iter()
        .map(|&(n, t)| policy.loss(&data.trajectories[n].states[t], &data.trajectories[n].actions[t]))
        .sum();
    tot / points.len() as f64
}

fn eval_row<P: Policy>(
    env: &dyn Environment,
    policy: &P,
    iter: usize,
    objective: f64,
    expertise: Vec<f64>,
    cfg: &OfflineConfig,
) -> Result<MetricRow> {
    let (mean_return, stderr_return) = expected_return(env, policy, cfg.eval_episodes, eval_seed(cfg.seed, iter))?;
    Ok(MetricRow {
        iter,
        transition_samples: 0,
        objective,
        mean_return,
        stderr_return,
        expertise,
    })
}

fn check_offline(task: &Task, data: &DemoDataset, cfg: &OfflineConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    check_dataset(task, data)?;
    if let Task::PointMass(m) = task {
        if m.dim != task.action_dim() {
            return Err(VildError::shape("linear regressor needs state and action dimensions to match"));
        }
    }
    Ok(all_points(data))
}

fn sample_batch(points: &[(usize, usize)], size: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    (0..size).map(|_| points[rng.random_range(0..points.len())]).collect()
}

fn sgd_step(policy: &mut BcPolicy, opt: &mut Optimizer, data: &DemoDataset, batch: &[(usize, usize)]) {
    let mut g = vec![0.0; policy.params().len()];
    let coef = 1.0 / batch.len() as f64;
    for &(n, t) in batch {
        let tr = &data.trajectories[n];
        policy.add_loss_grad(&tr.states[t], &tr.actions[t], coef, &mut g);
    }
    // The optimizers ascend; step along the negative loss gradient.
    g.iter_mut().for_each(|v| *v = -*v);
    let mut p = policy.params();
    opt.ascend(&mut p, &g);
    policy.set_params(&p);
}

const STREAM_BATCH: u64 = 0xBA7C;
const STREAM_PARTNER: u64 = 0xB2;

/// Least squares on the pooled `(s, u)` pairs, either in closed form or by
/// minibatch gradient steps from zero.
pub fn train_bc(task: &Task, data: &DemoDataset, cfg: &OfflineConfig) -> Result<TrainResult<BcPolicy>> {
    let points = check_offline(task, data, cfg)?;
    let env = task.env();
    let mut policy = BcPolicy::zeros(task);
    let mut metrics = RunMetrics::default();
    match cfg.solver {
        BcSolver::Exact => {
            let states: Vec<&[f64]> = points.iter().map(|&(n, t)| data.trajectories[n].states[t].as_slice()).collect();
            let targets: Vec<Vec<f64>> = points.iter().map(|&(n, t)| data.trajectories[n].actions[t].clone()).collect();
            fit_exact(&mut policy, &states, &targets, cfg.ridge)?;
            let obj = -mean_loss(&policy, data, &points);
            metrics.push(eval_row(env, &policy, 1, obj, vec![], cfg)?);
        }
        BcSolver::Sgd => {
            let mut rng = child_rng(cfg.seed, STREAM_BATCH);
            let mut opt = Optimizer::new(cfg.optimizer, policy.params().len(), cfg.step_size);
            for step in 1..=cfg.steps {
                let batch = sample_batch(&points, cfg.batch_size, &mut rng);
                sgd_step(&mut policy, &mut opt, data, &batch);
                if step % cfg.eval_interval == 0 || step == cfg.steps {
                    let obj = -mean_loss(&policy, data, &points);
                    metrics.push(eval_row(env, &policy, step, obj, vec![], cfg)?);
                }
            }
        }
    }
    Ok(TrainResult {
        params: policy,
        metrics,
        status: TrainStatus::Completed,
    })
}

/// Output of co-teaching: the first regressor plus selection statistics.
#[derive(Debug, Clone)]
pub struct CoteachOutcome {
    pub result: TrainResult<BcPolicy>,
    /// Samples selected for the first regressor after warm-up, by
    /// zero-based demonstrator index.
    pub selected_after_warmup: Vec<usize>,
}

/// Indices (ascending) of the `keep` smallest losses.
fn smallest(losses: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

/// Two regressors trained on the same minibatches; each updates on the
/// fraction of the batch with the smallest loss under the other. The
/// first regressor starts where BC starts and uses BC's batch stream, so
/// with keep ratio 1 it follows BC exactly.
pub fn train_coteaching(task: &Task, data: &DemoDataset, cfg: &OfflineConfig) -> Result<CoteachOutcome> {
    let points = check_offline(task, data, cfg)?;
    let env = task.env();
    let mut a = BcPolicy::zeros(task);
    let mut b = BcPolicy::zeros(task);
    {
        let mut prng = child_rng(cfg.seed, STREAM_PARTNER);
        let mut v = b.params();
        v.iter_mut().for_each(|x| *x = prng.random_range(-0.1..0.1));
        b.set_params(&v);
    }
    let mut rng = child_rng(cfg.seed, STREAM_BATCH);
    let mut opt_a = Optimizer::new(cfg.optimizer, a.params().len(), cfg.step_size);
    let mut opt_b = Optimizer::new(cfg.optimizer, b.params().len(), cfg.step_size);
    let mut metrics = RunMetrics::default();
    let mut selected = vec![0usize; data.k];
    let warm_end = (cfg.warmup_fraction * cfg.steps as f64).ceil() as usize;
    for step in 1..=cfg.steps {
        let batch = sample_batch(&points, cfg.batch_size, &mut rng);
        let keep = ((cfg.keep_ratio(step) * batch.len() as f64).round() as usize).clamp(1, batch.len());
        let loss_under = |p: &BcPolicy| -> Vec<f64> {
            batch
                .iter()
                .map(|&(n, t)| p.loss(&data.trajectories[n].states[t], &data.trajectories[n].actions[t]))
                .collect()
        };
        let for_a: Vec<(usize, usize)> = smallest(&loss_under(&b), keep).into_iter().map(|i| batch[i]).collect();
        let for_b: Vec<(usize, usize)> = smallest(&loss_under(&a), keep).into_iter().map(|i| batch[i]).collect();
        if step > warm_end {
            for &(n, _) in &for_a {
                if let Some(k) = data.trajectories[n].k_index() {
                    selected[k] += 1;
                }
            }
        }
        sgd_step(&mut a, &mut opt_a, data, &for_a);
        sgd_step(&mut b, &mut opt_b, data, &for_b);
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let obj = -mean_loss(&a, data, &points);
            metrics.push(eval_row(env, &a, step, obj, vec![], cfg)?);
        }
    }
    Ok(CoteachOutcome {
        result: TrainResult {
            params: a,
            metrics,
            status: TrainStatus::Completed,
        },
        selected_after_warmup: selected,
    })
}

/// BC-D parameters: Gaussian policy `N(mu(s), diag exp(policy_log_var))`,
/// per-demonstrator noise `C(k)`, and the per-datapoint Gaussian posterior
/// over the latent action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcdParams {
    pub policy: BcPolicy,
    pub policy_log_var: Vec<f64>,
    pub omega: ExpertiseParams,
    pub posterior_mean: Vec<Vec<f64>>,
    pub posterior_var: Vec<Vec<f64>>,
}

impl Policy for BcdParams {
    fn act(&self, t: usize, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        self.policy.act(t, state, rng)
    }
}

#[derive(Debug, Clone)]
pub struct BcdOutcome {
    pub result: TrainResult<BcdParams>,
    /// Variational objective after each sweep.
    pub objective_trace: Vec<f64>,
}

/// Variational objective per trajectory:
/// `E_q[log pi(a|s) + log p(u|a,k) - log q(a)]`.
pub fn bcd_objective(params: &BcdParams, data: &DemoDataset, points: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for (i, &(n, t)) in points.iter().enumerate() {
        let tr = &data.trajectories[n];
        let k = tr.k_index().expect("validated");
        let mu = params.policy.predict(&tr.states[t]);
        let u = &tr.actions[t];
        for j in 0..u.len() {
            let (m, v) = (params.posterior_mean[i][j], params.posterior_var[i][j]);
            let s = params.policy_log_var[j].exp();
            let c = params.omega.log_var[k][j].exp();
            total += -0.5 * (((m - mu[j]).powi(2) + v) / s + LN_2PI + s.ln());
            total += -0.5 * (((u[j] - m).powi(2) + v) / c + LN_2PI + c.ln());
            total += 0.5 * (LN_2PI + 1.0 + v.ln());
        }
    }
    total / data.trajectories.len() as f64
}

/// Variational EM with closed-form steps: the E-step sets each posterior
/// to the exact Gaussian; the M-step refits the policy mean by least
/// squares and the variances by moment matching (floored).
pub fn train_bcd(task: &Task, data: &DemoDataset, cfg: &OfflineConfig) -> Result<BcdOutcome> {
    let points = check_offline(task, data, cfg)?;
    let env = task.env();
    let d = task.action_dim();
    let states: Vec<&[f64]> = points.iter().map(|&(n, t)| data.trajectories[n].states[t].as_slice()).collect();
    let us: Vec<&[f64]> = points.iter().map(|&(n, t)| data.trajectories[n].actions[t].as_slice()).collect();
    let ks: Vec<usize> = points.iter().map(|&(n, _)| data.trajectories[n].k_index().expect("validated")).collect();
    let mut policy = BcPolicy::zeros(task);
    let targets: Vec<Vec<f64>> = us.iter().map(|u| u.to_vec()).collect();
    fit_exact(&mut policy, &states, &targets, cfg.ridge)?;
    let resid: Vec<f64> = (0..d)
        .map(|j| {
            let v = states
                .iter()
                .zip(&us)
                .map(|(s, u)| (u[j] - policy.predict(s)[j]).powi(2))
                .sum::<f64>()
                / points.len() as f64;
            v.max(cfg.var_floor).ln()
        })
        .collect();
    let mut params = BcdParams {
        policy,
        policy_log_var: resid,
        omega: ExpertiseParams::new(data.k, d, cfg.init_log_var),
        posterior_mean: targets,
        posterior_var: vec![vec![cfg.var_floor; d]; points.len()],
    };
    let mut metrics = RunMetrics::default();
    let mut trace = Vec::with_capacity(cfg.sweeps);
    for sweep in 1..=cfg.sweeps {
        // E-step.
        for i in 0..points.len() {
            let mu = params.policy.predict(states[i]);
            for j in 0..d {
                let ps = (-params.policy_log_var[j]).exp();
                let pc = (-params.omega.log_var[ks[i]][j]).exp();
                let v = 1.0 / (ps + pc);
                params.posterior_var[i][j] = v;
                params.posterior_mean[i][j] = v * (ps * mu[j] + pc * us[i][j]);
            }
        }
        // M-step.
        fit_exact(&mut params.policy, &states, &params.posterior_mean, cfg.ridge)?;
        let mut s_acc = vec![0.0; d];
        let mut c_acc = vec![vec![0.0; d]; data.k];
        let mut c_cnt = vec![0usize; data.k];
        for i in 0..points.len() {
            let mu = params.policy.predict(states[i]);
            c_cnt[ks[i]] += 1;
            for j in 0..d {
                let (m, v) = (params.posterior_mean[i][j], params.posterior_var[i][j]);
                s_acc[j] += (m - mu[j]).powi(2) + v;
                c_acc[ks[i]][j] += (us[i][j] - m).powi(2) + v;
            }
        }
        for j in 0..d {
            params.policy_log_var[j] = (s_acc[j] / points.len() as f64).max(cfg.var_floor).ln();
        }
        for k in 0..data.k {
            if c_cnt[k] > 0 {
                for j in 0..d {
                    params.omega.log_var[k][j] = (c_acc[k][j] / c_cnt[k] as f64).max(cfg.var_floor).ln();
                }
            }
        }
        let obj = bcd_objective(&params, data, &points);
        if !obj.is_finite() {
            return Ok(BcdOutcome {
                result: TrainResult {
                    params,
                    metrics,
                    status: TrainStatus::Diverged {
                        iter: sweep,
                        reason: "non-finite variational objective".into(),
                    },
                },
                objective_trace: trace,
            });
        }
        trace.push(obj);
        if sweep % cfg.eval_interval == 0 || sweep == cfg.sweeps {
            metrics.push(eval_row(env, &params, sweep, obj, params.omega.mean_diag(), cfg)?);
        }
    }
    Ok(BcdOutcome {
        result: TrainResult {
            params,
            metrics,
            status: TrainStatus::Completed,
        },
        objective_trace: trace,
    })
}

/// MaxEnt-IRL parameters: reward and learner policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlParams {
    pub reward: RewardParams,
    pub policy: PolicyParams,
}

impl Policy for IrlParams {
    fn act(&self, t: usize, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        self.policy.act(t, state, rng)
    }
}

/// Objective `T mean_points r(s, u)/alpha - E_q[sum_t r/alpha - log q]` and
/// its reward gradient, treating every noisy action as an expert action.
/// On grids `u` is read as its nearest grid action.
pub fn maxent_irl_phi_grad(
    reward: &RewardParams,
    policy: &PolicyParams,
    data: &DemoDataset,
    points: &[(usize, usize)],
    problem: Problem,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if points.is_empty() {
        return Err(VildError::shape("demonstration batch is empty"));
    }
    let horizon = data.horizon() as f64;
    let scale = horizon / points.len() as f64;
    let mut g = vec![0.0; reward.weights.len()];
    let mut demo = 0.0;
    for &(n, t) in points {
        let tr = &data.trajectories[n];
        let (s, u) = (&tr.states[t], &tr.actions[t]);
        match problem {
            Problem::Grid(mdp) => {
                let (si, a) = (s[0] as usize, mdp.nearest_action(u));
                let (r, dr) = reward.eval_table(si, a);
                demo += r;
                g[si * mdp.n_actions() + a] += scale * dr / alpha;
            }
            Problem::Continuous { .. } => {
                demo += reward.eval_cont(s, u).0;
                reward.add_grad_cont(s, u, scale / alpha, &mut g);
            }
        }
    }
    let (agent, ga) = agent_term(reward, policy, problem, alpha)?;
    g.iter_mut().zip(&ga).for_each(|(a, b)| *a += b);
    Ok((scale * demo / alpha - agent, g))
}

/// Alternating reward ascent and policy improvement on pooled data. Uses
/// the reward, policy and RL settings of [`TrainConfig`]; the noise,
/// posterior and importance-sampling settings do not apply.
pub fn train_maxent_irl(task: &Task, data: &DemoDataset, cfg: &TrainConfig) -> Result<TrainResult<IrlParams>> {
    cfg.validate()?;
    check_dataset(task, data)?;
    let init = init_params(task, data, cfg);
    let mut params = IrlParams {
        reward: init.reward,
        policy: init.policy,
    };
    let points = all_points(data);
    let mut rng = child_rng(cfg.seed, 0x1A1);
    let mut opt_phi = Optimizer::new(cfg.optimizer, params.reward.weights.len(), cfg.phi_step());
    let n_policy = match &params.policy {
        PolicyParams::Gaussian(p) => p.to_vec().len(),
        PolicyParams::Tabular(_) => 0,
    };
    let mut opt_pol = Optimizer::new(cfg.optimizer, n_policy, cfg.policy_step());
    let mut agent: Vec<Trajectory> = Vec::new();
    let mut samples = 0u64;
    let mut metrics = RunMetrics::default();
    let mut last_good = params.clone();
    let d = task.action_dim();
    let mut batches = 0u64;
    let mut collect = |params: &IrlParams, agent: &mut Vec<Trajectory>, samples: &mut u64| -> Result<()> {
        if let Task::PointMass(m) = task {
            let n = cfg.replay_size.div_ceil(m.horizon).max(2);
            let seed = derive_seed(derive_seed(cfg.seed, 0xB0FF), batches);
            batches += 1;
            *agent = rollouts(m, &params.policy, &vec![cfg.sigma_exec; d], n, seed)?
                .into_iter()
                .map(|r| r.trajectory)
                .collect();
            *samples += (n * m.horizon) as u64;
        }
        Ok(())
    };
    // Unused by the IRL objective; `Problem` carries it for VILD.
    let expectation = crate::vild::Expectation::MonteCarlo { samples: 1, seed: 0 };
    for iter in 1..=cfg.iterations {
        collect(&params, &mut agent, &mut samples)?;
        for _ in 0..cfg.phi_updates {
            let batch = if cfg.batch_size >= points.len() {
                points.clone()
            } else {
                sample_batch(&points, cfg.batch_size, &mut rng)
            };
            let (_, g) = maxent_irl_phi_grad(
                &params.reward,
                &params.policy,
                data,
                &batch,
                problem_for(task, &agent, &expectation),
                cfg.alpha,
            )?;
            opt_phi.ascend(&mut params.reward.weights, &g);
        }
        for u in 0..cfg.policy_updates {
            if u > 0 {
                collect(&params, &mut agent, &mut samples)?;
            }
            match (task, &mut params.policy) {
                (Task::Tabular(m), PolicyParams::Tabular(p)) => {
                    *p = solve_tabular_policy(m, &params.reward.table_values(), cfg.alpha, cfg.gamma)?;
                }
                (Task::PointMass(m), PolicyParams::Gaussian(p)) => {
                    let g = soft_policy_gradient(p, &params.reward, m, &agent, cfg.alpha, cfg.gamma);
                    let mut v = p.to_vec();
                    opt_pol.ascend(&mut v, &g);
                    p.set_from(&v);
                }
                _ => return Err(VildError::shape("policy representation does not match the task")),
            }
        }
        if iter % cfg.eval_interval == 0 || iter == cfg.iterations {
            let objective = if matches!(task, Task::PointMass(_)) && agent.is_empty() {
                f64::NAN
            } else {
                maxent_irl_phi_grad(
                    &params.reward,
                    &params.policy,
                    data,
                    &points,
                    problem_for(task, &agent, &expectation),
                    cfg.alpha,
                )?
                .0
            };
            if objective.is_infinite() || params.reward.weights.iter().any(|w| !w.is_finite()) {
                return Ok(TrainResult {
                    params: last_good,
                    metrics,
                    status: TrainStatus::Diverged {
                        iter,
                        reason: "non-finite objective".into(),
                    },
                });
            }
            let (mean_return, stderr_return) =
                expected_return(task.env(), &params.policy, cfg.eval_episodes, cfg.eval_seed(iter))?;
            metrics.push(MetricRow {
                iter,
                transition_samples: samples,
                objective,
                mean_return,
                stderr_return,
                expertise: vec![],
            });
        }
        last_good.clone_from(&params);
    }
    Ok(TrainResult {
        params,
        metrics,
        status: TrainStatus::Completed,
    })
}

fn problem_for<'a>(task: &'a Task, agent: &'a [Trajectory], expectation: &'a crate::vild::Expectation) -> Problem<'a> {
    match task {
        Task::Tabular(m) => Problem::Grid(m),
        Task::PointMass(_) => Problem::Continuous { agent, expectation },
    }
}
