//! Environments, exact maximum-entropy solving on tabular tasks, and rollouts.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VildError};
use crate::math::{log_sum_exp, mean, std_error};
use crate::rng::{child_rng, rng_from_seed, Rng};

const ROW_TOL: f64 = 1e-12;

/// Finite-horizon MDP with discrete states and a grid of real-valued actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub actions: Vec<Vec<f64>>,
    pub horizon: usize,
    pub init_dist: Vec<f64>,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `true_reward[s][a]`
    pub true_reward: Vec<Vec<f64>>,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(VildError::shape(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(VildError::shape(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        actions: Vec<Vec<f64>>,
        horizon: usize,
        init_dist: Vec<f64>,
        transition: Vec<Vec<Vec<f64>>>,
        true_reward: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n_states = init_dist.len();
        if n_states == 0 {
            return Err(VildError::shape("at least one state is required"));
        }
        if actions.len() < 2 {
            return Err(VildError::shape("at least two grid actions are required"));
        }
        if horizon == 0 {
            return Err(VildError::shape("horizon must be at least 1"));
        }
        let d = actions[0].len();
        if d == 0 || actions.iter().any(|a| a.len() != d) {
            return Err(VildError::shape("grid actions must share a nonzero dimension"));
        }
        check_row(&init_dist, "init_dist")?;
        if transition.len() != n_states || true_reward.len() != n_states {
            return Err(VildError::shape("transition/reward tables must have one row per state"));
        }
        for (s, rows) in transition.iter().enumerate() {
            if rows.len() != actions.len() || true_reward[s].len() != actions.len() {
                return Err(VildError::shape(format!("state {s}: wrong number of actions")));
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != n_states {
                    return Err(VildError::shape(format!("transition[{s}][{a}] has wrong length")));
                }
                check_row(row, &format!("transition[{s}][{a}]"))?;
            }
        }
        Ok(Self {
            n_states,
            actions,
            horizon,
            init_dist,
            transition,
            true_reward,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }

    /// Line of `n_states` cells, actions {-1, +1}, start at cell 0. Moves
    /// succeed with probability `1 - slip` and otherwise leave the agent in
    /// place. Reward is the probability of landing on the rightmost cell.
    pub fn chain(n_states: usize, horizon: usize, slip: f64) -> Result<Self> {
        if n_states < 2 {
            return Err(VildError::config("chain needs at least 2 states"));
        }
        if !(0.0..1.0).contains(&slip) {
            return Err(VildError::config("slip must lie in [0, 1)"));
        }
        let actions = vec![vec![-1.0], vec![1.0]];
        let mut transition = vec![vec![vec![0.0; n_states]; 2]; n_states];
        let mut reward = vec![vec![0.0; 2]; n_states];
        for s in 0..n_states {
            for (a, step) in [-1i64, 1].into_iter().enumerate() {
                let target = (s as i64 + step).clamp(0, n_states as i64 - 1) as usize;
                transition[s][a][target] += 1.0 - slip;
                transition[s][a][s] += slip;
                reward[s][a] = transition[s][a][n_states - 1];
            }
        }
        let mut init = vec![0.0; n_states];
        init[0] = 1.0;
        Self::new(actions, horizon, init, transition, reward)
    }

    /// Random instance for oracle checks: Dirichlet(1) rows, standard
    /// normal rewards, a 1-D grid evenly spaced on [-1, 1].
    pub fn random(n_states: usize, n_actions: usize, horizon: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let simplex = |n: usize, rng: &mut Rng| -> Vec<f64> {
            let g: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let s: f64 = g.iter().sum();
            let mut p: Vec<f64> = g.iter().map(|x| x / s).collect();
            // Push the rounding residue into the largest entry.
            let resid = 1.0 - p.iter().sum::<f64>();
            let imax = (0..n).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap_or(0);
            p[imax] += resid;
            p
        };
        let actions = grid_1d(n_actions);
        let init = simplex(n_states, &mut rng);
        let transition = (0..n_states)
            .map(|_| (0..n_actions).map(|_| simplex(n_states, &mut rng)).collect())
            .collect();
        let reward = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Self::new(actions, horizon, init, transition, reward)
    }

    /// Like [`TabularMdp::random`] but every `(s, a)` moves to one uniformly
    /// drawn successor. The initial distribution stays random.
    pub fn random_deterministic(n_states: usize, n_actions: usize, horizon: usize, seed: u64) -> Result<Self> {
        let mut m = Self::random(n_states, n_actions, horizon, seed)?;
        let mut rng = rng_from_seed(crate::rng::derive_seed(seed, 0xD37));
        for row in m.transition.iter_mut().flatten() {
            row.iter_mut().for_each(|p| *p = 0.0);
            row[rng.random_range(0..n_states)] = 1.0;
        }
        Ok(m)
    }

    /// Index of the grid action nearest to `a` (Euclidean; ties go to the
    /// lower index).
    pub fn nearest_action(&self, a: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, g) in self.actions.iter().enumerate() {
            let d: f64 = g.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn check_reward_shape(&self, reward: &[Vec<f64>]) -> Result<()> {
        if reward.len() != self.n_states || reward.iter().any(|r| r.len() != self.n_actions()) {
            return Err(VildError::shape(format!(
                "reward table must be {}x{}",
                self.n_states,
                self.n_actions()
            )));
        }
        Ok(())
    }

    /// State marginals `d_t(s)` for t = 0..T under a time-indexed policy.
    pub fn state_marginals(&self, policy: &TabularPolicy) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.horizon);
        let mut d = self.init_dist.clone();
        for t in 0..self.horizon {
            let mut next = vec![0.0; self.n_states];
            for s in 0..self.n_states {
                if d[s] == 0.0 {
                    continue;
                }
                for a in 0..self.n_actions() {
                    let w = d[s] * policy.probs[t][s][a];
                    if w == 0.0 {
                        continue;
                    }
                    for (s2, p) in self.transition[s][a].iter().enumerate() {
                        next[s2] += w * p;
                    }
                }
            }
            out.push(std::mem::replace(&mut d, next));
        }
        out
    }

    /// Exact expected cumulative `reward` under `policy`.
    pub fn exact_return(&self, policy: &TabularPolicy, reward: &[Vec<f64>]) -> f64 {
        let d = self.state_marginals(policy);
        let mut total = 0.0;
        for (t, dt) in d.iter().enumerate() {
            for s in 0..self.n_states {
                for a in 0..self.n_actions() {
                    total += dt[s] * policy.probs[t][s][a] * reward[s][a];
                }
            }
        }
        total
    }
}

/// `n` evenly spaced 1-D actions on [-1, 1].
pub fn grid_1d(n: usize) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![0.0]];
    }
    (0..n)
        .map(|i| vec![-1.0 + 2.0 * i as f64 / (n - 1) as f64])
        .collect()
}

/// Time-indexed stochastic policy over grid actions: `probs[t][s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn uniform(mdp: &TabularMdp) -> Self {
        let na = mdp.n_actions();
        Self {
            probs: vec![vec![vec![1.0 / na as f64; na]; mdp.n_states]; mdp.horizon],
            actions: mdp.actions.clone(),
        }
    }

    /// Deterministic policy from a `[t][s]` table of action indices.
    pub fn deterministic(mdp: &TabularMdp, choice: &[Vec<usize>]) -> Self {
        let na = mdp.n_actions();
        let probs = choice
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&a| {
                        let mut p = vec![0.0; na];
                        p[a] = 1.0;
                        p
                    })
                    .collect()
            })
            .collect();
        Self {
            probs,
            actions: mdp.actions.clone(),
        }
    }

    /// Mean entropy of the action distribution over (t, s).
    pub fn mean_entropy(&self) -> f64 {
        let mut h = 0.0;
        let mut n = 0usize;
        for row in self.probs.iter().flatten() {
            h += crate::math::entropy(row);
            n += 1;
        }
        h / n as f64
    }
}

/// Soft Q and V tables of a finite-horizon problem, indexed `[t][s][a]`
/// and `[t][s]` (V has an extra zero row at t = T).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftValues {
    pub q: Vec<Vec<Vec<f64>>>,
    pub v: Vec<Vec<f64>>,
    pub policy: TabularPolicy,
    pub alpha: f64,
    pub gamma: f64,
}

impl SoftValues {
    /// `log sum_s p1(s) exp(V_1(s) / alpha)`: the log-partition of the
    /// trajectory distribution when gamma = 1.
    pub fn log_partition(&self, init_dist: &[f64]) -> f64 {
        let terms: Vec<f64> = init_dist
            .iter()
            .zip(&self.v[0])
            .map(|(p, v)| if *p > 0.0 { p.ln() + v / self.alpha } else { f64::NEG_INFINITY })
            .collect();
        log_sum_exp(&terms)
    }
}

/// Backward soft Bellman recursion
/// `Q_t = r + gamma * P V_{t+1}`, `V_t = alpha * log sum_a exp(Q_t / alpha)`.
pub fn soft_value_iteration(
    mdp: &TabularMdp,
    reward: &[Vec<f64>],
    alpha: f64,
    gamma: f64,
) -> Result<SoftValues> {
    mdp.check_reward_shape(reward)?;
    if !(alpha > 0.0) {
        return Err(VildError::config("alpha must be positive"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(VildError::config("gamma must lie in (0, 1]"));
    }
    let (ns, na, horizon) = (mdp.n_states, mdp.n_actions(), mdp.horizon);
    let mut q = vec![vec![vec![0.0; na]; ns]; horizon];
    let mut v = vec![vec![0.0; ns]; horizon + 1];
    let mut probs = vec![vec![vec![0.0; na]; ns]; horizon];
    for t in (0..horizon).rev() {
        for s in 0..ns {
            for a in 0..na {
                let cont: f64 = mdp.transition[s][a]
                    .iter()
                    .zip(&v[t + 1])
                    .map(|(p, v)| p * v)
                    .sum();
                q[t][s][a] = reward[s][a] + gamma * cont;
            }
            let scaled: Vec<f64> = q[t][s].iter().map(|x| x / alpha).collect();
            let lse = log_sum_exp(&scaled);
            v[t][s] = alpha * lse;
            for a in 0..na {
                probs[t][s][a] = (scaled[a] - lse).exp();
            }
        }
    }
    Ok(SoftValues {
        q,
        v,
        policy: TabularPolicy {
            probs,
            actions: mdp.actions.clone(),
        },
        alpha,
        gamma,
    })
}

/// Hard (alpha -> 0) backward induction; ties go to the lower action index.
pub fn optimal_tabular_policy(mdp: &TabularMdp, reward: &[Vec<f64>]) -> Result<TabularPolicy> {
    mdp.check_reward_shape(reward)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions());
    let mut v = vec![0.0; ns];
    let mut choice = vec![vec![0usize; ns]; mdp.horizon];
    for t in (0..mdp.horizon).rev() {
        let mut nv = vec![0.0; ns];
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let q = reward[s][a] + mdp.transition[s][a].iter().zip(&v).map(|(p, v)| p * v).sum::<f64>();
                if q > best + 1e-12 {
                    best = q;
                    choice[t][s] = a;
                }
            }
            nv[s] = best;
        }
        v = nv;
    }
    Ok(TabularPolicy::deterministic(mdp, &choice))
}

/// Point mass moving in `dim` dimensions: `x' = x + clip(a) (+ noise)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMassMdp {
    pub dim: usize,
    pub horizon: usize,
    pub goal: Vec<f64>,
    /// Per-coordinate actuator limit; executed actions are clipped to it.
    pub action_bound: f64,
    pub action_cost: f64,
    /// Initial positions are uniform on `[init_low, init_high]^dim`.
    pub init_low: f64,
    pub init_high: f64,
    /// Standard deviation of additive process noise.
    pub process_noise: f64,
}

impl PointMassMdp {
    pub fn new(dim: usize, horizon: usize) -> Result<Self> {
        let m = Self {
            dim,
            horizon,
            goal: vec![0.0; dim],
            action_bound: 0.5,
            action_cost: 0.1,
            init_low: -0.5,
            init_high: 0.5,
            process_noise: 0.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.horizon == 0 {
            return Err(VildError::shape("point mass needs dim >= 1 and horizon >= 1"));
        }
        if self.goal.len() != self.dim {
            return Err(VildError::shape("goal dimension mismatch"));
        }
        if !(self.action_bound > 0.0) || self.action_cost < 0.0 || self.init_low > self.init_high {
            return Err(VildError::config("invalid point-mass parameters"));
        }
        if self.process_noise < 0.0 {
            return Err(VildError::config("process noise must be nonnegative"));
        }
        Ok(())
    }

    pub fn clip(&self, a: f64) -> f64 {
        a.clamp(-self.action_bound, self.action_bound)
    }

    /// Ground-truth reward of executing `a` at `x`.
    pub fn reward(&self, x: &[f64], a: &[f64]) -> f64 {
        let mut r = 0.0;
        for j in 0..self.dim {
            let ac = self.clip(a[j]);
            let e = x[j] + ac - self.goal[j];
            r -= e * e + self.action_cost * ac * ac;
        }
        r
    }

    /// Time-varying LQR gains of the unconstrained problem; the expert
    /// applies `clip(-K_t (x - goal))`.
    pub fn lqr_gains(&self) -> Vec<f64> {
        let c = self.action_cost;
        let mut p_next = 0.0;
        let mut gains = vec![0.0; self.horizon];
        for t in (0..self.horizon).rev() {
            let pp = 1.0 + p_next;
            gains[t] = pp / (pp + c);
            p_next = if c == 0.0 { 0.0 } else { pp * c / (pp + c) };
        }
        gains
    }
}

/// The environment interface used by rollouts and demonstration generation.
pub trait Environment: Sync {
    fn horizon(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn initial_state(&self, rng: &mut Rng) -> Vec<f64>;
    /// Executes a real-valued action, returning the true reward and next state.
    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> (f64, Vec<f64>);
}

fn sample_categorical(p: &[f64], rng: &mut Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if x < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum; take the last
    // index with positive mass.
    p.iter().rposition(|&q| q > 0.0).unwrap_or(p.len() - 1)
}

impl Environment for TabularMdp {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn action_dim(&self) -> usize {
        TabularMdp::action_dim(self)
    }

    fn initial_state(&self, rng: &mut Rng) -> Vec<f64> {
        vec![sample_categorical(&self.init_dist, rng) as f64]
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> (f64, Vec<f64>) {
        let s = state[0] as usize;
        let a = self.nearest_action(action);
        let s2 = sample_categorical(&self.transition[s][a], rng);
        (self.true_reward[s][a], vec![s2 as f64])
    }
}

impl Environment for PointMassMdp {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn action_dim(&self) -> usize {
        self.dim
    }

    fn initial_state(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.dim)
            .map(|_| {
                if self.init_high > self.init_low {
                    rng.random_range(self.init_low..self.init_high)
                } else {
                    self.init_low
                }
            })
            .collect()
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> (f64, Vec<f64>) {
        let r = self.reward(state, action);
        let next = (0..self.dim)
            .map(|j| {
                let mut x = state[j] + self.clip(action[j]);
                if self.process_noise > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    x += self.process_noise * z;
                }
                x
            })
            .collect();
        (r, next)
    }
}

/// A policy that can be sampled for rollouts.
pub trait Policy: Sync {
    fn act(&self, t: usize, state: &[f64], rng: &mut Rng) -> Vec<f64>;
}

impl Policy for TabularPolicy {
    fn act(&self, t: usize, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        let s = state[0] as usize;
        let a = sample_categorical(&self.probs[t][s], rng);
        self.actions[a].clone()
    }
}

/// Clipped finite-horizon LQR controller of a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrPolicy {
    pub gains: Vec<f64>,
    pub goal: Vec<f64>,
    pub action_bound: f64,
}

impl LqrPolicy {
    pub fn mean_action(&self, t: usize, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.goal)
            .map(|(x, g)| (-self.gains[t] * (x - g)).clamp(-self.action_bound, self.action_bound))
            .collect()
    }
}

impl Policy for LqrPolicy {
    fn act(&self, t: usize, state: &[f64], _rng: &mut Rng) -> Vec<f64> {
        self.mean_action(t, state)
    }
}

/// Stationary Gaussian policy with per-coordinate affine mean
/// `mu_j = w_j x_j + b_j` and state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLinearPolicy {
    pub slope: Vec<f64>,
    pub bias: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianLinearPolicy {
    pub fn new(dim: usize, log_std: f64) -> Self {
        Self {
            slope: vec![0.0; dim],
            bias: vec![0.0; dim],
            log_std: vec![log_std; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.slope.len()
    }

    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|j| self.slope[j] * x[j] + self.bias[j]).collect()
    }

    pub fn log_prob(&self, x: &[f64], a: &[f64]) -> f64 {
        let mut lp = 0.0;
        for j in 0..self.dim() {
            let sd = self.log_std[j].exp();
            let z = (a[j] - self.slope[j] * x[j] - self.bias[j]) / sd;
            lp += -0.5 * z * z - self.log_std[j] - 0.5 * crate::math::LN_2PI;
        }
        lp
    }

    /// Parameters flattened as `[slope.., bias.., log_std..]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.slope.clone();
        v.extend(&self.bias);
        v.extend(&self.log_std);
        v
    }

    pub fn set_from(&mut self, v: &[f64]) {
        let d = self.dim();
        self.slope.copy_from_slice(&v[..d]);
        self.bias.copy_from_slice(&v[d..2 * d]);
        self.log_std.copy_from_slice(&v[2 * d..3 * d]);
    }

    /// Gradient of `log_prob` in the flattened layout.
    pub fn grad_log_prob(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut g = vec![0.0; 3 * d];
        for j in 0..d {
            let var = (2.0 * self.log_std[j]).exp();
            let e = a[j] - self.slope[j] * x[j] - self.bias[j];
            g[j] = e / var * x[j];
            g[d + j] = e / var;
            g[2 * d + j] = e * e / var - 1.0;
        }
        g
    }
}

impl Policy for GaussianLinearPolicy {
    fn act(&self, _t: usize, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                let z: f64 = StandardNormal.sample(rng);
                self.slope[j] * state[j] + self.bias[j] + self.log_std[j].exp() * z
            })
            .collect()
    }
}

/// One episode: states `s_1..s_T`, actions, optional 1-based demonstrator id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    pub states: Vec<Vec<f64>>,
    #[serde(rename = "u")]
    pub actions: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Zero-based demonstrator index.
    pub fn k_index(&self) -> Option<usize> {
        self.k.map(|k| k - 1)
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.states.len() != horizon || self.actions.len() != horizon {
            return Err(VildError::shape(format!(
                "trajectory has {} states and {} actions, expected {horizon}",
                self.states.len(),
                self.actions.len()
            )));
        }
        Ok(())
    }
}

/// Rollout together with the per-step true rewards of the executed actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub rewards: Vec<f64>,
}

impl Rollout {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Samples `a ~ policy`, executes `a + eps`, `eps ~ N(0, diag(exec_noise_var))`.
/// The recorded actions are the policy samples `a`.
pub fn rollout<E: Environment + ?Sized, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    exec_noise_var: &[f64],
    seed: u64,
) -> Result<Rollout> {
    let d = env.action_dim();
    if exec_noise_var.len() != d {
        return Err(VildError::shape(format!(
            "execution noise has {} entries, expected {d}",
            exec_noise_var.len()
        )));
    }
    if exec_noise_var.iter().any(|v| !(*v >= 0.0)) {
        return Err(VildError::shape("execution noise variances must be nonnegative"));
    }
    let mut rng = rng_from_seed(seed);
    let horizon = env.horizon();
    let mut s = env.initial_state(&mut rng);
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let a = policy.act(t, &s, &mut rng);
        let exec: Vec<f64> = a
            .iter()
            .zip(exec_noise_var)
            .map(|(a, v)| {
                if *v > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    a + v.sqrt() * z
                } else {
                    *a
                }
            })
            .collect();
        let (r, next) = env.step(&s, &exec, &mut rng);
        states.push(std::mem::replace(&mut s, next));
        actions.push(a);
        rewards.push(r);
    }
    Ok(Rollout {
        trajectory: Trajectory {
            k: None,
            states,
            actions,
        },
        rewards,
    })
}

/// Parallel batch of rollouts with seeds derived from `(seed, i)`,
/// returned in index order.
pub fn rollouts<E: Environment + ?Sized, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    exec_noise_var: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<Rollout>> {
    (0..n)
        .into_par_iter()
        .map(|i| rollout(env, policy, exec_noise_var, crate::rng::derive_seed(seed, i as u64)))
        .collect()
}

/// Monte-Carlo mean and standard error of the true return, noise-free execution.
pub fn expected_return<E: Environment + ?Sized, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    n_episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(VildError::config("n_episodes must be at least 1"));
    }
    let zero = vec![0.0; env.action_dim()];
    let returns: Vec<f64> = rollouts(env, policy, &zero, n_episodes, seed)?
        .iter()
        .map(Rollout::total_reward)
        .collect();
    Ok((mean(&returns), std_error(&returns)))
}

/// Per-episode returns; exposed for paired comparisons.
pub fn episode_returns<E: Environment + ?Sized, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let zero = vec![0.0; env.action_dim()];
    Ok(rollouts(env, policy, &zero, n_episodes, seed)?
        .iter()
        .map(Rollout::total_reward)
        .collect())
}

/// The expert used to generate demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExpertPolicy {
    Tabular(TabularPolicy),
    Lqr(LqrPolicy),
}

impl Policy for ExpertPolicy {
    fn act(&self, t: usize, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        match self {
            ExpertPolicy::Tabular(p) => p.act(t, state, rng),
            ExpertPolicy::Lqr(p) => p.act(t, state, rng),
        }
    }
}

/// Tabular: exact backward induction on the true reward (the greedy limit
/// of soft value iteration). Point mass: clipped LQR.
pub fn train_optimal_tabular(mdp: &TabularMdp) -> Result<TabularPolicy> {
    optimal_tabular_policy(mdp, &mdp.true_reward)
}

pub fn train_optimal_point_mass(mdp: &PointMassMdp) -> Result<LqrPolicy> {
    mdp.validate()?;
    let gains = mdp.lqr_gains();
    if gains.iter().any(|g| !g.is_finite()) {
        return Err(VildError::Training("LQR recursion diverged".into()));
    }
    Ok(LqrPolicy {
        gains,
        goal: mdp.goal.clone(),
        action_bound: mdp.action_bound,
    })
}

/// Environments selectable from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum Task {
    Tabular(TabularMdp),
    PointMass(PointMassMdp),
}

impl Task {
    pub fn env(&self) -> &dyn Environment {
        match self {
            Task::Tabular(m) => m,
            Task::PointMass(m) => m,
        }
    }

    pub fn horizon(&self) -> usize {
        self.env().horizon()
    }

    pub fn action_dim(&self) -> usize {
        self.env().action_dim()
    }

    pub fn train_optimal_policy(&self) -> Result<ExpertPolicy> {
        Ok(match self {
            Task::Tabular(m) => ExpertPolicy::Tabular(train_optimal_tabular(m)?),
            Task::PointMass(m) => ExpertPolicy::Lqr(train_optimal_point_mass(m)?),
        })
    }
}

/// Seeded child generator for trajectory `i` of a batch.
pub fn episode_rng(seed: u64, i: u64) -> Rng {
    child_rng(seed, i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_vi_single_state_examples() {
        let one = |r: Vec<f64>| {
            TabularMdp::new(
                vec![vec![0.0], vec![1.0]],
                1,
                vec![1.0],
                vec![vec![vec![1.0], vec![1.0]]],
                vec![r],
            )
            .unwrap()
        };
        let m = one(vec![0.0, 0.0]);
        let sv = soft_value_iteration(&m, &m.true_reward, 1.0, 1.0).unwrap();
        assert!((sv.v[0][0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sv.policy.probs[0][0], vec![0.5, 0.5]);

        let m = one(vec![1.0, 0.0]);
        let sv = soft_value_iteration(&m, &m.true_reward, 1.0, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((sv.v[0][0] - (e + 1.0).ln()).abs() < 1e-14);
        assert!((sv.policy.probs[0][0][0] - e / (e + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn lqr_gain_single_step() {
        let mut m = PointMassMdp::new(1, 1).unwrap();
        m.action_cost = 1.0;
        // minimize (x + a)^2 + a^2 -> a = -x/2
        assert!((m.lqr_gains()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nearest_action_ties_go_low() {
        let m = TabularMdp::chain(3, 2, 0.0).unwrap();
        assert_eq!(m.nearest_action(&[0.0]), 0);
        assert_eq!(m.nearest_action(&[0.2]), 1);
    }
}
