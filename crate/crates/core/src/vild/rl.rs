//! Entropy-regularized policy improvement for the learner policy.

use crate::env::{soft_value_iteration, GaussianLinearPolicy, PointMassMdp, TabularMdp, TabularPolicy, Trajectory};
use crate::error::Result;

use super::model::RewardParams;

/// Exact MaxEnt-RL optimum of a tabular problem for the reward table.
pub fn solve_tabular_policy(mdp: &TabularMdp, reward: &[Vec<f64>], alpha: f64, gamma: f64) -> Result<TabularPolicy> {
    Ok(soft_value_iteration(mdp, reward, alpha, gamma)?.policy)
}

/// Reparameterized actor gradient for the point mass.
///
/// Every visited step contributes `dG_t/da_t * da_t/dtheta` plus the
/// gradient of its Gaussian entropy, where `G_t = r_t / alpha + gamma G_{t+1}`
/// is the return-to-go and `dG_t/da_t` is propagated backwards through the
/// known dynamics. Each recorded trajectory fixes its start state and
/// standard-normal draws `eps_t = (a_t - mean(x_t)) / std`; the
/// executed-minus-clipped residual of each transition is held fixed too.
pub fn soft_policy_gradient(
    policy: &GaussianLinearPolicy,
    reward: &RewardParams,
    mdp: &PointMassMdp,
    agent: &[Trajectory],
    alpha: f64,
    gamma: f64,
) -> Vec<f64> {
    let d = policy.dim();
    let mut g = vec![0.0; 3 * d];
    if agent.is_empty() {
        return g;
    }
    let m = agent.len() as f64;
    let sd: Vec<f64> = policy.log_std.iter().map(|v| v.exp()).collect();
    // lam[j] = dG_{t+1} / dx_{t+1, j}
    let mut lam = vec![0.0; d];
    let mut rx = vec![0.0; d];
    let mut ra = vec![0.0; d];
    for tr in agent {
        lam.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..tr.len()).rev() {
            let (x, a) = (&tr.states[t], &tr.actions[t]);
            let (_, dr) = reward.eval_cont(x, a);
            reward.grad_state(x, a, dr, &mut rx);
            reward.grad_action(x, a, dr, &mut ra);
            for j in 0..d {
                let inside = a[j].abs() < mdp.action_bound;
                let ga = ra[j] / alpha + if inside { gamma * lam[j] } else { 0.0 };
                let eps = (a[j] - policy.slope[j] * x[j] - policy.bias[j]) / sd[j];
                g[j] += ga * x[j] / m;
                g[d + j] += ga / m;
                g[2 * d + j] += (ga * sd[j] * eps + 1.0) / m;
                lam[j] = rx[j] / alpha + gamma * lam[j] + ga * policy.slope[j];
            }
        }
    }
    g
}
