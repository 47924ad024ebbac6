//! Brute-force references on tiny grid instances.
//!
//! Integrals over actions are replaced by sums over the action grid
//! (counting measure). Both sides of every identity use the same grid, so
//! the identities hold exactly.

use serde::{Deserialize, Serialize};

use crate::demogen::DemoDataset;
use crate::env::{soft_value_iteration, TabularMdp, TabularPolicy};
use crate::error::{Result, VildError};
use crate::math::{log_sum_exp, KahanSum};
use crate::vild::{log_noisy_model, ExpertiseParams, NoiseModel, RewardParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationBudget {
    pub max_states: usize,
    pub max_action_grid: usize,
    pub max_horizon: usize,
    pub max_traj_count: u128,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self {
            max_states: 8,
            max_action_grid: 8,
            max_horizon: 8,
            max_traj_count: 20_000_000,
        }
    }
}

impl EnumerationBudget {
    /// Number of `(k, s_1, (a_t, u_t, s_{t+1})_t)` sequences.
    pub fn trajectory_count(mdp: &TabularMdp, k: usize) -> u128 {
        let branch = (mdp.n_actions() as u128).pow(2) * mdp.n_states as u128;
        let mut c = k as u128 * mdp.n_states as u128;
        for _ in 0..mdp.horizon {
            c = c.saturating_mul(branch);
        }
        c
    }

    pub fn check(&self, mdp: &TabularMdp, k: usize) -> Result<()> {
        let required = Self::trajectory_count(mdp, k);
        if mdp.n_states > self.max_states
            || mdp.n_actions() > self.max_action_grid
            || mdp.horizon > self.max_horizon
            || required > self.max_traj_count
        {
            return Err(VildError::BudgetExceeded {
                required,
                budget: self.max_traj_count,
            });
        }
        Ok(())
    }
}

/// Everything needed to evaluate `l = r + log p_omega` on a grid.
#[derive(Debug, Clone, Copy)]
pub struct GridModel<'a> {
    pub mdp: &'a TabularMdp,
    pub reward: &'a RewardParams,
    pub omega: &'a ExpertiseParams,
    pub p_k: &'a [f64],
    pub alpha: f64,
    pub noise_model: NoiseModel,
}

impl GridModel<'_> {
    /// `l(s, a, u, k) / alpha` for a real-valued noisy action `u`.
    pub fn scaled_l(&self, s: usize, a: usize, u: &[f64], k: usize) -> f64 {
        let (r, _) = self.reward.eval_table(s, a);
        (r + log_noisy_model(u, &self.mdp.actions[a], self.omega, k, self.noise_model)) / self.alpha
    }

    /// `f_t = log sum_a exp(l / alpha)`.
    pub fn f_t(&self, s: usize, u: &[f64], k: usize) -> f64 {
        let l: Vec<f64> = (0..self.mdp.n_actions()).map(|a| self.scaled_l(s, a, u, k)).collect();
        log_sum_exp(&l)
    }
}

/// Streaming log-sum-exp with compensated accumulation in a fixed order.
struct LogAccumulator {
    max: f64,
    sum: KahanSum,
}

impl LogAccumulator {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: KahanSum::new(),
        }
    }

    fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            let factor = if self.max == f64::NEG_INFINITY { 0.0 } else { (self.max - x).exp() };
            let old = self.sum.value() * factor;
            self.sum = KahanSum::new();
            self.sum.add(old);
            self.max = x;
        }
        self.sum.add((x - self.max).exp());
    }

    fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.value().ln()
        }
    }
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `log sum_k p(k) sum_traj p1(s1) prod_t P(s'|s, u) exp(l / alpha)` by
/// explicit enumeration of every trajectory; `u` ranges over the grid.
pub fn brute_force_log_partition(model: &GridModel, budget: &EnumerationBudget) -> Result<f64> {
    let mdp = model.mdp;
    budget.check(mdp, model.p_k.len())?;
    let na = mdp.n_actions();
    // l[k][s][a][u]
    let l: Vec<Vec<Vec<Vec<f64>>>> = (0..model.p_k.len())
        .map(|k| {
            (0..mdp.n_states)
                .map(|s| {
                    (0..na)
                        .map(|a| (0..na).map(|u| model.scaled_l(s, a, &mdp.actions[u], k)).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut acc = LogAccumulator::new();
    #[allow(clippy::too_many_arguments)]
    fn walk(
        mdp: &TabularMdp,
        l: &[Vec<Vec<f64>>],
        t: usize,
        s: usize,
        logw: f64,
        acc: &mut LogAccumulator,
    ) {
        if t == mdp.horizon {
            acc.add(logw);
            return;
        }
        let na = mdp.n_actions();
        for a in 0..na {
            for u in 0..na {
                let base = logw + l[s][a][u];
                for (s2, p) in mdp.transition[s][u].iter().enumerate() {
                    if *p > 0.0 {
                        walk(mdp, l, t + 1, s2, base + p.ln(), acc);
                    }
                }
            }
        }
    }
    for (k, pk) in model.p_k.iter().enumerate() {
        for s in 0..mdp.n_states {
            let w0 = ln_or_neg_inf(*pk) + ln_or_neg_inf(mdp.init_dist[s]);
            if w0 == f64::NEG_INFINITY {
                continue;
            }
            walk(mdp, &l[k], 0, s, w0, &mut acc);
        }
    }
    Ok(acc.value())
}

/// Tabular MDP over `(s, k)` with joint actions `(a, u)`: transitions
/// follow `P(s' | s, u)`, reward is `l`, and the initial law is `p1 p(k)`.
/// Returns the MDP and its reward table (already divided by alpha, so it
/// is meant to be solved with unit temperature).
pub fn augmented_mdp(model: &GridModel) -> Result<(TabularMdp, Vec<Vec<f64>>)> {
    let mdp = model.mdp;
    let (ns, na, nk) = (mdp.n_states, mdp.n_actions(), model.p_k.len());
    let idx = |s: usize, k: usize| s * nk + k;
    let mut init = vec![0.0; ns * nk];
    let mut transition = vec![vec![vec![0.0; ns * nk]; na * na]; ns * nk];
    let mut reward = vec![vec![0.0; na * na]; ns * nk];
    for s in 0..ns {
        for k in 0..nk {
            init[idx(s, k)] = mdp.init_dist[s] * model.p_k[k];
            for a in 0..na {
                for u in 0..na {
                    let b = a * na + u;
                    reward[idx(s, k)][b] = model.scaled_l(s, a, &mdp.actions[u], k);
                    for s2 in 0..ns {
                        transition[idx(s, k)][b][idx(s2, k)] = mdp.transition[s][u][s2];
                    }
                }
            }
        }
    }
    // Renormalize the product init so rounding stays within the row tolerance.
    let z: f64 = init.iter().sum();
    init.iter_mut().for_each(|p| *p /= z);
    let actions = (0..na * na).map(|b| vec![b as f64]).collect();
    let aug = TabularMdp::new(actions, mdp.horizon, init, transition, reward.clone())?;
    Ok((aug, reward))
}

/// `g` through soft value iteration on the augmented problem.
pub fn soft_vi_log_partition(model: &GridModel) -> Result<f64> {
    let (aug, reward) = augmented_mdp(model)?;
    let sv = soft_value_iteration(&aug, &reward, 1.0, 1.0)?;
    let total_pk: f64 = model.p_k.iter().sum();
    // `augmented_mdp` renormalized p1 p(k); undo that scaling.
    Ok(sv.log_partition(&aug.init_dist) + total_pk.ln())
}

/// Lower bound `G` for a time-indexed joint policy on the augmented
/// problem: `E[sum_t l/alpha - log q_t]`.
pub fn g_bound(aug: &TabularMdp, reward: &[Vec<f64>], q: &TabularPolicy, total_pk: f64) -> f64 {
    let marg = aug.state_marginals(q);
    let mut total = 0.0;
    for (t, dt) in marg.iter().enumerate() {
        for (x, dx) in dt.iter().enumerate() {
            if *dx == 0.0 {
                continue;
            }
            for (b, p) in q.probs[t][x].iter().enumerate() {
                if *p > 0.0 {
                    total += dx * p * (reward[x][b] - p.ln());
                }
            }
        }
    }
    total + total_pk.ln()
}

/// Per-start-state values `W(x) = E[sum_t l/alpha - log q_t | x_1 = x]`
/// of a time-indexed joint policy, by backward evaluation.
pub fn g_bound_by_start(aug: &TabularMdp, reward: &[Vec<f64>], q: &TabularPolicy) -> Vec<f64> {
    let mut w = vec![0.0; aug.n_states];
    for t in (0..aug.horizon).rev() {
        w = (0..aug.n_states)
            .map(|x| {
                let mut v = 0.0;
                for (b, p) in q.probs[t][x].iter().enumerate() {
                    if *p > 0.0 {
                        let next: f64 = aug.transition[x][b].iter().zip(&w).map(|(pp, wn)| pp * wn).sum();
                        v += p * (reward[x][b] - p.ln() + next);
                    }
                }
                v
            })
            .collect();
    }
    w
}

/// The structured bound with its initial factor also optimized:
/// `log sum_x p1(x) p(k) exp W(x)`. It is still a lower bound of `g`, and
/// with deterministic transitions soft value iteration attains `g` exactly.
pub fn g_bound_free_start(aug: &TabularMdp, reward: &[Vec<f64>], q: &TabularPolicy, total_pk: f64) -> f64 {
    let w = g_bound_by_start(aug, reward, q);
    let terms: Vec<f64> = aug
        .init_dist
        .iter()
        .zip(&w)
        .map(|(p, v)| ln_or_neg_inf(*p) + v)
        .collect();
    log_sum_exp(&terms) + total_pk.ln()
}

/// Data-averaged `f = E_d sum_t log sum_a exp(l / alpha)` on the grid.
pub fn brute_force_f(model: &GridModel, data: &DemoDataset) -> Result<f64> {
    if data.trajectories.is_empty() {
        return Err(VildError::shape("empty demonstration batch"));
    }
    let mut total = KahanSum::new();
    for tr in &data.trajectories {
        let k = tr.k_index().ok_or_else(|| VildError::shape("missing k"))?;
        for (s, u) in tr.states.iter().zip(&tr.actions) {
            total.add(model.f_t(s[0] as usize, u, k));
        }
    }
    Ok(total.value() / data.trajectories.len() as f64)
}

/// `F_t(q) = E_q[l / alpha] - E_q log q` for one datapoint.
pub fn f_bound_point(model: &GridModel, s: usize, u: &[f64], k: usize, q: &[f64]) -> f64 {
    let mut v = 0.0;
    for (a, p) in q.iter().enumerate() {
        if *p > 0.0 {
            v += p * (model.scaled_l(s, a, u, k) - p.ln());
        }
    }
    v
}

/// `q* ∝ exp(l / alpha)` over the grid.
pub fn closed_form_q_psi(model: &GridModel, s: usize, u: &[f64], k: usize) -> Vec<f64> {
    let l: Vec<f64> = (0..model.mdp.n_actions()).map(|a| model.scaled_l(s, a, u, k)).collect();
    crate::math::softmax(&l)
}

/// One support point of an enumerable distribution over demonstrations:
/// `(k, s_1..s_T, grid indices of u_1..u_T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportPoint {
    pub k: usize,
    pub states: Vec<usize>,
    pub u: Vec<usize>,
    pub prob: f64,
}

/// Log-probability of a support point under the energy model with
/// normalizer `g`.
fn model_log_prob(model: &GridModel, pt: &SupportPoint, g: f64) -> f64 {
    let mdp = model.mdp;
    let mut lp = ln_or_neg_inf(model.p_k[pt.k]) + ln_or_neg_inf(mdp.init_dist[pt.states[0]]);
    for t in 0..pt.states.len() {
        let s = pt.states[t];
        lp += model.f_t(s, &mdp.actions[pt.u[t]], pt.k);
        if t + 1 < pt.states.len() {
            lp += ln_or_neg_inf(mdp.transition[s][pt.u[t]][pt.states[t + 1]]);
        }
    }
    lp - g
}

/// The model's own distribution over `(k, s_{1:T}, u_{1:T})` on the grid.
pub fn model_distribution(model: &GridModel, budget: &EnumerationBudget) -> Result<Vec<SupportPoint>> {
    let mdp = model.mdp;
    budget.check(mdp, model.p_k.len())?;
    let g = brute_force_log_partition(model, budget)?;
    let mut out = Vec::new();
    let na = mdp.n_actions();
    let horizon = mdp.horizon;
    for k in 0..model.p_k.len() {
        let mut stack = vec![(vec![], vec![])];
        while let Some((states, us)) = stack.pop() {
            let states: Vec<usize> = states;
            let us: Vec<usize> = us;
            if states.len() == horizon && us.len() == horizon {
                let mut pt = SupportPoint {
                    k,
                    states,
                    u: us,
                    prob: 0.0,
                };
                pt.prob = model_log_prob(model, &pt, g).exp();
                if pt.prob > 0.0 {
                    out.push(pt);
                }
                continue;
            }
            if states.len() == us.len() {
                for s in (0..mdp.n_states).rev() {
                    let mut st = states.clone();
                    st.push(s);
                    stack.push((st, us.clone()));
                }
            } else {
                for u in (0..na).rev() {
                    let mut uu = us.clone();
                    uu.push(u);
                    stack.push((states.clone(), uu));
                }
            }
        }
    }
    Ok(out)
}

/// Distribution induced by a grid expert and a discrete noise kernel
/// `kernel(k, a)[u]`, with demonstrations executed through `P(s' | s, u)`.
pub fn generative_distribution(
    mdp: &TabularMdp,
    expert: &TabularPolicy,
    kernel: &dyn Fn(usize, usize) -> Vec<f64>,
    p_k: &[f64],
) -> Vec<SupportPoint> {
    let na = mdp.n_actions();
    let mut out = Vec::new();
    fn rec(
        mdp: &TabularMdp,
        expert: &TabularPolicy,
        kernel: &dyn Fn(usize, usize) -> Vec<f64>,
        na: usize,
        k: usize,
        states: &mut Vec<usize>,
        us: &mut Vec<usize>,
        prob: f64,
        out: &mut Vec<SupportPoint>,
    ) {
        let t = us.len();
        let s = *states.last().expect("nonempty");
        let mut pu = vec![0.0; na];
        for a in 0..na {
            let pa = expert.probs[t][s][a];
            if pa > 0.0 {
                for (u, q) in kernel(k, a).iter().enumerate() {
                    pu[u] += pa * q;
                }
            }
        }
        for (u, q) in pu.iter().enumerate() {
            if *q <= 0.0 {
                continue;
            }
            us.push(u);
            if t + 1 == mdp.horizon {
                out.push(SupportPoint {
                    k,
                    states: states.clone(),
                    u: us.clone(),
                    prob: prob * q,
                });
            } else {
                for (s2, p) in mdp.transition[s][u].iter().enumerate() {
                    if *p > 0.0 {
                        states.push(s2);
                        rec(mdp, expert, kernel, na, k, states, us, prob * q * p, out);
                        states.pop();
                    }
                }
            }
            us.pop();
        }
    }
    for (k, pk) in p_k.iter().enumerate() {
        for (s, p1) in mdp.init_dist.iter().enumerate() {
            if pk * p1 > 0.0 {
                rec(mdp, expert, kernel, na, k, &mut vec![s], &mut vec![], pk * p1, &mut out);
            }
        }
    }
    out
}

/// `E_d sum_t f_t` under an enumerated data distribution.
pub fn expected_f(model: &GridModel, data: &[SupportPoint]) -> f64 {
    let mut acc = KahanSum::new();
    for pt in data {
        for t in 0..pt.states.len() {
            acc.add(pt.prob * model.f_t(pt.states[t], &model.mdp.actions[pt.u[t]], pt.k));
        }
    }
    acc.value()
}

/// `KL(p_d || p_{phi,omega})` by full enumeration of the data support.
pub fn exact_kl_data_to_model(model: &GridModel, data: &[SupportPoint], budget: &EnumerationBudget) -> Result<f64> {
    let g = brute_force_log_partition(model, budget)?;
    let mut acc = KahanSum::new();
    for pt in data {
        if pt.prob <= 0.0 {
            continue;
        }
        let lq = model_log_prob(model, pt, g);
        if lq == f64::NEG_INFINITY {
            return Err(VildError::ZeroSupport(format!(
                "k={} states={:?} u={:?}",
                pt.k + 1,
                pt.states,
                pt.u
            )));
        }
        acc.add(pt.prob * (pt.prob.ln() - lq));
    }
    Ok(acc.value())
}

/// Central differences, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(VildError::config("finite-difference step must be positive"));
    }
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = f(&xp);
        xp[i] = orig - eps;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(g)
}

/// `max_i |a_i - b_i| / max(|b|_inf, floor)`.
pub fn relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_quadratic() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }
}
