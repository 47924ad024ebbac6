//! The objective `H` and its analytic gradients.
//!
//! Every term is divided by the entropy coefficient `alpha`, which is the
//! same as raising `exp(r)` and the noise density to the power `1/alpha`.

use std::borrow::Cow;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{noise_fit, IsState, NoiseModel, PolicyParams, PosteriorParams, RewardParams, RewardRepr, VildParams};
use crate::demogen::DemoDataset;
use crate::env::{TabularMdp, Trajectory};
use crate::error::{Result, VildError};
use crate::math::{gauss_hermite, log_sum_exp, LN_2PI};
use crate::rng::child_rng;

/// How a demonstration batch was drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampling {
    /// Uniformly from the pooled data, i.e. `k ~ p(k)`.
    Data,
    /// `k ~ p~(k)`, then uniformly within demonstrator `k`.
    Importance(IsState),
}

/// Datapoints `(trajectory index, time step)` of a demonstration batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoBatch {
    pub points: Vec<(usize, usize)>,
    pub sampling: Sampling,
}

impl DemoBatch {
    /// Every datapoint of the dataset, in order.
    pub fn full(data: &DemoDataset) -> Self {
        let points = data
            .trajectories
            .iter()
            .enumerate()
            .flat_map(|(n, tr)| (0..tr.len()).map(move |t| (n, t)))
            .collect();
        Self {
            points,
            sampling: Sampling::Data,
        }
    }

    pub fn trajectories(data: &DemoDataset, idx: &[usize]) -> Self {
        let points = idx
            .iter()
            .flat_map(|&n| (0..data.trajectories[n].len()).map(move |t| (n, t)))
            .collect();
        Self {
            points,
            sampling: Sampling::Data,
        }
    }
}

/// Nodes and weights of an expectation under a standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    /// Tensor-product Gauss–Hermite rule with `n` nodes per coordinate.
    pub fn gauss_hermite(n: usize, dim: usize) -> Self {
        let (z, w) = gauss_hermite(n);
        let mut nodes = vec![vec![]];
        let mut weights = vec![1.0];
        for _ in 0..dim {
            let mut nn = Vec::with_capacity(nodes.len() * n);
            let mut nw = Vec::with_capacity(nodes.len() * n);
            for (p, pw) in nodes.iter().zip(&weights) {
                for (zi, wi) in z.iter().zip(&w) {
                    let mut q = p.clone();
                    q.push(*zi);
                    nn.push(q);
                    nw.push(pw * wi);
                }
            }
            nodes = nn;
            weights = nw;
        }
        Self { nodes, weights }
    }
}

/// Expectations over a Gaussian posterior: a fixed rule shared by all
/// datapoints, or Monte-Carlo draws seeded per datapoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Expectation {
    Rule(Quadrature),
    MonteCarlo { samples: usize, seed: u64 },
}

impl Expectation {
    pub fn nodes_for(&self, dim: usize, n: usize, t: usize) -> Cow<'_, Quadrature> {
        match self {
            Expectation::Rule(q) => Cow::Borrowed(q),
            Expectation::MonteCarlo { samples, seed } => {
                let stream = ((n as u64) << 20) ^ t as u64;
                let mut rng = child_rng(*seed, stream);
                let nodes = (0..*samples)
                    .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect();
                Cow::Owned(Quadrature {
                    nodes,
                    weights: vec![1.0 / *samples as f64; *samples],
                })
            }
        }
    }
}

/// The problem instance the objective is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum Problem<'a> {
    /// Grid actions; the agent term is exact under the tabular policy.
    Grid(&'a TabularMdp),
    /// Continuous actions; the agent term averages over sampled trajectories
    /// whose recorded actions are the policy samples.
    Continuous {
        agent: &'a [Trajectory],
        expectation: &'a Expectation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub alpha: f64,
    /// Diagonal of the execution-noise covariance.
    pub sigma_exec: Vec<f64>,
    pub noise_model: NoiseModel,
    pub p_k: Vec<f64>,
    pub horizon: usize,
    /// Divide `L(omega)` by `alpha` as well, so that the whole noise density
    /// (normalizer included) is raised to `1/alpha`.
    #[serde(default)]
    pub scaled_regularizer: bool,
}

/// Values of the three parts of `H` (demo - agent + trace).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terms {
    pub demo: f64,
    pub agent: f64,
    pub trace: f64,
}

impl Terms {
    pub fn total(&self) -> f64 {
        self.demo - self.agent + self.trace
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HGrad {
    pub phi: Vec<f64>,
    pub omega: Vec<f64>,
    pub psi: Vec<f64>,
}

fn check_terms(t: &Terms) -> Result<()> {
    if !t.demo.is_finite() {
        return Err(VildError::Numeric { term: "demonstration" });
    }
    if !t.agent.is_finite() {
        return Err(VildError::Numeric { term: "agent" });
    }
    if !t.trace.is_finite() {
        return Err(VildError::Numeric { term: "trace" });
    }
    Ok(())
}

/// Returns `d fit / d a_j` and `d fit / d log_var_j` with `e = u_j - a_j`.
#[inline]
fn fit_partials(e: f64, log_var: f64, model: NoiseModel) -> (f64, f64) {
    let prec = (-log_var).exp();
    match model {
        // fit = -1/2 e^2 exp(-lv), e = u - a
        NoiseModel::Gaussian => (e * prec, 0.5 * e * e * prec),
        // fit = -|e| exp(-lv)
        NoiseModel::Laplace => (e.signum() * prec, e.abs() * prec),
    }
}

fn trace_term(params: &VildParams, spec: &ObjectiveSpec, grad: Option<&mut [f64]>) -> f64 {
    let t = spec.horizon as f64;
    let coef = match spec.noise_model {
        NoiseModel::Gaussian => t / (2.0 * spec.alpha),
        NoiseModel::Laplace => t * std::f64::consts::SQRT_2 / (std::f64::consts::PI.sqrt() * spec.alpha),
    };
    let d = params.omega.d_a();
    let mut total = 0.0;
    let mut g = grad;
    for (k, row) in params.omega.log_var.iter().enumerate() {
        for (j, lv) in row.iter().enumerate() {
            let s = match spec.noise_model {
                NoiseModel::Gaussian => spec.sigma_exec[j],
                NoiseModel::Laplace => spec.sigma_exec[j].sqrt(),
            };
            let v = coef * spec.p_k[k] * s * (-lv).exp();
            total += v;
            if let Some(g) = g.as_deref_mut() {
                g[k * d + j] -= v;
            }
        }
    }
    total
}

/// Regularizer `L(omega) = c T E_p(k) log|C^-1(k)|` with `c = 1/2` for the
/// Gaussian model and `c = 1` for the Laplace model (the coefficients of
/// the respective log-normalizers).
pub fn regularizer(params: &VildParams, spec: &ObjectiveSpec) -> (f64, Vec<f64>) {
    let c = match spec.noise_model {
        NoiseModel::Gaussian => 0.5,
        NoiseModel::Laplace => 1.0,
    } * spec.horizon as f64
        / if spec.scaled_regularizer { spec.alpha } else { 1.0 };
    let d = params.omega.d_a();
    let mut v = 0.0;
    let mut g = vec![0.0; params.omega.k() * d];
    for (k, row) in params.omega.log_var.iter().enumerate() {
        for (j, lv) in row.iter().enumerate() {
            v -= c * spec.p_k[k] * lv;
            g[k * d + j] = -c * spec.p_k[k];
        }
    }
    (v, g)
}

struct Accum<'g> {
    phi: Option<&'g mut [f64]>,
    omega: Option<&'g mut [f64]>,
    psi: Option<&'g mut [f64]>,
}

/// Mean truncated weight over an importance-sampled batch; the weights are
/// divided by it so that the demonstration side of the reward gradient
/// keeps unit total mass, as the agent side does.
fn importance_norm(data: &DemoDataset, batch: &DemoBatch) -> Result<f64> {
    let Sampling::Importance(st) = &batch.sampling else {
        return Ok(1.0);
    };
    let mut sum = 0.0;
    for &(n, _) in &batch.points {
        let k = data.trajectories[n].k_index().ok_or_else(|| VildError::shape("demonstration without k"))?;
        sum += st.w[k];
    }
    Ok(sum / batch.points.len() as f64)
}

fn demo_state_index(tr: &Trajectory, t: usize, n_states: usize) -> Result<usize> {
    let s = tr.states[t][0];
    if s < 0.0 || s.fract() != 0.0 || s as usize >= n_states {
        return Err(VildError::shape(format!("state {s} is not a valid grid state")));
    }
    Ok(s as usize)
}

/// Demonstration term on a grid: `T * mean_i [E_q (r + fit)/alpha + H(q)]`.
fn grid_demo(
    params: &VildParams,
    data: &DemoDataset,
    batch: &DemoBatch,
    mdp: &TabularMdp,
    spec: &ObjectiveSpec,
    acc: &mut Accum,
) -> Result<f64> {
    let PosteriorParams::Grid { horizon, logits } = &params.posterior else {
        return Err(VildError::shape("grid problem needs a grid posterior"));
    };
    let na = mdp.n_actions();
    let d = params.omega.d_a();
    let w_mean = importance_norm(data, batch)?;
    let scale = spec.horizon as f64 / batch.points.len() as f64;
    let alpha = spec.alpha;
    let mut total = 0.0;
    let mut l = vec![0.0; na];
    let mut dl_dlv = vec![0.0; na * d];
    for &(n, t) in &batch.points {
        let tr = &data.trajectories[n];
        let k = tr.k_index().ok_or_else(|| VildError::shape("demonstration without k"))?;
        let s = demo_state_index(tr, t, mdp.n_states)?;
        let u = &tr.actions[t];
        let lv = &params.omega.log_var[k];
        let row = n * horizon + t;
        let z = &logits[row];
        for a in 0..na {
            let (r, _) = params.reward.eval_table(s, a);
            l[a] = (r + noise_fit(u, &mdp.actions[a], lv, spec.noise_model)) / alpha;
            for j in 0..d {
                dl_dlv[a * d + j] = fit_partials(u[j] - mdp.actions[a][j], lv[j], spec.noise_model).1 / alpha;
            }
        }
        let lse = log_sum_exp(z);
        let mut f = 0.0;
        let logq: Vec<f64> = z.iter().map(|v| v - lse).collect();
        for a in 0..na {
            let q = logq[a].exp();
            if q > 0.0 {
                f += q * (l[a] - logq[a]);
            }
        }
        total += f;
        let w_is = match &batch.sampling {
            Sampling::Data => 1.0,
            Sampling::Importance(st) => st.w[k] / w_mean,
        };
        for a in 0..na {
            let q = logq[a].exp();
            if q == 0.0 {
                continue;
            }
            if let Some(g) = acc.psi.as_deref_mut() {
                g[row * na + a] += scale * q * (l[a] - logq[a] - f);
            }
            if let Some(g) = acc.phi.as_deref_mut() {
                let (_, dr) = params.reward.eval_table(s, a);
                g[s * na + a] += w_is * scale * q * dr / alpha;
            }
            if let Some(g) = acc.omega.as_deref_mut() {
                for j in 0..d {
                    g[k * d + j] += scale * q * dl_dlv[a * d + j];
                }
            }
        }
    }
    Ok(scale * total)
}

fn grid_agent(
    reward: &RewardParams,
    policy: &PolicyParams,
    mdp: &TabularMdp,
    alpha: f64,
    acc: &mut Accum,
) -> Result<f64> {
    let PolicyParams::Tabular(pol) = policy else {
        return Err(VildError::shape("grid problem needs a tabular policy"));
    };
    let na = mdp.n_actions();
    let marg = mdp.state_marginals(pol);
    let mut total = 0.0;
    for (t, dt) in marg.iter().enumerate() {
        for s in 0..mdp.n_states {
            if dt[s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let p = pol.probs[t][s][a];
                if p == 0.0 {
                    continue;
                }
                let (r, dr) = reward.eval_table(s, a);
                total += dt[s] * p * (r / alpha - p.ln());
                if let Some(g) = acc.phi.as_deref_mut() {
                    g[s * na + a] -= dt[s] * p * dr / alpha;
                }
            }
        }
    }
    Ok(total)
}

fn cont_demo(
    params: &VildParams,
    data: &DemoDataset,
    batch: &DemoBatch,
    expectation: &Expectation,
    spec: &ObjectiveSpec,
    acc: &mut Accum,
) -> Result<f64> {
    let PosteriorParams::Gaussian { dim, heads } = &params.posterior else {
        return Err(VildError::shape("continuous problem needs a Gaussian posterior"));
    };
    let d = *dim;
    let w_mean = importance_norm(data, batch)?;
    let head_len = heads.first().map_or(0, Vec::len);
    let scale = spec.horizon as f64 / batch.points.len() as f64;
    let alpha = spec.alpha;
    let mut total = 0.0;
    let mut a = vec![0.0; d];
    let mut ra = vec![0.0; d];
    let mut dmu = vec![0.0; d];
    let mut dls = vec![0.0; d];
    for &(n, t) in &batch.points {
        let tr = &data.trajectories[n];
        let k = tr.k_index().ok_or_else(|| VildError::shape("demonstration without k"))?;
        let (x, u) = (&tr.states[t], &tr.actions[t]);
        let lv = &params.omega.log_var[k];
        let (mu, sd) = params.posterior.gaussian_moments(k, x, u);
        let quad = expectation.nodes_for(d, n, t);
        let w_is = match &batch.sampling {
            Sampling::Data => 1.0,
            Sampling::Importance(st) => st.w[k] / w_mean,
        };
        dmu.iter_mut().for_each(|v| *v = 0.0);
        dls.iter_mut().for_each(|v| *v = 1.0);
        let mut val = 0.0;
        for (eps, wq) in quad.nodes.iter().zip(&quad.weights) {
            for j in 0..d {
                a[j] = mu[j] + sd[j] * eps[j];
            }
            let (r, dr) = params.reward.eval_cont(x, &a);
            params.reward.grad_action(x, &a, dr, &mut ra);
            val += wq * (r + noise_fit(u, &a, lv, spec.noise_model)) / alpha;
            for j in 0..d {
                let (fa, flv) = fit_partials(u[j] - a[j], lv[j], spec.noise_model);
                let g = (ra[j] + fa) / alpha;
                dmu[j] += wq * g;
                dls[j] += wq * g * sd[j] * eps[j];
                if let Some(go) = acc.omega.as_deref_mut() {
                    go[k * d + j] += scale * wq * flv / alpha;
                }
            }
            if let Some(gp) = acc.phi.as_deref_mut() {
                params.reward.add_grad_cont(x, &a, w_is * scale * wq / alpha, gp);
            }
        }
        let ent: f64 = (0..d).map(|j| heads[k][3 * d + j] + 0.5 * (1.0 + LN_2PI)).sum();
        total += val + ent;
        if let Some(g) = acc.psi.as_deref_mut() {
            let h = &mut g[k * head_len..(k + 1) * head_len];
            for j in 0..d {
                h[3 * j] += scale * dmu[j] * x[j];
                h[3 * j + 1] += scale * dmu[j] * u[j];
                h[3 * j + 2] += scale * dmu[j];
                h[3 * d + j] += scale * dls[j];
            }
        }
    }
    Ok(scale * total)
}

fn cont_agent(
    reward: &RewardParams,
    policy: &PolicyParams,
    agent: &[Trajectory],
    alpha: f64,
    acc: &mut Accum,
) -> Result<f64> {
    let PolicyParams::Gaussian(pol) = policy else {
        return Err(VildError::shape("continuous problem needs a Gaussian policy"));
    };
    if agent.is_empty() {
        return Err(VildError::shape("agent batch is empty"));
    }
    let m = agent.len() as f64;
    let mut total = 0.0;
    for tr in agent {
        for (x, a) in tr.states.iter().zip(&tr.actions) {
            let (r, _) = reward.eval_cont(x, a);
            total += r / alpha - pol.log_prob(x, a);
            if let Some(g) = acc.phi.as_deref_mut() {
                reward.add_grad_cont(x, a, -1.0 / (m * alpha), g);
            }
        }
    }
    Ok(total / m)
}

fn evaluate(
    params: &VildParams,
    data: &DemoDataset,
    batch: &DemoBatch,
    problem: Problem,
    spec: &ObjectiveSpec,
    acc: &mut Accum,
) -> Result<Terms> {
    if batch.points.is_empty() {
        return Err(VildError::shape("demonstration batch is empty"));
    }
    if spec.p_k.len() != params.omega.k() || spec.sigma_exec.len() != params.omega.d_a() {
        return Err(VildError::shape("objective spec does not match the parameter shapes"));
    }
    let (demo, agent) = match problem {
        Problem::Grid(mdp) => {
            if !matches!(params.reward.repr, RewardRepr::Table { .. }) {
                return Err(VildError::shape("grid problem needs a table reward"));
            }
            (
                grid_demo(params, data, batch, mdp, spec, acc)?,
                grid_agent(&params.reward, &params.policy, mdp, spec.alpha, acc)?,
            )
        }
        Problem::Continuous { agent, expectation } => (
            cont_demo(params, data, batch, expectation, spec, acc)?,
            cont_agent(&params.reward, &params.policy, agent, spec.alpha, acc)?,
        ),
    };
    let trace = trace_term(params, spec, acc.omega.as_deref_mut());
    let terms = Terms { demo, agent, trace };
    check_terms(&terms)?;
    Ok(terms)
}

pub fn objective_terms(
    params: &VildParams,
    data: &DemoDataset,
    batch: &DemoBatch,
    problem: Problem,
    spec: &ObjectiveSpec,
) -> Result<Terms> {
    let mut acc = Accum {
        phi: None,
        omega: None,
        psi: None,
    };
    evaluate(params, data, batch, problem, spec, &mut acc)
}

/// `H(phi, omega, psi, theta)` on a batch.
pub fn objective_h(
    params: &VildParams,
    data: &DemoDataset,
    batch: &DemoBatch,
    problem: Problem,
    spec: &ObjectiveSpec,
) -> Result<f64> {
    Ok(objective_terms(params, data, batch, problem, spec)?.total())
}

/// Analytic gradients of `H` with respect to `phi`, `omega`, `psi`. When the
/// batch was drawn by importance sampling, the demonstration part of the
/// `phi` gradient carries the truncated weights `w(k)`.
pub fn objective_grad(
    params: &VildParams,
    data: &DemoDataset,
    batch: &DemoBatch,
    problem: Problem,
    spec: &ObjectiveSpec,
) -> Result<(Terms, HGrad)> {
    let mut phi = vec![0.0; params.reward.weights.len()];
    let mut omega = vec![0.0; params.omega.k() * params.omega.d_a()];
    let mut psi = vec![0.0; params.posterior.to_vec().len()];
    let terms = {
        let mut acc = Accum {
            phi: Some(&mut phi),
            omega: Some(&mut omega),
            psi: Some(&mut psi),
        };
        evaluate(params, data, batch, problem, spec, &mut acc)?
    };
    Ok((terms, HGrad { phi, omega, psi }))
}

/// The agent term `E_q_theta[sum_t r/alpha - log q_theta]` and its reward
/// gradient, shared with the MaxEnt-IRL baseline.
pub fn agent_term(reward: &RewardParams, policy: &PolicyParams, problem: Problem, alpha: f64) -> Result<(f64, Vec<f64>)> {
    let mut phi = vec![0.0; reward.weights.len()];
    let v = {
        let mut acc = Accum {
            phi: Some(&mut phi),
            omega: None,
            psi: None,
        };
        match problem {
            Problem::Grid(mdp) => grid_agent(reward, policy, mdp, alpha, &mut acc)?,
            Problem::Continuous { agent, .. } => cont_agent(reward, policy, agent, alpha, &mut acc)?,
        }
    };
    Ok((v, phi))
}
