//! The oracle check suite: seeded tiny instances, each compared against the
//! brute-force references in [`crate::oracle`].

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::demogen::{generate_dataset, DemoDataset, NoiseKind, NoiseSpec};
use crate::env::{rollouts, GaussianLinearPolicy, LqrPolicy, PointMassMdp, TabularMdp, TabularPolicy, Task, Trajectory};
use crate::error::{Result, VildError};
use crate::math::{softmax, OptimizerKind};
use crate::oracle::*;
use crate::rng::{child_rng, derive_seed, Rng};
use crate::vild::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Partition,
    Bounds,
    Grads,
    Qpsi,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Partition, Suite::Bounds, Suite::Grads, Suite::Qpsi];

    /// Parses `partition | bounds | grads | qpsi | all`.
    pub fn parse_selection(s: &str) -> Result<Vec<Suite>> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "all" => Self::ALL.to_vec(),
            "partition" => vec![Suite::Partition],
            "bounds" => vec![Suite::Bounds],
            "grads" => vec![Suite::Grads],
            "qpsi" => vec![Suite::Qpsi],
            other => return Err(VildError::config(format!("unknown check `{other}`"))),
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Partition => "partition",
            Suite::Bounds => "bounds",
            Suite::Grads => "grads",
            Suite::Qpsi => "qpsi",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Refused,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Refused => "refused",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub suite: Suite,
    pub check: String,
    pub status: Status,
    pub max_error: f64,
    pub tolerance: f64,
}

pub const REPORT_HEADER: &str = "suite,check,status,max_error,tolerance";

pub fn report_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:e},{:e}\n",
            r.suite, r.check, r.status, r.max_error, r.tolerance
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub max_states: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
    pub budget: EnumerationBudget,
    /// Relative perturbation applied to every analytic gradient before
    /// comparison; nonzero values exist to prove the suite can fail.
    pub perturb_gradient: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            max_states: 3,
            max_actions: 3,
            max_horizon: 3,
            budget: EnumerationBudget::default(),
            perturb_gradient: 0.0,
        }
    }
}

pub const BOUND_TOL: f64 = 1e-8;
pub const PARTITION_TOL: f64 = 1e-8;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
pub const QPSI_TV_TOL: f64 = 1e-3;
pub const RANDOM_VARIATIONAL: usize = 100;

/// A tiny grid problem with random reward and expertise.
#[derive(Debug, Clone)]
pub struct GridInstance {
    pub mdp: TabularMdp,
    pub reward: RewardParams,
    pub omega: ExpertiseParams,
    pub p_k: Vec<f64>,
    pub alpha: f64,
    pub noise_model: NoiseModel,
}

impl GridInstance {
    pub fn model(&self) -> GridModel<'_> {
        GridModel {
            mdp: &self.mdp,
            reward: &self.reward,
            omega: &self.omega,
            p_k: &self.p_k,
            alpha: self.alpha,
            noise_model: self.noise_model,
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|v| v / s).collect();
    let rest: f64 = p[..n - 1].iter().sum();
    p[n - 1] = 1.0 - rest;
    p
}

/// Seeded instance with at most the given sizes (at least 2 actions).
/// Exact agreement between the log-partition and soft value iteration
/// needs deterministic transitions; with stochastic ones soft value
/// iteration only attains the structured lower bound.
pub fn random_grid_instance(
    seed: u64,
    deterministic: bool,
    max_states: usize,
    max_actions: usize,
    max_horizon: usize,
    alpha: f64,
    noise_model: NoiseModel,
) -> Result<GridInstance> {
    let mut rng = child_rng(seed, 0x6121D);
    let ns = rng.random_range(1..=max_states.max(1));
    let na = rng.random_range(2..=max_actions.max(2));
    let horizon = rng.random_range(1..=max_horizon.max(1));
    let k = rng.random_range(1..=2);
    let mdp = if deterministic {
        TabularMdp::random_deterministic(ns, na, horizon, derive_seed(seed, 1))?
    } else {
        TabularMdp::random(ns, na, horizon, derive_seed(seed, 1))?
    };
    let mut reward = RewardParams::table(ns, na, rng.random::<bool>(), 1.0 + rng.random::<f64>());
    reward.weights.iter_mut().for_each(|w| *w = normal(&mut rng));
    let mut omega = ExpertiseParams::new(k, 1, 0.0);
    for row in &mut omega.log_var {
        row[0] = rng.random_range(-2.0..1.0);
    }
    Ok(GridInstance {
        mdp,
        reward,
        omega,
        p_k: random_simplex(k, &mut rng),
        alpha,
        noise_model,
    })
}

/// Random time-indexed policy with logits of scale `spread`.
pub fn random_tabular_policy(mdp: &TabularMdp, spread: f64, rng: &mut Rng) -> TabularPolicy {
    let na = mdp.n_actions();
    TabularPolicy {
        probs: (0..mdp.horizon)
            .map(|_| {
                (0..mdp.n_states)
                    .map(|_| softmax(&(0..na).map(|_| spread * normal(rng)).collect::<Vec<_>>()))
                    .collect()
            })
            .collect(),
        actions: mdp.actions.clone(),
    }
}

/// Grid demonstrations from a random expert with Gaussian noise per `k`.
pub fn grid_demos(inst: &GridInstance, n: usize, seed: u64) -> Result<DemoDataset> {
    let mut rng = child_rng(seed, 0xDE30);
    let expert = random_tabular_policy(&inst.mdp, 1.0, &mut rng);
    let sigma = (0..inst.p_k.len()).map(|_| rng.random_range(0.1..0.8)).collect();
    let noise = NoiseSpec::new(NoiseKind::Gaussian, sigma, 1)?;
    generate_dataset(&inst.mdp, &expert, &noise, &inst.p_k, n, derive_seed(seed, 2), "grid-fixture")
}

/// Parameters and data for a gradient check.
#[derive(Debug, Clone)]
pub struct GradFixture {
    pub task: Task,
    pub data: DemoDataset,
    pub params: VildParams,
    pub spec: ObjectiveSpec,
    pub agent: Vec<Trajectory>,
    pub expectation: Expectation,
}

impl GradFixture {
    pub fn problem(&self) -> Problem<'_> {
        match &self.task {
            Task::Tabular(m) => Problem::Grid(m),
            Task::PointMass(_) => Problem::Continuous {
                agent: &self.agent,
                expectation: &self.expectation,
            },
        }
    }

    pub fn h(&self, params: &VildParams) -> Result<f64> {
        objective_h(params, &self.data, &DemoBatch::full(&self.data), self.problem(), &self.spec)
    }

    pub fn grad(&self) -> Result<HGrad> {
        Ok(objective_grad(&self.params, &self.data, &DemoBatch::full(&self.data), self.problem(), &self.spec)?.1)
    }
}

/// Random point on a grid instance: random logits, policy, reward, omega.
pub fn grid_grad_fixture(seed: u64, noise_model: NoiseModel) -> Result<GradFixture> {
    let mut rng = child_rng(seed, 0x6A1D);
    let alpha = rng.random_range(0.5..2.0);
    let inst = random_grid_instance(seed, false, 3, 3, 3, alpha, noise_model)?;
    let data = grid_demos(&inst, 4, seed)?;
    let horizon = inst.mdp.horizon;
    let na = inst.mdp.n_actions();
    let logits = (0..data.trajectories.len() * horizon)
        .map(|_| (0..na).map(|_| normal(&mut rng)).collect())
        .collect();
    let policy = random_tabular_policy(&inst.mdp, 1.0, &mut rng);
    let spec = ObjectiveSpec {
        alpha,
        sigma_exec: vec![rng.random_range(0.01..0.5)],
        noise_model,
        p_k: inst.p_k.clone(),
        horizon,
        scaled_regularizer: false,
    };
    Ok(GradFixture {
        params: VildParams {
            reward: inst.reward.clone(),
            omega: inst.omega.clone(),
            posterior: PosteriorParams::Grid { horizon, logits },
            policy: PolicyParams::Tabular(policy),
        },
        task: Task::Tabular(inst.mdp),
        data,
        spec,
        agent: Vec::new(),
        expectation: Expectation::Rule(Quadrature::gauss_hermite(1, 1)),
    })
}

/// Random point on a small point-mass problem with quadrature expectations.
pub fn continuous_grad_fixture(seed: u64, noise_model: NoiseModel) -> Result<GradFixture> {
    let mut rng = child_rng(seed, 0xC0A7);
    let dim = rng.random_range(1..=2);
    let horizon = 3;
    let mdp = PointMassMdp::new(dim, horizon)?;
    let k = 2;
    let expert = LqrPolicy {
        gains: mdp.lqr_gains(),
        goal: mdp.goal.clone(),
        action_bound: mdp.action_bound,
    };
    let noise = match noise_model {
        NoiseModel::Gaussian => NoiseSpec::new(NoiseKind::Gaussian, vec![0.1, 0.5], dim)?,
        NoiseModel::Laplace => NoiseSpec::new(NoiseKind::Laplace, vec![0.1, 0.5], dim)?,
    };
    let p_k = vec![0.4, 0.6];
    let data = generate_dataset(&mdp, &expert, &noise, &p_k, 4, derive_seed(seed, 3), "point-mass-fixture")?;
    let alpha = rng.random_range(0.5..2.0);
    let features = if seed.is_multiple_of(2) { RewardFeatures::Quadratic } else { RewardFeatures::NextState };
    let mut reward = RewardParams::continuous(features, dim, rng.random::<bool>(), 1.0);
    reward.weights.iter_mut().for_each(|w| *w = 0.5 * normal(&mut rng));
    let mut omega = ExpertiseParams::new(k, dim, 0.0);
    omega.log_var.iter_mut().flatten().for_each(|v| *v = rng.random_range(-2.0..0.5));
    let mut posterior = PosteriorParams::gaussian_identity(k, dim, -1.0);
    let mut v = posterior.to_vec();
    v.iter_mut().for_each(|x| *x += 0.3 * normal(&mut rng));
    posterior.set_from(&v);
    let mut pol = GaussianLinearPolicy::new(dim, -1.0);
    let mut pv = pol.to_vec();
    pv.iter_mut().for_each(|x| *x += 0.3 * normal(&mut rng));
    pol.set_from(&pv);
    let agent = rollouts(&mdp, &pol, &vec![1e-8; dim], 3, derive_seed(seed, 4))?
        .into_iter()
        .map(|r| r.trajectory)
        .collect();
    let spec = ObjectiveSpec {
        alpha,
        sigma_exec: (0..dim).map(|_| rng.random_range(0.01..0.5)).collect(),
        noise_model,
        p_k,
        horizon,
        scaled_regularizer: false,
    };
    Ok(GradFixture {
        task: Task::PointMass(mdp),
        data,
        params: VildParams {
            reward,
            omega,
            posterior,
            policy: PolicyParams::Gaussian(pol),
        },
        spec,
        agent,
        expectation: Expectation::Rule(Quadrature::gauss_hermite(4, dim)),
    })
}

/// Worst relative error of each block `(phi, omega, psi)` against central
/// differences. `perturb` scales the analytic gradients by `1 + perturb`.
pub fn gradient_errors(fx: &GradFixture, perturb: f64) -> Result<[f64; 3]> {
    let g = fx.grad()?;
    let scale = |v: &[f64]| v.iter().map(|x| x * (1.0 + perturb)).collect::<Vec<_>>();
    let mut fail = None;
    let mut eval = |p: &VildParams| match fx.h(p) {
        Ok(v) => v,
        Err(e) => {
            fail.get_or_insert(e);
            f64::NAN
        }
    };
    let fd_phi = finite_diff_grad(
        |w| {
            let mut p = fx.params.clone();
            p.reward.weights.copy_from_slice(w);
            eval(&p)
        },
        &fx.params.reward.weights,
        GRAD_EPS,
    )?;
    let fd_omega = finite_diff_grad(
        |w| {
            let mut p = fx.params.clone();
            p.omega.set_from(w);
            eval(&p)
        },
        &fx.params.omega.to_vec(),
        GRAD_EPS,
    )?;
    let fd_psi = finite_diff_grad(
        |w| {
            let mut p = fx.params.clone();
            p.posterior.set_from(w);
            eval(&p)
        },
        &fx.params.posterior.to_vec(),
        GRAD_EPS,
    )?;
    if let Some(e) = fail {
        return Err(e);
    }
    Ok([
        relative_error(&scale(&g.phi), &fd_phi, 1e-6),
        relative_error(&scale(&g.omega), &fd_omega, 1e-6),
        relative_error(&scale(&g.psi), &fd_psi, 1e-6),
    ])
}

fn row(suite: Suite, check: impl Into<String>, err: f64, tol: f64) -> CheckRow {
    CheckRow {
        suite,
        check: check.into(),
        status: if err <= tol { Status::Pass } else { Status::Fail },
        max_error: err,
        tolerance: tol,
    }
}

fn refused(suite: Suite, check: impl Into<String>, tol: f64) -> CheckRow {
    CheckRow {
        suite,
        check: check.into(),
        status: Status::Refused,
        max_error: f64::NAN,
        tolerance: tol,
    }
}

fn instances(opts: &CheckOptions, alpha: f64, deterministic: bool) -> Result<Vec<GridInstance>> {
    (0..opts.instances)
        .map(|i| {
            random_grid_instance(
                derive_seed(opts.seed, i as u64),
                deterministic,
                opts.max_states,
                opts.max_actions,
                opts.max_horizon,
                alpha,
                NoiseModel::Gaussian,
            )
        })
        .collect()
}

/// Brute-force enumeration against soft value iteration, per instance.
pub fn check_partition(opts: &CheckOptions) -> Result<Vec<CheckRow>> {
    let mut worst = 0.0f64;
    for inst in instances(opts, 1.0, true)? {
        let model = inst.model();
        let brute = match brute_force_log_partition(&model, &opts.budget) {
            Ok(v) => v,
            Err(VildError::BudgetExceeded { .. }) => return Ok(vec![refused(Suite::Partition, "brute_vs_soft_vi", PARTITION_TOL)]),
            Err(e) => return Err(e),
        };
        let svi = soft_vi_log_partition(&model)?;
        worst = worst.max((brute - svi).abs());
    }
    Ok(vec![row(Suite::Partition, "brute_vs_soft_vi", worst, PARTITION_TOL)])
}

/// `f >= F(q)` and `g >= G(theta)` with equality at the closed forms.
/// Errors are reported as the worst bound violation and the worst gap at
/// the optimum.
pub fn check_bounds(opts: &CheckOptions) -> Result<Vec<CheckRow>> {
    let mut f_violation = 0.0f64;
    let mut f_gap = 0.0f64;
    let mut g_violation = 0.0f64;
    let mut g_gap = 0.0f64;
    for (i, inst) in instances(opts, 1.0, true)?.iter().enumerate() {
        let model = inst.model();
        if let Err(VildError::BudgetExceeded { .. }) = opts.budget.check(&inst.mdp, inst.p_k.len()) {
            return Ok(vec![
                refused(Suite::Bounds, "f_ge_F", BOUND_TOL),
                refused(Suite::Bounds, "g_ge_G", BOUND_TOL),
            ]);
        }
        let mut rng = child_rng(derive_seed(opts.seed, i as u64), 0xB0B0);
        let na = inst.mdp.n_actions();
        for _ in 0..RANDOM_VARIATIONAL {
            let s = rng.random_range(0..inst.mdp.n_states);
            let k = rng.random_range(0..inst.p_k.len());
            let u = vec![rng.random_range(-1.5..1.5)];
            let q = softmax(&(0..na).map(|_| 2.0 * normal(&mut rng)).collect::<Vec<_>>());
            let f = model.f_t(s, &u, k);
            f_violation = f_violation.max(f_bound_point(&model, s, &u, k, &q) - f);
            let qs = closed_form_q_psi(&model, s, &u, k);
            f_gap = f_gap.max((f - f_bound_point(&model, s, &u, k, &qs)).abs());
        }
        let (aug, reward) = augmented_mdp(&model)?;
        let total_pk: f64 = inst.p_k.iter().sum();
        let g = brute_force_log_partition(&model, &opts.budget)?;
        for _ in 0..RANDOM_VARIATIONAL {
            let q = random_tabular_policy(&aug, 2.0, &mut rng);
            let worst = g_bound(&aug, &reward, &q, total_pk).max(g_bound_free_start(&aug, &reward, &q, total_pk));
            g_violation = g_violation.max(worst - g);
        }
        let sv = crate::env::soft_value_iteration(&aug, &reward, 1.0, 1.0)?;
        g_gap = g_gap.max((g - g_bound_free_start(&aug, &reward, &sv.policy, total_pk)).abs());
    }
    // Stochastic transitions: the structured bound stays below g.
    let mut stochastic_violation = 0.0f64;
    for inst in instances(opts, 1.0, false)? {
        let model = inst.model();
        let g = match brute_force_log_partition(&model, &opts.budget) {
            Ok(v) => v,
            Err(VildError::BudgetExceeded { .. }) => continue,
            Err(e) => return Err(e),
        };
        stochastic_violation = stochastic_violation.max(soft_vi_log_partition(&model)? - g);
    }
    Ok(vec![
        row(Suite::Bounds, "f_ge_F", f_violation.max(0.0), BOUND_TOL),
        row(Suite::Bounds, "f_eq_F_at_closed_form", f_gap, BOUND_TOL),
        row(Suite::Bounds, "g_ge_G", g_violation.max(0.0), BOUND_TOL),
        row(Suite::Bounds, "g_eq_G_at_soft_vi", g_gap, BOUND_TOL),
        row(Suite::Bounds, "g_ge_max_G_stochastic", stochastic_violation.max(0.0), BOUND_TOL),
    ])
}

/// Analytic gradients against central differences, per block, model and
/// problem kind.
pub fn check_grads(opts: &CheckOptions) -> Result<Vec<CheckRow>> {
    let mut out = Vec::new();
    for model in [NoiseModel::Gaussian, NoiseModel::Laplace] {
        let name = match model {
            NoiseModel::Gaussian => "gaussian",
            NoiseModel::Laplace => "laplace",
        };
        for (kind, build) in [
            ("grid", grid_grad_fixture as fn(u64, NoiseModel) -> Result<GradFixture>),
            ("continuous", continuous_grad_fixture),
        ] {
            let mut worst = [0.0f64; 3];
            for i in 0..opts.instances {
                let fx = build(derive_seed(opts.seed, i as u64), model)?;
                let e = gradient_errors(&fx, opts.perturb_gradient)?;
                for b in 0..3 {
                    worst[b] = worst[b].max(e[b]);
                }
            }
            for (b, block) in ["phi", "omega", "psi"].iter().enumerate() {
                out.push(row(Suite::Grads, format!("{kind}_{name}_{block}"), worst[b], GRAD_TOL));
            }
        }
    }
    Ok(out)
}

/// Iterates the posterior update on a grid fixture with everything else
/// frozen and compares each row with `q* ∝ exp(l / alpha)`.
pub fn converged_qpsi_tv(seed: u64, iterations: usize) -> Result<f64> {
    let inst = random_grid_instance(seed, false, 3, 3, 3, 1.0, NoiseModel::Gaussian)?;
    let data = grid_demos(&inst, 3, seed)?;
    let task = Task::Tabular(inst.mdp.clone());
    let points = data.trajectories.len() * inst.mdp.horizon;
    let cfg = TrainConfig {
        alpha: inst.alpha,
        optimizer: OptimizerKind::Plain,
        psi_step_size: Some(points as f64 / inst.mdp.horizon as f64),
        batch_size: points,
        use_is: false,
        bounded_reward: inst.reward.bounded,
        reward_scale: inst.reward.scale,
        seed,
        ..TrainConfig::default()
    };
    let mut params = init_params(&task, &data, &cfg);
    params.reward = inst.reward.clone();
    params.omega = inst.omega.clone();
    let zero = vec![0.0; params.posterior.to_vec().len()];
    params.posterior.set_from(&zero);
    let mut tr = VildTrainer::with_params(&task, &data, cfg, params)?;
    for _ in 0..iterations {
        tr.update_psi()?;
    }
    let PosteriorParams::Grid { horizon, logits } = &tr.params.posterior else {
        unreachable!("grid task has a grid posterior")
    };
    // Tying may have moved the expertise of sparsely observed demonstrators.
    let model = GridModel {
        omega: &tr.params.omega,
        ..inst.model()
    };
    let mut worst = 0.0f64;
    for (n, traj) in data.trajectories.iter().enumerate() {
        let k = traj.k_index().expect("labelled");
        for t in 0..traj.len() {
            let q = softmax(&logits[n * horizon + t]);
            let qs = closed_form_q_psi(&model, traj.states[t][0] as usize, &traj.actions[t], k);
            let tv = 0.5 * q.iter().zip(&qs).map(|(a, b)| (a - b).abs()).sum::<f64>();
            worst = worst.max(tv);
        }
    }
    Ok(worst)
}

pub fn check_qpsi(opts: &CheckOptions) -> Result<Vec<CheckRow>> {
    let mut worst = 0.0f64;
    for i in 0..opts.instances.min(5) {
        worst = worst.max(converged_qpsi_tv(derive_seed(opts.seed, i as u64), 2000)?);
    }
    Ok(vec![row(Suite::Qpsi, "update_psi_vs_closed_form", worst, QPSI_TV_TOL)])
}

pub fn run_checks(suites: &[Suite], opts: &CheckOptions) -> Result<Vec<CheckRow>> {
    let mut out = Vec::new();
    for s in suites {
        out.extend(match s {
            Suite::Partition => check_partition(opts)?,
            Suite::Bounds => check_bounds(opts)?,
            Suite::Grads => check_grads(opts)?,
            Suite::Qpsi => check_qpsi(opts)?,
        });
    }
    Ok(out)
}
