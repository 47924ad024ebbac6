use proptest::prelude::*;
use vild::checks::*;
use vild::demogen::DemoDataset;
use vild::env::*;
use vild::math::{log_sum_exp, softmax};
use vild::oracle::*;
use vild::rng::rng_from_seed;
use vild::vild::{log_noisy_model, ExpertiseParams, NoiseModel, RewardParams};
use vild::VildError;

fn zero_table(ns: usize, na: usize) -> RewardParams {
    RewardParams::table(ns, na, false, 1.0)
}

fn random_table(ns: usize, na: usize, seed: u64) -> RewardParams {
    let mut rng = rng_from_seed(seed);
    let mut r = zero_table(ns, na);
    r.weights.iter_mut().for_each(|w| *w = rand::Rng::random_range(&mut rng, -1.0..1.0));
    r
}

fn model<'a>(
    mdp: &'a TabularMdp,
    reward: &'a RewardParams,
    omega: &'a ExpertiseParams,
    p_k: &'a [f64],
) -> GridModel<'a> {
    GridModel {
        mdp,
        reward,
        omega,
        p_k,
        alpha: 1.0,
        noise_model: NoiseModel::Gaussian,
    }
}

#[test]
fn reward_free_partition_factorizes_over_time() {
    // deterministic moves and r = 0: every step contributes sum_{a,u} p(u|a)
    let mdp = TabularMdp::random_deterministic(3, 3, 3, 1).unwrap();
    let reward = zero_table(3, 3);
    let omega = ExpertiseParams::new(1, 1, 2.0);
    let m = model(&mdp, &reward, &omega, &[1.0]);
    let per_step: f64 = (0..3)
        .flat_map(|a| (0..3).map(move |u| (a, u)))
        .map(|(a, u)| log_noisy_model(&mdp.actions[u], &mdp.actions[a], &omega, 0, NoiseModel::Gaussian).exp())
        .sum();
    let g = brute_force_log_partition(&m, &EnumerationBudget::default()).unwrap();
    assert!((g - 3.0 * per_step.ln()).abs() < 1e-12);
    // a nearly flat noise model approaches T log |A| + T log(|A| p)
    let flat = ExpertiseParams::new(1, 1, 40.0);
    let mf = model(&mdp, &reward, &flat, &[1.0]);
    let p = log_noisy_model(&[0.0], &[0.0], &flat, 0, NoiseModel::Gaussian);
    let gf = brute_force_log_partition(&mf, &EnumerationBudget::default()).unwrap();
    assert!((gf - 3.0 * (3f64.ln() + 3f64.ln() + p)).abs() < 1e-6);
}

#[test]
fn seed_zero_partition_fixture() {
    let mdp = TabularMdp::random_deterministic(2, 2, 2, 0).unwrap();
    let reward = random_table(2, 2, 0);
    let omega = ExpertiseParams::new(1, 1, -0.5);
    let m = model(&mdp, &reward, &omega, &[1.0]);
    let g = brute_force_log_partition(&m, &EnumerationBudget::default()).unwrap();
    let svi = soft_vi_log_partition(&m).unwrap();
    assert!((g - svi).abs() < 1e-8);
    // frozen from the enumeration above
    assert!((g - FIXTURE_G).abs() < 1e-12, "{g:?}");
}

const FIXTURE_G: f64 = 0.21705719374157273;

#[test]
fn partition_is_a_mixture_over_demonstrators() {
    let mdp = TabularMdp::random(2, 3, 2, 4).unwrap();
    let reward = random_table(2, 3, 5);
    let mut omega = ExpertiseParams::new(2, 1, -1.0);
    omega.log_var[1][0] = 0.4;
    let budget = EnumerationBudget::default();
    let g = brute_force_log_partition(&model(&mdp, &reward, &omega, &[0.3, 0.7]), &budget).unwrap();
    let single = |k: usize| {
        let om = ExpertiseParams { log_var: vec![omega.log_var[k].clone()] };
        brute_force_log_partition(&model(&mdp, &reward, &om, &[1.0]), &budget).unwrap().exp()
    };
    assert!((g - (0.3 * single(0) + 0.7 * single(1)).ln()).abs() < 1e-12);
}

fn one_point(s: f64, u: f64) -> DemoDataset {
    DemoDataset {
        trajectories: vec![Trajectory {
            k: Some(1),
            states: vec![vec![s]],
            actions: vec![vec![u]],
        }],
        k: 1,
        p_k: vec![1.0],
        ground_truth: None,
        env_id: "chain-s2-t1".into(),
    }
}

#[test]
fn f_is_log_sum_exp_of_l() {
    // u = 0 sits midway between the grid actions -1 and 1, so the noise
    // terms agree and the reward table sets l directly
    let mdp = TabularMdp::chain(2, 1, 0.0).unwrap();
    let omega = ExpertiseParams::new(1, 1, 0.0);
    let lp = log_noisy_model(&[0.0], &[1.0], &omega, 0, NoiseModel::Gaussian);
    let mut reward = zero_table(2, 2);
    reward.weights = vec![-lp, -lp, -lp, -lp];
    let data = one_point(0.0, 0.0);
    let f = brute_force_f(&model(&mdp, &reward, &omega, &[1.0]), &data).unwrap();
    assert!((f - 2f64.ln()).abs() < 1e-12);
    reward.weights[0] += 1.0;
    let f = brute_force_f(&model(&mdp, &reward, &omega, &[1.0]), &data).unwrap();
    assert!((f - (std::f64::consts::E + 1.0).ln()).abs() < 1e-12);
}

#[test]
fn f_equals_the_best_of_many_restarted_bound_optimizations() {
    let inst = random_grid_instance(0, false, 3, 3, 3, 1.0, NoiseModel::Gaussian).unwrap();
    let data = grid_demos(&inst, 2, 0).unwrap();
    let m = inst.model();
    let na = inst.mdp.n_actions();
    let mut rng = rng_from_seed(1);
    let mut total = 0.0;
    for tr in &data.trajectories {
        let k = tr.k_index().unwrap();
        for (s, u) in tr.states.iter().zip(&tr.actions) {
            let s = s[0] as usize;
            let l: Vec<f64> = (0..na).map(|a| m.scaled_l(s, a, u, k)).collect();
            let mut best = f64::NEG_INFINITY;
            for _ in 0..200 {
                // entropic mirror ascent from a random interior point
                let mut q: Vec<f64> = (0..na).map(|_| rand::Rng::random_range(&mut rng, 0.01..1.0)).collect();
                let z: f64 = q.iter().sum();
                q.iter_mut().for_each(|p| *p /= z);
                for _ in 0..200 {
                    let lq: Vec<f64> = (0..na).map(|a| 0.5 * q[a].ln() + 0.5 * l[a]).collect();
                    q = softmax(&lq);
                }
                best = best.max(f_bound_point(&m, s, u, k, &q));
            }
            total += best;
        }
    }
    total /= data.trajectories.len() as f64;
    let f = brute_force_f(&m, &data).unwrap();
    assert!((f - total).abs() < 1e-6, "{f} vs {total}");
}

#[test]
fn well_specified_model_has_zero_divergence() {
    let mdp = TabularMdp::random(2, 2, 2, 6).unwrap();
    let reward = random_table(2, 2, 7);
    let omega = ExpertiseParams::new(1, 1, -0.7);
    let budget = EnumerationBudget::default();
    let m = model(&mdp, &reward, &omega, &[1.0]);
    let data = model_distribution(&m, &budget).unwrap();
    let mass: f64 = data.iter().map(|p| p.prob).sum();
    assert!((mass - 1.0).abs() < 1e-12);
    assert!(exact_kl_data_to_model(&m, &data, &budget).unwrap().abs() < 1e-9);

    let kl = |d: f64| {
        let om = ExpertiseParams::new(1, 1, -0.7 + d);
        exact_kl_data_to_model(&model(&mdp, &reward, &om, &[1.0]), &data, &budget).unwrap()
    };
    let sweep: Vec<f64> = [-0.5, -0.2, 0.0, 0.2, 0.5].iter().map(|d| kl(*d)).collect();
    assert!(sweep[0] > sweep[1] && sweep[1] > sweep[2] && sweep[3] > sweep[2] && sweep[4] > sweep[3], "{sweep:?}");
}

#[test]
fn f_minus_g_plus_kl_is_constant() {
    let mdp = TabularMdp::random(2, 2, 2, 8).unwrap();
    let expert = TabularPolicy::uniform(&mdp);
    let kernel = |k: usize, a: usize| if k == 0 { if a == 0 { vec![0.9, 0.1] } else { vec![0.2, 0.8] } } else { vec![0.5, 0.5] };
    let p_k = [0.4, 0.6];
    let data = generative_distribution(&mdp, &expert, &kernel, &p_k);
    let budget = EnumerationBudget::default();
    let mut vals = Vec::new();
    for seed in 0..5 {
        let reward = random_table(2, 2, 100 + seed);
        let mut omega = ExpertiseParams::new(2, 1, 0.0);
        let mut rng = rng_from_seed(200 + seed);
        omega.log_var.iter_mut().flatten().for_each(|v| *v = rand::Rng::random_range(&mut rng, -1.5..1.0));
        let m = model(&mdp, &reward, &omega, &p_k);
        let g = brute_force_log_partition(&m, &budget).unwrap();
        vals.push(expected_f(&m, &data) - g + exact_kl_data_to_model(&m, &data, &budget).unwrap());
    }
    let spread = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread < 1e-8, "{vals:?}");
}

#[test]
fn reward_free_closed_form_is_the_gridded_noise_density() {
    let mdp = TabularMdp::random(1, 5, 1, 9).unwrap();
    let reward = zero_table(1, 5);
    let omega = ExpertiseParams::new(1, 1, 0.3f64.ln());
    let m = model(&mdp, &reward, &omega, &[1.0]);
    let u = [0.15];
    let q = closed_form_q_psi(&m, 0, &u, 0);
    let dens: Vec<f64> = mdp.actions.iter().map(|a| (-(u[0] - a[0]).powi(2) / (2.0 * 0.3)).exp()).collect();
    let z: f64 = dens.iter().sum();
    for (p, d) in q.iter().zip(&dens) {
        assert!((p - d / z).abs() < 1e-12);
    }
}

#[test]
fn linear_reward_moves_the_closed_form_mode() {
    let n = 401;
    let actions = grid_1d(n);
    let mdp = TabularMdp::new(actions.clone(), 1, vec![1.0], vec![vec![vec![1.0]; n]], vec![vec![0.0; n]]).unwrap();
    let (w, c, u): (f64, f64, f64) = (0.8, 0.25, 0.1);
    let mut reward = zero_table(1, n);
    reward.weights = actions.iter().map(|a| w * a[0]).collect();
    let omega = ExpertiseParams::new(1, 1, c.ln());
    let q = closed_form_q_psi(&model(&mdp, &reward, &omega, &[1.0]), 0, &[u], 0);
    let mode = (0..n).max_by(|&i, &j| q[i].total_cmp(&q[j])).unwrap();
    assert!((actions[mode][0] - (u + w * c)).abs() <= 0.5 * 2.0 / (n - 1) as f64 + 1e-12);
}

#[test]
fn posterior_updates_converge_to_the_closed_form() {
    assert!(converged_qpsi_tv(0, 2000).unwrap() < 1e-3);
}

#[test]
fn finite_differences_of_a_quadratic() {
    let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
    assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    assert!(finite_diff_grad(|x| x[0], &[1.0], 0.0).is_err());
}

#[test]
fn enumeration_over_budget_is_refused() {
    let mdp = TabularMdp::random(3, 3, 3, 10).unwrap();
    let reward = zero_table(3, 3);
    let omega = ExpertiseParams::new(1, 1, 0.0);
    let tight = EnumerationBudget {
        max_traj_count: 100,
        ..EnumerationBudget::default()
    };
    let err = brute_force_log_partition(&model(&mdp, &reward, &omega, &[1.0]), &tight).unwrap_err();
    assert!(matches!(err, VildError::BudgetExceeded { budget: 100, .. }));

    let opts = CheckOptions {
        budget: EnumerationBudget {
            max_horizon: 0,
            ..EnumerationBudget::default()
        },
        instances: 2,
        ..CheckOptions::default()
    };
    let rows = run_checks(&[Suite::Partition, Suite::Bounds], &opts).unwrap();
    assert!(rows.iter().any(|r| r.status == Status::Refused));
    assert!(rows.iter().all(|r| r.status != Status::Fail));
}

#[test]
fn perturbed_gradients_fail_the_suite() {
    let opts = CheckOptions {
        instances: 2,
        perturb_gradient: 0.01,
        ..CheckOptions::default()
    };
    let rows = run_checks(&[Suite::Grads], &opts).unwrap();
    assert!(rows.iter().any(|r| r.status == Status::Fail));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn soft_vi_matches_enumeration_on_deterministic_instances(seed in 0u64..10_000, alpha in 0.3f64..3.0) {
        let inst = random_grid_instance(seed, true, 3, 3, 3, alpha, NoiseModel::Gaussian).unwrap();
        let m = inst.model();
        let brute = brute_force_log_partition(&m, &EnumerationBudget::default()).unwrap();
        prop_assert!((brute - soft_vi_log_partition(&m).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn f_bounds_every_variational_distribution(seed in 0u64..10_000, u in -1.5f64..1.5, logits in prop::collection::vec(-4.0f64..4.0, 3)) {
        let inst = random_grid_instance(seed, false, 3, 3, 3, 1.0, NoiseModel::Laplace).unwrap();
        let m = inst.model();
        let na = inst.mdp.n_actions();
        let q = softmax(&logits[..na]);
        let f = m.f_t(0, &[u], 0);
        prop_assert!(f_bound_point(&m, 0, &[u], 0, &q) <= f + 1e-12);
        let qs = closed_form_q_psi(&m, 0, &[u], 0);
        prop_assert!((f_bound_point(&m, 0, &[u], 0, &qs) - f).abs() < 1e-8);
        let l: Vec<f64> = (0..na).map(|a| m.scaled_l(0, a, &[u], 0)).collect();
        prop_assert!((f - log_sum_exp(&l)).abs() < 1e-12);
    }

    #[test]
    fn structured_bound_stays_below_g(seed in 0u64..10_000, spread in 0.1f64..3.0) {
        let inst = random_grid_instance(seed, false, 2, 3, 2, 1.0, NoiseModel::Gaussian).unwrap();
        let m = inst.model();
        let g = brute_force_log_partition(&m, &EnumerationBudget::default()).unwrap();
        let (aug, reward) = augmented_mdp(&m).unwrap();
        let total: f64 = inst.p_k.iter().sum();
        let q = random_tabular_policy(&aug, spread, &mut rng_from_seed(seed));
        prop_assert!(g_bound(&aug, &reward, &q, total) <= g + 1e-10);
    }
}
