use vild::baselines::*;
use vild::demogen::*;
use vild::env::*;
use vild::harness::{generate_corpus, DemosSection, EnvSection};
use vild::rng::{rng_from_seed, Rng};
use vild::vild::{PolicyParams, TrainConfig};

fn pm_data(sigma: Vec<f64>, n: usize, seed: u64) -> (Task, DemoDataset) {
    let m = PointMassMdp::new(1, 10).unwrap();
    let pi = train_optimal_point_mass(&m).unwrap();
    let k = sigma.len();
    let spec = NoiseSpec::new(NoiseKind::Gaussian, sigma, 1).unwrap();
    let ds = generate_dataset(&m, &pi, &spec, &uniform_p_k(k), n, seed, "pm").unwrap();
    (Task::PointMass(m), ds)
}

/// Stationary linear expert `a = -0.5 x + 0.1`.
struct Linear;

impl Policy for Linear {
    fn act(&self, _: usize, s: &[f64], _: &mut Rng) -> Vec<f64> {
        s.iter().map(|x| -0.5 * x + 0.1).collect()
    }
}

#[test]
fn bc_recovers_a_noiseless_stationary_expert() {
    let m = PointMassMdp::new(2, 8).unwrap();
    let spec = NoiseSpec::new(NoiseKind::Gaussian, vec![1e-12], 2).unwrap();
    let ds = generate_dataset(&m, &Linear, &spec, &[1.0], 30, 1, "pm").unwrap();
    let task = Task::PointMass(m);
    let bc = train_bc(&task, &ds, &OfflineConfig::default()).unwrap().params;
    for tr in &ds.trajectories {
        for s in &tr.states {
            let want = Linear.act(0, s, &mut rng_from_seed(0));
            for (p, w) in bc.predict(s).iter().zip(&want) {
                assert!((p - w).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn bc_fits_the_mean_of_two_offset_demonstrators() {
    let m = TabularMdp::chain(3, 3, 0.0).unwrap();
    let traj = |k: usize, u: f64| Trajectory {
        k: Some(k),
        states: vec![vec![0.0], vec![1.0], vec![2.0]],
        actions: vec![vec![u]; 3],
    };
    let ds = DemoDataset {
        trajectories: vec![traj(1, 0.2), traj(2, 1.2), traj(1, 0.2), traj(2, 1.2)],
        k: 2,
        p_k: vec![0.5, 0.5],
        ground_truth: None,
        env_id: "chain-s3-t3".into(),
    };
    let bc = train_bc(&Task::Tabular(m), &ds, &OfflineConfig::default()).unwrap().params;
    for s in 0..3 {
        assert!((bc.predict(&[s as f64])[0] - 0.7).abs() < 1e-9);
    }
}

#[test]
fn bc_exact_solution_is_reached_from_any_start() {
    let (task, ds) = pm_data(SIGMA_GRID.to_vec(), 50, 2);
    let exact = train_bc(&task, &ds, &OfflineConfig::default()).unwrap().params;
    let pts: Vec<(&[f64], &[f64])> = ds
        .trajectories
        .iter()
        .flat_map(|tr| tr.states.iter().zip(&tr.actions).map(|(s, u)| (s.as_slice(), u.as_slice())))
        .collect();
    let loss = |p: &BcPolicy| pts.iter().map(|(s, u)| p.loss(s, u)).sum::<f64>() / pts.len() as f64;
    let best = loss(&exact);
    let mut rng = rng_from_seed(3);
    for _ in 0..5 {
        let mut p = BcPolicy::zeros(&task);
        p.set_params(&[rand::Rng::random_range(&mut rng, -3.0..3.0), rand::Rng::random_range(&mut rng, -3.0..3.0)]);
        // full-batch gradient descent on the squared loss
        for _ in 0..20_000 {
            let v = p.params();
            let (mut gs, mut gb) = (0.0, 0.0);
            for (s, u) in &pts {
                let e = p.predict(s)[0] - u[0];
                gs += 2.0 * e * s[0];
                gb += 2.0 * e;
            }
            let n = pts.len() as f64;
            p.set_params(&[v[0] - 0.2 * gs / n, v[1] - 0.2 * gb / n]);
        }
        assert!((loss(&p) - best).abs() < 1e-8, "{} vs {best}", loss(&p));
    }
}

#[test]
fn coteaching_with_full_keep_ratio_is_bc() {
    let (task, ds) = pm_data(vec![0.05, 0.8], 30, 4);
    let cfg = OfflineConfig {
        solver: BcSolver::Sgd,
        steps: 300,
        batch_size: 32,
        keep_floor: 1.0,
        eval_interval: 50,
        seed: 9,
        ..OfflineConfig::default()
    };
    let bc = train_bc(&task, &ds, &cfg).unwrap();
    let co = train_coteaching(&task, &ds, &cfg).unwrap();
    assert_eq!(bc.params, co.result.params);
    assert_eq!(bc.metrics.to_csv(), co.result.metrics.to_csv());
}

#[test]
fn coteaching_selects_mostly_expert_samples() {
    let (task, ds) = pm_data(vec![0.01, 1.0], 200, 5);
    let cfg = OfflineConfig {
        solver: BcSolver::Sgd,
        steps: 1000,
        batch_size: 64,
        keep_floor: 0.5,
        eval_interval: 1000,
        ..OfflineConfig::default()
    };
    let co = train_coteaching(&task, &ds, &cfg).unwrap();
    let sel = &co.selected_after_warmup;
    let frac = sel[0] as f64 / sel.iter().sum::<usize>() as f64;
    assert!(frac >= 0.7, "{sel:?}");
}

#[test]
fn coteaching_rejects_bad_keep_ratio() {
    let (task, ds) = pm_data(vec![0.1], 3, 6);
    for keep_floor in [0.0, 1.5] {
        let cfg = OfflineConfig { keep_floor, ..OfflineConfig::default() };
        assert!(train_coteaching(&task, &ds, &cfg).is_err());
    }
}

#[test]
fn bcd_objective_is_monotone_over_sweeps() {
    let (task, ds) = pm_data(SIGMA_GRID.to_vec(), 100, 7);
    let out = train_bcd(&task, &ds, &OfflineConfig { sweeps: 50, ..OfflineConfig::default() }).unwrap();
    assert_eq!(out.objective_trace.len(), 50);
    for w in out.objective_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn bcd_orders_a_clean_and_a_noisy_demonstrator() {
    let (task, ds) = pm_data(vec![0.01, 1.0], 100, 8);
    let out = train_bcd(&task, &ds, &OfflineConfig::default()).unwrap();
    let c = out.result.params.omega.mean_diag();
    assert!(c[0] < c[1], "{c:?}");
}

#[test]
fn bcd_on_a_single_noiseless_demonstrator_is_bc() {
    let m = PointMassMdp::new(1, 8).unwrap();
    let spec = NoiseSpec::new(NoiseKind::Gaussian, vec![1e-12], 1).unwrap();
    let ds = generate_dataset(&m, &Linear, &spec, &[1.0], 20, 9, "pm").unwrap();
    let task = Task::PointMass(m);
    let cfg = OfflineConfig::default();
    let bc = train_bc(&task, &ds, &cfg).unwrap().params;
    let bcd = train_bcd(&task, &ds, &cfg).unwrap().result.params;
    for (a, b) in bc.params().iter().zip(bcd.policy.params()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn maxent_irl_on_clean_chain_data_is_near_optimal() {
    let env = EnvSection::default();
    let demos = DemosSection {
        k: 1,
        n: 100,
        sigma: Some(vec![0.01]),
        ..DemosSection::default()
    };
    let corpus = generate_corpus(&env, &demos).unwrap();
    let task = env.build().unwrap();
    let Task::Tabular(m) = &task else { unreachable!() };
    let opt = m.exact_return(&train_optimal_tabular(m).unwrap(), &m.true_reward);
    let cfg = TrainConfig {
        iterations: 200,
        alpha: 0.05,
        step_size: 0.05,
        eval_interval: 200,
        ..TrainConfig::default()
    };
    let res = train_maxent_irl(&task, &corpus.dataset, &cfg).unwrap();
    let PolicyParams::Tabular(pi) = &res.params.policy else { unreachable!() };
    let got = m.exact_return(pi, &m.true_reward);
    assert!(got >= 0.95 * opt, "{got} vs {opt}");
}

#[test]
fn offline_metrics_report_no_transition_samples() {
    let (task, ds) = pm_data(vec![0.1, 0.5], 10, 10);
    let cfg = OfflineConfig {
        solver: BcSolver::Sgd,
        steps: 20,
        eval_interval: 5,
        ..OfflineConfig::default()
    };
    let bc = train_bc(&task, &ds, &cfg).unwrap();
    assert_eq!(bc.metrics.rows.len(), 4);
    assert!(bc.metrics.rows.iter().all(|r| r.transition_samples == 0));
}
