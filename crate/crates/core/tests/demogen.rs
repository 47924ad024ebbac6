use proptest::prelude::*;
use sha2::{Digest, Sha256};
use vild::demogen::*;
use vild::env::*;
use vild::math::spearman;
use vild::rng::rng_from_seed;

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn point_mass_dataset(noise: NoiseKind, sigma: Vec<f64>, n: usize, seed: u64) -> DemoDataset {
    let m = PointMassMdp::new(2, 10).unwrap();
    let pi = train_optimal_point_mass(&m).unwrap();
    let k = sigma.len();
    let spec = NoiseSpec::new(noise, sigma, 2).unwrap();
    generate_dataset(&m, &pi, &spec, &uniform_p_k(k), n, seed, "point-mass-d2-t10").unwrap()
}

#[test]
fn gaussian_noise_moments() {
    let mut rng = rng_from_seed(1);
    let xs: Vec<f64> = (0..100_000).map(|_| gaussian_noisy_action(&[0.5], 0.1, &mut rng)[0]).collect();
    let (m, v) = moments(&xs);
    assert!((m - 0.5).abs() < 0.002);
    assert!((v / 0.01 - 1.0).abs() < 0.1);
}

#[test]
fn laplace_noise_moments() {
    // Laplace(b): mean 0, variance 2 b^2
    let mut rng = rng_from_seed(2);
    let xs: Vec<f64> = (0..100_000).map(|_| laplace_noisy_action(&[0.0], 0.3, &mut rng)[0]).collect();
    let (m, v) = moments(&xs);
    assert!(m.abs() < 0.01);
    assert!((v / 0.18 - 1.0).abs() < 0.1);
}

#[test]
fn sigma_grid_is_the_ten_level_default() {
    assert_eq!(NoiseSpec::default_sigmas(10), vec![0.01, 0.05, 0.1, 0.25, 0.4, 0.6, 0.7, 0.8, 0.9, 1.0]);
    assert_eq!(DEFAULT_OU_THETA, 0.15);
}

#[test]
fn noise_spec_validation() {
    assert!(NoiseSpec::new(NoiseKind::Gaussian, vec![], 1).is_err());
    assert!(NoiseSpec::new(NoiseKind::Gaussian, vec![0.1, 0.0], 1).is_err());
    assert!(NoiseSpec::new(NoiseKind::Gaussian, vec![0.1], 0).is_err());
    let mut tsd = NoiseSpec::new(NoiseKind::Tsd, vec![0.1], 1).unwrap();
    tsd.ou_theta = 0.0;
    assert!(tsd.validate().is_err());
}

#[test]
fn vanishing_tsd_scale_gives_vanishing_path() {
    let mut rng = rng_from_seed(3);
    let b = tsd_noise_path(30, 2, 1e-12, DEFAULT_OU_THETA, &mut rng);
    assert!(b.iter().flatten().all(|x| *x >= 0.0 && *x < 1e-10));
}

#[test]
fn tsd_path_variance_grows_along_the_episode() {
    let (t_len, paths) = (50, 10_000);
    let mut rng = rng_from_seed(4);
    let all: Vec<Vec<Vec<f64>>> =
        (0..paths).map(|_| tsd_noise_path(t_len, 1, 1.0, DEFAULT_OU_THETA, &mut rng)).collect();
    let var: Vec<f64> = (0..t_len)
        .map(|t| moments(&all.iter().map(|p| p[t][0]).collect::<Vec<_>>()).1)
        .collect();
    assert!(var[t_len - 1] > var[0]);
    // windowed isotonic check
    let win: Vec<f64> = var.chunks(5).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in win.windows(2) {
        assert!(w[1] >= 0.97 * w[0], "{win:?}");
    }
}

#[test]
fn tsd_action_examples() {
    let mut rng = rng_from_seed(5);
    assert_eq!(tsd_noisy_action(&[0.0, 0.0], &[0.7, 0.2], &mut rng), vec![0.0, 0.0]);
    assert_eq!(tsd_noisy_action(&[0.3, -0.2], &[0.0, 0.0], &mut rng), vec![0.3, -0.2]);
    let us: Vec<Vec<f64>> = (0..100_000).map(|_| tsd_noisy_action(&[1.0, 1.0], &[0.5, 0.5], &mut rng)).collect();
    for j in 0..2 {
        let (m, v) = moments(&us.iter().map(|u| u[j]).collect::<Vec<_>>());
        assert!((m - 1.0).abs() < 0.01);
        // 0.5 * ||a||_1 / d_a = 0.5
        assert!((v / 0.5 - 1.0).abs() < 0.1, "{v}");
    }
}

#[test]
fn vanishing_noise_records_the_expert_actions() {
    let m = PointMassMdp::new(2, 10).unwrap();
    let pi = train_optimal_point_mass(&m).unwrap();
    let ds = point_mass_dataset(NoiseKind::Gaussian, vec![1e-12; 3], 20, 6);
    for tr in &ds.trajectories {
        for (t, (s, u)) in tr.states.iter().zip(&tr.actions).enumerate() {
            let a = pi.mean_action(t, s);
            for (x, y) in a.iter().zip(u) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn uniform_counts_concentrate() {
    let ds = point_mass_dataset(NoiseKind::Gaussian, NoiseSpec::default_sigmas(10), 1000, 7);
    let sd = (1000.0f64 * 0.1 * 0.9).sqrt();
    for c in ds.counts() {
        assert!((c as f64 - 100.0).abs() <= 4.0 * sd, "{c}");
    }
    assert_eq!(ds.counts().iter().sum::<usize>(), 1000);
}

#[test]
fn mean_return_degrades_with_noise_on_point_mass() {
    let m = PointMassMdp::new(1, 10).unwrap();
    let pi = train_optimal_point_mass(&m).unwrap();
    let spec = NoiseSpec::new(NoiseKind::Gaussian, SIGMA_GRID.to_vec(), 1).unwrap();
    let demos = generate_demonstrations(&m, &pi, &spec, &uniform_p_k(10), 2000, 8).unwrap();
    let (ret, _) = returns_by_demonstrator(&demos, 10);
    let rho = spearman(&SIGMA_GRID, &ret);
    assert!(rho <= -0.8, "{rho} {ret:?}");
}

#[test]
fn demonstrations_never_carry_the_latent_action() {
    let ds = point_mass_dataset(NoiseKind::Gaussian, vec![0.3], 2, 9);
    let text = ds.to_jsonl().unwrap();
    for line in text.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["k", "states", "u"]);
    }
}

#[test]
fn corpus_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demos.jsonl");
    for noise in [NoiseKind::Gaussian, NoiseKind::Tsd, NoiseKind::Laplace] {
        let ds = point_mass_dataset(noise, vec![0.1, 0.5], 25, 10);
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }
}

#[test]
fn empty_corpus_is_header_only() {
    let ds = DemoDataset {
        trajectories: vec![],
        k: 2,
        p_k: vec![0.5, 0.5],
        ground_truth: None,
        env_id: "chain-s5-t10".into(),
    };
    let text = ds.to_jsonl().unwrap();
    assert_eq!(text.lines().count(), 1);
    let back = DemoDataset::read_from(text.as_bytes(), "mem".as_ref()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn large_corpus_reserializes_to_the_same_digest() {
    let ds = point_mass_dataset(NoiseKind::Gaussian, NoiseSpec::default_sigmas(10), 1000, 11);
    let a = ds.to_jsonl().unwrap();
    let back = DemoDataset::read_from(a.as_bytes(), "mem".as_ref()).unwrap();
    let b = back.to_jsonl().unwrap();
    assert_eq!(Sha256::digest(a.as_bytes()), Sha256::digest(b.as_bytes()));
}

#[test]
fn malformed_lines_report_their_line_number() {
    let ds = point_mass_dataset(NoiseKind::Gaussian, vec![0.1], 3, 12);
    let mut lines: Vec<String> = ds.to_jsonl().unwrap().lines().map(String::from).collect();
    lines[2] = "{\"k\": 1, \"states\": [".into();
    let err = DemoDataset::read_from(lines.join("\n").as_bytes(), "bad.jsonl".as_ref()).unwrap_err();
    assert!(matches!(err, vild::VildError::Parse { line: 3, .. }), "{err}");

    let mut lines: Vec<String> = ds.to_jsonl().unwrap().lines().map(String::from).collect();
    lines[1] = lines[1].replace("\"k\":1", "\"k\":5");
    assert!(DemoDataset::read_from(lines.join("\n").as_bytes(), "bad.jsonl".as_ref()).is_err());
}

#[test]
fn generation_rejects_mismatched_inputs() {
    let m = PointMassMdp::new(2, 5).unwrap();
    let pi = train_optimal_point_mass(&m).unwrap();
    let spec = NoiseSpec::new(NoiseKind::Gaussian, vec![0.1, 0.2], 2).unwrap();
    assert!(generate_dataset(&m, &pi, &spec, &[1.0], 5, 0, "x").is_err());
    assert!(generate_dataset(&m, &pi, &spec, &[0.5, 0.5], 0, 0, "x").is_err());
    let spec1 = NoiseSpec::new(NoiseKind::Gaussian, vec![0.1], 1).unwrap();
    assert!(generate_dataset(&m, &pi, &spec1, &[1.0], 5, 0, "x").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_a_pure_function_of_its_inputs(seed in 0u64..10_000, n in 1usize..20, kind in 0usize..3) {
        let noise = [NoiseKind::Gaussian, NoiseKind::Tsd, NoiseKind::Laplace][kind];
        let a = point_mass_dataset(noise, vec![0.05, 0.4, 0.9], n, seed);
        let b = point_mass_dataset(noise, vec![0.05, 0.4, 0.9], n, seed);
        prop_assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        prop_assert!(a.trajectories.iter().all(|t| matches!(t.k, Some(1..=3))));
    }

    #[test]
    fn tsd_scales_are_nonnegative(seed in 0u64..10_000, t_len in 1usize..40, sigma in 0.01f64..2.0) {
        let mut rng = rng_from_seed(seed);
        let b = tsd_noise_path(t_len, 2, sigma, DEFAULT_OU_THETA, &mut rng);
        prop_assert_eq!(b.len(), t_len);
        prop_assert!(b.iter().flatten().all(|x| *x >= 0.0));
    }
}
