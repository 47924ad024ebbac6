//! Diverse-quality demonstration generation and the JSONL corpus format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, Policy, Trajectory};
use crate::error::{Result, VildError};
use crate::rng::{child_rng, Rng};

/// Noise levels of the ten demonstrators used throughout the experiments.
pub const SIGMA_GRID: [f64; 10] = [0.01, 0.05, 0.1, 0.25, 0.4, 0.6, 0.7, 0.8, 0.9, 1.0];

pub const DEFAULT_OU_THETA: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Tsd,
    Laplace,
}

impl std::str::FromStr for NoiseKind {
    type Err = VildError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "tsd" => Ok(NoiseKind::Tsd),
            "laplace" => Ok(NoiseKind::Laplace),
            other => Err(VildError::config(format!("unknown noise kind `{other}`"))),
        }
    }
}

/// Per-demonstrator noise description (also stored as ground truth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: Vec<f64>,
    pub ou_theta: f64,
    pub d_a: usize,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, sigma: Vec<f64>, d_a: usize) -> Result<Self> {
        let spec = Self {
            kind,
            sigma,
            ou_theta: DEFAULT_OU_THETA,
            d_a,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_empty() {
            return Err(VildError::config("at least one demonstrator is required"));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(VildError::config("noise scales must be positive"));
        }
        if self.kind == NoiseKind::Tsd && !(self.ou_theta > 0.0) {
            return Err(VildError::config("OU mean reversion must be positive"));
        }
        if self.d_a == 0 {
            return Err(VildError::config("action dimension must be positive"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// Default scales for `k` demonstrators: the standard ten-level grid
    /// when `k = 10`, otherwise evenly spaced between its end points.
    pub fn default_sigmas(k: usize) -> Vec<f64> {
        if k == SIGMA_GRID.len() {
            return SIGMA_GRID.to_vec();
        }
        if k == 1 {
            return vec![SIGMA_GRID[0]];
        }
        let (lo, hi) = (SIGMA_GRID[0], SIGMA_GRID[9]);
        (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
    }
}

/// `u = a + sigma z`.
pub fn gaussian_noisy_action(a: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    a.iter()
        .map(|a| {
            let z: f64 = StandardNormal.sample(rng);
            a + sigma * z
        })
        .collect()
}

/// Independent Laplace noise with scale `b` per coordinate.
pub fn laplace_noisy_action(a: &[f64], b: f64, rng: &mut Rng) -> Vec<f64> {
    a.iter()
        .map(|a| {
            let x: f64 = rng.random::<f64>() - 0.5;
            a - b * x.signum() * (1.0 - 2.0 * x.abs()).ln()
        })
        .collect()
}

/// Magnitudes of a `d_a`-dimensional OU path `x_{t+1} = x_t - theta x_t +
/// sigma z_t` in the orientation where the process starts at rest, so the
/// variance grows along the episode. This is the time reversal of a path
/// that decays into the origin. Returns `b[t][j]` for t = 0..T.
pub fn tsd_noise_path(horizon: usize, d_a: usize, sigma: f64, theta: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut x = vec![0.0; d_a];
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        for xj in x.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *xj += -theta * *xj + sigma * z;
        }
        out.push(x.iter().map(|v| v.abs()).collect());
    }
    out
}

/// `u ~ N(a, diag(b * ||a||_1 / d_a))`.
pub fn tsd_noisy_action(a: &[f64], b: &[f64], rng: &mut Rng) -> Vec<f64> {
    let scale = a.iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64;
    a.iter()
        .zip(b)
        .map(|(a, b)| {
            let var = b * scale;
            if var > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                a + var.sqrt() * z
            } else {
                *a
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub trajectories: Vec<Trajectory>,
    pub k: usize,
    pub p_k: Vec<f64>,
    pub ground_truth: Option<NoiseSpec>,
    pub env_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(rename = "K")]
    k: usize,
    p_k: Vec<f64>,
    env_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    noise: Option<NoiseSpec>,
}

impl DemoDataset {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.p_k.len() != self.k {
            return Err(VildError::shape("p_k must have one entry per demonstrator"));
        }
        let s: f64 = self.p_k.iter().sum();
        if (s - 1.0).abs() > 1e-12 || self.p_k.iter().any(|p| *p < 0.0) {
            return Err(VildError::shape("p_k must be a probability vector"));
        }
        for (i, tr) in self.trajectories.iter().enumerate() {
            match tr.k {
                Some(k) if (1..=self.k).contains(&k) => {}
                _ => return Err(VildError::shape(format!("trajectory {i}: demonstrator id outside 1..={}", self.k))),
            }
            if tr.states.len() != tr.actions.len() {
                return Err(VildError::shape(format!("trajectory {i}: states and actions differ in length")));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.len())
    }

    pub fn action_dim(&self) -> usize {
        self.trajectories
            .first()
            .and_then(|t| t.actions.first())
            .map_or(0, |a| a.len())
    }

    /// Trajectory counts per demonstrator (zero-based index).
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for t in &self.trajectories {
            if let Some(k) = t.k_index() {
                c[k] += 1;
            }
        }
        c
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            k: self.k,
            p_k: self.p_k.clone(),
            env_id: self.env_id.clone(),
            noise: self.ground_truth.clone(),
        };
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, path: &Path) -> Result<Self> {
        let perr = |line: usize, message: String| VildError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = r.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, l)) => serde_json::from_str(&l?).map_err(|e| perr(1, e.to_string()))?,
            None => return Err(perr(1, "missing header line".into())),
        };
        let mut trajectories = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line).map_err(|e| perr(i + 1, e.to_string()))?;
            if t.k.is_none() {
                return Err(perr(i + 1, "missing field `k`".into()));
            }
            trajectories.push(t);
        }
        let ds = DemoDataset {
            trajectories,
            k: header.k,
            p_k: header.p_k,
            ground_truth: header.noise,
            env_id: header.env_id,
        };
        ds.validate().map_err(|e| perr(0, e.to_string()))?;
        Ok(ds)
    }
}

pub fn save_dataset(ds: &DemoDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    ds.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DemoDataset> {
    let path = path.as_ref();
    let f = File::open(path)?;
    DemoDataset::read_from(BufReader::new(f), path)
}

fn sample_k(p_k: &[f64], rng: &mut Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in p_k.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    p_k.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// One demonstration plus the true per-step rewards of the executed actions.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub trajectory: Trajectory,
    pub rewards: Vec<f64>,
}

/// Draws `n` trajectories: `k ~ p_k`, `a_t ~ expert`, `u_t ~ p(u | a_t, k)`,
/// and the environment executes `u_t`. Only `(s, u, k)` is recorded.
pub fn generate_demonstrations<E: Environment + ?Sized, P: Policy + ?Sized>(
    env: &E,
    expert: &P,
    noise: &NoiseSpec,
    p_k: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<Demonstration>> {
    noise.validate()?;
    if p_k.len() != noise.k() {
        return Err(VildError::shape("p_k and noise spec disagree on K"));
    }
    if noise.d_a != env.action_dim() {
        return Err(VildError::shape("noise dimension differs from the action dimension"));
    }
    let horizon = env.horizon();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = child_rng(seed, i as u64);
            let k = sample_k(p_k, &mut rng);
            let sigma = noise.sigma[k];
            let path = (noise.kind == NoiseKind::Tsd)
                .then(|| tsd_noise_path(horizon, noise.d_a, sigma, noise.ou_theta, &mut rng));
            let mut s = env.initial_state(&mut rng);
            let mut states = Vec::with_capacity(horizon);
            let mut actions = Vec::with_capacity(horizon);
            let mut rewards = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let a = expert.act(t, &s, &mut rng);
                let u = match noise.kind {
                    NoiseKind::Gaussian => gaussian_noisy_action(&a, sigma, &mut rng),
                    NoiseKind::Laplace => laplace_noisy_action(&a, sigma, &mut rng),
                    NoiseKind::Tsd => tsd_noisy_action(&a, &path.as_ref().expect("tsd path")[t], &mut rng),
                };
                let (r, next) = env.step(&s, &u, &mut rng);
                states.push(std::mem::replace(&mut s, next));
                actions.push(u);
                rewards.push(r);
            }
            Demonstration {
                trajectory: Trajectory {
                    k: Some(k + 1),
                    states,
                    actions,
                },
                rewards,
            }
        })
        .collect())
}

pub fn generate_dataset<E: Environment + ?Sized, P: Policy + ?Sized>(
    env: &E,
    expert: &P,
    noise: &NoiseSpec,
    p_k: &[f64],
    n: usize,
    seed: u64,
    env_id: &str,
) -> Result<DemoDataset> {
    if n == 0 {
        return Err(VildError::config("N must be at least 1"));
    }
    let demos = generate_demonstrations(env, expert, noise, p_k, n, seed)?;
    let ds = DemoDataset {
        trajectories: demos.into_iter().map(|d| d.trajectory).collect(),
        k: noise.k(),
        p_k: p_k.to_vec(),
        ground_truth: Some(noise.clone()),
        env_id: env_id.to_string(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Mean true return per demonstrator (NaN where a demonstrator drew no
/// trajectories) and per-demonstrator counts.
pub fn returns_by_demonstrator(demos: &[Demonstration], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut sum = vec![0.0; k];
    let mut cnt = vec![0usize; k];
    for d in demos {
        if let Some(i) = d.trajectory.k_index() {
            sum[i] += d.rewards.iter().sum::<f64>();
            cnt[i] += 1;
        }
    }
    let means = sum
        .iter()
        .zip(&cnt)
        .map(|(s, c)| if *c > 0 { s / *c as f64 } else { f64::NAN })
        .collect();
    (means, cnt)
}

pub fn uniform_p_k(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}
