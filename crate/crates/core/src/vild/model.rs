//! Parameter blocks of the model: reward, expertise, posterior, policy.

use serde::{Deserialize, Serialize};

use crate::env::{GaussianLinearPolicy, Policy, TabularPolicy};
use crate::error::{Result, VildError};
use crate::math::{sigmoid, LN_2PI};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    #[default]
    Gaussian,
    Laplace,
}

impl std::str::FromStr for NoiseModel {
    type Err = VildError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(NoiseModel::Gaussian),
            "laplace" => Ok(NoiseModel::Laplace),
            other => Err(VildError::config(format!("unknown noise model `{other}`"))),
        }
    }
}

/// How reward weights map to inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RewardRepr {
    /// One weight per (state, grid action), row-major.
    Table { n_states: usize, n_actions: usize },
    /// Per coordinate `[x^2, x a, a^2, x, a]`, plus one shared bias.
    Quadratic { dim: usize },
    /// Concave in the reached point `y = x + a` and in the action: per
    /// coordinate `[p_y, w_y, p_a]` give
    /// `-exp(p_y) y^2 + w_y y - exp(p_a) a^2`, plus one shared bias.
    /// No potential `c x^2 + b x` of the state can be added to it, so the
    /// reward is not free to drift along shaping directions.
    NextState { dim: usize },
}

/// Which continuous reward representation to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardFeatures {
    Quadratic,
    #[default]
    NextState,
}

/// Reward `r = s_r * sigmoid(raw)` when bounded, else `raw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub repr: RewardRepr,
    pub weights: Vec<f64>,
    pub bounded: bool,
    pub scale: f64,
}

impl RewardParams {
    pub fn table(n_states: usize, n_actions: usize, bounded: bool, scale: f64) -> Self {
        Self {
            repr: RewardRepr::Table { n_states, n_actions },
            weights: vec![0.0; n_states * n_actions],
            bounded,
            scale,
        }
    }

    pub fn quadratic(dim: usize, bounded: bool, scale: f64) -> Self {
        Self {
            repr: RewardRepr::Quadratic { dim },
            weights: vec![0.0; 5 * dim + 1],
            bounded,
            scale,
        }
    }

    pub fn next_state(dim: usize, bounded: bool, scale: f64) -> Self {
        Self {
            repr: RewardRepr::NextState { dim },
            weights: vec![0.0; 3 * dim + 1],
            bounded,
            scale,
        }
    }

    pub fn continuous(features: RewardFeatures, dim: usize, bounded: bool, scale: f64) -> Self {
        match features {
            RewardFeatures::Quadratic => Self::quadratic(dim, bounded, scale),
            RewardFeatures::NextState => Self::next_state(dim, bounded, scale),
        }
    }

    /// Output and derivative w.r.t. the raw score.
    pub fn squash(&self, raw: f64) -> (f64, f64) {
        if self.bounded {
            let s = sigmoid(raw);
            (self.scale * s, self.scale * s * (1.0 - s))
        } else {
            (raw, 1.0)
        }
    }

    fn n_actions(&self) -> usize {
        match self.repr {
            RewardRepr::Table { n_actions, .. } => n_actions,
            _ => panic!("table lookup on a continuous reward"),
        }
    }

    /// `(r, dr/draw)` at grid cell `(s, a)`.
    pub fn eval_table(&self, s: usize, a: usize) -> (f64, f64) {
        self.squash(self.weights[s * self.n_actions() + a])
    }

    pub fn table_values(&self) -> Vec<Vec<f64>> {
        match self.repr {
            RewardRepr::Table { n_states, n_actions } => (0..n_states)
                .map(|s| (0..n_actions).map(|a| self.eval_table(s, a).0).collect())
                .collect(),
            _ => panic!("table values of a continuous reward"),
        }
    }

    fn dim(&self) -> usize {
        match self.repr {
            RewardRepr::Quadratic { dim } | RewardRepr::NextState { dim } => dim,
            RewardRepr::Table { .. } => panic!("continuous evaluation of a table reward"),
        }
    }

    /// Weights per coordinate; the shared bias comes last.
    fn stride(&self) -> usize {
        match self.repr {
            RewardRepr::NextState { .. } => 3,
            _ => 5,
        }
    }

    /// Coefficients of `[x^2, x a, a^2, x, a]` for coordinate `j`.
    fn coeffs(&self, j: usize) -> [f64; 5] {
        let w = &self.weights[self.stride() * j..];
        match self.repr {
            RewardRepr::NextState { .. } => {
                let (ey, ea) = (w[0].exp(), w[2].exp());
                [-ey, -2.0 * ey, -ey - ea, w[1], w[1]]
            }
            _ => [w[0], w[1], w[2], w[3], w[4]],
        }
    }

    pub fn raw_quadratic(&self, x: &[f64], a: &[f64]) -> f64 {
        let d = self.dim();
        let mut raw = self.weights[self.stride() * d];
        for j in 0..d {
            let (x, a) = (x[j], a[j]);
            let c = self.coeffs(j);
            raw += c[0] * x * x + c[1] * x * a + c[2] * a * a + c[3] * x + c[4] * a;
        }
        raw
    }

    /// `(r, dr/draw)` at a continuous (state, action).
    pub fn eval_cont(&self, x: &[f64], a: &[f64]) -> (f64, f64) {
        self.squash(self.raw_quadratic(x, a))
    }

    /// `d r / d a_j`.
    pub fn grad_action(&self, x: &[f64], a: &[f64], dr_draw: f64, out: &mut [f64]) {
        for j in 0..self.dim() {
            let c = self.coeffs(j);
            out[j] = dr_draw * (c[1] * x[j] + 2.0 * c[2] * a[j] + c[4]);
        }
    }

    /// `d r / d x_j`.
    pub fn grad_state(&self, x: &[f64], a: &[f64], dr_draw: f64, out: &mut [f64]) {
        for j in 0..self.dim() {
            let c = self.coeffs(j);
            out[j] = dr_draw * (2.0 * c[0] * x[j] + c[1] * a[j] + c[3]);
        }
    }

    /// `grad += coef * d r / d weights` at a continuous point.
    pub fn add_grad_cont(&self, x: &[f64], a: &[f64], coef: f64, grad: &mut [f64]) {
        let d = self.dim();
        let st = self.stride();
        let (_, dr) = self.eval_cont(x, a);
        let c = coef * dr;
        for j in 0..d {
            let (x, a) = (x[j], a[j]);
            let g = &mut grad[st * j..st * (j + 1)];
            match self.repr {
                RewardRepr::NextState { .. } => {
                    let w = &self.weights[st * j..st * (j + 1)];
                    let y = x + a;
                    g[0] -= c * w[0].exp() * y * y;
                    g[1] += c * y;
                    g[2] -= c * w[2].exp() * a * a;
                }
                _ => {
                    for (gi, f) in g.iter_mut().zip([x * x, x * a, a * a, x, a]) {
                        *gi += c * f;
                    }
                }
            }
        }
        grad[st * d] += c;
    }
}

/// Per-demonstrator diagonal covariance `C(k) = diag(exp(log_var[k]))`.
/// In the Laplace model the same numbers are the per-coordinate scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertiseParams {
    pub log_var: Vec<Vec<f64>>,
}

impl ExpertiseParams {
    pub fn new(k: usize, d_a: usize, init_log_var: f64) -> Self {
        Self {
            log_var: vec![vec![init_log_var; d_a]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.log_var.len()
    }

    pub fn d_a(&self) -> usize {
        self.log_var.first().map_or(0, Vec::len)
    }

    pub fn diag(&self, k: usize) -> Vec<f64> {
        self.log_var[k].iter().map(|l| l.exp()).collect()
    }

    /// Mean of the diagonal of `C(k)` for every k.
    pub fn mean_diag(&self) -> Vec<f64> {
        (0..self.k())
            .map(|k| self.diag(k).iter().sum::<f64>() / self.d_a() as f64)
            .collect()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.log_var.iter().flatten().copied().collect()
    }

    pub fn set_from(&mut self, v: &[f64]) {
        let d = self.d_a();
        for (k, row) in self.log_var.iter_mut().enumerate() {
            row.copy_from_slice(&v[k * d..(k + 1) * d]);
        }
    }
}

/// Log density of the noisy action under demonstrator `k`'s model,
/// normalizer included.
pub fn log_noisy_model(u: &[f64], a: &[f64], omega: &ExpertiseParams, k: usize, model: NoiseModel) -> f64 {
    let lv = &omega.log_var[k];
    match model {
        NoiseModel::Gaussian => {
            let mut q = 0.0;
            for j in 0..lv.len() {
                let e = u[j] - a[j];
                q += -0.5 * e * e * (-lv[j]).exp() - 0.5 * lv[j] - 0.5 * LN_2PI;
            }
            q
        }
        NoiseModel::Laplace => {
            let mut q = 0.0;
            for j in 0..lv.len() {
                q += -(u[j] - a[j]).abs() * (-lv[j]).exp() - (2f64.ln() + lv[j]);
            }
            q
        }
    }
}

/// The fit term of the objective: `-1/2 ||u - a||^2_{C^-1}` (Gaussian) or
/// `-||(u - a) / c||_1` (Laplace), without normalizer.
pub fn noise_fit(u: &[f64], a: &[f64], log_var: &[f64], model: NoiseModel) -> f64 {
    let mut q = 0.0;
    for j in 0..log_var.len() {
        let e = u[j] - a[j];
        q -= match model {
            NoiseModel::Gaussian => 0.5 * e * e * (-log_var[j]).exp(),
            NoiseModel::Laplace => e.abs() * (-log_var[j]).exp(),
        };
    }
    q
}

/// Variational posterior over the latent optimal action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PosteriorParams {
    /// Categorical logits over the action grid, one row per demonstration
    /// datapoint (row `n * T + t`).
    Grid { horizon: usize, logits: Vec<Vec<f64>> },
    /// One Gaussian head per demonstrator. Head layout: for each coordinate
    /// `j`, mean weights `[x_j, u_j, 1]` at `3j..3j+3`, then the
    /// log standard deviations at `3d..4d`.
    Gaussian { dim: usize, heads: Vec<Vec<f64>> },
}

impl PosteriorParams {
    pub fn gaussian_identity(k: usize, dim: usize, log_std: f64) -> Self {
        let mut head = vec![0.0; 4 * dim];
        for j in 0..dim {
            head[3 * j + 1] = 1.0;
            head[3 * dim + j] = log_std;
        }
        PosteriorParams::Gaussian {
            dim,
            heads: vec![head; k],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            PosteriorParams::Grid { logits, .. } => logits.iter().flatten().copied().collect(),
            PosteriorParams::Gaussian { heads, .. } => heads.iter().flatten().copied().collect(),
        }
    }

    pub fn set_from(&mut self, v: &[f64]) {
        let rows = match self {
            PosteriorParams::Grid { logits, .. } => logits,
            PosteriorParams::Gaussian { heads, .. } => heads,
        };
        let mut off = 0;
        for r in rows.iter_mut() {
            let n = r.len();
            r.copy_from_slice(&v[off..off + n]);
            off += n;
        }
    }

    /// Mean and standard deviation of head `k` at `(x, u)`.
    pub fn gaussian_moments(&self, k: usize, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            PosteriorParams::Gaussian { dim, heads } => {
                let h = &heads[k];
                let mean = (0..*dim)
                    .map(|j| h[3 * j] * x[j] + h[3 * j + 1] * u[j] + h[3 * j + 2])
                    .collect();
                let sd = (0..*dim).map(|j| h[3 * dim + j].exp()).collect();
                (mean, sd)
            }
            PosteriorParams::Grid { .. } => panic!("gaussian moments of a grid posterior"),
        }
    }
}

/// The learner policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicyParams {
    Tabular(TabularPolicy),
    Gaussian(GaussianLinearPolicy),
}

impl Policy for PolicyParams {
    fn act(&self, t: usize, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        match self {
            PolicyParams::Tabular(p) => p.act(t, state, rng),
            PolicyParams::Gaussian(p) => p.act(t, state, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VildParams {
    pub reward: RewardParams,
    pub omega: ExpertiseParams,
    pub posterior: PosteriorParams,
    pub policy: PolicyParams,
}

/// Sampling distribution over demonstrators for importance-weighted
/// reward gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsState {
    pub z: Vec<f64>,
    pub p_tilde: Vec<f64>,
    pub w: Vec<f64>,
}

/// `z_k = ||vec(C^-1(k))||_1`, `p~ = z / sum z`, `w = min(p / p~, 1)`.
pub fn is_distribution(omega: &ExpertiseParams, p_k: &[f64]) -> Result<IsState> {
    if omega.k() == 0 || p_k.len() != omega.k() {
        return Err(VildError::shape("p_k must have one entry per demonstrator"));
    }
    let z: Vec<f64> = omega
        .log_var
        .iter()
        .map(|row| row.iter().map(|l| (-l).exp()).sum())
        .collect();
    is_from_scores(z, p_k)
}

pub fn is_from_scores(z: Vec<f64>, p_k: &[f64]) -> Result<IsState> {
    let total: f64 = z.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(VildError::DegenerateExpertise);
    }
    let p_tilde: Vec<f64> = z.iter().map(|v| v / total).collect();
    let w = p_k
        .iter()
        .zip(&p_tilde)
        .map(|(p, q)| if *q > 0.0 { (p / q).min(1.0) } else { 1.0 })
        .collect();
    Ok(IsState { z, p_tilde, w })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_noisy_model_examples() {
        let om = ExpertiseParams::new(1, 1, 0.0);
        assert!((log_noisy_model(&[0.3], &[0.3], &om, 0, NoiseModel::Gaussian) + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((log_noisy_model(&[1.0], &[0.0], &om, 0, NoiseModel::Gaussian) + 1.418_938_533_204_672_7).abs() < 1e-12);
        let lap = log_noisy_model(&[2.0], &[0.0], &om, 0, NoiseModel::Laplace);
        assert!((lap - (-2.0 - 2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn is_examples() {
        let st = is_from_scores(vec![1.0, 3.0], &[0.5, 0.5]).unwrap();
        assert_eq!(st.p_tilde, vec![0.25, 0.75]);
        assert!(matches!(is_from_scores(vec![0.0, 0.0], &[0.5, 0.5]), Err(VildError::DegenerateExpertise)));
    }

    #[test]
    fn bounded_reward_in_unit_interval() {
        let mut r = RewardParams::quadratic(1, true, 1.0);
        r.weights = vec![2.0, -3.0, 2.0, 1.0, -1.0, 0.5];
        for x in [-2.0, 0.0, 3.0] {
            let (v, _) = r.eval_cont(&[x], &[0.7]);
            assert!(v > 0.0 && v < 1.0);
        }
    }
}
