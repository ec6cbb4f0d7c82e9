use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::rng::SimRng;
use crate::tensor::Tensor;

use super::{check_set, check_theta, finite_or, normal_log_pdf, std_normal, ProbModel, Shift};

/// Prior `(mean, sd)` of `α, β, γ, δ, log σ`.
const PRIOR: [(f64, f64); 5] = [(0.0, 0.5), (0.0, 0.2), (0.0, 0.5), (0.0, 0.5), (-1.0, 0.5)];

/// First-order autoregression with two exogenous covariates:
/// `y_{t+1} = α + β y_t + γ u_t + δ w_t + σ ε_t`.
///
/// A set holds the transitions of one series as rows
/// `[y_t, u_t, w_t, y_{t+1}]`, so the likelihood conditions on `y_0`.
#[derive(Clone, Debug, Default)]
pub struct Ar1Model;

/// Series length; a set has `SERIES_LEN - 1` transitions.
pub const SERIES_LEN: usize = 15;

impl Ar1Model {
    pub fn new() -> Self {
        Self
    }
}

/// Cumulative sum of standard normals, rescaled to zero mean and unit sd.
fn standardized_walk(n: usize, rng: &mut SimRng) -> Vec<f64> {
    let mut acc = 0.0;
    let mut walk: Vec<f64> = (0..n)
        .map(|_| {
            acc += std_normal(rng);
            acc
        })
        .collect();
    let mean = walk.iter().sum::<f64>() / n as f64;
    let var = walk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    for v in &mut walk {
        *v = (*v - mean) / sd;
    }
    walk
}

impl ProbModel for Ar1Model {
    fn name(&self) -> &str {
        "ar1"
    }

    fn dim_theta(&self) -> usize {
        5
    }

    fn dim_x(&self) -> usize {
        4
    }

    fn param_names(&self) -> Vec<String> {
        ["alpha", "beta", "gamma", "delta", "log_sigma"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn prior_log_prob(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(PRIOR)
            .map(|(&v, (m, s))| normal_log_pdf(v, m, s))
            .sum()
    }

    fn likelihood_log_prob(&self, x: &Tensor, theta: &[f64]) -> Result<f64> {
        check_theta(self, theta)?;
        check_set(self, x)?;
        let sigma = theta[4].exp();
        let mut total = 0.0;
        for i in 0..x.rows() {
            let r = x.row(i);
            let mu = theta[0] + theta[1] * r[0] + theta[2] * r[1] + theta[3] * r[2];
            total += normal_log_pdf(r[3], mu, sigma);
        }
        finite_or(total, "ar1 likelihood")
    }

    fn sample_prior(&self, rng: &mut SimRng) -> Vec<f64> {
        PRIOR
            .iter()
            .map(|&(m, s)| m + s * std_normal(rng))
            .collect()
    }

    /// `n` transitions from a series of length `n + 1`; `y_0 ~ N(0, 1)`.
    fn simulate_data(
        &self,
        theta: &[f64],
        n: usize,
        shift: &Shift,
        rng: &mut SimRng,
    ) -> Result<Tensor> {
        check_theta(self, theta)?;
        shift.validate()?;
        let sigma = theta[4].exp();
        let u = standardized_walk(n, rng);
        let w = standardized_walk(n, rng);
        let mut y: f64 = StandardNormal.sample(rng);
        let mut data = Vec::with_capacity(n * 4);
        for t in 0..n {
            let (ut, wt) = (shift.covariate_scale * u[t], shift.covariate_scale * w[t]);
            let next =
                theta[0] + theta[1] * y + theta[2] * ut + theta[3] * wt + sigma * shift.noise(rng);
            data.extend([y, ut, wt, next]);
            y = next;
        }
        Tensor::matrix(n, 4, data)
    }

    fn default_set_size(&self) -> usize {
        SERIES_LEN - 1
    }

    fn constrain(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = theta.to_vec();
        out[4] = out[4].exp();
        out
    }
}
