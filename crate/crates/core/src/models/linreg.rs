use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tensor::Tensor;

use super::{check_set, check_theta, finite_or, normal_log_pdf, std_normal, ProbModel, Shift};

/// Bayesian linear regression with unknown noise.
///
/// `θ = (α, β₁..β_p, log σ)`; `α ~ N(0, 1)`, `β ~ N(0, I)`,
/// `σ ~ HalfNormal(1)`. Rows are `[x₁..x_p, y]`.
#[derive(Clone, Debug)]
pub struct LinRegModel {
    predictors: usize,
}

impl LinRegModel {
    pub fn new(predictors: usize) -> Result<Self> {
        if predictors == 0 {
            return Err(Error::InvalidArgument(
                "linreg needs at least one predictor".into(),
            ));
        }
        Ok(Self { predictors })
    }

    pub fn predictors(&self) -> usize {
        self.predictors
    }
}

impl ProbModel for LinRegModel {
    fn name(&self) -> &str {
        "linreg"
    }

    fn dim_theta(&self) -> usize {
        self.predictors + 2
    }

    fn dim_x(&self) -> usize {
        self.predictors + 1
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["alpha".to_string()];
        names.extend((1..=self.predictors).map(|j| format!("beta{j}")));
        names.push("log_sigma".into());
        names
    }

    fn prior_log_prob(&self, theta: &[f64]) -> f64 {
        let p = self.predictors;
        let coef: f64 = theta[..=p]
            .iter()
            .map(|&v| normal_log_pdf(v, 0.0, 1.0))
            .sum();
        // Half-normal on σ = exp(s), with the Jacobian dσ/ds = σ.
        let s = theta[p + 1];
        let sigma = s.exp();
        coef + std::f64::consts::LN_2 + normal_log_pdf(sigma, 0.0, 1.0) + s
    }

    fn likelihood_log_prob(&self, x: &Tensor, theta: &[f64]) -> Result<f64> {
        check_theta(self, theta)?;
        check_set(self, x)?;
        let p = self.predictors;
        let sigma = theta[p + 1].exp();
        let mut total = 0.0;
        for i in 0..x.rows() {
            let row = x.row(i);
            let mu = theta[0]
                + row[..p]
                    .iter()
                    .zip(&theta[1..=p])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            total += normal_log_pdf(row[p], mu, sigma);
        }
        finite_or(total, "linreg likelihood")
    }

    fn sample_prior(&self, rng: &mut SimRng) -> Vec<f64> {
        let p = self.predictors;
        let mut theta: Vec<f64> = (0..=p).map(|_| StandardNormal.sample(rng)).collect();
        let z: f64 = StandardNormal.sample(rng);
        theta.push(z.abs().ln());
        theta
    }

    fn simulate_data(
        &self,
        theta: &[f64],
        n: usize,
        shift: &Shift,
        rng: &mut SimRng,
    ) -> Result<Tensor> {
        check_theta(self, theta)?;
        shift.validate()?;
        let p = self.predictors;
        let sigma = theta[p + 1].exp();
        let mut data = Vec::with_capacity(n * (p + 1));
        for _ in 0..n {
            let xs: Vec<f64> = (0..p)
                .map(|_| shift.covariate_scale * std_normal(rng))
                .collect();
            let mu = theta[0]
                + xs.iter()
                    .zip(&theta[1..=p])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            data.extend(xs);
            data.push(mu + sigma * shift.noise(rng));
        }
        Tensor::matrix(n, p + 1, data)
    }

    fn default_set_size(&self) -> usize {
        100
    }

    fn constrain(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = theta.to_vec();
        let last = out.len() - 1;
        out[last] = out[last].exp();
        out
    }
}
