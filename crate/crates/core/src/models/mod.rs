//! Probabilistic models with analytic prior and likelihood densities.
//!
//! Every model works in unconstrained coordinates: scale parameters enter as
//! `log σ` and their prior density includes the log-Jacobian.

mod ar1;
mod conj;
mod csv;
mod linreg;

pub use ar1::Ar1Model;
pub use ar1::SERIES_LEN;
pub use conj::{ConjGaussModel, ExactPosterior, GaussianMoments};
pub use csv::{load_csv_task, CsvTask, Standardization};
pub use linreg::LinRegModel;

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tensor::Tensor;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub(crate) fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * LN_2PI
}

pub fn std_normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-task departure from the design the network was pre-trained on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Shift {
    /// Multiplier on the standard-normal covariates.
    pub covariate_scale: f64,
    /// Student-t degrees of freedom for the noise; `None` is Gaussian.
    pub noise_df: Option<f64>,
}

impl Default for Shift {
    fn default() -> Self {
        Self {
            covariate_scale: 1.0,
            noise_df: None,
        }
    }
}

impl Shift {
    pub(crate) fn noise(&self, rng: &mut SimRng) -> f64 {
        match self.noise_df {
            Some(df) if df.is_finite() => StudentT::new(df).expect("df > 0").sample(rng),
            _ => StandardNormal.sample(rng),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.covariate_scale > 0.0 && self.covariate_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "covariate_scale must be positive, got {}",
                self.covariate_scale
            )));
        }
        if let Some(df) = self.noise_df {
            if df <= 0.0 || df.is_nan() {
                return Err(Error::InvalidArgument(format!(
                    "noise_df must be positive, got {df}"
                )));
            }
        }
        Ok(())
    }
}

/// A model with tractable `log p(θ)` and `log p(x | θ)`.
///
/// An observation set is a `[N, dim_x]` matrix; `θ` is a slice of length
/// `dim_theta` in unconstrained coordinates.
pub trait ProbModel: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    fn dim_theta(&self) -> usize;
    fn dim_x(&self) -> usize;
    fn param_names(&self) -> Vec<String>;

    fn prior_log_prob(&self, theta: &[f64]) -> f64;

    /// Sum of per-row log-likelihoods.
    fn likelihood_log_prob(&self, x: &Tensor, theta: &[f64]) -> Result<f64>;

    fn sample_prior(&self, rng: &mut SimRng) -> Vec<f64>;

    /// Simulates `n` observation rows given `theta`.
    fn simulate_data(
        &self,
        theta: &[f64],
        n: usize,
        shift: &Shift,
        rng: &mut SimRng,
    ) -> Result<Tensor>;

    /// Default observation count per set.
    fn default_set_size(&self) -> usize;

    /// Maps unconstrained `θ` to the natural parameterization.
    fn constrain(&self, theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }

    /// Closed-form posterior when the model admits one.
    fn analytic_posterior(&self, _x: &Tensor) -> Option<GaussianMoments> {
        None
    }

    /// `(θ, x)` from the joint prior predictive under the training design.
    fn simulate(&self, rng: &mut SimRng, n: usize) -> Result<(Vec<f64>, Tensor)> {
        let theta = self.sample_prior(rng);
        let x = self.simulate_data(&theta, n, &Shift::default(), rng)?;
        Ok((theta, x))
    }

    /// `log p(x | θ) + log p(θ)`, the unnormalized log posterior.
    fn log_joint(&self, x: &Tensor, theta: &[f64]) -> Result<f64> {
        Ok(self.likelihood_log_prob(x, theta)? + self.prior_log_prob(theta))
    }
}

pub(crate) fn check_theta(model: &dyn ProbModel, theta: &[f64]) -> Result<()> {
    if theta.len() != model.dim_theta() {
        return Err(Error::LengthMismatch {
            expected: model.dim_theta(),
            actual: theta.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_set(model: &dyn ProbModel, x: &Tensor) -> Result<()> {
    if x.rank() != 2 || x.cols() != model.dim_x() {
        return Err(Error::Shape {
            op: model_op(model),
            lhs: x.shape().to_vec(),
            rhs: vec![model.dim_x()],
        });
    }
    Ok(())
}

fn model_op(model: &dyn ProbModel) -> &'static str {
    match model.name() {
        "linreg" => "linreg likelihood",
        "conj-gauss" => "conj-gauss likelihood",
        "ar1" => "ar1 likelihood",
        _ => "likelihood",
    }
}

pub(crate) fn finite_or(value: f64, context: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

/// Model selection as it appears in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Linreg {
        #[serde(default = "default_predictors")]
        predictors: usize,
    },
    ConjGauss {
        #[serde(default = "one_predictor")]
        predictors: usize,
        #[serde(default = "unit")]
        noise_sd: f64,
    },
    Ar1,
}

fn default_predictors() -> usize {
    5
}

fn one_predictor() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn build(&self) -> Result<Arc<dyn ProbModel>> {
        Ok(match *self {
            ModelSpec::Linreg { predictors } => Arc::new(LinRegModel::new(predictors)?),
            ModelSpec::ConjGauss {
                predictors,
                noise_sd,
            } => Arc::new(ConjGaussModel::new(predictors, noise_sd)?),
            ModelSpec::Ar1 => Arc::new(Ar1Model::new()),
        })
    }
}

/// Trapezoid rule over a uniform grid, shared by the quadrature tests.
#[cfg(test)]
pub(crate) fn trapezoid_2d(
    lo: [f64; 2],
    hi: [f64; 2],
    n: usize,
    f: impl Fn(f64, f64) -> f64,
) -> f64 {
    let h = [
        (hi[0] - lo[0]) / (n - 1) as f64,
        (hi[1] - lo[1]) / (n - 1) as f64,
    ];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            total += wi * wj * f(lo[0] + i as f64 * h[0], lo[1] + j as f64 * h[1]);
        }
    }
    total * h[0] * h[1]
}
