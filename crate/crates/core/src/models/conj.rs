use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Posterior;
use crate::rng::SimRng;
use crate::tensor::{LayoutBuilder, ParamLayout, ParamVars, ParamVector, Tape, Tensor, Var};

use super::{
    check_set, check_theta, finite_or, normal_log_pdf, std_normal, ProbModel, Shift, LN_2PI,
};

/// Mean vector and row-major covariance of a multivariate normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianMoments {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_at(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.dim() + j]
    }

    fn cholesky(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))
    }

    /// `log N(θ; mean, cov)` for each row of `theta`.
    pub fn log_density(&self, theta: &Tensor) -> Result<Vec<f64>> {
        let d = self.dim();
        let l = self.cholesky()?;
        let log_det: f64 = (0..d).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        let mut out = Vec::with_capacity(theta.rows());
        for i in 0..theta.rows() {
            let diff =
                DVector::from_iterator(d, theta.row(i).iter().zip(&self.mean).map(|(a, b)| a - b));
            let z = l
                .solve_lower_triangular(&diff)
                .ok_or_else(|| Error::InvalidArgument("singular covariance".into()))?;
            out.push(-0.5 * z.norm_squared() - 0.5 * log_det - 0.5 * d as f64 * LN_2PI);
        }
        Ok(out)
    }

    pub fn sample(&self, n: usize, rng: &mut SimRng) -> Result<Tensor> {
        let d = self.dim();
        let l = self.cholesky()?;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
            let x = &l * z;
            data.extend(x.iter().zip(&self.mean).map(|(a, b)| a + b));
        }
        Tensor::matrix(n, d, data)
    }
}

/// Linear regression with known noise `σ₀` and prior `N(0, I)` on
/// `θ = (α, β₁..β_p)`; the posterior is Gaussian in closed form. With
/// `p = 0` it is the intercept-only normal-mean model.
#[derive(Clone, Debug)]
pub struct ConjGaussModel {
    predictors: usize,
    noise_sd: f64,
}

impl ConjGaussModel {
    pub fn new(predictors: usize, noise_sd: f64) -> Result<Self> {
        if !(noise_sd > 0.0 && noise_sd.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_sd must be positive, got {noise_sd}"
            )));
        }
        Ok(Self {
            predictors,
            noise_sd,
        })
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    /// `Σ = (I + XᵀX/σ₀²)⁻¹`, `μ = Σ Xᵀy/σ₀²` with an intercept column in `X`.
    pub fn posterior(&self, x: &Tensor) -> Result<GaussianMoments> {
        check_set(self, x)?;
        self.posterior_from_rows((0..x.rows()).map(|i| x.row(i)))
    }

    /// Same as [`posterior`](Self::posterior) over an arbitrary row iterator;
    /// no rows gives the prior.
    pub fn posterior_from_rows<'a>(
        &self,
        rows: impl IntoIterator<Item = &'a [f64]>,
    ) -> Result<GaussianMoments> {
        let p = self.predictors;
        let d = p + 1;
        let s2 = self.noise_sd * self.noise_sd;
        let mut prec = DMatrix::<f64>::identity(d, d);
        let mut xty = DVector::<f64>::zeros(d);
        let mut design = Vec::with_capacity(d);
        for r in rows {
            if r.len() != d {
                return Err(Error::LengthMismatch {
                    expected: d,
                    actual: r.len(),
                });
            }
            design.clear();
            design.push(1.0);
            design.extend_from_slice(&r[..p]);
            for a in 0..d {
                xty[a] += design[a] * r[p] / s2;
                for b in 0..d {
                    prec[(a, b)] += design[a] * design[b] / s2;
                }
            }
        }
        let cov = prec
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("posterior precision is singular".into()))?;
        let mean = &cov * xty;
        // Symmetrize to remove rounding asymmetry from the inverse.
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(GaussianMoments {
            mean: mean.iter().copied().collect(),
            cov: (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| cov[(i, j)])
                .collect(),
        })
    }
}

impl ProbModel for ConjGaussModel {
    fn name(&self) -> &str {
        "conj-gauss"
    }

    fn dim_theta(&self) -> usize {
        self.predictors + 1
    }

    fn dim_x(&self) -> usize {
        self.predictors + 1
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["alpha".to_string()];
        names.extend((1..=self.predictors).map(|j| format!("beta{j}")));
        names
    }

    fn prior_log_prob(&self, theta: &[f64]) -> f64 {
        theta.iter().map(|&v| normal_log_pdf(v, 0.0, 1.0)).sum()
    }

    fn likelihood_log_prob(&self, x: &Tensor, theta: &[f64]) -> Result<f64> {
        check_theta(self, theta)?;
        check_set(self, x)?;
        let p = self.predictors;
        let mut total = 0.0;
        for i in 0..x.rows() {
            let r = x.row(i);
            let mu = theta[0]
                + r[..p]
                    .iter()
                    .zip(&theta[1..])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            total += normal_log_pdf(r[p], mu, self.noise_sd);
        }
        finite_or(total, "conj-gauss likelihood")
    }

    fn sample_prior(&self, rng: &mut SimRng) -> Vec<f64> {
        (0..=self.predictors)
            .map(|_| StandardNormal.sample(rng))
            .collect()
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
        let mut data = Vec::with_capacity(n * (p + 1));
        for _ in 0..n {
            let xs: Vec<f64> = (0..p)
                .map(|_| shift.covariate_scale * std_normal(rng))
                .collect();
            let mu = theta[0] + xs.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum::<f64>();
            data.extend(xs);
            data.push(mu + self.noise_sd * shift.noise(rng));
        }
        Tensor::matrix(n, p + 1, data)
    }

    fn default_set_size(&self) -> usize {
        100
    }

    fn analytic_posterior(&self, x: &Tensor) -> Option<GaussianMoments> {
        self.posterior(x).ok()
    }
}

/// The analytic conjugate posterior behind the [`Posterior`] interface, with
/// an optional covariance inflation factor. It has no trainable parameters.
#[derive(Clone, Debug)]
pub struct ExactPosterior {
    model: ConjGaussModel,
    inflation: f64,
    layout: Arc<ParamLayout>,
}

impl ExactPosterior {
    pub fn new(model: ConjGaussModel) -> Self {
        Self::inflated(model, 1.0)
    }

    /// `q = N(μ_post, inflation · Σ_post)`.
    pub fn inflated(model: ConjGaussModel, inflation: f64) -> Self {
        Self {
            model,
            inflation,
            layout: LayoutBuilder::new().finish(),
        }
    }

    /// The empty parameter vector this posterior expects.
    pub fn params(&self) -> ParamVector {
        ParamVector::zeros(self.layout.clone())
    }

    fn moments(&self, x: &Tensor) -> Result<GaussianMoments> {
        let mut m = self.model.posterior(x)?;
        for c in &mut m.cov {
            *c *= self.inflation;
        }
        Ok(m)
    }
}

impl Posterior for ExactPosterior {
    fn dim_theta(&self) -> usize {
        self.model.dim_theta()
    }

    fn sample(
        &self,
        _params: &ParamVector,
        x: &Tensor,
        n: usize,
        rng: &mut SimRng,
    ) -> Result<Tensor> {
        self.moments(x)?.sample(n, rng)
    }

    fn log_prob(
        &self,
        tape: &mut Tape,
        _params: &ParamVars,
        theta: &Tensor,
        x: &Tensor,
    ) -> Result<Var> {
        let lp = self.moments(x)?.log_density(theta)?;
        Ok(tape.constant(Tensor::vector(lp)?))
    }
}
