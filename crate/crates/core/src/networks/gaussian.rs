use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tensor::{
    LayoutBuilder, ParamLayout, ParamVars, ParamVector, SegmentId, Tape, Tensor, Var,
};

use super::Posterior;

/// Full-covariance Gaussian `q(θ) = N(μ, (A Aᵀ)⁻¹)` that ignores the
/// observations. `A` is lower triangular with diagonal `exp(ρ)`, so
/// `z = (θ − μ) A` is standard normal and `log|det A| = Σ ρ`.
///
/// Small enough for exact gradient checks of the losses built on top of a
/// [`Posterior`].
#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    dim: usize,
    layout: Arc<ParamLayout>,
    mean: SegmentId,
    log_diag: SegmentId,
    lower: SegmentId,
}

impl GaussianPosterior {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        let mut b = LayoutBuilder::new();
        let mean = b.push("gauss.mean", &[dim]);
        let log_diag = b.push("gauss.log_diag", &[dim]);
        let lower = b.push("gauss.lower", &[dim, dim]);
        Ok(Self {
            dim,
            layout: b.finish(),
            mean,
            log_diag,
            lower,
        })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Standard normal.
    pub fn init_params(&self) -> ParamVector {
        ParamVector::zeros(self.layout.clone())
    }

    /// Parameters whose density is exactly `N(mean, cov)`.
    pub fn params_for(&self, mean: &[f64], cov: &[f64]) -> Result<ParamVector> {
        let d = self.dim;
        if mean.len() != d || cov.len() != d * d {
            return Err(Error::LengthMismatch {
                expected: d,
                actual: mean.len(),
            });
        }
        let cov = DMatrix::from_row_slice(d, d, cov);
        let precision = cov
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("covariance is singular".into()))?;
        let chol = precision
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
        let a = chol.l();
        let mut p = self.init_params();
        p.segment_mut(self.mean).copy_from_slice(mean);
        for i in 0..d {
            p.segment_mut(self.log_diag)[i] = a[(i, i)].ln();
            for j in 0..i {
                p.segment_mut(self.lower)[i * d + j] = a[(i, j)];
            }
        }
        Ok(p)
    }

    fn mask(&self) -> Tensor {
        let d = self.dim;
        let data = (0..d * d)
            .map(|k| if k % d < k / d { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_parts(vec![d, d], data)
    }

    /// Dense `A` from parameter values.
    fn transform(&self, params: &ParamVector) -> Vec<f64> {
        let d = self.dim;
        let lower = params.segment(self.lower);
        let rho = params.segment(self.log_diag);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..i {
                a[i * d + j] = lower[i * d + j];
            }
            a[i * d + i] = rho[i].exp();
        }
        a
    }
}

impl Posterior for GaussianPosterior {
    fn dim_theta(&self) -> usize {
        self.dim
    }

    fn sample(
        &self,
        params: &ParamVector,
        _x: &Tensor,
        n: usize,
        rng: &mut SimRng,
    ) -> Result<Tensor> {
        let d = self.dim;
        let a = self.transform(params);
        let mu = params.segment(self.mean);
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            // Solve y A = z; A is lower triangular so go from the last column.
            let mut y = vec![0.0; d];
            for j in (0..d).rev() {
                let mut acc = z[j];
                for i in j + 1..d {
                    acc -= y[i] * a[i * d + j];
                }
                y[j] = acc / a[j * d + j];
            }
            out.extend(y.iter().zip(mu).map(|(yi, m)| yi + m));
        }
        Tensor::matrix(n, d, out)
    }

    fn log_prob(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        theta: &Tensor,
        _x: &Tensor,
    ) -> Result<Var> {
        if theta.rank() != 2 || theta.cols() != self.dim {
            return Err(Error::Shape {
                op: "gaussian log_prob",
                lhs: theta.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        let d = self.dim;
        let th = tape.constant(theta.clone());
        let centered = tape.sub(th, params.get(self.mean))?;
        let mask = tape.constant(self.mask());
        let strict = tape.mul(params.get(self.lower), mask)?;
        let eye = tape.constant(Tensor::identity(d));
        let rho = params.get(self.log_diag);
        let diag = tape.exp(rho);
        let diag = tape.mul(eye, diag)?;
        let a = tape.add(strict, diag)?;
        let z = tape.matmul(centered, a)?;
        let zz = tape.square(z);
        let zz = tape.sum_axis(zz, 1)?;
        let base = tape.scale(zz, -0.5);
        let base = tape.add_scalar(base, -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln());
        let logdet = tape.sum(rho);
        tape.add(base, logdet)
    }
}
