//! Gold-standard posterior samples and the metrics that compare a method's
//! draws against them.

mod cache;

pub use cache::{cache_dir_from_env, dataset_hash, ReferenceCache, CACHE_ENV};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{std_normal, ProbModel};
use crate::rng::SimRng;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Flow,
    Mcmc,
    Analytic,
}

/// `S × dim_theta` draws with a record of where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSamples {
    draws: Tensor,
    provenance: Provenance,
}

impl PosteriorSamples {
    pub fn new(draws: Tensor, provenance: Provenance) -> Result<Self> {
        if draws.rank() != 2 || draws.rows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "posterior samples need shape [S >= 2, d], got {:?}",
                draws.shape()
            )));
        }
        if !draws.is_finite() {
            return Err(Error::NonFinite {
                context: "posterior samples".into(),
            });
        }
        Ok(Self { draws, provenance })
    }

    pub fn draws(&self) -> &Tensor {
        &self.draws
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.draws.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.draws.cols()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim())
            .map(|j| (0..self.len()).map(|i| self.draws.at(i, j)).sum::<f64>() / n)
            .collect()
    }

    /// Row-major sample covariance with the `S − 1` normalizer.
    pub fn covariance(&self) -> Vec<f64> {
        let (n, d) = (self.len(), self.dim());
        let mean = self.mean();
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            let r = self.draws.row(i);
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]);
                }
            }
        }
        cov.into_iter().map(|c| c / (n - 1) as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Retained draws after warmup and thinning.
    pub n_samples: usize,
    pub warmup: usize,
    /// Initial isotropic proposal scale, adapted during warmup.
    pub step_scale: f64,
    pub thin: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 4000,
            warmup: 2000,
            step_scale: 0.1,
            thin: 2,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2
            || self.thin == 0
            || !(self.step_scale > 0.0 && self.step_scale.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "sampler needs n_samples >= 2, thin >= 1 and a positive step_scale, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RwmOutput {
    pub samples: PosteriorSamples,
    /// Acceptance rate after warmup.
    pub acceptance: f64,
    /// Proposal scale after adaptation.
    pub step: f64,
}

/// Acceptance rate targeted by the warmup adaptation.
pub const TARGET_ACCEPTANCE: f64 = 0.234;

/// Random-walk Metropolis in unconstrained coordinates with isotropic
/// Gaussian proposals. The log proposal scale follows a Robbins-Monro
/// recursion toward [`TARGET_ACCEPTANCE`] during warmup and is frozen
/// afterwards.
pub fn rwm_sample(
    model: &dyn ProbModel,
    x: &Tensor,
    cfg: &SamplerConfig,
    rng: &mut SimRng,
) -> Result<RwmOutput> {
    cfg.validate()?;
    let d = model.dim_theta();
    let log_target = |t: &[f64]| match model.log_joint(x, t) {
        Ok(v) => Ok(v),
        Err(Error::NonFinite { .. }) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    };
    let mut theta = model.sample_prior(rng);
    let mut lp = log_target(&theta)?;
    for _ in 0..100 {
        if lp.is_finite() {
            break;
        }
        theta = model.sample_prior(rng);
        lp = log_target(&theta)?;
    }
    if !lp.is_finite() {
        return Err(Error::NonFinite {
            context: "no prior draw has a finite log density".into(),
        });
    }

    let mut log_step = cfg.step_scale.ln();
    let mut proposal = vec![0.0; d];
    let mut step_once =
        |theta: &mut Vec<f64>, lp: &mut f64, step: f64, rng: &mut SimRng| -> Result<bool> {
            for (p, t) in proposal.iter_mut().zip(theta.iter()) {
                *p = t + step * std_normal(rng);
            }
            let lp_new = log_target(&proposal)?;
            let u: f64 = rng.random();
            let accept = lp_new.is_finite() && u.ln() < lp_new - *lp;
            if accept {
                theta.copy_from_slice(&proposal);
                *lp = lp_new;
            }
            Ok(accept)
        };
    for i in 0..cfg.warmup {
        let accepted = step_once(&mut theta, &mut lp, log_step.exp(), rng)?;
        let gain = 1.0 / ((i + 1) as f64).powf(0.6);
        log_step += gain * (f64::from(u8::from(accepted)) - TARGET_ACCEPTANCE);
    }
    let step = log_step.exp();
    let total = cfg.n_samples * cfg.thin;
    let mut accepted = 0usize;
    let mut data = Vec::with_capacity(cfg.n_samples * d);
    for i in 0..total {
        if step_once(&mut theta, &mut lp, step, rng)? {
            accepted += 1;
        }
        if (i + 1) % cfg.thin == 0 {
            data.extend_from_slice(&theta);
        }
    }
    let acceptance = accepted as f64 / total as f64;
    if acceptance < 0.01 {
        return Err(Error::LowAcceptance {
            rate: acceptance,
            step_scale: cfg.step_scale,
        });
    }
    Ok(RwmOutput {
        samples: PosteriorSamples::new(Tensor::matrix(cfg.n_samples, d, data)?, Provenance::Mcmc)?,
        acceptance,
        step,
    })
}

/// Batch-means Monte-Carlo standard error of the mean of `series`, using
/// `⌊√n⌋` batches.
pub fn batch_means_mcse(series: &[f64]) -> f64 {
    let n = series.len();
    let b = (n as f64).sqrt().floor().max(2.0) as usize;
    let size = n / b;
    if size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..b)
        .map(|k| series[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled sample.
    Median,
}

/// Pooled points above this count are thinned to a canonical subsample
/// before taking the median distance.
pub const MEDIAN_MAX_POINTS: usize = 2000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Median of pairwise Euclidean distances over the pooled rows. The pool
/// is sorted first so the result does not depend on row order.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let mut pool: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    pool.sort_by(|x, y| lex_cmp(x, y));
    if pool.len() > MEDIAN_MAX_POINTS {
        let n = pool.len();
        pool = (0..MEDIAN_MAX_POINTS)
            .map(|k| pool[k * n / MEDIAN_MAX_POINTS])
            .collect();
    }
    let mut d = Vec::with_capacity(pool.len() * (pool.len() - 1) / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            d.push(sq_dist(pool[i], pool[j]).sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

fn check_pair(a: &PosteriorSamples, b: &PosteriorSamples) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::LengthMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

/// Unbiased U-statistic estimate of squared MMD with the Gaussian kernel
/// `exp(−‖x − y‖² / 2h²)`. The arguments are put in a canonical order
/// first, so swapping them gives the bitwise-identical value.
pub fn mmd2(a: &PosteriorSamples, b: &PosteriorSamples, bandwidth: Bandwidth) -> Result<f64> {
    check_pair(a, b)?;
    let (x, y) = (a.draws(), b.draws());
    let (x, y) = match x
        .rows()
        .cmp(&y.rows())
        .then_with(|| lex_cmp(x.data(), y.data()))
    {
        Ordering::Greater => (y, x),
        _ => (x, y),
    };
    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Median => median_bandwidth(x, y),
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "kernel bandwidth must be positive, got {h}"
        )));
    }
    let g = -1.0 / (2.0 * h * h);
    let within = |t: &Tensor| {
        let n = t.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += (g * sq_dist(t.row(i), t.row(j))).exp();
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            cross += (g * sq_dist(x.row(i), y.row(j))).exp();
        }
    }
    cross /= (x.rows() * y.rows()) as f64;
    Ok(within(x) + within(y) - 2.0 * cross)
}

/// `sqrt(max(mmd², 0))`.
pub fn mmd(a: &PosteriorSamples, b: &PosteriorSamples, bandwidth: Bandwidth) -> Result<f64> {
    Ok(mmd2(a, b, bandwidth)?.max(0.0).sqrt())
}

/// Denominator floor of [`mmd_ratio`].
pub const RATIO_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdRatio {
    pub method_mmd: f64,
    pub sb_mmd: f64,
    pub ratio: f64,
    /// The SB distance was below [`RATIO_FLOOR`] and was replaced by it.
    pub floored: bool,
}

/// `MMD(method, reference) / MMD(sb, reference)`, each with its own
/// median-heuristic bandwidth. Equal distances give exactly 1.
pub fn mmd_ratio(
    method: &PosteriorSamples,
    sb: &PosteriorSamples,
    reference: &PosteriorSamples,
) -> Result<MmdRatio> {
    let method_mmd = mmd(method, reference, Bandwidth::Median)?;
    let sb_mmd = mmd(sb, reference, Bandwidth::Median)?;
    let floored = sb_mmd < RATIO_FLOOR;
    let ratio = if method_mmd == sb_mmd {
        1.0
    } else {
        method_mmd / sb_mmd.max(RATIO_FLOOR)
    };
    Ok(MmdRatio {
        method_mmd,
        sb_mmd,
        ratio,
        floored,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBias {
    pub mean_bias: f64,
    pub std_bias: f64,
}

/// Per-coordinate difference of means and of standard deviations
/// (method − reference).
pub fn bias_report(
    method: &PosteriorSamples,
    reference: &PosteriorSamples,
) -> Result<Vec<ParamBias>> {
    check_pair(method, reference)?;
    let (m_mean, r_mean) = (method.mean(), reference.mean());
    let (m_cov, r_cov) = (method.covariance(), reference.covariance());
    let d = method.dim();
    Ok((0..d)
        .map(|j| ParamBias {
            mean_bias: m_mean[j] - r_mean[j],
            std_bias: m_cov[j * d + j].sqrt() - r_cov[j * d + j].sqrt(),
        })
        .collect())
}

#[cfg(test)]
mod tests;
