//! Conditional normalizing-flow posterior `q(θ | h(x))` and the
//! permutation-invariant summary network `h`.

mod checkpoint;
mod flow;
mod gaussian;
mod summary;

pub use checkpoint::{load_params, read_params, save_params, write_params};
pub use flow::{CouplingFlow, SCALE_FLOOR};
pub use gaussian::GaussianPosterior;
pub use summary::SummaryNet;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tensor::{
    LayoutBuilder, ParamLayout, ParamVars, ParamVector, SegmentId, Tape, Tensor, Var,
};

/// A conditional density that can be sampled without gradients and
/// evaluated on a tape.
pub trait Posterior {
    fn dim_theta(&self) -> usize;

    /// Draws `n` parameter vectors for the observation set `x` as an
    /// `[n, dim_theta]` matrix.
    fn sample(
        &self,
        params: &ParamVector,
        x: &Tensor,
        n: usize,
        rng: &mut SimRng,
    ) -> Result<Tensor>;

    /// `log q(θᵢ | x)` for each row of `theta`, recorded on `tape`.
    fn log_prob(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        theta: &Tensor,
        x: &Tensor,
    ) -> Result<Var>;

    /// `log q(θᵢ | xᵢ)` for paired rows of `thetas` and sets `xs`, shape `[B]`.
    fn log_prob_pairs(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        thetas: &Tensor,
        xs: &[&Tensor],
    ) -> Result<Var> {
        if thetas.rank() != 2 || thetas.rows() != xs.len() || xs.is_empty() {
            return Err(Error::Shape {
                op: "log_prob_pairs",
                lhs: thetas.shape().to_vec(),
                rhs: vec![xs.len()],
            });
        }
        let mut parts = Vec::with_capacity(xs.len());
        for (i, x) in xs.iter().enumerate() {
            let th = thetas.select_rows(&[i])?;
            let lp = self.log_prob(tape, params, &th, x)?;
            parts.push(tape.reshape(lp, &[1, 1])?);
        }
        let row = tape.concat_cols(&parts)?;
        tape.reshape(row, &[xs.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub summary_hidden: usize,
    pub summary_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            flow_layers: 6,
            flow_hidden: 64,
            summary_hidden: 32,
            summary_dim: 16,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Glorot-uniform weights.
    Glorot {
        fan_in: usize,
        fan_out: usize,
    },
    Zero,
}

/// Affine layer `x W + b` with `b` broadcast over rows.
pub(crate) fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

pub(crate) fn init_values(
    layout: &ParamLayout,
    inits: &[(SegmentId, Init)],
    rng: &mut SimRng,
) -> Vec<f64> {
    let mut values = vec![0.0; layout.len()];
    for &(id, init) in inits {
        let seg = layout.segment(id);
        if let Init::Glorot { fan_in, fan_out } = init {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut values[seg.offset..seg.offset + seg.len] {
                *v = rng.random_range(-a..a);
            }
        }
    }
    values
}

pub(crate) fn check_finite_input(x: &Tensor, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: what.to_string(),
        })
    }
}

/// Summary network and coupling flow trained jointly; `Φ = (φ, ψ)` lives in
/// one [`ParamVector`] with `summary.*` and `flow.*` segments.
#[derive(Clone, Debug)]
pub struct PosteriorNet {
    summary: SummaryNet,
    flow: CouplingFlow,
    layout: Arc<ParamLayout>,
    inits: Vec<(SegmentId, Init)>,
}

impl PosteriorNet {
    pub fn new(dim_theta: usize, dim_x: usize, cfg: &NetworkConfig) -> Result<Self> {
        if dim_theta == 0 || dim_x == 0 || cfg.flow_layers == 0 || cfg.flow_hidden == 0 {
            return Err(Error::InvalidArgument(
                "network dimensions must be positive".into(),
            ));
        }
        if cfg.summary_hidden == 0 || cfg.summary_dim == 0 {
            return Err(Error::InvalidArgument(
                "summary dimensions must be positive".into(),
            ));
        }
        let mut builder = LayoutBuilder::new();
        let mut inits = Vec::new();
        let summary = SummaryNet::new(
            &mut builder,
            &mut inits,
            dim_x,
            cfg.summary_hidden,
            cfg.summary_dim,
        );
        let flow = CouplingFlow::new(
            &mut builder,
            &mut inits,
            dim_theta,
            cfg.summary_dim,
            cfg.flow_layers,
            cfg.flow_hidden,
        );
        Ok(Self {
            summary,
            flow,
            layout: builder.finish(),
            inits,
        })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn flow(&self) -> &CouplingFlow {
        &self.flow
    }

    pub fn summary_net(&self) -> &SummaryNet {
        &self.summary
    }

    pub fn dim_summary(&self) -> usize {
        self.summary.dim_out()
    }

    /// Fresh parameters. The last layer of every conditioner is zero so the
    /// flow starts as the identity map.
    pub fn init_params(&self, rng: &mut SimRng) -> ParamVector {
        let values = init_values(&self.layout, &self.inits, rng);
        ParamVector::from_values(self.layout.clone(), values).expect("layout length")
    }

    /// Checks that `params` was produced for this architecture.
    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout().as_ref() != self.layout.as_ref() {
            return Err(Error::Format(
                "parameter layout does not match the network architecture".into(),
            ));
        }
        Ok(())
    }

    /// Permutation-invariant embedding `h(x)` of one observation set.
    pub fn summarize(&self, params: &ParamVector, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = tape.bind(params);
        let s = self.summarize_on(&mut tape, &vars, x)?;
        Ok(tape.value(s).clone())
    }

    pub fn summarize_on(&self, tape: &mut Tape, vars: &ParamVars, x: &Tensor) -> Result<Var> {
        self.summary.forward(tape, vars, x)
    }

    /// `log q(θ | cond)` for a single parameter vector.
    pub fn flow_log_prob(&self, params: &ParamVector, theta: &[f64], cond: &Tensor) -> Result<f64> {
        if theta.len() != self.flow.dim_theta() {
            return Err(Error::InvalidArgument(format!(
                "theta has {} entries, flow expects {}",
                theta.len(),
                self.flow.dim_theta()
            )));
        }
        let t = Tensor::matrix(1, theta.len(), theta.to_vec())?;
        Ok(self.flow_log_prob_batch(params, &t, cond)?.item())
    }

    pub fn flow_log_prob_batch(
        &self,
        params: &ParamVector,
        theta: &Tensor,
        cond: &Tensor,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = tape.bind(params);
        let th = tape.constant(theta.clone());
        let c = tape.constant(as_row(cond)?);
        let lp = self.flow.log_prob(&mut tape, &vars, th, c)?;
        Ok(tape.value(lp).clone())
    }

    /// Draws `z ~ N(0, I)` and maps it through the inverse flow.
    pub fn flow_sample(
        &self,
        params: &ParamVector,
        cond: &Tensor,
        n: usize,
        rng: &mut SimRng,
    ) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        let d = self.flow.dim_theta();
        let z: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
        let z = Tensor::matrix(n, d, z)?;
        let (theta, _) = self.flow.inverse_values(params, &z, &as_row(cond)?)?;
        Ok(theta)
    }
}

fn as_row(cond: &Tensor) -> Result<Tensor> {
    match cond.rank() {
        1 => cond.reshape(&[1, cond.numel()]),
        _ => Ok(cond.clone()),
    }
}

impl Posterior for PosteriorNet {
    fn dim_theta(&self) -> usize {
        self.flow.dim_theta()
    }

    fn sample(
        &self,
        params: &ParamVector,
        x: &Tensor,
        n: usize,
        rng: &mut SimRng,
    ) -> Result<Tensor> {
        let cond = self.summarize(params, x)?;
        self.flow_sample(params, &cond, n, rng)
    }

    fn log_prob(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        theta: &Tensor,
        x: &Tensor,
    ) -> Result<Var> {
        let cond = self.summary.forward(tape, params, x)?;
        let th = tape.constant(theta.clone());
        self.flow.log_prob(tape, params, th, cond)
    }

    fn log_prob_pairs(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        thetas: &Tensor,
        xs: &[&Tensor],
    ) -> Result<Var> {
        if thetas.rank() != 2 || thetas.rows() != xs.len() {
            return Err(Error::Shape {
                op: "log_prob_pairs",
                lhs: thetas.shape().to_vec(),
                rhs: vec![xs.len()],
            });
        }
        let cond = self.summary.forward_batch(tape, params, xs)?;
        let th = tape.constant(thetas.clone());
        self.flow.log_prob(tape, params, th, cond)
    }
}
