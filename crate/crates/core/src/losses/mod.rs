//! Training objectives: the simulation-based likelihood loss, the
//! self-consistency variance loss, the EWC penalty and their combinations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ProbModel;
use crate::networks::Posterior;
use crate::rng::SimRng;
use crate::tensor::{ParamVars, ParamVector, SegmentId, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScConfig {
    /// Posterior draws per observation set (`L`).
    pub draws: usize,
    /// Bound on the magnitude of each log-ratio term.
    pub clip: f64,
}

impl Default for ScConfig {
    fn default() -> Self {
        Self {
            draws: 16,
            clip: 1e6,
        }
    }
}

impl ScConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws < 2 {
            return Err(Error::InvalidArgument(format!(
                "draws must be >= 2, got {}",
                self.draws
            )));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "clip must be > 0, got {}",
                self.clip
            )));
        }
        Ok(())
    }
}

/// Training schedule for a stream of tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Simulation-based training only; the baseline every method is compared with.
    Sb,
    /// Per-task SC fine-tuning, each task starting from the pre-trained network.
    TestTimeSc,
    /// Sequential SC fine-tuning without any retention mechanism.
    NaiveSc,
    ScEr,
    ScEwc,
    ScErEwc,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::Sb,
        Regime::TestTimeSc,
        Regime::NaiveSc,
        Regime::ScEr,
        Regime::ScEwc,
        Regime::ScErEwc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Sb => "sb",
            Regime::TestTimeSc => "test-time-sc",
            Regime::NaiveSc => "naive-sc",
            Regime::ScEr => "sc-er",
            Regime::ScEwc => "sc-ewc",
            Regime::ScErEwc => "sc-er-ewc",
        }
    }

    pub fn uses_replay(self) -> bool {
        matches!(self, Regime::ScEr | Regime::ScErEwc)
    }

    pub fn uses_ewc(self) -> bool {
        matches!(self, Regime::ScEwc | Regime::ScErEwc)
    }

    /// Whether the regime fine-tunes with the SC loss at all.
    pub fn is_sc(self) -> bool {
        self != Regime::Sb
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Regime::ALL.iter().map(|r| r.as_str()).collect();
                Error::InvalidArgument(format!(
                    "unknown regime `{s}`; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Parameter snapshot and diagonal importance weights for one finished task.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcRecord {
    pub task_id: usize,
    pub snapshot: ParamVector,
    pub importance: ParamVector,
}

/// `−(1/N) Σ log q(θₙ | xₙ)` over paired rows of `thetas` and sets `xs`.
pub fn sb_loss(
    tape: &mut Tape,
    posterior: &dyn Posterior,
    vars: &ParamVars,
    thetas: &Tensor,
    xs: &[&Tensor],
) -> Result<Var> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument(
            "sb_loss needs a nonempty batch".into(),
        ));
    }
    let lp = posterior.log_prob_pairs(tape, vars, thetas, xs)?;
    if let Some(i) = tape.value(lp).data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("sb loss at batch item {i}"),
        });
    }
    let mean = tape.mean(lp);
    Ok(tape.neg(mean))
}

/// Everything the SC loss needs besides parameters and data.
#[derive(Clone, Copy)]
pub struct ScObjective<'a> {
    pub posterior: &'a dyn Posterior,
    pub model: &'a dyn ProbModel,
    pub cfg: &'a ScConfig,
}

/// Inputs to [`ScObjective::composite`].
#[derive(Clone, Copy, Debug)]
pub struct CompositeInputs<'a> {
    pub regime: Regime,
    pub current: &'a [&'a Tensor],
    pub buffer: &'a [&'a Tensor],
    pub records: &'a [EwcRecord],
    pub lambda: f64,
}

impl CompositeInputs<'_> {
    /// The observation sets that enter the SC term.
    pub fn sc_sets(&self) -> Vec<&Tensor> {
        let mut sets: Vec<&Tensor> = self.current.to_vec();
        if self.regime.uses_replay() {
            sets.extend_from_slice(self.buffer);
        }
        sets
    }
}

impl ScObjective<'_> {
    /// `L` proposal draws per set from the current posterior. These are
    /// plain values: no gradient flows through the sampling path.
    pub fn draw(
        &self,
        params: &ParamVector,
        sets: &[&Tensor],
        rng: &mut SimRng,
    ) -> Result<Vec<Tensor>> {
        self.cfg.validate()?;
        sets.iter()
            .map(|x| self.posterior.sample(params, x, self.cfg.draws, rng))
            .collect()
    }

    /// `(1/M) Σ_m Var_ℓ [log p(x_m | θ_ℓ) + log p(θ_ℓ) − log q(θ_ℓ | x_m)]`
    /// with the draws held fixed.
    pub fn sc_loss_with_draws(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        sets: &[&Tensor],
        draws: &[Tensor],
    ) -> Result<Var> {
        if sets.is_empty() {
            return Err(Error::InvalidArgument(
                "sc_loss needs at least one observation set".into(),
            ));
        }
        if draws.len() != sets.len() {
            return Err(Error::LengthMismatch {
                expected: sets.len(),
                actual: draws.len(),
            });
        }
        let clip = self.cfg.clip;
        let mut total: Option<Var> = None;
        for (m, (x, theta)) in sets.iter().zip(draws).enumerate() {
            if x.rows() == 0 {
                return Err(Error::InvalidArgument(format!(
                    "observation set {m} is empty"
                )));
            }
            let mut joint = Vec::with_capacity(theta.rows());
            for l in 0..theta.rows() {
                let t = theta.row(l);
                joint.push(match self.model.likelihood_log_prob(x, t) {
                    Ok(ll) => ll + self.model.prior_log_prob(t),
                    // Underflowing likelihoods are pinned to the clip bound below.
                    Err(Error::NonFinite { .. }) => f64::NEG_INFINITY,
                    Err(e) => return Err(e),
                });
            }
            if joint.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFiniteRatio { set: m });
            }
            let lq = self.posterior.log_prob(tape, vars, theta, x)?;
            let c = tape.constant(Tensor::vector(joint)?);
            let ratio = tape.sub(c, lq)?;
            let ratio = tape.clamp(ratio, -clip, clip);
            if !tape.value(ratio).is_finite() {
                return Err(Error::NonFiniteRatio { set: m });
            }
            let var = tape.var_axis(ratio, 0)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, var)?,
                None => var,
            });
        }
        let total = tape.sum(total.expect("nonempty"));
        Ok(tape.scale(total, 1.0 / sets.len() as f64))
    }

    pub fn sc_loss(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        vars: &ParamVars,
        sets: &[&Tensor],
        rng: &mut SimRng,
    ) -> Result<Var> {
        let draws = self.draw(params, sets, rng)?;
        self.sc_loss_with_draws(tape, vars, sets, &draws)
    }

    /// `(1/K) Σ_k (∇ L_SC(x_k))²`. Sets are visited in order and share `rng`.
    pub fn fisher_diag(
        &self,
        params: &ParamVector,
        sets: &[&Tensor],
        rng: &mut SimRng,
    ) -> Result<ParamVector> {
        if sets.is_empty() {
            return Err(Error::InvalidArgument(
                "fisher_diag needs at least one observation set".into(),
            ));
        }
        let mut acc = ParamVector::zeros(params.layout().clone());
        for x in sets {
            let mut tape = Tape::new();
            let vars = tape.bind(params);
            let loss = self.sc_loss(&mut tape, params, &vars, &[x], rng)?;
            let g = tape.backward(loss)?.collect(&vars);
            if let Some(seg) = g.first_non_finite_segment() {
                return Err(Error::NonFiniteGradient {
                    segment: seg.to_string(),
                });
            }
            for (a, gi) in acc.values_mut().iter_mut().zip(g.values()) {
                *a += gi * gi;
            }
        }
        let k = sets.len() as f64;
        Ok(acc.map(|v| v / k))
    }

    /// Regime objective with the SC draws supplied by the caller.
    pub fn composite_with_draws(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        inputs: &CompositeInputs<'_>,
        draws: &[Tensor],
    ) -> Result<Var> {
        if !inputs.regime.is_sc() {
            return Err(Error::InvalidArgument(
                "the sb regime has no SC objective".into(),
            ));
        }
        let sets = inputs.sc_sets();
        let sc = self.sc_loss_with_draws(tape, vars, &sets, draws)?;
        if inputs.regime.uses_ewc() && !inputs.records.is_empty() {
            let pen = ewc_penalty(tape, vars, inputs.records, inputs.lambda)?;
            tape.add(sc, pen)
        } else {
            Ok(sc)
        }
    }

    pub fn composite(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        vars: &ParamVars,
        inputs: &CompositeInputs<'_>,
        rng: &mut SimRng,
    ) -> Result<Var> {
        let draws = self.draw(params, &inputs.sc_sets(), rng)?;
        self.composite_with_draws(tape, vars, inputs, &draws)
    }
}

/// `(λ/2) Σᵢ Σⱼ Wᵢⱼ (Φⱼ − Φ*ᵢⱼ)²`.
pub fn ewc_penalty(
    tape: &mut Tape,
    vars: &ParamVars,
    records: &[EwcRecord],
    lambda: f64,
) -> Result<Var> {
    let layout = vars.layout().clone();
    let mut total: Option<Var> = None;
    for rec in records {
        for v in [&rec.snapshot, &rec.importance] {
            if v.layout().as_ref() != layout.as_ref() {
                return Err(Error::LengthMismatch {
                    expected: layout.len(),
                    actual: v.len(),
                });
            }
        }
        for i in 0..layout.segments().len() {
            let id = SegmentId(i);
            let anchor = tape.constant(rec.snapshot.segment_tensor(id));
            let weight = tape.constant(rec.importance.segment_tensor(id));
            let diff = tape.sub(vars.get(id), anchor)?;
            let sq = tape.square(diff);
            let weighted = tape.mul(sq, weight)?;
            let s = tape.sum(weighted);
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    Ok(match total {
        Some(t) => tape.scale(t, lambda / 2.0),
        None => tape.scalar(0.0),
    })
}
