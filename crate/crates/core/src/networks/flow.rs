use crate::error::{Error, Result};
use crate::tensor::{LayoutBuilder, ParamVars, ParamVector, SegmentId, Tape, Tensor, Var};

use super::{dense, Init};

/// Lower bound added to every coupling scale.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Pre-activation shift so that a zero conditioner output gives scale 1:
/// `softplus(SHIFT) + SCALE_FLOOR == 1`.
fn scale_shift() -> f64 {
    ((1.0 - SCALE_FLOOR).exp() - 1.0).ln()
}

#[derive(Clone, Debug)]
struct CouplingLayer {
    /// Coordinates passed through unchanged and fed to the conditioner.
    pass: Vec<usize>,
    /// Coordinates transformed by `x * s + t`.
    moved: Vec<usize>,
    /// Maps output position to its column in `pass ++ moved`.
    unscatter: Vec<usize>,
    w_pass: Option<SegmentId>,
    w_cond: SegmentId,
    b1: SegmentId,
    w2: SegmentId,
    b2: SegmentId,
    w3: SegmentId,
    b3: SegmentId,
}

/// Stack of conditional affine coupling layers mapping θ to a standard
/// normal latent `z`.
///
/// Layer `l` rotates the coordinates by `l / 2` and alternates which half is
/// passed through, so with two or more dimensions every coordinate is moved
/// by some layer. The conditioner is a two-hidden-layer tanh MLP whose input
/// is the passed-through half concatenated with the conditioning vector.
#[derive(Clone, Debug)]
pub struct CouplingFlow {
    dim_theta: usize,
    dim_cond: usize,
    hidden: usize,
    layers: Vec<CouplingLayer>,
}

impl CouplingFlow {
    pub(crate) fn new(
        builder: &mut LayoutBuilder,
        inits: &mut Vec<(SegmentId, Init)>,
        dim_theta: usize,
        dim_cond: usize,
        n_layers: usize,
        hidden: usize,
    ) -> Self {
        let d = dim_theta;
        let half = d / 2;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let rot = (l / 2) % d;
            let order: Vec<usize> = (0..d).map(|i| (i + rot) % d).collect();
            let (pass, moved) = if l % 2 == 0 {
                (order[..half].to_vec(), order[half..].to_vec())
            } else {
                (order[d - half..].to_vec(), order[..d - half].to_vec())
            };
            let joined: Vec<usize> = pass.iter().chain(&moved).copied().collect();
            let mut unscatter = vec![0; d];
            for (col, &coord) in joined.iter().enumerate() {
                unscatter[coord] = col;
            }
            let mut push = |name: &str, shape: &[usize], init: Init| {
                let id = builder.push(format!("flow.{l}.{name}"), shape);
                inits.push((id, init));
                id
            };
            let nm = moved.len();
            let fan_in = pass.len() + dim_cond;
            let glorot = |fan_in: usize, fan_out: usize| Init::Glorot { fan_in, fan_out };
            let w_pass = (!pass.is_empty())
                .then(|| push("w_pass", &[pass.len(), hidden], glorot(fan_in, hidden)));
            let w_cond = push("w_cond", &[dim_cond, hidden], glorot(fan_in, hidden));
            let b1 = push("b1", &[hidden], Init::Zero);
            let w2 = push("w2", &[hidden, hidden], glorot(hidden, hidden));
            let b2 = push("b2", &[hidden], Init::Zero);
            let w3 = push("w3", &[hidden, 2 * nm], Init::Zero);
            let b3 = push("b3", &[2 * nm], Init::Zero);
            layers.push(CouplingLayer {
                pass,
                moved,
                unscatter,
                w_pass,
                w_cond,
                b1,
                w2,
                b2,
                w3,
                b3,
            });
        }
        Self {
            dim_theta,
            dim_cond,
            hidden,
            layers,
        }
    }

    pub fn dim_theta(&self) -> usize {
        self.dim_theta
    }

    pub fn dim_cond(&self) -> usize {
        self.dim_cond
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Returns `(log s, t)` for the moved coordinates of `layer`.
    fn conditioner(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        layer: &CouplingLayer,
        x_pass: Option<Var>,
        cond: Var,
    ) -> Result<(Var, Var, Var)> {
        let mut pre = dense(tape, cond, p.get(layer.w_cond), p.get(layer.b1))?;
        if let (Some(xp), Some(w)) = (x_pass, layer.w_pass) {
            let xw = tape.matmul(xp, p.get(w))?;
            pre = tape.add(xw, pre)?;
        }
        let h1 = tape.tanh(pre);
        let h2 = dense(tape, h1, p.get(layer.w2), p.get(layer.b2))?;
        let h2 = tape.tanh(h2);
        let out = dense(tape, h2, p.get(layer.w3), p.get(layer.b3))?;
        let nm = layer.moved.len();
        let raw = tape.gather_cols(out, &(0..nm).collect::<Vec<_>>())?;
        let shift = tape.gather_cols(out, &(nm..2 * nm).collect::<Vec<_>>())?;
        let raw = tape.add_scalar(raw, scale_shift());
        let sp = tape.softplus(raw);
        let scale = tape.add_scalar(sp, SCALE_FLOOR);
        let log_scale = tape.log(scale);
        Ok((scale, log_scale, shift))
    }

    fn check_layer(&self, tape: &Tape, v: Var, layer: usize) -> Result<()> {
        if tape.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::FlowNonFinite { layer })
        }
    }

    fn check_dims(&self, tape: &Tape, theta: Var, cond: Var) -> Result<()> {
        let ts = tape.shape(theta);
        let cs = tape.shape(cond);
        let rows = ts[0];
        if ts.len() != 2 || ts[1] != self.dim_theta {
            return Err(Error::Shape {
                op: "flow",
                lhs: ts.to_vec(),
                rhs: vec![self.dim_theta],
            });
        }
        if cs.len() != 2 || cs[1] != self.dim_cond || (cs[0] != 1 && cs[0] != rows) {
            return Err(Error::Shape {
                op: "flow conditioning",
                lhs: ts.to_vec(),
                rhs: cs.to_vec(),
            });
        }
        Ok(())
    }

    /// θ → z. Returns `(z, log|det ∂z/∂θ|)` with shapes `[L, d]` and `[L]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        theta: Var,
        cond: Var,
    ) -> Result<(Var, Var)> {
        self.check_dims(tape, theta, cond)?;
        let rows = tape.shape(theta)[0];
        let mut x = theta;
        let mut logdet: Option<Var> = None;
        for (li, layer) in self.layers.iter().enumerate() {
            let xp = if layer.pass.is_empty() {
                None
            } else {
                Some(tape.gather_cols(x, &layer.pass)?)
            };
            let xm = tape.gather_cols(x, &layer.moved)?;
            let (scale, log_scale, shift) = self.conditioner(tape, p, layer, xp, cond)?;
            let ym = tape.mul(xm, scale)?;
            let ym = tape.add(ym, shift)?;
            let joined = match xp {
                Some(xp) => tape.concat_cols(&[xp, ym])?,
                None => ym,
            };
            x = tape.gather_cols(joined, &layer.unscatter)?;
            self.check_layer(tape, x, li)?;
            let ld = tape.sum_axis(log_scale, 1)?;
            logdet = Some(match logdet {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        let logdet = match logdet {
            Some(ld) if tape.shape(ld)[0] == rows => ld,
            Some(ld) => {
                let zeros = tape.constant(Tensor::zeros(&[rows]));
                tape.add(zeros, ld)?
            }
            None => tape.constant(Tensor::zeros(&[rows])),
        };
        Ok((x, logdet))
    }

    /// z → θ. Returns `(θ, log|det ∂θ/∂z|)`.
    pub fn inverse(&self, tape: &mut Tape, p: &ParamVars, z: Var, cond: Var) -> Result<(Var, Var)> {
        self.check_dims(tape, z, cond)?;
        let rows = tape.shape(z)[0];
        let mut y = z;
        let mut logdet = tape.constant(Tensor::zeros(&[rows]));
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let yp = if layer.pass.is_empty() {
                None
            } else {
                Some(tape.gather_cols(y, &layer.pass)?)
            };
            let ym = tape.gather_cols(y, &layer.moved)?;
            let (scale, log_scale, shift) = self.conditioner(tape, p, layer, yp, cond)?;
            let centered = tape.sub(ym, shift)?;
            let xm = tape.div(centered, scale)?;
            let joined = match yp {
                Some(yp) => tape.concat_cols(&[yp, xm])?,
                None => xm,
            };
            y = tape.gather_cols(joined, &layer.unscatter)?;
            self.check_layer(tape, y, li)?;
            let ld = tape.sum_axis(log_scale, 1)?;
            logdet = tape.sub(logdet, ld)?;
        }
        Ok((y, logdet))
    }

    /// `log N(z; 0, I) + log|det ∂z/∂θ|` per row of `theta`.
    pub fn log_prob(&self, tape: &mut Tape, p: &ParamVars, theta: Var, cond: Var) -> Result<Var> {
        let (z, logdet) = self.forward(tape, p, theta, cond)?;
        let zz = tape.square(z);
        let zz = tape.sum_axis(zz, 1)?;
        let base = tape.scale(zz, -0.5);
        let base = tape.add_scalar(
            base,
            -0.5 * self.dim_theta as f64 * (2.0 * std::f64::consts::PI).ln(),
        );
        let lp = tape.add(base, logdet)?;
        if !tape.value(lp).is_finite() {
            return Err(Error::FlowNonFinite {
                layer: self.layers.len(),
            });
        }
        Ok(lp)
    }

    pub fn forward_values(
        &self,
        params: &ParamVector,
        theta: &Tensor,
        cond: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = tape.bind(params);
        let t = tape.constant(theta.clone());
        let c = tape.constant(cond.clone());
        let (z, ld) = self.forward(&mut tape, &vars, t, c)?;
        Ok((tape.value(z).clone(), tape.value(ld).clone()))
    }

    pub fn inverse_values(
        &self,
        params: &ParamVector,
        z: &Tensor,
        cond: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = tape.bind(params);
        let zv = tape.constant(z.clone());
        let c = tape.constant(cond.clone());
        let (t, ld) = self.inverse(&mut tape, &vars, zv, c)?;
        Ok((tape.value(t).clone(), tape.value(ld).clone()))
    }
}
