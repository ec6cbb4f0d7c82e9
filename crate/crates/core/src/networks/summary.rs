use crate::error::{Error, Result};
use crate::tensor::{LayoutBuilder, ParamVars, SegmentId, Tape, Tensor, Var};

use super::{check_finite_input, dense, Init};

/// DeepSet-style encoder: a per-row MLP, an order-independent mean over
/// rows, and a projector to `dim_out`.
#[derive(Clone, Debug)]
pub struct SummaryNet {
    dim_x: usize,
    hidden: usize,
    dim_out: usize,
    enc_w1: SegmentId,
    enc_b1: SegmentId,
    enc_w2: SegmentId,
    enc_b2: SegmentId,
    proj_w1: SegmentId,
    proj_b1: SegmentId,
    proj_w2: SegmentId,
    proj_b2: SegmentId,
}

impl SummaryNet {
    pub(crate) fn new(
        builder: &mut LayoutBuilder,
        inits: &mut Vec<(SegmentId, Init)>,
        dim_x: usize,
        hidden: usize,
        dim_out: usize,
    ) -> Self {
        let mut push = |name: &str, shape: &[usize], init: Init| {
            let id = builder.push(format!("summary.{name}"), shape);
            inits.push((id, init));
            id
        };
        let g = |fan_in, fan_out| Init::Glorot { fan_in, fan_out };
        Self {
            dim_x,
            hidden,
            dim_out,
            enc_w1: push("enc.w1", &[dim_x, hidden], g(dim_x, hidden)),
            enc_b1: push("enc.b1", &[hidden], Init::Zero),
            enc_w2: push("enc.w2", &[hidden, hidden], g(hidden, hidden)),
            enc_b2: push("enc.b2", &[hidden], Init::Zero),
            proj_w1: push("proj.w1", &[hidden, hidden], g(hidden, hidden)),
            proj_b1: push("proj.b1", &[hidden], Init::Zero),
            proj_w2: push("proj.w2", &[hidden, dim_out], g(hidden, dim_out)),
            proj_b2: push("proj.b2", &[dim_out], Init::Zero),
        }
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dim_x {
            return Err(Error::Shape {
                op: "summarize",
                lhs: x.shape().to_vec(),
                rhs: vec![self.dim_x],
            });
        }
        check_finite_input(x, "observation set")
    }

    fn encode(&self, tape: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
        let h = dense(tape, x, p.get(self.enc_w1), p.get(self.enc_b1))?;
        let h = tape.tanh(h);
        let h = dense(tape, h, p.get(self.enc_w2), p.get(self.enc_b2))?;
        Ok(tape.tanh(h))
    }

    fn project(&self, tape: &mut Tape, p: &ParamVars, pooled: Var) -> Result<Var> {
        let h = dense(tape, pooled, p.get(self.proj_w1), p.get(self.proj_b1))?;
        let h = tape.tanh(h);
        dense(tape, h, p.get(self.proj_w2), p.get(self.proj_b2))
    }

    /// Embeds one `[N, dim_x]` observation set as a `[1, dim_out]` row.
    pub fn forward(&self, tape: &mut Tape, p: &ParamVars, x: &Tensor) -> Result<Var> {
        self.check_input(x)?;
        let xv = tape.constant(x.clone());
        let h = self.encode(tape, p, xv)?;
        let pooled = tape.pool_mean(h, 0)?;
        let pooled = tape.reshape(pooled, &[1, self.hidden])?;
        self.project(tape, p, pooled)
    }

    /// Embeds several sets of equal size in one pass; returns `[B, dim_out]`.
    pub fn forward_batch(&self, tape: &mut Tape, p: &ParamVars, sets: &[&Tensor]) -> Result<Var> {
        let n = sets
            .first()
            .map(|s| s.rows())
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        if sets.iter().any(|s| s.rows() != n) {
            let rows: Vec<Var> = sets
                .iter()
                .map(|s| self.forward(tape, p, s))
                .collect::<Result<_>>()?;
            return self.stack_rows(tape, &rows);
        }
        for s in sets {
            self.check_input(s)?;
        }
        let stacked = Tensor::vstack(sets)?;
        let xv = tape.constant(stacked);
        let h = self.encode(tape, p, xv)?;
        let h = tape.reshape(h, &[sets.len(), n, self.hidden])?;
        let pooled = tape.pool_mean(h, 1)?;
        self.project(tape, p, pooled)
    }

    fn stack_rows(&self, tape: &mut Tape, rows: &[Var]) -> Result<Var> {
        // Column-concatenate then reshape: [1, B*s] -> [B, s].
        let wide = tape.concat_cols(rows)?;
        tape.reshape(wide, &[rows.len(), self.dim_out])
    }
}
