use std::sync::Arc;

use crate::error::{Error, Result};

use super::{ParamLayout, ParamVector, SegmentId, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    VarAxis(Var, usize),
    PoolMean(Var, usize),
    Clamp(Var, f64, f64),
    GatherCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Execution-ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf handles for every segment of a bound [`ParamVector`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    layout: Arc<ParamLayout>,
}

impl ParamVars {
    pub fn get(&self, id: SegmentId) -> Var {
        self.vars[id.0]
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` does not reach the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gathers the gradients of bound parameters into a flat vector laid out
    /// like the original parameters.
    pub fn collect(&self, params: &ParamVars) -> ParamVector {
        let mut out = ParamVector::zeros(params.layout.clone());
        for (seg, &v) in params.layout.segments().iter().zip(&params.vars) {
            if let Some(g) = &self.grads[v.0] {
                out.values_mut()[seg.offset..seg.offset + seg.len].copy_from_slice(g);
            }
        }
        out
    }
}

fn pad3(shape: &[usize]) -> [usize; 3] {
    let mut p = [1; 3];
    let off = 3 - shape.len();
    p[off..].copy_from_slice(shape);
    p
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad3(a), pad3(b));
    let mut out = Vec::with_capacity(rank);
    for d in (3 - rank)..3 {
        let n = match (pa[d], pb[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
        out.push(n);
    }
    Ok(out)
}

/// Per-dimension element strides of `shape` inside a broadcast output, zero
/// along broadcast dimensions.
fn broadcast_strides(shape: &[usize]) -> [usize; 3] {
    let p = pad3(shape);
    let full = [p[1] * p[2], p[2], 1];
    let mut s = [0; 3];
    for d in 0..3 {
        s[d] = if p[d] == 1 { 0 } else { full[d] };
    }
    s
}

/// Calls `f(out_index, a_index, b_index)` for every broadcast output element.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let po = pad3(out);
    let (sa, sb) = (broadcast_strides(a), broadcast_strides(b));
    let mut o = 0;
    for i in 0..po[0] {
        for j in 0..po[1] {
            let (ia, ib) = (i * sa[0] + j * sa[1], i * sb[0] + j * sb[1]);
            for k in 0..po[2] {
                f(o, ia + k * sa[2], ib + k * sb[2]);
                o += 1;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn as_matrix_dims(shape: &[usize], lhs: bool) -> Option<(usize, usize)> {
    match shape {
        [k] if lhs => Some((1, *k)),
        [k] => Some((*k, 1)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf. Leaves and constants are identical on the tape; only
    /// leaves that are later queried carry meaning as variables.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn bind(&mut self, params: &ParamVector) -> ParamVars {
        let layout = params.layout().clone();
        let vars = (0..layout.segments().len())
            .map(|i| self.leaf(params.segment_tensor(SegmentId(i))))
            .collect();
        ParamVars { vars, layout }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape() == tb.shape() {
            let d = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(ta.shape().to_vec(), d)
        } else {
            let shape = broadcast_shape(op, ta.shape(), tb.shape())?;
            let mut d = vec![0.0; shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&shape, ta.shape(), tb.shape(), |o, i, j| {
                d[o] = f(da[i], db[j]);
            });
            Tensor::from_parts(shape, d)
        };
        Ok(self.push(value, make(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[x.0].value;
        let value =
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(value, op)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let err = || Error::Shape {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let (n, k) = as_matrix_dims(ta.shape(), true).ok_or_else(err)?;
        let (k2, m) = as_matrix_dims(tb.shape(), false).ok_or_else(err)?;
        if k != k2 {
            return Err(err());
        }
        let data = matmul_into(ta.data(), tb.data(), n, k, m);
        let shape = match (ta.rank(), tb.rank()) {
            (1, 1) => vec![1],
            (1, _) => vec![m],
            (_, 1) => vec![n],
            _ => vec![n, m],
        };
        Ok(self.push(Tensor::from_parts(shape, data), Op::MatMul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::Shape {
                op,
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    fn reduce_axis(
        &mut self,
        x: Var,
        axis: usize,
        f: impl Fn(&mut Vec<f64>) -> f64,
        op: Op,
    ) -> Var {
        let t = &self.nodes[x.0].value;
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut buf = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                buf.clear();
                buf.extend((0..len).map(|k| t.data()[(o * len + k) * inner + i]));
                out[o * inner + i] = f(&mut buf);
            }
        }
        let shape = reduced_shape(t.shape(), axis);
        self.push(Tensor::from_parts(shape, out), op)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        Ok(self.reduce_axis(x, axis, |b| b.iter().sum(), Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        Ok(self.reduce_axis(
            x,
            axis,
            |b| b.iter().sum::<f64>() / b.len() as f64,
            Op::MeanAxis(x, axis),
        ))
    }

    /// Population variance (1/L normalizer) along `axis`.
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("var_axis", x, axis)?;
        Ok(self.reduce_axis(
            x,
            axis,
            |b| {
                let n = b.len() as f64;
                let mu = b.iter().sum::<f64>() / n;
                b.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n
            },
            Op::VarAxis(x, axis),
        ))
    }

    /// Mean along `axis` whose value does not depend on the order of the
    /// reduced elements: each fiber is summed in sorted order.
    pub fn pool_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("pool_mean", x, axis)?;
        Ok(self.reduce_axis(
            x,
            axis,
            |b| {
                let n = b.len() as f64;
                sorted_sum(b) / n
            },
            Op::PoolMean(x, axis),
        ))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || idx.is_empty() || idx.iter().any(|&j| j >= t.cols()) {
            return Err(Error::Shape {
                op: "gather_cols",
                lhs: t.shape().to_vec(),
                rhs: idx.to_vec(),
            });
        }
        let (n, m) = (t.rows(), t.cols());
        let mut d = Vec::with_capacity(n * idx.len());
        for i in 0..n {
            let row = &t.data()[i * m..(i + 1) * m];
            d.extend(idx.iter().map(|&j| row[j]));
        }
        let value = Tensor::from_parts(vec![n, idx.len()], d);
        Ok(self.push(value, Op::GatherCols(x, idx.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Shape {
            op: "concat_cols",
            lhs: vec![],
            rhs: vec![],
        })?;
        let n = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut d = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                d.extend_from_slice(&self.nodes[p.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::from_parts(vec![n, total], d);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar root. Nodes are visited in exact reverse
    /// recording order; unreachable nodes keep a `None` adjoint.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "root {} is not on this tape",
                root.0
            )));
        }
        let rs = self.shape(root);
        if rs.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(rs.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();

        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let elementwise = |grads: &mut [Option<Vec<f64>>], x: Var, d: &dyn Fn(usize) -> f64| {
            let gx = slot(grads, x, g.len());
            for (k, gk) in g.iter().enumerate() {
                gx[k] += gk * d(k);
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (da, db) = (val(a), val(b));
                let (na, nb) = (da.len(), db.len());
                let partials = |o: usize, ia: usize, ib: usize| -> (f64, f64) {
                    match &node.op {
                        Op::Add(..) => (g[o], g[o]),
                        Op::Sub(..) => (g[o], -g[o]),
                        Op::Mul(..) => (g[o] * db[ib], g[o] * da[ia]),
                        _ => (g[o] / db[ib], -g[o] * da[ia] / (db[ib] * db[ib])),
                    }
                };
                let mut ga = vec![0.0; na];
                let mut gb = vec![0.0; nb];
                if shp(a) == shp(b) {
                    for o in 0..g.len() {
                        let (pa, pb) = partials(o, o, o);
                        ga[o] += pa;
                        gb[o] += pb;
                    }
                } else {
                    for_each_broadcast(node.value.shape(), shp(a), shp(b), |o, ia, ib| {
                        let (pa, pb) = partials(o, ia, ib);
                        ga[ia] += pa;
                        gb[ib] += pb;
                    });
                }
                for (v, gv) in [(a, ga), (b, gb)] {
                    let s = slot(grads, v, gv.len());
                    s.iter_mut().zip(&gv).for_each(|(x, d)| *x += d);
                }
            }
            Op::Neg(x) => elementwise(grads, *x, &|_| -1.0),
            Op::Scale(x, c) => elementwise(grads, *x, &|_| *c),
            Op::AddScalar(x) => elementwise(grads, *x, &|_| 1.0),
            Op::Tanh(x) => elementwise(grads, *x, &|k| 1.0 - y[k] * y[k]),
            Op::Softplus(x) => {
                let xv = val(*x);
                elementwise(grads, *x, &|k| sigmoid(xv[k]))
            }
            Op::Exp(x) => elementwise(grads, *x, &|k| y[k]),
            Op::Log(x) => {
                let xv = val(*x);
                elementwise(grads, *x, &|k| 1.0 / xv[k])
            }
            Op::Square(x) => {
                let xv = val(*x);
                elementwise(grads, *x, &|k| 2.0 * xv[k])
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                elementwise(grads, *x, &|k| {
                    if xv[k] >= *lo && xv[k] <= *hi {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (n, k) = as_matrix_dims(shp(a), true).expect("checked in forward");
                let (_, m) = as_matrix_dims(shp(b), false).expect("checked in forward");
                let (av, bv) = (val(a), val(b));
                // dA = G Bᵀ
                let ga = slot(grads, a, n * k);
                for r in 0..n {
                    let grow = &g[r * m..(r + 1) * m];
                    for p in 0..k {
                        let brow = &bv[p * m..(p + 1) * m];
                        ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                // dB = Aᵀ G
                let gb = slot(grads, b, k * m);
                for r in 0..n {
                    let grow = &g[r * m..(r + 1) * m];
                    for p in 0..k {
                        let a_rp = av[r * k + p];
                        let gbrow = &mut gb[p * m..(p + 1) * m];
                        for (o, gv) in gbrow.iter_mut().zip(grow) {
                            *o += a_rp * gv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let gx = slot(grads, *x, n);
                let s = g[0] / n as f64;
                gx.iter_mut().for_each(|v| *v += s);
            }
            Op::SumAxis(x, axis)
            | Op::MeanAxis(x, axis)
            | Op::PoolMean(x, axis)
            | Op::VarAxis(x, axis) => {
                let (x, axis) = (*x, *axis);
                let xv = val(x);
                let (outer, len, inner) = axis_split(shp(x), axis);
                let gx = slot(grads, x, xv.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let go = g[o * inner + i];
                        let at = |k: usize| (o * len + k) * inner + i;
                        match &node.op {
                            Op::SumAxis(..) => (0..len).for_each(|k| gx[at(k)] += go),
                            Op::VarAxis(..) => {
                                let mu = (0..len).map(|k| xv[at(k)]).sum::<f64>() / len as f64;
                                let c = 2.0 * go / len as f64;
                                (0..len).for_each(|k| gx[at(k)] += c * (xv[at(k)] - mu));
                            }
                            _ => {
                                let c = go / len as f64;
                                (0..len).for_each(|k| gx[at(k)] += c);
                            }
                        }
                    }
                }
            }
            Op::GatherCols(x, idx) => {
                let m = shp(*x)[1];
                let w = idx.len();
                let gx = slot(grads, *x, val(*x).len());
                for (r, grow) in g.chunks(w).enumerate() {
                    for (j, &c) in idx.iter().enumerate() {
                        gx[r * m + c] += grow[j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = shp(p)[1];
                    let gp = slot(grads, p, val(p).len());
                    for (r, grow) in g.chunks(total).enumerate() {
                        for j in 0..w {
                            gp[r * w + j] += grow[off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::Reshape(x) => elementwise(grads, *x, &|_| 1.0),
        }
    }
}
