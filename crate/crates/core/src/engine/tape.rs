//! Reverse-mode tape over dense `f64` arrays.
//!
//! Every value produced by [`Tape::apply`] is appended to the tape; nodes are
//! therefore stored in topological order and [`Tape::backward`] walks them in
//! reverse exactly once.

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use super::array::RealArray;
use super::kernels;
use crate::error::{Error, Result};
use crate::params::NamedParams;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// The closed set of differentiable primitives.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[m,k] · [k,n]`
    MatMul,
    /// `[m,k] · [n,k]ᵀ`
    MatMulT,
    Add,
    Sub,
    /// `[m,n] + [n]` broadcast over rows.
    AddRow,
    /// Elementwise product of equal shapes.
    Mul,
    Scale(f64),
    /// Inputs `(x [m,n], gain [n], bias [n])`.
    LayerNorm,
    /// Softmax over the last axis.
    Softmax,
    /// Softmax over the last axis of a square `[t,t]` score matrix with
    /// entries above the diagonal masked out.
    CausalSoftmax,
    LogSoftmax,
    /// Row lookup `table[ids[i]]`; the ids are constants.
    Embedding(Vec<usize>),
    Log,
    Exp,
    Gelu,
    /// Picks `x[row, col]` for each pair into a rank-1 output.
    Gather(Vec<(usize, usize)>),
    Sum,
    Mean,
    /// `[m,n] → [m]`
    SumRows,
    /// Keeps the rank-1 entries whose mask bit is set.
    MaskedSelect(Vec<bool>),
    SliceCols { start: usize, len: usize },
    ConcatCols,
    Clamp { lo: f64, hi: f64 },
    Minimum,
}

/// Tag-level identity of a primitive, for textual dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    MatMul,
    MatMulT,
    Add,
    Sub,
    AddRow,
    Mul,
    Scale,
    LayerNorm,
    Softmax,
    CausalSoftmax,
    LogSoftmax,
    Embedding,
    Log,
    Exp,
    Gelu,
    Gather,
    Sum,
    Mean,
    SumRows,
    MaskedSelect,
    SliceCols,
    ConcatCols,
    Clamp,
    Minimum,
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(tag: &str) -> Result<Self> {
        use PrimitiveKind::*;
        Ok(match tag {
            "matmul" => MatMul,
            "matmul_t" => MatMulT,
            "add" => Add,
            "sub" => Sub,
            "add_row" => AddRow,
            "mul" => Mul,
            "scale" => Scale,
            "layer_norm" => LayerNorm,
            "softmax" => Softmax,
            "causal_softmax" => CausalSoftmax,
            "log_softmax" => LogSoftmax,
            "embedding" => Embedding,
            "log" => Log,
            "exp" => Exp,
            "gelu" => Gelu,
            "gather" => Gather,
            "sum" => Sum,
            "mean" => Mean,
            "sum_rows" => SumRows,
            "masked_select" => MaskedSelect,
            "slice_cols" => SliceCols,
            "concat_cols" => ConcatCols,
            "clamp" => Clamp,
            "minimum" => Minimum,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        use Primitive as P;
        use PrimitiveKind as K;
        match self {
            P::MatMul => K::MatMul,
            P::MatMulT => K::MatMulT,
            P::Add => K::Add,
            P::Sub => K::Sub,
            P::AddRow => K::AddRow,
            P::Mul => K::Mul,
            P::Scale(_) => K::Scale,
            P::LayerNorm => K::LayerNorm,
            P::Softmax => K::Softmax,
            P::CausalSoftmax => K::CausalSoftmax,
            P::LogSoftmax => K::LogSoftmax,
            P::Embedding(_) => K::Embedding,
            P::Log => K::Log,
            P::Exp => K::Exp,
            P::Gelu => K::Gelu,
            P::Gather(_) => K::Gather,
            P::Sum => K::Sum,
            P::Mean => K::Mean,
            P::SumRows => K::SumRows,
            P::MaskedSelect(_) => K::MaskedSelect,
            P::SliceCols { .. } => K::SliceCols,
            P::ConcatCols => K::ConcatCols,
            P::Clamp { .. } => K::Clamp,
            P::Minimum => K::Minimum,
        }
    }

    fn name(&self) -> &'static str {
        use PrimitiveKind::*;
        match self.kind() {
            MatMul => "matmul",
            MatMulT => "matmul_t",
            Add => "add",
            Sub => "sub",
            AddRow => "add_row",
            Mul => "mul",
            Scale => "scale",
            LayerNorm => "layer_norm",
            Softmax => "softmax",
            CausalSoftmax => "causal_softmax",
            LogSoftmax => "log_softmax",
            Embedding => "embedding",
            Log => "log",
            Exp => "exp",
            Gelu => "gelu",
            Gather => "gather",
            Sum => "sum",
            Mean => "mean",
            SumRows => "sum_rows",
            MaskedSelect => "masked_select",
            SliceCols => "slice_cols",
            ConcatCols => "concat_cols",
            Clamp => "clamp",
            Minimum => "minimum",
        }
    }

    fn arity(&self) -> Option<usize> {
        use Primitive as P;
        match self {
            P::MatMul | P::MatMulT | P::Add | P::Sub | P::AddRow | P::Mul | P::Minimum => Some(2),
            P::LayerNorm => Some(3),
            P::ConcatCols => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
enum Source {
    Leaf(String),
    Constant,
    Op {
        prim: Primitive,
        inputs: Vec<usize>,
        /// Per-row reciprocal std for layer norm.
        aux: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: RealArray,
    source: Source,
}

/// A recording of primitive applications.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &RealArray, b: &RealArray) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn rank2(op: &'static str, a: &RealArray) -> Result<(usize, usize)> {
    if a.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: vec![0, 0],
        });
    }
    Ok((a.shape()[0], a.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: RealArray, source: Source) -> Var {
        self.nodes.push(Node { value, source });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records a trainable array under `name`.
    pub fn leaf(&mut self, name: impl Into<String>, value: RealArray) -> Var {
        self.push(value, Source::Leaf(name.into()))
    }

    /// Records a non-trainable array.
    pub fn constant(&mut self, value: RealArray) -> Var {
        self.push(value, Source::Constant)
    }

    /// Records every entry of `params` as a leaf, returning handles in order.
    pub fn leaves(&mut self, params: &NamedParams) -> Vec<Var> {
        params
            .iter()
            .map(|(name, value)| self.leaf(name, value.clone()))
            .collect()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> Result<&RealArray> {
        let i = self.index(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let a = self.value(v)?;
        if a.shape() != [1] {
            return Err(Error::NotScalar(a.shape().to_vec()));
        }
        Ok(a.data()[0])
    }

    /// Applies `prim` to `inputs`, recording the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = prim.arity() {
            if inputs.len() != n {
                return Err(Error::Arity {
                    op: prim.name(),
                    expected: n,
                    got: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(Error::Arity {
                op: prim.name(),
                expected: 1,
                got: 0,
            });
        }
        let idx: Vec<usize> = inputs
            .iter()
            .map(|&v| self.index(v))
            .collect::<Result<_>>()?;
        let (value, aux) = self.eval(&prim, &idx)?;
        Ok(self.push(
            value,
            Source::Op {
                prim,
                inputs: idx,
                aux,
            },
        ))
    }

    fn eval(&self, prim: &Primitive, idx: &[usize]) -> Result<(RealArray, Vec<f64>)> {
        use Primitive as P;
        let x = &self.nodes[idx[0]].value;
        let second = || &self.nodes[idx[1]].value;
        let out = match prim {
            P::MatMul => {
                let y = second();
                let (m, k) = rank2("matmul", x)?;
                let (k2, n) = rank2("matmul", y)?;
                if k != k2 {
                    return Err(mismatch("matmul", x, y));
                }
                RealArray::new(vec![m, n], kernels::matmul(x.data(), y.data(), m, k, n))?
            }
            P::MatMulT => {
                let y = second();
                let (m, k) = rank2("matmul_t", x)?;
                let (n, k2) = rank2("matmul_t", y)?;
                if k != k2 {
                    return Err(mismatch("matmul_t", x, y));
                }
                RealArray::new(vec![m, n], kernels::matmul_nt(x.data(), y.data(), m, k, n))?
            }
            P::Add | P::Sub | P::Mul | P::Minimum => {
                let y = second();
                if x.shape() != y.shape() {
                    return Err(mismatch(prim.name(), x, y));
                }
                let f: fn(f64, f64) -> f64 = match prim {
                    P::Add => |a, b| a + b,
                    P::Sub => |a, b| a - b,
                    P::Mul => |a, b| a * b,
                    _ => |a, b| if a <= b { a } else { b },
                };
                let data = x.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
                RealArray::new(x.shape().to_vec(), data)?
            }
            P::AddRow => {
                let b = second();
                let (_, n) = x.rows_cols();
                if b.shape() != [n] {
                    return Err(mismatch("add_row", x, b));
                }
                let mut data = x.data().to_vec();
                for row in data.chunks_mut(n) {
                    for (v, bj) in row.iter_mut().zip(b.data()) {
                        *v += bj;
                    }
                }
                RealArray::new(x.shape().to_vec(), data)?
            }
            P::Scale(c) => x.scaled(*c),
            P::LayerNorm => {
                let (m, n) = rank2("layer_norm", x)?;
                let g = second();
                let b = &self.nodes[idx[2]].value;
                if g.shape() != [n] {
                    return Err(mismatch("layer_norm", x, g));
                }
                if b.shape() != [n] {
                    return Err(mismatch("layer_norm", x, b));
                }
                let mut data = vec![0.0; m * n];
                let mut rstd = Vec::with_capacity(m);
                for i in 0..m {
                    rstd.push(kernels::layer_norm_row(
                        &x.data()[i * n..(i + 1) * n],
                        g.data(),
                        b.data(),
                        &mut data[i * n..(i + 1) * n],
                    ));
                }
                return Ok((RealArray::new(vec![m, n], data)?, rstd));
            }
            P::Softmax | P::CausalSoftmax => {
                let (m, n) = x.rows_cols();
                let causal = matches!(prim, P::CausalSoftmax);
                if causal && (x.shape().len() != 2 || m != n) {
                    return Err(mismatch("causal_softmax", x, x));
                }
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let valid = if causal { i + 1 } else { n };
                    kernels::softmax_row(
                        &x.data()[i * n..(i + 1) * n],
                        &mut data[i * n..(i + 1) * n],
                        valid,
                    );
                }
                RealArray::new(x.shape().to_vec(), data)?
            }
            P::LogSoftmax => {
                let (m, n) = x.rows_cols();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    kernels::log_softmax_row(
                        &x.data()[i * n..(i + 1) * n],
                        &mut data[i * n..(i + 1) * n],
                    );
                }
                RealArray::new(x.shape().to_vec(), data)?
            }
            P::Embedding(ids) => {
                let (v, d) = rank2("embedding", x)?;
                if ids.is_empty() {
                    return Err(Error::Invalid("embedding with no ids".into()));
                }
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        return Err(Error::Invalid(format!("token id {id} out of range {v}")));
                    }
                    data.extend_from_slice(&x.data()[id * d..(id + 1) * d]);
                }
                RealArray::new(vec![ids.len(), d], data)?
            }
            P::Log => RealArray::new(x.shape().to_vec(), x.data().iter().map(|v| v.ln()).collect())?,
            P::Exp => RealArray::new(x.shape().to_vec(), x.data().iter().map(|v| v.exp()).collect())?,
            P::Gelu => RealArray::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| kernels::gelu(v)).collect(),
            )?,
            P::Gather(pairs) => {
                let (m, n) = x.rows_cols();
                if pairs.is_empty() {
                    return Err(Error::Invalid("gather with no indices".into()));
                }
                let mut data = Vec::with_capacity(pairs.len());
                for &(r, c) in pairs {
                    if r >= m || c >= n {
                        return Err(Error::Invalid(format!(
                            "gather index ({r},{c}) outside [{m},{n}]"
                        )));
                    }
                    data.push(x.data()[r * n + c]);
                }
                RealArray::from_vec(data)
            }
            P::Sum => RealArray::scalar(x.data().iter().sum()),
            P::Mean => RealArray::scalar(x.data().iter().sum::<f64>() / x.len() as f64),
            P::SumRows => {
                let (m, n) = rank2("sum_rows", x)?;
                let data = (0..m)
                    .map(|i| x.data()[i * n..(i + 1) * n].iter().sum())
                    .collect();
                RealArray::new(vec![m], data)?
            }
            P::MaskedSelect(mask) => {
                if x.shape().len() != 1 || mask.len() != x.len() {
                    return Err(Error::ShapeMismatch {
                        op: "masked_select",
                        left: x.shape().to_vec(),
                        right: vec![mask.len()],
                    });
                }
                let data: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(mask)
                    .filter(|(_, &keep)| keep)
                    .map(|(&v, _)| v)
                    .collect();
                if data.is_empty() {
                    return Err(Error::Invalid("masked_select selected nothing".into()));
                }
                RealArray::from_vec(data)
            }
            P::SliceCols { start, len } => {
                let (m, n) = rank2("slice_cols", x)?;
                if *len == 0 || start + len > n {
                    return Err(Error::Invalid(format!(
                        "slice_cols {start}..{} outside {n} columns",
                        start + len
                    )));
                }
                let mut data = Vec::with_capacity(m * len);
                for i in 0..m {
                    data.extend_from_slice(&x.data()[i * n + start..i * n + start + len]);
                }
                RealArray::new(vec![m, *len], data)?
            }
            P::ConcatCols => {
                let (m, _) = rank2("concat_cols", x)?;
                let mut widths = Vec::with_capacity(idx.len());
                for &i in idx {
                    let a = &self.nodes[i].value;
                    let (mi, ni) = rank2("concat_cols", a)?;
                    if mi != m {
                        return Err(mismatch("concat_cols", x, a));
                    }
                    widths.push(ni);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(m * total);
                for r in 0..m {
                    for (&i, &w) in idx.iter().zip(&widths) {
                        data.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
                    }
                }
                RealArray::new(vec![m, total], data)?
            }
            P::Clamp { lo, hi } => RealArray::new(
                x.shape().to_vec(),
                x.data().iter().map(|v| v.clamp(*lo, *hi)).collect(),
            )?,
        };
        Ok((out, Vec::new()))
    }

    /// Gradients of `loss` with respect to every leaf, in leaf order.
    /// Leaves with no path to the loss get zero arrays.
    pub fn backward(&self, loss: Var) -> Result<NamedParams> {
        let li = self.index(loss)?;
        let lv = &self.nodes[li].value;
        if lv.shape() != [1] {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.source {
                Source::Leaf(_) => {
                    grads[i] = Some(g);
                }
                Source::Constant => {}
                Source::Op { prim, inputs, aux } => {
                    self.backprop(prim, inputs, aux, &node.value, &g, &mut grads);
                }
            }
        }

        let mut out = NamedParams::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Source::Leaf(name) = &node.source {
                let shape = node.value.shape().to_vec();
                let grad = match grads.get_mut(i).and_then(Option::take) {
                    Some(data) => RealArray::new(shape, data)?,
                    None => RealArray::zeros(&shape),
                };
                out.insert(name.clone(), grad);
            }
        }
        Ok(out)
    }

    fn backprop(
        &self,
        prim: &Primitive,
        inputs: &[usize],
        aux: &[f64],
        out: &RealArray,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        use Primitive as P;
        let val = |k: usize| &self.nodes[inputs[k]].value;
        macro_rules! grad {
            ($k:expr) => {
                slot(grads, inputs[$k], self.nodes[inputs[$k]].value.len())
            };
        }
        match prim {
            P::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let da = kernels::matmul_nt(g, b.data(), m, n, k);
                add_into(grad!(0), &da);
                kernels::matmul_tn_acc(grad!(1), a.data(), g, m, k, n);
            }
            P::MatMulT => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[0];
                let da = kernels::matmul(g, b.data(), m, n, k);
                add_into(grad!(0), &da);
                kernels::matmul_tn_acc(grad!(1), g, a.data(), m, n, k);
            }
            P::Add => {
                add_into(grad!(0), g);
                add_into(grad!(1), g);
            }
            P::Sub => {
                add_into(grad!(0), g);
                let gb = grad!(1);
                for (d, v) in gb.iter_mut().zip(g) {
                    *d -= v;
                }
            }
            P::AddRow => {
                add_into(grad!(0), g);
                let n = val(1).len();
                let gb = grad!(1);
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
            P::Mul => {
                let (a, b) = (val(0).data(), val(1).data());
                let ga = grad!(0);
                for ((d, gi), bi) in ga.iter_mut().zip(g).zip(b) {
                    *d += gi * bi;
                }
                let gb = grad!(1);
                for ((d, gi), ai) in gb.iter_mut().zip(g).zip(a) {
                    *d += gi * ai;
                }
            }
            P::Minimum => {
                let (a, b) = (val(0).data(), val(1).data());
                let ga = grad!(0);
                for ((d, gi), (ai, bi)) in ga.iter_mut().zip(g).zip(a.iter().zip(b)) {
                    if ai <= bi {
                        *d += gi;
                    }
                }
                let gb = grad!(1);
                for ((d, gi), (ai, bi)) in gb.iter_mut().zip(g).zip(a.iter().zip(b)) {
                    if ai > bi {
                        *d += gi;
                    }
                }
            }
            P::Scale(c) => {
                for (d, gi) in grad!(0).iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            P::LayerNorm => {
                let x = val(0);
                let gain = val(1).data().to_vec();
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for i in 0..m {
                    let row = &x.data()[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let rstd = aux[i];
                    let gr = &g[i * n..(i + 1) * n];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gain[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        dx[i * n + j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                add_into(grad!(0), &dx);
                add_into(grad!(1), &dgain);
                add_into(grad!(2), &dbias);
            }
            P::Softmax | P::CausalSoftmax => {
                let (_, n) = out.rows_cols();
                let y = out.data();
                let gx = grad!(0);
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = kernels::dot(yr, gr);
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            P::LogSoftmax => {
                let (_, n) = out.rows_cols();
                let y = out.data();
                let gx = grad!(0);
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] += gr[j] - yr[j].exp() * s;
                    }
                }
            }
            P::Embedding(ids) => {
                let d = val(0).shape()[1];
                let gt = grad!(0);
                for (t, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[t * d..(t + 1) * d]);
                }
            }
            P::Log => {
                let x = val(0).data();
                for ((d, gi), xi) in grad!(0).iter_mut().zip(g).zip(x) {
                    *d += gi / xi;
                }
            }
            P::Exp => {
                for ((d, gi), yi) in grad!(0).iter_mut().zip(g).zip(out.data()) {
                    *d += gi * yi;
                }
            }
            P::Gelu => {
                let x = val(0).data();
                for ((d, gi), &xi) in grad!(0).iter_mut().zip(g).zip(x) {
                    *d += gi * kernels::gelu_grad(xi);
                }
            }
            P::Gather(pairs) => {
                let (_, n) = val(0).rows_cols();
                let gx = grad!(0);
                for (&(r, c), gi) in pairs.iter().zip(g) {
                    gx[r * n + c] += gi;
                }
            }
            P::Sum => {
                for d in grad!(0).iter_mut() {
                    *d += g[0];
                }
            }
            P::Mean => {
                let n = val(0).len() as f64;
                for d in grad!(0).iter_mut() {
                    *d += g[0] / n;
                }
            }
            P::SumRows => {
                let n = val(0).shape()[1];
                for (row, gi) in grad!(0).chunks_mut(n).zip(g) {
                    for d in row {
                        *d += gi;
                    }
                }
            }
            P::MaskedSelect(mask) => {
                let gx = grad!(0);
                let mut k = 0;
                for (d, &keep) in gx.iter_mut().zip(mask) {
                    if keep {
                        *d += g[k];
                        k += 1;
                    }
                }
            }
            P::SliceCols { start, len } => {
                let n = val(0).shape()[1];
                let gx = grad!(0);
                for (i, gr) in g.chunks(*len).enumerate() {
                    add_into(&mut gx[i * n + start..i * n + start + len], gr);
                }
            }
            P::ConcatCols => {
                let total = out.shape()[1];
                let mut offset = 0;
                for k in 0..inputs.len() {
                    let w = val(k).shape()[1];
                    let gx = grad!(k);
                    for (i, row) in gx.chunks_mut(w).enumerate() {
                        add_into(row, &g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                }
            }
            P::Clamp { lo, hi } => {
                let x = val(0).data();
                for ((d, gi), xi) in grad!(0).iter_mut().zip(g).zip(x) {
                    if *xi >= *lo && *xi <= *hi {
                        *d += gi;
                    }
                }
            }
        }
    }

    // Convenience wrappers; each forwards to `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMulT, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddRow, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.apply(Primitive::LayerNorm, &[x, gain, bias])
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::CausalSoftmax, &[x])
    }
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[x])
    }
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(Primitive::Embedding(ids.to_vec()), &[table])
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[x])
    }
    pub fn gather(&mut self, x: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        self.apply(Primitive::Gather(pairs), &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::SumRows, &[x])
    }
    pub fn masked_select(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        self.apply(Primitive::MaskedSelect(mask), &[x])
    }
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::SliceCols { start, len }, &[x])
    }
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatCols, xs)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[x])
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Minimum, &[a, b])
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, n: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
