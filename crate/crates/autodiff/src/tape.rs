//! Define-by-run reverse-mode tape.
//!
//! Every forward operation pushes a node holding its value and the inputs
//! needed for the vector-Jacobian product. `backward` walks the nodes in
//! exact reverse recording order.

use std::collections::{BTreeMap, HashMap};

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise and dense kinds accepted by [`Tape::apply_dense`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DenseKind {
    Add,
    Sub,
    Mul,
    Matmul,
    ConcatLast,
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Scale(f64),
}

/// Row-indexed kernels accepted by [`Tape::segment_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    GatherRows,
    ScatterAddRows,
    SegmentMax,
}

/// Reductions accepted by [`Tape::reduce`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    Softmax { temperature: f64 },
    LogSumExp,
    Mean,
    Std,
    Sum,
}

/// Edge list for [`Tape::edge_message_sum`]: edge `e` carries
/// `alpha[e] * (h[src[e]] + rel[rel_idx[e]])` into row `dst[e]`.
#[derive(Clone, Debug, Default)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub rel: Vec<usize>,
    pub dst: Vec<usize>,
    pub out_rows: usize,
}

impl EdgeIndex {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    MatVec(Var, Var),
    Concat(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Stack(Vec<Var>),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    NormalCdf(Var),
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    ScatterAdd {
        src: Var,
        idx: Vec<usize>,
    },
    SegmentMax {
        src: Var,
        arg: Vec<Option<usize>>,
    },
    Softmax {
        x: Var,
        temperature: f64,
    },
    LogSumExp(Var),
    CosineRows {
        m: Var,
        v: Var,
    },
    Mean(Var),
    MeanRows(Var),
    Std(Var),
    Sum(Var),
    EdgeMessage {
        h: Var,
        rel: Var,
        alpha: Var,
        edges: EdgeIndex,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn check_indices(op: &'static str, idx: &[usize], size: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= size) {
        Some(&index) => Err(AutodiffError::IndexOutOfRange { op, index, size }),
        None => Ok(()),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input. Gradients reaching it are discarded.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Registers a named parameter. Repeated calls with the same name return
    /// the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    // ---- element-wise ------------------------------------------------------

    fn binary_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b)))
    }

    /// `x[i, :] + b` for every row of a rank-2 `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 2 || tb.len() != tx.shape()[1] {
            return Err(mismatch("add_row", tx, tb));
        }
        let w = tx.shape()[1];
        let bias = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % w])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, b)))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(mismatch("mul_scalar", self.value(x), ts));
        }
        let k = ts.data()[0];
        let t = self.unary(x, |v| v * k);
        Ok(self.push(t, Op::MulScalar(x, s)))
    }

    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(mismatch("div_scalar", self.value(x), ts));
        }
        let k = ts.data()[0];
        let t = self.unary(x, |v| v / k);
        Ok(self.push(t, Op::DivScalar(x, s)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.unary(x, |v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let t = self.unary(x, |v| v + c);
        self.push(t, Op::AddConst(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.unary(x, sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.unary(x, softplus);
        self.push(t, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.unary(x, f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.unary(x, f64::ln);
        self.push(t, Op::Log(x))
    }

    /// Standard normal CDF, element-wise.
    pub fn normal_cdf(&mut self, x: Var) -> Var {
        let t = self.unary(x, normal_cdf);
        self.push(t, Op::NormalCdf(x))
    }

    // ---- dense linear algebra ---------------------------------------------

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::Matmul(a, b)))
    }

    /// `a · bᵀ` with `a: [n, k]`, `b: [m, k]` giving `[n, m]`. This is the
    /// layout used for weights stored as `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = ta.row(i);
            for j in 0..m {
                let brow = tb.row(j);
                let mut acc = 0.0;
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out[i * m + j] = acc;
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::MatmulNt(a, b)))
    }

    /// `[n, d] · [d] -> [n]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.rank() != 2 || tv.len() != tm.shape()[1] {
            return Err(mismatch("matvec", tm, tv));
        }
        let vd = tv.data();
        let out = (0..tm.shape()[0])
            .map(|i| {
                let mut acc = 0.0;
                for (a, b) in tm.row(i).iter().zip(vd) {
                    acc += a * b;
                }
                acc
            })
            .collect();
        let t = Tensor::vector(out);
        Ok(self.push(t, Op::MatVec(m, v)))
    }

    /// Concatenates along the last axis; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(
            *parts
                .first()
                .ok_or_else(|| AutodiffError::InvalidArgument("concat of zero tensors".into()))?,
        );
        let lead = &first.shape()[..first.rank().saturating_sub(1)];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != first.rank() || t.rank() == 0 || &t.shape()[..t.rank() - 1] != lead {
                return Err(mismatch("concat", first, t));
            }
            widths.push(*t.shape().last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let w = *tx.shape().last().unwrap_or(&0);
        if start + len > w {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_last",
                index: start + len,
                size: w,
            });
        }
        let rows = tx.len() / w.max(1);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SliceLast { x, start }))
    }

    /// Stacks one-element tensors into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            out.push(self.value(p).item()?);
        }
        Ok(self.push(Tensor::vector(out), Op::Stack(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    // ---- row-indexed kernels -----------------------------------------------

    pub fn gather_rows(&mut self, data: Var, idx: Vec<usize>) -> Result<Var> {
        let td = self.value(data);
        check_indices("gather_rows", &idx, td.rows())?;
        let w = td.row_width();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in &idx {
            out.extend_from_slice(td.row(i));
        }
        let mut shape = td.shape().to_vec();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Gather { src: data, idx }))
    }

    pub fn scatter_add_rows(&mut self, data: Var, idx: Vec<usize>, out_size: usize) -> Result<Var> {
        let td = self.value(data);
        if idx.len() != td.rows() {
            return Err(AutodiffError::InvalidArgument(format!(
                "scatter_add_rows: {} indices for {} rows",
                idx.len(),
                td.rows()
            )));
        }
        check_indices("scatter_add_rows", &idx, out_size)?;
        let w = td.row_width();
        let mut out = vec![0.0; out_size * w];
        for (r, &i) in idx.iter().enumerate() {
            add_into(&mut out[i * w..(i + 1) * w], td.row(r));
        }
        let mut shape = td.shape().to_vec();
        shape[0] = out_size;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ScatterAdd { src: data, idx }))
    }

    /// Per-segment, per-column maximum. Empty segments produce 0 and pass no
    /// gradient.
    pub fn segment_max(&mut self, data: Var, idx: Vec<usize>, out_size: usize) -> Result<Var> {
        let td = self.value(data);
        if idx.len() != td.rows() {
            return Err(AutodiffError::InvalidArgument(format!(
                "segment_max: {} indices for {} rows",
                idx.len(),
                td.rows()
            )));
        }
        check_indices("segment_max", &idx, out_size)?;
        let w = td.row_width();
        let mut arg: Vec<Option<usize>> = vec![None; out_size * w];
        let dd = td.data();
        for (r, &seg) in idx.iter().enumerate() {
            for c in 0..w {
                let slot = &mut arg[seg * w + c];
                let v = dd[r * w + c];
                match slot {
                    Some(best) if dd[*best] >= v => {}
                    _ => *slot = Some(r * w + c),
                }
            }
        }
        let out = arg.iter().map(|a| a.map_or(0.0, |i| dd[i])).collect();
        let mut shape = td.shape().to_vec();
        shape[0] = out_size;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SegmentMax { src: data, arg }))
    }

    /// Sum over edges of `alpha[e] * (h[src[e]] + rel[rel[e]])` into
    /// `dst[e]`. Equivalent to gather, add, scale and scatter-add, without
    /// materialising per-edge rows.
    pub fn edge_message_sum(
        &mut self,
        h: Var,
        rel: Var,
        alpha: Var,
        edges: EdgeIndex,
    ) -> Result<Var> {
        let (th, tr, ta) = (self.value(h), self.value(rel), self.value(alpha));
        if th.rank() != 2 || tr.rank() != 2 || th.shape()[1] != tr.shape()[1] {
            return Err(mismatch("edge_message_sum", th, tr));
        }
        if ta.len() != edges.len()
            || edges.rel.len() != edges.len()
            || edges.dst.len() != edges.len()
        {
            return Err(AutodiffError::InvalidArgument(format!(
                "edge_message_sum: {} attention values for {} edges",
                ta.len(),
                edges.len()
            )));
        }
        check_indices("edge_message_sum", &edges.src, th.rows())?;
        check_indices("edge_message_sum", &edges.rel, tr.rows())?;
        check_indices("edge_message_sum", &edges.dst, edges.out_rows)?;
        let d = th.shape()[1];
        let mut out = vec![0.0; edges.out_rows * d];
        let (hd, rd, ad) = (th.data(), tr.data(), ta.data());
        for e in 0..edges.len() {
            let a = ad[e];
            let hs = &hd[edges.src[e] * d..(edges.src[e] + 1) * d];
            let rs = &rd[edges.rel[e] * d..(edges.rel[e] + 1) * d];
            let o = &mut out[edges.dst[e] * d..(edges.dst[e] + 1) * d];
            for j in 0..d {
                o[j] += a * (hs[j] + rs[j]);
            }
        }
        let t = Tensor::new(vec![edges.out_rows, d], out)?;
        Ok(self.push(
            t,
            Op::EdgeMessage {
                h,
                rel,
                alpha,
                edges,
            },
        ))
    }

    // ---- reductions --------------------------------------------------------

    /// Softmax of a rank-1 tensor with temperature.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(AutodiffError::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let tx = self.value(x);
        let m = tx.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = tx
            .data()
            .iter()
            .map(|v| ((v - m) / temperature).exp())
            .collect();
        let s: f64 = e.iter().sum();
        let t = Tensor::new(tx.shape().to_vec(), e.iter().map(|v| v / s).collect())?;
        Ok(self.push(t, Op::Softmax { x, temperature }))
    }

    pub fn logsumexp(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let v = logsumexp(tx.data());
        self.push(Tensor::scalar(v), Op::LogSumExp(x))
    }

    /// Cosine similarity between each row of `m: [n, d]` and `v: [d]`.
    pub fn cosine_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.rank() != 2 || tv.len() != tm.shape()[1] {
            return Err(mismatch("cosine_rows", tm, tv));
        }
        let vn = norm(tv.data());
        if vn == 0.0 {
            return Err(AutodiffError::ZeroNorm);
        }
        let mut out = Vec::with_capacity(tm.shape()[0]);
        for i in 0..tm.shape()[0] {
            let row = tm.row(i);
            let rn = norm(row);
            if rn == 0.0 {
                return Err(AutodiffError::ZeroNorm);
            }
            out.push(dot(row, tv.data()) / (rn * vn));
        }
        Ok(self.push(Tensor::vector(out), Op::CosineRows { m, v }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let v = tx.data().iter().sum::<f64>() / tx.len() as f64;
        self.push(Tensor::scalar(v), Op::Mean(x))
    }

    /// Column means of a rank-2 tensor: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape()[0] == 0 {
            return Err(AutodiffError::InvalidArgument(format!(
                "mean_rows needs a non-empty matrix, got {:?}",
                tx.shape()
            )));
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; d];
        for i in 0..n {
            add_into(&mut out, tx.row(i));
        }
        for v in &mut out {
            *v /= n as f64;
        }
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x)))
    }

    /// Population standard deviation over all elements.
    pub fn std(&mut self, x: Var) -> Var {
        let v = population_std(self.value(x).data());
        self.push(Tensor::scalar(v), Op::Std(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(x))
    }

    // ---- kind-dispatching entry points ---------------------------------------

    pub fn apply_dense(&mut self, kind: DenseKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::InvalidArgument(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            DenseKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            DenseKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            DenseKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            DenseKind::Matmul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            DenseKind::ConcatLast => self.concat(inputs),
            DenseKind::Relu => arity(1).map(|_| self.relu(inputs[0])),
            DenseKind::Sigmoid => arity(1).map(|_| self.sigmoid(inputs[0])),
            DenseKind::Softplus => arity(1).map(|_| self.softplus(inputs[0])),
            DenseKind::Exp => arity(1).map(|_| self.exp(inputs[0])),
            DenseKind::Log => arity(1).map(|_| self.log(inputs[0])),
            DenseKind::Scale(c) => arity(1).map(|_| self.scale(inputs[0], c)),
        }
    }

    pub fn segment_op(
        &mut self,
        kind: SegmentKind,
        data: Var,
        idx: Vec<usize>,
        out_size: usize,
    ) -> Result<Var> {
        match kind {
            SegmentKind::GatherRows => self.gather_rows(data, idx),
            SegmentKind::ScatterAddRows => self.scatter_add_rows(data, idx, out_size),
            SegmentKind::SegmentMax => self.segment_max(data, idx, out_size),
        }
    }

    pub fn reduce(&mut self, kind: Reduction, x: Var) -> Result<Var> {
        match kind {
            Reduction::Softmax { temperature } => self.softmax(x, temperature),
            Reduction::LogSumExp => Ok(self.logsumexp(x)),
            Reduction::Mean => Ok(self.mean(x)),
            Reduction::Std => Ok(self.std(x)),
            Reduction::Sum => Ok(self.sum(x)),
        }
    }

    // ---- backward ------------------------------------------------------------

    /// Gradients of `loss` for every node, indexed by node id. Nodes that the
    /// loss does not depend on get `None`.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let tl = self.value(loss);
        if tl.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(tl.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Gradients of a scalar loss with respect to every parameter in `store`.
    /// Parameters that were never registered on this tape, or that the loss
    /// does not reach, get a zero gradient.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.gradients(loss)?;
        let mut out = BTreeMap::new();
        for (name, value) in store.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|v| grads[v.0].clone())
                .unwrap_or_else(|| vec![0.0; value.len()]);
            out.insert(name.to_string(), Tensor::new(value.shape().to_vec(), g)?);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, delta: &dyn Fn(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            delta(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / bv[k];
                    }
                });
                acc(*b, &|s| {
                    for k in 0..s.len() {
                        s[k] -= g[k] * out[k] / bv[k];
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &|s| add_into(s, g));
                let w = self.value(*b).len();
                acc(*b, &|s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k % w] += gv;
                    }
                });
            }
            Op::MulScalar(x, sc) => {
                let k = self.value(*sc).data()[0];
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    s.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * k)
                });
                acc(*sc, &|s| {
                    s[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
                });
            }
            Op::DivScalar(x, sc) => {
                let k = self.value(*sc).data()[0];
                acc(*x, &|s| {
                    s.iter_mut().zip(g).for_each(|(d, gv)| *d += gv / k)
                });
                acc(*sc, &|s| {
                    s[0] -= g.iter().zip(out).map(|(a, b)| a * b).sum::<f64>() / k
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| {
                s.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * c)
            }),
            Op::AddConst(x) | Op::Reshape(x) => acc(*x, &|s| add_into(s, g)),
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (ad, bd) = (ta.data(), tb.data());
                // dA = G · Bᵀ
                acc(*a, &|s| {
                    for r in 0..n {
                        for p in 0..k {
                            let mut t = 0.0;
                            for j in 0..m {
                                t += g[r * m + j] * bd[p * m + j];
                            }
                            s[r * k + p] += t;
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &|s| {
                    for r in 0..n {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                s[p * m + j] += av * g[r * m + j];
                            }
                        }
                    }
                });
            }
            Op::MatmulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                let (ad, bd) = (ta.data(), tb.data());
                // out[i,j] = Σ_p a[i,p] b[j,p]
                acc(*a, &|s| {
                    for r in 0..n {
                        for j in 0..m {
                            let gv = g[r * m + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                s[r * k + p] += gv * bd[j * k + p];
                            }
                        }
                    }
                });
                acc(*b, &|s| {
                    for r in 0..n {
                        for j in 0..m {
                            let gv = g[r * m + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                s[j * k + p] += gv * ad[r * k + p];
                            }
                        }
                    }
                });
            }
            Op::MatVec(mat, v) => {
                let (tm, tv) = (self.value(*mat), self.value(*v));
                let d = tv.len();
                let (md, vd) = (tm.data(), tv.data());
                acc(*mat, &|s| {
                    for (r, gv) in g.iter().enumerate() {
                        for p in 0..d {
                            s[r * d + p] += gv * vd[p];
                        }
                    }
                });
                acc(*v, &|s| {
                    for (r, gv) in g.iter().enumerate() {
                        for p in 0..d {
                            s[p] += gv * md[r * d + p];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = *self.value(p).shape().last().unwrap();
                    acc(p, &|s| {
                        for r in 0..rows {
                            add_into(
                                &mut s[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let w_in = *self.value(*x).shape().last().unwrap();
                let w = *node.value.shape().last().unwrap();
                let rows = node.value.len() / w.max(1);
                acc(*x, &|s| {
                    for r in 0..rows {
                        add_into(
                            &mut s[r * w_in + start..r * w_in + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::Stack(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    acc(p, &|s| s[0] += g[k]);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    for k in 0..s.len() {
                        if xv[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &|s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * sigmoid(xv[k]);
                    }
                });
            }
            Op::Exp(x) => acc(*x, &|s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k];
                }
            }),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / xv[k];
                    }
                });
            }
            Op::NormalCdf(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * normal_pdf(xv[k]);
                    }
                });
            }
            Op::Gather { src, idx } => {
                let w = self.value(*src).row_width();
                acc(*src, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ScatterAdd { src, idx } => {
                let w = self.value(*src).row_width();
                acc(*src, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[r * w..(r + 1) * w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::SegmentMax { src, arg } => acc(*src, &|s| {
                for (k, a) in arg.iter().enumerate() {
                    if let Some(j) = a {
                        s[*j] += g[k];
                    }
                }
            }),
            Op::EdgeMessage {
                h,
                rel,
                alpha,
                edges,
            } => {
                let (th, tr, ta) = (self.value(*h), self.value(*rel), self.value(*alpha));
                let d = th.shape()[1];
                let (hd, rd, ad) = (th.data(), tr.data(), ta.data());
                acc(*alpha, &|s| {
                    for e in 0..edges.len() {
                        let gs = &g[edges.dst[e] * d..(edges.dst[e] + 1) * d];
                        let hs = &hd[edges.src[e] * d..(edges.src[e] + 1) * d];
                        let rs = &rd[edges.rel[e] * d..(edges.rel[e] + 1) * d];
                        let mut t = 0.0;
                        for j in 0..d {
                            t += gs[j] * (hs[j] + rs[j]);
                        }
                        s[e] += t;
                    }
                });
                acc(*h, &|s| spread_edges(s, g, ad, &edges.src, &edges.dst, d));
                acc(*rel, &|s| spread_edges(s, g, ad, &edges.rel, &edges.dst, d));
            }
            Op::Softmax { x, temperature } => acc(*x, &|s| {
                let dotp: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                for k in 0..s.len() {
                    s[k] += out[k] * (g[k] - dotp) / temperature;
                }
            }),
            Op::LogSumExp(x) => {
                let xv = self.value(*x).data();
                let l = out[0];
                acc(*x, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[0] * (xv[k] - l).exp();
                    }
                });
            }
            Op::CosineRows { m, v } => {
                let (tm, tv) = (self.value(*m), self.value(*v));
                let d = tv.len();
                let vd = tv.data();
                let vn = norm(vd);
                let mut dm = vec![0.0; tm.len()];
                let mut dv = vec![0.0; d];
                for r in 0..tm.shape()[0] {
                    let row = tm.row(r);
                    let rn = norm(row);
                    let c = out[r];
                    for p in 0..d {
                        dm[r * d + p] += g[r] * (vd[p] / (rn * vn) - c * row[p] / (rn * rn));
                        dv[p] += g[r] * (row[p] / (rn * vn) - c * vd[p] / (vn * vn));
                    }
                }
                acc(*m, &|s| add_into(s, &dm));
                acc(*v, &|s| add_into(s, &dv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &|s| s.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (n, d) = (tx.shape()[0], tx.shape()[1]);
                acc(*x, &|s| {
                    for r in 0..n {
                        for p in 0..d {
                            s[r * d + p] += g[p] / n as f64;
                        }
                    }
                });
            }
            Op::Std(x) => {
                let xv = self.value(*x).data();
                let n = xv.len() as f64;
                let mu = xv.iter().sum::<f64>() / n;
                let sd = out[0];
                if sd > 0.0 {
                    acc(*x, &|s| {
                        for k in 0..s.len() {
                            s[k] += g[0] * (xv[k] - mu) / (n * sd);
                        }
                    });
                }
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|d| *d += g[0])),
        }
    }
}

/// `s[index[e]] += alpha[e] * g[dst[e]]` row-wise.
fn spread_edges(s: &mut [f64], g: &[f64], alpha: &[f64], index: &[usize], dst: &[usize], d: usize) {
    for e in 0..index.len() {
        let a = alpha[e];
        let gs = &g[dst[e] * d..(dst[e] + 1) * d];
        let o = &mut s[index[e] * d..(index[e] + 1) * d];
        for j in 0..d {
            o[j] += a * gs[j];
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Stable `log Σ exp(x)`; `-inf` for an empty slice.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt()
}
