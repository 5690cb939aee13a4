use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeom};
use super::{lit, Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    AddRow(usize, usize),
    LayerNorm { x: usize, gain: usize, bias: usize, eps: F },
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Conv1d { x: usize, w: usize, geom: ConvGeom },
    PadLast { x: usize, left: usize, right: usize },
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows { x: usize, index: Vec<usize> },
    ReplaceRows { x: usize, row: usize, index: Vec<usize> },
    Sum(usize),
    SumLast(usize),
    MeanRows(usize),
    Square(usize),
    Sqrt(usize),
    XLogX(usize),
    NormalizeRows { x: usize, eps: F },
    Reshape(usize),
    StraightThrough(usize),
    Ctc { x: usize, ext: Vec<usize> },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// The tape. Nodes are appended in evaluation order, so node ids are already
/// a topological order and the backward sweep simply walks them in reverse.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Tensor<F> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a single-element output.
    pub fn backward(&self, output: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must be a scalar, got shape {:?}", nodes[output.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![F::one()]);
        for id in (0..=output.id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backward_node(&nodes, id, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        Ok(Gradients { shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(), grads })
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Vec<F>>], nodes: &[Node<F>], id: usize, g: Vec<F>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[allow(clippy::needless_range_loop)]
fn backward_node<F: Float>(
    nodes: &[Node<F>],
    id: usize,
    dy: &[F],
    grads: &mut [Option<Vec<F>>],
) -> Result<()> {
    let node = &nodes[id];
    let val = |i: usize| nodes[i].value.data();
    let shape = |i: usize| nodes[i].value.shape();
    let req = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            if req(*a) {
                let g = kernels::matmul_bt(dy, val(*b), m, n, k);
                accumulate(grads, nodes, *a, g);
            }
            if req(*b) {
                let g = kernels::matmul_at(val(*a), dy, m, k, n);
                accumulate(grads, nodes, *b, g);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (shape(*a)[0], shape(*a)[1]);
            accumulate(grads, nodes, *a, kernels::transpose(dy, c, r));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, dy.to_vec());
            accumulate(grads, nodes, *b, dy.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, dy.to_vec());
            accumulate(grads, nodes, *b, dy.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            if req(*a) {
                accumulate(grads, nodes, *a, dy.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect());
            }
            if req(*b) {
                accumulate(grads, nodes, *b, dy.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect());
            }
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, dy.iter().map(|&v| v * *c).collect());
        }
        Op::AddRow(x, b) => {
            accumulate(grads, nodes, *x, dy.to_vec());
            if req(*b) {
                let d = nodes[*b].value.len();
                let mut gb = vec![F::zero(); d];
                for row in dy.chunks_exact(d) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let d = nodes[*gain].value.len();
            let (dx, dg, db) = kernels::layer_norm_backward(dy, val(*x), val(*gain), d, *eps);
            accumulate(grads, nodes, *x, dx);
            accumulate(grads, nodes, *gain, dg);
            accumulate(grads, nodes, *bias, db);
        }
        Op::Gelu(x) => {
            let g = dy.iter().zip(val(*x)).map(|(&d, &v)| d * kernels::gelu_grad(v)).collect();
            accumulate(grads, nodes, *x, g);
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let d = *shape(*x).last().expect("rank ≥ 1");
            let mut g = vec![F::zero(); y.len()];
            for ((yr, dr), gr) in y.chunks_exact(d).zip(dy.chunks_exact(d)).zip(g.chunks_exact_mut(d)) {
                let s = kernels::dot(yr, dr);
                for i in 0..d {
                    gr[i] = yr[i] * (dr[i] - s);
                }
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::LogSoftmax(x) => {
            let y = node.value.data();
            let d = *shape(*x).last().expect("rank ≥ 1");
            let mut g = vec![F::zero(); y.len()];
            for ((yr, dr), gr) in y.chunks_exact(d).zip(dy.chunks_exact(d)).zip(g.chunks_exact_mut(d)) {
                let s: F = dr.iter().copied().sum();
                for i in 0..d {
                    gr[i] = dr[i] - yr[i].exp() * s;
                }
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::Conv1d { x, w, geom } => {
            if req(*x) {
                accumulate(grads, nodes, *x, kernels::conv1d_backward_input(dy, val(*w), geom));
            }
            if req(*w) {
                accumulate(grads, nodes, *w, kernels::conv1d_backward_weight(dy, val(*x), geom));
            }
        }
        Op::PadLast { x, left, right } => {
            let t_in = *shape(*x).last().expect("rank ≥ 1");
            let t_out = t_in + left + right;
            let mut g = Vec::with_capacity(nodes[*x].value.len());
            for row in dy.chunks_exact(t_out) {
                g.extend_from_slice(&row[*left..*left + t_in]);
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::SliceCols { x, start } => {
            let (rows, cols) = (shape(*x)[0], shape(*x)[1]);
            let width = node.value.shape()[1];
            let mut g = vec![F::zero(); rows * cols];
            for r in 0..rows {
                g[r * cols + start..r * cols + start + width].copy_from_slice(&dy[r * width..(r + 1) * width]);
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::SliceRows { x, start } => {
            let cols = shape(*x)[1];
            let mut g = vec![F::zero(); nodes[*x].value.len()];
            g[start * cols..start * cols + dy.len()].copy_from_slice(dy);
            accumulate(grads, nodes, *x, g);
        }
        Op::ConcatCols(parts) => {
            let total = node.value.shape()[1];
            let rows = node.value.shape()[0];
            let mut offset = 0;
            for &p in parts {
                let w = shape(p)[1];
                if req(p) {
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        g.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, nodes, p, g);
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                accumulate(grads, nodes, p, dy[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::GatherRows { x, index } => {
            let cols = shape(*x)[1];
            let mut g = vec![F::zero(); nodes[*x].value.len()];
            for (i, &src) in index.iter().enumerate() {
                for c in 0..cols {
                    g[src * cols + c] += dy[i * cols + c];
                }
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::ReplaceRows { x, row, index } => {
            let cols = shape(*x)[1];
            let mut gx = dy.to_vec();
            let mut gr = vec![F::zero(); cols];
            for &i in index {
                for c in 0..cols {
                    gr[c] += dy[i * cols + c];
                    gx[i * cols + c] = F::zero();
                }
            }
            accumulate(grads, nodes, *x, gx);
            accumulate(grads, nodes, *row, gr);
        }
        Op::Sum(x) => {
            accumulate(grads, nodes, *x, vec![dy[0]; nodes[*x].value.len()]);
        }
        Op::SumLast(x) => {
            let d = *shape(*x).last().expect("rank ≥ 1");
            let mut g = Vec::with_capacity(nodes[*x].value.len());
            for &v in dy {
                g.extend(std::iter::repeat(v).take(d));
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::MeanRows(x) => {
            let (rows, cols) = (shape(*x)[0], shape(*x)[1]);
            let inv = F::one() / F::from_f64(rows as f64);
            let mut g = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                g.extend(dy.iter().map(|&v| v * inv));
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::Square(x) => {
            let g = dy.iter().zip(val(*x)).map(|(&d, &v)| d * v * lit(2.0)).collect();
            accumulate(grads, nodes, *x, g);
        }
        Op::Sqrt(x) => {
            let y = node.value.data();
            let g = dy
                .iter()
                .zip(y)
                .map(|(&d, &s)| if s > F::zero() { d * lit::<F>(0.5) / s } else { F::zero() })
                .collect();
            accumulate(grads, nodes, *x, g);
        }
        Op::XLogX(x) => {
            let g = dy
                .iter()
                .zip(val(*x))
                .map(|(&d, &v)| if v > F::zero() { d * (v.ln() + F::one()) } else { F::zero() })
                .collect();
            accumulate(grads, nodes, *x, g);
        }
        Op::NormalizeRows { x, eps } => {
            let d = *shape(*x).last().expect("rank ≥ 1");
            let y = node.value.data();
            let mut g = vec![F::zero(); y.len()];
            for (((xr, yr), dr), gr) in
                val(*x).chunks_exact(d).zip(y.chunks_exact(d)).zip(dy.chunks_exact(d)).zip(g.chunks_exact_mut(d))
            {
                let norm = kernels::dot(xr, xr).sqrt();
                if norm > *eps {
                    let proj = kernels::dot(yr, dr);
                    for i in 0..d {
                        gr[i] = (dr[i] - yr[i] * proj) / norm;
                    }
                } else {
                    for i in 0..d {
                        gr[i] = dr[i] / *eps;
                    }
                }
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::Reshape(x) | Op::StraightThrough(x) => {
            accumulate(grads, nodes, *x, dy.to_vec());
        }
        Op::Ctc { x, ext } => {
            let (t, v) = (shape(*x)[0], shape(*x)[1]);
            let g = kernels::ctc_grad(val(*x), t, v, ext);
            accumulate(grads, nodes, *x, g.into_iter().map(|e| e * dy[0]).collect());
        }
    }
    Ok(())
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<F> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient for a node, or `None` when the node does not depend on any
    /// differentiable leaf (nothing was materialized for it).
    pub fn get(&self, v: Var<'_, F>) -> Option<Tensor<F>> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.id].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for a node, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_, F>) -> Tensor<F> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }

    /// Count of materialized gradient buffers.
    pub fn materialized(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl<'g, F: Float> Var<'g, F> {
    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<F> {
        self.graph.value(self.id)
    }

    /// Borrow of the stored value without cloning the handle.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<F>>> = self.graph.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn unary(&self, value: Tensor<F>, op: Op<F>) -> Var<'g, F> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'g, F>, value: Tensor<F>, op: Op<F>) -> Var<'g, F> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        self.with_value(|t| t.dims2()).map_err(|e| match e {
            Error::Dimension { detail, .. } => Error::dim(op, detail),
            other => other,
        })
    }

    pub fn matmul(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let (a, b) = (self.value(), other.value());
        let out = kernels::matmul(a.data(), b.data(), m, k, n);
        Ok(self.binary(other, Tensor::new(vec![m, n], out)?, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'g, F>> {
        let (r, c) = self.dims2("transpose")?;
        let out = kernels::transpose(self.value().data(), r, c);
        Ok(self.unary(Tensor::new(vec![c, r], out)?, Op::Transpose(self.id)))
    }

    fn same_shape(&self, other: &Var<'g, F>, op: &'static str) -> Result<(Tensor<F>, Tensor<F>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok((a, b))
    }

    pub fn add(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        let (a, b) = self.same_shape(other, "add")?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        Ok(self.binary(other, Tensor::new(a.shape().to_vec(), out)?, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        let (a, b) = self.same_shape(other, "sub")?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        Ok(self.binary(other, Tensor::new(a.shape().to_vec(), out)?, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        let (a, b) = self.same_shape(other, "mul")?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        Ok(self.binary(other, Tensor::new(a.shape().to_vec(), out)?, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'g, F> {
        let c = F::from_f64(c);
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'g, F> {
        self.scale(-1.0)
    }

    /// `x[..., D] + b[D]`, the only broadcast supported.
    pub fn add_row(&self, bias: &Var<'g, F>) -> Result<Var<'g, F>> {
        let (x, b) = (self.value(), bias.value());
        let (_, d) = x.rows_cols()?;
        if b.shape() != [d] {
            return Err(Error::dim("add_row", format!("bias {:?} for rows of {d}", b.shape())));
        }
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.binary(bias, Tensor::new(x.shape().to_vec(), out)?, Op::AddRow(self.id, bias.id)))
    }

    /// Affine map `x·W + b` with `W: [in, out]`.
    pub fn linear(&self, weight: &Var<'g, F>, bias: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.matmul(weight)?.add_row(bias)
    }

    pub fn layer_norm(&self, gain: &Var<'g, F>, bias: &Var<'g, F>, eps: f64) -> Result<Var<'g, F>> {
        let x = self.value();
        let (_, d) = x.rows_cols()?;
        let (g, b) = (gain.value(), bias.value());
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::dim("layer_norm", format!("affine {:?}/{:?} for D={d}", g.shape(), b.shape())));
        }
        let eps = F::from_f64(eps);
        let out = kernels::layer_norm_forward(x.data(), g.data(), b.data(), d, eps);
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.graph.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, eps },
            rg,
        ))
    }

    pub fn gelu(&self) -> Var<'g, F> {
        let v = self.value().map(kernels::gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn softmax(&self) -> Result<Var<'g, F>> {
        let x = self.value();
        let (_, d) = x.rows_cols()?;
        let out = kernels::softmax_rows(x.data(), d);
        Ok(self.unary(Tensor::new(x.shape().to_vec(), out)?, Op::Softmax(self.id)))
    }

    pub fn log_softmax(&self) -> Result<Var<'g, F>> {
        let x = self.value();
        let (_, d) = x.rows_cols()?;
        let out = kernels::log_softmax_rows(x.data(), d);
        Ok(self.unary(Tensor::new(x.shape().to_vec(), out)?, Op::LogSoftmax(self.id)))
    }

    /// Grouped strided convolution of `[C_in, T]` with `[C_out, C_in/groups, K]`,
    /// no implicit padding.
    pub fn conv1d(&self, kernels_: &Var<'g, F>, stride: usize, groups: usize) -> Result<Var<'g, F>> {
        let (c_in, t_in) = self.dims2("conv1d")?;
        let w = kernels_.value();
        let [c_out, cig, k] = *w.shape() else {
            return Err(Error::dim("conv1d", format!("kernel must be rank 3, got {:?}", w.shape())));
        };
        if stride == 0 || groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cig != c_in / groups {
            return Err(Error::dim(
                "conv1d",
                format!("C_in={c_in}, C_out={c_out}, kernel in-channels={cig}, groups={groups}, stride={stride}"),
            ));
        }
        if t_in < k {
            return Err(Error::EmptyOutput { len: t_in, kernel: k });
        }
        let t_out = (t_in - k) / stride + 1;
        let geom = ConvGeom { c_in, c_out, kernel: k, stride, groups, t_in, t_out };
        let out = kernels::conv1d_forward(self.value().data(), w.data(), &geom);
        Ok(self.binary(kernels_, Tensor::new(vec![c_out, t_out], out)?, Op::Conv1d { x: self.id, w: kernels_.id, geom }))
    }

    /// Zero padding along the last axis of a rank-2 tensor.
    pub fn pad_last(&self, left: usize, right: usize) -> Result<Var<'g, F>> {
        let (r, c) = self.dims2("pad_last")?;
        let x = self.value();
        let width = c + left + right;
        let mut out = vec![F::zero(); r * width];
        for i in 0..r {
            out[i * width + left..i * width + left + c].copy_from_slice(x.row(i));
        }
        Ok(self.unary(Tensor::new(vec![r, width], out)?, Op::PadLast { x: self.id, left, right }))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g, F>> {
        let (r, c) = self.dims2("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {c}")));
        }
        let x = self.value();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&x.row(i)[start..end]);
        }
        Ok(self.unary(Tensor::new(vec![r, end - start], out)?, Op::SliceCols { x: self.id, start }))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g, F>> {
        let (r, c) = self.dims2("slice_rows")?;
        if start >= end || end > r {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {r}")));
        }
        let out = self.value().data()[start * c..end * c].to_vec();
        Ok(self.unary(Tensor::new(vec![end - start, c], out)?, Op::SliceRows { x: self.id, start }))
    }

    pub fn concat_cols(parts: &[Var<'g, F>]) -> Result<Var<'g, F>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (rows, _) = first.dims2("concat_cols")?;
        let values: Vec<Tensor<F>> = parts.iter().map(|p| p.value()).collect();
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(i));
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.graph.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    pub fn concat_rows(parts: &[Var<'g, F>]) -> Result<Var<'g, F>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let (_, cols) = first.dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let v = p.value();
            let (r, c) = v.dims2()?;
            if c != cols {
                return Err(Error::dim("concat_rows", format!("column counts {cols} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.graph.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'g, F>> {
        let (r, c) = self.dims2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {r}")));
        }
        let x = self.value();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(x.row(i));
        }
        Ok(self.unary(
            Tensor::new(vec![index.len(), c], out)?,
            Op::GatherRows { x: self.id, index: index.to_vec() },
        ))
    }

    /// Rows listed in `index` replaced by `row`.
    pub fn replace_rows(&self, row: &Var<'g, F>, index: &[usize]) -> Result<Var<'g, F>> {
        let (r, c) = self.dims2("replace_rows")?;
        let rv = row.value();
        if rv.shape() != [c] {
            return Err(Error::dim("replace_rows", format!("row {:?} for width {c}", rv.shape())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::dim("replace_rows", format!("row {bad} of {r}")));
        }
        let mut out = self.value().to_vec();
        for &i in index {
            out[i * c..(i + 1) * c].copy_from_slice(rv.data());
        }
        Ok(self.binary(
            row,
            Tensor::new(vec![r, c], out)?,
            Op::ReplaceRows { x: self.id, row: row.id, index: index.to_vec() },
        ))
    }

    pub fn sum(&self) -> Var<'g, F> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g, F> {
        let n = self.with_value(|t| t.len());
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over the last axis.
    pub fn sum_last(&self) -> Result<Var<'g, F>> {
        let x = self.value();
        let (_, d) = x.rows_cols()?;
        let out: Vec<F> = x.data().chunks_exact(d).map(|r| r.iter().copied().sum()).collect();
        let mut shape = x.shape().to_vec();
        shape.pop();
        Ok(self.unary(Tensor::new(shape, out)?, Op::SumLast(self.id)))
    }

    /// Mean over rows of `[N, M]`, giving `[M]`.
    pub fn mean_rows(&self) -> Result<Var<'g, F>> {
        let (r, c) = self.dims2("mean_rows")?;
        if r == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let x = self.value();
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let inv = F::one() / F::from_f64(r as f64);
        Ok(self.unary(Tensor::new(vec![c], out.into_iter().map(|v| v * inv).collect())?, Op::MeanRows(self.id)))
    }

    pub fn square(&self) -> Var<'g, F> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&self) -> Var<'g, F> {
        let v = self.value().map(|x| x.max(F::zero()).sqrt());
        self.unary(v, Op::Sqrt(self.id))
    }

    /// Elementwise `x·ln x` with `0·ln 0 = 0`.
    pub fn xlogx(&self) -> Var<'g, F> {
        let v = self.value().map(|x| if x > F::zero() { x * x.ln() } else { F::zero() });
        self.unary(v, Op::XLogX(self.id))
    }

    /// Rows scaled to unit L2 norm; norms below `eps` are clamped to `eps`.
    pub fn normalize_rows(&self, eps: f64) -> Result<Var<'g, F>> {
        let x = self.value();
        let (_, d) = x.rows_cols()?;
        let eps = F::from_f64(eps);
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(d) {
            let norm = kernels::dot(row, row).sqrt().max(eps);
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
        Ok(self.unary(Tensor::new(x.shape().to_vec(), out)?, Op::NormalizeRows { x: self.id, eps }))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'g, F>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Straight-through hard selection: the forward value is the one-hot
    /// argmax of each row, the backward pass hands the gradient to the soft
    /// input unchanged.
    pub fn straight_through(&self) -> Result<Var<'g, F>> {
        let x = self.value();
        let (_, d) = x.rows_cols()?;
        let mut out = vec![F::zero(); x.len()];
        for (xr, or) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            or[argmax(xr)] = F::one();
        }
        Ok(self.unary(Tensor::new(x.shape().to_vec(), out)?, Op::StraightThrough(self.id)))
    }

    /// `-log P(target | self)` for `self: [T, V]` holding per-frame log
    /// probabilities and `target` the label sequence (blank excluded).
    pub fn ctc_loss(&self, target: &[usize], blank: usize) -> Result<Var<'g, F>> {
        let (t, v) = self.dims2("ctc_loss")?;
        if let Some(&bad) = target.iter().find(|&&y| y >= v || y == blank) {
            return Err(Error::dim("ctc_loss", format!("label {bad} outside vocabulary of {v} or blank")));
        }
        let needed = kernels::ctc_min_frames(target);
        if t == 0 || t < needed {
            return Err(Error::UnrealizableTarget { target_len: target.len(), frames: t, needed });
        }
        let ext = kernels::ctc_extended(target, blank);
        let ll = kernels::ctc_log_likelihood(self.value().data(), t, v, &ext);
        if !ll.is_finite() {
            return Err(Error::NonFinite(format!("ctc log-likelihood {ll}")));
        }
        Ok(self.unary(Tensor::scalar(-ll), Op::Ctc { x: self.id, ext }))
    }
}

/// Index of the first maximal element.
pub fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
