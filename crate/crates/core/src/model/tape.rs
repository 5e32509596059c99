//! A small tape-based reverse-mode differentiation engine over matrices.
//!
//! Every intermediate value is a 2-D array; sequences are rows, scalars
//! are 1x1. Operations append nodes to a [`Graph`]; `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products. The op set
//! is exactly what the encoder-decoder transformer and its losses need,
//! each with a hand-derived adjoint.

use super::scalar::Scalar;
use crate::numerics::std_normal_cdf;
use ndarray::{concatenate, s, Array2, Axis};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<E: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// (n x d) + (1 x d), broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, E),
    Transpose(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    /// Row-wise layer norm: (x, gain, bias).
    LayerNormRows(NodeId, NodeId, NodeId, E),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    /// Scatter visible rows to their grid position, mask token elsewhere:
    /// (visible, mask_token, visible indices, total rows).
    AssembleByMask(NodeId, NodeId, Vec<usize>, usize),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// Column means: (n x d) -> (1 x d).
    MeanOverRows(NodeId),
    Row(NodeId, usize),
    ClampMin(NodeId, E),
    Ln(NodeId),
    /// Gradient barrier; the value is copied, no adjoint flows back.
    Detach,
}

struct Node<E: Scalar> {
    value: Array2<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// The recording tape. Nodes only ever reference earlier nodes, so the
/// creation order is a topological order.
pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node at index >= `len`; used to reuse the parameter
    /// prefix of the tape across many forward evaluations.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, id: NodeId) -> &Array2<E> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.dim(), (1, 1));
        self.nodes[id].value[(0, 0)].to_f64()
    }

    fn push(&mut self, value: Array2<E>, op: Op<E>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Insert a trainable leaf.
    pub fn param(&mut self, value: Array2<E>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a constant leaf (inputs, positional tables, targets).
    pub fn constant(&mut self, value: Array2<E>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_from_f64(&mut self, value: &Array2<f64>) -> NodeId {
        self.constant(value.mapv(E::from_f64))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        debug_assert_eq!(self.nodes[a].value.ncols(), self.nodes[row].value.ncols());
        let v = &self.nodes[a].value + &self.nodes[row].value.row(0);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MulElem(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: E) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(gelu_scalar);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows_value(&self.nodes[a].value);
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: E) -> NodeId {
        let (normed, _, _) = layer_norm_value(&self.nodes[x].value, eps);
        let v = &normed * &self.nodes[gain].value.row(0) + &self.nodes[bias].value.row(0);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(v, Op::LayerNormRows(x, gain, bias, eps), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a].value.slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start, len), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let src = &self.nodes[a].value;
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn assemble_by_mask(
        &mut self,
        visible: NodeId,
        mask_token: NodeId,
        visible_idx: &[usize],
        total: usize,
    ) -> NodeId {
        let vis = &self.nodes[visible].value;
        let tok = &self.nodes[mask_token].value;
        debug_assert_eq!(vis.nrows(), visible_idx.len());
        debug_assert_eq!(tok.nrows(), 1);
        debug_assert_eq!(vis.ncols(), tok.ncols());
        let mut v = Array2::zeros((total, vis.ncols()));
        for r in 0..total {
            v.row_mut(r).assign(&tok.row(0));
        }
        for (r, &i) in visible_idx.iter().enumerate() {
            v.row_mut(i).assign(&vis.row(r));
        }
        let rg = self.rg(visible) || self.rg(mask_token);
        self.push(v, Op::AssembleByMask(visible, mask_token, visible_idx.to_vec(), total), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a].value;
        let n = E::from_f64((src.nrows() * src.ncols()) as f64);
        let v = Array2::from_elem((1, 1), src.sum() / n);
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_over_rows(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a].value;
        let n = E::from_f64(src.nrows() as f64);
        let mut v = Array2::zeros((1, src.ncols()));
        for c in 0..src.ncols() {
            let mut acc = E::zero();
            for r in 0..src.nrows() {
                acc = acc + src[(r, c)];
            }
            v[(0, c)] = acc / n;
        }
        let rg = self.rg(a);
        self.push(v, Op::MeanOverRows(a), rg)
    }

    pub fn row(&mut self, a: NodeId, index: usize) -> NodeId {
        let v = self.nodes[a].value.slice(s![index..index + 1, ..]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Row(a, index), rg)
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: E) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| if x < floor { floor } else { x });
        let rg = self.rg(a);
        self.push(v, Op::ClampMin(a, floor), rg)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(Scalar::ln);
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    /// Copy of the value with no gradient path back to its producer.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.push(v, Op::Detach, false)
    }

    /// Reverse pass from a 1x1 loss node. Returns one gradient slot per
    /// node; slots that the loss does not depend on remain `None`.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Array2<E>>> {
        assert_eq!(self.nodes[loss].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<E>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), E::one()));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn accumulate_parents(&self, id: NodeId, g: &Array2<E>, grads: &mut [Option<Array2<E>>]) {
        let mut add_to = |target: NodeId, contrib: Array2<E>| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(acc) => *acc = &*acc + &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_to(*a, g.dot(&bv.t()));
                add_to(*b, av.t().dot(g));
            }
            Op::Add(a, b) => {
                add_to(*a, g.clone());
                add_to(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                add_to(*a, g.clone());
                let mut rg = Array2::zeros((1, g.ncols()));
                for c in 0..g.ncols() {
                    let mut acc = E::zero();
                    for r in 0..g.nrows() {
                        acc = acc + g[(r, c)];
                    }
                    rg[(0, c)] = acc;
                }
                add_to(*row, rg);
            }
            Op::Sub(a, b) => {
                add_to(*a, g.clone());
                add_to(*b, g.mapv(|x| E::zero() - x));
            }
            Op::MulElem(a, b) => {
                add_to(*a, g * &self.nodes[*b].value);
                add_to(*b, g * &self.nodes[*a].value);
            }
            Op::Scale(a, c) => {
                add_to(*a, g.mapv(|x| x * *c));
            }
            Op::Transpose(a) => {
                add_to(*a, g.t().to_owned());
            }
            Op::Gelu(a) => {
                let dv = self.nodes[*a].value.mapv(gelu_derivative);
                add_to(*a, g * &dv);
            }
            Op::SoftmaxRows(a) => {
                // dX_r = (dY_r - <dY_r, Y_r>) * Y_r
                let y = &self.nodes[id].value;
                let mut dx = g * y;
                for r in 0..y.nrows() {
                    let dot: E = (0..y.ncols()).fold(E::zero(), |acc, c| acc + g[(r, c)] * y[(r, c)]);
                    for c in 0..y.ncols() {
                        dx[(r, c)] = dx[(r, c)] - dot * y[(r, c)];
                    }
                }
                add_to(*a, dx);
            }
            Op::LayerNormRows(x, gain, bias, eps) => {
                let xv = &self.nodes[*x].value;
                let (normed, _mean, inv_std) = layer_norm_value(xv, *eps);
                let gv = &self.nodes[*gain].value;

                // d gain = sum_rows g * normed ; d bias = sum_rows g
                let mut dgain = Array2::zeros((1, xv.ncols()));
                let mut dbias = Array2::zeros((1, xv.ncols()));
                for r in 0..xv.nrows() {
                    for c in 0..xv.ncols() {
                        dgain[(0, c)] = dgain[(0, c)] + g[(r, c)] * normed[(r, c)];
                        dbias[(0, c)] = dbias[(0, c)] + g[(r, c)];
                    }
                }
                add_to(*gain, dgain);
                add_to(*bias, dbias);

                // dx_r = inv_std * (h - mean(h) - normed * mean(h * normed)),
                // where h = g * gain
                let d = xv.ncols();
                let dn = E::from_f64(d as f64);
                let mut dx = Array2::zeros(xv.dim());
                for r in 0..xv.nrows() {
                    let mut mean_h = E::zero();
                    let mut mean_hn = E::zero();
                    for c in 0..d {
                        let h = g[(r, c)] * gv[(0, c)];
                        mean_h = mean_h + h;
                        mean_hn = mean_hn + h * normed[(r, c)];
                    }
                    mean_h = mean_h / dn;
                    mean_hn = mean_hn / dn;
                    for c in 0..d {
                        let h = g[(r, c)] * gv[(0, c)];
                        dx[(r, c)] = inv_std[r] * (h - mean_h - normed[(r, c)] * mean_hn);
                    }
                }
                add_to(*x, dx);
            }
            Op::SliceCols(a, start, len) => {
                let src = &self.nodes[*a].value;
                let mut da = Array2::zeros(src.dim());
                da.slice_mut(s![.., *start..*start + *len]).assign(g);
                add_to(*a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.nrows();
                    let dp = g.slice(s![offset..offset + rows, ..]).to_owned();
                    add_to(p, dp);
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.ncols();
                    let dp = g.slice(s![.., offset..offset + cols]).to_owned();
                    add_to(p, dp);
                    offset += cols;
                }
            }
            Op::GatherRows(a, idx) => {
                let src = &self.nodes[*a].value;
                let mut da = Array2::zeros(src.dim());
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..src.ncols() {
                        da[(i, c)] = da[(i, c)] + g[(r, c)];
                    }
                }
                add_to(*a, da);
            }
            Op::AssembleByMask(visible, mask_token, visible_idx, total) => {
                let vis = &self.nodes[*visible].value;
                let mut dvis = Array2::zeros(vis.dim());
                let mut visible_rows = vec![false; *total];
                for (r, &i) in visible_idx.iter().enumerate() {
                    dvis.row_mut(r).assign(&g.row(i));
                    visible_rows[i] = true;
                }
                add_to(*visible, dvis);
                let mut dtok = Array2::zeros((1, vis.ncols()));
                for (i, was_visible) in visible_rows.iter().enumerate() {
                    if !was_visible {
                        for c in 0..vis.ncols() {
                            dtok[(0, c)] = dtok[(0, c)] + g[(i, c)];
                        }
                    }
                }
                add_to(*mask_token, dtok);
            }
            Op::MeanAll(a) => {
                let src = &self.nodes[*a].value;
                let scale = g[(0, 0)] / E::from_f64((src.nrows() * src.ncols()) as f64);
                add_to(*a, Array2::from_elem(src.dim(), scale));
            }
            Op::SumAll(a) => {
                let src = &self.nodes[*a].value;
                add_to(*a, Array2::from_elem(src.dim(), g[(0, 0)]));
            }
            Op::MeanOverRows(a) => {
                let src = &self.nodes[*a].value;
                let inv_n = E::one() / E::from_f64(src.nrows() as f64);
                let mut da = Array2::zeros(src.dim());
                for r in 0..src.nrows() {
                    for c in 0..src.ncols() {
                        da[(r, c)] = g[(0, c)] * inv_n;
                    }
                }
                add_to(*a, da);
            }
            Op::Row(a, index) => {
                let src = &self.nodes[*a].value;
                let mut da = Array2::zeros(src.dim());
                da.row_mut(*index).assign(&g.row(0));
                add_to(*a, da);
            }
            Op::ClampMin(a, floor) => {
                let src = &self.nodes[*a].value;
                let mut da = g.clone();
                for r in 0..src.nrows() {
                    for c in 0..src.ncols() {
                        if src[(r, c)] < *floor {
                            da[(r, c)] = E::zero();
                        }
                    }
                }
                add_to(*a, da);
            }
            Op::Ln(a) => {
                add_to(*a, g / &self.nodes[*a].value);
            }
        }
    }
}

fn gelu_scalar<E: Scalar>(x: E) -> E {
    let xf = x.to_f64();
    E::from_f64(xf * std_normal_cdf(xf).value())
}

fn gelu_derivative<E: Scalar>(x: E) -> E {
    let xf = x.to_f64();
    let phi = (-0.5 * xf * xf).exp() / 2.5066282746310005024;
    E::from_f64(std_normal_cdf(xf).value() + xf * phi)
}

/// Row-wise softmax with max-subtraction; adding a constant to every
/// entry of a row leaves the output bit-identical.
fn softmax_rows_value<E: Scalar>(x: &Array2<E>) -> Array2<E> {
    let mut out = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        let mut max = x[(r, 0)];
        for c in 1..x.ncols() {
            if x[(r, c)] > max {
                max = x[(r, c)];
            }
        }
        let mut sum = E::zero();
        for c in 0..x.ncols() {
            let e = (x[(r, c)] - max).exp();
            out[(r, c)] = e;
            sum = sum + e;
        }
        for c in 0..x.ncols() {
            out[(r, c)] = out[(r, c)] / sum;
        }
    }
    out
}

/// Returns (normalized rows, per-row mean, per-row 1/std).
fn layer_norm_value<E: Scalar>(x: &Array2<E>, eps: E) -> (Array2<E>, Vec<E>, Vec<E>) {
    let d = E::from_f64(x.ncols() as f64);
    let mut normed = Array2::zeros(x.dim());
    let mut means = Vec::with_capacity(x.nrows());
    let mut inv_stds = Vec::with_capacity(x.nrows());
    for r in 0..x.nrows() {
        let mut mean = E::zero();
        for c in 0..x.ncols() {
            mean = mean + x[(r, c)];
        }
        mean = mean / d;
        let mut var = E::zero();
        for c in 0..x.ncols() {
            let dx = x[(r, c)] - mean;
            var = var + dx * dx;
        }
        var = var / d;
        let inv_std = E::one() / (var + eps).sqrt();
        for c in 0..x.ncols() {
            normed[(r, c)] = (x[(r, c)] - mean) * inv_std;
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (normed, means, inv_stds)
}
