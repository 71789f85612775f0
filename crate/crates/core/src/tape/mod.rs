//! Reverse-mode differentiation over array-valued kernels.
//!
//! A [`Tape`] records each executed kernel together with the node ids it read
//! and wrote; [`Tape::backward`] replays the record in reverse, accumulating
//! gradients additively. Trainable tensors live in a [`ParamSet`]; binding one
//! onto a tape with [`Tape::param`] makes its gradient retrievable after the
//! reverse pass via [`Tape::add_param_grads`].

mod gradcheck;
mod kernels;
mod params;
mod sparse;
mod tensor;

pub use gradcheck::grad_check;
pub use kernels::{
    clamp11, clamp11_grad, cos_window, cos_window_grad, leaky_relu, leaky_relu_grad, matmul_acc,
    matmul_nt_acc, matmul_tn_acc, sigmoid, trilerp_acc, trilinear_weight, trilinear_weight_grad,
};
pub use params::{ParamId, ParamSet};
pub use sparse::{
    conv3_pairs, corner_pairs, down_pairs, key_add, key_child, key_child_bits, key_parent,
    up_pairs, KeyIndex, PairTable, SparseTensor, VoxelKey,
};
pub use tensor::Tensor;

use std::rc::Rc;
use std::sync::Arc;

use rayon::prelude::*;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    Transpose { a: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Sub { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Scale { a: NodeId, c: f64, out: NodeId },
    AddConst { a: NodeId, out: NodeId },
    AddConstRow { a: NodeId, out: NodeId },
    MaxConst { a: NodeId, c: f64, out: NodeId },
    AddRow { a: NodeId, bias: NodeId, out: NodeId },
    LeakyRelu { a: NodeId, slope: f64, out: NodeId },
    NoGrad,
    Sigmoid { a: NodeId, out: NodeId },
    Clamp11 { a: NodeId, out: NodeId },

    CosWindow { a: NodeId, out: NodeId },
    CosWindowGrad { a: NodeId, out: NodeId },
    Abs { a: NodeId, out: NodeId },
    InstanceNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, out: NodeId },
    MeanPoolGroups { x: NodeId, groups: Rc<Vec<(u32, u32)>>, out: NodeId },
    GatherRows { x: NodeId, idx: Rc<Vec<u32>>, out: NodeId },
    GatherRowsOrZero { x: NodeId, idx: Rc<Vec<Option<u32>>>, out: NodeId },
    WeightedGather { x: NodeId, idx: Rc<Vec<[u32; 8]>>, w: Rc<Vec<[f64; 8]>>, out: NodeId },
    Trilerp { corners: NodeId, uvw: NodeId, out: NodeId },
    ConcatCols { a: NodeId, b: NodeId, out: NodeId },
    ConcatRows { a: NodeId, b: NodeId, out: NodeId },
    SliceCols { a: NodeId, lo: usize, hi: usize, out: NodeId },
    RowDot { a: NodeId, b: NodeId, out: NodeId },
    RowNorm { a: NodeId, out: NodeId },
    SumAll { a: NodeId, out: NodeId },
    MeanAll { a: NodeId, out: NodeId },
    BceMean { p: NodeId, labels: Rc<Vec<f64>>, out: NodeId },
    PairConv { x: NodeId, w: NodeId, table: Arc<PairTable>, out: NodeId },
    RayPoint { t: NodeId, d: [f64; 3], out: NodeId },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Tensor>>,
    bindings: Vec<(NodeId, ParamId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(t);
        NodeId(self.nodes.len() - 1)
    }

    /// Constant (or input) leaf.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t)
    }

    /// Leaf bound to a trainable parameter; gradients flow back to it through
    /// [`Tape::add_param_grads`].
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        let node = self.push(params.value(id).clone());
        self.bindings.push((node, id));
        node
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].len(), 1);
        self.nodes[id.0].data()[0]
    }

    /// Gradient of the last `backward` output w.r.t. node `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of all bound parameter leaves into `params`.
    pub fn add_param_grads(&self, params: &mut ParamSet) {
        for &(node, pid) in &self.bindings {
            if let Some(g) = self.grad(node) {
                params.grad_mut(pid).add_assign(g);
            }
        }
    }

    fn shape_err(&self, what: &str, ids: &[NodeId]) -> Error {
        let shapes: Vec<String> =
            ids.iter().map(|i| format!("{:?}", self.nodes[i.0].shape())).collect();
        Error::ShapeMismatch(format!("{}: {}", what, shapes.join(" vs ")))
    }

    // ---- op constructors ------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul_acc(ta.data(), m, k, tb.data(), n, out.data_mut());
        let out = self.push(out);
        self.ops.push(Op::Matmul { a, b, out });
        Ok(out)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0];
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.set(j, i, ta.at(i, j));
            }
        }
        let out = self.push(out);
        self.ops.push(Op::Transpose { a, out });
        Ok(out)
    }

    fn elementwise2(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if !self.nodes[a.0].same_shape(&self.nodes[b.0]) {
            return Err(self.shape_err(what, &[a, b]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "add")?;
        let mut out = self.nodes[a.0].clone();
        out.add_assign(&self.nodes[b.0]);
        let out = self.push(out);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "sub")?;
        let mut out = self.nodes[a.0].clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].data()) {
            *o -= bv;
        }
        let out = self.push(out);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "mul")?;
        let mut out = self.nodes[a.0].clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].data()) {
            *o *= bv;
        }
        let out = self.push(out);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.nodes[a.0].clone();
        out.scale_assign(c);
        let out = self.push(out);
        self.ops.push(Op::Scale { a, c, out });
        Ok(out)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.nodes[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x += c);
        let out = self.push(out);
        self.ops.push(Op::AddConst { a, out });
        Ok(out)
    }

    /// Broadcast-adds a constant row to every row of `a`.
    pub fn add_const_row(&mut self, a: NodeId, row: Rc<Vec<f64>>) -> Result<NodeId> {
        if self.nodes[a.0].cols() != row.len() {
            return Err(self.shape_err("add_const_row", &[a]));
        }
        let mut out = self.nodes[a.0].clone();
        let c = row.len();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += row[i % c];
        }
        let out = self.push(out);
        self.ops.push(Op::AddConstRow { a, out });
        Ok(out)
    }

    pub fn max_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.nodes[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.max(c));
        let out = self.push(out);
        self.ops.push(Op::MaxConst { a, c, out });
        Ok(out)
    }

    /// Broadcast row bias: out[r, :] = a[r, :] + bias.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].cols() != self.nodes[bias.0].len() {
            return Err(self.shape_err("add_row", &[a, bias]));
        }
        let mut out = self.nodes[a.0].clone();
        let c = self.nodes[bias.0].len();
        let bv = self.nodes[bias.0].data();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += bv[i % c];
        }
        let out = self.push(out);
        self.ops.push(Op::AddRow { a, bias, out });
        Ok(out)
    }

    /// Fully-connected layer: x * w + bias.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let mut out = self.nodes[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x = kernels::leaky_relu(*x, slope));
        let out = self.push(out);
        self.ops.push(Op::LeakyRelu { a, slope, out });
        Ok(out)
    }

    /// Value of the leaky-relu derivative at `a`. Its own backward is zero
    /// (exactly correct away from the kink, which has measure zero).
    pub fn leaky_relu_grad_of(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let mut out = self.nodes[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x = kernels::leaky_relu_grad(*x, slope));
        let out = self.push(out);
        let _ = a;
        self.ops.push(Op::NoGrad);
        Ok(out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.nodes[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x = kernels::sigmoid(*x));
        let out = self.push(out);
        self.ops.push(Op::Sigmoid { a, out });
        Ok(out)
    }

    pub fn clamp11(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.nodes[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x = kernels::clamp11(*x));
        let out = self.push(out);
        self.ops.push(Op::Clamp11 { a, out });
        Ok(out)
    }

    pub fn clamp11_grad_of(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.nodes[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x = kernels::clamp11_grad(*x));
        let out = self.push(out);
        let _ = a;
        self.ops.push(Op::NoGrad);
        Ok(out)
    }

    pub fn cos_window(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.nodes[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x = kernels::cos_window(*x));
        let out = self.push(out);
        self.ops.push(Op::CosWindow { a, out });
        Ok(out)
    }

    pub fn cos_window_grad_of(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.nodes[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x = kernels::cos_window_grad(*x));
        let out = self.push(out);
        self.ops.push(Op::CosWindowGrad { a, out });
        Ok(out)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.nodes[a.0].clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.abs());
        let out = self.push(out);
        self.ops.push(Op::Abs { a, out });
        Ok(out)
    }

    /// Normalizes each channel (column) of x over all rows to zero mean and
    /// unit variance, then applies the learned affine (gamma, beta).
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let tx = &self.nodes[x.0];
        let (n, c) = (tx.rows(), tx.cols());
        if self.nodes[gamma.0].len() != c || self.nodes[beta.0].len() != c {
            return Err(self.shape_err("instance_norm", &[x, gamma, beta]));
        }
        if n == 0 {
            return Err(Error::EmptySet);
        }
        let mut out = Tensor::zeros(&[n, c]);
        let g = self.nodes[gamma.0].data();
        let b = self.nodes[beta.0].data();
        let xd = tx.data();
        for ch in 0..c {
            let mut mean = 0.0;
            for r in 0..n {
                mean += xd[r * c + ch];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for r in 0..n {
                let d = xd[r * c + ch] - mean;
                var += d * d;
            }
            var /= n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            for r in 0..n {
                let xhat = (xd[r * c + ch] - mean) * istd;
                out.data_mut()[r * c + ch] = g[ch] * xhat + b[ch];
            }
        }
        let out = self.push(out);
        self.ops.push(Op::InstanceNorm { x, gamma, beta, eps, out });
        Ok(out)
    }

    /// Columnwise mean over each contiguous row range; every range must be
    /// non-empty.
    pub fn mean_pool_groups(&mut self, x: NodeId, groups: Rc<Vec<(u32, u32)>>) -> Result<NodeId> {
        let tx = &self.nodes[x.0];
        let (n, c) = (tx.rows(), tx.cols());
        for &(lo, hi) in groups.iter() {
            if lo >= hi || hi as usize > n {
                return Err(Error::EmptySet);
            }
        }
        let mut out = Tensor::zeros(&[groups.len(), c]);
        for (gi, &(lo, hi)) in groups.iter().enumerate() {
            let cnt = (hi - lo) as f64;
            for r in lo..hi {
                let row = tx.row(r as usize);
                let orow = &mut out.data_mut()[gi * c..(gi + 1) * c];
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o += v / cnt;
                }
            }
        }
        let out = self.push(out);
        self.ops.push(Op::MeanPoolGroups { x, groups, out });
        Ok(out)
    }

    /// Columnwise mean of all rows: [n, C] -> [1, C].
    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].rows();
        if n == 0 {
            return Err(Error::EmptySet);
        }
        self.mean_pool_groups(x, Rc::new(vec![(0, n as u32)]))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Rc<Vec<u32>>) -> Result<NodeId> {
        let tx = &self.nodes[x.0];
        let (n, c) = (tx.rows(), tx.cols());
        if idx.iter().any(|&i| i as usize >= n) {
            return Err(self.shape_err("gather_rows: index out of range", &[x]));
        }
        let mut out = Tensor::zeros(&[idx.len(), c]);
        for (r, &i) in idx.iter().enumerate() {
            out.data_mut()[r * c..(r + 1) * c].copy_from_slice(tx.row(i as usize));
        }
        let out = self.push(out);
        self.ops.push(Op::GatherRows { x, idx, out });
        Ok(out)
    }

    /// Like gather_rows but None entries produce zero rows (used for skip
    /// features at voxels the encoder never saw).
    pub fn gather_rows_or_zero(&mut self, x: NodeId, idx: Rc<Vec<Option<u32>>>) -> Result<NodeId> {
        let tx = &self.nodes[x.0];
        let c = tx.cols();
        let mut out = Tensor::zeros(&[idx.len(), c]);
        for (r, &i) in idx.iter().enumerate() {
            if let Some(i) = i {
                out.data_mut()[r * c..(r + 1) * c].copy_from_slice(tx.row(i as usize));
            }
        }
        let out = self.push(out);
        self.ops.push(Op::GatherRowsOrZero { x, idx, out });
        Ok(out)
    }

    /// out[r, :] = sum_j w[r][j] * x[idx[r][j], :] with constant weights.
    pub fn weighted_gather(
        &mut self,
        x: NodeId,
        idx: Rc<Vec<[u32; 8]>>,
        w: Rc<Vec<[f64; 8]>>,
    ) -> Result<NodeId> {
        if idx.len() != w.len() {
            return Err(self.shape_err("weighted_gather", &[x]));
        }
        let tx = &self.nodes[x.0];
        let c = tx.cols();
        let mut out = Tensor::zeros(&[idx.len(), c]);
        for r in 0..idx.len() {
            let orow = &mut out.data_mut()[r * c..(r + 1) * c];
            for j in 0..8 {
                let wv = w[r][j];
                if wv == 0.0 {
                    continue;
                }
                let row = tx.row(idx[r][j] as usize);
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o += wv * v;
                }
            }
        }
        let out = self.push(out);
        self.ops.push(Op::WeightedGather { x, idx, w, out });
        Ok(out)
    }

    /// Trilinear interpolation with differentiable weights: corners [8, C]
    /// in bit order (x=4, y=2, z=1), uvw [1, 3] -> [1, C].
    pub fn trilerp(&mut self, corners: NodeId, uvw: NodeId) -> Result<NodeId> {
        let tc = &self.nodes[corners.0];
        if tc.rows() != 8 || self.nodes[uvw.0].len() != 3 {
            return Err(self.shape_err("trilerp", &[corners, uvw]));
        }
        let c = tc.cols();
        let u = [self.nodes[uvw.0].data()[0], self.nodes[uvw.0].data()[1], self.nodes[uvw.0].data()[2]];
        let mut out = Tensor::zeros(&[1, c]);
        kernels::trilerp_acc(tc.data(), c, u, out.data_mut());
        let out = self.push(out);
        self.ops.push(Op::Trilerp { corners, uvw, out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.rows() != tb.rows() {
            return Err(self.shape_err("concat_cols", &[a, b]));
        }
        let (n, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(&[n, ca + cb]);
        for r in 0..n {
            out.data_mut()[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(ta.row(r));
            out.data_mut()[r * (ca + cb) + ca..(r + 1) * (ca + cb)].copy_from_slice(tb.row(r));
        }
        let out = self.push(out);
        self.ops.push(Op::ConcatCols { a, b, out });
        Ok(out)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.cols() != tb.cols() {
            return Err(self.shape_err("concat_rows", &[a, b]));
        }
        let c = ta.cols();
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let rows = ta.rows() + tb.rows();
        let out = self.push(Tensor::new(vec![rows, c], data)?);
        self.ops.push(Op::ConcatRows { a, b, out });
        Ok(out)
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0];
        let (n, c) = (ta.rows(), ta.cols());
        if lo >= hi || hi > c {
            return Err(self.shape_err("slice_cols", &[a]));
        }
        let mut out = Tensor::zeros(&[n, hi - lo]);
        for r in 0..n {
            out.data_mut()[r * (hi - lo)..(r + 1) * (hi - lo)].copy_from_slice(&ta.row(r)[lo..hi]);
        }
        let out = self.push(out);
        self.ops.push(Op::SliceCols { a, lo, hi, out });
        Ok(out)
    }

    /// Per-row inner product: [n, C] x [n, C] -> [n, 1].
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "row_dot")?;
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let n = ta.rows();
        let mut out = Tensor::zeros(&[n, 1]);
        for r in 0..n {
            let mut s = 0.0;
            for (x, y) in ta.row(r).iter().zip(tb.row(r)) {
                s += x * y;
            }
            out.data_mut()[r] = s;
        }
        let out = self.push(out);
        self.ops.push(Op::RowDot { a, b, out });
        Ok(out)
    }

    /// Per-row Euclidean norm: [n, C] -> [n, 1], subgradient 0 at the origin.
    pub fn row_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0];
        let (n, _c) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(&[n, 1]);
        for r in 0..n {
            out.data_mut()[r] = ta.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        let out = self.push(out);
        self.ops.push(Op::RowNorm { a, out });
        Ok(out)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].data().iter().sum();
        let out = self.push(Tensor::scalar(s));
        self.ops.push(Op::SumAll { a, out });
        Ok(out)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].len();
        if n == 0 {
            return Err(Error::EmptySet);
        }
        let s: f64 = self.nodes[a.0].data().iter().sum();
        let out = self.push(Tensor::scalar(s / n as f64));
        self.ops.push(Op::MeanAll { a, out });
        Ok(out)
    }

    /// Mean binary cross-entropy of probabilities `p` against constant labels,
    /// with p clamped into [1e-7, 1 - 1e-7].
    pub fn bce_mean(&mut self, p: NodeId, labels: Rc<Vec<f64>>) -> Result<NodeId> {
        let tp = &self.nodes[p.0];
        if tp.len() != labels.len() {
            return Err(self.shape_err("bce_mean", &[p]));
        }
        if labels.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut s = 0.0;
        for (&pv, &y) in tp.data().iter().zip(labels.iter()) {
            let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            s += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        let out = self.push(Tensor::scalar(s / labels.len() as f64));
        self.ops.push(Op::BceMean { p, labels, out });
        Ok(out)
    }

    /// Generalized sparse convolution: out[o, :] = sum over pairs (i, tap) of
    /// x[i, :] * w[tap]. Covers 3x3x3 submanifold convolution, strided 2x2x2
    /// down/upsampling and center-to-corner propagation, depending on the
    /// pair table.
    pub fn pair_conv(&mut self, x: NodeId, w: NodeId, table: Arc<PairTable>) -> Result<NodeId> {
        let (tx, tw) = (&self.nodes[x.0], &self.nodes[w.0]);
        let c_in = tx.cols();
        if tx.rows() != table.n_in || tw.rows() != table.taps * c_in {
            return Err(self.shape_err("pair_conv", &[x, w]));
        }
        let c_out = tw.cols();
        let mut out = Tensor::zeros(&[table.n_out, c_out]);
        pair_conv_forward(tx.data(), c_in, tw.data(), c_out, &table, out.data_mut());
        let out = self.push(out);
        self.ops.push(Op::PairConv { x, w, table, out });
        Ok(out)
    }

    /// Point along a fixed ray at a depth given by scalar node `t`:
    /// out = o + t * d, shape [1, 3].
    pub fn ray_point(&mut self, t: NodeId, o: [f64; 3], d: [f64; 3]) -> Result<NodeId> {
        if self.nodes[t.0].len() != 1 {
            return Err(self.shape_err("ray_point", &[t]));
        }
        let tv = self.nodes[t.0].data()[0];
        let out = self.push(Tensor::new(
            vec![1, 3],
            vec![o[0] + tv * d[0], o[1] + tv * d[1], o[2] + tv * d[2]],
        )?);
        self.ops.push(Op::RayPoint { t, d, out });
        Ok(out)
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse pass from scalar node `out`; gradients accumulate additively
    /// over kernels visited in exact reverse execution order.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.nodes[out.0].len() != 1 {
            return Err(Error::ShapeMismatch("backward: output must be scalar".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..self.ops.len()).rev() {
            backward_op(&self.nodes, &self.ops[i], &mut self.grads);
        }
        Ok(())
    }
}

const BCE_EPS: f64 = 1e-7;

/// Tape-free pair convolution, sharing the recorded op's arithmetic exactly.
pub fn pair_conv_apply(x: &Tensor, w: &Tensor, table: &PairTable) -> Tensor {
    let c_in = x.cols();
    let c_out = w.cols();
    debug_assert_eq!(x.rows(), table.n_in);
    debug_assert_eq!(w.rows(), table.taps * c_in);
    let mut out = Tensor::zeros(&[table.n_out, c_out]);
    pair_conv_forward(x.data(), c_in, w.data(), c_out, table, out.data_mut());
    out
}

fn pair_conv_forward(
    x: &[f64],
    c_in: usize,
    w: &[f64],
    c_out: usize,
    table: &PairTable,
    out: &mut [f64],
) {
    let body = |o: usize, orow: &mut [f64]| {
        let lo = table.fwd_off[o] as usize;
        let hi = table.fwd_off[o + 1] as usize;
        for &(i, tap) in &table.fwd[lo..hi] {
            let xrow = &x[i as usize * c_in..(i as usize + 1) * c_in];
            let wblock = &w[tap as usize * c_in * c_out..(tap as usize + 1) * c_in * c_out];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wblock[ci * c_out..(ci + 1) * c_out];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
    };
    let flops = table.fwd.len() * c_in * c_out;
    if flops >= 1 << 20 && table.n_out > 1 {
        out.par_chunks_mut(c_out).enumerate().for_each(|(o, row)| body(o, row));
    } else {
        for (o, row) in out.chunks_mut(c_out).enumerate() {
            body(o, row);
        }
    }
}

fn get_or_zero<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

#[allow(clippy::too_many_lines)]
fn backward_op(nodes: &[Tensor], op: &Op, grads: &mut [Option<Tensor>]) {
    macro_rules! out_grad {
        ($out:expr) => {
            match &grads[$out.0] {
                Some(g) => g.clone(),
                None => return,
            }
        };
    }
    match op {
        Op::Matmul { a, b, out } => {
            let g = out_grad!(out);
            let (m, k) = (nodes[a.0].rows(), nodes[a.0].cols());
            let n = nodes[b.0].cols();
            {
                let bv = nodes[b.0].data().to_vec();
                let ga = get_or_zero(grads, *a, &[m, k]);
                kernels::matmul_nt_acc(g.data(), m, n, &bv, k, ga.data_mut());
            }
            {
                let av = nodes[a.0].data().to_vec();
                let gb = get_or_zero(grads, *b, &[k, n]);
                kernels::matmul_tn_acc(&av, m, k, g.data(), n, gb.data_mut());
            }
        }
        Op::Transpose { a, out } => {
            let g = out_grad!(out);
            let (m, n) = (nodes[a.0].rows(), nodes[a.0].cols());
            let ga = get_or_zero(grads, *a, &[m, n]);
            for i in 0..n {
                for j in 0..m {
                    let v = g.at(i, j);
                    let cur = ga.at(j, i);
                    ga.set(j, i, cur + v);
                }
            }
        }
        Op::Add { a, b, out } => {
            let g = out_grad!(out);
            get_or_zero(grads, *a, nodes[a.0].shape()).add_assign(&g);
            get_or_zero(grads, *b, nodes[b.0].shape()).add_assign(&g);
        }
        Op::Sub { a, b, out } => {
            let g = out_grad!(out);
            get_or_zero(grads, *a, nodes[a.0].shape()).add_assign(&g);
            let gb = get_or_zero(grads, *b, nodes[b.0].shape());
            for (o, gv) in gb.data_mut().iter_mut().zip(g.data()) {
                *o -= gv;
            }
        }
        Op::Mul { a, b, out } => {
            let g = out_grad!(out);
            {
                let ga = get_or_zero(grads, *a, nodes[a.0].shape());
                for ((o, gv), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[b.0].data()) {
                    *o += gv * bv;
                }
            }
            let gb = get_or_zero(grads, *b, nodes[b.0].shape());
            for ((o, gv), av) in gb.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].data()) {
                *o += gv * av;
            }
        }
        Op::Scale { a, c, out } => {
            let g = out_grad!(out);
            let ga = get_or_zero(grads, *a, nodes[a.0].shape());
            for (o, gv) in ga.data_mut().iter_mut().zip(g.data()) {
                *o += gv * c;
            }
        }
        Op::AddConst { a, out } => {
            let g = out_grad!(out);
            get_or_zero(grads, *a, nodes[a.0].shape()).add_assign(&g);
        }
        Op::AddConstRow { a, out } => {
            let g = out_grad!(out);
            get_or_zero(grads, *a, nodes[a.0].shape()).add_assign(&g);
        }
        Op::MaxConst { a, c, out } => {
            let g = out_grad!(out);
            let ga = get_or_zero(grads, *a, nodes[a.0].shape());
            for ((o, gv), av) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].data()) {
                if *av > *c {
                    *o += gv;
                }
            }
        }
        Op::AddRow { a, bias, out } => {
            let g = out_grad!(out);
            get_or_zero(grads, *a, nodes[a.0].shape()).add_assign(&g);
            let c = nodes[bias.0].len();
            let gb = get_or_zero(grads, *bias, nodes[bias.0].shape());
            for (i, gv) in g.data().iter().enumerate() {
                gb.data_mut()[i % c] += gv;
            }
        }
        Op::LeakyRelu { a, slope, out } => {
            let g = out_grad!(out);
            let ga = get_or_zero(grads, *a, nodes[a.0].shape());
            for ((o, gv), av) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].data()) {
                *o += gv * kernels::leaky_relu_grad(*av, *slope);
            }
        }
        // Derivative-value kernels: piecewise-constant in their input, so
        // nothing flows (exact almost everywhere).
        Op::NoGrad => {}
        Op::Sigmoid { a, out } => {
            let g = out_grad!(out);
            let ga = get_or_zero(grads, *a, nodes[a.0].shape());
            for ((o, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[out.0].data()) {
                *o += gv * yv * (1.0 - yv);
            }
        }
        Op::Clamp11 { a, out } => {
            let g = out_grad!(out);
            let ga = get_or_zero(grads, *a, nodes[a.0].shape());
            for ((o, gv), av) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].data()) {
                *o += gv * kernels::clamp11_grad(*av);
            }
        }
        Op::CosWindow { a, out } => {
            let g = out_grad!(out);
            let ga = get_or_zero(grads, *a, nodes[a.0].shape());
            for ((o, gv), av) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].data()) {
                *o += gv * kernels::cos_window_grad(*av);
            }
        }
        Op::CosWindowGrad { a, out } => {
            let g = out_grad!(out);
            let ga = get_or_zero(grads, *a, nodes[a.0].shape());
            let tau = std::f64::consts::TAU;
            for ((o, gv), av) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].data()) {
                *o += gv * tau * std::f64::consts::PI * (tau * av).cos();
            }
        }
        Op::Abs { a, out } => {
            let g = out_grad!(out);
            let ga = get_or_zero(grads, *a, nodes[a.0].shape());
            for ((o, gv), av) in ga.data_mut().iter_mut().zip(g.data()).zip(nodes[a.0].data()) {
                *o += gv * if *av > 0.0 { 1.0 } else if *av < 0.0 { -1.0 } else { 0.0 };
            }
        }
        Op::InstanceNorm { x, gamma, beta, eps, out } => {
            let g = out_grad!(out);
            let tx = &nodes[x.0];
            let (n, c) = (tx.rows(), tx.cols());
            let nf = n as f64;
            let gam = nodes[gamma.0].data().to_vec();
            let xd = tx.data();
            // Recompute per-channel statistics.
            for ch in 0..c {
                let mut mean = 0.0;
                for r in 0..n {
                    mean += xd[r * c + ch];
                }
                mean /= nf;
                let mut var = 0.0;
                for r in 0..n {
                    let d = xd[r * c + ch] - mean;
                    var += d * d;
                }
                var /= nf;
                let istd = 1.0 / (var + eps).sqrt();

                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for r in 0..n {
                    let dy = g.at(r, ch);
                    let xhat = (xd[r * c + ch] - mean) * istd;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
                {
                    let gg = get_or_zero(grads, *gamma, nodes[gamma.0].shape());
                    gg.data_mut()[ch] += sum_dy_xhat;
                }
                {
                    let gb = get_or_zero(grads, *beta, nodes[beta.0].shape());
                    gb.data_mut()[ch] += sum_dy;
                }
                let gx = get_or_zero(grads, *x, &[n, c]);
                for r in 0..n {
                    let dy = g.at(r, ch);
                    let xhat = (xd[r * c + ch] - mean) * istd;
                    gx.data_mut()[r * c + ch] +=
                        gam[ch] * istd * (dy - sum_dy / nf - xhat * sum_dy_xhat / nf);
                }
            }
        }
        Op::MeanPoolGroups { x, groups, out } => {
            let g = out_grad!(out);
            let c = nodes[x.0].cols();
            let gx = get_or_zero(grads, *x, nodes[x.0].shape());
            for (gi, &(lo, hi)) in groups.iter().enumerate() {
                let cnt = (hi - lo) as f64;
                let grow = &g.data()[gi * c..(gi + 1) * c];
                for r in lo..hi {
                    let xrow = &mut gx.data_mut()[r as usize * c..(r as usize + 1) * c];
                    for (o, &gv) in xrow.iter_mut().zip(grow) {
                        *o += gv / cnt;
                    }
                }
            }
        }
        Op::GatherRows { x, idx, out } => {
            let g = out_grad!(out);
            let c = nodes[x.0].cols();
            let gx = get_or_zero(grads, *x, nodes[x.0].shape());
            for (r, &i) in idx.iter().enumerate() {
                let dst = &mut gx.data_mut()[i as usize * c..(i as usize + 1) * c];
                for (o, &gv) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                    *o += gv;
                }
            }
        }
        Op::GatherRowsOrZero { x, idx, out } => {
            let g = out_grad!(out);
            let c = nodes[x.0].cols();
            let gx = get_or_zero(grads, *x, nodes[x.0].shape());
            for (r, &i) in idx.iter().enumerate() {
                if let Some(i) = i {
                    let dst = &mut gx.data_mut()[i as usize * c..(i as usize + 1) * c];
                    for (o, &gv) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *o += gv;
                    }
                }
            }
        }
        Op::WeightedGather { x, idx, w, out } => {
            let g = out_grad!(out);
            let c = nodes[x.0].cols();
            let gx = get_or_zero(grads, *x, nodes[x.0].shape());
            for r in 0..idx.len() {
                let grow = &g.data()[r * c..(r + 1) * c];
                for j in 0..8 {
                    let wv = w[r][j];
                    if wv == 0.0 {
                        continue;
                    }
                    let i = idx[r][j] as usize;
                    let dst = &mut gx.data_mut()[i * c..(i + 1) * c];
                    for (o, &gv) in dst.iter_mut().zip(grow) {
                        *o += wv * gv;
                    }
                }
            }
        }
        Op::Trilerp { corners, uvw, out } => {
            let g = out_grad!(out);
            let tc = &nodes[corners.0];
            let c = tc.cols();
            let ud = nodes[uvw.0].data();
            let u = [ud[0], ud[1], ud[2]];
            {
                let gc = get_or_zero(grads, *corners, &[8, c]);
                for bits in 0..8 {
                    let w = kernels::trilinear_weight(bits, u);
                    let dst = &mut gc.data_mut()[bits * c..(bits + 1) * c];
                    for (o, &gv) in dst.iter_mut().zip(g.data()) {
                        *o += w * gv;
                    }
                }
            }
            let gu = get_or_zero(grads, *uvw, &[1, 3]);
            for bits in 0..8 {
                let dw = kernels::trilinear_weight_grad(bits, u);
                let mut dot = 0.0;
                for (cv, gv) in tc.row(bits).iter().zip(g.data()) {
                    dot += cv * gv;
                }
                for a in 0..3 {
                    gu.data_mut()[a] += dw[a] * dot;
                }
            }
        }
        Op::ConcatCols { a, b, out } => {
            let g = out_grad!(out);
            let (ca, cb) = (nodes[a.0].cols(), nodes[b.0].cols());
            let n = nodes[a.0].rows();
            {
                let ga = get_or_zero(grads, *a, nodes[a.0].shape());
                for r in 0..n {
                    let src = &g.data()[r * (ca + cb)..r * (ca + cb) + ca];
                    for (o, &gv) in ga.data_mut()[r * ca..(r + 1) * ca].iter_mut().zip(src) {
                        *o += gv;
                    }
                }
            }
            let gb = get_or_zero(grads, *b, nodes[b.0].shape());
            for r in 0..n {
                let src = &g.data()[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                for (o, &gv) in gb.data_mut()[r * cb..(r + 1) * cb].iter_mut().zip(src) {
                    *o += gv;
                }
            }
        }
        Op::ConcatRows { a, b, out } => {
            let g = out_grad!(out);
            let na = nodes[a.0].len();
            {
                let ga = get_or_zero(grads, *a, nodes[a.0].shape());
                for (o, &gv) in ga.data_mut().iter_mut().zip(&g.data()[..na]) {
                    *o += gv;
                }
            }
            let gb = get_or_zero(grads, *b, nodes[b.0].shape());
            for (o, &gv) in gb.data_mut().iter_mut().zip(&g.data()[na..]) {
                *o += gv;
            }
        }
        Op::SliceCols { a, lo, hi, out } => {
            let g = out_grad!(out);
            let c = nodes[a.0].cols();
            let n = nodes[a.0].rows();
            let ga = get_or_zero(grads, *a, &[n, c]);
            for r in 0..n {
                let src = &g.data()[r * (hi - lo)..(r + 1) * (hi - lo)];
                for (j, &gv) in src.iter().enumerate() {
                    ga.data_mut()[r * c + lo + j] += gv;
                }
            }
        }
        Op::RowDot { a, b, out } => {
            let g = out_grad!(out);
            let (n, c) = (nodes[a.0].rows(), nodes[a.0].cols());
            {
                let ga = get_or_zero(grads, *a, &[n, c]);
                for r in 0..n {
                    let gv = g.data()[r];
                    for (o, &bv) in ga.data_mut()[r * c..(r + 1) * c].iter_mut().zip(nodes[b.0].row(r)) {
                        *o += gv * bv;
                    }
                }
            }
            let gb = get_or_zero(grads, *b, &[n, c]);
            for r in 0..n {
                let gv = g.data()[r];
                for (o, &av) in gb.data_mut()[r * c..(r + 1) * c].iter_mut().zip(nodes[a.0].row(r)) {
                    *o += gv * av;
                }
            }
        }
        Op::RowNorm { a, out } => {
            let g = out_grad!(out);
            let (n, c) = (nodes[a.0].rows(), nodes[a.0].cols());
            let ga = get_or_zero(grads, *a, &[n, c]);
            for r in 0..n {
                let norm = nodes[out.0].data()[r];
                if norm <= 1e-300 {
                    continue;
                }
                let gv = g.data()[r] / norm;
                for (o, &av) in ga.data_mut()[r * c..(r + 1) * c].iter_mut().zip(nodes[a.0].row(r)) {
                    *o += gv * av;
                }
            }
        }
        Op::SumAll { a, out } => {
            let g = out_grad!(out).data()[0];
            let ga = get_or_zero(grads, *a, nodes[a.0].shape());
            ga.data_mut().iter_mut().for_each(|o| *o += g);
        }
        Op::MeanAll { a, out } => {
            let g = out_grad!(out).data()[0] / nodes[a.0].len() as f64;
            let ga = get_or_zero(grads, *a, nodes[a.0].shape());
            ga.data_mut().iter_mut().for_each(|o| *o += g);
        }
        Op::BceMean { p, labels, out } => {
            let g = out_grad!(out).data()[0] / labels.len() as f64;
            let gp = get_or_zero(grads, *p, nodes[p.0].shape());
            for ((o, &pv), &y) in gp.data_mut().iter_mut().zip(nodes[p.0].data()).zip(labels.iter()) {
                if pv > BCE_EPS && pv < 1.0 - BCE_EPS {
                    *o += g * (pv - y) / (pv * (1.0 - pv));
                }
            }
        }
        Op::PairConv { x, w, table, out } => {
            let g = out_grad!(out);
            let c_in = nodes[x.0].cols();
            let c_out = nodes[w.0].cols();
            let wv = nodes[w.0].data().to_vec();
            let xv = nodes[x.0].data().to_vec();
            {
                // d x[i,:] += sum over (o, tap) of g[o,:] * w[tap]^T
                let gx = get_or_zero(grads, *x, nodes[x.0].shape());
                let body = |i: usize, xrow: &mut [f64]| {
                    let lo = table.bwd_off[i] as usize;
                    let hi = table.bwd_off[i + 1] as usize;
                    for &(o, tap) in &table.bwd[lo..hi] {
                        let grow = &g.data()[o as usize * c_out..(o as usize + 1) * c_out];
                        let wblock = &wv[tap as usize * c_in * c_out..(tap as usize + 1) * c_in * c_out];
                        for (ci, ov) in xrow.iter_mut().enumerate() {
                            let wrow = &wblock[ci * c_out..(ci + 1) * c_out];
                            let mut s = 0.0;
                            for (&gvv, &wvv) in grow.iter().zip(wrow) {
                                s += gvv * wvv;
                            }
                            *ov += s;
                        }
                    }
                };
                let flops = table.bwd.len() * c_in * c_out;
                if flops >= 1 << 20 && table.n_in > 1 {
                    gx.data_mut().par_chunks_mut(c_in).enumerate().for_each(|(i, r)| body(i, r));
                } else {
                    for (i, r) in gx.data_mut().chunks_mut(c_in).enumerate() {
                        body(i, r);
                    }
                }
            }
            {
                // d w[tap] += sum over pairs with that tap of x[i,:]^T g[o,:]
                let gw = get_or_zero(grads, *w, nodes[w.0].shape());
                let block = c_in * c_out;
                let body = |tap: usize, wblock: &mut [f64]| {
                    for &(i, o) in &table.by_tap[tap] {
                        let xrow = &xv[i as usize * c_in..(i as usize + 1) * c_in];
                        let grow = &g.data()[o as usize * c_out..(o as usize + 1) * c_out];
                        for (ci, &xvv) in xrow.iter().enumerate() {
                            if xvv == 0.0 {
                                continue;
                            }
                            let dst = &mut wblock[ci * c_out..(ci + 1) * c_out];
                            for (ov, &gvv) in dst.iter_mut().zip(grow) {
                                *ov += xvv * gvv;
                            }
                        }
                    }
                };
                let flops = table.fwd.len() * c_in * c_out;
                if flops >= 1 << 20 && table.taps > 1 {
                    gw.data_mut().par_chunks_mut(block).enumerate().for_each(|(t, b)| body(t, b));
                } else {
                    for (t, b) in gw.data_mut().chunks_mut(block).enumerate() {
                        body(t, b);
                    }
                }
            }
        }
        Op::RayPoint { t, d, out } => {
            let g = out_grad!(out);
            let gt = get_or_zero(grads, *t, &[1]);
            gt.data_mut()[0] += g.data()[0] * d[0] + g.data()[1] * d[1] + g.data()[2] * d[2];
        }
    }
}
