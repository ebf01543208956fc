//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates parameter
//! gradients into the [`ParamStore`] the parameters were read from.

use std::sync::atomic::{AtomicU64, Ordering};

use super::scalar::{gemm_into, MatView};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{shape_err, Result, TpeError};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    BatchMatMul { a: usize, b: usize, tb: bool },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Silu(usize),
    RmsNorm { x: usize, gain: usize, inv: Vec<T> },
    Softmax { x: usize },
    Embedding { table: usize, ids: Vec<usize> },
    PermuteRows { x: usize, perm: Vec<usize> },
    Rope { x: usize, cos: Vec<T>, sin: Vec<T> },
    SplitHeads { x: usize, heads: usize },
    MergeHeads { x: usize },
    Reshape(usize),
    SelectLast { x: usize, j: usize },
    ScaleRows { x: usize, w: usize },
    Entropy { p: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), macs: 0 }
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        &self.nodes[v.idx].value
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(TpeError::NotRecorded);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => inputs(&op).iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var { graph: self.id, idx: self.nodes.len() - 1 })
    }

    /// Records a constant (no gradient flows into it).
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input, "input")
    }

    /// Records a trainable parameter read from `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id), "param")
    }

    /// 2-D matrix product `op(a) * op(b)`, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let va = MatView::new(av.data(), av.shape()[0], av.shape()[1]).t_if(ta);
        let vb = MatView::new(bv.data(), bv.shape()[0], bv.shape()[1]).t_if(tb);
        if va.cols != vb.rows {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![T::zero(); va.rows * vb.cols];
        gemm_into(va, vb, T::zero(), &mut out);
        self.macs += (va.rows * va.cols * vb.cols) as u64;
        let t = Tensor::new(vec![va.rows, vb.cols], out)?;
        self.push(t, Op::MatMul { a: ai, b: bi, ta, tb }, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product over the leading axis: `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let va = MatView::new(&av.data()[i * m * k..(i + 1) * m * k], m, k);
            let vb = MatView::new(&bv.data()[i * k * n..(i + 1) * k * n], sb[1], sb[2]).t_if(tb);
            gemm_into(va, vb, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        self.macs += (batch * m * k * n) as u64;
        let t = Tensor::new(vec![batch, m, n], out)?;
        self.push(t, Op::BatchMatMul { a: ai, b: bi, tb }, "batch_matmul")
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ai, bi)?;
        let av = &self.nodes[ai].value;
        let data = av.data().iter().zip(self.nodes[bi].value.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Add(ai, bi), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ai, bi)?;
        let av = &self.nodes[ai].value;
        let data = av.data().iter().zip(self.nodes[bi].value.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Mul(ai, bi), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ai = self.idx(a)?;
        let av = &self.nodes[ai].value;
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * c).collect())?;
        self.push(t, Op::Scale(ai, c), "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let s = self.nodes[ai].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(ai), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let av = &self.nodes[ai].value;
        let data = av.data().iter().map(|&x| x * sigmoid(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Silu(ai), "silu")
    }

    /// Root-mean-square normalisation over the last axis, scaled by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xi, gi) = (self.idx(x)?, self.idx(gain)?);
        let (xv, gv) = (&self.nodes[xi].value, &self.nodes[gi].value);
        let d = xv.last_dim();
        if d == 0 || gv.shape() != [d] {
            return Err(shape_err("rms_norm", format!("{:?} with gain {:?}", xv.shape(), gv.shape())));
        }
        let eps = T::from_f64(eps);
        let rows = xv.numel() / d;
        let mut out = vec![T::zero(); xv.numel()];
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::from_f64(d as f64);
            let s = T::one() / (ms + eps).sqrt();
            inv.push(s);
            for (o, (&v, &g)) in out[r * d..(r + 1) * d].iter_mut().zip(row.iter().zip(gv.data())) {
                *o = v * s * g;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::RmsNorm { x: xi, gain: gi, inv }, "rms_norm")
    }

    /// Softmax over the last axis. `mask[i % mask.len()] == false` excludes an entry;
    /// a mask covering one `[rows x n]` block is broadcast over leading axes.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = softmax_rows(&self.nodes[xi].value, mask)?;
        self.push(out, Op::Softmax { x: xi }, "softmax")
    }

    /// Row lookup: `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.idx(table)?;
        let tv = &self.nodes[ti].value;
        if tv.shape().len() != 2 {
            return Err(shape_err("embedding", format!("table {:?}", tv.shape())));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(shape_err("embedding", format!("id {id} >= {rows}")));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push(t, Op::Embedding { table: ti, ids: ids.to_vec() }, "embedding")
    }

    /// Reorders axis 1 of a `[B, M, C]` tensor: `out[b, i] = x[b, perm[i]]`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 3 || perm.len() != s[1] || perm.iter().any(|&p| p >= s[1]) {
            return Err(shape_err("permute_rows", format!("{s:?} with {} indices", perm.len())));
        }
        let (b, m, c) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(xv.numel());
        for bi in 0..b {
            for &p in perm {
                let off = (bi * m + p) * c;
                out.extend_from_slice(&xv.data()[off..off + c]);
            }
        }
        let t = Tensor::new(s.to_vec(), out)?;
        self.push(t, Op::PermuteRows { x: xi, perm: perm.to_vec() }, "permute_rows")
    }

    /// Rotates consecutive pairs of the last axis of `[B, M, d]` by `positions[m] * theta[i]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: &[f64]) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 3 || s[1] != positions.len() || s[2] != 2 * theta.len() {
            return Err(shape_err("rope", format!("{s:?}, {} positions, {} freqs", positions.len(), theta.len())));
        }
        let half = theta.len();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for &th in theta {
                let (sn, cs) = (p as f64 * th).sin_cos();
                cos.push(T::from_f64(cs));
                sin.push(T::from_f64(sn));
            }
        }
        let out = rotate_pairs(xv.data(), s[1], half, &cos, &sin, false);
        let t = Tensor::new(s.to_vec(), out)?;
        self.push(t, Op::Rope { x: xi, cos, sin }, "rope")
    }

    /// `[M, H*d] -> [H, M, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 2 || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(shape_err("split_heads", format!("{s:?} into {heads} heads")));
        }
        let (m, d) = (s[0], s[1] / heads);
        let out = transpose_012_to_102(xv.data(), m, heads, d);
        let t = Tensor::new(vec![heads, m, d], out)?;
        self.push(t, Op::SplitHeads { x: xi, heads }, "split_heads")
    }

    /// `[H, M, d] -> [M, H*d]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 3 {
            return Err(shape_err("merge_heads", format!("{s:?}")));
        }
        let (h, m, d) = (s[0], s[1], s[2]);
        let out = transpose_012_to_102(xv.data(), h, m, d);
        let t = Tensor::new(vec![m, h * d], out)?;
        self.push(t, Op::MergeHeads { x: xi }, "merge_heads")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.nodes[xi].value.clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(xi), "reshape")
    }

    /// Drops the last axis by picking index `j` of it.
    pub fn select_last(&mut self, x: Var, j: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        let n = xv.last_dim();
        if s.is_empty() || j >= n {
            return Err(shape_err("select_last", format!("index {j} of {s:?}")));
        }
        let data = xv.data().chunks(n).map(|row| row[j]).collect();
        let t = Tensor::new(s[..s.len() - 1].to_vec(), data)?;
        self.push(t, Op::SelectLast { x: xi, j }, "select_last")
    }

    /// `out[.., c] = x[.., c] * w[..]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let (xv, wv) = (&self.nodes[xi].value, &self.nodes[wi].value);
        let s = xv.shape();
        if s.is_empty() || wv.shape() != &s[..s.len() - 1] {
            return Err(shape_err("scale_rows", format!("{s:?} by {:?}", wv.shape())));
        }
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for (row, &w) in out.chunks_mut(c).zip(wv.data()) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        let t = Tensor::new(s.to_vec(), out)?;
        self.push(t, Op::ScaleRows { x: xi, w: wi }, "scale_rows")
    }

    /// Shannon entropy (natural log) of each distribution along the last axis, `0 log 0 = 0`.
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let pi = self.idx(p)?;
        let pv = &self.nodes[pi].value;
        let s = pv.shape();
        if s.is_empty() {
            return Err(shape_err("entropy", "scalar input"));
        }
        let n = pv.last_dim();
        let data = pv.data().chunks(n).map(entropy_of).collect();
        let t = Tensor::new(s[..s.len() - 1].to_vec(), data)?;
        self.push(t, Op::Entropy { p: pi }, "entropy")
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let li = self.idx(logits)?;
        let lv = &self.nodes[li].value;
        if lv.shape().len() != 2 || lv.shape()[0] != targets.len() || mask.len() != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?}, {} targets, {} mask", lv.shape(), targets.len(), mask.len()),
            ));
        }
        let v = lv.shape()[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TpeError::EmptyLossMask);
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = 0.0f64;
        for (r, row) in lv.data().chunks(v).enumerate() {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(shape_err("cross_entropy", format!("target {t} >= {v}")));
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - mx).exp();
                z += *p;
            }
            probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p = *p / z);
            total += (mx + z.ln() - row[t]).as_f64();
        }
        let loss = T::from_f64(total / count as f64);
        let op = Op::CrossEntropy { logits: li, targets: targets.to_vec(), mask: mask.to_vec(), probs, count };
        self.push(Tensor::scalar(loss), op, "cross_entropy")
    }

    /// Accumulates d`loss`/d(parameter) into `store` for every parameter read by this graph.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.nodes[li].value.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn backward_node(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let wants = |j: usize| nodes[j].needs_grad;
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                grads[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.numel()])
            }};
        }
        match &node.op {
            Op::Input => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                let va = MatView::new(av.data(), av.shape()[0], av.shape()[1]).t_if(ta);
                let vb = MatView::new(bv.data(), bv.shape()[0], bv.shape()[1]).t_if(tb);
                let dc = MatView::new(g, va.rows, vb.cols);
                if wants(a) {
                    if ta {
                        gemm_into(vb, dc.t(), T::one(), acc!(a));
                    } else {
                        gemm_into(dc, vb.t(), T::one(), acc!(a));
                    }
                }
                if wants(b) {
                    if tb {
                        gemm_into(dc.t(), va, T::one(), acc!(b));
                    } else {
                        gemm_into(va.t(), dc, T::one(), acc!(b));
                    }
                }
            }
            &Op::BatchMatMul { a, b, tb } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                let (sa, sb) = (av.shape(), bv.shape());
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if tb { sb[1] } else { sb[2] };
                for bi in 0..batch {
                    let va = MatView::new(&av.data()[bi * m * k..(bi + 1) * m * k], m, k);
                    let vb = MatView::new(&bv.data()[bi * k * n..(bi + 1) * k * n], sb[1], sb[2]).t_if(tb);
                    let dc = MatView::new(&g[bi * m * n..(bi + 1) * m * n], m, n);
                    if wants(a) {
                        gemm_into(dc, vb.t(), T::one(), &mut acc!(a)[bi * m * k..(bi + 1) * m * k]);
                    }
                    if wants(b) {
                        let out = &mut acc!(b)[bi * k * n..(bi + 1) * k * n];
                        if tb {
                            gemm_into(dc.t(), va, T::one(), out);
                        } else {
                            gemm_into(va.t(), dc, T::one(), out);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for j in [a, b] {
                    if wants(j) {
                        acc!(j).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = nodes[b].value.data();
                    acc!(a).iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (&x, &y))| *d += x * y);
                }
                if wants(b) {
                    let av = nodes[a].value.data();
                    acc!(b).iter_mut().zip(g.iter().zip(av)).for_each(|(d, (&x, &y))| *d += x * y);
                }
            }
            &Op::Scale(a, c) => {
                acc!(a).iter_mut().zip(g).for_each(|(d, &x)| *d += x * c);
            }
            &Op::Sum(a) => {
                let s = g[0];
                acc!(a).iter_mut().for_each(|d| *d += s);
            }
            &Op::Silu(a) => {
                let xv = nodes[a].value.data();
                acc!(a).iter_mut().zip(g.iter().zip(xv)).for_each(|(d, (&gy, &x))| {
                    let s = sigmoid(x);
                    *d += gy * s * (T::one() + x * (T::one() - s));
                });
            }
            Op::RmsNorm { x, gain, inv } => {
                let (x, gain) = (*x, *gain);
                let xv = nodes[x].value.data();
                let gv = nodes[gain].value.data();
                let dm = gv.len();
                let dn = T::from_f64(dm as f64);
                if wants(gain) {
                    let dg = acc!(gain);
                    for (r, &s) in inv.iter().enumerate() {
                        for c in 0..dm {
                            dg[c] += g[r * dm + c] * xv[r * dm + c] * s;
                        }
                    }
                }
                if wants(x) {
                    let dx = acc!(x);
                    for (r, &s) in inv.iter().enumerate() {
                        let row = r * dm..(r + 1) * dm;
                        let dot: T = g[row.clone()]
                            .iter()
                            .zip(gv)
                            .zip(&xv[row.clone()])
                            .map(|((&gy, &w), &xx)| gy * w * xx * s)
                            .sum();
                        for c in 0..dm {
                            let xh = xv[r * dm + c] * s;
                            let dxh = g[r * dm + c] * gv[c];
                            dx[r * dm + c] += s * (dxh - xh * dot / dn);
                        }
                    }
                }
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let dx = acc!(x);
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yy), &gy) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d += yy * (gy - dot);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].value.shape()[1];
                let dt = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
            }
            Op::PermuteRows { x, perm } => {
                let s = node.value.shape();
                let (b, m, c) = (s[0], s[1], s[2]);
                let dx = acc!(*x);
                for bi in 0..b {
                    for (i, &p) in perm.iter().enumerate() {
                        let src = (bi * m + i) * c;
                        let dst = (bi * m + p) * c;
                        for k in 0..c {
                            dx[dst + k] += g[src + k];
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin } => {
                let s = node.value.shape();
                let back = rotate_pairs(g, s[1], s[2] / 2, cos, sin, true);
                acc!(*x).iter_mut().zip(back).for_each(|(d, v)| *d += v);
            }
            &Op::SplitHeads { x, heads } => {
                let s = node.value.shape();
                let back = transpose_012_to_102(g, heads, s[1], s[2]);
                acc!(x).iter_mut().zip(back).for_each(|(d, v)| *d += v);
            }
            &Op::MergeHeads { x } => {
                let s = nodes[x].value.shape();
                let back = transpose_012_to_102(g, s[1], s[0], s[2]);
                acc!(x).iter_mut().zip(back).for_each(|(d, v)| *d += v);
            }
            &Op::Reshape(x) => {
                acc!(x).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            &Op::SelectLast { x, j } => {
                let n = nodes[x].value.last_dim();
                for (row, &gv) in acc!(x).chunks_mut(n).zip(g) {
                    row[j] += gv;
                }
            }
            &Op::ScaleRows { x, w } => {
                let c = nodes[x].value.last_dim();
                if wants(x) {
                    let wv = nodes[w].value.data();
                    for ((row, gr), &ww) in acc!(x).chunks_mut(c).zip(g.chunks(c)).zip(wv) {
                        row.iter_mut().zip(gr).for_each(|(d, &gy)| *d += gy * ww);
                    }
                }
                if wants(w) {
                    let xv = nodes[x].value.data();
                    for ((d, gr), xr) in acc!(w).iter_mut().zip(g.chunks(c)).zip(xv.chunks(c)) {
                        *d += gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            &Op::Entropy { p } => {
                let pv = nodes[p].value.data();
                let n = nodes[p].value.last_dim();
                for ((row, pr), &gy) in acc!(p).chunks_mut(n).zip(pv.chunks(n)).zip(g) {
                    for (d, &q) in row.iter_mut().zip(pr) {
                        if q > T::zero() {
                            *d -= gy * (q.ln() + T::one());
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let v = nodes[*logits].value.shape()[1];
                let scale = g[0] / T::from_f64(*count as f64);
                let dl = acc!(*logits);
                for (r, &t) in targets.iter().enumerate() {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..v {
                        dl[r * v + c] += scale * probs[r * v + c];
                    }
                    dl[r * v + t] -= scale;
                }
            }
        }
        Ok(())
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
        Op::ScaleRows { x, w } => vec![*x, *w],
        Op::Scale(a, _) | Op::Sum(a) | Op::Silu(a) | Op::Reshape(a) => vec![*a],
        Op::Softmax { x }
        | Op::PermuteRows { x, .. }
        | Op::Rope { x, .. }
        | Op::SplitHeads { x, .. }
        | Op::MergeHeads { x }
        | Op::SelectLast { x, .. } => vec![*x],
        Op::Embedding { table, .. } => vec![*table],
        Op::Entropy { p } => vec![*p],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn entropy_of<T: Scalar>(p: &[T]) -> T {
    p.iter().filter(|&&q| q > T::zero()).map(|&q| -q * q.ln()).sum()
}

/// Max-subtracted softmax over the last axis with an optional broadcast mask.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let n = x.last_dim();
    if n == 0 {
        return Err(shape_err("softmax", "empty last axis"));
    }
    if let Some(m) = mask {
        if m.is_empty() || m.len() % n != 0 || !x.numel().is_multiple_of(m.len()) {
            return Err(shape_err("softmax", format!("mask of {} for {:?}", m.len(), x.shape())));
        }
    }
    let mut out = vec![T::zero(); x.numel()];
    for (r, (row, o)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let allowed = |c: usize| mask.is_none_or(|m| m[(r * n + c) % m.len()]);
        let mx = (0..n).filter(|&c| allowed(c)).map(|c| row[c]).fold(None, |acc: Option<T>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        });
        let Some(mx) = mx else {
            return Err(TpeError::FullyMaskedRow { row: r });
        };
        let mut z = T::zero();
        for c in 0..n {
            if allowed(c) {
                o[c] = (row[c] - mx).exp();
                z += o[c];
            }
        }
        o.iter_mut().for_each(|v| *v = *v / z);
    }
    Tensor::new(x.shape().to_vec(), out)?.check_finite("softmax")
}

fn rotate_pairs<T: Scalar>(x: &[T], m: usize, half: usize, cos: &[T], sin: &[T], inverse: bool) -> Vec<T> {
    let d = 2 * half;
    let mut out = vec![T::zero(); x.len()];
    for (row_idx, (xr, or)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let pos = row_idx % m;
        let (c, s) = (&cos[pos * half..(pos + 1) * half], &sin[pos * half..(pos + 1) * half]);
        for i in 0..half {
            let (a, b) = (xr[2 * i], xr[2 * i + 1]);
            let sn = if inverse { -s[i] } else { s[i] };
            or[2 * i] = a * c[i] - b * sn;
            or[2 * i + 1] = a * sn + b * c[i];
        }
    }
    out
}

/// `[a, b, c] -> [b, a, c]`.
fn transpose_012_to_102<T: Copy>(x: &[T], a: usize, b: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for j in 0..b {
        for i in 0..a {
            let off = (i * b + j) * c;
            out.extend_from_slice(&x[off..off + c]);
        }
    }
    out
}
