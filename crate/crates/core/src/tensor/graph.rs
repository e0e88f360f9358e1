use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor, TensorError};
use crate::seed::keyed_uniform;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether `dropout` calls are active on a graph. Masks are a pure function
/// of `(seed, step, site, element)`, where `site` counts dropout calls on the
/// graph in recording order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    Keyed { seed: u64, step: u64 },
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    BmmNt { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    ScaleCols { x: Var, w: Var },
    Scale { x: Var, factor: T },
    Passthrough { x: Var },
    Relu { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, eps: T, probs: Vec<T>, count: usize },
    Sum { x: Var },
    Select { x: Var, index: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of primitive operations. Nodes are appended in evaluation order, so
/// walking them backwards is a reverse topological traversal.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    dropout: DropoutMode,
    dropout_sites: u64,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Vec<T> {
        self.get(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); self.lens[var.0]])
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new(DropoutMode::Off)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(dropout: DropoutMode) -> Self {
        Graph {
            nodes: Vec::new(),
            dropout,
            dropout_sites: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dropout_mode(&self) -> DropoutMode {
        self.dropout
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::new(&node.shape, node.value.clone()).expect("graph node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `tensor` as a leaf. Gradients are tracked iff the tensor
    /// requires them.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let v = self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            &[],
        );
        self.nodes[v.0].needs_grad = tensor.requires_grad();
        v
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var, TensorError> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, &[]))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b, m, k, n }, &[a, b]))
    }

    /// Batched `a[B×m×k] · b[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(self.mismatch("bmm", a, b));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            gemm_nn(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(vec![batch, m, n], out, Op::Bmm { a, b, batch, m, k, n }, &[a, b]))
    }

    /// Batched `a[B×m×k] · b[B×n×k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(self.mismatch("bmm_nt", a, b));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            gemm_nt(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(vec![batch, m, n], out, Op::BmmNt { a, b, batch, m, k, n }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, &[a, b]))
    }

    fn check_last_dim(&self, op: &'static str, x: Var, v: Var) -> Result<usize, TensorError> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(v) != [d] {
            return Err(self.mismatch(op, x, v));
        }
        Ok(d)
    }

    /// `x[..×d] + bias[d]`, the bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let d = self.check_last_dim("add_bias", x, bias)?;
        let b = self.value(bias);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x[..×d] ⊙ w[d]`, the scale broadcast over rows.
    pub fn scale_cols(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let d = self.check_last_dim("scale_cols", x, w)?;
        let s = self.value(w);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v * s[i % d]).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleCols { x, w }, &[x, w]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }, &[x])
    }

    /// `x + c` for a constant `c` of the same shape (positions, masks).
    pub fn add_const(&mut self, x: Var, c: &[T]) -> Result<Var, TensorError> {
        if c.len() != self.value(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let out = self.value(x).iter().zip(c).map(|(&v, &k)| v + k).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Passthrough { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if numel(shape) != self.value(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Passthrough { x }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu { x }, &[x])
    }

    /// Softmax along `axis`, shifted by the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Layer normalization over the last axis followed by `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let d = self.check_last_dim("layer_norm", x, gain)?;
        self.check_last_dim("layer_norm", x, bias)?;
        let rows = self.value(x).len() / d;
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let dt = T::from_count(d);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let s = (var + eps).sqrt().recip();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
        ))
    }

    /// Rows of `table[V×d]` selected by `ids`, giving `[ids.len()×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(self.mismatch("gather", table, table));
        }
        let (rows, d) = (shape[0], shape[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, len: rows });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather { table, ids: ids.to_vec() },
            &[table],
        ))
    }

    /// Inverted dropout. Identity when the graph's dropout is off or `rate`
    /// is zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let DropoutMode::Keyed { seed, step } = self.dropout else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let site = self.dropout_sites;
        self.dropout_sites += 1;
        let keep = T::cast_f64(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n as u64)
            .map(|i| {
                if keyed_uniform(seed, step, site, i) < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, &[x])
    }

    /// `[B·S × H·dh]` to `[B·H × S × dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || !shape[0].is_multiple_of(batch) || !shape[1].is_multiple_of(heads) {
            return Err(TensorError::ShapeMismatch {
                op: "split_heads",
                lhs: shape,
                rhs: vec![batch, heads],
            });
        }
        let (seq, dh) = (shape[0] / batch, shape[1] / heads);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + s) * shape[1] + h * dh;
                    let dst = ((b * heads + h) * seq + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        Ok(self.push(
            vec![batch * heads, seq, dh],
            out,
            Op::SplitHeads { x, batch, seq, heads },
            &[x],
        ))
    }

    /// `[B·H × S × dh]` to `[B·S × H·dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || !shape[0].is_multiple_of(batch) {
            return Err(TensorError::ShapeMismatch {
                op: "merge_heads",
                lhs: shape,
                rhs: vec![batch],
            });
        }
        let (heads, seq, dh) = (shape[0] / batch, shape[1], shape[2]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let dst = (b * seq + s) * heads * dh + h * dh;
                    let src = ((b * heads + h) * seq + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        Ok(self.push(
            vec![batch * seq, heads * dh],
            out,
            Op::MergeHeads { x, batch, seq, heads },
            &[x],
        ))
    }

    /// Mean label-smoothed negative log-likelihood over the rows of
    /// `logits[T×V]` whose target is not `pad`. The smoothed target puts
    /// `1 - eps + eps/V` on the gold token and `eps/V` elsewhere.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = shape[1];
        let mut rows = Vec::with_capacity(targets.len());
        for (position, &t) in targets.iter().enumerate() {
            if t == pad {
                rows.push(None);
            } else if t >= v {
                return Err(TensorError::TargetOutOfRange { position, target: t, vocab: v });
            } else {
                rows.push(Some(t));
            }
        }
        let eps_t = T::cast_f64(eps);
        let uniform = eps_t / T::from_count(v);
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, target) in rows.iter().enumerate() {
            let Some(t) = *target else { continue };
            count += 1;
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            let mut smooth = T::zero();
            for (j, &z) in row.iter().enumerate() {
                let logp = z - lse;
                probs[r * v + j] = logp.exp();
                smooth -= logp;
            }
            let nll = lse - row[t];
            total += (T::one() - eps_t) * nll + uniform * smooth;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_count(count)
        };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: rows, eps: eps_t, probs, count },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![total], Op::Sum { x }, &[x])
    }

    /// Scalar element `index` of the flattened `x`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let len = self.value(x).len();
        if index >= len {
            return Err(TensorError::IndexOutOfRange { index, len });
        }
        let v = self.value(x)[index];
        Ok(self.push(vec![1], vec![v], Op::Select { x, index }, &[x]))
    }

    /// Reverse sweep from the scalar `loss`. Every node reachable from `loss`
    /// that tracks gradients receives the sum of its use sites' contributions.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..count).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..count).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
        }

        Ok(Gradients {
            grads,
            lens: self.nodes[..count].iter().map(|n| n.value.len()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut sink = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(g);
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                sink(a, &mut |g| gemm_nt(dy, self.value(b), g, m, n, k));
                sink(b, &mut |g| gemm_tn(self.value(a), dy, g, m, k, n));
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                sink(a, &mut |g| gemm_nn(dy, self.value(b), g, m, n, k));
                sink(b, &mut |g| gemm_tn(dy, self.value(a), g, m, n, k));
            }
            &Op::Bmm { a, b, batch, m, k, n } => {
                let (va, vb) = (self.value(a), self.value(b));
                sink(a, &mut |g| {
                    for i in 0..batch {
                        gemm_nt(
                            &dy[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut g[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                sink(b, &mut |g| {
                    for i in 0..batch {
                        gemm_tn(
                            &va[i * m * k..(i + 1) * m * k],
                            &dy[i * m * n..(i + 1) * m * n],
                            &mut g[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            &Op::BmmNt { a, b, batch, m, k, n } => {
                let (va, vb) = (self.value(a), self.value(b));
                sink(a, &mut |g| {
                    for i in 0..batch {
                        gemm_nn(
                            &dy[i * m * n..(i + 1) * m * n],
                            &vb[i * n * k..(i + 1) * n * k],
                            &mut g[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                sink(b, &mut |g| {
                    for i in 0..batch {
                        gemm_tn(
                            &dy[i * m * n..(i + 1) * m * n],
                            &va[i * m * k..(i + 1) * m * k],
                            &mut g[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
            }
            &Op::Add { a, b } => {
                sink(a, &mut |g| add_into(g, dy));
                sink(b, &mut |g| add_into(g, dy));
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                sink(a, &mut |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(vb) {
                        *g += d * y;
                    }
                });
                sink(b, &mut |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(va) {
                        *g += d * x;
                    }
                });
            }
            &Op::AddBias { x, bias } => {
                sink(x, &mut |g| add_into(g, dy));
                sink(bias, &mut |g| {
                    let d = g.len();
                    for (i, &v) in dy.iter().enumerate() {
                        g[i % d] += v;
                    }
                });
            }
            &Op::ScaleCols { x, w } => {
                let (vx, vw) = (self.value(x), self.value(w));
                let d = vw.len();
                sink(x, &mut |g| {
                    for (i, (g, &v)) in g.iter_mut().zip(dy).enumerate() {
                        *g += v * vw[i % d];
                    }
                });
                sink(w, &mut |g| {
                    for (i, (&v, &xv)) in dy.iter().zip(vx).enumerate() {
                        g[i % d] += v * xv;
                    }
                });
            }
            &Op::Scale { x, factor } => {
                sink(x, &mut |g| {
                    for (g, &v) in g.iter_mut().zip(dy) {
                        *g += v * factor;
                    }
                });
            }
            &Op::Passthrough { x } => sink(x, &mut |g| add_into(g, dy)),
            &Op::Relu { x } => {
                let vx = self.value(x);
                sink(x, &mut |g| {
                    for ((g, &v), &xv) in g.iter_mut().zip(dy).zip(vx) {
                        if xv > T::zero() {
                            *g += v;
                        }
                    }
                });
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                sink(x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..len {
                                g[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain);
                let d = gv.len();
                let dt = T::from_count(d);
                sink(*x, &mut |g| {
                    for (r, &s) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (dyr, hr) = (&dy[span.clone()], &xhat[span.clone()]);
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = dyr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let gr = &mut g[span];
                        for j in 0..d {
                            let dh = dyr[j] * gv[j];
                            gr[j] += s / dt * (dt * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
                sink(*gain, &mut |g| {
                    for (i, (&v, &h)) in dy.iter().zip(xhat).enumerate() {
                        g[i % d] += v * h;
                    }
                });
                sink(*bias, &mut |g| {
                    for (i, &v) in dy.iter().enumerate() {
                        g[i % d] += v;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                sink(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &dy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                sink(*x, &mut |g| {
                    for ((g, &v), &m) in g.iter_mut().zip(dy).zip(mask) {
                        *g += v * m;
                    }
                });
            }
            &Op::SplitHeads { x, batch, seq, heads } => {
                let dh = dy.len() / (batch * seq * heads);
                sink(x, &mut |g| {
                    for b in 0..batch {
                        for s in 0..seq {
                            for h in 0..heads {
                                let dst = (b * seq + s) * heads * dh + h * dh;
                                let src = ((b * heads + h) * seq + s) * dh;
                                add_into(&mut g[dst..dst + dh], &dy[src..src + dh]);
                            }
                        }
                    }
                });
            }
            &Op::MergeHeads { x, batch, seq, heads } => {
                let dh = dy.len() / (batch * seq * heads);
                sink(x, &mut |g| {
                    for b in 0..batch {
                        for s in 0..seq {
                            for h in 0..heads {
                                let src = (b * seq + s) * heads * dh + h * dh;
                                let dst = ((b * heads + h) * seq + s) * dh;
                                add_into(&mut g[dst..dst + dh], &dy[src..src + dh]);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, eps, probs, count } => {
                if *count == 0 {
                    return;
                }
                let v = self.shape(*logits)[1];
                let scale = dy[0] / T::from_count(*count);
                let uniform = *eps / T::from_count(v);
                let gold = T::one() - *eps;
                sink(*logits, &mut |g| {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..v {
                            let mut q = uniform;
                            if j == t {
                                q += gold;
                            }
                            g[r * v + j] += scale * (probs[r * v + j] - q);
                        }
                    }
                });
            }
            &Op::Sum { x } => {
                let d = dy[0];
                sink(x, &mut |g| g.iter_mut().for_each(|v| *v += d));
            }
            &Op::Select { x, index } => sink(x, &mut |g| g[index] += dy[0]),
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
