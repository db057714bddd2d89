//! Define-by-run reverse-mode tape. Values are computed eagerly as nodes are
//! pushed; `backward` walks the tape once in reverse creation order. A graph
//! instance is single-threaded and disposable: one forward build, one
//! backward pass.

use super::{NumericsError, Scalar, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<F: Scalar> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Matmul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxLast(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// (mean, 1/std) per row.
        cache: Vec<(F, F)>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    ConcatLast(NodeId, NodeId),
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Permute0213(NodeId),
    Reshape(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        ignore: Option<u32>,
        probs: Vec<F>,
        count: usize,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<F>,
        weights: Vec<F>,
        probs: Vec<F>,
        weight_sum: f64,
    },
    SumScalars(Vec<NodeId>),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    requires_grad: bool,
    /// f64 view of scalar loss values, immune to working-precision rounding.
    aux_f64: Option<f64>,
    op: Op<F>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

// out(m,n) += a(m,k) · b(k,n)
fn mm_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = av.mul_add(bv, *o);
            }
        }
    }
}

// out(m,n) += a(m,k) · b(n,k)ᵀ
fn mm_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    const LANES: usize = 16;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            // lane-parallel partial sums so the reduction vectorizes
            let mut acc = [F::zero(); LANES];
            let mut ac = arow.chunks_exact(LANES);
            let mut bc = brow.chunks_exact(LANES);
            for (av, bv) in (&mut ac).zip(&mut bc) {
                for l in 0..LANES {
                    acc[l] = av[l].mul_add(bv[l], acc[l]);
                }
            }
            let mut s = F::zero();
            for (&av, &bv) in ac.remainder().iter().zip(bc.remainder()) {
                s = av.mul_add(bv, s);
            }
            for &l in &acc {
                s += l;
            }
            *o += s;
        }
    }
}

// out(k,n) += a(m,k)ᵀ · b(m,n)
fn mm_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = av.mul_add(bv, *o);
            }
        }
    }
}

fn stable_sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, aux_f64: Option<f64>, op: Op<F>) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            aux_f64,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss w.r.t. this node; None if the node was not
    /// reached by backward.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros for parameters the loss does not reach.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<F> {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
    }

    /// High-precision view of a scalar node (loss reductions carry their f64
    /// accumulation; other nodes fall back to the stored value).
    pub fn scalar_f64(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id.0];
        node.aux_f64.unwrap_or_else(|| node.value.item().f64())
    }

    /// A differentiable input (parameter or embedding table).
    pub fn leaf(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, true, None, Op::Leaf)
    }

    /// A non-differentiable input (mask, positional table, dropout mask).
    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, false, None, Op::Constant)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, None, Op::Add(a, b))
    }

    /// x of shape (..., d) plus a bias of shape (d).
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let d = vx.last_dim();
        assert_eq!(vb.numel(), d, "bias width {} != {}", vb.numel(), d);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        let rg = self.rg(x) || self.rg(b);
        self.push(value, rg, None, Op::AddBias(x, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, None, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let value = self.nodes[x.0].value.clone().map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, rg, None, Op::Scale(x, c))
    }

    /// Batched matrix product over the last two axes. `b` may be 2D (shared
    /// across the batch) or carry the same leading axes as `a`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, false)
    }

    /// a · bᵀ, with b's last two axes transposed.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.rank() >= 2, "matmul lhs must have rank >= 2");
        let m = va.shape()[va.rank() - 2];
        let k = va.shape()[va.rank() - 1];
        let (bk, n) = {
            let r = vb.rank();
            assert!(r >= 2, "matmul rhs must have rank >= 2");
            let d0 = vb.shape()[r - 2];
            let d1 = vb.shape()[r - 1];
            if transpose_b {
                (d1, d0)
            } else {
                (d0, d1)
            }
        };
        assert_eq!(k, bk, "matmul inner dims {k} vs {bk}");
        let batch = va.numel() / (m * k);
        let b_shared = vb.rank() == 2;
        if !b_shared {
            assert_eq!(
                vb.numel() / (bk * n),
                batch,
                "matmul batch dims disagree: lhs {:?} rhs {:?}",
                va.shape(),
                vb.shape()
            );
        }
        let mut out_shape = va.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![F::zero(); batch * m * n];
        let (ad, bd) = (va.data(), vb.data());
        for t in 0..batch {
            let asl = &ad[t * m * k..(t + 1) * m * k];
            let bsl = if b_shared {
                bd
            } else {
                &bd[t * k * n..(t + 1) * k * n]
            };
            let osl = &mut out[t * m * n..(t + 1) * m * n];
            if transpose_b {
                mm_nt(asl, bsl, m, k, n, osl);
            } else {
                mm_nn(asl, bsl, m, k, n, osl);
            }
        }
        let value = Tensor::from_vec(&out_shape, out);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, None, Op::Matmul { a, b, transpose_b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.clone().map(|v| v.max(F::zero()));
        let rg = self.rg(x);
        self.push(value, rg, None, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.clone().map(stable_sigmoid);
        let rg = self.rg(x);
        self.push(value, rg, None, Op::Sigmoid(x))
    }

    /// Softmax over the trailing axis; each row sums to 1.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let w = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(w) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        let rg = self.rg(x);
        self.push(value, rg, None, Op::SoftmaxLast(x))
    }

    /// Layer normalization over the trailing axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = F::c(1e-5);
        let vx = &self.nodes[x.0].value;
        let d = vx.last_dim();
        assert_eq!(self.nodes[gamma.0].value.numel(), d, "layer_norm gamma width");
        assert_eq!(self.nodes[beta.0].value.numel(), d, "layer_norm beta width");
        let g = self.nodes[gamma.0].value.data().to_vec();
        let bt = self.nodes[beta.0].value.data().to_vec();
        let mut cache = Vec::with_capacity(vx.leading());
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().copied().sum::<F>() / F::c(d as f64);
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<F>()
                / F::c(d as f64);
            let rstd = F::one() / (var + eps).sqrt();
            cache.push((mean, rstd));
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + bt[j];
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(value, rg, None, Op::LayerNorm { x, gamma, beta, cache })
    }

    /// Gathers rows of a (V, d) table; output shape is batch_shape + [d].
    pub fn embedding(&mut self, table: NodeId, ids: &[u32], batch_shape: &[usize]) -> NodeId {
        let vt = &self.nodes[table.0].value;
        assert_eq!(vt.rank(), 2, "embedding table must be 2D");
        assert_eq!(
            batch_shape.iter().product::<usize>(),
            ids.len(),
            "embedding batch shape mismatch"
        );
        let (v, d) = (vt.dim(0), vt.dim(1));
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            assert!(id < v, "embedding id {id} out of range {v}");
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let mut shape = batch_shape.to_vec();
        shape.push(d);
        let value = Tensor::from_vec(&shape, data);
        let rg = self.rg(table);
        self.push(
            value,
            rg,
            None,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Concatenates along the trailing axis.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.leading(), vb.leading(), "concat leading dims");
        assert_eq!(
            &va.shape()[..va.rank() - 1],
            &vb.shape()[..vb.rank() - 1],
            "concat leading shapes"
        );
        let (da, db) = (va.last_dim(), vb.last_dim());
        let rows = va.leading();
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&vb.data()[r * db..(r + 1) * db]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = da + db;
        let value = Tensor::from_vec(&shape, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, None, Op::ConcatLast(a, b))
    }

    /// Slices `len` entries of an axis starting at `start`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert!(axis < vx.rank(), "narrow axis out of range");
        assert!(start + len <= vx.dim(axis), "narrow slice out of range");
        let outer: usize = vx.shape()[..axis].iter().product();
        let mid = vx.dim(axis);
        let inner: usize = vx.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * mid * inner + start * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::from_vec(&shape, data);
        let rg = self.rg(x);
        self.push(value, rg, None, Op::Narrow { x, axis, start })
    }

    /// (A, B, C, D) -> (A, C, B, D); its own inverse.
    pub fn permute_0213(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.rank(), 4, "permute_0213 needs a 4D tensor");
        let value = permute_0213_tensor(vx);
        let rg = self.rg(x);
        self.push(value, rg, None, Op::Permute0213(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let value = self.nodes[x.0].value.clone().reshape(shape);
        let rg = self.rg(x);
        self.push(value, rg, None, Op::Reshape(x))
    }

    /// Mean token-level negative log-likelihood over rows whose target is not
    /// the ignore id. Accumulates in f64.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], ignore: Option<u32>) -> NodeId {
        let vl = &self.nodes[logits.0].value;
        let c = vl.last_dim();
        let rows = vl.leading();
        assert_eq!(rows, targets.len(), "cross_entropy target count");
        let mut probs = vec![F::zero(); rows * c];
        let mut total = 0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            let t = t as usize;
            assert!(t < c, "cross_entropy target {t} out of range {c}");
            let row = &vl.data()[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = 0f64;
            for &v in row {
                sum += (v - mx).f64().exp();
            }
            let lse = mx.f64() + sum.ln();
            total += lse - row[t].f64();
            let prow = &mut probs[r * c..(r + 1) * c];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = F::c(((v - mx).f64().exp()) / sum);
            }
            count += 1;
        }
        let mean = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(F::c(mean)),
            rg,
            Some(mean),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
        )
    }

    /// Weighted mean binary cross-entropy on logits; weights select which
    /// elements participate. Accumulates in f64.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Vec<F>, weights: Vec<F>) -> NodeId {
        let vl = &self.nodes[logits.0].value;
        assert_eq!(vl.numel(), targets.len(), "bce target count");
        assert_eq!(vl.numel(), weights.len(), "bce weight count");
        let mut probs = vec![F::zero(); vl.numel()];
        let mut total = 0f64;
        let mut weight_sum = 0f64;
        for (i, &x) in vl.data().iter().enumerate() {
            probs[i] = stable_sigmoid(x);
            let w = weights[i].f64();
            if w == 0.0 {
                continue;
            }
            let xf = x.f64();
            let t = targets[i].f64();
            let loss = xf.max(0.0) - xf * t + (-xf.abs()).exp().ln_1p();
            total += w * loss;
            weight_sum += w;
        }
        let mean = if weight_sum > 0.0 { total / weight_sum } else { 0.0 };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(F::c(mean)),
            rg,
            Some(mean),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
                probs,
                weight_sum,
            },
        )
    }

    /// Sum of scalar nodes; carries the f64 sum of its terms.
    pub fn sum_scalars(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty(), "sum_scalars needs at least one term");
        let mut sum = F::zero();
        let mut aux = 0f64;
        let mut rg = false;
        for &t in terms {
            assert_eq!(self.nodes[t.0].value.numel(), 1, "sum_scalars on non-scalar");
            sum += self.nodes[t.0].value.item();
            aux += self.scalar_f64(t);
            rg |= self.rg(t);
        }
        self.push(
            Tensor::scalar(sum),
            rg,
            Some(aux),
            Op::SumScalars(terms.to_vec()),
        )
    }

    /// softmax(q·kᵀ · scale + mask) · v over the last two axes.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, mask: NodeId, scale: F) -> NodeId {
        let scores = self.matmul_nt(q, k);
        let scaled = self.scale(scores, scale);
        let masked = self.add(scaled, mask);
        let probs = self.softmax_last(masked);
        self.matmul(probs, v)
    }

    fn add_grad(grads: &mut [Option<Tensor<F>>], id: NodeId, shape: &[usize], delta: &[F]) {
        let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(shape));
        for (g, &d) in slot.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Populates gradients for every node reachable from a scalar loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::BackwardTwice);
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(NumericsError::NotScalarLoss { numel });
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::from_vec(
            self.nodes[loss.0].value.shape(),
            vec![F::one()],
        ));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &gy);
            self.grads[id] = Some(gy);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, gy: &Tensor<F>) {
        // Take op out to appease the borrow checker; ops hold no NodeId self-references.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Constant);
        match &op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for &t in [a, b] {
                    if self.rg(t) {
                        let shape = self.nodes[t.0].value.shape().to_vec();
                        Self::add_grad(&mut self.grads, t, &shape, gy.data());
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    Self::add_grad(&mut self.grads, *x, &shape, gy.data());
                }
                if self.rg(*b) {
                    let d = self.nodes[b.0].value.numel();
                    let mut db = vec![F::zero(); d];
                    for row in gy.data().chunks(d) {
                        for (o, &g) in db.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    let shape = self.nodes[b.0].value.shape().to_vec();
                    Self::add_grad(&mut self.grads, *b, &shape, &db);
                }
            }
            Op::Mul(a, b) => {
                for (t, o) in [(*a, *b), (*b, *a)] {
                    if self.rg(t) {
                        let other = self.nodes[o.0].value.data();
                        let delta: Vec<F> = gy
                            .data()
                            .iter()
                            .zip(other)
                            .map(|(&g, &v)| g * v)
                            .collect();
                        let shape = self.nodes[t.0].value.shape().to_vec();
                        Self::add_grad(&mut self.grads, t, &shape, &delta);
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    let delta: Vec<F> = gy.data().iter().map(|&g| g * *c).collect();
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    Self::add_grad(&mut self.grads, *x, &shape, &delta);
                }
            }
            Op::Matmul { a, b, transpose_b } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let m = va.shape()[va.rank() - 2];
                let k = va.shape()[va.rank() - 1];
                let n = gy.last_dim();
                let batch = va.numel() / (m * k);
                let b_shared = vb.rank() == 2;
                let (ad, bd, gd) = (va.data(), vb.data(), gy.data());
                if self.rg(*a) {
                    let mut da = vec![F::zero(); ad.len()];
                    for t in 0..batch {
                        let gsl = &gd[t * m * n..(t + 1) * m * n];
                        let bsl = if b_shared { bd } else { &bd[t * k * n..(t + 1) * k * n] };
                        let dasl = &mut da[t * m * k..(t + 1) * m * k];
                        if *transpose_b {
                            // y = a·bᵀ (b is (n,k)): da = gy·b
                            mm_nn(gsl, bsl, m, n, k, dasl);
                        } else {
                            // y = a·b: da = gy·bᵀ (b is (k,n))
                            mm_nt(gsl, bsl, m, n, k, dasl);
                        }
                    }
                    let shape = va.shape().to_vec();
                    Self::add_grad(&mut self.grads, *a, &shape, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); bd.len()];
                    for t in 0..batch {
                        let gsl = &gd[t * m * n..(t + 1) * m * n];
                        let asl = &ad[t * m * k..(t + 1) * m * k];
                        let dbsl = if b_shared {
                            &mut db[..]
                        } else {
                            &mut db[t * k * n..(t + 1) * k * n]
                        };
                        if *transpose_b {
                            // db (n,k) = gyᵀ·a
                            mm_tn(gsl, asl, m, n, k, dbsl);
                        } else {
                            // db (k,n) = aᵀ·gy
                            mm_tn(asl, gsl, m, k, n, dbsl);
                        }
                    }
                    let shape = vb.shape().to_vec();
                    Self::add_grad(&mut self.grads, *b, &shape, &db);
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let y = self.nodes[id].value.data();
                    let delta: Vec<F> = gy
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                        .collect();
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    Self::add_grad(&mut self.grads, *x, &shape, &delta);
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let y = self.nodes[id].value.data();
                    let delta: Vec<F> = gy
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&g, &p)| g * p * (F::one() - p))
                        .collect();
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    Self::add_grad(&mut self.grads, *x, &shape, &delta);
                }
            }
            Op::SoftmaxLast(x) => {
                if self.rg(*x) {
                    let y = self.nodes[id].value.data();
                    let w = self.nodes[id].value.last_dim();
                    let mut delta = vec![F::zero(); y.len()];
                    for r in 0..y.len() / w {
                        let yr = &y[r * w..(r + 1) * w];
                        let gr = &gy.data()[r * w..(r + 1) * w];
                        let dot: F = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                        for (d, (&p, &g)) in delta[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(yr.iter().zip(gr))
                        {
                            *d = p * (g - dot);
                        }
                    }
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    Self::add_grad(&mut self.grads, *x, &shape, &delta);
                }
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let vx = &self.nodes[x.0].value;
                let d = vx.last_dim();
                let g = self.nodes[gamma.0].value.data().to_vec();
                let inv_d = F::one() / F::c(d as f64);
                if self.rg(*x) {
                    let mut dx = vec![F::zero(); vx.numel()];
                    for (r, &(mean, rstd)) in cache.iter().enumerate() {
                        let xr = &vx.data()[r * d..(r + 1) * d];
                        let gr = &gy.data()[r * d..(r + 1) * d];
                        let mut sum_g = F::zero();
                        let mut sum_gx = F::zero();
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            let gj = gr[j] * g[j];
                            sum_g += gj;
                            sum_gx += gj * xhat;
                        }
                        let mean_g = sum_g * inv_d;
                        let mean_gx = sum_gx * inv_d;
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            let gj = gr[j] * g[j];
                            dx[r * d + j] = rstd * (gj - mean_g - xhat * mean_gx);
                        }
                    }
                    let shape = vx.shape().to_vec();
                    Self::add_grad(&mut self.grads, *x, &shape, &dx);
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dgamma = vec![F::zero(); d];
                    let mut dbeta = vec![F::zero(); d];
                    for (r, &(mean, rstd)) in cache.iter().enumerate() {
                        let xr = &vx.data()[r * d..(r + 1) * d];
                        let gr = &gy.data()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            dgamma[j] += gr[j] * xhat;
                            dbeta[j] += gr[j];
                        }
                    }
                    if self.rg(*gamma) {
                        let shape = self.nodes[gamma.0].value.shape().to_vec();
                        Self::add_grad(&mut self.grads, *gamma, &shape, &dgamma);
                    }
                    if self.rg(*beta) {
                        let shape = self.nodes[beta.0].value.shape().to_vec();
                        Self::add_grad(&mut self.grads, *beta, &shape, &dbeta);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let vt = &self.nodes[table.0].value;
                    let d = vt.dim(1);
                    let mut dt = vec![F::zero(); vt.numel()];
                    for (r, &tok) in ids.iter().enumerate() {
                        let dst = &mut dt[tok as usize * d..(tok as usize + 1) * d];
                        let src = &gy.data()[r * d..(r + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(src) {
                            *o += g;
                        }
                    }
                    let shape = vt.shape().to_vec();
                    Self::add_grad(&mut self.grads, *table, &shape, &dt);
                }
            }
            Op::ConcatLast(a, b) => {
                let da = self.nodes[a.0].value.last_dim();
                let db = self.nodes[b.0].value.last_dim();
                let rows = self.nodes[a.0].value.leading();
                if self.rg(*a) {
                    let mut delta = vec![F::zero(); rows * da];
                    for r in 0..rows {
                        delta[r * da..(r + 1) * da]
                            .copy_from_slice(&gy.data()[r * (da + db)..r * (da + db) + da]);
                    }
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    Self::add_grad(&mut self.grads, *a, &shape, &delta);
                }
                if self.rg(*b) {
                    let mut delta = vec![F::zero(); rows * db];
                    for r in 0..rows {
                        delta[r * db..(r + 1) * db].copy_from_slice(
                            &gy.data()[r * (da + db) + da..(r + 1) * (da + db)],
                        );
                    }
                    let shape = self.nodes[b.0].value.shape().to_vec();
                    Self::add_grad(&mut self.grads, *b, &shape, &delta);
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.rg(*x) {
                    let vx = &self.nodes[x.0].value;
                    let outer: usize = vx.shape()[..*axis].iter().product();
                    let mid = vx.dim(*axis);
                    let inner: usize = vx.shape()[*axis + 1..].iter().product();
                    let len = gy.dim(*axis);
                    let mut dx = vec![F::zero(); vx.numel()];
                    for o in 0..outer {
                        let dst = o * mid * inner + start * inner;
                        let src = o * len * inner;
                        for (d, &g) in dx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&gy.data()[src..src + len * inner])
                        {
                            *d += g;
                        }
                    }
                    let shape = vx.shape().to_vec();
                    Self::add_grad(&mut self.grads, *x, &shape, &dx);
                }
            }
            Op::Permute0213(x) => {
                if self.rg(*x) {
                    let delta = permute_0213_tensor(gy);
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    Self::add_grad(&mut self.grads, *x, &shape, delta.data());
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    Self::add_grad(&mut self.grads, *x, &shape, gy.data());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if self.rg(*logits) && *count > 0 {
                    let vl = &self.nodes[logits.0].value;
                    let c = vl.last_dim();
                    let scale = gy.item().f64() / *count as f64;
                    let mut dl = vec![F::zero(); vl.numel()];
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let prow = &probs[r * c..(r + 1) * c];
                        let drow = &mut dl[r * c..(r + 1) * c];
                        for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == t as usize { 1.0 } else { 0.0 };
                            *d = F::c((p.f64() - onehot) * scale);
                        }
                    }
                    let shape = vl.shape().to_vec();
                    Self::add_grad(&mut self.grads, *logits, &shape, &dl);
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
                probs,
                weight_sum,
            } => {
                if self.rg(*logits) && *weight_sum > 0.0 {
                    let scale = gy.item().f64() / weight_sum;
                    let delta: Vec<F> = probs
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&p, &t), &w)| F::c((p.f64() - t.f64()) * w.f64() * scale))
                        .collect();
                    let shape = self.nodes[logits.0].value.shape().to_vec();
                    Self::add_grad(&mut self.grads, *logits, &shape, &delta);
                }
            }
            Op::SumScalars(terms) => {
                for &t in terms {
                    if self.rg(t) {
                        let shape = self.nodes[t.0].value.shape().to_vec();
                        Self::add_grad(&mut self.grads, t, &shape, gy.data());
                    }
                }
            }
        }
        self.nodes[id].op = op;
    }
}

fn permute_0213_tensor<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (a, b, c, d) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = vec![F::zero(); x.numel()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let src = ((ia * b + ib) * c + ic) * d;
                let dst = ((ia * c + ic) * b + ib) * d;
                out[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
            }
        }
    }
    Tensor::from_vec(&[a, c, b, d], out)
}
