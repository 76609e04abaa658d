//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so node indices are already a topological order. [`Tape::backward`]
//! consumes the tape, walks it in reverse and returns the gradients of the
//! leaves that were registered with [`Tape::param`]. A fresh tape is built for
//! every forward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{numel, Mask, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shared_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    /// `b` is broadcast over the leading axes of `a`.
    AddSuffix {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Sum {
        a: usize,
    },
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Dropout {
        x: usize,
        keep: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<T>,
        count: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    MaskedMean {
        x: usize,
        allow: Vec<bool>,
        counts: Vec<usize>,
    },
    Concat {
        a: usize,
        b: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the trainable leaves, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf; its gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        if cfg!(debug_assertions) && inputs.iter().all(|&i| self.nodes[i].value.is_finite()) {
            assert!(value.is_finite(), "non-finite output from finite inputs in {op:?}");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[..., m, k] @ b` where `b` is either a shared `[k, n]` matrix or has
    /// the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., m, k] @ b^T` with `b` shaped `[..., n, k]` (or shared `[n, k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(op, &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let lead = &sa[..r - 2];
        let batch = numel(lead);
        let shared_b = sb.len() == 2;
        if !shared_b && (sb.len() != r || &sb[..r - 2] != lead) {
            return Err(shape_err(op, &sa, &sb));
        }
        let rb = sb.len();
        let (kb, n) = if trans_b {
            (sb[rb - 1], sb[rb - 2])
        } else {
            (sb[rb - 2], sb[rb - 1])
        };
        if kb != k {
            return Err(shape_err(op, &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                let ablk = &ad[bi * m * k..(bi + 1) * m * k];
                let bblk = if shared_b { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                let oblk = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(ablk, bblk, oblk, m, k, n);
                } else {
                    gemm_nn(ablk, bblk, oblk, m, k, n);
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(&[m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            },
            &[a.0, b.0],
        ))
    }

    /// Elementwise sum. `b` may also be a suffix of `a`'s shape (bias rows,
    /// position tables), in which case it is repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
            let value = Tensor::new(sa.to_vec(), data)?;
            return Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]));
        }
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let inner = numel(sb);
        let bd = self.value(b).data();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % inner])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::AddSuffix { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let src = self.value(a);
        let value = Tensor::from_fn(src.shape(), |i| src.data()[i] * factor);
        self.push(value, Op::Scale { a: a.0, factor }, &[a.0])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    /// Softmax over the last axis. Masked entries get exactly zero weight;
    /// the mask broadcasts against `x`.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("softmax", &shape, &[]))?;
        let mask = match mask {
            Some(m) => Some(m.broadcast_to(&shape)?),
            None => None,
        };
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for (row, (src, dst)) in xd.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let allow = mask.as_ref().map(|m| &m.allow()[row * n..(row + 1) * n]);
            let allowed = |j: usize| allow.is_none_or(|a| a[j]);
            let mut max = T::neg_infinity();
            let mut any = false;
            for (j, &v) in src.iter().enumerate() {
                if allowed(j) {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                return Err(Error::DegenerateRow { row });
            }
            let mut total = T::zero();
            for (j, (&v, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
                if allowed(j) {
                    *d = (v - max).exp();
                    total = total + *d;
                }
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x: x.0 }, &[x.0]))
    }

    /// Layer normalization over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        if !(eps > 0.0) {
            return Err(Error::Param(format!("layer_norm eps must be positive, got {eps}")));
        }
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / d;
        let mut out = vec![T::zero(); xd.len()];
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let src = &xd[r * d..(r + 1) * d];
            let mean = src.iter().copied().sum::<T>() * inv_d;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (src[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Tensor::from_fn(src.shape(), |i| gelu(src.data()[i]));
        self.push(value, Op::Gelu { x: x.0 }, &[x.0])
    }

    /// Gathers rows of `table` (`[V, d]`) for every id; the result has shape
    /// `ids_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || numel(ids_shape) != ids.len() {
            return Err(shape_err("embedding", st, ids_shape));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Index {
                what: "embedding id",
                index: bad,
                size: vocab,
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Inverted dropout. Identity (the same `Var`) outside training or at
    /// rate 0.
    pub fn dropout<R: RngCore + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = T::of(1.0 / (1.0 - rate));
        let src = self.value(x);
        let keep: Vec<T> = (0..src.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let value = Tensor::from_fn(src.shape(), |i| src.data()[i] * keep[i]);
        Ok(self.push(value, Op::Dropout { x: x.0, keep }, &[x.0]))
    }

    /// Mean negative log-likelihood over rows of `logits` (`[N, C]`) whose
    /// target is not `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err("cross_entropy", shape, &[targets.len()]));
        }
        let c = shape[1];
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= c {
                return Err(Error::Index {
                    what: "cross-entropy target",
                    index: t,
                    size: c,
                });
            }
            let row = &ld[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + j] = e;
                z = z + e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p / z;
            }
            total = total + (max + z.ln() - row[t]);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Degenerate("every target position is ignored".into()));
        }
        let value = Tensor::scalar(total / T::of(count as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: x.0 }, &[x.0]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || core::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err("permute", &shape, axes));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, axes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x: x.0,
                axes: axes.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Mean over the allowed positions of `x` (`[B, L, D]`) under a `[B, L]`
    /// mask, giving `[B, D]`.
    pub fn masked_mean(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || mask.shape() != &shape[..2] {
            return Err(shape_err("masked_mean", &shape, mask.shape()));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let allow = mask.allow();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * d];
        let mut counts = vec![0usize; b];
        for bi in 0..b {
            let dst = &mut out[bi * d..(bi + 1) * d];
            for li in 0..l {
                if !allow[bi * l + li] {
                    continue;
                }
                counts[bi] += 1;
                let src = &xd[(bi * l + li) * d..(bi * l + li + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
            if counts[bi] == 0 {
                return Err(Error::Degenerate(format!(
                    "pooling row {bi} has no unmasked positions"
                )));
            }
            let inv = T::one() / T::of(counts[bi] as f64);
            for o in dst.iter_mut() {
                *o = *o * inv;
            }
        }
        let value = Tensor::new(vec![b, d], out)?;
        Ok(self.push(
            value,
            Op::MaskedMean {
                x: x.0,
                allow: allow.to_vec(),
                counts,
            },
            &[x.0],
        ))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat", &sa, &sb));
        }
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let rows = ad.len() / da;
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for r in 0..rows {
            out.extend_from_slice(&ad[r * da..(r + 1) * da]);
            out.extend_from_slice(&bd[r * db..(r + 1) * db]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = da + db;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, &mut grads, node, &g);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad, g) {
                (Op::Leaf, true, Some(g)) => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                (Op::Leaf, true, None) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn grad_slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    idx: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let len = nodes[idx].value.numel();
    Some(grads[idx].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
            shared_b,
        } => {
            let bsz = if shared_b { 0 } else { k * n };
            if let Some(ga) = grad_slot(nodes, grads, a) {
                let bd = val(b);
                for bi in 0..batch {
                    let gblk = &g[bi * m * n..(bi + 1) * m * n];
                    let bblk = &bd[bi * bsz..bi * bsz + k * n];
                    let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                    if trans_b {
                        gemm_nn(gblk, bblk, dst, m, n, k);
                    } else {
                        gemm_nt(gblk, bblk, dst, m, n, k);
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                let ad = val(a);
                for bi in 0..batch {
                    let gblk = &g[bi * m * n..(bi + 1) * m * n];
                    let ablk = &ad[bi * m * k..(bi + 1) * m * k];
                    let dst = &mut gb[bi * bsz..bi * bsz + k * n];
                    if trans_b {
                        gemm_tn(gblk, ablk, dst, n, m, k);
                    } else {
                        gemm_tn(ablk, gblk, dst, k, m, n);
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            for idx in [a, b] {
                if let Some(dst) = grad_slot(nodes, grads, idx) {
                    add_into(dst, g);
                }
            }
        }
        &Op::AddSuffix { a, b } => {
            if let Some(dst) = grad_slot(nodes, grads, a) {
                add_into(dst, g);
            }
            if let Some(dst) = grad_slot(nodes, grads, b) {
                let inner = dst.len();
                for chunk in g.chunks(inner) {
                    add_into(dst, chunk);
                }
            }
        }
        &Op::Mul { a, b } => {
            if let Some(dst) = grad_slot(nodes, grads, a) {
                for ((d, &gv), &bv) in dst.iter_mut().zip(g).zip(val(b)) {
                    *d = *d + gv * bv;
                }
            }
            if let Some(dst) = grad_slot(nodes, grads, b) {
                for ((d, &gv), &av) in dst.iter_mut().zip(g).zip(val(a)) {
                    *d = *d + gv * av;
                }
            }
        }
        &Op::Scale { a, factor } => {
            if let Some(dst) = grad_slot(nodes, grads, a) {
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d = *d + gv * factor;
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(dst) = grad_slot(nodes, grads, a) {
                for d in dst.iter_mut() {
                    *d = *d + g[0];
                }
            }
        }
        &Op::Softmax { x } => {
            if let Some(dst) = grad_slot(nodes, grads, x) {
                let y = node.value.data();
                let n = node.value.last_dim();
                for ((dr, gr), yr) in dst.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = *d + yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = node.value.last_dim();
            if let Some(dst) = grad_slot(nodes, grads, *gamma) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((o, &gv), &h) in dst.iter_mut().zip(gr).zip(hr) {
                        *o = *o + gv * h;
                    }
                }
            }
            if let Some(dst) = grad_slot(nodes, grads, *beta) {
                for gr in g.chunks(d) {
                    add_into(dst, gr);
                }
            }
            let gam = val(*gamma).to_vec();
            if let Some(dst) = grad_slot(nodes, grads, *x) {
                let inv_d = T::one() / T::of(d as f64);
                let mut dxhat = vec![T::zero(); d];
                for (r, ((dr, gr), hr)) in dst
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    for j in 0..d {
                        dxhat[j] = gr[j] * gam[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                    let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for j in 0..d {
                        dr[j] = dr[j] + rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
            }
        }
        &Op::Gelu { x } => {
            if let Some(dst) = grad_slot(nodes, grads, x) {
                for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(val(x)) {
                    *d = *d + gv * gelu_grad(xv);
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(dst) = grad_slot(nodes, grads, *table) {
                let d = node.value.last_dim();
                for (pos, &id) in ids.iter().enumerate() {
                    add_into(&mut dst[id * d..(id + 1) * d], &g[pos * d..(pos + 1) * d]);
                }
            }
        }
        Op::Dropout { x, keep } => {
            if let Some(dst) = grad_slot(nodes, grads, *x) {
                for ((d, &gv), &k) in dst.iter_mut().zip(g).zip(keep) {
                    *d = *d + gv * k;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore,
            probs,
            count,
        } => {
            if let Some(dst) = grad_slot(nodes, grads, *logits) {
                let c = probs.len() / targets.len();
                let scale = g[0] / T::of(*count as f64);
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dst[r * c + j] = dst[r * c + j] + (probs[r * c + j] - onehot) * scale;
                    }
                }
            }
        }
        &Op::Reshape { x } => {
            if let Some(dst) = grad_slot(nodes, grads, x) {
                add_into(dst, g);
            }
        }
        Op::Permute { x, axes } => {
            if let Some(dst) = grad_slot(nodes, grads, *x) {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inv);
                add_into(dst, &back);
            }
        }
        Op::MaskedMean { x, allow, counts } => {
            if let Some(dst) = grad_slot(nodes, grads, *x) {
                let b = counts.len();
                let d = node.value.last_dim();
                let l = allow.len() / b;
                for bi in 0..b {
                    let inv = T::one() / T::of(counts[bi] as f64);
                    let gr = &g[bi * d..(bi + 1) * d];
                    for li in 0..l {
                        if !allow[bi * l + li] {
                            continue;
                        }
                        let dr = &mut dst[(bi * l + li) * d..(bi * l + li + 1) * d];
                        for (o, &gv) in dr.iter_mut().zip(gr) {
                            *o = *o + gv * inv;
                        }
                    }
                }
            }
        }
        &Op::Concat { a, b } => {
            let da = nodes[a].value.last_dim();
            let db = nodes[b].value.last_dim();
            if let Some(dst) = grad_slot(nodes, grads, a) {
                for (dr, gr) in dst.chunks_mut(da).zip(g.chunks(da + db)) {
                    add_into(dr, &gr[..da]);
                }
            }
            if let Some(dst) = grad_slot(nodes, grads, b) {
                for (dr, gr) in dst.chunks_mut(db).zip(g.chunks(da + db)) {
                    add_into(dr, &gr[da..]);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
