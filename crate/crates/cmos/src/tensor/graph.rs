//! Tape-style computation graph.
//!
//! A [`Graph`] records every executed operation in topological order; one
//! reverse traversal from a scalar loss populates gradients for every
//! `requires_grad` leaf, accumulating across fan-out. The tape is rebuilt per
//! forward pass and confined to one thread.

use super::ops::{self, ConvDims};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: VarId,
        kernel: VarId,
        dims: ConvDims,
    },
    BiasAdd {
        input: VarId,
        bias: VarId,
    },
    MaxPool2d {
        input: VarId,
        argmax: Vec<usize>,
    },
    Matmul {
        a: VarId,
        b: VarId,
    },
    TransposeLast2 {
        input: VarId,
    },
    Relu {
        input: VarId,
    },
    Softmax {
        input: VarId,
        axis: usize,
    },
    CrossEntropy {
        logits: VarId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape {
        input: VarId,
    },
    InterpRows {
        input: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Sum {
        input: VarId,
    },
    Scale {
        input: VarId,
        factor: T,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasAdd { .. } => "bias_add",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Matmul { .. } => "matmul",
            Op::TransposeLast2 { .. } => "transpose_last2",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape { .. } => "reshape",
            Op::InterpRows { .. } => "interp_rows",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::Scale { .. } => "scale",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Graph<T> {
        Graph {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// A graph that rejects non-finite values at op boundaries.
    pub fn new_checked() -> Graph<T> {
        Graph {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a constant leaf (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Result<VarId> {
        self.leaf(value, false)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<VarId> {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<VarId> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite("graph leaf".into()));
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        VarId(self.nodes.len() - 1)
    }

    fn emit(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<VarId> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite(op.name().into()));
        }
        Ok(self.push(value, op, requires_grad))
    }

    pub fn value(&self, v: VarId) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if one was computed.
    pub fn grad(&self, v: VarId) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- operations ------------------------------------------------------

    /// Cross-correlation (deep-learning convention), stride 1.
    pub fn conv2d(&mut self, input: VarId, kernel: VarId, padding: Padding) -> Result<VarId> {
        let dims = ConvDims::resolve(
            self.value(input).shape(),
            self.value(kernel).shape(),
            padding,
        )?;
        let out = ops::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            &dims,
        );
        let value = Tensor::new(dims.out_shape(), out)?;
        let rg = self.needs(input) || self.needs(kernel);
        self.emit(value, Op::Conv2d { input, kernel, dims }, rg)
    }

    /// Adds a `[C]` bias over the trailing channel axis.
    pub fn bias_add(&mut self, input: VarId, bias: VarId) -> Result<VarId> {
        let ishape = self.value(input).shape().to_vec();
        let bshape = self.value(bias).shape().to_vec();
        let c = *ishape.last().ok_or_else(|| Error::InvalidArgument(
            "bias_add on rank-0 input".into(),
        ))?;
        if bshape != [c] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                left: ishape,
                right: bshape,
            });
        }
        let bias_data = self.value(bias).data().to_vec();
        let mut out = self.value(input).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(&bias_data) {
                *o += b;
            }
        }
        let value = Tensor::new(ishape, out)?;
        let rg = self.needs(input) || self.needs(bias);
        self.emit(value, Op::BiasAdd { input, bias }, rg)
    }

    /// 2x2 max pooling with ceil-mode edges.
    pub fn maxpool2d(&mut self, input: VarId) -> Result<VarId> {
        let shape = self.value(input).shape().to_vec();
        let (b, h, w, c, batched) = match shape.as_slice() {
            [h, w, c] => (1, *h, *w, *c, false),
            [b, h, w, c] => (*b, *h, *w, *c, true),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "maxpool2d input must have rank 3 or 4, got {shape:?}"
                )))
            }
        };
        let (out, argmax, oh, ow) = ops::maxpool2d_forward(self.value(input).data(), b, h, w, c);
        let oshape = if batched {
            vec![b, oh, ow, c]
        } else {
            vec![oh, ow, c]
        };
        let value = Tensor::new(oshape, out)?;
        let rg = self.needs(input);
        self.emit(value, Op::MaxPool2d { input, argmax }, rg)
    }

    /// Matrix product. Accepts `[m,k]*[k,n]`, `[B,m,k]*[k,n]` (shared right
    /// operand) and `[B,m,k]*[B,k,n]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let ashape = self.value(a).shape().to_vec();
        let bshape = self.value(b).shape().to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: ashape.clone(),
            right: bshape.clone(),
        };
        let (batch, m, k) = match ashape.as_slice() {
            [m, k] => (None, *m, *k),
            [bt, m, k] => (Some(*bt), *m, *k),
            _ => return Err(mismatch()),
        };
        let (b_batched, kb, n) = match bshape.as_slice() {
            [k2, n] => (false, *k2, *n),
            [bt2, k2, n] => {
                if batch != Some(*bt2) {
                    return Err(mismatch());
                }
                (true, *k2, *n)
            }
            _ => return Err(mismatch()),
        };
        if kb != k {
            return Err(mismatch());
        }
        let bt = batch.unwrap_or(1);
        let adata = self.value(a).data();
        let bdata = self.value(b).data();
        let mut out = vec![T::ZERO; bt * m * n];
        for i in 0..bt {
            let a_sl = &adata[i * m * k..(i + 1) * m * k];
            let b_sl = if b_batched {
                &bdata[i * k * n..(i + 1) * k * n]
            } else {
                bdata
            };
            ops::mm_acc(&mut out[i * m * n..(i + 1) * m * n], a_sl, b_sl, m, k, n);
        }
        let oshape = match batch {
            Some(bt) => vec![bt, m, n],
            None => vec![m, n],
        };
        let value = Tensor::new(oshape, out)?;
        let rg = self.needs(a) || self.needs(b);
        self.emit(value, Op::Matmul { a, b }, rg)
    }

    /// Affine map: `input [n] -> [m]` or `[B,n] -> [B,m]`.
    pub fn dense(&mut self, input: VarId, weights: VarId, bias: VarId) -> Result<VarId> {
        let ishape = self.value(input).shape().to_vec();
        let (flat, n) = match ishape.as_slice() {
            [n] => (true, *n),
            [_, n] => (false, *n),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "dense input must have rank 1 or 2, got {ishape:?}"
                )))
            }
        };
        let wshape = self.value(weights).shape().to_vec();
        if wshape.len() != 2 || wshape[0] != n {
            return Err(Error::ShapeMismatch {
                op: "dense",
                left: ishape,
                right: wshape,
            });
        }
        let x = if flat {
            self.reshape(input, vec![1, n])?
        } else {
            input
        };
        let y = self.matmul(x, weights)?;
        let y = self.bias_add(y, bias)?;
        if flat {
            let m = self.value(y).shape()[1];
            self.reshape(y, vec![m])
        } else {
            Ok(y)
        }
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&mut self, input: VarId) -> Result<VarId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose_last2 needs rank >= 2, got {shape:?}"
            )));
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let data = self.value(input).data();
        let mut out = vec![T::ZERO; data.len()];
        for b in 0..batch {
            let src = &data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut oshape = shape.clone();
        let l = oshape.len();
        oshape.swap(l - 2, l - 1);
        let value = Tensor::new(oshape, out)?;
        let rg = self.needs(input);
        self.emit(value, Op::TransposeLast2 { input }, rg)
    }

    pub fn relu(&mut self, input: VarId) -> Result<VarId> {
        let mut out = self.value(input).data().to_vec();
        for v in &mut out {
            if !(*v > T::ZERO) {
                *v = T::ZERO;
            }
        }
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        let rg = self.needs(input);
        self.emit(value, Op::Relu { input }, rg)
    }

    /// Stable softmax along `axis`.
    pub fn softmax(&mut self, input: VarId, axis: usize) -> Result<VarId> {
        let shape = self.value(input).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let out = ops::softmax_axis(self.value(input).data(), &shape, axis);
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(input);
        self.emit(value, Op::Softmax { input, axis }, rg)
    }

    /// Mean `-ln softmax(logits)[label]` over the batch; returns a scalar.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let shape = self.value(logits).shape().to_vec();
        let (batch, classes) = match shape.as_slice() {
            [b, c] => (*b, *c),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy logits must be [batch, classes], got {shape:?}"
                )))
            }
        };
        if labels.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy got {} labels for batch {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (probs, loss) =
            ops::cross_entropy_forward(self.value(logits).data(), batch, classes, labels);
        let rg = self.needs(logits);
        self.emit(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, input: VarId, shape: Vec<usize>) -> Result<VarId> {
        let value = self.value(input).clone().reshaped(shape)?;
        let rg = self.needs(input);
        self.emit(value, Op::Reshape { input }, rg)
    }

    /// Linear row interpolation of a `[n0, c]` tensor onto `n` rows,
    /// endpoint-aligned; `n == n0` reproduces the input bitwise.
    pub fn interp_rows(&mut self, input: VarId, n: usize) -> Result<VarId> {
        let shape = self.value(input).shape().to_vec();
        let (n0, c) = match shape.as_slice() {
            [n0, c] => (*n0, *c),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "interp_rows input must be [rows, channels], got {shape:?}"
                )))
            }
        };
        if n < 2 || n0 < 2 {
            return Err(Error::InvalidArgument(format!(
                "interp_rows needs at least 2 rows on both sides, got {n0} -> {n}"
            )));
        }
        let out = ops::interp_rows_forward(self.value(input).data(), n0, c, n);
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.needs(input);
        self.emit(value, Op::InterpRows { input }, rg)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        a: VarId,
        b: VarId,
        opname: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<VarId> {
        let ashape = self.value(a).shape().to_vec();
        let bshape = self.value(b).shape().to_vec();
        if ashape != bshape {
            return Err(Error::ShapeMismatch {
                op: opname,
                left: ashape,
                right: bshape,
            });
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ashape, out)?;
        let rg = self.needs(a) || self.needs(b);
        self.emit(value, op, rg)
    }

    /// Sum of all elements; returns a scalar.
    pub fn sum(&mut self, input: VarId) -> Result<VarId> {
        let mut s = T::ZERO;
        for &v in self.value(input).data() {
            s += v;
        }
        let rg = self.needs(input);
        self.emit(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn scale(&mut self, input: VarId, factor: T) -> Result<VarId> {
        let out: Vec<T> = self.value(input).data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        let rg = self.needs(input);
        self.emit(value, Op::Scale { input, factor }, rg)
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients of `loss` w.r.t. every reachable `requires_grad`
    /// node. `loss` must be scalar.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.input_grads(i);
            for (target, grad) in contributions {
                self.accumulate(target, grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, grad: Vec<T>) {
        let node = &mut self.nodes[target];
        match &mut node.grad {
            Some(buf) => {
                for (o, g) in buf.iter_mut().zip(grad) {
                    *o += g;
                }
            }
            None => node.grad = Some(grad),
        }
    }

    /// Computes the gradient contributions node `i` sends to its inputs.
    fn input_grads(&self, i: usize) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let dy = node.grad.as_deref().expect("grad present");
        let mut out: Vec<(usize, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                dims,
            } => {
                let (di, dk) = ops::conv2d_backward(
                    dy,
                    self.nodes[input.0].value.data(),
                    self.nodes[kernel.0].value.data(),
                    dims,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                if let Some(di) = di {
                    out.push((input.0, di));
                }
                if let Some(dk) = dk {
                    out.push((kernel.0, dk));
                }
            }
            Op::BiasAdd { input, bias } => {
                let c = *self.nodes[bias.0].value.shape().last().unwrap();
                if self.needs(*input) {
                    out.push((input.0, dy.to_vec()));
                }
                if self.needs(*bias) {
                    let mut db = vec![T::ZERO; c];
                    for row in dy.chunks(c) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    out.push((bias.0, db));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.needs(*input) {
                    let mut di = vec![T::ZERO; self.nodes[input.0].value.numel()];
                    for (&idx, &g) in argmax.iter().zip(dy) {
                        di[idx] += g;
                    }
                    out.push((input.0, di));
                }
            }
            Op::Matmul { a, b } => {
                let ashape = self.nodes[a.0].value.shape();
                let bshape = self.nodes[b.0].value.shape();
                let (bt, m, k) = match ashape {
                    [m, k] => (1, *m, *k),
                    [bt, m, k] => (*bt, *m, *k),
                    _ => unreachable!(),
                };
                let b_batched = bshape.len() == 3;
                let n = *bshape.last().unwrap();
                let adata = self.nodes[a.0].value.data();
                let bdata = self.nodes[b.0].value.data();
                if self.needs(*a) {
                    let mut da = vec![T::ZERO; adata.len()];
                    for i in 0..bt {
                        let dy_sl = &dy[i * m * n..(i + 1) * m * n];
                        let b_sl = if b_batched {
                            &bdata[i * k * n..(i + 1) * k * n]
                        } else {
                            bdata
                        };
                        ops::mm_abt_acc(
                            &mut da[i * m * k..(i + 1) * m * k],
                            dy_sl,
                            b_sl,
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((a.0, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; bdata.len()];
                    for i in 0..bt {
                        let dy_sl = &dy[i * m * n..(i + 1) * m * n];
                        let a_sl = &adata[i * m * k..(i + 1) * m * k];
                        let db_sl = if b_batched {
                            &mut db[i * k * n..(i + 1) * k * n]
                        } else {
                            &mut db[..]
                        };
                        ops::mm_atb_acc(db_sl, a_sl, dy_sl, m, k, n);
                    }
                    out.push((b.0, db));
                }
            }
            Op::TransposeLast2 { input } => {
                if self.needs(*input) {
                    let oshape = node.value.shape();
                    let (m, n) = (oshape[oshape.len() - 2], oshape[oshape.len() - 1]);
                    let batch: usize = oshape[..oshape.len() - 2].iter().product();
                    let mut di = vec![T::ZERO; dy.len()];
                    for bi in 0..batch {
                        let src = &dy[bi * m * n..(bi + 1) * m * n];
                        let dst = &mut di[bi * m * n..(bi + 1) * m * n];
                        for i in 0..m {
                            for j in 0..n {
                                dst[j * m + i] = src[i * n + j];
                            }
                        }
                    }
                    out.push((input.0, di));
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.nodes[input.0].value.data();
                    let di: Vec<T> = x
                        .iter()
                        .zip(dy)
                        .map(|(&x, &g)| if x > T::ZERO { g } else { T::ZERO })
                        .collect();
                    out.push((input.0, di));
                }
            }
            Op::Softmax { input, axis } => {
                if self.needs(*input) {
                    let di = ops::softmax_backward(
                        node.value.data(),
                        dy,
                        node.value.shape(),
                        *axis,
                    );
                    out.push((input.0, di));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let scale = dy[0] / T::from_f64(batch as f64);
                    let mut di = vec![T::ZERO; probs.len()];
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { T::ONE } else { T::ZERO };
                            di[b * classes + c] = (probs[b * classes + c] - onehot) * scale;
                        }
                    }
                    out.push((logits.0, di));
                }
            }
            Op::Reshape { input } => {
                if self.needs(*input) {
                    out.push((input.0, dy.to_vec()));
                }
            }
            Op::InterpRows { input } => {
                if self.needs(*input) {
                    let ishape = self.nodes[input.0].value.shape();
                    let (n0, c) = (ishape[0], ishape[1]);
                    let n = node.value.shape()[0];
                    out.push((input.0, ops::interp_rows_backward(dy, n0, c, n)));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((a.0, dy.to_vec()));
                }
                if self.needs(*b) {
                    out.push((b.0, dy.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.nodes[b.0].value.data();
                    out.push((a.0, dy.iter().zip(bv).map(|(&g, &v)| g * v).collect()));
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0].value.data();
                    out.push((b.0, dy.iter().zip(av).map(|(&g, &v)| g * v).collect()));
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let n = self.nodes[input.0].value.numel();
                    out.push((input.0, vec![dy[0]; n]));
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(*input) {
                    out.push((input.0, dy.iter().map(|&g| g * *factor).collect()));
                }
            }
        }
        out
    }
}
