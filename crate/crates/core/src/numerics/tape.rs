//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass.
//! Operations evaluate eagerly as they are recorded, so the same code
//! path serves plain inference (record, never call backward) and
//! training (record, then [`Tape::backward`]).
//!
//! The operation set is deliberately small: exactly what the patch
//! encoders, the position classifier and the losses need.
//! Convolutions are lowered to an im2col buffer and a single matrix
//! product, which is where almost all of the compute goes.

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
pub type NodeId = usize;

/// Recorded operation, keeping the input ids needed for backward.
#[derive(Debug, Clone)]
enum Op {
    /// Input or parameter; no inputs.
    Leaf,
    /// Valid-padding 2-D convolution plus channel bias.
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId, stride: usize },
    /// `max(x, alpha * x)` with the subgradient `alpha` at exactly zero.
    LeakyRelu { input: NodeId, alpha: f64 },
    /// `x * W + b` for a rank-1 input.
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    /// Element-wise difference of same-shape tensors.
    Sub { lhs: NodeId, rhs: NodeId },
    /// Element-wise sum of same-shape tensors.
    Add { lhs: NodeId, rhs: NodeId },
    /// Multiplication by a compile-time constant.
    Scale { input: NodeId, factor: f64 },
    /// Sum of all elements, yielding a scalar.
    Sum { input: NodeId },
    /// Concatenation of rank-1 tensors.
    Concat { inputs: Vec<NodeId> },
    /// Shape change without data movement.
    Reshape { input: NodeId },
    /// `sqrt(sum(x^2) + eps)`, yielding a scalar.
    L2Norm { input: NodeId },
    /// Cross-entropy of softmaxed logits against one target class.
    /// The softmax probabilities are kept for backward.
    SoftmaxCrossEntropy { logits: NodeId, target: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node<E> {
    value: Tensor<E>,
    op: Op,
    requires_grad: bool,
}

/// Flat autodiff tape. Nodes are appended during the forward pass and
/// walked in reverse by [`Tape::backward`].
#[derive(Debug)]
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Tape<E> {
    /// Creates an empty tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when nothing has been recorded yet.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` loss with respect to node `id`,
    /// if the node participates in it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<E>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Records an input tensor. Pass `requires_grad = true` for
    /// parameters and for inputs whose gradient the caller wants.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Valid-padding convolution of `input` `[H, W, Cin]` with kernel
    /// `[kh, kw, Cin, Cout]` and bias `[Cout]`, sampled every `stride`
    /// pixels. Output is `[OH, OW, Cout]` with
    /// `OH = (H - kh) / stride + 1` (integer division).
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (xs, ks, bs) =
            (self.value(input).shape(), self.value(kernel).shape(), self.value(bias).shape());
        if xs.len() != 3 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects input [H,W,Cin], kernel [kh,kw,Cin,Cout], bias [Cout]; \
                 got {:?}, {:?}, {:?}",
                xs, ks, bs
            )));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin || bs[0] != cout {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channel mismatch: input Cin={}, kernel Cin={}, kernel Cout={}, bias {}",
                cin, kcin, cout, bs[0]
            )));
        }
        if h < kh || w < kw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input {}x{} smaller than kernel {}x{}",
                h, w, kh, kw
            )));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;

        let cols = im2col(self.value(input), kh, kw, stride, oh, ow);
        let k = kh * kw * cin;
        let cols_view = ArrayView2::from_shape((oh * ow, k), &cols).expect("im2col extent");
        let kern_view =
            ArrayView2::from_shape((k, cout), self.value(kernel).data()).expect("kernel extent");
        let mut out = cols_view.dot(&kern_view);
        {
            let bias_view =
                ArrayView1::from_shape(cout, self.value(bias).data()).expect("bias extent");
            for mut row in out.rows_mut() {
                row += &bias_view;
            }
        }
        let value = Tensor::from_vec(&[oh, ow, cout], out.into_raw_vec_and_offset().0)?;
        let rg = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, stride }, rg))
    }

    /// Leaky rectifier with negative slope `alpha`, applied element-wise.
    pub fn leaky_relu(&mut self, input: NodeId, alpha: f64) -> NodeId {
        let a = E::from_f64(alpha);
        let mut value = self.value(input).clone();
        for v in value.data_mut() {
            if *v < E::zero() {
                *v = *v * a;
            }
        }
        let rg = self.requires(input);
        self.push(value, Op::LeakyRelu { input, alpha }, rg)
    }

    /// Affine map of a rank-1 input: `x [n] * W [n, m] + b [m]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) =
            (self.value(input).shape(), self.value(weight).shape(), self.value(bias).shape());
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[0] != xs[0] || ws[1] != bs[0] {
            return Err(Error::ShapeMismatch(format!(
                "linear expects x [n], W [n,m], b [m]; got {:?}, {:?}, {:?}",
                xs, ws, bs
            )));
        }
        let (n, m) = (ws[0], ws[1]);
        let x = ArrayView1::from_shape(n, self.value(input).data()).expect("input extent");
        let w = ArrayView2::from_shape((n, m), self.value(weight).data()).expect("weight extent");
        let mut y = x.dot(&w);
        y += &ArrayView1::from_shape(m, self.value(bias).data()).expect("bias extent");
        let value = Tensor::from_vec(&[m], y.to_vec())?;
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Element-wise difference of two same-shape tensors.
    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.same_shape("sub", lhs, rhs)?;
        let value = Tensor::from_vec(
            self.value(lhs).shape(),
            self.value(lhs)
                .data()
                .iter()
                .zip(self.value(rhs).data())
                .map(|(a, b)| *a - *b)
                .collect(),
        )?;
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(value, Op::Sub { lhs, rhs }, rg))
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.same_shape("add", lhs, rhs)?;
        let value = Tensor::from_vec(
            self.value(lhs).shape(),
            self.value(lhs)
                .data()
                .iter()
                .zip(self.value(rhs).data())
                .map(|(a, b)| *a + *b)
                .collect(),
        )?;
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(value, Op::Add { lhs, rhs }, rg))
    }

    /// Multiplies every element by the constant `factor`.
    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let f = E::from_f64(factor);
        let mut value = self.value(input).clone();
        for v in value.data_mut() {
            *v = *v * f;
        }
        let rg = self.requires(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let mut acc = E::zero();
        for v in self.value(input).data() {
            acc += *v;
        }
        let rg = self.requires(input);
        self.push(Tensor::scalar(acc), Op::Sum { input }, rg)
    }

    /// Concatenates rank-1 tensors in the given order.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        for &id in inputs {
            if self.value(id).shape().len() != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "concat expects rank-1 inputs, got {:?}",
                    self.value(id).shape()
                )));
            }
            data.extend_from_slice(self.value(id).data());
        }
        let value = Tensor::from_vec(&[data.len()], data)?;
        let rg = inputs.iter().any(|&id| self.requires(id));
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }, rg))
    }

    /// Reinterprets a tensor under a new shape with the same element count.
    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = Tensor::from_vec(shape, self.value(input).data().to_vec())?;
        let rg = self.requires(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Euclidean norm `sqrt(sum(x^2) + eps)` as a rank-0 tensor.
    ///
    /// The additive `eps` keeps the gradient finite at the origin, where
    /// the exact norm is not differentiable.
    pub fn l2_norm(&mut self, input: NodeId, eps: f64) -> NodeId {
        let mut acc = 0.0f64;
        for v in self.value(input).data() {
            acc += v.as_f64() * v.as_f64();
        }
        let value = Tensor::scalar(E::from_f64((acc + eps).sqrt()));
        let rg = self.requires(input);
        self.push(value, Op::L2Norm { input }, rg)
    }

    /// Cross-entropy between `softmax(logits)` and the class `target`,
    /// as a rank-0 tensor. The softmax subtracts the maximum logit
    /// first, so uniformly shifted logits give an identical loss.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let ls = self.value(logits);
        if ls.shape().len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "softmax_cross_entropy expects rank-1 logits, got {:?}",
                ls.shape()
            )));
        }
        let k = ls.shape()[0];
        if target >= k {
            return Err(Error::InvalidArgument(format!(
                "target class {} out of range for {} logits",
                target, k
            )));
        }
        let z: Vec<f64> = ls.data().iter().map(|v| v.as_f64()).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let loss = denom.ln() - (z[target] - max);
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(E::from_f64(loss)),
            Op::SoftmaxCrossEntropy { logits, target, probs },
            rg,
        ))
    }

    fn same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "{} expects equal shapes, got {:?} and {:?}",
                what,
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Runs reverse-mode differentiation from the scalar node `loss`.
    ///
    /// Gradients of earlier `backward` calls are discarded. After the
    /// call, [`Tape::grad`] returns `d loss / d node` for every node the
    /// loss depends on that was recorded with `requires_grad` somewhere
    /// beneath it.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss] = Some(Tensor::from_vec(
            self.value(loss).shape(),
            vec![E::one(); 1],
        )?);

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[id].take() else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, bias, stride } => {
                    self.backward_conv2d(id, input, kernel, bias, stride, &gout)
                }
                Op::LeakyRelu { input, alpha } => {
                    if self.requires(input) {
                        let a = E::from_f64(alpha);
                        let slopes: Vec<E> = self
                            .value(input)
                            .data()
                            .iter()
                            .zip(gout.data())
                            .map(|(x, g)| if *x > E::zero() { *g } else { *g * a })
                            .collect();
                        let t = Tensor::from_vec(self.value(input).shape(), slopes)
                            .expect("leaky_relu grad shape");
                        self.add_grad(input, t);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (n, m) =
                        (self.value(weight).shape()[0], self.value(weight).shape()[1]);
                    let gy = ArrayView1::from_shape(m, gout.data()).expect("grad extent");
                    if self.requires(input) {
                        let w = ArrayView2::from_shape((n, m), self.value(weight).data())
                            .expect("weight extent");
                        let gx = w.dot(&gy);
                        self.add_grad(input, Tensor::from_vec(&[n], gx.to_vec()).unwrap());
                    }
                    if self.requires(weight) {
                        let x = self.value(input).data().to_vec();
                        let mut gw = vec![E::zero(); n * m];
                        for i in 0..n {
                            let xi = x[i];
                            let row = &mut gw[i * m..(i + 1) * m];
                            for (j, g) in gout.data().iter().enumerate() {
                                row[j] = xi * *g;
                            }
                        }
                        self.add_grad(weight, Tensor::from_vec(&[n, m], gw).unwrap());
                    }
                    if self.requires(bias) {
                        self.add_grad(bias, gout.clone());
                    }
                }
                Op::Sub { lhs, rhs } => {
                    if self.requires(lhs) {
                        self.add_grad(lhs, gout.clone());
                    }
                    if self.requires(rhs) {
                        let mut neg = gout.clone();
                        for v in neg.data_mut() {
                            *v = E::zero() - *v;
                        }
                        self.add_grad(rhs, neg);
                    }
                }
                Op::Add { lhs, rhs } => {
                    if self.requires(lhs) {
                        self.add_grad(lhs, gout.clone());
                    }
                    if self.requires(rhs) {
                        self.add_grad(rhs, gout.clone());
                    }
                }
                Op::Scale { input, factor } => {
                    if self.requires(input) {
                        let f = E::from_f64(factor);
                        let mut g = gout.clone();
                        for v in g.data_mut() {
                            *v = *v * f;
                        }
                        self.add_grad(input, g);
                    }
                }
                Op::Sum { input } => {
                    if self.requires(input) {
                        let g = gout.item();
                        let t = Tensor::from_vec(
                            self.value(input).shape(),
                            vec![g; self.value(input).len()],
                        )
                        .unwrap();
                        self.add_grad(input, t);
                    }
                }
                Op::Concat { inputs } => {
                    let mut offset = 0;
                    for &src in &inputs {
                        let n = self.value(src).len();
                        if self.requires(src) {
                            let slice = gout.data()[offset..offset + n].to_vec();
                            self.add_grad(src, Tensor::from_vec(&[n], slice).unwrap());
                        }
                        offset += n;
                    }
                }
                Op::Reshape { input } => {
                    if self.requires(input) {
                        let t = Tensor::from_vec(
                            self.value(input).shape(),
                            gout.data().to_vec(),
                        )
                        .unwrap();
                        self.add_grad(input, t);
                    }
                }
                Op::L2Norm { input } => {
                    if self.requires(input) {
                        // d norm / d x = x / norm; eps keeps norm > 0.
                        let norm = self.value(id).item();
                        let g = gout.item();
                        let coeff = g / norm;
                        let t = Tensor::from_vec(
                            self.value(input).shape(),
                            self.value(input).data().iter().map(|x| *x * coeff).collect(),
                        )
                        .unwrap();
                        self.add_grad(input, t);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, target, probs } => {
                    if self.requires(logits) {
                        let g = gout.item();
                        let data: Vec<E> = probs
                            .iter()
                            .enumerate()
                            .map(|(j, p)| {
                                let delta = if j == target { 1.0 } else { 0.0 };
                                g * E::from_f64(p - delta)
                            })
                            .collect();
                        let n = data.len();
                        self.add_grad(logits, Tensor::from_vec(&[n], data).unwrap());
                    }
                }
            }
            // Restore the slot so gradients stay readable after the pass.
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn backward_conv2d(
        &mut self,
        node: NodeId,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        gout: &Tensor<E>,
    ) {
        let (h, w, cin) = {
            let s = self.value(input).shape();
            (s[0], s[1], s[2])
        };
        let (kh, kw, cout) = {
            let s = self.value(kernel).shape();
            (s[0], s[1], s[3])
        };
        let (oh, ow) = {
            let s = self.value(node).shape();
            (s[0], s[1])
        };
        let k = kh * kw * cin;
        let gy = ArrayView2::from_shape((oh * ow, cout), gout.data()).expect("grad extent");

        if self.requires(kernel) {
            // dW = cols^T . dOut; the im2col buffer is rebuilt from the
            // stored input rather than cached at forward time.
            let cols = im2col(self.value(input), kh, kw, stride, oh, ow);
            let cols_view = ArrayView2::from_shape((oh * ow, k), &cols).expect("im2col extent");
            let gw = cols_view.t().dot(&gy);
            self.add_grad(
                kernel,
                Tensor::from_vec(&[kh, kw, cin, cout], gw.into_raw_vec_and_offset().0).unwrap(),
            );
        }
        if self.requires(bias) {
            let mut gb = vec![E::zero(); cout];
            for row in gy.rows() {
                for (b, g) in gb.iter_mut().zip(row) {
                    *b += *g;
                }
            }
            self.add_grad(bias, Tensor::from_vec(&[cout], gb).unwrap());
        }
        if self.requires(input) {
            let kern =
                ArrayView2::from_shape((k, cout), self.value(kernel).data()).expect("kernel extent");
            let gcols = gy.dot(&kern.t());
            let mut gx = Tensor::zeros(&[h, w, cin]);
            col2im_add(
                &mut gx,
                gcols.view(),
                kh,
                kw,
                stride,
                oh,
                ow,
            );
            self.add_grad(input, gx);
        }
    }

    fn add_grad(&mut self, id: NodeId, contribution: Tensor<E>) {
        match &mut self.grads[id] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Unrolls convolution windows into rows of a `[OH*OW, kh*kw*Cin]`
/// buffer, matching the `[kh, kw, Cin, Cout]` kernel layout.
fn im2col<E: Scalar>(
    input: &Tensor<E>,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let (w, cin) = (input.shape()[1], input.shape()[2]);
    let data = input.data();
    let row_len = kh * kw * cin;
    let mut cols = vec![E::zero(); oh * ow * row_len];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            let mut dst = 0;
            for ky in 0..kh {
                let src = ((oy * stride + ky) * w + ox * stride) * cin;
                let span = kw * cin;
                row[dst..dst + span].copy_from_slice(&data[src..src + span]);
                dst += span;
            }
        }
    }
    cols
}

/// Scatter-adds im2col-layout gradients back onto the input grid.
fn col2im_add<E: Scalar>(
    gx: &mut Tensor<E>,
    gcols: ArrayView2<'_, E>,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let (w, cin) = (gx.shape()[1], gx.shape()[2]);
    let data = gx.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = gcols.row(oy * ow + ox);
            let mut src = 0;
            for ky in 0..kh {
                let dst = ((oy * stride + ky) * w + ox * stride) * cin;
                let span = kw * cin;
                // Matrix products with a unit inner dimension can
                // come back in a layout whose rows are strided, so
                // fall back to indexed reads when the row is not a
                // plain slice.
                if let Some(row) = row.as_slice() {
                    for (d, s) in data[dst..dst + span].iter_mut().zip(&row[src..src + span]) {
                        *d += *s;
                    }
                } else {
                    for (i, d) in data[dst..dst + span].iter_mut().enumerate() {
                        *d += row[src + i];
                    }
                }
                src += span;
            }
        }
    }
}
