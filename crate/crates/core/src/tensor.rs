//! Dense `f64` tensors and a define-by-run tape for reverse-mode differentiation.
//!
//! The tape is deliberately narrow: it knows the handful of operators a small
//! block-structured CNN needs (convolution, ReLU, 2x2 max-pool, global average
//! pool, dense layer, softmax cross-entropy) plus a channel-broadcast spatial
//! mask and a few scalar helpers used by tests. Gradients are kept for every
//! node that requires them, intermediate activations included, so GradCAM can
//! read `d logit / d activation` straight off the tape.

use crate::error::TensorError;

/// Dense row-major tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape")
    }

    /// Marks the tensor as a differentiation target.
    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), TensorError> {
        if delta.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!("gradient length {} for tensor {:?}", delta.len(), self.shape),
            });
        }
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    SpatialMask {
        input: Var,
        mask: Vec<f64>,
    },
    Sum {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of operations; inputs always precede their consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].value.grad()
    }

    /// Removes the value from the tape, leaving an empty placeholder behind.
    pub fn take(&mut self, var: Var) -> Tensor {
        let node = &mut self.nodes[var.0];
        std::mem::replace(
            &mut node.value,
            Tensor {
                shape: vec![0],
                data: Vec::new(),
                requires_grad: false,
                grad: None,
            },
        )
    }

    /// Turns on gradient tracking for an already-recorded value. Only
    /// operations recorded afterwards see the flag.
    pub fn mark_requires_grad(&mut self, var: Var) {
        self.nodes[var.0].value.requires_grad = true;
    }

    /// Drops every stored gradient.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.needs_grad(inputs);
        let value = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push(value, op)
    }

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let geom = ConvGeometry::new(x.shape(), k.shape(), b.shape(), stride, padding)?;
        let out = conv2d_forward(&geom, x.data(), k.data(), b.data());
        Ok(self.derived(
            geom.output_shape(),
            out,
            &[input, kernel, bias],
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.derived(shape, data, &[input], Op::Relu { input })
    }

    /// 2x2 max-pool with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let [n, c, h, w] = dims4("maxpool2d", x.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddSpatial { height: h, width: w });
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.derived(
            vec![n, c, ho, wo],
            out,
            &[input],
            Op::MaxPool2d { input, argmax },
        ))
    }

    /// Spatial mean per channel: N×C×H×W -> N×C.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let [n, c, h, w] = dims4("global_avg_pool", x.shape())?;
        let area = h * w;
        let data = x
            .data()
            .chunks_exact(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        Ok(self.derived(vec![n, c], data, &[input], Op::GlobalAvgPool { input }))
    }

    /// Affine map `input · weightᵀ + bias`: N×D, K×D, K -> N×K.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let (n, d, k) = dense_dims(x.shape(), wt.shape(), b.shape())?;
        let mut out = vec![0.0; n * k];
        for row in out.chunks_exact_mut(k) {
            row.copy_from_slice(b.data());
        }
        // out[n×k] += x[n×d] · wᵀ[d×k]
        gemm(
            n,
            d,
            k,
            x.data(),
            (d as isize, 1),
            wt.data(),
            (1, d as isize),
            &mut out,
            1.0,
        );
        Ok(self.derived(
            vec![n, k],
            out,
            &[input, weight, bias],
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let z = self.value(logits);
        let (n, k) = dims2("softmax_cross_entropy", z.shape())?;
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for {} rows", labels.len(), n),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &label) in z.data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_sum = sum.ln() + max;
            loss += log_sum - row[label];
            probs.extend(row.iter().map(|&v| (v - log_sum).exp()));
        }
        loss /= n as f64;
        Ok(self.derived(
            vec![1],
            vec![loss],
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Multiplies an N×C×H×W value by an N×H×W mask broadcast over channels.
    /// The mask is a constant: no gradient flows into it.
    pub fn spatial_mask(&mut self, input: Var, mask: &[f64]) -> Result<Var, TensorError> {
        let x = self.value(input);
        let [n, c, h, w] = dims4("spatial_mask", x.shape())?;
        if mask.len() != n * h * w {
            return Err(TensorError::ShapeMismatch {
                op: "spatial_mask",
                detail: format!(
                    "mask of {} values for activation {:?} (expected {}x{}x{})",
                    mask.len(),
                    x.shape(),
                    n,
                    h,
                    w
                ),
            });
        }
        let area = h * w;
        let mut data = x.data().to_vec();
        for (p, plane) in data.chunks_exact_mut(area).enumerate() {
            let m = &mask[(p / c) * area..(p / c + 1) * area];
            plane.iter_mut().zip(m).for_each(|(v, &s)| *v *= s);
        }
        let shape = x.shape().to_vec();
        Ok(self.derived(
            shape,
            data,
            &[input],
            Op::SpatialMask {
                input,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.derived(vec![1], vec![s], &[input], Op::Sum { input })
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let shape = a.shape().to_vec();
        Ok(self.derived(shape, data, &[lhs, rhs], Op::Add { lhs, rhs }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|v| v * factor).collect();
        self.derived(shape, data, &[input], Op::Scale { input, factor })
    }

    /// Reverse pass from a scalar loss with seed gradient 1.0.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss { shape });
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Reverse pass from an arbitrary node with an explicit seed gradient
    /// (for example a one-hot vector selecting one logit per row).
    pub fn backward_with_seed(&mut self, root: Var, seed: &[f64]) -> Result<(), TensorError> {
        if seed.len() != self.value(root).len() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "seed of {} values for output {:?}",
                    seed.len(),
                    self.value(root).shape()
                ),
            });
        }
        if !self.value(root).requires_grad {
            return Ok(());
        }
        self.nodes[root.0].value.accumulate_grad(seed)?;
        for idx in (0..=root.0).rev() {
            let Some(upstream) = self.nodes[idx].value.grad.take() else {
                continue;
            };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            self.propagate(idx, &upstream)?;
            self.nodes[idx].value.grad = Some(upstream);
        }
        Ok(())
    }

    fn send(&mut self, var: Var, delta: Vec<f64>) -> Result<(), TensorError> {
        let node = &mut self.nodes[var.0].value;
        if !node.requires_grad {
            return Ok(());
        }
        if node.grad.is_none() && delta.len() == node.data.len() {
            node.grad = Some(delta);
            Ok(())
        } else {
            node.accumulate_grad(&delta)
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].value.requires_grad
    }

    fn propagate(&mut self, idx: usize, upstream: &[f64]) -> Result<(), TensorError> {
        // Borrow gymnastics: compute input gradients from immutable views
        // first, then accumulate.
        let mut sends: Vec<(Var, Vec<f64>)> = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let x = self.value(input);
                let k = self.value(kernel);
                let geom =
                    ConvGeometry::new(x.shape(), k.shape(), self.value(bias).shape(), *stride, *padding)?;
                let grads = conv2d_backward(
                    &geom,
                    x.data(),
                    k.data(),
                    upstream,
                    self.wants(input),
                    self.wants(kernel),
                );
                if let Some(gx) = grads.input {
                    sends.push((input, gx));
                }
                if let Some(gk) = grads.kernel {
                    sends.push((kernel, gk));
                }
                if self.wants(bias) {
                    sends.push((bias, grads.bias));
                }
            }
            Op::Relu { input } => {
                if self.wants(*input) {
                    let x = self.value(*input).data();
                    let mut g = upstream.to_vec();
                    g.iter_mut().zip(x).for_each(|(u, &v)| {
                        if v <= 0.0 {
                            *u = 0.0;
                        }
                    });
                    sends.push((*input, g));
                }
            }
            Op::MaxPool2d { input, argmax } if self.wants(*input) => {
                let mut g = vec![0.0; self.value(*input).len()];
                for (&src, &u) in argmax.iter().zip(upstream) {
                    g[src] += u;
                }
                sends.push((*input, g));
            }
            Op::MaxPool2d { .. } => {}
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let area = x.shape()[2] * x.shape()[3];
                let inv = 1.0 / area as f64;
                let mut g = Vec::with_capacity(x.len());
                for &u in upstream {
                    g.extend(std::iter::repeat_n(u * inv, area));
                }
                sends.push((*input, g));
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let x = self.value(input);
                let wt = self.value(weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let k = wt.shape()[0];
                if self.wants(input) {
                    // gx[n×d] = g[n×k] · w[k×d]
                    let mut gx = vec![0.0; n * d];
                    gemm(n, k, d, upstream, (k as isize, 1), wt.data(), (d as isize, 1), &mut gx, 0.0);
                    sends.push((input, gx));
                }
                if self.wants(weight) {
                    // gw[k×d] = gᵀ[k×n] · x[n×d]
                    let mut gw = vec![0.0; k * d];
                    gemm(k, n, d, upstream, (1, k as isize), x.data(), (d as isize, 1), &mut gw, 0.0);
                    sends.push((weight, gw));
                }
                if self.wants(bias) {
                    let mut gb = vec![0.0; k];
                    for row in upstream.chunks_exact(k) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    sends.push((bias, gb));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = upstream[0] / n as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    g[row * k + label] -= scale;
                }
                sends.push((*logits, g));
            }
            Op::SpatialMask { input, mask } => {
                let x = self.value(*input);
                let c = x.shape()[1];
                let area = x.shape()[2] * x.shape()[3];
                let mut g = upstream.to_vec();
                for (p, plane) in g.chunks_exact_mut(area).enumerate() {
                    let m = &mask[(p / c) * area..(p / c + 1) * area];
                    plane.iter_mut().zip(m).for_each(|(v, &s)| *v *= s);
                }
                sends.push((*input, g));
            }
            Op::Sum { input } => {
                let n = self.value(*input).len();
                sends.push((*input, vec![upstream[0]; n]));
            }
            Op::Add { lhs, rhs } => {
                sends.push((*lhs, upstream.to_vec()));
                sends.push((*rhs, upstream.to_vec()));
            }
            Op::Scale { input, factor } => {
                sends.push((*input, upstream.iter().map(|u| u * factor).collect()));
            }
        }
        for (var, g) in sends {
            self.send(var, g)?;
        }
        Ok(())
    }
}

/// θ ← θ − lr·grad, then zero the gradients.
pub fn sgd_update(params: &mut [&mut Tensor], learning_rate: f64) -> Result<(), TensorError> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(TensorError::InvalidLearningRate(learning_rate));
    }
    if let Some(pos) = params.iter().position(|p| p.grad.is_none()) {
        return Err(TensorError::MissingGrad { index: pos });
    }
    for p in params.iter_mut() {
        let grad = p.grad.as_mut().expect("checked above");
        p.data
            .iter_mut()
            .zip(grad.iter_mut())
            .for_each(|(theta, g)| {
                *theta -= learning_rate * *g;
                *g = 0.0;
            });
    }
    Ok(())
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4], TensorError> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected rank-4 N×C×H×W, got {shape:?}"),
        }),
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        &[n, k] => Ok((n, k)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected rank-2 N×K, got {shape:?}"),
        }),
    }
}

fn dense_dims(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    let (n, d) = dims2("dense", x)?;
    let (k, dw) = dims2("dense", w)?;
    if d != dw || b != [k] {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            detail: format!("input {x:?}, weight {w:?}, bias {b:?}"),
        });
    }
    Ok((n, d, k))
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c`, with arbitrary (row, col) strides for
/// `a` and `b` and a dense row-major `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(a.len() as isize >= span(m, k, a_strides));
    assert!(b.len() as isize >= span(k, n, b_strides));
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping shared by the convolution forward and backward passes.
#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
    out_height: usize,
    out_width: usize,
}

impl ConvGeometry {
    fn new(
        x: &[usize],
        k: &[usize],
        b: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let [batch, in_channels, height, width] = dims4("conv2d", x)?;
        let [out_channels, kc, kh, kw] = dims4("conv2d", k)?;
        let bad = |detail: String| TensorError::ShapeMismatch {
            op: "conv2d",
            detail,
        };
        if kc != in_channels {
            return Err(bad(format!(
                "kernel expects {kc} input channels, input {x:?} has {in_channels}"
            )));
        }
        if kh != kw {
            return Err(bad(format!("non-square kernel {kh}x{kw}")));
        }
        if b != [out_channels] {
            return Err(bad(format!("bias {b:?} for {out_channels} output channels")));
        }
        if stride == 0 {
            return Err(bad("stride must be positive".into()));
        }
        if kh > height + 2 * padding || kw > width + 2 * padding {
            return Err(bad(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            ksize: kh,
            stride,
            padding,
            out_height: (height + 2 * padding - kh) / stride + 1,
            out_width: (width + 2 * padding - kw) / stride + 1,
        })
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.ksize * self.ksize
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the image row,
    /// for unit stride.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx).min(self.out_width);
        let hi = (self.width + self.padding)
            .saturating_sub(kx)
            .min(self.out_width)
            .max(lo);
        (lo, hi)
    }

    /// Input row hit by tap `ky` at output row `oy`, if inside the image.
    #[inline]
    fn input_row(&self, ky: usize, oy: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        (iy < self.height).then_some(iy)
    }

    #[inline]
    fn input_col(&self, kx: usize, ox: usize) -> Option<usize> {
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (ix < self.width).then_some(ix)
    }

    /// Unfolds one image (C×H×W) into `cols`, a `patch_len × positions`
    /// matrix. `cols` must be zeroed or hold a previous unfold of the same
    /// geometry (padding cells are never written).
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        let plane = self.height * self.width;
        for ci in 0..self.in_channels {
            let src = &x[ci * plane..][..plane];
            for ky in 0..self.ksize {
                for kx in 0..self.ksize {
                    let row = (ci * self.ksize + ky) * self.ksize + kx;
                    let dst = &mut cols[row * p..][..p];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.out_height {
                        let Some(iy) = self.input_row(ky, oy) else {
                            continue;
                        };
                        let src_line = &src[iy * self.width..][..self.width];
                        let dst_line = &mut dst[oy * self.out_width..][..self.out_width];
                        if self.stride == 1 {
                            let shift = lo + kx - self.padding;
                            dst_line[lo..hi].copy_from_slice(&src_line[shift..shift + hi - lo]);
                        } else {
                            for (ox, d) in dst_line.iter_mut().enumerate() {
                                if let Some(ix) = self.input_col(kx, ox) {
                                    *d = src_line[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: folds column gradients onto one image's
    /// input gradient (accumulating).
    fn col2im(&self, cols_grad: &[f64], out: &mut [f64]) {
        let p = self.positions();
        let plane = self.height * self.width;
        for ci in 0..self.in_channels {
            let dst = &mut out[ci * plane..][..plane];
            for ky in 0..self.ksize {
                for kx in 0..self.ksize {
                    let row = (ci * self.ksize + ky) * self.ksize + kx;
                    let src = &cols_grad[row * p..][..p];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.out_height {
                        let Some(iy) = self.input_row(ky, oy) else {
                            continue;
                        };
                        let dst_line = &mut dst[iy * self.width..][..self.width];
                        let src_line = &src[oy * self.out_width..][..self.out_width];
                        if self.stride == 1 {
                            let shift = lo + kx - self.padding;
                            dst_line[shift..shift + hi - lo]
                                .iter_mut()
                                .zip(&src_line[lo..hi])
                                .for_each(|(d, s)| *d += s);
                        } else {
                            for (ox, s) in src_line.iter().enumerate() {
                                if let Some(ix) = self.input_col(kx, ox) {
                                    dst_line[ix] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(geom: &ConvGeometry, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
    let p = geom.positions();
    let pl = geom.patch_len();
    let in_len = geom.in_channels * geom.height * geom.width;
    let out_len = geom.out_channels * p;
    let mut cols = vec![0.0; pl * p];
    let mut out = vec![0.0; geom.batch * out_len];
    for (xn, yn) in x.chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
        geom.im2col(xn, &mut cols);
        for (row, &bias) in yn.chunks_exact_mut(p).zip(b) {
            row.fill(bias);
        }
        // y[C_out × P] = k[C_out × PL] · cols[PL × P] + y
        gemm(
            geom.out_channels,
            pl,
            p,
            k,
            (pl as isize, 1),
            &cols,
            (p as isize, 1),
            yn,
            1.0,
        );
    }
    out
}

struct ConvGrads {
    input: Option<Vec<f64>>,
    kernel: Option<Vec<f64>>,
    bias: Vec<f64>,
}

fn conv2d_backward(
    geom: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    upstream: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> ConvGrads {
    let p = geom.positions();
    let pl = geom.patch_len();
    let in_len = geom.in_channels * geom.height * geom.width;
    let out_len = geom.out_channels * p;
    let mut bias = vec![0.0; geom.out_channels];
    let mut kernel = want_kernel.then(|| vec![0.0; geom.out_channels * pl]);
    let mut input = want_input.then(|| vec![0.0; x.len()]);
    let mut cols = vec![0.0; pl * p];
    let mut gcols = if want_input { vec![0.0; pl * p] } else { Vec::new() };
    for n in 0..geom.batch {
        let gy = &upstream[n * out_len..][..out_len];
        for (acc, row) in bias.iter_mut().zip(gy.chunks_exact(p)) {
            *acc += row.iter().sum::<f64>();
        }
        if let Some(gk) = kernel.as_mut() {
            geom.im2col(&x[n * in_len..][..in_len], &mut cols);
            // gk[C_out × PL] += gy[C_out × P] · colsᵀ[P × PL]
            gemm(
                geom.out_channels,
                p,
                pl,
                gy,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                gk,
                1.0,
            );
        }
        if let Some(gx) = input.as_mut() {
            // gcols[PL × P] = kᵀ[PL × C_out] · gy[C_out × P]
            gemm(
                pl,
                geom.out_channels,
                p,
                k,
                (1, pl as isize),
                gy,
                (p as isize, 1),
                &mut gcols,
                0.0,
            );
            geom.col2im(&gcols, &mut gx[n * in_len..][..in_len]);
        }
    }
    ConvGrads {
        input,
        kernel,
        bias,
    }
}
