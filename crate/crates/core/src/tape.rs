//! Reverse-mode differentiation tape.
//!
//! Ops append nodes to a linear tape during the forward pass; `backward`
//! consumes the tape, replaying it in reverse and accumulating gradients
//! into every `requires_grad` leaf reachable from the loss. Leaves snapshot
//! their input tensors, so mutating the original tensor after registration
//! cannot corrupt the replay.
//!
//! A tape created with `no_grad` computes values only: nothing is recorded
//! and `recorded_ops()` stays zero, which inference asserts on.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatVec { w: Var, v: Var },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Sigmoid { x: Var },
    Tanh { x: Var },
    LeakyRelu { x: Var, slope: T },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    MulScalarVar { x: Var, s: Var },
    Concat { a: Var, b: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    Reshape { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SoftmaxRows { x: Var },
    LnEps { x: Var, eps: T },
    CosineVec { a: Var, b: Var },
    RowCosine { a: Var, b: Var },
    StandardizeChannels { x: Var, inv_std: Vec<T> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    AvgPool2x2 { x: Var },
    GlobalAvgPool { x: Var },
    AddBiasRows { m: Var, bias: Var },
    AddBiasCols { m: Var, bias: Var },
    PadCols { x: Var, positions: Vec<usize>, width: usize },
    MeanRowsGroups { x: Var, groups: Vec<Vec<usize>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a batch-norm forward in training mode;
/// the owner of the running averages folds these in after the step.
#[derive(Clone, Debug)]
pub struct BatchStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Gradients left behind by `backward`, indexed by leaf `Var`.
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    recorded: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true, recorded: 0 }
    }

    /// A tape that evaluates values without recording anything for backward.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false, recorded: 0 }
    }

    /// Number of backward-capable ops recorded so far.
    pub fn recorded_ops(&self) -> usize {
        self.recorded
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Register an external tensor; gradient tracking follows its
    /// `requires_grad` flag. The data is snapshotted.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let needs = t.requires_grad && self.grad_enabled;
        self.push_node(t.clone(), Op::Leaf, needs)
    }

    /// Register a constant that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.data().iter().all(|v| v.is_finite()), "non-finite op output");
        let (op, needs_grad) = if self.grad_enabled {
            if !matches!(op, Op::Leaf) {
                self.recorded += 1;
            }
            (op, needs_grad)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn out<F: FnOnce() -> Op<T>>(&mut self, shape: Vec<usize>, data: Vec<T>, needs: bool, op: F) -> Var {
        self.push_node(Tensor::from_raw(shape, data), op(), needs)
    }

    // -- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(vec![m, n], data, needs, || Op::MatMul { a, b }))
    }

    pub fn matvec(&mut self, w: Var, v: Var) -> Result<Var> {
        let (sw, sv) = (self.shape(w), self.shape(v));
        if sw.len() != 2 || sv.len() != 1 || sw[1] != sv[0] {
            return Err(Error::Dim(format!("matvec {sw:?} x {sv:?}")));
        }
        let (m, n) = (sw[0], sw[1]);
        let wd = self.value(w).data();
        let vd = self.value(v).data();
        let data: Vec<T> = (0..m).map(|i| kernels::dot(&wd[i * n..(i + 1) * n], vd)).collect();
        let needs = self.needs(w) || self.needs(v);
        Ok(self.out(vec![m], data, needs, || Op::MatVec { w, v }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::Dim(format!("conv2d expects 4-D input/weight, got {sx:?}, {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(Error::Dim(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                sx[1], sw[1]
            )));
        }
        if sw[2] != sw[3] {
            return Err(Error::Dim(format!("conv2d kernel must be square, got {sw:?}")));
        }
        let k = sw[2];
        if stride < 1 {
            return Err(Error::Dim("conv2d stride must be >= 1".into()));
        }
        if k > sx[2] + 2 * pad || k > sx[3] + 2 * pad {
            return Err(Error::Dim(format!(
                "conv2d kernel {k} exceeds padded input {}x{}",
                sx[2] + 2 * pad,
                sx[3] + 2 * pad
            )));
        }
        let d = ConvDims {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            k,
            stride,
            pad,
            oh: kernels::conv_out_dim(sx[2], k, stride, pad),
            ow: kernels::conv_out_dim(sx[3], k, stride, pad),
        };
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &d);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.out(d.out_shape(), data, needs, || Op::Conv2d { x, w, stride, pad }))
    }

    // -- pointwise ----------------------------------------------------------

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let needs = self.needs(x);
        self.out(self.shape(x).to_vec(), data, needs, || Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let needs = self.needs(x);
        self.out(self.shape(x).to_vec(), data, needs, || Op::Tanh { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let needs = self.needs(x);
        self.out(self.shape(x).to_vec(), data, needs, || Op::LeakyRelu { x, slope })
    }

    fn zip_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape(a, b, "add")?;
        let data: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(self.shape(a).to_vec(), data, needs, || Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape(a, b, "sub")?;
        let data: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(self.shape(a).to_vec(), data, needs, || Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape(a, b, "mul")?;
        let data: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(self.shape(a).to_vec(), data, needs, || Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        self.out(self.shape(x).to_vec(), data, needs, || Op::Scale { x, c })
    }

    /// Multiply a tensor elementwise by a scalar variable of shape [1].
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(Error::Dim(format!("mul_scalar_var: scalar must be [1], got {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.out(self.shape(x).to_vec(), data, needs, || Op::MulScalarVar { x, s }))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::Dim(format!("concat axis {axis} of {sa:?} and {sb:?}")));
        }
        for (i, (&da, &db)) in sa.iter().zip(&sb).enumerate() {
            if i != axis && da != db {
                return Err(Error::Dim(format!("concat: non-axis dims differ: {sa:?} vs {sb:?}")));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (na, nb) = (sa[axis], sb[axis]);
        let mut shape = sa.clone();
        shape[axis] = na + nb;
        let mut data = vec![T::zero(); outer * (na + nb) * inner];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        for o in 0..outer {
            let dst = &mut data[o * (na + nb) * inner..(o + 1) * (na + nb) * inner];
            dst[..na * inner].copy_from_slice(&ad[o * na * inner..(o + 1) * na * inner]);
            dst[na * inner..].copy_from_slice(&bd[o * nb * inner..(o + 1) * nb * inner]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, needs, || Op::Concat { a, b, axis }))
    }

    // -- reductions and shape -----------------------------------------------

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::Dim(format!("reduce axis {axis} out of range for {sx:?}")));
        }
        let outer: usize = sx[..axis].iter().product();
        let n = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let mut shape: Vec<usize> = sx[..axis].iter().chain(&sx[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = T::one() / T::from_f64_lit(n as f64);
            for v in data.iter_mut() {
                *v *= inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.out(shape, data, needs, || {
            if mean {
                Op::MeanAxis { x, axis }
            } else {
                Op::SumAxis { x, axis }
            }
        }))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let needs = self.needs(x);
        self.out(vec![1], vec![s], needs, || Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let needs = self.needs(x);
        self.out(vec![1], vec![s / T::from_f64_lit(n as f64)], needs, || Op::MeanAll { x })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let data = self.value(x).data().to_vec();
        let needs = self.needs(x);
        Ok(self.out(shape, data, needs, || Op::Reshape { x }))
    }

    // -- classification losses ----------------------------------------------

    /// Mean over the batch of -log softmax(logits)[label], log-sum-exp
    /// stabilized. Gradient is (softmax - onehot) / B.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dim(format!(
                "softmax_cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (bsz, c) = (s[0], s[1]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::Index(format!("label {l} at row {i} out of range 0..{c}")));
            }
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); bsz * c];
        let mut total = T::zero();
        for b in 0..bsz {
            let row = &ld[b * c..(b + 1) * c];
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[b * c + j] = e;
                z += e;
            }
            for p in &mut probs[b * c..(b + 1) * c] {
                *p = *p / z;
            }
            total += z.ln() - (row[labels[b]] - m);
        }
        let loss = total / T::from_f64_lit(bsz as f64);
        let needs = self.needs(logits);
        let labels = labels.to_vec();
        Ok(self.out(vec![1], vec![loss], needs, move || Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dim(format!("softmax_rows expects 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                data[i * c + j] = e;
                z += e;
            }
            for v in &mut data[i * c..(i + 1) * c] {
                *v = *v / z;
            }
        }
        let needs = self.needs(x);
        Ok(self.out(s, data, needs, || Op::SoftmaxRows { x }))
    }

    pub fn ln_eps(&mut self, x: Var, eps: T) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| (v + eps).ln()).collect();
        let needs = self.needs(x);
        self.out(self.shape(x).to_vec(), data, needs, || Op::LnEps { x, eps })
    }

    // -- similarity ---------------------------------------------------------

    const NORM_EPS: f64 = 1e-8;

    /// Cosine similarity of two vectors; each norm gets +1e-8 so zero inputs
    /// never divide by zero.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb {
            return Err(Error::Dim(format!("cosine_similarity of {sa:?} and {sb:?}")));
        }
        let eps = T::from_f64_lit(Self::NORM_EPS);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let c = kernels::dot(ad, bd) / ((kernels::norm2(ad) + eps) * (kernels::norm2(bd) + eps));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(vec![1], vec![c], needs, || Op::CosineVec { a, b }))
    }

    /// Pairwise cosine similarities between rows of a [B,d] and rows of b [K,d].
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dim(format!("row_cosine of {sa:?} and {sb:?}")));
        }
        let (bsz, d, k) = (sa[0], sa[1], sb[0]);
        let eps = T::from_f64_lit(Self::NORM_EPS);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let na: Vec<T> = (0..bsz).map(|i| kernels::norm2(&ad[i * d..(i + 1) * d]) + eps).collect();
        let nb: Vec<T> = (0..k).map(|j| kernels::norm2(&bd[j * d..(j + 1) * d]) + eps).collect();
        let mut data = vec![T::zero(); bsz * k];
        for i in 0..bsz {
            for j in 0..k {
                data[i * k + j] =
                    kernels::dot(&ad[i * d..(i + 1) * d], &bd[j * d..(j + 1) * d]) / (na[i] * nb[j]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(vec![bsz, k], data, needs, || Op::RowCosine { a, b }))
    }

    // -- normalization and pooling -------------------------------------------

    /// Parameter-free standardization of each (batch, channel) slice over its
    /// spatial positions: zero mean, unit variance.
    pub fn standardize_channels(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dim(format!("standardize_channels expects 4-D, got {s:?}")));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let n = h * w;
        let inv_n = T::one() / T::from_f64_lit(n as f64);
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); bsz * c];
        for bc in 0..bsz * c {
            let xs = &xd[bc * n..(bc + 1) * n];
            let mut mu = T::zero();
            for &v in xs {
                mu += v;
            }
            mu *= inv_n;
            let mut var = T::zero();
            for &v in xs {
                var += (v - mu) * (v - mu);
            }
            var *= inv_n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[bc] = is;
            for (o, &v) in data[bc * n..(bc + 1) * n].iter_mut().zip(xs) {
                *o = (v - mu) * is;
            }
        }
        let needs = self.needs(x);
        Ok(self.out(s, data, needs, move || Op::StandardizeChannels { x, inv_std }))
    }

    /// Batch norm over (batch, spatial) per channel, using this batch's own
    /// statistics. Returns the batch stats so the caller can update running
    /// averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dim(format!("batch_norm expects 4-D, got {s:?}")));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dim("batch_norm: gamma/beta must be [C]".into()));
        }
        let n = bsz * h * w;
        let inv_n = T::one() / T::from_f64_lit(n as f64);
        let xd = self.value(x).data();
        let hw = h * w;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut mu = T::zero();
            for b in 0..bsz {
                let base = (b * c + ch) * hw;
                for &v in &xd[base..base + hw] {
                    mu += v;
                }
            }
            mu *= inv_n;
            let mut vv = T::zero();
            for b in 0..bsz {
                let base = (b * c + ch) * hw;
                for &v in &xd[base..base + hw] {
                    vv += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = vv * inv_n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut data = vec![T::zero(); xd.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (mu, is, g, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for (o, &v) in data[base..base + hw].iter_mut().zip(&xd[base..base + hw]) {
                    *o = (v - mu) * is * g + be;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = BatchStats { mean: mean.clone(), var: var.clone() };
        let v = self.out(s, data, needs, move || Op::BatchNormTrain { x, gamma, beta, mean, inv_std });
        Ok((v, stats))
    }

    /// Batch norm in inference mode: normalizes with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dim(format!("batch_norm expects 4-D, got {s:?}")));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.len() != c {
            return Err(Error::Dim("batch_norm_eval: per-channel dims must match".into()));
        }
        let hw = h * w;
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut data = vec![T::zero(); xd.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (mu, is, g, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for (o, &v) in data[base..base + hw].iter_mut().zip(&xd[base..base + hw]) {
                    *o = (v - mu) * is * g + be;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.out(s, data, needs, move || Op::BatchNormEval { x, gamma, beta, mean, inv_std }))
    }

    /// 2x2 average pooling with stride 2 (floor semantics on odd sizes).
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dim(format!("avg_pool2x2 expects 4-D, got {s:?}")));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Dim(format!("avg_pool2x2 input {h}x{w} too small")));
        }
        let xd = self.value(x).data();
        let quarter = T::from_f64_lit(0.25);
        let mut data = vec![T::zero(); bsz * c * oh * ow];
        for bc in 0..bsz * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (iy, ix) = (oy * 2, ox * 2);
                    dst[oy * ow + ox] = (src[iy * w + ix]
                        + src[iy * w + ix + 1]
                        + src[(iy + 1) * w + ix]
                        + src[(iy + 1) * w + ix + 1])
                        * quarter;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.out(vec![bsz, c, oh, ow], data, needs, || Op::AvgPool2x2 { x }))
    }

    /// Mean over all spatial positions: [B,C,H,W] -> [B,C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dim(format!("global_avg_pool expects 4-D, got {s:?}")));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let inv = T::one() / T::from_f64_lit((h * w) as f64);
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); bsz * c];
        for bc in 0..bsz * c {
            let mut acc = T::zero();
            for &v in &xd[bc * h * w..(bc + 1) * h * w] {
                acc += v;
            }
            data[bc] = acc * inv;
        }
        let needs = self.needs(x);
        Ok(self.out(vec![bsz, c], data, needs, || Op::GlobalAvgPool { x }))
    }

    // -- bias broadcasting, padding, grouping ---------------------------------

    pub fn add_bias_rows(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (sm, sb) = (self.shape(m).to_vec(), self.shape(bias).to_vec());
        if sm.len() != 2 || sb.len() != 1 || sb[0] != sm[0] {
            return Err(Error::Dim(format!("add_bias_rows {sm:?} + {sb:?}")));
        }
        let (r, c) = (sm[0], sm[1]);
        let md = self.value(m).data();
        let bd = self.value(bias).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = md[i * c + j] + bd[i];
            }
        }
        let needs = self.needs(m) || self.needs(bias);
        Ok(self.out(sm, data, needs, || Op::AddBiasRows { m, bias }))
    }

    pub fn add_bias_cols(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (sm, sb) = (self.shape(m).to_vec(), self.shape(bias).to_vec());
        if sm.len() != 2 || sb.len() != 1 || sb[0] != sm[1] {
            return Err(Error::Dim(format!("add_bias_cols {sm:?} + {sb:?}")));
        }
        let (r, c) = (sm[0], sm[1]);
        let md = self.value(m).data();
        let bd = self.value(bias).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = md[i * c + j] + bd[j];
            }
        }
        let needs = self.needs(m) || self.needs(bias);
        Ok(self.out(sm, data, needs, || Op::AddBiasCols { m, bias }))
    }

    /// Scatter the columns of x [B,K] into a zero matrix [B,width] at the
    /// given column positions.
    pub fn pad_cols(&mut self, x: Var, positions: &[usize], width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] != positions.len() {
            return Err(Error::Dim(format!("pad_cols: {s:?} with {} positions", positions.len())));
        }
        let (bsz, k) = (s[0], s[1]);
        for &p in positions {
            if p >= width {
                return Err(Error::Index(format!("pad_cols: position {p} outside width {width}")));
            }
        }
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); bsz * width];
        for b in 0..bsz {
            for (j, &p) in positions.iter().enumerate() {
                data[b * width + p] = xd[b * k + j];
            }
        }
        let needs = self.needs(x);
        let positions = positions.to_vec();
        Ok(self.out(vec![bsz, width], data, needs, move || Op::PadCols { x, positions, width }))
    }

    /// Mean of selected row groups of x [N,d]: output row k is the mean of
    /// x's rows listed in groups[k].
    pub fn mean_rows_groups(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dim(format!("mean_rows_groups expects 2-D, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        for g in groups {
            if g.is_empty() {
                return Err(Error::Dim("mean_rows_groups: empty group".into()));
            }
            for &r in g {
                if r >= n {
                    return Err(Error::Index(format!("mean_rows_groups: row {r} out of {n}")));
                }
            }
        }
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); groups.len() * d];
        for (k, g) in groups.iter().enumerate() {
            let inv = T::one() / T::from_f64_lit(g.len() as f64);
            for &r in g {
                for j in 0..d {
                    data[k * d + j] += xd[r * d + j];
                }
            }
            for v in &mut data[k * d..(k + 1) * d] {
                *v *= inv;
            }
        }
        let needs = self.needs(x);
        let groups = groups.to_vec();
        Ok(self.out(vec![groups.len(), d], data, needs, move || Op::MeanRowsGroups { x, groups }))
    }

    // -- backward -------------------------------------------------------------

    /// Reverse replay from a scalar loss. Consumes the tape; gradients of
    /// leaves survive in the returned `Grads`.
    pub fn backward(self, loss: Var) -> Result<Grads<T>> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on a no-grad tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        // helper: accumulate into a slot if that node wants gradient
        fn acc<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        }

        for i in (0..nodes.len()).rev() {
            if grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf) {
                continue; // keep leaf gradients
            }
            let g = grads[i].take().unwrap();
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b } => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(&nodes, &mut grads, *a, |da| {
                        kernels::matmul_a_bt_acc(&g, bv, da, m, n, k);
                    });
                    acc(&nodes, &mut grads, *b, |db| {
                        kernels::matmul_at_b_acc(av, &g, db, k, m, n);
                    });
                }
                Op::MatVec { w, v } => {
                    let (m, n) = (nodes[w.0].value.shape()[0], nodes[w.0].value.shape()[1]);
                    let (wv, vv) = (nodes[w.0].value.data(), nodes[v.0].value.data());
                    acc(&nodes, &mut grads, *w, |dw| {
                        for i in 0..m {
                            for j in 0..n {
                                dw[i * n + j] += g[i] * vv[j];
                            }
                        }
                    });
                    acc(&nodes, &mut grads, *v, |dv| {
                        for i in 0..m {
                            let row = &wv[i * n..(i + 1) * n];
                            for (dvj, &wij) in dv.iter_mut().zip(row) {
                                *dvj += g[i] * wij;
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let sx = nodes[x.0].value.shape();
                    let sw = nodes[w.0].value.shape();
                    let d = ConvDims {
                        batch: sx[0],
                        cin: sx[1],
                        h: sx[2],
                        w: sx[3],
                        cout: sw[0],
                        k: sw[2],
                        stride: *stride,
                        pad: *pad,
                        oh: kernels::conv_out_dim(sx[2], sw[2], *stride, *pad),
                        ow: kernels::conv_out_dim(sx[3], sw[2], *stride, *pad),
                    };
                    let (dx, dw) =
                        kernels::conv2d_backward(nodes[x.0].value.data(), nodes[w.0].value.data(), &g, &d);
                    acc(&nodes, &mut grads, *x, |gx| {
                        for (o, v) in gx.iter_mut().zip(&dx) {
                            *o += *v;
                        }
                    });
                    acc(&nodes, &mut grads, *w, |gw| {
                        for (o, v) in gw.iter_mut().zip(&dw) {
                            *o += *v;
                        }
                    });
                }
                Op::Sigmoid { x } => {
                    let y = node.value.data();
                    acc(&nodes, &mut grads, *x, |dx| {
                        for ((d, &gv), &yv) in dx.iter_mut().zip(&g).zip(y) {
                            *d += gv * yv * (T::one() - yv);
                        }
                    });
                }
                Op::Tanh { x } => {
                    let y = node.value.data();
                    acc(&nodes, &mut grads, *x, |dx| {
                        for ((d, &gv), &yv) in dx.iter_mut().zip(&g).zip(y) {
                            *d += gv * (T::one() - yv * yv);
                        }
                    });
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = nodes[x.0].value.data();
                    let slope = *slope;
                    acc(&nodes, &mut grads, *x, |dx| {
                        for ((d, &gv), &xvv) in dx.iter_mut().zip(&g).zip(xv) {
                            *d += if xvv > T::zero() { gv } else { gv * slope };
                        }
                    });
                }
                Op::Add { a, b } => {
                    acc(&nodes, &mut grads, *a, |da| {
                        for (d, &gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                    acc(&nodes, &mut grads, *b, |db| {
                        for (d, &gv) in db.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                }
                Op::Sub { a, b } => {
                    acc(&nodes, &mut grads, *a, |da| {
                        for (d, &gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                    acc(&nodes, &mut grads, *b, |db| {
                        for (d, &gv) in db.iter_mut().zip(&g) {
                            *d -= gv;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(&nodes, &mut grads, *a, |da| {
                        for ((d, &gv), &y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gv * y;
                        }
                    });
                    acc(&nodes, &mut grads, *b, |db| {
                        for ((d, &gv), &y) in db.iter_mut().zip(&g).zip(av) {
                            *d += gv * y;
                        }
                    });
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    acc(&nodes, &mut grads, *x, |dx| {
                        for (d, &gv) in dx.iter_mut().zip(&g) {
                            *d += gv * c;
                        }
                    });
                }
                Op::MulScalarVar { x, s } => {
                    let sv = nodes[s.0].value.data()[0];
                    let xv = nodes[x.0].value.data();
                    acc(&nodes, &mut grads, *x, |dx| {
                        for (d, &gv) in dx.iter_mut().zip(&g) {
                            *d += gv * sv;
                        }
                    });
                    acc(&nodes, &mut grads, *s, |ds| {
                        let mut acc_s = T::zero();
                        for (&gv, &xvv) in g.iter().zip(xv) {
                            acc_s += gv * xvv;
                        }
                        ds[0] += acc_s;
                    });
                }
                Op::Concat { a, b, axis } => {
                    let sa = nodes[a.0].value.shape();
                    let sb = nodes[b.0].value.shape();
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[*axis + 1..].iter().product();
                    let (na, nb) = (sa[*axis], sb[*axis]);
                    acc(&nodes, &mut grads, *a, |da| {
                        for o in 0..outer {
                            let src = &g[o * (na + nb) * inner..o * (na + nb) * inner + na * inner];
                            for (d, &gv) in da[o * na * inner..(o + 1) * na * inner].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    });
                    acc(&nodes, &mut grads, *b, |db| {
                        for o in 0..outer {
                            let base = o * (na + nb) * inner + na * inner;
                            let src = &g[base..base + nb * inner];
                            for (d, &gv) in db[o * nb * inner..(o + 1) * nb * inner].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                    let sx = nodes[x.0].value.shape();
                    let outer: usize = sx[..*axis].iter().product();
                    let n = sx[*axis];
                    let inner: usize = sx[*axis + 1..].iter().product();
                    let factor = if matches!(node.op, Op::MeanAxis { .. }) {
                        T::one() / T::from_f64_lit(n as f64)
                    } else {
                        T::one()
                    };
                    acc(&nodes, &mut grads, *x, |dx| {
                        for o in 0..outer {
                            let gsl = &g[o * inner..(o + 1) * inner];
                            for j in 0..n {
                                let dst = &mut dx[(o * n + j) * inner..(o * n + j + 1) * inner];
                                for (d, &gv) in dst.iter_mut().zip(gsl) {
                                    *d += gv * factor;
                                }
                            }
                        }
                    });
                }
                Op::SumAll { x } => {
                    let gv = g[0];
                    acc(&nodes, &mut grads, *x, |dx| {
                        for d in dx.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::MeanAll { x } => {
                    let n = nodes[x.0].value.len();
                    let gv = g[0] / T::from_f64_lit(n as f64);
                    acc(&nodes, &mut grads, *x, |dx| {
                        for d in dx.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::Reshape { x } => {
                    acc(&nodes, &mut grads, *x, |dx| {
                        for (d, &gv) in dx.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let c = nodes[logits.0].value.shape()[1];
                    let bsz = labels.len();
                    let inv_b = T::one() / T::from_f64_lit(bsz as f64);
                    let gv = g[0];
                    acc(&nodes, &mut grads, *logits, |dl| {
                        for b in 0..bsz {
                            for j in 0..c {
                                let onehot = if j == labels[b] { T::one() } else { T::zero() };
                                dl[b * c + j] += gv * (probs[b * c + j] - onehot) * inv_b;
                            }
                        }
                    });
                }
                Op::SoftmaxRows { x } => {
                    let y = node.value.data();
                    let s = node.value.shape();
                    let (r, c) = (s[0], s[1]);
                    acc(&nodes, &mut grads, *x, |dx| {
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let mut dotv = T::zero();
                            for (&gv, &yv) in gr.iter().zip(yr) {
                                dotv += gv * yv;
                            }
                            for ((d, &gv), &yv) in
                                dx[i * c..(i + 1) * c].iter_mut().zip(gr).zip(yr)
                            {
                                *d += yv * (gv - dotv);
                            }
                        }
                    });
                }
                Op::LnEps { x, eps } => {
                    let xv = nodes[x.0].value.data();
                    let eps = *eps;
                    acc(&nodes, &mut grads, *x, |dx| {
                        for ((d, &gv), &xvv) in dx.iter_mut().zip(&g).zip(xv) {
                            *d += gv / (xvv + eps);
                        }
                    });
                }
                Op::CosineVec { a, b } => {
                    let eps = T::from_f64_lit(Self::NORM_EPS);
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let (ra, rb) = (kernels::norm2(av), kernels::norm2(bv));
                    let (na, nb) = (ra + eps, rb + eps);
                    let c = kernels::dot(av, bv) / (na * nb);
                    let gv = g[0];
                    acc(&nodes, &mut grads, *a, |da| {
                        for (i, d) in da.iter_mut().enumerate() {
                            let mut t = bv[i] / (na * nb);
                            if ra > T::zero() {
                                t -= c * av[i] / (na * ra);
                            }
                            *d += gv * t;
                        }
                    });
                    acc(&nodes, &mut grads, *b, |db| {
                        for (i, d) in db.iter_mut().enumerate() {
                            let mut t = av[i] / (na * nb);
                            if rb > T::zero() {
                                t -= c * bv[i] / (nb * rb);
                            }
                            *d += gv * t;
                        }
                    });
                }
                Op::RowCosine { a, b } => {
                    let eps = T::from_f64_lit(Self::NORM_EPS);
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let d = nodes[a.0].value.shape()[1];
                    let bsz = nodes[a.0].value.shape()[0];
                    let kk = nodes[b.0].value.shape()[0];
                    let ra: Vec<T> = (0..bsz).map(|i| kernels::norm2(&av[i * d..(i + 1) * d])).collect();
                    let rb: Vec<T> = (0..kk).map(|j| kernels::norm2(&bv[j * d..(j + 1) * d])).collect();
                    let y = node.value.data();
                    acc(&nodes, &mut grads, *a, |da| {
                        for i in 0..bsz {
                            let na = ra[i] + eps;
                            for j in 0..kk {
                                let gv = g[i * kk + j];
                                if gv == T::zero() {
                                    continue;
                                }
                                let nb = rb[j] + eps;
                                let c = y[i * kk + j];
                                for t in 0..d {
                                    let mut term = bv[j * d + t] / (na * nb);
                                    if ra[i] > T::zero() {
                                        term -= c * av[i * d + t] / (na * ra[i]);
                                    }
                                    da[i * d + t] += gv * term;
                                }
                            }
                        }
                    });
                    acc(&nodes, &mut grads, *b, |db| {
                        for i in 0..bsz {
                            let na = ra[i] + eps;
                            for j in 0..kk {
                                let gv = g[i * kk + j];
                                if gv == T::zero() {
                                    continue;
                                }
                                let nb = rb[j] + eps;
                                let c = y[i * kk + j];
                                for t in 0..d {
                                    let mut term = av[i * d + t] / (na * nb);
                                    if rb[j] > T::zero() {
                                        term -= c * bv[j * d + t] / (nb * rb[j]);
                                    }
                                    db[j * d + t] += gv * term;
                                }
                            }
                        }
                    });
                }
                Op::StandardizeChannels { x, inv_std } => {
                    let s = node.value.shape();
                    let n = s[2] * s[3];
                    let inv_n = T::one() / T::from_f64_lit(n as f64);
                    let y = node.value.data();
                    acc(&nodes, &mut grads, *x, |dx| {
                        for bc in 0..s[0] * s[1] {
                            let gs = &g[bc * n..(bc + 1) * n];
                            let ys = &y[bc * n..(bc + 1) * n];
                            let mut gmean = T::zero();
                            let mut gydot = T::zero();
                            for (&gv, &yv) in gs.iter().zip(ys) {
                                gmean += gv;
                                gydot += gv * yv;
                            }
                            gmean *= inv_n;
                            gydot *= inv_n;
                            let is = inv_std[bc];
                            for ((d, &gv), &yv) in
                                dx[bc * n..(bc + 1) * n].iter_mut().zip(gs).zip(ys)
                            {
                                *d += is * (gv - gmean - yv * gydot);
                            }
                        }
                    });
                }
                Op::BatchNormTrain { x, gamma, beta, mean, inv_std } => {
                    let s = nodes[x.0].value.shape();
                    let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let n = bsz * hw;
                    let inv_n = T::one() / T::from_f64_lit(n as f64);
                    let xv = nodes[x.0].value.data();
                    let gam = nodes[gamma.0].value.data();
                    // per-channel sums of g and g*xhat
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let (mu, is) = (mean[ch], inv_std[ch]);
                            for t in 0..hw {
                                let gv = g[base + t];
                                sum_g[ch] += gv;
                                sum_gx[ch] += gv * (xv[base + t] - mu) * is;
                            }
                        }
                    }
                    acc(&nodes, &mut grads, *beta, |db| {
                        for (d, &v) in db.iter_mut().zip(&sum_g) {
                            *d += v;
                        }
                    });
                    acc(&nodes, &mut grads, *gamma, |dg| {
                        for (d, &v) in dg.iter_mut().zip(&sum_gx) {
                            *d += v;
                        }
                    });
                    acc(&nodes, &mut grads, *x, |dx| {
                        for b in 0..bsz {
                            for ch in 0..c {
                                let base = (b * c + ch) * hw;
                                let (mu, is, ga) = (mean[ch], inv_std[ch], gam[ch]);
                                let mg = sum_g[ch] * inv_n;
                                let mgx = sum_gx[ch] * inv_n;
                                for t in 0..hw {
                                    let xhat = (xv[base + t] - mu) * is;
                                    dx[base + t] += ga * is * (g[base + t] - mg - xhat * mgx);
                                }
                            }
                        }
                    });
                }
                Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                    let s = nodes[x.0].value.shape();
                    let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let xv = nodes[x.0].value.data();
                    let gam = nodes[gamma.0].value.data();
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for t in 0..hw {
                                let gv = g[base + t];
                                sum_g[ch] += gv;
                                sum_gx[ch] += gv * (xv[base + t] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                    acc(&nodes, &mut grads, *beta, |db| {
                        for (d, &v) in db.iter_mut().zip(&sum_g) {
                            *d += v;
                        }
                    });
                    acc(&nodes, &mut grads, *gamma, |dg| {
                        for (d, &v) in dg.iter_mut().zip(&sum_gx) {
                            *d += v;
                        }
                    });
                    acc(&nodes, &mut grads, *x, |dx| {
                        for b in 0..bsz {
                            for ch in 0..c {
                                let base = (b * c + ch) * hw;
                                let f = gam[ch] * inv_std[ch];
                                for t in 0..hw {
                                    dx[base + t] += g[base + t] * f;
                                }
                            }
                        }
                    });
                }
                Op::AvgPool2x2 { x } => {
                    let sx = nodes[x.0].value.shape();
                    let (h, w) = (sx[2], sx[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::from_f64_lit(0.25);
                    acc(&nodes, &mut grads, *x, |dx| {
                        for bc in 0..sx[0] * sx[1] {
                            let gs = &g[bc * oh * ow..(bc + 1) * oh * ow];
                            let dxs = &mut dx[bc * h * w..(bc + 1) * h * w];
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = gs[oy * ow + ox] * quarter;
                                    let (iy, ix) = (oy * 2, ox * 2);
                                    dxs[iy * w + ix] += gv;
                                    dxs[iy * w + ix + 1] += gv;
                                    dxs[(iy + 1) * w + ix] += gv;
                                    dxs[(iy + 1) * w + ix + 1] += gv;
                                }
                            }
                        }
                    });
                }
                Op::GlobalAvgPool { x } => {
                    let sx = nodes[x.0].value.shape();
                    let hw = sx[2] * sx[3];
                    let inv = T::one() / T::from_f64_lit(hw as f64);
                    acc(&nodes, &mut grads, *x, |dx| {
                        for bc in 0..sx[0] * sx[1] {
                            let gv = g[bc] * inv;
                            for d in &mut dx[bc * hw..(bc + 1) * hw] {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::AddBiasRows { m, bias } => {
                    let s = node.value.shape();
                    let (r, c) = (s[0], s[1]);
                    acc(&nodes, &mut grads, *m, |dm| {
                        for (d, &gv) in dm.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                    acc(&nodes, &mut grads, *bias, |db| {
                        for i in 0..r {
                            let mut s = T::zero();
                            for j in 0..c {
                                s += g[i * c + j];
                            }
                            db[i] += s;
                        }
                    });
                }
                Op::AddBiasCols { m, bias } => {
                    let s = node.value.shape();
                    let (r, c) = (s[0], s[1]);
                    acc(&nodes, &mut grads, *m, |dm| {
                        for (d, &gv) in dm.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                    acc(&nodes, &mut grads, *bias, |db| {
                        for j in 0..c {
                            let mut s = T::zero();
                            for i in 0..r {
                                s += g[i * c + j];
                            }
                            db[j] += s;
                        }
                    });
                }
                Op::PadCols { x, positions, width } => {
                    let k = positions.len();
                    let bsz = nodes[x.0].value.shape()[0];
                    acc(&nodes, &mut grads, *x, |dx| {
                        for b in 0..bsz {
                            for (j, &p) in positions.iter().enumerate() {
                                dx[b * k + j] += g[b * width + p];
                            }
                        }
                    });
                }
                Op::MeanRowsGroups { x, groups } => {
                    let d = nodes[x.0].value.shape()[1];
                    acc(&nodes, &mut grads, *x, |dx| {
                        for (k, grp) in groups.iter().enumerate() {
                            let inv = T::one() / T::from_f64_lit(grp.len() as f64);
                            for &r in grp {
                                for j in 0..d {
                                    dx[r * d + j] += g[k * d + j] * inv;
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(Grads { slots: grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(i2, v).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let y2 = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y2).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        assert!(matches!(tape.matmul(a, b), Err(crate::error::Error::Dim(_))));
    }

    #[test]
    fn pointwise_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], &[0.0, -1.0, 2.0]));
        let s = tape.sigmoid(x);
        assert!((tape.value(s).data()[0] - 0.5).abs() < 1e-12);
        let th = tape.tanh(x);
        assert_eq!(tape.value(th).data()[0], 0.0);
        let lr = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.value(lr).data(), &[0.0, -0.01, 2.0]);
    }

    #[test]
    fn softmax_ce_values() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(&t(&[1, 2], &[0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        // saturated case stays finite and ~0
        let l2 = tape.leaf(&t(&[1, 2], &[1000.0, 0.0]));
        let loss2 = tape.softmax_cross_entropy(l2, &[0]).unwrap();
        assert!(tape.value(loss2).data()[0].abs() < 1e-9);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(&t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[2]),
            Err(crate::error::Error::Index(_))
        ));
    }

    #[test]
    fn softmax_ce_translation_invariant() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(&t(&[2, 3], &[0.3, -1.2, 2.0, 0.1, 0.1, -0.5]));
        let loss = tape.softmax_cross_entropy(l, &[2, 0]).unwrap();
        let shifted: Vec<f64> =
            [0.3, -1.2, 2.0, 0.1, 0.1, -0.5].iter().map(|v| v + 123.456).collect();
        let l2 = tape.leaf(&t(&[2, 3], &shifted));
        let loss2 = tape.softmax_cross_entropy(l2, &[2, 0]).unwrap();
        assert!((tape.value(loss).data()[0] - tape.value(loss2).data()[0]).abs() < 1e-9);
    }

    #[test]
    fn cosine_cases() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.cosine_similarity(a, a).unwrap();
        assert!((tape.value(c).data()[0] - 1.0).abs() < 1e-7);
        let x = tape.leaf(&t(&[2], &[1.0, 0.0]));
        let y = tape.leaf(&t(&[2], &[0.0, 1.0]));
        let c2 = tape.cosine_similarity(x, y).unwrap();
        assert_eq!(tape.value(c2).data()[0], 0.0);
        let p = tape.leaf(&t(&[2], &[1.0, 1.0]));
        let q = tape.leaf(&t(&[2], &[-1.0, -1.0]));
        let c3 = tape.cosine_similarity(p, q).unwrap();
        assert!((tape.value(c3).data()[0] + 1.0).abs() < 1e-7);
        // zero-norm input stays finite
        let z = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let c4 = tape.cosine_similarity(z, x).unwrap();
        assert_eq!(tape.value(c4).data()[0], 0.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let w = tape.leaf(&t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_impulse_reproduces_flipped_kernel() {
        let mut tape = Tape::<f64>::new();
        let mut img = vec![0.0; 25];
        img[2 * 5 + 2] = 1.0; // impulse at center of 5x5
        let x = tape.leaf(&t(&[1, 1, 5, 5], &img));
        let wdata: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let w = tape.leaf(&t(&[1, 1, 3, 3], &wdata));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let yd = tape.value(y).data();
        // out[cy - ky + pad, cx - kx + pad] = w[ky, kx]
        for ky in 0..3 {
            for kx in 0..3 {
                let oy = 2 + 1 - ky;
                let ox = 2 + 1 - kx;
                assert_eq!(yd[oy * 5 + ox], wdata[ky * 3 + kx]);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1, 2, 3, 3], &[0.0; 18]));
        let w = tape.leaf(&t(&[1, 3, 1, 1], &[0.0; 3]));
        assert!(matches!(tape.conv2d(x, w, 1, 0), Err(crate::error::Error::Dim(_))));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let y = tape.sigmoid(x);
        let _ = tape.mean_all(y);
        assert_eq!(tape.recorded_ops(), 0);
    }

    #[test]
    fn concat_and_reductions() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[3], &[3.0, 4.0, 5.0]));
        let c = tape.concat(a, b, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let m = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let col_mean = tape.mean_axis(m, 0).unwrap();
        assert_eq!(tape.value(col_mean).data(), &[2.5, 3.5, 4.5]);
        let row_sum = tape.sum_axis(m, 1).unwrap();
        assert_eq!(tape.value(row_sum).data(), &[6.0, 15.0]);
    }

    #[test]
    fn pad_cols_scatter() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(&t(&[1, 2], &[0.3, 0.7]));
        let y = tape.pad_cols(p, &[2, 0], 4).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, 0.0, 0.3, 0.0]);
    }
}
