//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. [`Tape::backward`] walks the nodes in
//! reverse recording order and accumulates gradients into the leaves that
//! were created with `requires_grad`.

use crate::error::{contract_err, shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{check_same_shape, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Per-channel statistics of the current batch.
    Batch,
    /// Fixed running statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed by a batch-norm call: per-channel mean and
/// unbiased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Log(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Norm(Var),
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, batch: usize, cout: usize },
    Depthwise { x: Var, k: Var },
    Softmax { x: Var, axis: usize },
    Resize { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, index: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, invstd: Vec<f64>, batch_stats: bool },
    Gap(Var),
    BiasAdd { x: Var, b: Var },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Records a leaf; it participates in differentiation iff the tensor's
    /// `requires_grad` flag is set. Any gradient the tensor carries is
    /// dropped, so backward starts from zero.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        t.zero_grad();
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(T::of(x)))
    }

    /// Same value, cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.node(v).value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.node(x).requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        check_same_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let st = T::of(s);
        self.unary(x, Op::Scale(x, s), |v| v * st)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let st = T::of(s);
        self.unary(x, Op::AddScalar(x), |v| v + st)
    }

    /// `s - x`.
    pub fn rsub_scalar(&mut self, x: Var, s: f64) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let st = T::of(slope);
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * st })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::of(sigmoid(v.f64())))
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the floor binds.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::Log(x, floor), |v| T::of(v.f64().max(floor).ln()))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| T::of(v.f64().clamp(lo, hi)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = kernels::sum(self.value(x).data());
        let rg = self.node(x).requires_grad;
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = kernels::sum(v.data()) / v.numel().max(1) as f64;
        let rg = self.node(x).requires_grad;
        self.push(Tensor::scalar(T::of(s)), Op::Mean(x), rg)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("sum_axis: axis {axis} out of range for {:?}", shape));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| data[o * len * inner + j * inner + i].f64()).sum();
                out.push(T::of(s));
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let rg = self.node(x).requires_grad;
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| shape_err!("mean_axis: axis {axis} out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = kernels::dot(self.value(x).data(), self.value(x).data()).sqrt();
        let rg = self.node(x).requires_grad;
        self.push(Tensor::scalar(T::of(n)), Op::Norm(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: cannot multiply {:?} by {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let bt = kernels::transpose(self.value(b).data(), k, n);
        let out = kernels::gemm_nt(self.value(a).data(), &bt, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// Cross-correlation of `x: B x Cin x H x W` with `w: Cout x Cin x k x k`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(shape_err!("conv2d: input {:?} incompatible with kernel {:?}", sx, sw));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d: stride must be positive"));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        let span_h = (h + 2 * pad).checked_sub(k);
        let span_w = (wd + 2 * pad).checked_sub(k);
        let (ho, wo) = match (span_h, span_w) {
            (Some(a), Some(b)) if a % stride == 0 && b % stride == 0 => (a / stride + 1, b / stride + 1),
            _ => {
                return Err(shape_err!(
                    "conv2d: input {:?} with kernel {k}, stride {stride}, pad {pad} gives a non-integral output size",
                    sx
                ))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv2d: bias {:?} does not match {cout} output channels", self.shape(b)));
            }
        }
        let geom = ConvGeom { cin, h, w: wd, k, stride, pad, ho, wo };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            batch,
            cout,
            &geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        let value = Tensor::new(&[batch, cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, bias, geom, batch, cout }, rg))
    }

    /// Per-channel scalar correlation: `out[b, c] = k[c] * x[b, c]`.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k);
        if sx.len() != 4 || sk.len() != 3 || sk[0] != sx[1] || sk[1] != 1 || sk[2] != 1 {
            return Err(shape_err!("depthwise_conv2d: input {:?} incompatible with kernel {:?}", sx, sk));
        }
        let plane = sx[2] * sx[3];
        let kd = self.value(k).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * kd[(i / plane) % sx[1]])
            .collect();
        let rg = self.any_grad(&[x, k]);
        Ok(self.push(Tensor::new(&sx, data)?, Op::Depthwise { x, k }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax: axis {axis} out of range for {:?}", shape));
        }
        let out = kernels::softmax_forward(self.value(x).data(), &shape, axis);
        let rg = self.node(x).requires_grad;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Align-corners-false bilinear resampling of the last two axes.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize: cannot resize {:?} to {out_h}x{out_w}", shape));
        }
        let (h, w) = (shape[2], shape[3]);
        let planes = shape[0] * shape[1];
        let out = kernels::resize_forward(self.value(x).data(), planes, h, w, out_h, out_w);
        let rg = self.node(x).requires_grad;
        let value = Tensor::new(&[shape[0], shape[1], out_h, out_w], out)?;
        Ok(self.push(value, Op::Resize { x }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err!("concat: no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat: axis {axis} out of range for {:?}", first));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat: shapes {:?} and {:?} differ off axis {axis}", first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!("slice: {start}..{} on axis {axis} out of range for {:?}", start + len, shape));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.node(x).requires_grad;
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        if self.shape(x).get(axis) != Some(&start) {
            return Err(shape_err!("split: sizes {:?} do not cover axis {axis} of {:?}", sizes, self.shape(x)));
        }
        Ok(out)
    }

    /// Gathers rows along axis 0, e.g. a batch permutation.
    pub fn index_select(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n0 = *shape.first().ok_or_else(|| shape_err!("index_select on a scalar"))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n0) {
            return Err(shape_err!("index_select: index {bad} out of range for {:?}", shape));
        }
        let inner: usize = shape[1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            out.extend_from_slice(&d[i * inner..(i + 1) * inner]);
        }
        let mut new_shape = shape;
        new_shape[0] = index.len();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::IndexSelect { x, index: index.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.node(x).requires_grad;
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("permute: {:?} is not a permutation of the axes of {:?}", axes, shape));
        }
        let out = permute_data(self.value(x).data(), &shape, axes);
        let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Per-channel normalization over all axes but axis 1, followed by the
    /// affine map `gamma * xhat + beta`. With [`NormStats::Batch`] the
    /// observed statistics are returned for running-average bookkeeping.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<ObservedStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("batch_norm: input {:?} has no channel axis", shape));
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "batch_norm: affine parameters {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (outer, _, inner) = kernels::axis_split(&shape, 1);
        let count = outer * inner;
        let xd = self.value(x).data();
        let at = |o: usize, ch: usize, i: usize| o * c * inner + ch * inner + i;
        let (mean, var_biased, observed) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for o in 0..outer {
                        s += kernels::sum(&xd[at(o, ch, 0)..at(o, ch, 0) + inner]);
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for o in 0..outer {
                        for i in 0..inner {
                            let d = xd[at(o, ch, i)].f64() - m;
                            v += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / count as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1 { v * count as f64 / (count - 1) as f64 } else { *v })
                    .collect();
                let obs = ObservedStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(obs))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err!("batch_norm: running statistics do not match {c} channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let batch_stats = observed.is_some();
        let invstd: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                let (g, b) = (gd[ch].f64(), bd[ch].f64());
                for i in 0..inner {
                    let idx = at(o, ch, i);
                    let xh = (xd[idx].f64() - mean[ch]) * invstd[ch];
                    xhat[idx] = xh;
                    out[idx] = T::of(g * xh + b);
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let value = Tensor::new(&shape, out)?;
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats }, rg);
        Ok((v, observed))
    }

    /// Global average pooling `B x C x H x W -> B x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err!("global_avg_pool: expected a 4-d input, got {:?}", shape));
        }
        let plane = shape[2] * shape[3];
        let out = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| T::of(kernels::sum(p) / plane as f64))
            .collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Tensor::new(&shape[..2], out)?, Op::Gap(x), rg))
    }

    /// Adds `b[c]` to every entry of channel `c` (axis 1).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(b) != [shape[1]] {
            return Err(shape_err!("bias_add: bias {:?} does not match input {:?}", self.shape(b), shape));
        }
        let (_, c, inner) = kernels::axis_split(&shape, 1);
        let bd = self.value(b).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % c])
            .collect();
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::BiasAdd { x, b }, rg))
    }

    /// Runs reverse accumulation from a scalar `loss`. Leaf gradients add to
    /// whatever earlier calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = self.nodes[id].op {
                leaf_grads.push((id, g));
                continue;
            }
            for (parent, contrib) in self.op_backward(id, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (id, g) in leaf_grads {
            self.nodes[id].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn op_backward(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let val = |v: Var| self.value(v).data();
        let want = |v: Var| self.node(v).requires_grad;
        let zip = |a: &[T], f: &dyn Fn(usize, T) -> T| -> Vec<T> { a.iter().enumerate().map(|(i, &x)| f(i, x)).collect() };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut out = Vec::new();
                if want(*a) {
                    out.push((*a, zip(g, &|i, gv| gv * vb[i])));
                }
                if want(*b) {
                    out.push((*b, zip(g, &|i, gv| gv * va[i])));
                }
                out
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut out = Vec::new();
                if want(*a) {
                    out.push((*a, zip(g, &|i, gv| gv / vb[i])));
                }
                if want(*b) {
                    out.push((*b, zip(g, &|i, gv| -gv * va[i] / (vb[i] * vb[i]))));
                }
                out
            }
            Op::Scale(x, s) => {
                let st = T::of(*s);
                vec![(*x, g.iter().map(|&v| v * st).collect())]
            }
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Relu(x) => {
                let vx = val(*x);
                vec![(*x, zip(g, &|i, gv| if vx[i] > T::zero() { gv } else { T::zero() }))]
            }
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                let st = T::of(*slope);
                vec![(*x, zip(g, &|i, gv| if vx[i] > T::zero() { gv } else { gv * st }))]
            }
            Op::Sigmoid(x) => vec![(*x, zip(g, &|i, gv| gv * y[i] * (T::one() - y[i])))],
            Op::Log(x, floor) => {
                let vx = val(*x);
                vec![(*x, zip(g, &|i, gv| if vx[i].f64() > *floor { gv / vx[i] } else { T::zero() }))]
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                vec![(*x, zip(g, &|i, gv| {
                    let v = vx[i].f64();
                    if v >= *lo && v <= *hi { gv } else { T::zero() }
                }))]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![T::of(g[0].f64() / n as f64); n])]
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = kernels::axis_split(shape, *axis);
                let mut out = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            out[o * len * inner + j * inner + i] = g[o * inner + i];
                        }
                    }
                }
                vec![(*x, out)]
            }
            Op::Norm(x) => {
                let n = y[0].f64();
                let vx = val(*x);
                let scale = if n > 0.0 { g[0].f64() / n } else { 0.0 };
                vec![(*x, vx.iter().map(|&v| T::of(v.f64() * scale)).collect())]
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::new();
                if want(*a) {
                    out.push((*a, kernels::gemm_nt(g, val(*b), m, n, k)));
                }
                if want(*b) {
                    let at = kernels::transpose(val(*a), m, k);
                    let gt = kernels::transpose(g, m, n);
                    out.push((*b, kernels::gemm_nt(&at, &gt, k, m, n)));
                }
                out
            }
            Op::Conv2d { x, w, bias, geom, batch, cout } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    *batch,
                    *cout,
                    geom,
                    want(*x),
                    want(*w),
                    bias.is_some_and(want),
                );
                let mut out = Vec::new();
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (bias, db) {
                    out.push((*b, d));
                }
                out
            }
            Op::Depthwise { x, k } => {
                let shape = self.shape(*x);
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                let (vx, vk) = (val(*x), val(*k));
                let mut out = Vec::new();
                if want(*x) {
                    out.push((*x, zip(g, &|i, gv| gv * vk[(i / plane) % c])));
                }
                if want(*k) {
                    let mut acc = vec![0.0f64; c];
                    for (i, (gv, xv)) in g.iter().zip(vx).enumerate() {
                        acc[(i / plane) % c] += gv.f64() * xv.f64();
                    }
                    out.push((*k, acc.into_iter().map(T::of).collect()));
                }
                out
            }
            Op::Softmax { x, axis } => {
                vec![(*x, kernels::softmax_backward(y, g, self.shape(*x), *axis))]
            }
            Op::Resize { x } => {
                let s = self.shape(*x);
                let so = node.value.shape();
                let d = kernels::resize_backward(g, s[0] * s[1], s[2], s[3], so[2], so[3]);
                vec![(*x, d)]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if want(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push((p, d));
                    }
                    offset += len;
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = kernels::axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, d)]
            }
            Op::IndexSelect { x, index } => {
                let shape = self.shape(*x);
                let inner: usize = shape[1..].iter().product();
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (row, &i) in index.iter().enumerate() {
                    for (dst, &src) in d[i * inner..(i + 1) * inner].iter_mut().zip(&g[row * inner..(row + 1) * inner]) {
                        *dst += src;
                    }
                }
                vec![(*x, d)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![(*x, permute_data(g, node.value.shape(), &inverse))]
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats } => {
                let shape = self.shape(*x);
                let (outer, c, inner) = kernels::axis_split(shape, 1);
                let count = (outer * inner) as f64;
                let at = |o: usize, ch: usize, i: usize| o * c * inner + ch * inner + i;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        for i in 0..inner {
                            let idx = at(o, ch, i);
                            sum_g[ch] += g[idx].f64();
                            sum_gx[ch] += g[idx].f64() * xhat[idx];
                        }
                    }
                }
                let gd = val(*gamma);
                let mut out = Vec::new();
                if want(*x) {
                    let mut d = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let k = gd[ch].f64() * invstd[ch];
                            for i in 0..inner {
                                let idx = at(o, ch, i);
                                let gv = g[idx].f64();
                                d[idx] = T::of(if *batch_stats {
                                    k * (gv - sum_g[ch] / count - xhat[idx] * sum_gx[ch] / count)
                                } else {
                                    k * gv
                                });
                            }
                        }
                    }
                    out.push((*x, d));
                }
                if want(*gamma) {
                    out.push((*gamma, sum_gx.iter().map(|&v| T::of(v)).collect()));
                }
                if want(*beta) {
                    out.push((*beta, sum_g.iter().map(|&v| T::of(v)).collect()));
                }
                out
            }
            Op::Gap(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let d = (0..self.value(*x).numel()).map(|i| T::of(g[i / plane].f64() * inv)).collect();
                vec![(*x, d)]
            }
            Op::BiasAdd { x, b } => {
                let (_, c, inner) = kernels::axis_split(self.shape(*x), 1);
                let mut out = Vec::new();
                if want(*b) {
                    let mut acc = vec![0.0f64; c];
                    for (i, gv) in g.iter().enumerate() {
                        acc[(i / inner) % c] += gv.f64();
                    }
                    out.push((*b, acc.into_iter().map(T::of).collect()));
                }
                out.push((*x, g.to_vec()));
                out
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
