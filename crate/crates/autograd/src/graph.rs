//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is pushed, and [`Graph::backward`] walks the tape in reverse. Nodes
//! that do not depend on any gradient-requiring leaf are skipped entirely.

use std::collections::HashMap;

use crate::conv::{self, ConvGeom, PadMode};
use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, dim: usize },
    Narrow { input: Var, dim: usize, start: usize },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom, cols: Option<Vec<T>> },
    Upsample2x(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    InstanceNorm { input: Var, inv_std: Vec<T> },
    ChannelAffine { input: Var, gamma: Var, beta: Var },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Gram(Var),
    BceWithLogits { input: Var, target: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Which named parameters receive gradients.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    /// Every parameter.
    #[default]
    All,
    /// Parameters whose name starts with one of the prefixes.
    Prefixes(Vec<String>),
    /// No parameter (inference or frozen evaluation).
    Nothing,
}

impl Trainable {
    pub fn prefixes<S: AsRef<str>>(p: &[S]) -> Self {
        Trainable::Prefixes(p.iter().map(|s| s.as_ref().to_string()).collect())
    }

    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    trainable: Trainable,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_trainable(Trainable::All)
    }

    pub fn with_trainable(trainable: Trainable) -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), trainable, record: true }
    }

    /// A graph that never tracks gradients and keeps no backward caches.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), trainable: Trainable::Nothing, record: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that may receive gradients (e.g. an image being probed).
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Inserts a named parameter once per graph; repeated lookups share the leaf.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let rg = self.trainable.allows(name);
        let v = self.push(t.clone(), Op::Leaf, rg);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Shift(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        let rg = self.rg(&[a]);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    // ---- reductions and layout -------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Concatenates along `dim`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], dim: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or(TensorError::Empty)?).to_vec();
        if dim >= first.len() {
            return Err(TensorError::Invalid(format!("concat dim {dim} for rank {}", first.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == dim || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch { left: first.clone(), right: s.to_vec() });
            }
            total += s[dim];
        }
        let outer: usize = first[..dim].iter().product();
        let inner: usize = first[dim + 1..].iter().product();
        let mut shape = first.clone();
        shape[dim] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[dim] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(inputs);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), dim }, rg))
    }

    /// Slice `start..start + len` along `dim`.
    pub fn narrow(&mut self, a: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if dim >= shape.len() || start + len > shape[dim] {
            return Err(TensorError::OutOfRange { index: start + len, len: *shape.get(dim).unwrap_or(&0) });
        }
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[dim] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[dim] = len;
        let rg = self.rg(&[a]);
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(out, Op::Narrow { input: a, dim, start }, rg))
    }

    // ---- spatial ---------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(input).dims4()?,
            self.value(weight).dims4()?,
            stride,
            pad,
            pad_mode,
        )?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(TensorError::ShapeMismatch {
                    left: vec![geom.c_out],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let (out, cols) = conv::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_vec(&[geom.batch, geom.c_out, geom.h_out, geom.w_out], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        // Patch matrices are only needed for the weight gradient.
        let cols = if rg && self.requires_grad(weight) { cols } else { None };
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom, cols }, rg))
    }

    /// Nearest-neighbour 2x up-sampling of a `B x C x H x W` map.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = plane[(y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(&[a]);
        let t = Tensor::from_vec(&[b, c, 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2x(a), rg))
    }

    /// 2x2 average pooling with stride 2; H and W must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid(format!("avg_pool2 needs even dims, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(a).data();
        let quarter = T::from_f64_lossy(0.25);
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for x in 0..wo {
                    let s = plane[2 * y * w + 2 * x]
                        + plane[2 * y * w + 2 * x + 1]
                        + plane[(2 * y + 1) * w + 2 * x]
                        + plane[(2 * y + 1) * w + 2 * x + 1];
                    out[p * ho * wo + y * wo + x] = s * quarter;
                }
            }
        }
        let rg = self.rg(&[a]);
        let t = Tensor::from_vec(&[b, c, ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool2(a), rg))
    }

    /// Mean over spatial positions: `B x C x H x W -> B x C`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        let n = T::from_usize(h * w).unwrap();
        let src = self.value(a).data();
        let out: Vec<T> = (0..b * c)
            .map(|p| src[p * h * w..(p + 1) * h * w].iter().copied().sum::<T>() / n)
            .collect();
        let rg = self.rg(&[a]);
        let t = Tensor::from_vec(&[b, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(a), rg))
    }

    /// Per sample and channel: `(x - mean) / sqrt(var + eps)` over spatial positions.
    pub fn instance_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 3 {
            return Err(TensorError::Rank { expected: 4, shape });
        }
        let planes = shape[0] * shape[1];
        let n: usize = shape[2..].iter().product();
        let nf = T::from_usize(n).unwrap();
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(planes);
        for p in 0..planes {
            let x = &src[p * n..(p + 1) * n];
            let mean = x.iter().copied().sum::<T>() / nf;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in out[p * n..(p + 1) * n].iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        let t = Tensor::from_vec(&shape, out)?;
        let inv_std = if rg { inv_std } else { Vec::new() };
        Ok(self.push(t, Op::InstanceNorm { input: a, inv_std }, rg))
    }

    /// `x * gamma + beta` with per-sample, per-channel `gamma`/`beta` of shape `B x C`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Rank { expected: 4, shape });
        }
        let bc = [shape[0], shape[1]];
        for v in [gamma, beta] {
            if self.shape(v) != bc {
                return Err(TensorError::ShapeMismatch { left: bc.to_vec(), right: self.shape(v).to_vec() });
            }
        }
        let n: usize = shape[2..].iter().product();
        let (xs, gs, bs) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xs.len()];
        for p in 0..bc[0] * bc[1] {
            for (o, &v) in out[p * n..(p + 1) * n].iter_mut().zip(&xs[p * n..(p + 1) * n]) {
                *o = v * gs[p] + bs[p];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::ChannelAffine { input: x, gamma, beta }, rg))
    }

    /// `x W^T + b` for `x: B x in`, `W: out x in`, `b: out`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (b, fin) = self.value(input).dims2()?;
        let (fout, win) = self.value(weight).dims2()?;
        if fin != win {
            return Err(TensorError::ShapeMismatch { left: vec![b, fin], right: vec![fout, win] });
        }
        let mut out = vec![T::zero(); b * fout];
        gemm(
            T::one(),
            self.value(input).data(),
            MatView::row_major(b, fin),
            self.value(weight).data(),
            MatView::row_major(fout, fin).t(),
            T::zero(),
            &mut out,
            MatView::row_major(b, fout),
        );
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            if bd.len() != fout {
                return Err(TensorError::ShapeMismatch { left: vec![fout], right: self.shape(bv).to_vec() });
            }
            for row in out.chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let t = Tensor::from_vec(&[b, fout], out)?;
        Ok(self.push(t, Op::Linear { input, weight, bias }, rg))
    }

    /// Gram matrices `F F^T / (C H W)` per sample: `B x C x H x W -> B x C x C`.
    pub fn gram(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        let n = h * w;
        let norm = T::one() / T::from_usize(c * n).unwrap();
        let src = self.value(a).data();
        let mut out = vec![T::zero(); b * c * c];
        for s in 0..b {
            gemm(
                norm,
                src,
                MatView::block(c, n, n, s * c * n),
                src,
                MatView::block(c, n, n, s * c * n).t(),
                T::zero(),
                &mut out,
                MatView::block(c, c, c, s * c * c),
            );
        }
        let rg = self.rg(&[a]);
        let t = Tensor::from_vec(&[b, c, c], out)?;
        Ok(self.push(t, Op::Gram(a), rg))
    }

    /// Mean binary cross-entropy of logits against a constant target.
    pub fn bce_with_logits(&mut self, a: Var, target: T) -> Var {
        let t = self.value(a);
        let total: T = t.data().iter().map(|&x| bce_term(x, target)).sum();
        let v = Tensor::scalar(total / T::from_usize(t.numel().max(1)).unwrap());
        let rg = self.rg(&[a]);
        self.push(v, Op::BceWithLogits { input: a, target }, rg)
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every gradient-requiring node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, &v)| (name.clone(), v))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.shape(v))
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.map(|g| -g))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = dy.zip_map(self.value(*b), |g, x| g * x)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = dy.zip_map(self.value(*a), |g, x| g * x)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, dy.map(|g| g * s))?;
            }
            Op::Shift(a) => self.accumulate(grads, *a, dy.clone())?,
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let g = dy.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { g * slope })?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Sigmoid(a) => {
                let g = dy.zip_map(y, |g, s| g * s * (T::one() - s))?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Tanh(a) => {
                let g = dy.zip_map(y, |g, t| g * (T::one() - t * t))?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Abs(a) => {
                let g = dy.zip_map(self.value(*a), |g, x| g * sign(x))?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Square(a) => {
                let two = T::one() + T::one();
                let g = dy.zip_map(self.value(*a), |g, x| g * two * x)?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let g = dy.zip_map(self.value(*a), |g, x| if x >= lo && x <= hi { g } else { T::zero() })?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Sum(a) => {
                let g = dy.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g))?;
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).numel().max(1)).unwrap();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), dy.item() / n))?;
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, dy.reshape(self.shape(*a))?)?;
            }
            Op::Concat { inputs, dim } => {
                let shape = y.shape();
                let outer: usize = shape[..*dim].iter().product();
                let inner: usize = shape[dim + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*dim];
                    if self.requires_grad(v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * shape[*dim] + offset) * inner;
                            data.extend_from_slice(&dy.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, Tensor::from_vec(self.shape(v), data)?)?;
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, dim, start } => {
                let shape = self.shape(*input).to_vec();
                let outer: usize = shape[..*dim].iter().product();
                let inner: usize = shape[dim + 1..].iter().product();
                let len = y.shape()[*dim];
                let mut g = Tensor::zeros(&shape);
                for o in 0..outer {
                    let base = (o * shape[*dim] + start) * inner;
                    g.data_mut()[base..base + len * inner]
                        .copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, g)?;
            }
            Op::Conv2d { input, weight, bias, geom, cols } => {
                if self.requires_grad(*weight) {
                    let mut dw = self.zeros_like(*weight);
                    let src: &[T] = cols.as_deref().unwrap_or(self.value(*input).data());
                    conv::conv2d_weight_grad(geom, src, dy.data(), dw.data_mut());
                    self.accumulate(grads, *weight, dw)?;
                }
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let mut db = self.zeros_like(*b);
                        conv::conv2d_bias_grad(geom, dy.data(), db.data_mut());
                        self.accumulate(grads, *b, db)?;
                    }
                }
                if self.requires_grad(*input) {
                    let mut dx = self.zeros_like(*input);
                    conv::conv2d_input_grad(geom, self.value(*weight).data(), dy.data(), dx.data_mut());
                    self.accumulate(grads, *input, dx)?;
                }
            }
            Op::Upsample2x(a) => {
                let (b, c, h, w) = self.value(*a).dims4()?;
                let mut g = Tensor::zeros(&[b, c, h, w]);
                let gd = g.data_mut();
                for p in 0..b * c {
                    let src = &dy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            gd[p * h * w + (yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::AvgPool2(a) => {
                let (b, c, h, w) = self.value(*a).dims4()?;
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64_lossy(0.25);
                let mut g = Tensor::zeros(&[b, c, h, w]);
                let gd = g.data_mut();
                for p in 0..b * c {
                    for yy in 0..h {
                        for xx in 0..w {
                            gd[p * h * w + yy * w + xx] = dy.data()[p * ho * wo + (yy / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::GlobalAvgPool(a) => {
                let (b, c, h, w) = self.value(*a).dims4()?;
                let n = T::from_usize(h * w).unwrap();
                let mut g = Tensor::zeros(&[b, c, h, w]);
                for (p, chunk) in g.data_mut().chunks_mut(h * w).enumerate() {
                    let v = dy.data()[p] / n;
                    chunk.iter_mut().for_each(|x| *x = v);
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::InstanceNorm { input, inv_std } => {
                let n = y.numel() / inv_std.len();
                let nf = T::from_usize(n).unwrap();
                let mut g = Tensor::zeros(self.shape(*input));
                for (p, &is) in inv_std.iter().enumerate() {
                    let yp = &y.data()[p * n..(p + 1) * n];
                    let dp = &dy.data()[p * n..(p + 1) * n];
                    let mean_dy = dp.iter().copied().sum::<T>() / nf;
                    let mean_dyy = dp.iter().zip(yp).map(|(&d, &v)| d * v).sum::<T>() / nf;
                    for ((o, &d), &v) in g.data_mut()[p * n..(p + 1) * n].iter_mut().zip(dp).zip(yp) {
                        *o = is * (d - mean_dy - v * mean_dyy);
                    }
                }
                self.accumulate(grads, *input, g)?;
            }
            Op::ChannelAffine { input, gamma, beta } => {
                let planes = self.value(*gamma).numel();
                let n = y.numel() / planes;
                let xs = self.value(*input).data();
                let gs = self.value(*gamma).data();
                if self.requires_grad(*input) {
                    let mut g = Tensor::zeros(self.shape(*input));
                    for p in 0..planes {
                        for (o, &d) in g.data_mut()[p * n..(p + 1) * n].iter_mut().zip(&dy.data()[p * n..(p + 1) * n]) {
                            *o = d * gs[p];
                        }
                    }
                    self.accumulate(grads, *input, g)?;
                }
                if self.requires_grad(*gamma) {
                    let g: Vec<T> = (0..planes)
                        .map(|p| {
                            dy.data()[p * n..(p + 1) * n].iter().zip(&xs[p * n..(p + 1) * n]).map(|(&d, &x)| d * x).sum()
                        })
                        .collect();
                    self.accumulate(grads, *gamma, Tensor::from_vec(self.shape(*gamma), g)?)?;
                }
                if self.requires_grad(*beta) {
                    let g: Vec<T> = (0..planes).map(|p| dy.data()[p * n..(p + 1) * n].iter().copied().sum()).collect();
                    self.accumulate(grads, *beta, Tensor::from_vec(self.shape(*beta), g)?)?;
                }
            }
            Op::Linear { input, weight, bias } => {
                let (b, fin) = self.value(*input).dims2()?;
                let fout = y.shape()[1];
                if self.requires_grad(*input) {
                    let mut g = Tensor::zeros(&[b, fin]);
                    gemm(
                        T::one(),
                        dy.data(),
                        MatView::row_major(b, fout),
                        self.value(*weight).data(),
                        MatView::row_major(fout, fin),
                        T::zero(),
                        g.data_mut(),
                        MatView::row_major(b, fin),
                    );
                    self.accumulate(grads, *input, g)?;
                }
                if self.requires_grad(*weight) {
                    let mut g = Tensor::zeros(&[fout, fin]);
                    gemm(
                        T::one(),
                        dy.data(),
                        MatView::row_major(b, fout).t(),
                        self.value(*input).data(),
                        MatView::row_major(b, fin),
                        T::zero(),
                        g.data_mut(),
                        MatView::row_major(fout, fin),
                    );
                    self.accumulate(grads, *weight, g)?;
                }
                if let Some(bv) = bias {
                    if self.requires_grad(*bv) {
                        let mut g = vec![T::zero(); fout];
                        for row in dy.data().chunks(fout) {
                            for (o, &d) in g.iter_mut().zip(row) {
                                *o += d;
                            }
                        }
                        self.accumulate(grads, *bv, Tensor::from_vec(&[fout], g)?)?;
                    }
                }
            }
            Op::Gram(a) => {
                let (b, c, h, w) = self.value(*a).dims4()?;
                let n = h * w;
                let norm = T::one() / T::from_usize(c * n).unwrap();
                // dF = (dG + dG^T) F / (C N)
                let mut sym = dy.clone();
                for s in 0..b {
                    let blk = &mut sym.data_mut()[s * c * c..(s + 1) * c * c];
                    let orig = dy.data()[s * c * c..(s + 1) * c * c].to_vec();
                    for i in 0..c {
                        for j in 0..c {
                            blk[i * c + j] = orig[i * c + j] + orig[j * c + i];
                        }
                    }
                }
                let src = self.value(*a).data();
                let mut g = Tensor::zeros(&[b, c, h, w]);
                for s in 0..b {
                    gemm(
                        norm,
                        sym.data(),
                        MatView::block(c, c, c, s * c * c),
                        src,
                        MatView::block(c, n, n, s * c * n),
                        T::zero(),
                        g.data_mut(),
                        MatView::block(c, n, n, s * c * n),
                    );
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::BceWithLogits { input, target } => {
                let x = self.value(*input);
                let scale = dy.item() / T::from_usize(x.numel().max(1)).unwrap();
                let t = *target;
                self.accumulate(grads, *input, x.map(|v| (sigmoid(v) - t) * scale))?;
            }
        }
        Ok(())
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `max(x, 0) - x t + ln(1 + exp(-|x|))`, the stable form of BCE on a logit.
pub fn bce_term<T: Scalar>(x: T, target: T) -> T {
    x.max(T::zero()) - x * target + (-x.abs()).exp().ln_1p()
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter, if it was trainable and reached.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// Names of trainable parameters present in the graph, sorted.
    pub fn param_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.params.keys().map(String::as_str).collect();
        names.sort_unstable();
        names
    }
}
