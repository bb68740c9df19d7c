//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns named parameters (with gradient and momentum slots) and a
//! tape of primitive applications. The tape is append-only and therefore
//! topologically ordered; `backward` walks it in exact reverse and
//! accumulates gradients by addition in a fixed sequential order, so repeated
//! passes are bit-identical.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations and their attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[n,k] x [k,m] -> [n,m]`.
    MatMul,
    /// NHWC input `[N,H,W,C]`, kernel `[kh,kw,C,O]`, zero padding.
    Conv2d { stride: usize, padding: usize },
    Add,
    /// `[..., C] + [C]`, the row vector repeated over leading axes.
    AddRow,
    Subtract,
    Multiply,
    Scale(f64),
    Tanh,
    Relu,
    /// Subgradient 0 at exactly zero.
    Abs,
    /// `ln(max(x, floor))`; a zero floor means no clamping.
    Log { floor: f64 },
    Sum,
    Mean,
    /// Sum over the last axis.
    SumLastAxis,
    /// `[N,H,W,C] -> [N,H/2,W/2,C]`, floor on odd sizes.
    MaxPool2x2,
    /// `[N,H,W,C] -> [N,C]`.
    GlobalAvgPool,
    /// SoftMax over the last (channel) axis.
    Softmax,
    Reshape(Vec<usize>),
    /// `[..., D] -> [..., times*D]` by repeating the last axis.
    Tile(usize),
    /// `x [P, g*a]`, `w [g,a,b]` -> `[P, g*b]`; group `i` of `x` meets `w[i]`.
    GroupedMatMul,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Add => "add",
            Primitive::AddRow => "add_row",
            Primitive::Subtract => "subtract",
            Primitive::Multiply => "multiply",
            Primitive::Scale(_) => "scale",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Abs => "abs",
            Primitive::Log { .. } => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumLastAxis => "sum_last_axis",
            Primitive::MaxPool2x2 => "max_pool2x2",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Softmax => "softmax",
            Primitive::Reshape(_) => "reshape",
            Primitive::Tile(_) => "tile",
            Primitive::GroupedMatMul => "grouped_matmul",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Conv2d { .. }
            | Primitive::Add
            | Primitive::AddRow
            | Primitive::Subtract
            | Primitive::Multiply
            | Primitive::GroupedMatMul => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Source {
    Input,
    Param(ParamId),
    Op {
        prim: Primitive,
        inputs: Vec<NodeId>,
        /// Saved indices (max-pool argmax).
        aux: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    source: Source,
    value: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Parameter<T = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub velocity: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T = f64> {
    nodes: Vec<Node<T>>,
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    // -- parameters --------------------------------------------------------

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: format!("parameter `{name}`"),
            });
        }
        let velocity = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            velocity,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn param_value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].grad.as_ref()
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set_param(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Mismatch {
                field: p.name.clone(),
                detail: format!("shape {:?} vs {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn param_value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    #[cfg(test)]
    pub(crate) fn param_grad_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.params[id.0].grad.as_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    // -- tape --------------------------------------------------------------

    /// Drop the tape, keeping parameters, gradients and velocities.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.nodes[node.0].value
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: format!("input to node {}", self.nodes.len()),
            });
        }
        Ok(self.push(Source::Input, value))
    }

    /// Place a parameter on the tape.
    pub fn use_param(&mut self, id: ParamId) -> NodeId {
        let value = self.params[id.0].value.clone();
        self.push(Source::Param(id), value)
    }

    fn push(&mut self, source: Source, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { source, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Apply a primitive to nodes already on the tape.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != prim.arity() {
            return Err(Error::invalid(format!(
                "{prim} takes {} inputs, got {}",
                prim.arity(),
                inputs.len()
            )));
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|n| &self.nodes[n.0].value).collect();
        let (value, aux) = forward(&prim, &values)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: format!("node {} ({prim})", self.nodes.len()),
            });
        }
        let source = Source::Op {
            prim,
            inputs: inputs.to_vec(),
            aux,
        };
        Ok(self.push(source, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.apply(Primitive::Conv2d { stride, padding }, &[x, kernel])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.apply(Primitive::AddRow, &[a, row])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Subtract, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Multiply, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(factor), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Abs, &[a])
    }

    pub fn log(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.apply(Primitive::Log { floor }, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn sum_last_axis(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SumLastAxis, &[a])
    }

    pub fn max_pool2x2(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MaxPool2x2, &[a])
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::GlobalAvgPool, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        self.apply(Primitive::Reshape(shape.into()), &[a])
    }

    pub fn tile(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        self.apply(Primitive::Tile(times), &[a])
    }

    pub fn grouped_matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.apply(Primitive::GroupedMatMul, &[x, w])
    }

    // -- differentiation ---------------------------------------------------

    /// Reverse pass from a scalar loss. Every parameter receives a gradient;
    /// parameters the loss does not reach get zeros. Existing gradients are
    /// overwritten.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.source {
                Source::Input => {}
                Source::Param(pid) => accumulate(&mut param_grads[pid.0], g),
                Source::Op { prim, inputs, aux } => {
                    let values: Vec<&Tensor<T>> =
                        inputs.iter().map(|n| &self.nodes[n.0].value).collect();
                    let input_grads = backward_prim(prim, &values, &node.value, aux, &g);
                    for (input, ig) in inputs.iter().zip(input_grads) {
                        if let Some(ig) = ig {
                            accumulate(&mut grads[input.0], ig);
                        }
                    }
                }
            }
        }

        for (p, g) in self.params.iter_mut().zip(param_grads) {
            p.grad = Some(g.unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Momentum SGD: `v <- momentum*v + g`, `w <- w - lr*v`. Consumes the
    /// gradients.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if self.params.iter().any(|p| p.grad.is_none()) {
            return Err(Error::NoGradients);
        }
        let lr = T::of_f64(lr);
        let mu = T::of_f64(momentum);
        for p in &mut self.params {
            let g = p.grad.take().expect("checked above");
            for ((w, v), &g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.velocity.data_mut())
                .zip(g.data())
            {
                *v = mu * *v + g;
                *w = *w - lr * *v;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

// ---------------------------------------------------------------------------
// forward rules

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    o: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", k, 4)?;
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, kc, o) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} has {c} channels, kernel {:?} expects {kc}", x.shape(), k.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} larger than padded input {:?}", k.shape(), x.shape()),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            h,
            w,
            c,
            kh,
            kw,
            o,
            ho,
            wo,
            stride,
            pad,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Calls `f(row, col_offset, src_offset)` for every in-bounds kernel tap;
    /// each tap covers `c` contiguous values on both sides.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = (ky * self.kw + kx) * self.c;
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let k = self.patch_len();
        let mut cols = vec![T::zero(); self.rows() * k];
        let c = self.c;
        self.for_each_tap(|row, col, src| {
            let dst = row * k + col;
            cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
        });
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let k = self.patch_len();
        let mut dx = vec![T::zero(); self.n * self.h * self.w * self.c];
        let c = self.c;
        self.for_each_tap(|row, col, src| {
            let from = row * k + col;
            for i in 0..c {
                dx[src + i] = dx[src + i] + cols[from + i];
            }
        });
        dx
    }
}

type Forward<T> = (Tensor<T>, Vec<usize>);

fn forward<T: Scalar>(prim: &Primitive, x: &[&Tensor<T>]) -> Result<Forward<T>> {
    let out = match prim {
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            expect_rank("matmul", a, 2)?;
            expect_rank("matmul", b, 2)?;
            let (n, k) = (a.shape()[0], a.shape()[1]);
            let (k2, m) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let mut out = vec![T::zero(); n * m];
            gemm(n, k, m, a.data(), false, b.data(), false, &mut out, false);
            Tensor::new(vec![n, m], out)?
        }
        Primitive::Conv2d { stride, padding } => {
            let g = ConvGeom::new(x[0], x[1], *stride, *padding)?;
            let cols = g.im2col(x[0].data());
            let mut out = vec![T::zero(); g.rows() * g.o];
            gemm(g.rows(), g.patch_len(), g.o, &cols, false, x[1].data(), false, &mut out, false);
            Tensor::new(vec![g.n, g.ho, g.wo, g.o], out)?
        }
        Primitive::Add => {
            same_shape("add", x[0], x[1])?;
            zip_map(x[0], x[1], |a, b| a + b)
        }
        Primitive::Subtract => {
            same_shape("subtract", x[0], x[1])?;
            zip_map(x[0], x[1], |a, b| a - b)
        }
        Primitive::Multiply => {
            same_shape("multiply", x[0], x[1])?;
            zip_map(x[0], x[1], |a, b| a * b)
        }
        Primitive::AddRow => {
            let (a, row) = (x[0], x[1]);
            let c = *a.shape().last().expect("rank >= 1");
            if row.len() != c {
                return Err(Error::shape(
                    "add_row",
                    format!("row {:?} does not match last axis of {:?}", row.shape(), a.shape()),
                ));
            }
            let r = row.data();
            let data = a
                .data()
                .chunks(c)
                .flat_map(|chunk| chunk.iter().zip(r).map(|(&v, &b)| v + b))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        }
        Primitive::Scale(f) => {
            let f = T::of_f64(*f);
            x[0].map(|v| v * f)
        }
        Primitive::Tanh => x[0].map(|v| v.tanh()),
        Primitive::Relu => x[0].map(|v| if v > T::zero() { v } else { T::zero() }),
        Primitive::Abs => x[0].map(|v| v.abs()),
        Primitive::Log { floor } => {
            let floor = T::of_f64(*floor);
            x[0].map(|v| v.max(floor).ln())
        }
        Primitive::Sum => Tensor::scalar(x[0].data().iter().copied().sum()),
        Primitive::Mean => {
            let n = T::of_f64(x[0].len() as f64);
            Tensor::scalar(x[0].data().iter().copied().sum::<T>() / n)
        }
        Primitive::SumLastAxis => {
            let a = x[0];
            let d = *a.shape().last().expect("rank >= 1");
            let mut shape = a.shape()[..a.rank() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            let data = a.data().chunks(d).map(|c| c.iter().copied().sum()).collect();
            Tensor::new(shape, data)?
        }
        Primitive::MaxPool2x2 => return max_pool_forward(x[0]),
        Primitive::GlobalAvgPool => {
            let a = x[0];
            expect_rank("global_avg_pool", a, 4)?;
            let (n, h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
            let mut out = vec![T::zero(); n * c];
            let inv = T::of_f64(1.0 / (h * w) as f64);
            for b in 0..n {
                let dst = &mut out[b * c..(b + 1) * c];
                for px in a.data()[b * h * w * c..(b + 1) * h * w * c].chunks(c) {
                    for (o, &v) in dst.iter_mut().zip(px) {
                        *o = *o + v;
                    }
                }
                dst.iter_mut().for_each(|o| *o = *o * inv);
            }
            Tensor::new(vec![n, c], out)?
        }
        Primitive::Softmax => {
            let a = x[0];
            let c = *a.shape().last().expect("rank >= 1");
            let mut out = a.data().to_vec();
            for chunk in out.chunks_mut(c) {
                let max = chunk.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in chunk.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                chunk.iter_mut().for_each(|v| *v = *v / total);
            }
            Tensor::new(a.shape().to_vec(), out)?
        }
        Primitive::Reshape(shape) => x[0].clone().reshaped(shape.clone())?,
        Primitive::Tile(times) => {
            let a = x[0];
            if *times == 0 {
                return Err(Error::invalid("tile count must be positive"));
            }
            let d = *a.shape().last().expect("rank >= 1");
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = d * times;
            let mut out = Vec::with_capacity(a.len() * times);
            for row in a.data().chunks(d) {
                for _ in 0..*times {
                    out.extend_from_slice(row);
                }
            }
            Tensor::new(shape, out)?
        }
        Primitive::GroupedMatMul => {
            let (a, w) = (x[0], x[1]);
            let (p, groups, ain, bout) = grouped_dims(a, w)?;
            let mut out = vec![T::zero(); p * groups * bout];
            for g in 0..groups {
                // SAFETY: group `g` occupies columns g*ain..(g+1)*ain of the
                // `p x groups*ain` input and g*bout.. of the output.
                unsafe {
                    T::gemm_raw(
                        p,
                        ain,
                        bout,
                        a.data().as_ptr().add(g * ain),
                        (groups * ain) as isize,
                        1,
                        w.data().as_ptr().add(g * ain * bout),
                        bout as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(g * bout),
                        (groups * bout) as isize,
                        1,
                    );
                }
            }
            Tensor::new(vec![p, groups * bout], out)?
        }
    };
    Ok((out, Vec::new()))
}

fn grouped_dims<T: Scalar>(a: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    expect_rank("grouped_matmul", a, 2)?;
    expect_rank("grouped_matmul", w, 3)?;
    let (groups, ain, bout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if a.shape()[1] != groups * ain {
        return Err(Error::shape(
            "grouped_matmul",
            format!("{:?} does not split into groups of {:?}", a.shape(), w.shape()),
        ));
    }
    Ok((a.shape()[0], groups, ain, bout))
}

fn max_pool_forward<T: Scalar>(a: &Tensor<T>) -> Result<Forward<T>> {
    expect_rank("max_pool2x2", a, 4)?;
    let (n, h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::shape("max_pool2x2", format!("input {:?} too small", a.shape())));
    }
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut arg = Vec::with_capacity(n * ho * wo * c);
    let d = a.data();
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        // first maximum wins ties
                        if d[idx] > best_v {
                            best_v = d[idx];
                            best = idx;
                        }
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, ho, wo, c], out)?, arg))
}

// ---------------------------------------------------------------------------
// backward rules

fn backward_prim<T: Scalar>(
    prim: &Primitive,
    x: &[&Tensor<T>],
    y: &Tensor<T>,
    aux: &[usize],
    g: &Tensor<T>,
) -> Vec<Option<Tensor<T>>> {
    let like = |t: &Tensor<T>, data: Vec<T>| Tensor::new(t.shape().to_vec(), data).expect("grad shape");
    match prim {
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut da = vec![T::zero(); n * k];
            gemm(n, m, k, g.data(), false, b.data(), true, &mut da, false);
            let mut db = vec![T::zero(); k * m];
            gemm(k, n, m, a.data(), true, g.data(), false, &mut db, false);
            vec![Some(like(a, da)), Some(like(b, db))]
        }
        Primitive::Conv2d { stride, padding } => {
            let geom = ConvGeom::new(x[0], x[1], *stride, *padding).expect("validated in forward");
            let cols = geom.im2col(x[0].data());
            let (rows, k, o) = (geom.rows(), geom.patch_len(), geom.o);
            let mut dk = vec![T::zero(); k * o];
            gemm(k, rows, o, &cols, true, g.data(), false, &mut dk, false);
            let mut dcols = cols;
            gemm(rows, o, k, g.data(), false, x[1].data(), true, &mut dcols, false);
            let dx = geom.col2im(&dcols);
            vec![Some(like(x[0], dx)), Some(like(x[1], dk))]
        }
        Primitive::Add => vec![Some(g.clone()), Some(g.clone())],
        Primitive::Subtract => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Primitive::Multiply => vec![
            Some(zip_map(g, x[1], |a, b| a * b)),
            Some(zip_map(g, x[0], |a, b| a * b)),
        ],
        Primitive::AddRow => {
            let c = x[1].len();
            let mut dr = vec![T::zero(); c];
            for chunk in g.data().chunks(c) {
                for (d, &v) in dr.iter_mut().zip(chunk) {
                    *d = *d + v;
                }
            }
            vec![Some(g.clone()), Some(like(x[1], dr))]
        }
        Primitive::Scale(f) => {
            let f = T::of_f64(*f);
            vec![Some(g.map(|v| v * f))]
        }
        Primitive::Tanh => vec![Some(zip_map(g, y, |g, t| g * (T::one() - t * t)))],
        Primitive::Relu => vec![Some(zip_map(g, x[0], |g, v| if v > T::zero() { g } else { T::zero() }))],
        Primitive::Abs => vec![Some(zip_map(g, x[0], |g, v| {
            if v > T::zero() {
                g
            } else if v < T::zero() {
                -g
            } else {
                T::zero()
            }
        }))],
        Primitive::Log { floor } => {
            let floor = T::of_f64(*floor);
            vec![Some(zip_map(g, x[0], |g, v| if v > floor { g / v } else { T::zero() }))]
        }
        Primitive::Sum => {
            let s = g.item();
            vec![Some(Tensor::full(x[0].shape().to_vec(), s))]
        }
        Primitive::Mean => {
            let s = g.item() / T::of_f64(x[0].len() as f64);
            vec![Some(Tensor::full(x[0].shape().to_vec(), s))]
        }
        Primitive::SumLastAxis => {
            let d = *x[0].shape().last().unwrap();
            let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect();
            vec![Some(like(x[0], data))]
        }
        Primitive::MaxPool2x2 => {
            let mut dx = vec![T::zero(); x[0].len()];
            for (&idx, &v) in aux.iter().zip(g.data()) {
                dx[idx] = dx[idx] + v;
            }
            vec![Some(like(x[0], dx))]
        }
        Primitive::GlobalAvgPool => {
            let s = x[0].shape();
            let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
            let inv = T::of_f64(1.0 / hw as f64);
            let mut dx = Vec::with_capacity(x[0].len());
            for b in 0..n {
                let row = &g.data()[b * c..(b + 1) * c];
                for _ in 0..hw {
                    dx.extend(row.iter().map(|&v| v * inv));
                }
            }
            vec![Some(like(x[0], dx))]
        }
        Primitive::Softmax => {
            let c = *y.shape().last().unwrap();
            let mut dx = Vec::with_capacity(y.len());
            for (yc, gc) in y.data().chunks(c).zip(g.data().chunks(c)) {
                let dot: T = yc.iter().zip(gc).map(|(&a, &b)| a * b).sum();
                dx.extend(yc.iter().zip(gc).map(|(&a, &b)| a * (b - dot)));
            }
            vec![Some(like(x[0], dx))]
        }
        Primitive::Reshape(_) => vec![Some(like(x[0], g.data().to_vec()))],
        Primitive::Tile(times) => {
            let d = *x[0].shape().last().unwrap();
            let mut dx = Vec::with_capacity(x[0].len());
            for row in g.data().chunks(d * times) {
                for j in 0..d {
                    let mut acc = T::zero();
                    for t in 0..*times {
                        acc = acc + row[t * d + j];
                    }
                    dx.push(acc);
                }
            }
            vec![Some(like(x[0], dx))]
        }
        Primitive::GroupedMatMul => {
            let (a, w) = (x[0], x[1]);
            let (p, groups, ain, bout) = grouped_dims(a, w).expect("validated in forward");
            let mut da = vec![T::zero(); a.len()];
            let mut dw = vec![T::zero(); w.len()];
            for grp in 0..groups {
                // SAFETY: same block layout as the forward pass.
                unsafe {
                    // da_g = g_g * w_g^T
                    T::gemm_raw(
                        p,
                        bout,
                        ain,
                        g.data().as_ptr().add(grp * bout),
                        (groups * bout) as isize,
                        1,
                        w.data().as_ptr().add(grp * ain * bout),
                        1,
                        bout as isize,
                        T::zero(),
                        da.as_mut_ptr().add(grp * ain),
                        (groups * ain) as isize,
                        1,
                    );
                    // dw_g = a_g^T * g_g
                    T::gemm_raw(
                        ain,
                        p,
                        bout,
                        a.data().as_ptr().add(grp * ain),
                        1,
                        (groups * ain) as isize,
                        g.data().as_ptr().add(grp * bout),
                        (groups * bout) as isize,
                        1,
                        T::zero(),
                        dw.as_mut_ptr().add(grp * ain * bout),
                        bout as isize,
                        1,
                    );
                }
            }
            vec![Some(like(a, da)), Some(like(w, dw))]
        }
    }
}
