//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! return [`Var`] handles; [`Tape::backward`] walks the recording in reverse
//! and accumulates gradients into the leaves that were created with
//! `requires_grad`. The tape is meant to be thrown away after each optimizer
//! step.
//!
//! Kernels that run in parallel (matmul, conv2d) split their work so that
//! every output element is reduced in the same order as the sequential loop,
//! so results do not depend on the thread count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry;
use crate::scalar::Scalar;

/// Row-major dense tensor. Cloning shares the underlying buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that the extents are positive, match the
    /// buffer length and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            data: data.into(),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n].into(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v].into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    // Op outputs: finiteness is checked by the tape, extents by construction.
    fn from_op(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Self {
            shape,
            data: data.into(),
        })
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
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Bilinear {
        plane: Var,
        coords: Var,
    },
    Chamfer {
        a: Var,
        b: Var,
        nn_ab: Vec<usize>,
        nn_ba: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` get a zeroed accumulator.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![T::zero(); value.len()]);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` for nodes that do not track one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone().into(),
        })
    }

    /// Resets every accumulator to exact zero.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_op(name, va.shape.clone(), data)?;
        Ok(self.push(op, out, &[a, b]))
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_op(name, va.shape.clone(), data)?;
        Ok(self.push(op, out, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, factor), |x| x * factor)
    }

    /// `relu(0) == 0`, and its subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map("sqrt", a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let out = Tensor::from_op("sum", Vec::new(), vec![s])?;
        Ok(self.push(Op::Sum(a), out, &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let n = T::from_usize(va.len()).unwrap();
        let s = va.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let out = Tensor::from_op("mean", Vec::new(), vec![s / n])?;
        Ok(self.push(Op::Mean(a), out, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), out, &[a]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = match (va.shape(), vb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => {
                return Err(Error::shape(
                    "matmul",
                    format!("cannot multiply {sa:?} by {sb:?}"),
                ))
            }
        };
        let (ad, bd) = (va.data(), vb.data());
        let mut out = vec![T::zero(); m * n];
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let arow = &ad[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (p, &x) in arow.iter().enumerate() {
                    acc = acc + x * bd[p * n + j];
                }
                *o = acc;
            }
        });
        let out = Tensor::from_op("matmul", vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    /// Valid (unpadded) 2-D convolution of a `C x H x W` input with a
    /// `K x C x kh x kw` kernel and optional per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let geom = ConvGeom::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            bias.map(|b| self.value(b).shape()),
            stride,
        )?;
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let b = bias.map(|b| self.value(b).data());
        let plane = geom.oh * geom.ow;
        let mut out = vec![T::zero(); geom.k * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(ko, o)| {
            for oi in 0..geom.oh {
                for oj in 0..geom.ow {
                    let mut acc = T::zero();
                    for c in 0..geom.c {
                        for di in 0..geom.kh {
                            for dj in 0..geom.kw {
                                acc = acc + x[geom.x_idx(c, oi * stride + di, oj * stride + dj)]
                                    * w[geom.w_idx(ko, c, di, dj)];
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc = acc + b[ko];
                    }
                    o[oi * geom.ow + oj] = acc;
                }
            }
        });
        let out = Tensor::from_op("conv2d", vec![geom.k, geom.oh, geom.ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
            out,
            &inputs,
        ))
    }

    /// Bilinear lookup of a `C x H x W` plane at `M x 2` coordinates `(u, v)`,
    /// `u` running along the width and `v` along the height. Coordinates
    /// outside `[0, 1]` are clamped to the boundary.
    pub fn bilinear_sample(&mut self, plane: Var, coords: Var) -> Result<Var> {
        self.check(plane)?;
        self.check(coords)?;
        let out = bilinear_forward(self.value(plane), self.value(coords))?;
        Ok(self.push(Op::Bilinear { plane, coords }, out, &[plane, coords]))
    }

    /// Chamfer distance between the point sets stored as `N x D` rows.
    /// Gradients hold the nearest-neighbour assignment of this forward pass fixed.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (da, db) = match (va.shape(), vb.shape()) {
            ([_, da], [_, db]) => (*da, *db),
            (sa, sb) => {
                return Err(Error::shape(
                    "chamfer",
                    format!("expected N x D point matrices, got {sa:?} and {sb:?}"),
                ))
            }
        };
        if da != db {
            return Err(Error::Dimension(da, db));
        }
        let outcome = geometry::chamfer_flat(va.data(), vb.data(), da)?;
        let out = Tensor::from_op("chamfer", Vec::new(), vec![outcome.value])?;
        Ok(self.push(
            Op::Chamfer {
                a,
                b,
                nn_ab: outcome.nn_ab,
                nn_ba: outcome.nn_ba,
            },
            out,
            &[a, b],
        ))
    }

    /// Propagates d(loss)/d(node) back to every leaf created with
    /// `requires_grad`, adding into the existing accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let acc = self.nodes[idx].grad.as_mut().expect("leaf accumulator");
                for (a, d) in acc.iter_mut().zip(&g) {
                    *a = *a + *d;
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let mut send = |v: Var, f: &dyn Fn(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: &Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &|s| add_into(s, g));
                send(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                send(*a, &|s| add_into(s, g));
                send(*b, &|s| {
                    for (o, &d) in s.iter_mut().zip(g) {
                        *o = *o - d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(a), val(b));
                send(*a, &|s| {
                    for ((o, &d), &y) in s.iter_mut().zip(g).zip(xb) {
                        *o = *o + d * y;
                    }
                });
                send(*b, &|s| {
                    for ((o, &d), &x) in s.iter_mut().zip(g).zip(xa) {
                        *o = *o + d * x;
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &|s| {
                for (o, &d) in s.iter_mut().zip(g) {
                    *o = *o + d * *c;
                }
            }),
            Op::Relu(a) => {
                let x = val(a);
                send(*a, &|s| {
                    for ((o, &d), &xi) in s.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *o = *o + d;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                send(*a, &|s| {
                    for ((o, &d), &yi) in s.iter_mut().zip(g).zip(y) {
                        *o = *o + d * (T::one() - yi * yi);
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                let two = T::lit(2.0);
                send(*a, &|s| {
                    for ((o, &d), &yi) in s.iter_mut().zip(g).zip(y) {
                        // one-sided: the derivative at 0 is taken as 0
                        if yi > T::zero() {
                            *o = *o + d / (two * yi);
                        }
                    }
                });
            }
            Op::Square(a) => {
                let x = val(a);
                let two = T::lit(2.0);
                send(*a, &|s| {
                    for ((o, &d), &xi) in s.iter_mut().zip(g).zip(x) {
                        *o = *o + two * xi * d;
                    }
                });
            }
            Op::Sum(a) => send(*a, &|s| s.iter_mut().for_each(|o| *o = *o + g[0])),
            Op::Mean(a) => {
                let n = T::from_usize(nodes[a.0].value.len()).unwrap();
                let d = g[0] / n;
                send(*a, &|s| s.iter_mut().for_each(|o| *o = *o + d));
            }
            Op::Reshape(a) => send(*a, &|s| add_into(s, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (val(a), val(b));
                if wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    da.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
                        for (p, o) in row.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc = acc + g[i * n + j] * bd[p * n + j];
                            }
                            *o = acc;
                        }
                    });
                    send(*a, &|s| add_into(s, &da));
                }
                if wants(b) {
                    let db = matmul_tn(ad, g, m, k, n);
                    send(*b, &|s| add_into(s, &db));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let geom = ConvGeom::new(
                    nodes[input.0].value.shape(),
                    nodes[kernel.0].value.shape(),
                    bias.map(|b| nodes[b.0].value.shape()),
                    *stride,
                )?;
                let (x, w) = (val(input), val(kernel));
                if wants(input) {
                    let dx = geom.grad_input(g, w);
                    send(*input, &|s| add_into(s, &dx));
                }
                if wants(kernel) {
                    let dw = geom.grad_kernel(g, x);
                    send(*kernel, &|s| add_into(s, &dw));
                }
                if let Some(b) = bias {
                    let plane = geom.oh * geom.ow;
                    send(*b, &|s| {
                        for (ko, o) in s.iter_mut().enumerate() {
                            let part = g[ko * plane..(ko + 1) * plane]
                                .iter()
                                .fold(T::zero(), |acc, &d| acc + d);
                            *o = *o + part;
                        }
                    });
                }
            }
            Op::Bilinear { plane, coords } => {
                let p = &nodes[plane.0].value;
                let co = &nodes[coords.0].value;
                let (dp, dc) = bilinear_backward(p, co, g);
                send(*plane, &|s| add_into(s, &dp));
                send(*coords, &|s| add_into(s, &dc));
            }
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let dim = nodes[a.0].value.shape()[1];
                let (pa, pb) = (val(a), val(b));
                let (na, nb) = (pa.len() / dim, pb.len() / dim);
                let two = T::lit(2.0);
                let ca = g[0] * two / T::from_usize(na).unwrap();
                let cb = g[0] * two / T::from_usize(nb).unwrap();
                let mut ga = vec![T::zero(); pa.len()];
                let mut gb = vec![T::zero(); pb.len()];
                for (i, &j) in nn_ab.iter().enumerate() {
                    for d in 0..dim {
                        let diff = pa[i * dim + d] - pb[j * dim + d];
                        ga[i * dim + d] = ga[i * dim + d] + ca * diff;
                        gb[j * dim + d] = gb[j * dim + d] - ca * diff;
                    }
                }
                for (j, &i) in nn_ba.iter().enumerate() {
                    for d in 0..dim {
                        let diff = pb[j * dim + d] - pa[i * dim + d];
                        gb[j * dim + d] = gb[j * dim + d] + cb * diff;
                        ga[i * dim + d] = ga[i * dim + d] - cb * diff;
                    }
                }
                send(*a, &|s| add_into(s, &ga));
                send(*b, &|s| add_into(s, &gb));
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &d) in dst.iter_mut().zip(src) {
        *o = *o + d;
    }
}

/// `a^T g` for `a: [m, k]`, `g: [m, n]`. Each output row is reduced over `i`
/// in ascending order regardless of how rows are split across threads.
fn matmul_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    const CHUNK: usize = 256;
    let mut out = vec![T::zero(); k * n];
    out.par_chunks_mut(CHUNK * n).enumerate().for_each(|(ci, block)| {
        let p0 = ci * CHUNK;
        let rows = block.len() / n;
        for i in 0..m {
            let arow = &a[i * k + p0..i * k + p0 + rows];
            let grow = &g[i * n..(i + 1) * n];
            for (pp, &x) in arow.iter().enumerate() {
                let orow = &mut block[pp * n..(pp + 1) * n];
                for (o, &d) in orow.iter_mut().zip(grow) {
                    *o = *o + x * d;
                }
            }
        }
    });
    out
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, stride: usize) -> Result<Self> {
        let ([c, h, wd], [k, c2, kh, kw]) = (x, w) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected C x H x W input and K x C x kh x kw kernel, got {x:?} and {w:?}"),
            ));
        };
        if c != c2 {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {c2}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        if kh > h || kw > wd {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than input {h}x{wd}"),
            ));
        }
        if let Some(b) = bias {
            if b != [*k] {
                return Err(Error::shape("conv2d", format!("bias shape {b:?}, expected [{k}]")));
            }
        }
        Ok(Self {
            c: *c,
            h: *h,
            w: *wd,
            k: *k,
            kh: *kh,
            kw: *kw,
            oh: (h - kh) / stride + 1,
            ow: (wd - kw) / stride + 1,
            stride,
        })
    }

    #[inline]
    fn x_idx(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.h + i) * self.w + j
    }

    #[inline]
    fn w_idx(&self, k: usize, c: usize, di: usize, dj: usize) -> usize {
        ((k * self.c + c) * self.kh + di) * self.kw + dj
    }

    fn grad_input<T: Scalar>(&self, g: &[T], w: &[T]) -> Vec<T> {
        let plane = self.h * self.w;
        let mut dx = vec![T::zero(); self.c * plane];
        dx.par_chunks_mut(plane).enumerate().for_each(|(c, dxc)| {
            for ko in 0..self.k {
                for oi in 0..self.oh {
                    for oj in 0..self.ow {
                        let d = g[(ko * self.oh + oi) * self.ow + oj];
                        for di in 0..self.kh {
                            for dj in 0..self.kw {
                                let at = (oi * self.stride + di) * self.w + oj * self.stride + dj;
                                dxc[at] = dxc[at] + d * w[self.w_idx(ko, c, di, dj)];
                            }
                        }
                    }
                }
            }
        });
        dx
    }

    fn grad_kernel<T: Scalar>(&self, g: &[T], x: &[T]) -> Vec<T> {
        let per_k = self.c * self.kh * self.kw;
        let mut dw = vec![T::zero(); self.k * per_k];
        dw.par_chunks_mut(per_k).enumerate().for_each(|(ko, dwk)| {
            for c in 0..self.c {
                for di in 0..self.kh {
                    for dj in 0..self.kw {
                        let mut acc = T::zero();
                        for oi in 0..self.oh {
                            for oj in 0..self.ow {
                                acc = acc
                                    + g[(ko * self.oh + oi) * self.ow + oj]
                                        * x[self.x_idx(c, oi * self.stride + di, oj * self.stride + dj)];
                            }
                        }
                        dwk[(c * self.kh + di) * self.kw + dj] = acc;
                    }
                }
            }
        });
        dw
    }
}

struct BilinearTap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    // d(x)/d(u) and d(y)/d(v); zero when the coordinate was clamped
    sx: T,
    sy: T,
}

fn bilinear_tap<T: Scalar>(u: T, v: T, h: usize, w: usize) -> BilinearTap<T> {
    let clamp = |t: T, extent: usize| {
        let scale = T::from_usize(extent - 1).unwrap();
        if t < T::zero() {
            (T::zero(), T::zero())
        } else if t > T::one() {
            (scale, T::zero())
        } else {
            (t * scale, scale)
        }
    };
    let (x, sx) = clamp(u, w);
    let (y, sy) = clamp(v, h);
    let x0 = x.floor().to_usize().unwrap().min(w - 1);
    let y0 = y.floor().to_usize().unwrap().min(h - 1);
    BilinearTap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: x - T::from_usize(x0).unwrap(),
        fy: y - T::from_usize(y0).unwrap(),
        sx,
        sy,
    }
}

fn bilinear_dims<T: Scalar>(plane: &Tensor<T>, coords: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let [c, h, w] = plane.shape() else {
        return Err(Error::shape(
            "bilinear_sample",
            format!("plane must be C x H x W, got {:?}", plane.shape()),
        ));
    };
    let [m, 2] = coords.shape() else {
        return Err(Error::shape(
            "bilinear_sample",
            format!("coords must be M x 2, got {:?}", coords.shape()),
        ));
    };
    if *h < 2 || *w < 2 {
        return Err(Error::shape("bilinear_sample", format!("plane {h}x{w} smaller than 2x2")));
    }
    Ok((*c, *h, *w, *m))
}

/// Forward half of [`Tape::bilinear_sample`], usable without a tape.
pub fn bilinear_forward<T: Scalar>(plane: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w, m) = bilinear_dims(plane, coords)?;
    let p = plane.data();
    let co = coords.data();
    let mut out = vec![T::zero(); m * c];
    for (i, row) in out.chunks_mut(c).enumerate() {
        let t = bilinear_tap(co[2 * i], co[2 * i + 1], h, w);
        let (wx0, wy0) = (T::one() - t.fx, T::one() - t.fy);
        for (ch, o) in row.iter_mut().enumerate() {
            let base = ch * h * w;
            *o = wx0 * wy0 * p[base + t.y0 * w + t.x0]
                + t.fx * wy0 * p[base + t.y0 * w + t.x1]
                + wx0 * t.fy * p[base + t.y1 * w + t.x0]
                + t.fx * t.fy * p[base + t.y1 * w + t.x1];
        }
    }
    Tensor::from_op("bilinear_sample", vec![m, c], out)
}

fn bilinear_backward<T: Scalar>(plane: &Tensor<T>, coords: &Tensor<T>, g: &[T]) -> (Vec<T>, Vec<T>) {
    let (c, h, w, m) = bilinear_dims(plane, coords).expect("validated in forward");
    let p = plane.data();
    let co = coords.data();
    let mut dp = vec![T::zero(); p.len()];
    let mut dc = vec![T::zero(); co.len()];
    for i in 0..m {
        let t = bilinear_tap(co[2 * i], co[2 * i + 1], h, w);
        let (wx0, wy0) = (T::one() - t.fx, T::one() - t.fy);
        let (mut du, mut dv) = (T::zero(), T::zero());
        for ch in 0..c {
            let d = g[i * c + ch];
            let base = ch * h * w;
            let (i00, i01) = (base + t.y0 * w + t.x0, base + t.y0 * w + t.x1);
            let (i10, i11) = (base + t.y1 * w + t.x0, base + t.y1 * w + t.x1);
            dp[i00] = dp[i00] + d * wx0 * wy0;
            dp[i01] = dp[i01] + d * t.fx * wy0;
            dp[i10] = dp[i10] + d * wx0 * t.fy;
            dp[i11] = dp[i11] + d * t.fx * t.fy;
            du = du + d * (wy0 * (p[i01] - p[i00]) + t.fy * (p[i11] - p[i10]));
            dv = dv + d * (wx0 * (p[i10] - p[i00]) + t.fx * (p[i11] - p[i01]));
        }
        dc[2 * i] = du * t.sx;
        dc[2 * i + 1] = dv * t.sy;
    }
    (dp, dc)
}
