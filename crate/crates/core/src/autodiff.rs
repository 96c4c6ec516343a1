//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Every op appends a node holding its output value; nodes only ever refer to
//! earlier nodes, so insertion order is a topological order. [`Tape::backward`]
//! replays the record in reverse insertion order exactly once, accumulating
//! vector-Jacobian products additively into every input.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulScalar { x: usize, s: usize },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax { x: usize, temperature: f64 },
    LogSoftmax(usize),
    ClampedLog { x: usize, floor: f64 },
    Sum(usize),
    Mean(usize),
    Index { x: usize, i: usize },
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Reshape(usize),
    ModeProduct { core: usize, vec: usize, mode: usize },
    Conv3d { x: usize, w: usize, b: usize, geom: ConvGeometry },
    MeanOverLeading(usize),
    Gather { table: usize, row: usize },
    SumPool { x: usize, window: usize },
}

#[derive(Debug)]
struct Node<T> {
    op: Op,
    value: Tensor<T>,
}

/// The computation record for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
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

    fn push(&mut self, name: &'static str, op: Op, value: Tensor<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// Records an input value. Its gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("input", Op::Leaf, value)
    }

    /// A copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.push("detach", Op::Leaf, value)
    }

    /// Reads a parameter into the record. Repeated reads of the same
    /// parameter share one node so gradients accumulate in a single place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: store.value(id).clone(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::linear_map(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(
            "linear_map",
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            y,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, op: Op, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(name, op, out)
    }

    fn map(&mut self, name: &'static str, op: Op, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", Op::Add(a.0, b.0), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", Op::Sub(a.0, b.0), a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", Op::Mul(a.0, b.0), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ct = T::of(c);
        self.map("scale", Op::Scale(a.0, c), a, |x| x * ct)
    }

    /// `s * x` where `s` is a single-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", &[], self.shape(s)));
        }
        let sv = self.value(s).item();
        self.map("mul_scalar", Op::MulScalar { x: x.0, s: s.0 }, x, |v| v * sv)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", Op::Relu(a.0), a, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", Op::Sigmoid(a.0), a, |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", Op::Tanh(a.0), a, |x| x.tanh())
    }

    /// Softmax of `x / temperature`; below `1e-6` the argmax one-hot is
    /// recorded as a constant.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let y = kernels::softmax(self.value(x), temperature)?;
        let op = if temperature < 1e-6 {
            Op::Leaf
        } else {
            Op::Softmax { x: x.0, temperature }
        };
        self.push("softmax", op, y)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let max = vx.data().iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + vx.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|&v| v - lse).collect())?;
        self.push("log_softmax", Op::LogSoftmax(x.0), out)
    }

    /// `ln(max(x, floor))`. The flag reports whether any entry was clamped.
    pub fn clamped_log(&mut self, x: Var, floor: f64) -> Result<(Var, bool)> {
        let f = T::of(floor);
        let clamped = self.value(x).data().iter().any(|&v| v < f);
        let v = self.map("clamped_log", Op::ClampedLog { x: x.0, floor }, x, |v| v.max(f).ln())?;
        Ok((v, clamped))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Op::Sum(a.0), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s: T = va.data().iter().copied().sum::<T>() / T::of(va.numel() as f64);
        self.push("mean", Op::Mean(a.0), Tensor::scalar(s))
    }

    /// Element `i` of a flattened tensor, as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let vx = self.value(x);
        if i >= vx.numel() {
            return Err(Error::shape("index", &[i + 1], vx.shape()));
        }
        let v = vx.data()[i];
        self.push("index", Op::Index { x: x.0, i }, Tensor::scalar(v))
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::domain("concat", "nothing to concatenate"));
        }
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.rank() > 1 {
                return Err(Error::shape("concat", &[v.numel()], v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::vector(data);
        self.push("concat", Op::Concat(parts.iter().map(|p| p.0).collect()), out)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 1 || len == 0 || start + len > vx.numel() {
            return Err(Error::shape("slice", &[start + len], vx.shape()));
        }
        let out = Tensor::vector(vx.data()[start..start + len].to_vec());
        self.push("slice", Op::Slice { x: x.0, start }, out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", Op::Reshape(x.0), out)
    }

    /// Mode-`mode` (1-based) product of `core` with vector `vec`.
    pub fn mode_n_product(&mut self, core: Var, vec: Var, mode: usize) -> Result<Var> {
        let out = kernels::mode_n_product(self.value(core), self.value(vec), mode)?;
        self.push(
            "mode_n_product",
            Op::ModeProduct {
                core: core.0,
                vec: vec.0,
                mode,
            },
            out,
        )
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let out = kernels::conv3d(self.value(x), self.value(w), self.value(b), &geom)?;
        self.push(
            "conv3d",
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
            },
            out,
        )
    }

    /// Mean over all leading dimensions (space-time average pooling for a
    /// `t x h x w x c` activation).
    pub fn mean_over_leading(&mut self, x: Var) -> Result<Var> {
        let out = kernels::mean_over_leading(self.value(x))?;
        self.push("space_time_avg_pool", Op::MeanOverLeading(x.0), out)
    }

    /// Row `row` of a rank-2 table.
    pub fn gather(&mut self, table: Var, row: usize) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 || row >= vt.shape()[0] {
            return Err(Error::shape("gather", &[row + 1, 0], vt.shape()));
        }
        let d = vt.shape()[1];
        let out = Tensor::vector(vt.data()[row * d..(row + 1) * d].to_vec());
        self.push("gather", Op::Gather { table: table.0, row }, out)
    }

    /// Sums consecutive windows of a vector: length `n * window` -> `n`.
    pub fn sum_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 1 || window == 0 || vx.numel() % window != 0 {
            return Err(Error::shape("sum_pool", &[window], vx.shape()));
        }
        let out = Tensor::vector(vx.data().chunks_exact(window).map(|c| c.iter().copied().sum()).collect());
        self.push("sum_pool", Op::SumPool { x: x.0, window }, out)
    }

    /// Runs the record backwards from the scalar `loss`. A record can be
    /// consumed only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        if self.value(loss).numel() != 1 || self.value(loss).rank() > 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let wv = self.val(*w);
                let xv = self.val(*x);
                let (rows, cols) = (wv.shape()[0], wv.shape()[1]);
                let gx = accum(grads, *x, cols);
                for r in 0..rows {
                    let gr = g[r];
                    if gr == T::zero() {
                        continue;
                    }
                    for (c, gxc) in gx.iter_mut().enumerate() {
                        *gxc += wv.data()[r * cols + c] * gr;
                    }
                }
                let gw = accum(grads, *w, rows * cols);
                for r in 0..rows {
                    let gr = g[r];
                    for (c, &xc) in xv.data().iter().enumerate() {
                        gw[r * cols + c] += gr * xc;
                    }
                }
                if let Some(b) = b {
                    add_into(accum(grads, *b, rows), g);
                }
            }
            Op::Add(a, b) => {
                let n = g.len();
                add_into(accum(grads, *a, n), g);
                add_into(accum(grads, *b, n), g);
            }
            Op::Sub(a, b) => {
                let n = g.len();
                add_into(accum(grads, *a, n), g);
                for (acc, &gv) in accum(grads, *b, n).iter_mut().zip(g) {
                    *acc -= gv;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let n = g.len();
                for ((acc, &gv), &bv) in accum(grads, *a, n).iter_mut().zip(g).zip(vb) {
                    *acc += gv * bv;
                }
                for ((acc, &gv), &av) in accum(grads, *b, n).iter_mut().zip(g).zip(va) {
                    *acc += gv * av;
                }
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                for (acc, &gv) in accum(grads, *a, g.len()).iter_mut().zip(g) {
                    *acc += gv * c;
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.val(*s).item();
                let xv = self.val(*x).data();
                let ds: T = g.iter().zip(xv).map(|(&gv, &v)| gv * v).sum();
                for (acc, &gv) in accum(grads, *x, g.len()).iter_mut().zip(g) {
                    *acc += gv * sv;
                }
                accum(grads, *s, 1)[0] += ds;
            }
            Op::Relu(a) => {
                let xv = self.val(*a).data();
                for ((acc, &gv), &v) in accum(grads, *a, g.len()).iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *acc += gv;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                for ((acc, &gv), &yv) in accum(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *acc += gv * yv * (T::one() - yv);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                for ((acc, &gv), &yv) in accum(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *acc += gv * (T::one() - yv * yv);
                }
            }
            Op::Softmax { x, temperature } => {
                let y = node.value.data();
                let dot: T = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
                let inv_t = T::of(1.0 / temperature);
                for ((acc, &gv), &yv) in accum(grads, *x, g.len()).iter_mut().zip(g).zip(y) {
                    *acc += yv * (gv - dot) * inv_t;
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let total: T = g.iter().copied().sum();
                for ((acc, &gv), &yv) in accum(grads, *x, g.len()).iter_mut().zip(g).zip(y) {
                    *acc += gv - yv.exp() * total;
                }
            }
            Op::ClampedLog { x, floor } => {
                let f = T::of(*floor);
                let xv = self.val(*x).data();
                for ((acc, &gv), &v) in accum(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    if v >= f {
                        *acc += gv / v;
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.val(*a).numel();
                accum(grads, *a, n).iter_mut().for_each(|acc| *acc += g[0]);
            }
            Op::Mean(a) => {
                let n = self.val(*a).numel();
                let gv = g[0] / T::of(n as f64);
                accum(grads, *a, n).iter_mut().for_each(|acc| *acc += gv);
            }
            Op::Index { x, i } => {
                let n = self.val(*x).numel();
                accum(grads, *x, n)[*i] += g[0];
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).numel();
                    add_into(accum(grads, p, n), &g[off..off + n]);
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let n = self.val(*x).numel();
                add_into(&mut accum(grads, *x, n)[*start..*start + g.len()], g);
            }
            Op::Reshape(x) => add_into(accum(grads, *x, g.len()), g),
            Op::ModeProduct { core, vec, mode } => {
                let cv = self.val(*core);
                let vv = self.val(*vec);
                let (pre, len, post) =
                    kernels::mode_split(cv.shape(), vv.shape(), *mode).expect("checked in forward");
                let gc = accum(grads, *core, cv.numel());
                for p in 0..pre {
                    let go = &g[p * post..(p + 1) * post];
                    for (j, &vj) in vv.data().iter().enumerate() {
                        let row = &mut gc[(p * len + j) * post..(p * len + j + 1) * post];
                        for (acc, &gv) in row.iter_mut().zip(go) {
                            *acc += gv * vj;
                        }
                    }
                }
                let gvec = accum(grads, *vec, len);
                for p in 0..pre {
                    let go = &g[p * post..(p + 1) * post];
                    for (j, acc) in gvec.iter_mut().enumerate() {
                        let row = &cv.data()[(p * len + j) * post..(p * len + j + 1) * post];
                        *acc += row.iter().zip(go).map(|(&c, &gv)| c * gv).sum::<T>();
                    }
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let xv = self.val(*x);
                let wv = self.val(*w);
                let d = kernels::conv_dims(xv.shape(), wv.shape(), self.val(*b).shape(), geom)
                    .expect("checked in forward");
                let (c_in, c_out) = (d.c_in, d.c_out);
                let gb = accum(grads, *b, c_out);
                for go in g.chunks_exact(c_out) {
                    add_into(gb, go);
                }
                let mut gw = vec![T::zero(); wv.numel()];
                let mut gx = vec![T::zero(); xv.numel()];
                kernels::for_each_tap(&d, geom, |o_off, x_off, w_off| {
                    let go = &g[o_off..o_off + c_out];
                    for ci in 0..c_in {
                        let wrow = &wv.data()[w_off + ci * c_out..w_off + (ci + 1) * c_out];
                        gx[x_off + ci] += wrow.iter().zip(go).map(|(&a, &b)| a * b).sum::<T>();
                        let xval = xv.data()[x_off + ci];
                        if xval != T::zero() {
                            let grow = &mut gw[w_off + ci * c_out..w_off + (ci + 1) * c_out];
                            for (acc, &gv) in grow.iter_mut().zip(go) {
                                *acc += xval * gv;
                            }
                        }
                    }
                });
                add_into(accum(grads, *w, gw.len()), &gw);
                add_into(accum(grads, *x, gx.len()), &gx);
            }
            Op::MeanOverLeading(x) => {
                let xv = self.val(*x);
                let c = g.len();
                let inv = T::of(c as f64 / xv.numel() as f64);
                for row in accum(grads, *x, xv.numel()).chunks_exact_mut(c) {
                    for (acc, &gv) in row.iter_mut().zip(g) {
                        *acc += gv * inv;
                    }
                }
            }
            Op::Gather { table, row } => {
                let tv = self.val(*table);
                let d = tv.shape()[1];
                add_into(&mut accum(grads, *table, tv.numel())[row * d..(row + 1) * d], g);
            }
            Op::SumPool { x, window } => {
                let n = self.val(*x).numel();
                for (chunk, &gv) in accum(grads, *x, n).chunks_exact_mut(*window).zip(g) {
                    chunk.iter_mut().for_each(|acc| *acc += gv);
                }
            }
        }
    }
}

fn accum<T: Element>(grads: &mut [Option<Vec<T>>], i: usize, n: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Element>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to any recorded value; zero when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Parameter gradients in the order parameters were first read.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[T]>)> {
        self.params.iter().map(|&(id, i)| (id, self.grads[i].as_deref()))
    }

    /// `param.grad += dLoss/dParam` for every parameter read by the record.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.params() {
            if let Some(g) = g {
                add_into(store.get_mut(id).grad.data_mut(), g);
            }
        }
    }

    /// Like [`Self::accumulate_into`], scaling each gradient by `factor`.
    pub fn accumulate_scaled_into(&self, store: &mut ParamStore<T>, factor: f64) {
        let f = T::of(factor);
        for (id, g) in self.params() {
            if let Some(g) = g {
                for (acc, &gv) in store.get_mut(id).grad.data_mut().iter_mut().zip(g) {
                    *acc += gv * f;
                }
            }
        }
    }
}
