//! Tape-recorded tensor expressions with reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value produced during one forward
//! pass. Operations on [`Var`] handles append a node holding the forward
//! value and, when any input needs a gradient, a closure computing the
//! vector-Jacobian product. [`Graph::backward`] walks the nodes in reverse
//! creation order, which is a valid reverse topological order because a
//! node can only reference nodes created before it.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::sync::Arc;

use super::optim::ParameterStore;
use super::tensor::{gemm, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;
type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Accumulates parent gradients while a node's VJP runs.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    wants: &'a [bool],
    lens: &'a [usize],
}

impl GradSink<'_> {
    fn wants(&self, id: usize) -> bool {
        self.wants[id]
    }

    /// Runs `f` on the (zero-initialised if absent) gradient buffer of `id`.
    fn add_with(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.wants[id] {
            return;
        }
        let len = self.lens[id];
        let buf = self.grads[id].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn add_slice(&mut self, id: usize, g: &[f64]) {
        self.add_with(id, |buf| {
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        });
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.get_id(var.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<Tensor> {
        let g = self.grads.get(id)?.as_ref()?;
        Tensor::new(self.shapes[id].clone(), g.clone()).ok()
    }

    /// Parameter names read by the graph, with their node ids.
    pub fn params(&self) -> &[(String, usize)] {
        &self.params
    }

    /// Gradient of `var`, or zeros of its shape when it was unreachable.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

/// Recording context for one forward/backward pass.
pub struct Graph<'s> {
    nodes: RefCell<Vec<Node>>,
    store: Option<&'s ParameterStore>,
    params: RefCell<BTreeMap<String, usize>>,
    grad_enabled: bool,
    branches: Cell<u64>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// A graph without parameters; inputs created with [`Graph::input`] are
    /// differentiable.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            store: None,
            params: RefCell::new(BTreeMap::new()),
            grad_enabled: true,
            branches: Cell::new(0xcbf2_9ce4_8422_2325),
        }
    }

    /// A training graph reading parameters from `store`.
    pub fn with_store(store: &'s ParameterStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// A graph that records no backward closures.
    pub fn inference(store: &'s ParameterStore) -> Self {
        Self {
            store: Some(store),
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hash of every branch taken by piecewise ops (ReLU signs, max
    /// arguments) so far. Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches.get()
    }

    fn note_branches(&self, choices: impl Iterator<Item = u64>) {
        let mut h = self.branches.get();
        for c in choices {
            h = (h ^ c).wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.branches.set(h);
    }

    fn push(&self, value: Arc<Tensor>, requires_grad: bool, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Arc::new(value), false, None);
        Var { graph: self, id }
    }

    /// A leaf that receives a gradient when the graph records gradients.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Arc::new(value), self.grad_enabled, None);
        Var { graph: self, id }
    }

    /// The named parameter as a leaf; repeated lookups share one node.
    pub fn param(&self, name: &str) -> Result<Var<'_>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { graph: self, id });
        }
        let store = self
            .store
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?;
        let value = store.shared(name)?;
        let id = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value,
                requires_grad: self.grad_enabled,
                backward: None,
            });
            nodes.len() - 1
        };
        self.params.borrow_mut().insert(name.to_string(), id);
        Ok(Var { graph: self, id })
    }

    /// Parameter names touched by this graph with their node ids.
    pub fn param_nodes(&self) -> Vec<(String, usize)> {
        self.params
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record<V, F>(&self, value: V, parents: &[usize], backward: F) -> Var<'_>
    where
        V: Into<Arc<Tensor>>,
        F: Fn(&[f64], &mut GradSink<'_>) + 'static,
    {
        let requires = self.grad_enabled && parents.iter().any(|&p| self.requires(p));
        let id = self.push(value.into(), requires, Some(Box::new(backward)));
        Var { graph: self, id }
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(NumericsError::NotScalar(loss_value.shape().to_vec()));
        }
        let n = nodes.len();
        let wants: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let lens: Vec<usize> = nodes.iter().map(|n| n.value.numel()).collect();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            {
                let mut sink = GradSink {
                    grads: &mut grads,
                    wants: &wants,
                    lens: &lens,
                };
                backward(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes,
            params: self.param_nodes(),
        })
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph<'g>,
    id: usize,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Geometry of a strided 2D window scan, shared by convolution and its
/// transpose.
#[derive(Clone, Copy)]
struct Window {
    channels: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// `cols[(c,kh,kw),(oh,ow)] = src[c, oh*s - p + kh, ow*s - p + kw]`.
    fn im2col(&self, src: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut out = vec![0.0; self.rows() * cols];
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.in_h) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kx, self.in_w) {
                                dst[oy * self.out_w + ox] =
                                    src[(c * self.in_h + iy) * self.in_w + ix];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Window::im2col`]: scatter-adds columns back into `dst`.
    fn col2im(&self, cols_data: &[f64], dst: &mut [f64]) {
        let cols = self.cols();
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols_data[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.in_h) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kx, self.in_w) {
                                dst[(c * self.in_h + iy) * self.in_w + ix] +=
                                    src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<'g> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value as a plain scalar; only meaningful for single-element tensors.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn same_shape(&self, other: &Var<'g>, op: &'static str) -> Result<(Arc<Tensor>, Arc<Tensor>)> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(mismatch(op, a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    fn map_unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        let y = Arc::new(Tensor::new(x.shape().to_vec(), data).expect("same shape"));
        let y_saved = Arc::clone(&y);
        let xid = self.id;
        self.graph
            .record(Arc::clone(&y), &[xid], move |g, sink| {
                sink.add_with(xid, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * df(x.data()[i], y_saved.data()[i]);
                    }
                });
            })
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(&other, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let (ai, bi) = (self.id, other.id);
        Ok(self.graph.record(
            Tensor::new(a.shape().to_vec(), data)?,
            &[ai, bi],
            move |g, sink| {
                sink.add_slice(ai, g);
                sink.add_slice(bi, g);
            },
        ))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(&other, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let (ai, bi) = (self.id, other.id);
        Ok(self.graph.record(
            Tensor::new(a.shape().to_vec(), data)?,
            &[ai, bi],
            move |g, sink| {
                sink.add_slice(ai, g);
                sink.add_with(bi, |buf| {
                    for (b, v) in buf.iter_mut().zip(g) {
                        *b -= v;
                    }
                });
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(&other, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let (ai, bi) = (self.id, other.id);
        Ok(self.graph.record(
            Tensor::new(a.shape().to_vec(), data)?,
            &[ai, bi],
            move |g, sink| {
                sink.add_with(ai, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * b.data()[i];
                    }
                });
                sink.add_with(bi, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * a.data()[i];
                    }
                });
            },
        ))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(mismatch("mul_const", a.shape(), c.shape()));
        }
        let data = a.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let c = c.clone();
        let ai = self.id;
        Ok(self.graph.record(
            Tensor::new(a.shape().to_vec(), data)?,
            &[ai],
            move |g, sink| {
                sink.add_with(ai, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * c.data()[i];
                    }
                });
            },
        ))
    }

    /// Adds a vector along the last axis of `self`.
    pub fn add_row(self, bias: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let b = bias.value();
        let d = *x.shape().last().unwrap_or(&0);
        if b.numel() != d || b.rank() != 1 {
            return Err(mismatch("add_row", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let (xi, bi) = (self.id, bias.id);
        Ok(self.graph.record(
            Tensor::new(x.shape().to_vec(), data)?,
            &[xi, bi],
            move |g, sink| {
                sink.add_slice(xi, g);
                sink.add_with(bi, |buf| {
                    for row in g.chunks(d.max(1)) {
                        for (b, v) in buf.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                });
            },
        ))
    }

    /// `a·x + b` elementwise for scalars `a`, `b`.
    pub fn affine(self, a: f64, b: f64) -> Var<'g> {
        self.map_unary(move |x| a * x + b, move |_, _| a)
    }

    pub fn scale(self, a: f64) -> Var<'g> {
        self.affine(a, 0.0)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.map_unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.map_unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'g> {
        self.graph.note_branches(self.value().data().iter().map(|&x| (x > 0.0) as u64));
        self.map_unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let (ai, bi) = (self.id, other.id);
        Ok(self.graph.record(
            Tensor::new(vec![m, n], out)?,
            &[ai, bi],
            move |g, sink| {
                if sink.wants(ai) {
                    sink.add_with(ai, |buf| {
                        gemm(m, n, k, g, false, b.data(), true, buf, true);
                    });
                }
                if sink.wants(bi) {
                    sink.add_with(bi, |buf| {
                        gemm(k, m, n, a.data(), true, g, false, buf, true);
                    });
                }
            },
        ))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let a = self.value();
        let (r, c) = a.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        let ai = self.id;
        Ok(self
            .graph
            .record(Tensor::new(vec![c, r], out)?, &[ai], move |g, sink| {
                sink.add_with(ai, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let t = Tensor::clone(&a).reshaped(shape.to_vec())?;
        let ai = self.id;
        Ok(self
            .graph
            .record(t, &[ai], move |g, sink| sink.add_slice(ai, g)))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or(NumericsError::EmptyInput("concat"))?;
        let graph = first.graph;
        let values: Vec<Arc<Tensor>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let ids_c = ids.clone();
        Ok(graph.record(Tensor::new(shape, out)?, &ids, move |g, sink| {
            let mut offset = 0;
            for (pi, &pid) in ids_c.iter().enumerate() {
                let len = lens[pi] * inner;
                sink.add_with(pid, |buf| {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset..o * total * inner + offset + len];
                        for (b, v) in buf[o * len..(o + 1) * len].iter_mut().zip(src) {
                            *b += v;
                        }
                    }
                });
                offset += len;
            }
        }))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(mismatch("slice", &shape, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ai = self.id;
        Ok(self
            .graph
            .record(Tensor::new(new_shape, out)?, &[ai], move |g, sink| {
                sink.add_with(ai, |buf| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (b, v) in buf[base..base + len * inner].iter_mut().zip(src) {
                            *b += v;
                        }
                    }
                });
            }))
    }

    /// Row gather of a rank-2 tensor (embedding lookup).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let (r, c) = a.dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: r });
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&a.data()[i * c..(i + 1) * c]);
        }
        let idx = indices.to_vec();
        let ai = self.id;
        Ok(self.graph.record(
            Tensor::new(vec![indices.len(), c], out)?,
            &[ai],
            move |g, sink| {
                sink.add_with(ai, |buf| {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[i * c + j] += g[k * c + j];
                        }
                    }
                });
            },
        ))
    }

    /// Picks flat elements into a rank-1 tensor.
    pub fn gather_flat(self, indices: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let n = a.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: n });
        }
        let out = indices.iter().map(|&i| a.data()[i]).collect();
        let idx = indices.to_vec();
        let ai = self.id;
        Ok(self
            .graph
            .record(Tensor::from_vec(out), &[ai], move |g, sink| {
                sink.add_with(ai, |buf| {
                    for (k, &i) in idx.iter().enumerate() {
                        buf[i] += g[k];
                    }
                });
            }))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        if axis >= shape.len() {
            return Err(mismatch("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; a.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| a.data()[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (a.data()[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        let y = Arc::new(Tensor::new(shape.clone(), out)?);
        let ys = Arc::clone(&y);
        let ai = self.id;
        Ok(self
            .graph
            .record(Arc::clone(&y), &[ai], move |g, sink| {
                sink.add_with(ai, |buf| {
                    let y = ys.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                buf[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }))
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let d = *x.shape().last().ok_or(NumericsError::EmptyInput("layer_norm"))?;
        if gv.numel() != d || bv.numel() != d {
            return Err(mismatch("layer_norm", x.shape(), gv.shape()));
        }
        let rows = x.numel() / d.max(1);
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let (xi, gi, bi) = (self.id, gain.id, bias.id);
        Ok(self.graph.record(
            Tensor::new(x.shape().to_vec(), out)?,
            &[xi, gi, bi],
            move |g, sink| {
                sink.add_with(gi, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                sink.add_with(bi, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
                sink.add_with(xi, |buf| {
                    let n = d as f64;
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv.data()[j];
                            buf[r * d + j] +=
                                inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                });
            },
        ))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(mismatch("mean_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += a.data()[(o * len + l) * inner + i];
                }
            }
        }
        let scale = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let ai = self.id;
        Ok(self
            .graph
            .record(Tensor::new(new_shape, out)?, &[ai], move |g, sink| {
                sink.add_with(ai, |buf| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                buf[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }))
    }

    /// Maximum over `axis`, removing it; ties route the gradient to the
    /// lowest index.
    pub fn max_axis(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(mismatch("max_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = a.data()[(o * len + l) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = (o * len + l) * inner + i;
                    }
                }
            }
        }
        self.graph.note_branches(arg.iter().map(|&i| i as u64));
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let ai = self.id;
        Ok(self
            .graph
            .record(Tensor::new(new_shape, out)?, &[ai], move |g, sink| {
                sink.add_with(ai, |buf| {
                    for (k, &src) in arg.iter().enumerate() {
                        buf[src] += g[k];
                    }
                });
            }))
    }

    pub fn sum_all(self) -> Var<'g> {
        let a = self.value();
        let total: f64 = a.data().iter().sum();
        let ai = self.id;
        self.graph
            .record(Tensor::scalar(total), &[ai], move |g, sink| {
                let gv = g[0];
                sink.add_with(ai, |buf| buf.iter_mut().for_each(|b| *b += gv));
            })
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn row_normalize(self) -> Result<Var<'g>> {
        let x = self.value();
        let d = *x.shape().last().ok_or(NumericsError::EmptyInput("row_normalize"))?;
        let rows = x.numel() / d.max(1);
        let mut out = vec![0.0; x.numel()];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[r] = n;
            for j in 0..d {
                out[r * d + j] = row[j] / n;
            }
        }
        let y = Arc::new(Tensor::new(x.shape().to_vec(), out)?);
        let ys = Arc::clone(&y);
        let xi = self.id;
        Ok(self
            .graph
            .record(Arc::clone(&y), &[xi], move |g, sink| {
                sink.add_with(xi, |buf| {
                    let y = ys.data();
                    for r in 0..rows {
                        let dot: f64 = (0..d).map(|j| g[r * d + j] * y[r * d + j]).sum();
                        for j in 0..d {
                            buf[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / norms[r];
                        }
                    }
                });
            }))
    }

    /// 2D convolution of `x: B×C×H×W` with `weight: O×C×KH×KW`, `bias: O`.
    pub fn conv2d(self, weight: Var<'g>, bias: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let (&[bs, c, h, wd], &[o, wc, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(mismatch("conv2d", x.shape(), w.shape()));
        };
        if wc != c || b.numel() != o || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", x.shape(), w.shape()));
        }
        let win = Window {
            channels: c,
            in_h: h,
            in_w: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, cols) = (win.rows(), win.cols());
        let in_len = c * h * wd;
        let mut out = vec![0.0; bs * o * cols];
        let mut saved_cols = Vec::with_capacity(bs);
        for bi in 0..bs {
            let colm = win.im2col(&x.data()[bi * in_len..(bi + 1) * in_len]);
            let dst = &mut out[bi * o * cols..(bi + 1) * o * cols];
            gemm(o, rows, cols, w.data(), false, &colm, false, dst, false);
            for oc in 0..o {
                for v in &mut dst[oc * cols..(oc + 1) * cols] {
                    *v += b.data()[oc];
                }
            }
            saved_cols.push(colm);
        }
        let (xi, wi, bid) = (self.id, weight.id, bias.id);
        Ok(self.graph.record(
            Tensor::new(vec![bs, o, win.out_h, win.out_w], out)?,
            &[xi, wi, bid],
            move |g, sink| {
                sink.add_with(bid, |buf| {
                    for bi in 0..bs {
                        for oc in 0..o {
                            let base = (bi * o + oc) * cols;
                            buf[oc] += g[base..base + cols].iter().sum::<f64>();
                        }
                    }
                });
                if sink.wants(wi) {
                    sink.add_with(wi, |buf| {
                        for (bi, colm) in saved_cols.iter().enumerate() {
                            let gb = &g[bi * o * cols..(bi + 1) * o * cols];
                            gemm(o, cols, rows, gb, false, colm, true, buf, true);
                        }
                    });
                }
                if sink.wants(xi) {
                    sink.add_with(xi, |buf| {
                        let mut dcols = vec![0.0; rows * cols];
                        for bi in 0..bs {
                            let gb = &g[bi * o * cols..(bi + 1) * o * cols];
                            gemm(rows, o, cols, w.data(), true, gb, false, &mut dcols, false);
                            win.col2im(&dcols, &mut buf[bi * in_len..(bi + 1) * in_len]);
                        }
                    });
                }
            },
        ))
    }

    /// Transposed 2D convolution of `x: B×C×H×W` with `weight: C×O×K×K`.
    /// Output side is `(H-1)·stride - 2·pad + K`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g>,
        bias: Var<'g>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let (&[bs, c, h, wd], &[wc, o, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(mismatch("conv_transpose2d", x.shape(), w.shape()));
        };
        if wc != c || b.numel() != o || stride == 0 || h == 0 || wd == 0 {
            return Err(mismatch("conv_transpose2d", x.shape(), w.shape()));
        }
        let out_h = ((h - 1) * stride + kh)
            .checked_sub(2 * pad)
            .ok_or_else(|| mismatch("conv_transpose2d", x.shape(), w.shape()))?;
        let out_w = ((wd - 1) * stride + kw)
            .checked_sub(2 * pad)
            .ok_or_else(|| mismatch("conv_transpose2d", x.shape(), w.shape()))?;
        // The output grid scanned at input positions: the same window as a
        // forward convolution from the output back to the input.
        let win = Window {
            channels: o,
            in_h: out_h,
            in_w: out_w,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let (rows, cols) = (win.rows(), win.cols());
        let in_len = c * h * wd;
        let out_len = o * out_h * out_w;
        let mut out = vec![0.0; bs * out_len];
        let mut colm = vec![0.0; rows * cols];
        for bi in 0..bs {
            let xb = &x.data()[bi * in_len..(bi + 1) * in_len];
            gemm(rows, c, cols, w.data(), true, xb, false, &mut colm, false);
            let dst = &mut out[bi * out_len..(bi + 1) * out_len];
            win.col2im(&colm, dst);
            for oc in 0..o {
                for v in &mut dst[oc * out_h * out_w..(oc + 1) * out_h * out_w] {
                    *v += b.data()[oc];
                }
            }
        }
        let (xi, wi, bid) = (self.id, weight.id, bias.id);
        Ok(self.graph.record(
            Tensor::new(vec![bs, o, out_h, out_w], out)?,
            &[xi, wi, bid],
            move |g, sink| {
                let plane = out_h * out_w;
                sink.add_with(bid, |buf| {
                    for bi in 0..bs {
                        for oc in 0..o {
                            let base = bi * out_len + oc * plane;
                            buf[oc] += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                });
                let want_w = sink.wants(wi);
                let want_x = sink.wants(xi);
                if !want_w && !want_x {
                    return;
                }
                for bi in 0..bs {
                    let dcols = win.im2col(&g[bi * out_len..(bi + 1) * out_len]);
                    if want_w {
                        let xb = &x.data()[bi * in_len..(bi + 1) * in_len];
                        sink.add_with(wi, |buf| {
                            gemm(c, cols, rows, xb, false, &dcols, true, buf, true);
                        });
                    }
                    if want_x {
                        sink.add_with(xi, |buf| {
                            let dst = &mut buf[bi * in_len..(bi + 1) * in_len];
                            gemm(c, rows, cols, w.data(), false, &dcols, false, dst, true);
                        });
                    }
                }
            },
        ))
    }

    fn loss_against(
        self,
        target: &Tensor,
        op: &'static str,
        value: impl Fn(f64, f64) -> f64,
        deriv: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'g>> {
        let p = self.value();
        if p.shape() != target.shape() {
            return Err(mismatch(op, p.shape(), target.shape()));
        }
        let n = p.numel().max(1) as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| value(a, b))
            .sum();
        let t = target.clone();
        let pi = self.id;
        Ok(self
            .graph
            .record(Tensor::scalar(total / n), &[pi], move |g, sink| {
                let gv = g[0] / n;
                sink.add_with(pi, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gv * deriv(p.data()[i], t.data()[i]);
                    }
                });
            }))
    }

    /// Mean squared error against a constant target.
    pub fn mse(self, target: &Tensor) -> Result<Var<'g>> {
        self.loss_against(target, "mse", |a, b| (a - b) * (a - b), |a, b| 2.0 * (a - b))
    }

    /// Mean absolute error against a constant target.
    pub fn l1(self, target: &Tensor) -> Result<Var<'g>> {
        self.loss_against(
            target,
            "l1",
            |a, b| (a - b).abs(),
            |a, b| {
                let d = a - b;
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// Mean binary cross-entropy of probabilities, clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(self, target: &Tensor) -> Result<Var<'g>> {
        self.loss_against(
            target,
            "bce",
            |p, t| {
                let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            },
            |p, t| {
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                    return 0.0;
                }
                -t / p + (1.0 - t) / (1.0 - p)
            },
        )
    }
}

impl<'g> Var<'g> {
    /// Mean binary cross-entropy of `sigmoid(self)` against `target`,
    /// evaluated from the logits so saturated units keep their gradient.
    pub fn bce_with_logits(self, target: &Tensor) -> Result<Var<'g>> {
        self.loss_against(
            target,
            "bce_with_logits",
            |z, t| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p(),
            |z, t| sigmoid(z) - t,
        )
    }
}

/// Probability clamp applied inside [`Var::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
