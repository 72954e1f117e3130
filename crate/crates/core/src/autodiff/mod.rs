//! Reverse-mode differentiation over tensor-valued graphs.
//!
//! A [`Tape`] records each operation with its forward value. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse order and
//! accumulates adjoints into every node that depends on a trainable leaf.
//! The graph is static: there is no control-flow capture, a model is simply
//! unrolled onto a fresh tape per evaluation.

pub mod check;
pub mod kernels;
mod tensor;

use crate::error::{DriftError, Result};
use crate::grid::{min_image, GridSpec};

pub use kernels::Readout;
pub use tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    SumLast(Var),
    Norm2(Var),
    PeriodicDiff { a: Var, b: Var },
    Reshape(Var),
    Transpose2(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var },
    Softmax { x: Var, temperature: f64 },
    SoftArgmax { p: Var, spec: GridSpec, readout: Readout },
    Wrap(Var),
    Upwind { p: Var, u: Var, v: Var, courant: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` depends on a trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> DriftError {
    DriftError::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; gradients are tracked only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn zip_op(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(name, &ta.shape, &tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape.clone(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    fn map_op(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape.clone(), tx.data.iter().map(|v| f(*v)).collect());
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_op(x, |v| s * v, Op::Scale(x, s))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map_op(x, |v| if v >= 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_op(x, f64::tanh, Op::Tanh(x))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let last = *tx.shape.last().unwrap_or(&1);
        let shape = tx.shape[..tx.rank().saturating_sub(1)].to_vec();
        let data = tx.data.chunks(last).map(|c| c.iter().sum()).collect();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data), Op::SumLast(x), ng)
    }

    /// Euclidean norm over a trailing axis of length 2. The derivative at the
    /// origin is taken as zero.
    pub fn norm2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape.last() != Some(&2) {
            return Err(DriftError::ShapeMismatch(format!("norm2 expects (..., 2), got {:?}", tx.shape)));
        }
        let shape = tx.shape[..tx.rank() - 1].to_vec();
        let data = tx.data.chunks(2).map(|c| c[0].hypot(c[1])).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data), Op::Norm2(x), ng))
    }

    /// Minimum-image difference `a - b` of `(..., 2)` coordinates under the
    /// given periods.
    pub fn periodic_diff(&mut self, a: Var, b: Var, periods: [f64; 2]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape || ta.shape.last() != Some(&2) {
            return Err(mismatch("periodic_diff", &ta.shape, &tb.shape));
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .enumerate()
            .map(|(i, (x, y))| min_image(x - y, periods[i % 2]))
            .collect();
        let value = Tensor::new(ta.shape.clone(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::PeriodicDiff { a, b }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(mismatch("reshape", &tx.shape, shape));
        }
        let value = Tensor::new(shape.to_vec(), tx.data.clone());
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(DriftError::ShapeMismatch(format!("transpose expects rank 2, got {:?}", tx.shape)));
        }
        let (r, c) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = tx.data[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![c, r], data), Op::Transpose2(x), ng))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*inputs.first().ok_or_else(|| DriftError::ShapeMismatch("concat of nothing".into()))?)
            .shape
            .clone();
        if axis >= first.len() {
            return Err(DriftError::ShapeMismatch(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let n = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = inputs.iter().any(|v| self.ng(*v));
        Ok(self.push(
            Tensor::new(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut expanded = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(v));
            expanded.push(self.reshape(v, &s)?);
        }
        self.concat(&expanded, 0)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(DriftError::ShapeMismatch(format!(
                "slice {start}..{} of axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let tx = self.value(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&tx.data[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(out_shape, data), Op::Slice { x, axis, start }, ng))
    }

    /// Entry `index` of the leading axis, with that axis removed.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.slice(x, 0, index, 1)?;
        let shape = self.shape(s)[1..].to_vec();
        self.reshape(s, &shape)
    }

    /// 3x3 periodic cross-correlation. `x`: `(..., C_in, ny, nx)`,
    /// `w`: `(C_out, C_in, 3, 3)`, `b`: `(C_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() < 3 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != sx[sx.len() - 3] || sb != [sw[0]] {
            return Err(DriftError::ShapeMismatch(format!(
                "conv2d: x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let r = sx.len();
        let (cin, ny, nx) = (sx[r - 3], sx[r - 2], sx[r - 1]);
        let cout = sw[0];
        let nb: usize = sx[..r - 3].iter().product();
        let mut shape = sx.to_vec();
        shape[r - 3] = cout;
        let data = kernels::conv2d_forward(
            &self.value(x).data,
            &self.value(w).data,
            &self.value(b).data,
            nb,
            cin,
            cout,
            ny,
            nx,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data), Op::Conv2d { x, w, b }, ng))
    }

    /// Kernel-3 cross-correlation over the last (time) axis with replication
    /// padding. `x`: `(..., C_in, K)`, `w`: `(C_out, C_in, 3)`, `b`: `(C_out)`.
    pub fn conv1d_time(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() < 2 || sw.len() != 3 || sw[2] != 3 || sw[1] != sx[sx.len() - 2] || sb != [sw[0]] {
            return Err(DriftError::ShapeMismatch(format!(
                "conv1d_time: x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let r = sx.len();
        let (cin, k) = (sx[r - 2], sx[r - 1]);
        let cout = sw[0];
        let nb: usize = sx[..r - 2].iter().product();
        let mut shape = sx.to_vec();
        shape[r - 2] = cout;
        let data = kernels::conv1d_forward(
            &self.value(x).data,
            &self.value(w).data,
            &self.value(b).data,
            nb,
            cin,
            cout,
            k,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data), Op::Conv1d { x, w, b }, ng))
    }

    /// Softmax over the last two axes of `x / temperature`.
    pub fn spatial_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 2 || !(temperature > 0.0) {
            return Err(DriftError::InvalidArgument(format!(
                "spatial_softmax needs rank >= 2 and temperature > 0 (shape {:?}, temperature {temperature})",
                tx.shape
            )));
        }
        let block = tx.shape[tx.rank() - 2] * tx.shape[tx.rank() - 1];
        let value = Tensor::new(tx.shape.clone(), kernels::softmax_blocks(&tx.data, block, temperature));
        let ng = self.ng(x);
        Ok(self.push(value, Op::Softmax { x, temperature }, ng))
    }

    /// Reduces `(..., ny, nx)` probability maps to `(..., 2)` positions.
    pub fn soft_argmax(&mut self, p: Var, spec: &GridSpec, readout: Readout) -> Result<Var> {
        let tp = self.value(p);
        let r = tp.rank();
        if r < 2 || tp.shape[r - 2] != spec.ny || tp.shape[r - 1] != spec.nx {
            return Err(DriftError::ShapeMismatch(format!(
                "soft_argmax: map {:?} vs grid {}x{}",
                tp.shape, spec.ny, spec.nx
            )));
        }
        let mut data = Vec::new();
        for m in tp.data.chunks(spec.cells()) {
            let (x, y) = kernels::soft_argmax(m, spec, readout);
            data.push(x);
            data.push(y);
        }
        let mut shape = tp.shape[..r - 2].to_vec();
        shape.push(2);
        let ng = self.ng(p);
        Ok(self.push(
            Tensor::new(shape, data),
            Op::SoftArgmax {
                p,
                spec: *spec,
                readout,
            },
            ng,
        ))
    }

    /// Wraps `(..., 2)` positions into the grid domain; the derivative is the
    /// identity.
    pub fn wrap_positions(&mut self, x: Var, spec: &GridSpec) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape.last() != Some(&2) {
            return Err(DriftError::ShapeMismatch(format!("wrap expects (..., 2), got {:?}", tx.shape)));
        }
        let mut data = tx.data.clone();
        for c in data.chunks_mut(2) {
            let (a, b) = spec.wrap((c[0], c[1]));
            c[0] = a;
            c[1] = b;
        }
        let value = Tensor::new(tx.shape.clone(), data);
        let ng = self.ng(x);
        Ok(self.push(value, Op::Wrap(x), ng))
    }

    /// One conservative upwind transport step of the `(ny, nx)` mass map `p`
    /// under cell-centered velocities `u`, `v`; `courant = dt / h`.
    pub fn upwind_step(&mut self, p: Var, u: Var, v: Var, courant: f64) -> Result<Var> {
        let (sp, su, sv) = (self.shape(p), self.shape(u), self.shape(v));
        if sp.len() != 2 || sp != su || sp != sv {
            return Err(DriftError::ShapeMismatch(format!("upwind_step: p {sp:?}, u {su:?}, v {sv:?}")));
        }
        let (ny, nx) = (sp[0], sp[1]);
        let data = kernels::upwind_step(
            &self.value(p).data,
            &self.value(u).data,
            &self.value(v).data,
            ny,
            nx,
            courant,
        );
        let ng = self.ng(p) || self.ng(u) || self.ng(v);
        Ok(self.push(Tensor::new(vec![ny, nx], data), Op::Upwind { p, u, v, courant }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(DriftError::ShapeMismatch(format!("backward needs a scalar loss, got {:?}", lv.shape)));
        }
        if !lv.item().is_finite() {
            return Err(DriftError::NonFiniteLoss {
                context: format!("backward (loss = {})", lv.item()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&lv.shape, 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Intermediate adjoints are kept; callers usually query leaves only.
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(&self.nodes[v.0].value.shape));
        f(g);
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *b, |gb| gb.data.iter_mut().zip(&g.data).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                self.accumulate(grads, *a, |ga| {
                    for ((x, d), w) in ga.data.iter_mut().zip(&g.data).zip(vb) {
                        *x += d * w;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((x, d), w) in gb.data.iter_mut().zip(&g.data).zip(va) {
                        *x += d * w;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| ga.data.iter_mut().zip(&g.data).for_each(|(x, d)| *x += s * d));
            }
            Op::LeakyRelu(a, slope) => {
                let va = &self.value(*a).data;
                self.accumulate(grads, *a, |ga| {
                    for ((x, d), v) in ga.data.iter_mut().zip(&g.data).zip(va) {
                        *x += if *v >= 0.0 { *d } else { slope * d };
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((x, d), s) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *x += d * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((x, d), t) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *x += d * (1.0 - t * t);
                    }
                });
            }
            Op::Sum(a) => {
                let d = g.item();
                self.accumulate(grads, *a, |ga| ga.data.iter_mut().for_each(|x| *x += d));
            }
            Op::SumLast(a) => {
                let last = *self.shape(*a).last().unwrap_or(&1);
                self.accumulate(grads, *a, |ga| {
                    for (chunk, d) in ga.data.chunks_mut(last).zip(&g.data) {
                        chunk.iter_mut().for_each(|x| *x += d);
                    }
                });
            }
            Op::Norm2(a) => {
                let va = &self.value(*a).data;
                self.accumulate(grads, *a, |ga| {
                    for ((gc, vc), (d, n)) in ga.data.chunks_mut(2).zip(va.chunks(2)).zip(g.data.iter().zip(&y.data)) {
                        if *n > 0.0 {
                            gc[0] += d * vc[0] / n;
                            gc[1] += d * vc[1] / n;
                        }
                    }
                });
            }
            Op::PeriodicDiff { a, b } => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *b, |gb| gb.data.iter_mut().zip(&g.data).for_each(|(x, d)| *x -= d));
            }
            Op::Reshape(a) | Op::Wrap(a) => {
                self.accumulate(grads, *a, |ga| ga.data.iter_mut().zip(&g.data).for_each(|(x, d)| *x += d));
            }
            Op::Transpose2(a) => {
                let (r, c) = (y.shape[1], y.shape[0]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga.data[i * c + j] += g.data[j * r + i];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let outer: usize = y.shape[..axis].iter().product();
                let inner: usize = y.shape[axis + 1..].iter().product();
                let total = y.shape[axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[axis] * inner;
                    self.accumulate(grads, v, |gv| {
                        for o in 0..outer {
                            let src = &g.data[o * total + offset..o * total + offset + n];
                            gv.data[o * n..(o + 1) * n].iter_mut().zip(src).for_each(|(x, d)| *x += d);
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x).to_vec();
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let len = y.shape[*axis] * inner;
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        let base = (o * sx[*axis] + start) * inner;
                        gx.data[base..base + len]
                            .iter_mut()
                            .zip(&g.data[o * len..(o + 1) * len])
                            .for_each(|(a, d)| *a += d);
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let sx = self.shape(*x).to_vec();
                let r = sx.len();
                let (cin, ny, nx) = (sx[r - 3], sx[r - 2], sx[r - 1]);
                let cout = self.shape(*w)[0];
                let nb: usize = sx[..r - 3].iter().product();
                let mut gx = self.ng(*x).then(|| Tensor::zeros(&sx));
                let mut gw = self.ng(*w).then(|| Tensor::zeros(self.shape(*w)));
                let mut gb = self.ng(*b).then(|| Tensor::zeros(self.shape(*b)));
                kernels::conv2d_backward(
                    &self.value(*x).data,
                    &self.value(*w).data,
                    &g.data,
                    nb,
                    cin,
                    cout,
                    ny,
                    nx,
                    gx.as_mut().map(|t| t.data.as_mut_slice()),
                    gw.as_mut().map(|t| t.data.as_mut_slice()),
                    gb.as_mut().map(|t| t.data.as_mut_slice()),
                );
                for (v, t) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(t) = t {
                        self.accumulate(grads, v, |acc| acc.add_assign(&t));
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let sx = self.shape(*x).to_vec();
                let r = sx.len();
                let (cin, k) = (sx[r - 2], sx[r - 1]);
                let cout = self.shape(*w)[0];
                let nb: usize = sx[..r - 2].iter().product();
                let mut gx = self.ng(*x).then(|| Tensor::zeros(&sx));
                let mut gw = self.ng(*w).then(|| Tensor::zeros(self.shape(*w)));
                let mut gb = self.ng(*b).then(|| Tensor::zeros(self.shape(*b)));
                kernels::conv1d_backward(
                    &self.value(*x).data,
                    &self.value(*w).data,
                    &g.data,
                    nb,
                    cin,
                    cout,
                    k,
                    gx.as_mut().map(|t| t.data.as_mut_slice()),
                    gw.as_mut().map(|t| t.data.as_mut_slice()),
                    gb.as_mut().map(|t| t.data.as_mut_slice()),
                );
                for (v, t) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(t) = t {
                        self.accumulate(grads, v, |acc| acc.add_assign(&t));
                    }
                }
            }
            Op::Softmax { x, temperature } => {
                let block = y.shape[y.rank() - 2] * y.shape[y.rank() - 1];
                self.accumulate(grads, *x, |gx| {
                    kernels::softmax_blocks_backward(&y.data, &g.data, block, *temperature, &mut gx.data)
                });
            }
            Op::SoftArgmax { p, spec, readout } => {
                let vp = &self.value(*p).data;
                let n = spec.cells();
                self.accumulate(grads, *p, |gp| {
                    for (i, (m, gm)) in vp.chunks(n).zip(gp.data.chunks_mut(n)).enumerate() {
                        kernels::soft_argmax_backward(m, spec, *readout, (g.data[2 * i], g.data[2 * i + 1]), gm);
                    }
                });
            }
            Op::Upwind { p, u, v, courant } => {
                let (ny, nx) = (y.shape[0], y.shape[1]);
                let mut gp = self.ng(*p).then(|| Tensor::zeros(&[ny, nx]));
                let mut gu = self.ng(*u).then(|| Tensor::zeros(&[ny, nx]));
                let mut gv = self.ng(*v).then(|| Tensor::zeros(&[ny, nx]));
                kernels::upwind_step_backward(
                    &self.value(*p).data,
                    &self.value(*u).data,
                    &self.value(*v).data,
                    ny,
                    nx,
                    *courant,
                    &g.data,
                    gp.as_mut().map(|t| t.data.as_mut_slice()),
                    gu.as_mut().map(|t| t.data.as_mut_slice()),
                    gv.as_mut().map(|t| t.data.as_mut_slice()),
                );
                for (var, t) in [(*p, gp), (*u, gu), (*v, gv)] {
                    if let Some(t) = t {
                        self.accumulate(grads, var, |acc| acc.add_assign(&t));
                    }
                }
            }
        }
    }
}

/// Weights of a convolutional LSTM cell: one 3x3 convolution producing the
/// input, forget, output and candidate pre-activations (in that channel order)
/// from `concat(x, h_prev)`.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmWeights {
    /// `(4 * hidden, C_in + hidden, 3, 3)`
    pub w: Var,
    /// `(4 * hidden)`
    pub b: Var,
}

/// One ConvLSTM step on `(C, ny, nx)` states: sigmoid gates, tanh candidate,
/// `c = f * c_prev + i * g`, `h = o * tanh(c)`.
pub fn conv_lstm_cell(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, weights: ConvLstmWeights) -> Result<(Var, Var)> {
    let hidden = tape.shape(h_prev)[0];
    if tape.shape(c_prev) != tape.shape(h_prev) || tape.shape(x)[1..] != tape.shape(h_prev)[1..] {
        return Err(DriftError::ShapeMismatch(format!(
            "conv_lstm_cell: x {:?}, h {:?}, c {:?}",
            tape.shape(x),
            tape.shape(h_prev),
            tape.shape(c_prev)
        )));
    }
    let xh = tape.concat(&[x, h_prev], 0)?;
    let gates = tape.conv2d(xh, weights.w, weights.b)?;
    if tape.shape(gates)[0] != 4 * hidden {
        return Err(DriftError::ShapeMismatch(format!(
            "conv_lstm_cell: gate channels {} != 4 x hidden {}",
            tape.shape(gates)[0],
            hidden
        )));
    }
    let i_pre = tape.slice(gates, 0, 0, hidden)?;
    let f_pre = tape.slice(gates, 0, hidden, hidden)?;
    let o_pre = tape.slice(gates, 0, 2 * hidden, hidden)?;
    let g_pre = tape.slice(gates, 0, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let o = tape.sigmoid(o_pre);
    let g = tape.tanh(g_pre);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[2.0, -2.0]));
        let y = tape.leaky_relu(x, 0.1);
        assert_eq!(tape.value(y).data, vec![2.0, -0.2]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![1.0, 0.1]);
    }

    #[test]
    fn sum_and_half_square() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data, vec![1.0; 3]);
        let sq = tape.mul(x, x).unwrap();
        let ss = tape.sum(sq);
        let half = tape.scale(ss, 0.5);
        assert_eq!(tape.backward(half).unwrap().get(x).unwrap().data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.add(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_bad_loss() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(DriftError::ShapeMismatch(_))));
        let n = tape.param(Tensor::scalar(f64::NAN));
        assert!(matches!(tape.backward(n), Err(DriftError::NonFiniteLoss { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[5.0, 6.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data, vec![5.0, 6.0]);
    }

    #[test]
    fn conv2d_identity_and_constant() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let x = tape.constant(t(&[2, 5, 5], &data));
        let mut w = vec![0.0; 2 * 2 * 9];
        w[4] = 1.0; // out 0 <- in 0 center
        w[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 center
        let w = tape.constant(t(&[2, 2, 3, 3], &w));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).data, data);

        let ones = tape.constant(Tensor::full(&[3, 4, 6], 1.0));
        let w = tape.constant(Tensor::full(&[2, 3, 3, 3], 0.5));
        let b = tape.constant(t(&[2], &[0.25, -1.0]));
        let y = tape.conv2d(ones, w, b).unwrap();
        let v = &tape.value(y).data;
        assert!(v[..24].iter().all(|x| (x - (4.5 * 3.0 + 0.25)).abs() < 1e-12));
        assert!(v[24..].iter().all(|x| (x - (4.5 * 3.0 - 1.0)).abs() < 1e-12));
    }

    #[test]
    fn conv2d_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.conv2d(x, w, b).is_err());
        let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.conv2d(x, w, b2).is_err());
    }

    #[test]
    fn conv1d_identity_and_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d_time(x, w, b).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);
        // Replication padding: left tap sees x[0] at t = 0.
        let w = tape.constant(t(&[1, 1, 3], &[1.0, 0.0, 0.0]));
        let y = tape.conv1d_time(x, w, b).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 1.0, 2.0, 3.0]);
        let ones = tape.constant(Tensor::full(&[2, 5], 1.0));
        let w = tape.constant(Tensor::full(&[3, 2, 3], 0.5));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.conv1d_time(ones, w, b).unwrap();
        assert_eq!(tape.shape(y), &[3, 5]);
        assert_eq!(tape.value(y).data[5], 1.5 * 2.0 + 2.0);
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 5], 3.0));
        let p = tape.spatial_softmax(x, 0.7).unwrap();
        assert!(tape.value(p).data.iter().all(|v| (v - 0.05).abs() < 1e-15));
        let mut d = vec![0.0; 20];
        d[7] = 50.0 * 0.5;
        let x = tape.constant(t(&[4, 5], &d));
        let p = tape.spatial_softmax(x, 0.5).unwrap();
        assert!(tape.value(p).data[7] > 1.0 - 1e-9);
        let total: f64 = tape.value(p).data.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(tape.spatial_softmax(x, 0.0).is_err());
    }

    #[test]
    fn soft_argmax_conventions() {
        let spec = GridSpec::new(6, 4, 2.0, 1.0, 1).unwrap().with_origin(1.0, -1.0);
        let mut tape = Tape::new();
        let mut d = vec![0.0; 24];
        d[2 * 6 + 4] = 1.0;
        let p = tape.constant(t(&[4, 6], &d));
        let r = tape.soft_argmax(p, &spec, Readout::Circular).unwrap();
        let v = &tape.value(r).data;
        let c = spec.cell_center(2, 4);
        assert!((v[0] - c.0).abs() < 1e-12 && (v[1] - c.1).abs() < 1e-12);
        let u = tape.constant(Tensor::full(&[4, 6], 1.0 / 24.0));
        let r = tape.soft_argmax(u, &spec, Readout::Circular).unwrap();
        assert_eq!(tape.value(r).data, vec![1.0, -1.0]);
        let r = tape.soft_argmax(p, &spec, Readout::Anchored { anchor: c }).unwrap();
        assert_eq!(tape.value(r).data, vec![c.0, c.1]);
    }

    #[test]
    fn concat_slice_stack_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.param(t(&[2, 1], &[7., 8.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data, vec![1., 2., 3., 7., 4., 5., 6., 8.]);
        let s = tape.slice(c, 1, 2, 2).unwrap();
        assert_eq!(tape.value(s).data, vec![3., 7., 6., 8.]);
        let st = tape.stack(&[s, s]).unwrap();
        assert_eq!(tape.shape(st), &[2, 2, 2]);
        let tr = tape.transpose(a).unwrap();
        assert_eq!(tape.value(tr).data, vec![1., 4., 2., 5., 3., 6.]);
        let l = tape.sum(st);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data, vec![0., 0., 2., 0., 0., 2.]);
        assert_eq!(g.get(b).unwrap().data, vec![2., 2.]);
    }

    #[test]
    fn lstm_zero_parameters_give_zero_state() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 4, 4], 0.7));
        let h = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let c = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.param(Tensor::zeros(&[8, 5, 3, 3]));
        let b = tape.param(Tensor::zeros(&[8]));
        let (h1, c1) = conv_lstm_cell(&mut tape, x, h, c, ConvLstmWeights { w, b }).unwrap();
        assert!(tape.value(h1).data.iter().all(|v| *v == 0.0));
        assert!(tape.value(c1).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn upwind_conserves_mass() {
        let mut tape = Tape::new();
        let mut p = vec![0.0; 16];
        p[5] = 1.0;
        let p = tape.constant(t(&[4, 4], &p));
        let u = tape.constant(Tensor::full(&[4, 4], 1.0));
        let v = tape.constant(Tensor::full(&[4, 4], -0.5));
        let q = tape.upwind_step(p, u, v, 0.4).unwrap();
        let vals = &tape.value(q).data;
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(vals.iter().all(|x| *x >= 0.0));
        assert!((vals[6] - 0.4).abs() < 1e-15);
        assert!((vals[1] - 0.2).abs() < 1e-15);
    }
}
