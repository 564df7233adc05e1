use std::cell::RefCell;
use std::ptr;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Scale(usize, f64),
    AddScalar(usize),
    ScaleBy { x: usize, s: usize },
    Conv2d { input: usize, weight: usize, geom: ConvGeom },
    Linear { x: usize, w: usize, b: usize, n: usize, d: usize, m: usize },
    /// `out_index[i]` is the output slot input element `i` reduces into.
    Reduce { x: usize, out_index: Vec<usize>, divisor: f64 },
    Softmax { x: usize, classes: usize },
    Reshape(usize),
    SelectRows { x: usize, rows: Vec<usize> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records operations in creation order, which is a topological order of
/// the computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Result of [`Tape::backward`]: `d(loss)/d(node)` for every node that
/// depends on a trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.numel()])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `t` as a leaf; trainable when `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.var(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.var(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Records `t` as a trainable leaf regardless of its flag.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.var(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn scalar(&self, value: f64, trainable: bool) -> Var<'_> {
        self.var(vec![1], vec![value], trainable)
    }

    fn var(&self, shape: Vec<usize>, value: Vec<f64>, trainable: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad: trainable,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var<'_>> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents(&op).iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`, visiting each recorded node once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !ptr::eq(self, loss.tape) {
            return Err(Error::Tape("loss was recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Arity(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].needs_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
        Op::Relu(x) | Op::Scale(x, _) | Op::AddScalar(x) | Op::Reshape(x) => vec![x],
        Op::ScaleBy { x, s } => vec![x, s],
        Op::Conv2d { input, weight, .. } => vec![input, weight],
        Op::Linear { x, w, b, .. } => vec![x, w, b],
        Op::Reduce { x, .. } | Op::Softmax { x, .. } | Op::SelectRows { x, .. } => vec![x],
        Op::CrossEntropy { logits, .. } => vec![logits],
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    delta(slot);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(grads, nodes, b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(grads, nodes, b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * vb[i];
                }
            });
            accumulate(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i];
                }
            });
        }
        Op::Relu(x) => {
            let vx = &nodes[x].value;
            accumulate(grads, nodes, x, |s| {
                for i in 0..s.len() {
                    if vx[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Scale(x, c) => {
            accumulate(grads, nodes, x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            accumulate(grads, nodes, x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::ScaleBy { x, s: sc } => {
            let c = nodes[sc].value[0];
            let vx = &nodes[x].value;
            accumulate(grads, nodes, x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
            accumulate(grads, nodes, sc, |s| {
                s[0] += vx.iter().zip(g).map(|(x, g)| x * g).sum::<f64>();
            });
        }
        Op::Conv2d { input, weight, ref geom } => {
            let (gi, gw) = kernels::conv2d_backward(
                geom,
                &nodes[input].value,
                &nodes[weight].value,
                g,
                nodes[input].needs_grad,
                nodes[weight].needs_grad,
            );
            if let Some(gi) = gi {
                accumulate(grads, nodes, input, |s| s.iter_mut().zip(&gi).for_each(|(s, g)| *s += g));
            }
            if let Some(gw) = gw {
                accumulate(grads, nodes, weight, |s| s.iter_mut().zip(&gw).for_each(|(s, g)| *s += g));
            }
        }
        Op::Linear { x, w, b, n, d, m } => {
            let (vx, vw) = (&nodes[x].value, &nodes[w].value);
            accumulate(grads, nodes, x, |s| {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for k in 0..d {
                        let wrow = &vw[k * m..(k + 1) * m];
                        s[i * d + k] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            });
            accumulate(grads, nodes, w, |s| {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for k in 0..d {
                        let xv = vx[i * d + k];
                        let srow = &mut s[k * m..(k + 1) * m];
                        srow.iter_mut().zip(grow).for_each(|(s, g)| *s += xv * g);
                    }
                }
            });
            accumulate(grads, nodes, b, |s| {
                for i in 0..n {
                    s.iter_mut().zip(&g[i * m..(i + 1) * m]).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::Reduce { x, ref out_index, divisor } => {
            accumulate(grads, nodes, x, |s| {
                for (slot, &o) in s.iter_mut().zip(out_index) {
                    *slot += g[o] / divisor;
                }
            });
        }
        Op::Softmax { x, classes } => {
            let y = &node.value;
            accumulate(grads, nodes, x, |s| {
                for r in 0..y.len() / classes {
                    let ys = &y[r * classes..(r + 1) * classes];
                    let gs = &g[r * classes..(r + 1) * classes];
                    let inner: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for c in 0..classes {
                        s[r * classes + c] += ys[c] * (gs[c] - inner);
                    }
                }
            });
        }
        Op::SelectRows { x, ref rows } => {
            let row = node.value.len() / rows.len().max(1);
            accumulate(grads, nodes, x, |s| {
                for (i, &r) in rows.iter().enumerate() {
                    s[r * row..(r + 1) * row]
                        .iter_mut()
                        .zip(&g[i * row..(i + 1) * row])
                        .for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::CrossEntropy { logits, ref labels, ref probs } => {
            let n = labels.len();
            let classes = probs.len() / n;
            accumulate(grads, nodes, logits, |s| {
                for (i, &y) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        s[i * classes + c] += g[0] * (probs[i * classes + c] - onehot) / n as f64;
                    }
                }
            });
        }
    }
}

fn softmax_rows(x: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("tape node holds a valid tensor")
    }

    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(nodes[self.id].value.len(), 1, "item() on non-scalar var");
        nodes[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Tape("operands recorded on different tapes".into()))
        }
    }

    fn binary(&self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "{name}: operand shapes {:?} and {:?} differ",
                    a.shape, b.shape
                )));
            }
            let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v)
        };
        self.tape.push(name, shape, value, op)
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.value.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(name, shape, value, op)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(*self)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| c * x, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| x + c, Op::AddScalar(self.id))
    }

    /// Multiplies every element by the one-element var `s`; differentiable
    /// in both.
    pub fn scale_by(&self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s)?;
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            if nodes[s.id].value.len() != 1 {
                return Err(Error::Shape(format!(
                    "scale_by expects a scalar factor, got shape {:?}",
                    nodes[s.id].shape
                )));
            }
            let c = nodes[s.id].value[0];
            let a = &nodes[self.id];
            (a.shape.clone(), a.value.iter().map(|x| c * x).collect())
        };
        self.tape.push("scale_by", shape, value, Op::ScaleBy { x: self.id, s: s.id })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if shape.iter().product::<usize>() != a.value.len() {
                return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", a.shape)));
            }
            a.value.clone()
        };
        self.tape.push("reshape", shape.to_vec(), value, Op::Reshape(self.id))
    }

    /// 2-d convolution of an `[N, C_in, H, W]` input with a
    /// `[C_out, C_in, k, k]` kernel.
    pub fn conv2d(&self, weight: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        let (geom, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id], &nodes[weight.id]);
            let geom = ConvGeom::new(&x.shape, &w.shape, stride, pad)?;
            (geom, kernels::conv2d_forward(&geom, &x.value, &w.value))
        };
        let shape = vec![geom.n, geom.c_out, geom.h_out, geom.w_out];
        self.tape.push(
            "conv2d",
            shape,
            value,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                geom,
            },
        )
    }

    /// `self[N,D] · weight[D,M] + bias[M]`.
    pub fn linear(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let (n, d, m, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            if x.shape.len() != 2 || w.shape.len() != 2 || x.shape[1] != w.shape[0] || b.shape != [w.shape[1]] {
                return Err(Error::Shape(format!(
                    "linear: input {:?}, weight {:?}, bias {:?} do not compose",
                    x.shape, w.shape, b.shape
                )));
            }
            let (n, d, m) = (x.shape[0], x.shape[1], w.shape[1]);
            (n, d, m, kernels::linear_forward(&x.value, &w.value, &b.value, n, d, m))
        };
        self.tape.push(
            "linear",
            vec![n, m],
            value,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.id,
                n,
                d,
                m,
            },
        )
    }

    fn reduce(&self, axes: Option<&[usize]>, mean: bool) -> Result<Var<'t>> {
        let (shape, value, out_index, divisor) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let rank = a.shape.len();
            let mut reduced = vec![false; rank];
            match axes {
                None => reduced.iter_mut().for_each(|r| *r = true),
                Some(axes) => {
                    for &ax in axes {
                        if ax >= rank || reduced[ax] {
                            return Err(Error::Axis(format!(
                                "axis {ax} invalid or repeated for shape {:?}",
                                a.shape
                            )));
                        }
                        reduced[ax] = true;
                    }
                }
            }
            let out_shape: Vec<usize> = a
                .shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect();
            let out_numel: usize = out_shape.iter().product();
            let count = (a.value.len() / out_numel) as f64;
            let mut out_index = Vec::with_capacity(a.value.len());
            let mut idx = vec![0usize; rank];
            for _ in 0..a.value.len() {
                let mut o = 0;
                for ax in 0..rank {
                    if !reduced[ax] {
                        o = o * a.shape[ax] + idx[ax];
                    }
                }
                out_index.push(o);
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    if idx[ax] < a.shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            let mut value = vec![0.0; out_numel];
            for (v, &o) in a.value.iter().zip(&out_index) {
                value[o] += v;
            }
            let divisor = if mean { count } else { 1.0 };
            if mean {
                value.iter_mut().for_each(|v| *v /= divisor);
            }
            let shape = if out_shape.is_empty() { vec![1] } else { out_shape };
            (shape, value, out_index, divisor)
        };
        self.tape.push(
            if mean { "mean" } else { "sum" },
            shape,
            value,
            Op::Reduce {
                x: self.id,
                out_index,
                divisor,
            },
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.reduce(None, false)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.reduce(None, true)
    }

    /// Sum over `axes`, dropping them from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Some(axes), false)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Some(axes), true)
    }

    /// Softmax over the last axis, computed after subtracting the row max.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let (shape, value, classes) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let classes = *a.shape.last().unwrap();
            if classes < 2 {
                return Err(Error::Arity(format!("softmax needs at least 2 classes, got {classes}")));
            }
            (a.shape.clone(), softmax_rows(&a.value, classes), classes)
        };
        self.tape.push("softmax", shape, value, Op::Softmax { x: self.id, classes })
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let t = self.value().select_rows(rows)?;
        let shape = t.shape().to_vec();
        self.tape.push(
            "select_rows",
            shape,
            t.into_data(),
            Op::SelectRows {
                x: self.id,
                rows: rows.to_vec(),
            },
        )
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (probs, loss) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 2 || a.shape[0] != labels.len() {
                return Err(Error::Shape(format!(
                    "cross_entropy: logits {:?} vs {} labels",
                    a.shape,
                    labels.len()
                )));
            }
            let classes = a.shape[1];
            if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                return Err(Error::Shape(format!("label {bad} out of range for {classes} classes")));
            }
            let probs = softmax_rows(&a.value, classes);
            let loss = a
                .value
                .chunks(classes)
                .zip(labels)
                .map(|(row, &y)| {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    lse - (row[y] - max)
                })
                .sum::<f64>()
                / labels.len() as f64;
            (probs, loss)
        };
        self.tape.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }
}
