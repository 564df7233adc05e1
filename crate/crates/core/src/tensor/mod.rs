//! Dense `f64` tensors with a tape-based reverse-mode autodiff engine.
//!
//! Values live in [`Tensor`]s. A forward pass copies the tensors it needs
//! onto a [`Tape`] (as trainable leaves or constants), composes [`Var`]
//! operations, and [`Tape::backward`] returns the gradients of a scalar
//! loss with respect to every leaf. [`Params::absorb`] writes those
//! gradients back into the `grad` slots that [`Sgd`] consumes.

mod gradcheck;
mod kernels;
mod optim;
mod tape;

pub use gradcheck::{check_gradients, finite_diff_grad, max_rel_error, rel_error};
pub use kernels::conv_output_size;
pub use optim::{cosine_lr, Sgd};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).unwrap()
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(&mut f).collect()).expect("from_fn: invalid shape")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of {} values",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Gathers rows `rows` along the leading axis into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        let row = self.numel() / n;
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= n {
                return Err(Error::Shape(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(&shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// An ordered collection of named tensors, the unit handed to the optimizer
/// and the checkpoint writer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its position.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.entries.push((name.into(), tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.tensors_mut().for_each(|t| t.set_requires_grad(on));
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor on `tape`, as a trainable leaf when the tensor
    /// requires grad and as a constant otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.entries.iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    /// Writes gradients for the vars returned by [`Params::bind`] into each
    /// trainable tensor's `grad`; tensors that did not participate get zeros.
    pub fn absorb(&mut self, grads: &Gradients, vars: &[Var<'_>]) {
        assert_eq!(vars.len(), self.entries.len());
        for ((_, t), v) in self.entries.iter_mut().zip(vars) {
            if !t.requires_grad() {
                continue;
            }
            let g = grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            t.grad = Some(g);
        }
    }

    pub fn bitwise_eq(&self, other: &Params) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape == b.shape
                    && a.data
                        .iter()
                        .zip(&b.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
