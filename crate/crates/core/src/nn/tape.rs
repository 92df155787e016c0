//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order and the backward sweep simply walks them in reverse.

use super::{NnError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// Given the gradient of the loss with respect to the operation's output,
/// add the gradient with respect to each input that wants one.
pub trait Backward: Send + Sync {
    fn backward(&self, values: &Values<'_>, grad_out: &[f32], grads: &mut Grads<'_>);
}

impl<F> Backward for F
where
    F: Fn(&Values<'_>, &[f32], &mut Grads<'_>) + Send + Sync,
{
    fn backward(&self, values: &Values<'_>, grad_out: &[f32], grads: &mut Grads<'_>) {
        self(values, grad_out, grads)
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Box<dyn Backward>>,
    grad: Option<Vec<f32>>,
}

/// Read access to forward values during the backward sweep.
pub struct Values<'a> {
    nodes: &'a [Node],
}

impl Values<'_> {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }
}

/// Gradient accumulators for the backward sweep.
pub struct Grads<'a> {
    nodes: &'a [Node],
    slots: &'a mut [Option<Vec<f32>>],
}

impl Grads<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Zero-initialised accumulator for `v`, or `None` when `v` does not
    /// require a gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f32]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Adds `g` into the accumulator of `v`.
    pub fn add(&mut self, v: Var, g: &[f32]) {
        if let Some(s) = self.slot(v) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Recording tape: leaves require gradients and operations keep their
    /// backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Inference tape: values only, nothing is differentiable.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Option<Box<dyn Backward>>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let r = self.record;
        self.push(value, r, None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// Records the result of an operation on `inputs`. The backward closure
    /// is kept only if some input requires a gradient.
    pub fn push_op(&mut self, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Var {
        let requires = self.record && inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward>> = if requires { Some(Box::new(op)) } else { None };
        self.push(value, requires, op)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Back-propagates from a one-element `loss`, adding `∂loss/∂leaf` into
    /// every differentiable leaf's gradient. Calling it again without
    /// [`zero_grad`](Self::zero_grad) accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::NotOnTape(loss.0));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::NotScalar(self.nodes[loss.0].value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut slots: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        slots[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        {
            let nodes = &self.nodes[..=loss.0];
            for i in (0..=loss.0).rev() {
                let Some(g) = slots[i].take() else { continue };
                match &nodes[i].op {
                    Some(op) => {
                        let values = Values { nodes };
                        let mut grads = Grads {
                            nodes,
                            slots: &mut slots[..i],
                        };
                        op.backward(&values, &g, &mut grads);
                    }
                    None => leaf_grads.push((i, g)),
                }
            }
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32 + Send + Sync + 'static,
    ) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push_op(out, &[a], move |vals: &Values<'_>, g: &[f32], grads: &mut Grads<'_>| {
            let x = vals.get(a).data();
            if let Some(s) = grads.slot(a) {
                for i in 0..s.len() {
                    s[i] += g[i] * df(x[i], 0.0);
                }
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect(),
        )?;
        Ok(self.push_op(out, &[a, b], move |_: &Values<'_>, g: &[f32], grads: &mut Grads<'_>| {
            grads.add(a, g);
            grads.add(b, g);
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
        )?;
        Ok(self.push_op(out, &[a, b], move |vals: &Values<'_>, g: &[f32], grads: &mut Grads<'_>| {
            if let Some(s) = grads.slot(a) {
                let y = vals.get(b).data();
                s.iter_mut().zip(g).zip(y).for_each(|((s, g), y)| *s += g * y);
            }
            if let Some(s) = grads.slot(b) {
                let x = vals.get(a).data();
                s.iter_mut().zip(g).zip(x).for_each(|((s, g), x)| *s += g * x);
            }
        }))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, move |v| v * c, move |_, _| c)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |x, _| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        self.unary(
            a,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// Identity forward, no gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push_op(Tensor::scalar(total), &[a], move |_: &Values<'_>, g: &[f32], grads: &mut Grads<'_>| {
            if let Some(s) = grads.slot(a) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f32;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mse")?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let n = x.len();
        let total: f64 = x
            .iter()
            .zip(y)
            .map(|(p, q)| {
                let d = (p - q) as f64;
                d * d
            })
            .sum();
        let out = Tensor::scalar((total / n as f64) as f32);
        Ok(self.push_op(out, &[a, b], move |vals: &Values<'_>, g: &[f32], grads: &mut Grads<'_>| {
            let (x, y) = (vals.get(a).data(), vals.get(b).data());
            let c = 2.0 * g[0] / n as f32;
            if let Some(s) = grads.slot(a) {
                for i in 0..n {
                    s[i] += c * (x[i] - y[i]);
                }
            }
            if let Some(s) = grads.slot(b) {
                for i in 0..n {
                    s[i] -= c * (x[i] - y[i]);
                }
            }
        }))
    }

    /// `len` channels starting at `start` along the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let last = *shape.last().ok_or_else(|| NnError::ShapeMismatch("slice of a scalar".into()))?;
        if start + len > last || len == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "slice {start}..{} of axis with {last}",
                start + len
            )));
        }
        let rows = x.len() / last;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * last + start..r * last + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push_op(out, &[a], move |_: &Values<'_>, g: &[f32], grads: &mut Grads<'_>| {
            if let Some(s) = grads.slot(a) {
                for r in 0..rows {
                    for c in 0..len {
                        s[r * last + start + c] += g[r * len + c];
                    }
                }
            }
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NnError> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(out, &[a], move |_: &Values<'_>, g: &[f32], grads: &mut Grads<'_>| {
            grads.add(a, g);
        }))
    }
}

/// `ln(1 + eˣ)`, stable for large |x|.
pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
