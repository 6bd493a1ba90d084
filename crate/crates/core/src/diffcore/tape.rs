//! Wengert-list reverse mode.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! its backward rule. Nodes are only ever appended, so each node's inputs
//! precede it and a single reverse sweep is a valid topological order.

use std::sync::Arc;

use super::conv::{conv2d, conv2d_backward};
use super::{Scalar, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Constant,
    Param,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
        mask: Option<Tensor<T>>,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Scale(Var, T),
    Sqrt(Var),
    MeanAbs(Var, Var),
    MeanSq(Var, Var),
    StopGradient,
    Gather { src: Var, index: Arc<[usize]> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Turns the per-op finiteness check on or off (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
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

    /// Records a value that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    /// Records a leaf whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Param, true)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(invalid!("variable {} is not on this tape", v.0));
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
        mask: Option<Tensor<T>>,
    ) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        let value = conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            dilation,
            mask.as_ref(),
        )?;
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            dilation,
            mask,
        };
        self.push("conv2d", value, op, &[input, kernel, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Concatenates two `[B, C, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = ta.dims4()?;
        let (n2, cb, h2, w2) = tb.dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(shape_err!("concat {:?} with {:?}", ta.shape(), tb.shape()));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * la..(i + 1) * la]);
            data.extend_from_slice(&tb.data()[i * lb..(i + 1) * lb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], data)?;
        self.push("concat", value, Op::Concat(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    /// Elementwise square root. Its derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(invalid!("sqrt of a negative value"));
        }
        let value = self.value(x).map(|v| v.sqrt());
        self.push("sqrt", value, Op::Sqrt(x), &[x])
    }

    /// `(1/n) * sum |a - b|` as a rank-0 tensor.
    pub fn mean_abs(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape(tb)?;
        let n = T::from_usize(ta.len()).unwrap();
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        self.push("mean_abs", Tensor::scalar(s / n), Op::MeanAbs(a, b), &[a, b])
    }

    /// `(1/n) * sum (a - b)^2` as a rank-0 tensor.
    pub fn mean_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape(tb)?;
        let n = T::from_usize(ta.len()).unwrap();
        let s: T = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push("mean_sq", Tensor::scalar(s / n), Op::MeanSq(a, b), &[a, b])
    }

    /// Identity forward; nothing upstream of the result receives gradient through it.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone();
        Ok(self.push_raw(value, Op::StopGradient, false))
    }

    /// `out.data[o] = src.data[index[o]]`, reshaped to `shape`.
    pub fn gather(&mut self, src: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        self.check(src)?;
        let s = self.value(src);
        if index.len() != shape.iter().product::<usize>() {
            return Err(shape_err!("{} indices for shape {:?}", index.len(), shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s.len()) {
            return Err(shape_err!("gather index {} out of range {}", bad, s.len()));
        }
        let data = index.iter().map(|&i| s.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("gather", value, Op::Gather { src, index }, &[src])
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = (match node.op {
                Op::Param => continue,
                _ => grads[i].take(),
            }) else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param))
            .map(|(i, n)| {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (Var(i), g)
            })
            .collect();
        Ok(Gradients { params })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Constant | Op::Param | Op::StopGradient => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                dilation,
                mask,
            } => {
                let cg = conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    *dilation,
                    mask.as_ref(),
                    g,
                    wants(*input),
                )?;
                if let Some(gi) = cg.input {
                    accumulate(grads, *input, gi)?;
                }
                if wants(*kernel) {
                    accumulate(grads, *kernel, cg.kernel)?;
                }
                if wants(*bias) {
                    accumulate(grads, *bias, cg.bias)?;
                }
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() })?;
                accumulate(grads, *x, gx)?;
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).dims4()?.1;
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * la);
                let mut gb = Vec::with_capacity(n * lb);
                for item in g.data().chunks(la + lb) {
                    ga.extend_from_slice(&item[..la]);
                    gb.extend_from_slice(&item[la..]);
                }
                if wants(*a) {
                    accumulate(grads, *a, Tensor::new(&[n, ca, h, w], ga)?)?;
                }
                if wants(*b) {
                    accumulate(grads, *b, Tensor::new(&[n, cb, h, w], gb)?)?;
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.map(|v| v * *s))?,
            Op::Sqrt(x) => {
                let two = T::one() + T::one();
                let gx = node.value.zip_map(g, |r, gv| {
                    if r > T::zero() {
                        gv / (two * r)
                    } else {
                        T::zero()
                    }
                })?;
                accumulate(grads, *x, gx)?;
            }
            Op::MeanAbs(a, b) | Op::MeanSq(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = T::from_usize(ta.len()).unwrap();
                let upstream = g.item()?;
                let two = T::one() + T::one();
                let is_abs = matches!(node.op, Op::MeanAbs(..));
                let ga = ta.zip_map(tb, |x, y| {
                    let d = if is_abs { sign(x - y) } else { two * (x - y) };
                    upstream * d / n
                })?;
                if wants(*b) {
                    accumulate(grads, *b, ga.map(|v| -v))?;
                }
                if wants(*a) {
                    accumulate(grads, *a, ga)?;
                }
            }
            Op::Gather { src, index } => {
                let mut gs = Tensor::zeros(self.value(*src).shape());
                let dst = gs.data_mut();
                for (&i, &gv) in index.iter().zip(g.data()) {
                    dst[i] = dst[i] + gv;
                }
                accumulate(grads, *src, gs)?;
            }
        }
        Ok(())
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        slot @ None => *slot = Some(g),
        Some(acc) => {
            acc.expect_same_shape(&g)?;
            acc.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a = *a + b);
        }
    }
    Ok(())
}

/// Gradients of every [`Tape::param`] leaf, in recording order.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.params
            .binary_search_by_key(&v, |(p, _)| *p)
            .ok()
            .map(|i| &self.params[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.params.iter().map(|(v, g)| (*v, g))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Gradients for `vars`, in that order; zero tensors for unknown handles are an error.
    pub fn collect(&self, vars: &[Var]) -> Result<Vec<Tensor<T>>> {
        vars.iter()
            .map(|&v| {
                self.get(v)
                    .cloned()
                    .ok_or_else(|| invalid!("variable {} is not a parameter", v.0))
            })
            .collect()
    }
}
