//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node holding its result and enough saved state
//! to run the backward rule. `Var` is an index into the tape; backward walks
//! the nodes in reverse creation order, so gradients are accumulated in a
//! fixed, reproducible order.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{check_same_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, k: Var, b: Var, stride: usize, pad: usize },
    MaxPool { x: Var, argmax: Vec<u32> },
    BatchNorm { x: Var, scale: Var, shift: Var, xhat: Tensor, inv_std: Vec<f64> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Concat { xs: Vec<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    PowConst { x: Var, e: f64 },
    Ln { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum { x: Var },
    Mean { x: Var },
    Huber { a: Var, b: Var, beta: f64 },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by tape variable. `None` means the variable did not
/// receive any gradient (treated as zero by consumers).
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        match &mut self.grads[v.0] {
            Some(existing) => {
                let data = existing.data_mut();
                for (e, d) in data.iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, rg, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_fwd(self.value(x), self.value(k), self.value(b), stride, pad)?;
        let rg = self.any_grad(&[x, k, b]);
        Ok(self.push(out, rg, Op::Conv2d { x, k, b, stride, pad }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::convt2d_fwd(self.value(x), self.value(k), self.value(b), stride, pad)?;
        let rg = self.any_grad(&[x, k, b]);
        Ok(self.push(out, rg, Op::ConvT2d { x, k, b, stride, pad }))
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool_fwd(self.value(x), window, window)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, rg, Op::MaxPool { x, argmax }))
    }

    /// Training-mode batch norm: normalizes with the statistics of the current
    /// batch and wires their dependence on the input into the backward pass.
    /// Returns the output and the batch `(mean, var)` so callers can update
    /// running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (mean, var) = kernels::bn_stats(self.value(x))?;
        let (out, xhat, inv_std) =
            kernels::bn_normalize(self.value(x), self.value(scale), self.value(shift), &mean, &var, eps)?;
        let rg = self.any_grad(&[x, scale, shift]);
        let v = self.push(out, rg, Op::BatchNorm { x, scale, shift, xhat, inv_std });
        Ok((v, mean, var))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(stable_sigmoid);
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::Sigmoid { x })
    }

    /// Concatenates along the channel axis of `(b, c, h, w)` tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidParam("concat needs at least one input".into()));
        }
        let (b0, _, h0, w0) = self.value(xs[0]).dims4()?;
        let mut c_total = 0;
        for &v in xs {
            let (b, c, h, w) = self.value(v).dims4()?;
            if (b, h, w) != (b0, h0, w0) {
                return Err(Error::ShapeMismatch(format!(
                    "concat: incompatible shapes {:?} vs {:?}",
                    self.value(xs[0]).shape(),
                    self.value(v).shape()
                )));
            }
            c_total += c;
        }
        let mut out = vec![0.0f64; b0 * c_total * h0 * w0];
        let plane = h0 * w0;
        for bi in 0..b0 {
            let mut c_off = 0;
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                let src = &t.data()[bi * c * plane..(bi + 1) * c * plane];
                out[(bi * c_total + c_off) * plane..(bi * c_total + c_off + c) * plane].copy_from_slice(src);
                c_off += c;
            }
        }
        let rg = self.any_grad(xs);
        let value = Tensor::new(vec![b0, c_total, h0, w0], out)?;
        Ok(self.push(value, rg, Op::Concat { xs: xs.to_vec() }))
    }

    fn binary_elementwise(&mut self, a: Var, b: Var, what: &str) -> Result<()> {
        check_same_shape(what, self.value(a), self.value(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "div")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Div { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::AddScalar { x })
    }

    pub fn pow_const(&mut self, x: Var, e: f64) -> Var {
        let out = self.value(x).map(|v| v.powf(e));
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::PowConst { x, e })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::Ln { x })
    }

    /// Clamps to `[lo, hi]`; gradient passes through strictly inside the
    /// interval and is zero at and beyond the bounds.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::InvalidParam(format!("clamp: lo {lo} must be < hi {hi}")));
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, rg, Op::Clamp { x, lo, hi }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(total), rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(total / n), rg, Op::Mean { x })
    }

    /// Mean-reduced Huber distance between `a` and `b`:
    /// `0.5 d^2` for `|d| <= beta`, `beta (|d| - 0.5 beta)` beyond.
    pub fn huber(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(Error::InvalidParam("huber: beta must be positive".into()));
        }
        self.binary_elementwise(a, b, "huber")?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.numel() as f64;
        let mut total = 0.0;
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            let d = x - y;
            total += if d.abs() <= beta {
                0.5 * d * d
            } else {
                beta * (d.abs() - 0.5 * beta)
            };
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(total / n), rg, Op::Huber { a, b, beta }))
    }

    /// Runs backward from a scalar root, returning gradients for every
    /// variable that requires them.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Contract(
                "backward root does not depend on any differentiable input".into(),
            ));
        }
        let mut grads = Gradients { grads: (0..self.nodes.len()).map(|_| None).collect() };
        grads.accumulate(root, Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads.grads[i].clone() else { continue };
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(grads)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut Gradients) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, stride, pad } => {
                if self.needs(*x) {
                    let gx = kernels::conv2d_bwd_input(g, self.value(*k), *stride, *pad, self.value(*x).shape())?;
                    grads.accumulate(*x, gx);
                }
                if self.needs(*k) {
                    let gk = kernels::conv2d_bwd_kernel(g, self.value(*x), *stride, *pad, self.value(*k).shape())?;
                    grads.accumulate(*k, gk);
                }
                if self.needs(*b) {
                    grads.accumulate(*b, kernels::sum_over_spatial_and_batch(g)?);
                }
            }
            Op::ConvT2d { x, k, b, stride, pad } => {
                if self.needs(*x) {
                    let gx = kernels::convt2d_bwd_input(g, self.value(*k), *stride, *pad, self.value(*x).shape())?;
                    grads.accumulate(*x, gx);
                }
                if self.needs(*k) {
                    let gk = kernels::convt2d_bwd_kernel(g, self.value(*x), *stride, *pad, self.value(*k).shape())?;
                    grads.accumulate(*k, gk);
                }
                if self.needs(*b) {
                    grads.accumulate(*b, kernels::sum_over_spatial_and_batch(g)?);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    grads.accumulate(*x, kernels::maxpool_bwd(g, argmax, self.value(*x).shape())?);
                }
            }
            Op::BatchNorm { x, scale, shift, xhat, inv_std } => {
                let (gx, gscale, gshift) = kernels::bn_bwd(g, xhat, inv_std, self.value(*scale))?;
                if self.needs(*x) {
                    grads.accumulate(*x, gx);
                }
                if self.needs(*scale) {
                    grads.accumulate(*scale, gscale);
                }
                if self.needs(*shift) {
                    grads.accumulate(*shift, gshift);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let gx = Tensor::from_fn(xv.shape(), |idx| {
                        if xv.data()[idx] > 0.0 { g.data()[idx] } else { 0.0 }
                    });
                    grads.accumulate(*x, gx);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let y = &self.nodes[i].value;
                    let gx = Tensor::from_fn(y.shape(), |idx| {
                        let yv = y.data()[idx];
                        g.data()[idx] * yv * (1.0 - yv)
                    });
                    grads.accumulate(*x, gx);
                }
            }
            Op::Concat { xs } => {
                let (b, _, h, w) = self.nodes[i].value.dims4()?;
                let plane = h * w;
                let c_total = self.nodes[i].value.shape()[1];
                let mut c_off = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if self.needs(v) {
                        let mut piece = vec![0.0f64; b * c * plane];
                        for bi in 0..b {
                            let src = &g.data()
                                [(bi * c_total + c_off) * plane..(bi * c_total + c_off + c) * plane];
                            piece[bi * c * plane..(bi + 1) * c * plane].copy_from_slice(src);
                        }
                        grads.accumulate(v, Tensor::new(self.value(v).shape().to_vec(), piece)?);
                    }
                    c_off += c;
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    grads.accumulate(*a, g.clone());
                }
                if self.needs(*b) {
                    grads.accumulate(*b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    grads.accumulate(*a, g.clone());
                }
                if self.needs(*b) {
                    grads.accumulate(*b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    grads.accumulate(*a, zip_map(g, self.value(*b), |gv, bv| gv * bv));
                }
                if self.needs(*b) {
                    grads.accumulate(*b, zip_map(g, self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Div { a, b } => {
                if self.needs(*a) {
                    grads.accumulate(*a, zip_map(g, self.value(*b), |gv, bv| gv / bv));
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let gb = Tensor::from_fn(bv.shape(), |idx| {
                        -g.data()[idx] * av.data()[idx] / (bv.data()[idx] * bv.data()[idx])
                    });
                    grads.accumulate(*b, gb);
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    grads.accumulate(*x, g.map(|v| v * c));
                }
            }
            Op::AddScalar { x } => {
                if self.needs(*x) {
                    grads.accumulate(*x, g.clone());
                }
            }
            Op::PowConst { x, e } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let e = *e;
                    let gx = Tensor::from_fn(xv.shape(), |idx| {
                        g.data()[idx] * e * xv.data()[idx].powf(e - 1.0)
                    });
                    grads.accumulate(*x, gx);
                }
            }
            Op::Ln { x } => {
                if self.needs(*x) {
                    grads.accumulate(*x, zip_map(g, self.value(*x), |gv, xv| gv / xv));
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (lo, hi) = (*lo, *hi);
                    let gx = Tensor::from_fn(xv.shape(), |idx| {
                        let v = xv.data()[idx];
                        if v > lo && v < hi { g.data()[idx] } else { 0.0 }
                    });
                    grads.accumulate(*x, gx);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let gv = g.scalar_value()?;
                    grads.accumulate(*x, Tensor::full(self.value(*x).shape(), gv));
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).numel() as f64;
                    let gv = g.scalar_value()? / n;
                    grads.accumulate(*x, Tensor::full(self.value(*x).shape(), gv));
                }
            }
            Op::Huber { a, b, beta } => {
                let gv = g.scalar_value()?;
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = av.numel() as f64;
                let beta = *beta;
                let deriv = |idx: usize| {
                    let d = av.data()[idx] - bv.data()[idx];
                    let dd = if d.abs() <= beta { d } else { beta * d.signum() };
                    gv * dd / n
                };
                if self.needs(*a) {
                    grads.accumulate(*a, Tensor::from_fn(av.shape(), deriv));
                }
                if self.needs(*b) {
                    grads.accumulate(*b, Tensor::from_fn(av.shape(), |idx| -deriv(idx)));
                }
            }
        }
        Ok(())
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}
