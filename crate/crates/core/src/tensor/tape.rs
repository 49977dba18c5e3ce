//! Reverse-mode automatic differentiation over a linear record of ops.

use super::kernels::{self, DeformNeeds, Needs};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SumAll(Var),
    MeanAll(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Deform {
        x: Var,
        offsets: Var,
        mask: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GridSample {
        x: Var,
        coords: Var,
    },
    L1Mean(Var, Var),
    NormalizeChannels(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensors and the ops that produced them.
///
/// Leaves created with [`Tape::leaf`] receive gradients; those created with
/// [`Tape::constant`] do not, and nothing downstream of only constants is
/// differentiated.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of every differentiable leaf, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.record(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.record(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn record(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.record(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(logistic);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::MeanAll(a), &[a])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let v = kernels::concat_channels(&ts)?;
        self.push(v, Op::Concat(xs.to_vec()), xs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = kernels::slice_channels(self.value(x), start, len)?;
        self.push(v, Op::Slice { x, start }, &[x])
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let v = kernels::avgpool2(self.value(x))?;
        self.push(v, Op::AvgPool2(x), &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let v = kernels::upsample_bilinear2(self.value(x))?;
        self.push(v, Op::Upsample2(x), &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(v, Op::Conv { x, w, b, stride, pad }, &inputs)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        mask: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let v = kernels::modulated_deform_conv2d(
            self.value(x),
            self.value(offsets),
            self.value(mask),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, offsets, mask, w];
        inputs.extend(b);
        self.push(
            v,
            Op::Deform {
                x,
                offsets,
                mask,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// Bilinear sampling of `x` at absolute `(row, column)` coordinates.
    pub fn grid_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let v = kernels::grid_sample(self.value(x), self.value(coords))?;
        self.push(v, Op::GridSample { x, coords }, &[x, coords])
    }

    /// `mean(|a - b|)` as a one-element tensor.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.check_same_shape(tb)?;
        if ta.is_empty() {
            return Err(shape_err!("l1 of empty tensors"));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum();
        let v = Tensor::scalar(s / ta.len() as f64);
        self.push(v, Op::L1Mean(a, b), &[a, b])
    }

    pub fn normalize_channels(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = kernels::normalize_channels(self.value(x), eps)?;
        self.push(v, Op::NormalizeChannels(x, eps), &[x])
    }

    /// Gradients of a one-element `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(shape_err!(
                "backward needs a one-element loss, got shape {:?}",
                t.shape()
            ));
        }
        self.backward_with(loss, Tensor::new(t.shape(), vec![1.0])?)
    }

    /// Vector-Jacobian product: gradients of `<out, cotangent>`.
    pub fn backward_with(&self, out: Var, cotangent: Tensor) -> Result<Grads> {
        self.value(out).check_same_shape(&cotangent)?;
        let n = out.0 + 1;
        let mut pending: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[out.0] = Some(cotangent);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(pending[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape())));
                continue;
            }
            let Some(g) = pending[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut pending)?;
        }
        Ok(Grads { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, pending: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        match &mut pending[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, pending: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(pending, a, g.clone())?;
                self.accumulate(pending, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                self.accumulate(pending, a, g.clone())?;
                self.accumulate(pending, b, g.map(|v| -v))?;
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    self.accumulate(pending, a, g.zip_map(self.value(b), |g, y| g * y)?)?;
                }
                if self.wants(b) {
                    self.accumulate(pending, b, g.zip_map(self.value(a), |g, x| g * x)?)?;
                }
            }
            &Op::Scale(a, s) => self.accumulate(pending, a, g.map(|v| v * s))?,
            &Op::Relu(a) => {
                let d = g.zip_map(self.value(a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(pending, a, d)?;
            }
            &Op::Sigmoid(a) => {
                let d = g.zip_map(y, |g, s| g * s * (1.0 - s))?;
                self.accumulate(pending, a, d)?;
            }
            &Op::Tanh(a) => {
                let d = g.zip_map(y, |g, t| g * (1.0 - t * t))?;
                self.accumulate(pending, a, d)?;
            }
            &Op::SumAll(a) => {
                let d = Tensor::full(self.value(a).shape(), g.item());
                self.accumulate(pending, a, d)?;
            }
            &Op::MeanAll(a) => {
                let t = self.value(a);
                let d = Tensor::full(t.shape(), g.item() / t.len() as f64);
                self.accumulate(pending, a, d)?;
            }
            Op::Concat(xs) => {
                let mut start = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    if self.wants(x) {
                        self.accumulate(pending, x, kernels::slice_channels(g, start, c)?)?;
                    }
                    start += c;
                }
            }
            &Op::Slice { x, start } => {
                let [n, c, h, w] = self.value(x).dims4()?;
                let len = g.shape()[1];
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let hw = h * w;
                for b in 0..n {
                    let dst = &mut d.data_mut()[(b * c + start) * hw..(b * c + start + len) * hw];
                    dst.copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                }
                self.accumulate(pending, x, d)?;
            }
            &Op::AvgPool2(x) => self.accumulate(pending, x, kernels::avgpool2_backward(g)?)?,
            &Op::Upsample2(x) => self.accumulate(pending, x, kernels::upsample_bilinear2_backward(g)?)?,
            &Op::Conv { x, w, b, stride, pad } => {
                let needs = Needs {
                    input: self.wants(x),
                    weight: self.wants(w),
                    bias: b.is_some_and(|b| self.wants(b)),
                };
                let gr = kernels::conv2d_backward(self.value(x), self.value(w), g, stride, pad, needs)?;
                if let Some(d) = gr.input {
                    self.accumulate(pending, x, d)?;
                }
                if let Some(d) = gr.weight {
                    self.accumulate(pending, w, d)?;
                }
                if let (Some(b), Some(d)) = (b, gr.bias) {
                    self.accumulate(pending, b, d)?;
                }
            }
            &Op::Deform {
                x,
                offsets,
                mask,
                w,
                b,
                stride,
                pad,
            } => {
                let needs = DeformNeeds {
                    input: self.wants(x),
                    offsets: self.wants(offsets),
                    mask: self.wants(mask),
                    weight: self.wants(w),
                    bias: b.is_some_and(|b| self.wants(b)),
                };
                let gr = kernels::modulated_deform_conv2d_backward(
                    self.value(x),
                    self.value(offsets),
                    self.value(mask),
                    self.value(w),
                    g,
                    stride,
                    pad,
                    needs,
                )?;
                if let Some(d) = gr.input {
                    self.accumulate(pending, x, d)?;
                }
                if let Some(d) = gr.offsets {
                    self.accumulate(pending, offsets, d)?;
                }
                if let Some(d) = gr.mask {
                    self.accumulate(pending, mask, d)?;
                }
                if let Some(d) = gr.weight {
                    self.accumulate(pending, w, d)?;
                }
                if let (Some(b), Some(d)) = (b, gr.bias) {
                    self.accumulate(pending, b, d)?;
                }
            }
            &Op::GridSample { x, coords } => {
                let (dx, dc) = kernels::grid_sample_backward(self.value(x), self.value(coords), g)?;
                self.accumulate(pending, x, dx)?;
                self.accumulate(pending, coords, dc)?;
            }
            &Op::L1Mean(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let s = g.item() / ta.len() as f64;
                let d = ta.zip_map(tb, |x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        0.0
                    }
                })?;
                if self.wants(b) {
                    self.accumulate(pending, b, d.map(|v| -v))?;
                }
                self.accumulate(pending, a, d)?;
            }
            &Op::NormalizeChannels(x, eps) => {
                let d = kernels::normalize_channels_backward(self.value(x), y, g, eps)?;
                self.accumulate(pending, x, d)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "logistic",
        Op::Tanh(_) => "tanh",
        Op::SumAll(_) => "sum",
        Op::MeanAll(_) => "mean",
        Op::Concat(_) => "concat_channels",
        Op::Slice { .. } => "slice_channels",
        Op::AvgPool2(_) => "avgpool2",
        Op::Upsample2(_) => "upsample_bilinear2",
        Op::Conv { .. } => "conv2d",
        Op::Deform { .. } => "modulated_deform_conv2d",
        Op::GridSample { .. } => "grid_sample",
        Op::L1Mean(..) => "l1_mean",
        Op::NormalizeChannels(..) => "normalize_channels",
    }
}
