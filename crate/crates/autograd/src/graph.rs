use std::fmt;

use crate::kernels::{self, BatchNormStats};
use crate::{ParamId, ParamStore, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose forward value is computed by the caller and whose
/// adjoint is supplied here.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &str;

    /// Gradient with respect to each input, or `None` for inputs that take
    /// no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor)
        -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    /// `ln(clamp(x, lo, hi))`; zero gradient where the clamp is active.
    ClampLog(Var, f64, f64),
    Abs(Var),
    Square(Var),
    Mean(Var),
    Sum(Var),
    MatMulNT(Var, Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats,
        training: bool,
    },
    Upsample2x(Var),
    Crop(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of operations over tensors.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct GradStore {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl GradStore {
    /// Gradient of a node, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient of a parameter over all its uses in the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A leaf that collects a gradient, e.g. for checking input gradients.
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf bound to a stored parameter. Gradients flow only to trainable
    /// parameters.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let rg = store.is_trainable(id);
        self.push(store.get(id).clone(), Op::Param(id), rg)
    }

    /// Leaf bound to a parameter, but cut off from the gradient.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v + s);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[a]);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    /// `ln(clamp(a, lo, hi))`.
    pub fn clamp_log(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|v| v.clamp(lo, hi).ln());
        let rg = self.rg(&[a]);
        self.push(t, Op::ClampLog(a, lo, hi), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(t, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * v);
        let rg = self.rg(&[a]);
        self.push(t, Op::Square(a), rg)
    }

    /// Mean over every element, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(t, Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::Sum(a), rg)
    }

    /// `x(n×d) · wᵀ` with `w(c×d)`.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Var {
        let t = kernels::matmul_nt(self.value(x), self.value(w));
        let rg = self.rg(&[x, w]);
        self.push(t, Op::MatMulNT(x, w), rg)
    }

    /// Row-wise softmax of a matrix with max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = kernels::softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(t, Op::SoftmaxRows(x), rg)
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, da) = self.value(a).dims2();
        let (nb, db) = self.value(b).dims2();
        assert_eq!(n, nb, "concat_cols: row counts {n} vs {nb}");
        let mut data = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[n, da + db], data), Op::ConcatCols(a, b), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let t = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        );
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Batch normalization over NCHW. In training mode the statistics are
    /// computed from `x` and returned so the caller can update running
    /// estimates; otherwise `stats` must be supplied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<BatchNormStats>,
        eps: f64,
    ) -> (Var, BatchNormStats) {
        let training = stats.is_none();
        let stats = stats.unwrap_or_else(|| BatchNormStats::from_batch(self.value(x), eps));
        let t = kernels::batch_norm_forward(self.value(x), self.value(gamma), self.value(beta), &stats);
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats: stats.clone(),
                training,
            },
            rg,
        );
        (v, stats)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = kernels::upsample2x_forward(self.value(x));
        let rg = self.rg(&[x]);
        self.push(t, Op::Upsample2x(x), rg)
    }

    /// Keeps the top-left `h×w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = kernels::crop_forward(self.value(x), h, w);
        let rg = self.rg(&[x]);
        self.push(t, Op::Crop(x), rg)
    }

    /// Records a caller-computed `output` whose adjoint is given by `op`.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> GradStore {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Tensor>> = Vec::new();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        GradStore {
            nodes: grads,
            params,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut Vec<Option<Tensor>>,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                if params.len() <= id.0 {
                    params.resize_with(id.0 + 1, || None);
                }
                match &mut params[id.0] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, s) => {
                let d = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { s * gv });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y);
                self.accumulate(grads, *a, d);
            }
            Op::ClampLog(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = g.zip_map(val(*a), |gv, x| if x < lo || x > hi { 0.0 } else { gv / x });
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g.zip_map(val(*a), |gv, x| gv * sign(x));
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(val(*a), |gv, x| 2.0 * gv * x);
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item()));
            }
            Op::MatMulNT(x, w) => {
                let (dx, dw) = kernels::matmul_nt_backward(val(*x), val(*w), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
            }
            Op::SoftmaxRows(x) => {
                let p = &node.value;
                let (n, c) = p.dims2();
                let mut d = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    let (pr, gr) = (p.row(i), g.row(i));
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        d.data_mut()[i * c + k] = pr[k] * (gr[k] - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(a, b) => {
                let (n, da) = val(*a).dims2();
                let (_, db) = val(*b).dims2();
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * db);
                for i in 0..n {
                    let r = g.row(i);
                    ga.extend_from_slice(&r[..da]);
                    gb.extend_from_slice(&r[da..]);
                }
                self.accumulate(grads, *a, Tensor::new(&[n, da], ga));
                self.accumulate(grads, *b, Tensor::new(&[n, db], gb));
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let need_dw = self.nodes[w.0].requires_grad;
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad, need_dx, need_dw);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                training,
            } => {
                let (dx, dg, db) =
                    kernels::batch_norm_backward(val(*x), val(*gamma), stats, g, *training);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Upsample2x(x) => {
                let dx = kernels::upsample2x_backward(g, val(*x).shape());
                self.accumulate(grads, *x, dx);
            }
            Op::Crop(x) => {
                let dx = kernels::crop_backward(g, val(*x).shape());
                self.accumulate(grads, *x, dx);
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let outs = op.backward(&ins, &node.value, g);
                assert_eq!(
                    outs.len(),
                    inputs.len(),
                    "custom op {} returned {} gradients for {} inputs",
                    op.name(),
                    outs.len(),
                    inputs.len()
                );
                for (v, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        assert_eq!(
                            d.shape(),
                            val(*v).shape(),
                            "custom op {} gradient shape",
                            op.name()
                        );
                        self.accumulate(grads, *v, d);
                    }
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
