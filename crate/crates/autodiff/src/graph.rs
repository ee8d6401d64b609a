//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted: each node's inputs have smaller indices.
//! [`Graph::backward`] walks the tape once in reverse and leaves a gradient
//! on every node that depends on a `requires_grad` leaf.

use std::fmt;

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{sigmoid, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate.
///
/// The caller computes the forward value itself and hands it to
/// [`Graph::custom`]; `backward` must return one gradient per input, shaped
/// like that input.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Reshape(Var),
    Custom(Box<dyn Function>, Vec<Var>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(..) => "avg_pool2",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::Reshape(..) => "reshape",
            Op::Custom(func, _) => func.name(),
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients
    /// that are meaningful to the caller.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a new constant leaf; gradients do
    /// not flow through the copy.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was
    /// reached from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when `v` was not reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(AutodiffError::UnknownVar(v.0))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let value = self.check(a)?.value.zip_map(&self.check(b)?.value, op, f)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, mk(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.check(a)?.value.map(f);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.mul_scalar(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.check(a)?.value.sum());
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        if t.is_empty() {
            return Err(AutodiffError::InvalidShape {
                op: "mean",
                shape: t.shape().to_vec(),
                reason: "empty tensor",
            });
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Mean squared error between two equally shaped tensors, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.check(a)?.value;
        let tb = &self.check(b)?.value;
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mse",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        if ta.is_empty() {
            return Err(AutodiffError::InvalidShape {
                op: "mse",
                shape: ta.shape().to_vec(),
                reason: "empty tensor",
            });
        }
        let n = ta.len() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.check(a)?.value.reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.check(a)?.value;
        let tb = &self.check(b)?.value;
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let value = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        if t.ndim() != 2 {
            return Err(AutodiffError::InvalidShape {
                op: "transpose",
                shape: t.shape().to_vec(),
                reason: "expected a matrix",
            });
        }
        let value = transpose_raw(t);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Adds a length-`m` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let tb = &self.check(bias)?.value;
        if tx.ndim() != 2 || tb.ndim() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let m = tb.len();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(m.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Affine map `x Wᵀ + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let wt = self.transpose(weight)?;
        let xw = self.matmul(x, wt)?;
        self.add_bias(xw, bias)
    }

    /// Stride-1 2-D convolution with `padding` zeros on every side.
    ///
    /// `input: [n, c, h, w]`, `weight: [o, c, kh, kw]`, `bias: [o]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        let ti = &self.check(input)?.value;
        let tw = &self.check(weight)?.value;
        if ti.ndim() != 4 || tw.ndim() != 4 || ti.shape()[1] != tw.shape()[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                left: ti.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let geometry = ConvGeometry {
            batch: ti.shape()[0],
            in_channels: ti.shape()[1],
            height: ti.shape()[2],
            width: ti.shape()[3],
            out_channels: tw.shape()[0],
            kernel_h: tw.shape()[2],
            kernel_w: tw.shape()[3],
            padding,
        };
        if geometry.height + 2 * padding < geometry.kernel_h
            || geometry.width + 2 * padding < geometry.kernel_w
        {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                left: ti.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let bias_data = match bias {
            Some(b) => {
                let tb = &self.check(b)?.value;
                if tb.shape() != [geometry.out_channels] {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "conv2d bias",
                        left: tw.shape().to_vec(),
                        right: tb.shape().to_vec(),
                    });
                }
                Some(tb.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geometry, ti.data(), tw.data(), bias_data);
        let value = Tensor::new(
            vec![
                geometry.batch,
                geometry.out_channels,
                geometry.out_h(),
                geometry.out_w(),
            ],
            out,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            rg,
        ))
    }

    /// 2×2 mean pooling with stride 2 over `[n, c, h, w]`; `h` and `w` must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        let s = t.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(AutodiffError::InvalidShape {
                op: "avg_pool2",
                shape: s.to_vec(),
                reason: "expected [n, c, h, w] with even h and w",
            });
        }
        let out = kernels::avg_pool2_forward(t.data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::AvgPool2(a), rg))
    }

    /// Mean over the spatial axes: `[n, c, h, w] → [n, c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        let s = t.shape();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(AutodiffError::InvalidShape {
                op: "global_avg_pool",
                shape: s.to_vec(),
                reason: "expected non-empty [n, c, h, w]",
            });
        }
        let area = s[2] * s[3];
        let data = t
            .data()
            .chunks(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::GlobalAvgPool(a), rg))
    }

    /// Records an externally computed operation. `value` is the forward
    /// result; `func` supplies the backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        func: Box<dyn Function>,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(value, Op::Custom(func, inputs.to_vec()), rg))
    }

    /// Reverse pass from a scalar `loss`. Gradients from any earlier pass are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if !root.value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, contribution) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if wants(*a) {
                    v.push((*a, g.zip_map(val(*b), "mul backward", |x, y| x * y)?));
                }
                if wants(*b) {
                    v.push((*b, g.zip_map(val(*a), "mul backward", |x, y| x * y)?));
                }
                v
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MulScalar(a, c) => vec![(*a, g.scale(*c))],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut v = Vec::with_capacity(2);
                if wants(*a) {
                    let bt = transpose_raw(tb);
                    v.push((
                        *a,
                        Tensor::new(vec![m, k], matmul_raw(g.data(), bt.data(), m, n, k))?,
                    ));
                }
                if wants(*b) {
                    let at = transpose_raw(ta);
                    v.push((
                        *b,
                        Tensor::new(vec![k, n], matmul_raw(at.data(), g.data(), k, m, n))?,
                    ));
                }
                v
            }
            Op::Transpose(a) => vec![(*a, transpose_raw(g))],
            Op::AddBias(x, b) => {
                let m = val(*b).len();
                let mut gb = vec![0.0; m];
                for row in g.data().chunks(m.max(1)) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::vector(gb))]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let grads = kernels::conv2d_backward(
                    geometry,
                    val(*input).data(),
                    val(*weight).data(),
                    g.data(),
                    wants(*input),
                    wants(*weight),
                    bias.is_some_and(wants),
                );
                let mut v = Vec::with_capacity(3);
                if let Some(gi) = grads.input {
                    v.push((*input, Tensor::new(val(*input).shape().to_vec(), gi)?));
                }
                if let Some(gw) = grads.weight {
                    v.push((*weight, Tensor::new(val(*weight).shape().to_vec(), gw)?));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    v.push((*b, Tensor::vector(gb)));
                }
                v
            }
            Op::AvgPool2(a) => {
                let s = val(*a).shape();
                let gi = kernels::avg_pool2_backward(g.data(), s[0] * s[1], s[2], s[3]);
                vec![(*a, Tensor::new(s.to_vec(), gi)?)]
            }
            Op::GlobalAvgPool(a) => {
                let s = val(*a).shape();
                let area = s[2] * s[3];
                let mut gi = Vec::with_capacity(s.iter().product());
                for &gv in g.data() {
                    gi.extend(std::iter::repeat_n(gv / area as f64, area));
                }
                vec![(*a, Tensor::new(s.to_vec(), gi)?)]
            }
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(
                    val(*a),
                    "relu backward",
                    |gv, x| if x > 0.0 { gv } else { 0.0 },
                )?,
            )],
            Op::Sigmoid(a) => vec![(
                *a,
                g.zip_map(&node.value, "sigmoid backward", |gv, y| gv * y * (1.0 - y))?,
            )],
            Op::Square(a) => vec![(
                *a,
                g.zip_map(val(*a), "square backward", |gv, x| 2.0 * gv * x)?,
            )],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let t = val(*a);
                vec![(*a, Tensor::full(t.shape(), g.item() / t.len() as f64))]
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let scale = 2.0 * g.item() / ta.len() as f64;
                let ga = ta.zip_map(tb, "mse backward", |x, y| scale * (x - y))?;
                let gb = ga.scale(-1.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Custom(func, inputs) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = func.backward(&tensors, &node.value, g);
                if gs.len() != inputs.len() {
                    return Err(AutodiffError::InvalidShape {
                        op: func.name(),
                        shape: vec![gs.len()],
                        reason: "backward returned the wrong number of gradients",
                    });
                }
                for (gi, ti) in gs.iter().zip(&tensors) {
                    if gi.shape() != ti.shape() {
                        return Err(AutodiffError::ShapeMismatch {
                            op: func.name(),
                            left: ti.shape().to_vec(),
                            right: gi.shape().to_vec(),
                        });
                    }
                }
                inputs.iter().copied().zip(gs).collect()
            }
        };
        Ok(out)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose preserves length")
}
