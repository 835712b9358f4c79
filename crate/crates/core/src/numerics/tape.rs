//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node whose parents were recorded earlier, so the node
//! index order is a topological order and the backward sweep is a single
//! reverse pass visiting each node once.

use rand::Rng;

use super::kernels;
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable op defined outside the tape (e.g. the selective scan).
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one optional gradient per input, in input order.
    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Input,
    Param(String),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Exp(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    CausalConv {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelAffineInv {
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    },
    RowAffine {
        x: Var,
        scale: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        f: Box<dyn Function>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients produced by [`Tape::gradients`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, or `None` if `v` does not reach the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, context: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(context.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records constant data (no gradient is propagated past it).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// Records a snapshot of a named parameter; its gradient flows back to the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        self.push(value, Op::Param(name.to_string()), name)
    }

    /// `y[..., j] = sum_i x[..., i] w[i, j] + b[j]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("affine", &xs, &ws));
        }
        let (d_in, d_out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape("affine bias", self.shape(b), &[d_out]));
            }
        }
        let rows = self.value(x).numel() / d_in;
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        kernels::gemm(
            rows,
            d_in,
            d_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            b.is_some(),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        self.push(Tensor::new(&shape, out)?, Op::Affine { x, w, b }, "affine")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|p| -p);
        self.push(v, Op::Neg(a), "neg")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::silu);
        self.push(v, Op::Silu(a), "silu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::softplus);
        self.push(v, Op::Softplus(a), "softplus")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose_last2()?;
        self.push(v, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_last(self.value(b))?;
        self.push(v, Op::Concat(a, b), "concat")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), "mean")
    }

    /// Depthwise causal convolution; `x` is `[seq, d]` or `[batch, seq, d]`,
    /// `kernel` is `[width, d]`, `bias` is `[d]`. Positions before the start are zero.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (batch, seq, d) = batch_seq_dim(self.shape(x), "causal_conv1d")?;
        let ks = self.shape(kernel);
        if ks.len() != 2 || ks[1] != d {
            return Err(Error::shape("causal_conv1d kernel", ks, &[ks[0], d]));
        }
        let width = ks[0];
        if self.shape(bias) != [d] {
            return Err(Error::shape("causal_conv1d bias", self.shape(bias), &[d]));
        }
        let y = kernels::causal_conv_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            batch,
            seq,
            d,
            width,
        );
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(&shape, y)?,
            Op::CausalConv { x, kernel, bias },
            "causal_conv1d",
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity when not training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut v = self.value(x).clone();
        for (o, m) in v.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(v, Op::Dropout { x, mask }, "dropout")
    }

    /// `y[b, m, :] = x[b, m, :] * scale[m] + shift[m]` for `x: [B, M, K]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (m, k) = self.check_channel(x, scale, shift)?;
        let (s, t) = (self.value(scale).data(), self.value(shift).data());
        let mut v = self.value(x).clone();
        for (r, row) in v.data_mut().chunks_mut(k).enumerate() {
            let c = r % m;
            row.iter_mut().for_each(|e| *e = *e * s[c] + t[c]);
        }
        self.push(v, Op::ChannelAffine { x, scale, shift }, "channel_affine")
    }

    /// `y[b, m, :] = (x[b, m, :] - shift[m]) / (scale[m] + eps)`.
    pub fn channel_affine_inv(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (m, k) = self.check_channel(x, scale, shift)?;
        let (s, t) = (self.value(scale).data(), self.value(shift).data());
        let mut v = self.value(x).clone();
        for (r, row) in v.data_mut().chunks_mut(k).enumerate() {
            let c = r % m;
            let d = s[c] + eps;
            row.iter_mut().for_each(|e| *e = (*e - t[c]) / d);
        }
        self.push(
            v,
            Op::ChannelAffineInv {
                x,
                scale,
                shift,
                eps,
            },
            "channel_affine_inv",
        )
    }

    /// `y[r, :] = x[r, :] * scale[r] + shift[r]` with constant per-row coefficients,
    /// where rows are all axes but the last.
    pub fn row_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let k = self.value(x).last_dim();
        let rows = self.value(x).numel() / k;
        if scale.len() != rows || shift.len() != rows {
            return Err(Error::shape(
                "row_affine",
                &[rows],
                &[scale.len(), shift.len()],
            ));
        }
        let mut v = self.value(x).clone();
        for (r, row) in v.data_mut().chunks_mut(k).enumerate() {
            row.iter_mut().for_each(|e| *e = *e * scale[r] + shift[r]);
        }
        self.push(
            v,
            Op::RowAffine {
                x,
                scale: scale.to_vec(),
            },
            "row_affine",
        )
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, f: Box<dyn Function>) -> Result<Var> {
        let name = f.name();
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                f,
            },
            name,
        )
    }

    fn check_channel(&self, x: Var, scale: Var, shift: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::shape("channel affine input", xs, &[0, 0, 0]));
        }
        let m = xs[1];
        for v in [scale, shift] {
            if self.shape(v) != [m] {
                return Err(Error::shape(
                    "channel affine coefficients",
                    self.shape(v),
                    &[m],
                ));
            }
        }
        Ok((m, xs[2]))
    }

    /// Runs the reverse sweep from a scalar `root` and returns every node's gradient.
    pub fn gradients(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::ones(self.shape(root)));

        for i in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.node_backward(i, g, lower)?;
        }
        Ok(Gradients { grads })
    }

    /// Accumulates (`+=`) the gradient of `root` into each recorded parameter in `store`.
    ///
    /// Calling this twice without [`ParamStore::zero_grad`] adds the gradients twice.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(root)?;
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / d_in;
                let mut gx = vec![0.0; xv.numel()];
                kernels::gemm(
                    rows,
                    d_out,
                    d_in,
                    g.data(),
                    false,
                    wv.data(),
                    true,
                    &mut gx,
                    false,
                );
                let mut gw = vec![0.0; wv.numel()];
                kernels::gemm(
                    d_in,
                    rows,
                    d_out,
                    xv.data(),
                    true,
                    g.data(),
                    false,
                    &mut gw,
                    false,
                );
                accumulate(grads, *x, Tensor::new(xv.shape(), gx)?);
                accumulate(grads, *w, Tensor::new(wv.shape(), gw)?);
                if let Some(b) = b {
                    let mut gb = vec![0.0; d_out];
                    for row in g.data().chunks(d_out) {
                        for (acc, r) in gb.iter_mut().zip(row) {
                            *acc += r;
                        }
                    }
                    accumulate(grads, *b, Tensor::from_vec(gb));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(val(*b), |g, q| g * q)?;
                let gb = g.zip_map(val(*a), |g, p| g * p)?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Neg(a) => accumulate(grads, *a, g.map(|v| -v)),
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, |g, y| g * y)?),
            Op::Sigmoid(a) => {
                accumulate(grads, *a, g.zip_map(&node.value, |g, s| g * s * (1.0 - s))?)
            }
            Op::Silu(a) => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |g, x| g * kernels::silu_grad(x))?,
            ),
            Op::Softplus(a) => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |g, x| g * kernels::sigmoid(x))?,
            ),
            Op::Transpose(a) => accumulate(grads, *a, g.transpose_last2()?),
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(val(*a).shape())?),
            Op::Concat(a, b) => {
                let (ga, gb) = g.split_last(val(*a).last_dim())?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::CausalConv { x, kernel, bias } => {
                let (batch, seq, d) = batch_seq_dim(val(*x).shape(), "causal_conv1d")?;
                let width = val(*kernel).shape()[0];
                let (gx, gk, gb) = kernels::causal_conv_backward(
                    g.data(),
                    val(*x).data(),
                    val(*kernel).data(),
                    batch,
                    seq,
                    d,
                    width,
                );
                accumulate(grads, *x, Tensor::new(val(*x).shape(), gx)?);
                accumulate(grads, *kernel, Tensor::new(val(*kernel).shape(), gk)?);
                accumulate(grads, *bias, Tensor::from_vec(gb));
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                for (o, m) in gx.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                accumulate(grads, *x, gx);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = val(*x);
                let (m, k) = (xv.shape()[1], xv.shape()[2]);
                let s = val(*scale).data();
                let mut gx = g.clone();
                let mut gs = vec![0.0; m];
                let mut gt = vec![0.0; m];
                for (r, (grow, xrow)) in gx
                    .data_mut()
                    .chunks_mut(k)
                    .zip(xv.data().chunks(k))
                    .enumerate()
                {
                    let c = r % m;
                    for (gv, xe) in grow.iter_mut().zip(xrow) {
                        gs[c] += *gv * xe;
                        gt[c] += *gv;
                        *gv *= s[c];
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *scale, Tensor::from_vec(gs));
                accumulate(grads, *shift, Tensor::from_vec(gt));
            }
            Op::ChannelAffineInv {
                x,
                scale,
                shift,
                eps,
            } => {
                let xv = val(*x);
                let (m, k) = (xv.shape()[1], xv.shape()[2]);
                let (s, t) = (val(*scale).data(), val(*shift).data());
                let mut gx = g.clone();
                let mut gs = vec![0.0; m];
                let mut gt = vec![0.0; m];
                for (r, (grow, xrow)) in gx
                    .data_mut()
                    .chunks_mut(k)
                    .zip(xv.data().chunks(k))
                    .enumerate()
                {
                    let c = r % m;
                    let d = s[c] + eps;
                    for (gv, xe) in grow.iter_mut().zip(xrow) {
                        gs[c] -= *gv * (xe - t[c]) / (d * d);
                        gt[c] -= *gv / d;
                        *gv /= d;
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *scale, Tensor::from_vec(gs));
                accumulate(grads, *shift, Tensor::from_vec(gt));
            }
            Op::RowAffine { x, scale } => {
                let k = g.last_dim();
                let mut gx = g.clone();
                for (row, s) in gx.data_mut().chunks_mut(k).zip(scale) {
                    row.iter_mut().for_each(|e| *e *= s);
                }
                accumulate(grads, *x, gx);
            }
            Op::Custom { inputs, f } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let outs = f.backward(g, &ins, &node.value)?;
                if outs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        f.name(),
                        outs.len(),
                        inputs.len()
                    )));
                }
                for (v, go) in inputs.iter().zip(outs) {
                    if let Some(go) = go {
                        if go.shape() != val(*v).shape() {
                            return Err(Error::shape(f.name(), go.shape(), val(*v).shape()));
                        }
                        accumulate(grads, *v, go);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Interprets `[seq, d]` as a batch of one and `[batch, seq, d]` as given.
pub(crate) fn batch_seq_dim(shape: &[usize], context: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [s, d] => Ok((1, s, d)),
        [b, s, d] => Ok((b, s, d)),
        _ => Err(Error::shape(context, shape, &[0, 0, 0])),
    }
}
