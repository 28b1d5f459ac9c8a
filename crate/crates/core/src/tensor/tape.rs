use std::fmt;
use std::sync::Arc;

use super::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::quant::{self, Granularity};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map over the channel (column) axis, with its adjoint.
/// Used to put runtime channel reassembly on the tape.
pub trait ColumnMap: Send + Sync + fmt::Debug {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn apply_adjoint(&self, grad: &Tensor) -> Result<Tensor>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Silu(Var),
    FakeQuant {
        x: Var,
        in_range: Vec<bool>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    ColumnMap {
        x: Var,
        map: Arc<dyn ColumnMap>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in execution order so that gradients can be
/// replayed backwards. Ops whose inputs need no gradient skip backward work.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, kept only for leaves that requested them.
#[derive(Debug)]
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.needs(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.needs(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        let rg = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = self
            .value(x)
            .layer_norm_parts(self.value(gain), self.value(bias), eps)?;
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).silu();
        let rg = self.needs(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Quantize-dequantize with parameters computed from the input itself.
    /// Backward is straight-through inside the clamp range and zero outside.
    pub fn fake_quant(&mut self, x: Var, bits: u32, granularity: Granularity) -> Result<Var> {
        let (out, in_range) = quant::fake_quant_with_mask(self.value(x), bits, granularity)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::FakeQuant { x, in_range }, rg))
    }

    /// Fake quantization with fixed parameters (e.g. calibrated ranges).
    pub fn fake_quant_with(&mut self, x: Var, params: &quant::QuantParams) -> Result<Var> {
        let (out, in_range) = quant::fake_quant_with_params(self.value(x), params)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::FakeQuant { x, in_range }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&values)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn column_map(&mut self, x: Var, map: Arc<dyn ColumnMap>) -> Result<Var> {
        let out = map.apply(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::ColumnMap { x, map }, rg))
    }

    /// Mean of squared differences, as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq);
        let n = self.value(a).numel().max(1) as f64;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        // keep leaf gradients only
        for (idx, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut out = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), out))?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let m = xhat.cols();
                let rows = xhat.rows();
                let gain_v = self.value(*gain).data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; xhat.numel()];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut sum_gh = 0.0;
                        let mut sum_ghh = 0.0;
                        for j in 0..m {
                            let gh = gr[j] * gain_v[j];
                            sum_gh += gh;
                            sum_ghh += gh * hr[j];
                        }
                        let scale = inv_std[r] / m as f64;
                        for j in 0..m {
                            let gh = gr[j] * gain_v[j];
                            dx[r * m + j] = scale * (m as f64 * gh - sum_gh - hr[j] * sum_ghh);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::from_parts(shape, dx))?;
                }
                if self.needs(*gain) {
                    let mut dg = vec![0.0; m];
                    for r in 0..rows {
                        for j in 0..m {
                            dg[j] += g.row(r)[j] * xhat.row(r)[j];
                        }
                    }
                    let shape = self.value(*gain).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::from_parts(shape, dg))?;
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; m];
                    for r in 0..rows {
                        for j in 0..m {
                            db[j] += g.row(r)[j];
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::from_parts(shape, db))?;
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), data))?;
            }
            Op::FakeQuant { x, in_range } => {
                let data = g
                    .data()
                    .iter()
                    .zip(in_range)
                    .map(|(&gv, &ok)| if ok { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data))?;
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (rows, cols, len) = (src.rows(), src.cols(), g.cols());
                let mut out = vec![0.0; src.numel()];
                for r in 0..rows {
                    out[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, Tensor::from_parts(src.shape().to_vec(), out))?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).cols();
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, len)?)?;
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.data()[0]))?;
            }
            Op::ColumnMap { x, map } => {
                self.accumulate(grads, *x, map.apply_adjoint(g)?)?;
            }
        }
        Ok(())
    }
}
