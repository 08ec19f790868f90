//! Tape-based reverse mode.
//!
//! A [`Graph`] records every value it computes in creation order, so the node
//! list is topologically sorted by construction. [`Graph::backward`] walks it
//! once in reverse.

use super::ops::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the graph's input nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the input does not influence the differentiated value.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Registers a leaf. Parameters and constants are both leaves; a constant
    /// is simply a leaf whose gradient nobody reads.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = ops::add_row(self.value(x), self.value(row))?;
        Ok(self.push(Op::AddRow(x, row), out))
    }

    /// `x + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let out = ops::add(self.value(x), c)?;
        Ok(self.push(Op::AddConst(x), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let out = ops::mul(self.value(x), &c)?;
        Ok(self.push(Op::MulConst(x, c), out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = ops::scale(self.value(x), factor);
        self.push(Op::Scale(x, factor), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(Op::Relu(x), out)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.push(Op::Gelu(x), out)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax_lastdim(self.value(x));
        self.push(Op::Softmax(x), out)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let parts = ops::layer_norm_parts(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: parts.xhat,
                rstd: parts.rstd,
            },
            parts.out,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = ops::slice_cols(self.value(x), start, end)?;
        Ok(self.push(Op::SliceCols { x, start }, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_cols(&values)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Stacks row blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / c;
        let out = Tensor::matrix(rows, c, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let out = ops::gather_rows(self.value(x), &index)?;
        Ok(self.push(Op::GatherRows { x, index }, out))
    }

    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, value: f64) -> Result<Var> {
        let out = ops::masked_fill(self.value(x), &mask, value)?;
        Ok(self.push(Op::MaskedFill { x, mask }, out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), out)
    }

    /// Reverse sweep from a scalar node. Only the gradients of input nodes are
    /// retained.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let seed = self.value(root);
        if seed.len() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(seed.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                    accumulate(&mut grads, *a, av.shape(), ga);
                    accumulate(&mut grads, *b, bv.shape(), gb);
                }
                Op::Transpose(a) => {
                    let gt = ops::transpose(&g)?;
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, &shape, gt.into_data());
                }
                Op::Add(a, b) => {
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *a, &shape, g.data().to_vec());
                    accumulate(&mut grads, *b, &shape, g.into_data());
                }
                Op::AddRow(x, row) => {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (acc, v) in gr.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    let row_shape = self.value(*row).shape().to_vec();
                    accumulate(&mut grads, *row, &row_shape, gr);
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *x, &shape, g.into_data());
                }
                Op::AddConst(x) => {
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *x, &shape, g.into_data());
                }
                Op::Mul(a, b) => {
                    let ga = ops::mul(&g, self.value(*b))?;
                    let gb = ops::mul(&g, self.value(*a))?;
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *a, &shape, ga.into_data());
                    accumulate(&mut grads, *b, &shape, gb.into_data());
                }
                Op::MulConst(x, c) => {
                    let gx = ops::mul(&g, c)?;
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *x, &shape, gx.into_data());
                }
                Op::Scale(x, f) => {
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *x, &shape, ops::scale(&g, *f).into_data());
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let gx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, xv.shape(), gx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let gx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&d, &v)| d * ops::gelu_grad(v))
                        .collect();
                    accumulate(&mut grads, *x, xv.shape(), gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut gx = vec![0.0; y.len()];
                    for ((gy, yr), out) in g
                        .data()
                        .chunks(c)
                        .zip(y.data().chunks(c))
                        .zip(gx.chunks_mut(c))
                    {
                        let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[j] = yr[j] * (gy[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, y.shape(), gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain).data();
                    let c = g.cols();
                    let mut gx = vec![0.0; g.len()];
                    let mut ggain = vec![0.0; c];
                    let mut gbias = vec![0.0; c];
                    for (r, gy) in g.data().chunks(c).enumerate() {
                        let h = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gy[j] * gv[j];
                            ggain[j] += gy[j] * h[j];
                            gbias[j] += gy[j];
                            mean_d += d;
                            mean_dh += d * h[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gy[j] * gv[j];
                            gx[r * c + j] = rstd[r] * (d - mean_d - h[j] * mean_dh);
                        }
                    }
                    let xs = self.value(*x).shape().to_vec();
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *x, &xs, gx);
                    accumulate(&mut grads, *gain, &gs, ggain);
                    accumulate(&mut grads, *bias, &bs, gbias);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let (c, w) = (xv.cols(), g.cols());
                    let mut gx = vec![0.0; xv.len()];
                    for (r, gr) in g.data().chunks(w).enumerate() {
                        gx[r * c + start..r * c + start + w].copy_from_slice(gr);
                    }
                    accumulate(&mut grads, *x, xv.shape(), gx);
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let mut gp = Vec::with_capacity(pv.len());
                        for gr in g.data().chunks(total) {
                            gp.extend_from_slice(&gr[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, pv.shape(), gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let gp = g.data()[offset..offset + pv.len()].to_vec();
                        offset += pv.len();
                        accumulate(&mut grads, p, pv.shape(), gp);
                    }
                }
                Op::GatherRows { x, index } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = vec![0.0; xv.len()];
                    for (gr, &src) in g.data().chunks(c).zip(index) {
                        for (acc, v) in gx[src * c..(src + 1) * c].iter_mut().zip(gr) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *x, xv.shape(), gx);
                }
                Op::MaskedFill { x, mask } => {
                    let gx = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&d, &m)| if m { 0.0 } else { d })
                        .collect();
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *x, &shape, gx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let d = g.data()[0];
                    accumulate(&mut grads, *x, xv.shape(), vec![d; xv.len()]);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data,
            });
        }
    }
}
