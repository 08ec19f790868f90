use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), with `a` logically
/// `m x k` and `b` logically `k x n`. A transposed operand is stored row-major
/// in its transposed shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the strides
    // describe row-major layouts of those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    match a.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = match b.shape() {
        [r, c] => (*r, *c),
        _ => (0, 0),
    };
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = matrix_dims("transpose", a)?;
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor {
        shape: vec![c, r],
        data: out,
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// Adds `row` to every row of `x`.
pub fn add_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    if row.len() != x.cols() {
        return Err(Error::Dimension {
            op: "add_row",
            lhs: x.shape().to_vec(),
            rhs: row.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    let c = x.cols();
    for chunk in out.data.chunks_mut(c) {
        for (v, b) in chunk.iter_mut().zip(&row.data) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    x.map(|v| v * factor)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub(crate) fn gelu_grad(v: f64) -> f64 {
    let inner = GELU_C * (v + 0.044715 * v * v * v);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
}

/// Softmax over each last-dimension slice, with max subtraction.
///
/// Entries equal to `-inf` receive weight exactly 0. A slice whose entries are
/// all `-inf` maps to all zeros.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub(crate) struct LayerNormParts {
    pub out: Tensor,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_parts(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<LayerNormParts> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(x.rows());
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.data.chunks(c).enumerate() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gain.data[j] + bias.data[j];
        }
    }
    Ok(LayerNormParts {
        out: Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        xhat,
        rstd,
    })
}

/// Normalizes each last-dimension slice to zero mean and unit variance
/// (variance floored by [`LAYER_NORM_EPS`]), then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(layer_norm_parts(x, gain, bias)?.out)
}

pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = matrix_dims("slice_cols", x)?;
    if start >= end || end > c {
        return Err(Error::contract(format!(
            "column range {start}..{end} out of bounds for {:?}",
            x.shape()
        )));
    }
    let w = end - start;
    let mut out = Vec::with_capacity(r * w);
    for row in x.data.chunks(c) {
        out.extend_from_slice(&row[start..end]);
    }
    Ok(Tensor {
        shape: vec![r, w],
        data: out,
    })
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat of nothing"))?;
    let r = first.rows();
    if let Some(bad) = parts.iter().find(|p| p.rows() != r) {
        return Err(Error::Dimension {
            op: "concat_cols",
            lhs: first.shape().to_vec(),
            rhs: bad.shape().to_vec(),
        });
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor {
        shape: vec![r, total],
        data: out,
    })
}

/// Row `i` of the result is row `index[i]` of `x`.
pub fn gather_rows(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    let r = x.rows();
    if index.is_empty() {
        return Err(Error::contract("gather of no rows"));
    }
    if let Some(bad) = index.iter().find(|&&i| i >= r) {
        return Err(Error::contract(format!(
            "row {bad} out of bounds for {r} rows"
        )));
    }
    let c = x.cols();
    let mut out = Vec::with_capacity(index.len() * c);
    for &i in index {
        out.extend_from_slice(x.row(i));
    }
    Ok(Tensor {
        shape: vec![index.len(), c],
        data: out,
    })
}

/// Replaces every entry whose `mask` flag is set by `value`.
pub fn masked_fill(x: &Tensor, mask: &[bool], value: f64) -> Result<Tensor> {
    if mask.len() != x.len() {
        return Err(Error::Dimension {
            op: "masked_fill",
            lhs: x.shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect(),
    })
}
