//! Primitive operations: forward kernels and their vector-Jacobian products.
//!
//! Every op takes explicit shapes. The only broadcasting is tensor-scalar,
//! through `Scale` and `AddScalar`, whose scalar is a constant baked into the op.

use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m,k] x [k,n]`, or batched `[b,m,k] x [b,k,n]`.
    MatMul,
    /// Swap the last two dims.
    Transpose,
    /// Concatenate along the last dim; leading dims must agree.
    ConcatLast,
    /// Stack rank-2 tensors with equal column counts.
    ConcatRows,
    Reshape(Vec<usize>),
    /// Softmax over the last dim.
    Softmax,
    Sigmoid,
    Tanh,
    /// ELU with alpha = 1.
    Elu,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// |x|, with gradient 0 at exactly 0.
    Abs,
    /// Sum of all elements, shape `[1,1]`.
    Sum,
    /// Mean of all elements, shape `[1,1]`.
    Mean,
    /// `sum((a - b)^2)`, shape `[1,1]`.
    SquaredError,
    /// `-log softmax(x)[label]` where the softmax only spans entries with `mask[k]`.
    /// Input is a single row of logits.
    MaskedCrossEntropy {
        mask: Vec<bool>,
        label: usize,
    },
    /// Embedding lookup: rows of a `[r,d]` table, output `[k,d]`.
    SelectRows(Vec<usize>),
    /// Flat-index gather, output `[1,k]`.
    Gather(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::ConcatLast => "concat_last",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Reshape(_) => "reshape",
            OpKind::Softmax => "softmax",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Elu => "elu",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Abs => "abs",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SquaredError => "squared_error",
            OpKind::MaskedCrossEntropy { .. } => "masked_cross_entropy",
            OpKind::SelectRows(_) => "select_rows",
            OpKind::Gather(_) => "gather",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::ConcatLast | OpKind::ConcatRows => None,
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::SquaredError => Some(2),
            _ => Some(1),
        }
    }
}

fn err(kind: &OpKind, detail: impl Into<String>) -> Error {
    Error::shape(kind.name(), detail)
}

fn same_shape(kind: &OpKind, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(err(kind, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// (batch, m, k, n) for a matmul, or a shape error.
fn matmul_dims(kind: &OpKind, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((1, m, k, n)),
        (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => Ok((ba, m, k, n)),
        (sa, sb) => Err(err(kind, format!("cannot multiply {sa:?} by {sb:?}"))),
    }
}

fn transpose_last2(x: &Tensor) -> Tensor {
    let (batch, r, c) = match *x.shape() {
        [n] => (1, 1, n),
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => unreachable!(),
    };
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for bi in 0..batch {
        let off = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = d[off + i * c + j];
            }
        }
    }
    let shape = match *x.shape() {
        [n] => vec![n, 1],
        [_, _] => vec![c, r],
        _ => vec![batch, c, r],
    };
    Tensor::from_parts(shape, out)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Masked log-softmax probabilities for one row; entries outside the mask are 0.
fn masked_probs(kind: &OpKind, logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = logits.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(err(kind, "mask selects no entries"));
    }
    let mut probs: Vec<f64> = logits.iter().zip(mask).map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 }).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

pub(crate) fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(err(kind, format!("expected {n} inputs, got {}", inputs.len())));
        }
    } else if inputs.is_empty() {
        return Err(err(kind, "needs at least one input"));
    }
    let out = match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, m, k, n) = matmul_dims(kind, a, b)?;
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                gemm_acc(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let shape = if batch == 1 && a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
            Tensor::from_parts(shape, out)
        }
        OpKind::Transpose => {
            if inputs[0].rank() < 2 {
                return Err(err(kind, format!("needs rank >= 2, got {:?}", inputs[0].shape())));
            }
            transpose_last2(inputs[0])
        }
        OpKind::ConcatLast => {
            let lead = &inputs[0].shape()[..inputs[0].rank() - 1];
            for t in inputs {
                if t.rank() != inputs[0].rank() || &t.shape()[..t.rank() - 1] != lead {
                    return Err(err(kind, format!("leading dims differ: {:?} vs {:?}", inputs[0].shape(), t.shape())));
                }
            }
            let rows: usize = lead.iter().product();
            let width: usize = inputs.iter().map(|t| t.last_dim()).sum();
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for t in inputs {
                    let c = t.last_dim();
                    out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor::from_parts(shape, out)
        }
        OpKind::ConcatRows => {
            let cols = inputs[0].last_dim();
            for t in inputs {
                if t.rank() != 2 || t.last_dim() != cols {
                    return Err(err(kind, format!("expected [_, {cols}], got {:?}", t.shape())));
                }
            }
            let rows: usize = inputs.iter().map(|t| t.shape()[0]).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for t in inputs {
                out.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![rows, cols], out)
        }
        OpKind::Reshape(shape) => inputs[0].clone().reshaped(shape.clone())?,
        OpKind::Softmax => softmax_rows(inputs[0]),
        OpKind::Sigmoid => map(inputs[0], sigmoid),
        OpKind::Tanh => map(inputs[0], f64::tanh),
        OpKind::Elu => map(inputs[0], |v| if v > 0.0 { v } else { v.exp_m1() }),
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            same_shape(kind, inputs[0], inputs[1])?;
            match kind {
                OpKind::Add => zip_map(inputs[0], inputs[1], |x, y| x + y),
                OpKind::Sub => zip_map(inputs[0], inputs[1], |x, y| x - y),
                _ => zip_map(inputs[0], inputs[1], |x, y| x * y),
            }
        }
        OpKind::Scale(c) => map(inputs[0], |v| v * c),
        OpKind::AddScalar(c) => map(inputs[0], |v| v + c),
        OpKind::Abs => map(inputs[0], f64::abs),
        OpKind::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
        OpKind::Mean => {
            let x = inputs[0];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
        }
        OpKind::SquaredError => {
            same_shape(kind, inputs[0], inputs[1])?;
            let s = inputs[0].data().iter().zip(inputs[1].data()).map(|(a, b)| (a - b) * (a - b)).sum();
            Tensor::scalar(s)
        }
        OpKind::MaskedCrossEntropy { mask, label } => {
            let x = inputs[0];
            if x.numel() != mask.len() || x.numel() != x.last_dim() {
                return Err(err(kind, format!("logits {:?} vs mask of {}", x.shape(), mask.len())));
            }
            if *label >= mask.len() || !mask[*label] {
                return Err(err(kind, format!("label {label} is outside the mask")));
            }
            let probs = masked_probs(kind, x.data(), mask)?;
            Tensor::scalar(-probs[*label].ln())
        }
        OpKind::SelectRows(idx) => {
            let t = inputs[0];
            if t.rank() != 2 {
                return Err(err(kind, format!("table must be rank 2, got {:?}", t.shape())));
            }
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &r in idx {
                if r >= rows {
                    return Err(err(kind, format!("row {r} out of range for {rows} rows")));
                }
                out.extend_from_slice(t.row_slice(r));
            }
            Tensor::from_parts(vec![idx.len(), cols], out)
        }
        OpKind::Gather(idx) => {
            let t = inputs[0];
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx {
                if i >= t.numel() {
                    return Err(err(kind, format!("index {i} out of range for {} elements", t.numel())));
                }
                out.push(t.data()[i]);
            }
            Tensor::from_parts(vec![1, idx.len()], out)
        }
    };
    Ok(out)
}

/// Vector-Jacobian product. Returns one gradient per input; entries whose
/// `needs` flag is false are `None`.
pub(crate) fn backward(
    kind: &OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, m, k, n) = matmul_dims(kind, a, b).expect("checked in forward");
            let da = want(0).then(|| {
                let mut out = vec![0.0; a.numel()];
                for bi in 0..batch {
                    gemm_nt_acc(
                        &grad.data()[bi * m * n..(bi + 1) * m * n],
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::from_parts(a.shape().to_vec(), out)
            });
            let db = want(1).then(|| {
                let mut out = vec![0.0; b.numel()];
                for bi in 0..batch {
                    gemm_tn_acc(
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        &grad.data()[bi * m * n..(bi + 1) * m * n],
                        &mut out[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::from_parts(b.shape().to_vec(), out)
            });
            vec![da, db]
        }
        OpKind::Transpose => vec![want(0).then(|| transpose_last2(grad))],
        OpKind::ConcatLast => {
            let rows = grad.numel() / grad.last_dim();
            let width = grad.last_dim();
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let c = t.last_dim();
                    let g = want(i).then(|| {
                        let mut out = Vec::with_capacity(t.numel());
                        for r in 0..rows {
                            out.extend_from_slice(&grad.data()[r * width + offset..r * width + offset + c]);
                        }
                        Tensor::from_parts(t.shape().to_vec(), out)
                    });
                    offset += c;
                    g
                })
                .collect()
        }
        OpKind::ConcatRows => {
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let g = want(i).then(|| {
                        Tensor::from_parts(t.shape().to_vec(), grad.data()[offset..offset + t.numel()].to_vec())
                    });
                    offset += t.numel();
                    g
                })
                .collect()
        }
        OpKind::Reshape(_) => {
            vec![want(0).then(|| Tensor::from_parts(inputs[0].shape().to_vec(), grad.data().to_vec()))]
        }
        OpKind::Softmax => vec![want(0).then(|| {
            let cols = output.last_dim();
            let mut out = vec![0.0; output.numel()];
            for ((o, y), g) in out.chunks_mut(cols).zip(output.data().chunks(cols)).zip(grad.data().chunks(cols)) {
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    o[j] = y[j] * (g[j] - dot);
                }
            }
            Tensor::from_parts(output.shape().to_vec(), out)
        })],
        OpKind::Sigmoid => vec![want(0).then(|| zip_map(output, grad, |y, g| g * y * (1.0 - y)))],
        OpKind::Tanh => vec![want(0).then(|| zip_map(output, grad, |y, g| g * (1.0 - y * y)))],
        OpKind::Elu => vec![want(0).then(|| {
            let data = inputs[0]
                .data()
                .iter()
                .zip(output.data())
                .zip(grad.data())
                .map(|((&x, &y), &g)| if x > 0.0 { g } else { g * (y + 1.0) })
                .collect();
            Tensor::from_parts(output.shape().to_vec(), data)
        })],
        OpKind::Add => vec![want(0).then(|| grad.clone()), want(1).then(|| grad.clone())],
        OpKind::Sub => vec![want(0).then(|| grad.clone()), want(1).then(|| map(grad, |g| -g))],
        OpKind::Mul => vec![
            want(0).then(|| zip_map(grad, inputs[1], |g, b| g * b)),
            want(1).then(|| zip_map(grad, inputs[0], |g, a| g * a)),
        ],
        OpKind::Scale(c) => vec![want(0).then(|| map(grad, |g| g * c))],
        OpKind::AddScalar(_) => vec![want(0).then(|| grad.clone())],
        OpKind::Abs => vec![want(0).then(|| {
            zip_map(inputs[0], grad, |x, g| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            })
        })],
        OpKind::Sum => vec![want(0).then(|| Tensor::full(inputs[0].shape().to_vec(), grad.item()))],
        OpKind::Mean => vec![want(0).then(|| {
            let x = inputs[0];
            Tensor::full(x.shape().to_vec(), grad.item() / x.numel() as f64)
        })],
        OpKind::SquaredError => {
            let g = grad.item();
            let da = zip_map(inputs[0], inputs[1], |a, b| 2.0 * g * (a - b));
            let db = want(1).then(|| map(&da, |v| -v));
            vec![want(0).then_some(da), db]
        }
        OpKind::MaskedCrossEntropy { mask, label } => vec![want(0).then(|| {
            let x = inputs[0];
            let probs = masked_probs(kind, x.data(), mask).expect("checked in forward");
            let g = grad.item();
            let data = probs
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let target = if k == *label { 1.0 } else { 0.0 };
                    if mask[k] {
                        g * (p - target)
                    } else {
                        0.0
                    }
                })
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        })],
        OpKind::SelectRows(idx) => vec![want(0).then(|| {
            let t = inputs[0];
            let cols = t.last_dim();
            let mut out = vec![0.0; t.numel()];
            for (i, &r) in idx.iter().enumerate() {
                for c in 0..cols {
                    out[r * cols + c] += grad.data()[i * cols + c];
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        })],
        OpKind::Gather(idx) => vec![want(0).then(|| {
            let t = inputs[0];
            let mut out = vec![0.0; t.numel()];
            for (i, &flat) in idx.iter().enumerate() {
                out[flat] += grad.data()[i];
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        })],
    }
}
