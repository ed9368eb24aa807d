//! Central finite-difference checks of the analytic gradients.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::graph::{gradients, Graph};
use crate::diff::ops::OpKind;
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Gradients with magnitude below this are compared on an absolute scale,
/// where central differences at `FD_STEP` cannot resolve relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Ops accepted by [`check_gradients`].
pub const REGISTERED_OPS: &[&str] = &[
    "matmul",
    "transpose",
    "concat_last",
    "concat_rows",
    "reshape",
    "softmax",
    "sigmoid",
    "tanh",
    "elu",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "abs",
    "sum",
    "mean",
    "squared_error",
    "masked_cross_entropy",
    "select_rows",
    "gather",
];

/// Small input shapes exercising each registered op, including the
/// batched rank-3 matmul.
pub fn reference_shapes(op_name: &str) -> Option<Vec<Vec<usize>>> {
    let v = |dims: &[&[usize]]| Some(dims.iter().map(|d| d.to_vec()).collect());
    match op_name {
        "matmul" => v(&[&[2, 3], &[3, 2]]),
        "transpose" => v(&[&[2, 3, 4]]),
        "concat_last" => v(&[&[2, 3], &[2, 2]]),
        "concat_rows" => v(&[&[2, 3], &[1, 3]]),
        "reshape" | "softmax" | "sigmoid" | "tanh" | "elu" | "abs" | "scale" | "add_scalar" | "sum" | "mean"
        | "select_rows" | "gather" => v(&[&[3, 4]]),
        "masked_cross_entropy" => v(&[&[1, 5]]),
        "add" | "sub" | "mul" | "squared_error" => v(&[&[3, 4], &[3, 4]]),
        _ => None,
    }
}

fn op_for(name: &str, shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Result<OpKind> {
    let first = shapes.first().ok_or_else(|| Error::shape(name, "no input shapes given"))?;
    let numel: usize = first.iter().product();
    Ok(match name {
        "matmul" => OpKind::MatMul,
        "transpose" => OpKind::Transpose,
        "concat_last" => OpKind::ConcatLast,
        "concat_rows" => OpKind::ConcatRows,
        "reshape" => OpKind::Reshape(vec![1, numel]),
        "softmax" => OpKind::Softmax,
        "sigmoid" => OpKind::Sigmoid,
        "tanh" => OpKind::Tanh,
        "elu" => OpKind::Elu,
        "add" => OpKind::Add,
        "sub" => OpKind::Sub,
        "mul" => OpKind::Mul,
        "scale" => OpKind::Scale(rng.random_range(-2.0..2.0)),
        "add_scalar" => OpKind::AddScalar(rng.random_range(-2.0..2.0)),
        "abs" => OpKind::Abs,
        "sum" => OpKind::Sum,
        "mean" => OpKind::Mean,
        "squared_error" => OpKind::SquaredError,
        "masked_cross_entropy" => {
            let mut mask: Vec<bool> = (0..numel).map(|_| rng.random_bool(0.6)).collect();
            let label = rng.random_range(0..numel);
            mask[label] = true;
            OpKind::MaskedCrossEntropy { mask, label }
        }
        "select_rows" => {
            let rows = first[0];
            let k = rng.random_range(1..=rows + 1);
            OpKind::SelectRows((0..k).map(|_| rng.random_range(0..rows)).collect())
        }
        "gather" => {
            let k = rng.random_range(1..=numel + 1);
            OpKind::Gather((0..k).map(|_| rng.random_range(0..numel)).collect())
        }
        other => return Err(Error::UnknownOp(other.to_string())),
    })
}

fn sample_input(shape: &[usize], avoid_zero: bool, rng: &mut ChaCha8Rng) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.5..1.5);
            // Kinks: |x| at 0, and ELU's second derivative jump at 0.
            if !avoid_zero || v.abs() >= 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Max relative error between analytic and central-difference gradients of
/// `sum(op(inputs) * R)` for a random projection `R`, over `trials` draws.
pub fn check_gradients(
    op_name: &str,
    shapes: &[Vec<usize>],
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !REGISTERED_OPS.contains(&op_name) {
        return Err(Error::UnknownOp(op_name.to_string()));
    }
    if tol <= 0.0 {
        return Err(Error::config("tol", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let avoid_zero = matches!(op_name, "abs" | "elu");
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let kind = op_for(op_name, shapes, &mut rng)?;
        let mut graph = Graph::new();
        let names: Vec<String> = (0..shapes.len()).map(|i| format!("x{i}")).collect();
        let ids: Vec<_> = names.iter().map(|n| graph.input(n.clone())).collect();
        let out = graph.op(kind, &ids)?;
        let mut inputs: HashMap<String, Tensor> =
            names.iter().zip(shapes).map(|(n, s)| (n.clone(), sample_input(s, avoid_zero, &mut rng))).collect();
        let out_shape = {
            let mut probe = graph.clone();
            probe.mark_output(out);
            crate::diff::graph::evaluate(&probe, &inputs)?[0].shape().to_vec()
        };
        let proj = graph.constant(sample_input(&out_shape, false, &mut rng));
        let weighted = graph.op(OpKind::Mul, &[out, proj])?;
        let loss = graph.op(OpKind::Sum, &[weighted])?;
        graph.mark_output(loss);
        let analytic = gradients(&graph, &inputs, loss)?;
        for name in &names {
            let numeric = finite_difference(&mut inputs, name, |bound| {
                Ok(crate::diff::graph::evaluate(&graph, bound)?[0].item())
            })?;
            for (a, n) in analytic[name].data().iter().zip(numeric.data()) {
                worst = worst.max(relative_error(*a, *n));
            }
        }
    }
    Ok(GradCheckReport { op: op_name.to_string(), trials, max_rel_error: worst, tol })
}

/// Central differences of a scalar function with respect to one named input.
pub fn finite_difference(
    inputs: &mut HashMap<String, Tensor>,
    name: &str,
    mut f: impl FnMut(&HashMap<String, Tensor>) -> Result<f64>,
) -> Result<Tensor> {
    let numel = inputs.get(name).ok_or_else(|| Error::UnboundInput(name.to_string()))?.numel();
    let mut out = vec![0.0; numel];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = inputs[name].data()[i];
        inputs.get_mut(name).unwrap().data_mut()[i] = orig + FD_STEP;
        let plus = f(inputs)?;
        inputs.get_mut(name).unwrap().data_mut()[i] = orig - FD_STEP;
        let minus = f(inputs)?;
        inputs.get_mut(name).unwrap().data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * FD_STEP);
    }
    Ok(Tensor::from_parts(inputs[name].shape().to_vec(), out))
}
