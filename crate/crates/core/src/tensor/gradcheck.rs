//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Graph, PoolMode, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Every op name accepted by [`grad_check`].
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "rsub_scalar",
    "square",
    "recip",
    "log",
    "exp",
    "sigmoid",
    "relu",
    "clamp",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "matmul",
    "softmax",
    "conv2d",
    "conv2d_strided",
    "conv1d",
    "gap",
    "channel_avg",
    "channel_max",
    "spatial_max2x2",
    "concat",
    "slice",
    "upsample2",
];

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between analytic and central-difference gradients of
/// `build` w.r.t. every element of every input.
///
/// Non-scalar outputs are reduced with a fixed random weighting so every
/// output element contributes to the checked loss.
pub fn check_graph_fn<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let weights = std::cell::RefCell::new(None::<Tensor<f64>>);
    let eval = |inputs: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let mut w = weights.borrow_mut();
            let w = w.get_or_insert_with(|| {
                let mut r = rng(derive_seed(seed, 0x5eed));
                Tensor::from_fn(g.shape(out).to_vec(), |_| r.random_range(-1.0..1.0))
            });
            let wv = g.constant(w.clone());
            let weighted = g.mul(out, wv)?;
            g.sum(weighted)?
        };
        let value = g.value(loss).data()[0];
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let x0 = t.data()[k];
            probe[ti].data_mut()[k] = x0 + STEP;
            let (fp, _) = eval(&probe, false)?;
            probe[ti].data_mut()[k] = x0 - STEP;
            let (fm, _) = eval(&probe, false)?;
            probe[ti].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[ti].data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Shapes used by the CLI and the acceptance suite for each op.
pub fn default_shapes(op: &str) -> Result<Vec<Vec<usize>>> {
    let s: Vec<Vec<usize>> = match op {
        "add" | "mul" => vec![vec![2, 3, 4], vec![2, 1, 1]],
        "sub" | "div" => vec![vec![2, 3, 4], vec![1, 3, 4]],
        "add_scalar" | "mul_scalar" | "rsub_scalar" | "square" | "recip" | "log" | "exp"
        | "sigmoid" | "relu" | "clamp" => vec![vec![2, 3, 4]],
        "sum" | "mean" | "reshape" => vec![vec![2, 6]],
        "transpose" => vec![vec![3, 4]],
        "matmul" => vec![vec![3, 4], vec![4, 2]],
        "softmax" => vec![vec![3, 5]],
        "conv2d" => vec![vec![2, 6, 6], vec![3, 2, 3, 3], vec![3]],
        "conv2d_strided" => vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]],
        "conv1d" => vec![vec![1, 7], vec![1, 1, 3]],
        "gap" | "channel_avg" | "channel_max" | "spatial_max2x2" => vec![vec![3, 4, 4]],
        "concat" => vec![vec![2, 3, 3], vec![1, 3, 3]],
        "slice" => vec![vec![4, 3, 3]],
        "upsample2" => vec![vec![2, 3, 3]],
        other => return Err(Error::UnknownOp(other.to_string())),
    };
    Ok(s)
}

/// Draws op inputs that keep finite differences away from kinks and domain edges.
fn sample_inputs(op: &str, shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match (op, i) {
                ("log" | "recip", 0) | ("div", 1) => (0..n).map(|_| r.random_range(0.5..1.5)).collect(),
                ("channel_max" | "spatial_max2x2", 0) => {
                    // Distinct values spaced far beyond the step size.
                    let mut v: Vec<f64> = (0..n).map(|k| k as f64 / n as f64 - 0.5).collect();
                    v.shuffle(&mut r);
                    v
                }
                ("clamp", 0) => (0..n)
                    .map(|k| {
                        let mag = if k % 2 == 0 { r.random_range(0.1..0.4) } else { r.random_range(0.6..1.0) };
                        if r.random::<bool>() { mag } else { -mag }
                    })
                    .collect(),
                _ => (0..n)
                    .map(|_| {
                        let mag = r.random_range(0.2..1.0);
                        if r.random::<bool>() { mag } else { -mag }
                    })
                    .collect(),
            };
            Tensor::new(shape.clone(), data).expect("shape matches sample count")
        })
        .collect()
}

fn arity(op: &str) -> usize {
    match op {
        "add" | "sub" | "mul" | "div" | "matmul" | "conv1d" | "concat" => 2,
        "conv2d" | "conv2d_strided" => 3,
        _ => 1,
    }
}

/// Finite-difference check of one registered op; returns the max relative error.
pub fn grad_check(op: &str, shapes: &[Vec<usize>], seed: u64) -> Result<f64> {
    if !OPS.contains(&op) {
        return Err(Error::UnknownOp(op.to_string()));
    }
    if shapes.len() != arity(op) {
        return Err(Error::invalid(
            "grad_check",
            format!("{op} takes {} inputs, got {}", arity(op), shapes.len()),
        ));
    }
    let inputs = sample_inputs(op, shapes, seed);
    let op = op.to_string();
    check_graph_fn(&inputs, seed, move |g, v| match op.as_str() {
        "add" => g.add(v[0], v[1]),
        "sub" => g.sub(v[0], v[1]),
        "mul" => g.mul(v[0], v[1]),
        "div" => g.div(v[0], v[1]),
        "add_scalar" => g.add_scalar(v[0], 0.75),
        "mul_scalar" => g.mul_scalar(v[0], -1.25),
        "rsub_scalar" => g.rsub_scalar(1.0, v[0]),
        "square" => g.square(v[0]),
        "recip" => g.recip(v[0]),
        "log" => g.log(v[0]),
        "exp" => g.exp(v[0]),
        "sigmoid" => g.sigmoid(v[0]),
        "relu" => g.relu(v[0]),
        "clamp" => g.clamp(v[0], -0.5, 0.5),
        "sum" => g.sum(v[0]),
        "mean" => g.mean(v[0]),
        "reshape" => {
            let n = g.value(v[0]).len();
            g.reshape(v[0], &[n])
        }
        "transpose" => g.transpose(v[0]),
        "matmul" => g.matmul(v[0], v[1]),
        "softmax" => {
            let last = g.shape(v[0]).len() - 1;
            g.softmax(v[0], last)
        }
        "conv2d" => g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        "conv2d_strided" => g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        "conv1d" => {
            let k = g.shape(v[1])[2];
            g.conv1d(v[0], v[1], (k - 1) / 2)
        }
        "gap" => g.pool(v[0], PoolMode::Gap),
        "channel_avg" => g.pool(v[0], PoolMode::ChannelAvg),
        "channel_max" => g.pool(v[0], PoolMode::ChannelMax),
        "spatial_max2x2" => g.pool(v[0], PoolMode::SpatialMax2x2),
        "concat" => g.concat(&[v[0], v[1]], 0),
        "slice" => {
            let n = g.shape(v[0])[0];
            g.slice(v[0], 0, 1, n.saturating_sub(2).max(1))
        }
        "upsample2" => g.upsample2(v[0]),
        other => Err(Error::UnknownOp(other.to_string())),
    })
}
