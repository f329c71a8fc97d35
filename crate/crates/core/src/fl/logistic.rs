//! Binary logistic regression used as the desk-scale training workload.
//!
//! Parameter layout is `[("weights", d), ("bias", 1)]`; the loss is the mean
//! binary cross-entropy over the dataset.

use super::{Dataset, FlError};
use crate::payload::{LayoutEntry, ParameterSet};

pub const WEIGHTS: &str = "weights";
pub const BIAS: &str = "bias";

/// Zero-initialized parameters for `dim` features.
pub fn initial_parameters(dim: usize) -> ParameterSet {
    ParameterSet::zeros(&[(WEIGHTS, dim), (BIAS, 1)])
}

fn check_layout(params: &ParameterSet, dim: usize) -> Result<(), FlError> {
    let expected = [
        LayoutEntry {
            name: WEIGHTS.into(),
            len: dim,
        },
        LayoutEntry {
            name: BIAS.into(),
            len: 1,
        },
    ];
    if params.layout() == expected {
        Ok(())
    } else {
        Err(FlError::LayoutMismatch)
    }
}

fn logit(values: &[f64], x: &[f64]) -> f64 {
    let (w, b) = values.split_at(x.len());
    w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b[0]
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn loss(params: &ParameterSet, data: &Dataset) -> Result<f64, FlError> {
    check_layout(params, data.dim())?;
    if data.is_empty() {
        return Err(FlError::EmptyDataset);
    }
    let total: f64 = data
        .iter()
        .map(|(x, y)| {
            let z = logit(params.values(), x);
            softplus(z) - y * z
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Analytic gradient of [`loss`], ordered like the parameter layout.
pub fn gradient(params: &ParameterSet, data: &Dataset) -> Result<Vec<f64>, FlError> {
    check_layout(params, data.dim())?;
    if data.is_empty() {
        return Err(FlError::EmptyDataset);
    }
    Ok(raw_gradient(params.values(), data))
}

fn raw_gradient(values: &[f64], data: &Dataset) -> Vec<f64> {
    let d = data.dim();
    let mut grad = vec![0.0; d + 1];
    for (x, y) in data.iter() {
        let err = sigmoid(logit(values, x)) - y;
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += err * xi;
        }
        grad[d] += err;
    }
    let n = data.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    grad
}

/// Full-batch gradient descent for `epochs` steps. The result carries
/// `num_samples = data.len()`.
pub fn local_train(params: &ParameterSet, data: &Dataset, epochs: u32, lr: f64) -> Result<ParameterSet, FlError> {
    check_layout(params, data.dim())?;
    if data.is_empty() {
        return Err(FlError::EmptyDataset);
    }
    let mut values = params.values().to_vec();
    for _ in 0..epochs {
        let grad = raw_gradient(&values, data);
        for (v, g) in values.iter_mut().zip(&grad) {
            *v -= lr * g;
        }
    }
    Ok(params
        .with_values(values)
        .map_err(FlError::Payload)?
        .with_num_samples(data.len() as u64))
}

pub fn predict(params: &ParameterSet, x: &[f64]) -> bool {
    logit(params.values(), x) >= 0.0
}

/// Fraction of correctly classified points.
pub fn accuracy(params: &ParameterSet, data: &Dataset) -> Result<f64, FlError> {
    check_layout(params, data.dim())?;
    if data.is_empty() {
        return Err(FlError::EmptyDataset);
    }
    let correct = data.iter().filter(|(x, y)| predict(params, x) == (*y >= 0.5)).count();
    Ok(correct as f64 / data.len() as f64)
}
