//! Finite-difference verification of the analytic gradients.

use super::network::{cross_entropy, Network};
use super::spec::CnnSpec;
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn loss(net: &mut Network<f64>, input: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let z = net.logits_train(input.clone())?;
    Ok(cross_entropy(&z, labels).0)
}

/// Largest relative error between back-propagated and central-difference
/// gradients over every parameter, with batchnorm in training mode.
pub fn gradient_check(spec: &CnnSpec, input: &Tensor<f64>, labels: &[usize], seed: u64) -> Result<f64> {
    let mut net = Network::<f64>::new(spec, seed)?;
    let z = net.logits_train(input.clone())?;
    let (_, grad) = cross_entropy(&z, labels);
    net.zero_grads();
    net.backward(grad);
    let analytic = net.flat_grads();

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut original = 0.0;
        net.with_param(i, |p| {
            original = *p;
            *p = original + FD_STEP;
        });
        let plus = loss(&mut net, input, labels)?;
        net.with_param(i, |p| *p = original - FD_STEP);
        let minus = loss(&mut net, input, labels)?;
        net.with_param(i, |p| *p = original);
        worst = worst.max(relative_error(a, (plus - minus) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}
