//! A sequential CNN assembled from a [`CnnSpec`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::hybrid::SoftmaxOutput;
use super::layers::{BatchNorm, Conv, Dense, MaxPool, Relu};
use super::spec::{CnnSpec, LayerSpec};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv<T>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu<T>),
    MaxPool(MaxPool),
    Dense(Dense<T>),
}

/// Layers up to the final dense layer; softmax is applied by the caller.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: CnnSpec,
    layers: Vec<Layer<T>>,
}

fn he_normal<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, out: &mut [T]) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive fan-in");
    for w in out {
        *w = T::from_f64(normal.sample(rng));
    }
}

impl<T: Real> Network<T> {
    /// Builds the network with He-normal weights, zero biases, and
    /// batchnorm at `gamma = 1`, `beta = 0`.
    pub fn new(spec: &CnnSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = spec.input;
        let mut layers = Vec::new();
        for (layer, shape) in spec.layers.iter().zip(&shapes) {
            match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let mut conv = Conv::new(prev[0], filters, kernel, stride, padding);
                    he_normal(&mut rng, conv.fan_in(), &mut conv.weight);
                    layers.push(Layer::Conv(conv));
                }
                LayerSpec::BatchNorm => layers.push(Layer::BatchNorm(BatchNorm::new(prev[0]))),
                LayerSpec::Relu => layers.push(Layer::Relu(Relu::default())),
                LayerSpec::MaxPool { size, stride } => layers.push(Layer::MaxPool(MaxPool::new(size, stride))),
                LayerSpec::Dense { units } => {
                    let inputs = prev.iter().product();
                    let mut dense = Dense::new(inputs, units);
                    he_normal(&mut rng, inputs, &mut dense.weight);
                    layers.push(Layer::Dense(dense));
                }
                LayerSpec::Softmax => {}
            }
            prev = *shape;
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &CnnSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape;
        if [c, h, w] != self.spec.input {
            return Err(Error::shape(
                format!("{:?}", self.spec.input),
                format!("{:?}", [c, h, w]),
            ));
        }
        Ok(())
    }

    /// Inference-mode logits, `batch x classes`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(l) => l.forward(&h),
                Layer::BatchNorm(l) => l.forward(&h),
                Layer::Relu(_) => Relu::forward(&h),
                Layer::MaxPool(l) => l.forward(&h),
                Layer::Dense(l) => l.forward(&h),
            };
        }
        Ok(h)
    }

    /// Training-mode logits: batch statistics, caches kept for [`Self::backward`].
    pub fn logits_train(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(&x)?;
        let mut h = x;
        for layer in &mut self.layers {
            h = match layer {
                Layer::Conv(l) => l.forward_train(h),
                Layer::BatchNorm(l) => l.forward_train(h),
                Layer::Relu(l) => l.forward_train(h),
                Layer::MaxPool(l) => l.forward_train(h),
                Layer::Dense(l) => l.forward_train(h),
            };
        }
        Ok(h)
    }

    /// Back-propagates the gradient of the loss w.r.t. the logits,
    /// accumulating into the parameter gradients.
    pub fn backward(&mut self, grad_logits: Tensor<T>) {
        let mut g = grad_logits;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let first = i == 0;
            g = match layer {
                Layer::Conv(l) => match l.backward(&g, !first) {
                    Some(dx) => dx,
                    None => return,
                },
                Layer::BatchNorm(l) => l.backward(g),
                Layer::Relu(l) => l.backward(g),
                Layer::MaxPool(l) => l.backward(g),
                Layer::Dense(l) => match l.backward(&g, !first) {
                    Some(dx) => dx,
                    None => return,
                },
            };
        }
    }

    /// Visits every trainable `(parameter, gradient)` pair in a fixed order.
    pub fn visit_params(&mut self, mut f: impl FnMut(&mut [T], &mut [T])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(l) => {
                    f(&mut l.weight, &mut l.grad_weight);
                    f(&mut l.bias, &mut l.grad_bias);
                }
                Layer::BatchNorm(l) => {
                    f(&mut l.gamma, &mut l.grad_gamma);
                    f(&mut l.beta, &mut l.grad_beta);
                }
                Layer::Dense(l) => {
                    f(&mut l.weight, &mut l.grad_weight);
                    f(&mut l.bias, &mut l.grad_bias);
                }
                Layer::Relu(_) | Layer::MaxPool(_) => {}
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(|_, g| g.fill(T::ZERO));
    }

    /// All trainable parameters, flattened in [`Self::visit_params`] order.
    pub fn flat_params(&mut self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(|p, _| out.extend_from_slice(p));
        out
    }

    pub fn flat_grads(&mut self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(|_, g| out.extend_from_slice(g));
        out
    }

    /// Mutable access to the `index`-th flattened parameter.
    pub fn with_param(&mut self, index: usize, f: impl FnOnce(&mut T)) {
        let mut remaining = index;
        let mut f = Some(f);
        self.visit_params(|p, _| {
            if remaining < p.len() {
                if let Some(f) = f.take() {
                    f(&mut p[remaining]);
                }
                remaining = usize::MAX;
            } else if remaining != usize::MAX {
                remaining -= p.len();
            }
        });
    }
}

/// Mean cross-entropy of a batch of logits and the gradient w.r.t. the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let n = logits.batch();
    let k = logits.item_len();
    let mut grad = Tensor::zeros(logits.shape);
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate().take(n) {
        let z: Vec<f64> = logits.item(b).iter().map(|v| v.to_f64()).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_sum - z[label];
        let probs = SoftmaxOutput::from_logits(&z).probs;
        for (j, p) in probs.iter().enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            grad.data[b * k + j] = T::from_f64((p - target) / n as f64);
        }
    }
    (loss / n as f64, grad)
}
