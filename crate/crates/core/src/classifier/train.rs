//! Mini-batch Adam training with step-decay learning rate and early stopping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::hybrid::{decide_hybrid, CfoDatabase, HybridDecision, SoftmaxOutput, DEFAULT_LAMBDA};
use super::network::{cross_entropy, Network};
use super::spec::CnnSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::repr::Matrix;
use crate::seed;

const STREAM_INIT: u64 = 0x1417;
const STREAM_SPLIT: u64 = 0x5917;
const STREAM_SHUFFLE: u64 = 0x54ff;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub initial_lr: f64,
    pub lr_drop_period: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    /// Stop after this many epochs without a lower validation loss.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            initial_lr: 3e-4,
            lr_drop_period: 10,
            lr_drop_factor: 0.3,
            batch_size: 32,
            epochs: 30,
            validation_fraction: 0.1,
            patience: Some(5),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, rule: &str| Err(Error::Config(format!("train.{field} must be {rule}")));
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "> 0");
        }
        if !(self.initial_lr > 0.0) {
            return bad("initial_lr", "> 0");
        }
        if self.lr_drop_period == 0 {
            return bad("lr_drop_period", ">= 1");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("lr_drop_factor", "in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", ">= 1");
        }
        if self.epochs == 0 {
            return bad("epochs", ">= 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction", "in [0, 1)");
        }
        if self.patience == Some(0) {
            return bad("patience", ">= 1");
        }
        Ok(())
    }

    /// Learning rate during `epoch`, counted from 1.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let drops = epoch.saturating_sub(1) / self.lr_drop_period;
        self.initial_lr * self.lr_drop_factor.powi(drops as i32)
    }
}

/// Representation tensors with their device labels and total CFO estimates.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    input_shape: [usize; 3],
    classes: Vec<u32>,
    inputs: Vec<f32>,
    labels: Vec<u32>,
    cfos: Vec<f64>,
}

impl TrainingSet {
    /// An empty set expecting inputs of `input_shape` labelled with one of `classes`.
    pub fn new(input_shape: [usize; 3], mut classes: Vec<u32>) -> Self {
        classes.sort_unstable();
        classes.dedup();
        Self {
            input_shape,
            classes,
            inputs: Vec::new(),
            labels: Vec::new(),
            cfos: Vec::new(),
        }
    }

    pub fn push(&mut self, input: &[f32], label: u32, cfo: f64) -> Result<()> {
        let want: usize = self.input_shape.iter().product();
        if input.len() != want {
            return Err(Error::shape(format!("{:?}", self.input_shape), input.len().to_string()));
        }
        if self.classes.binary_search(&label).is_err() {
            return Err(Error::Dataset(format!("label {label} is not one of the declared classes")));
        }
        self.inputs.extend_from_slice(input);
        self.labels.push(label);
        self.cfos.push(cfo);
        Ok(())
    }

    pub fn push_matrix(&mut self, input: &Matrix, label: u32, cfo: f64) -> Result<()> {
        let data: Vec<f32> = input.data.iter().map(|&v| v as f32).collect();
        self.push(&data, label, cfo)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input(&self, i: usize) -> &[f32] {
        let n: usize = self.input_shape.iter().product();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn cfos(&self) -> &[f64] {
        &self.cfos
    }

    fn check(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Dataset(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        for &c in &self.classes {
            if !self.labels.contains(&c) {
                return Err(Error::Dataset(format!("class {c} has no samples")));
            }
        }
        Ok(())
    }

    fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let [c, h, w] = self.input_shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.input(i));
            labels.push(self.classes.binary_search(&self.labels[i]).expect("validated label"));
        }
        (Tensor::from_vec([indices.len(), c, h, w], data), labels)
    }
}

/// A trained network over a fixed, sorted set of device ids.
#[derive(Debug, Clone)]
pub struct Model {
    net: Network<f32>,
    classes: Vec<u32>,
}

impl Model {
    pub fn from_parts(net: Network<f32>, classes: Vec<u32>) -> Result<Self> {
        if classes.len() != net.classes() {
            return Err(Error::shape(net.classes().to_string(), classes.len().to_string()));
        }
        if classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("model classes must be strictly increasing".into()));
        }
        Ok(Self { net, classes })
    }

    pub fn spec(&self) -> &CnnSpec {
        self.net.spec()
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// Softmax outputs for a batch of flattened inputs.
    pub fn forward_batch(&self, inputs: &[f32], count: usize) -> Result<Vec<SoftmaxOutput>> {
        let [c, h, w] = self.spec().input;
        if inputs.len() != count * c * h * w {
            return Err(Error::shape(
                format!("{count} x {:?}", self.spec().input),
                inputs.len().to_string(),
            ));
        }
        let x = Tensor::from_vec([count, c, h, w], inputs.to_vec());
        let z = self.net.logits(&x)?;
        Ok((0..count)
            .map(|b| {
                let row: Vec<f64> = z.item(b).iter().map(|&v| v as f64).collect();
                SoftmaxOutput::from_logits(&row)
            })
            .collect())
    }

    pub fn forward(&self, input: &Matrix) -> Result<SoftmaxOutput> {
        let [_, h, w] = self.spec().input;
        if input.shape() != (h, w) {
            return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", input.rows, input.cols)));
        }
        let data: Vec<f32> = input.data.iter().map(|&v| v as f32).collect();
        Ok(self.forward_batch(&data, 1)?.remove(0))
    }

    pub fn predict_cnn(&self, input: &Matrix) -> Result<(u32, SoftmaxOutput)> {
        let probs = self.forward(input)?;
        Ok((self.classes[probs.argmax()], probs))
    }

    pub fn predict_hybrid(&self, input: &Matrix, dut_cfo: f64, db: &CfoDatabase) -> Result<HybridDecision> {
        decide_hybrid(&self.classes, self.forward(input)?, dut_cfo, db)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of the untrained network.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub train_count: usize,
    pub val_count: usize,
}

impl TrainReport {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .and_then(|e| e.val_accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub database: CfoDatabase,
    pub report: TrainReport,
}

/// Per-class random split; every class keeps at least one training sample.
fn split(data: &TrainingSet, fraction: f64, seed_value: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seed::rng(&[STREAM_SPLIT, seed_value]);
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in data.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).min(idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    fn update(&mut self, net: &mut Network<f32>, cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let step_size = (lr * (1.0 - b2.powi(self.step)).sqrt() / (1.0 - b1.powi(self.step))) as f32;
        let eps_hat = (cfg.epsilon * (1.0 - b2.powi(self.step)).sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        let mut offset = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        net.visit_params(|p, g| {
            let m = &mut m[offset..offset + p.len()];
            let v = &mut v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps_hat);
            }
            offset += p.len();
        });
    }
}

/// Mean loss and accuracy in inference mode.
fn evaluate(net: &Network<f32>, data: &TrainingSet, indices: &[usize], batch_size: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = data.batch(chunk);
        let z = net.logits(&x)?;
        let (l, _) = cross_entropy(&z, &labels);
        loss += l * chunk.len() as f64;
        for (b, &label) in labels.iter().enumerate() {
            let row: Vec<f64> = z.item(b).iter().map(|&v| v as f64).collect();
            if super::hybrid::argmax(&row) == label {
                correct += 1;
            }
        }
    }
    let n = indices.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains `spec` on `data` and populates the CFO database from all of its
/// samples (training and validation alike).
pub fn train(spec: &CnnSpec, cfg: &TrainConfig, data: &TrainingSet) -> Result<Trained> {
    cfg.validate()?;
    data.check()?;
    if spec.input != data.input_shape {
        return Err(Error::shape(
            format!("{:?}", spec.input),
            format!("{:?}", data.input_shape),
        ));
    }
    if spec.classes() != data.classes.len() {
        return Err(Error::shape(
            format!("{} classes", spec.classes()),
            format!("{} classes", data.classes.len()),
        ));
    }

    let mut net = Network::<f32>::new(spec, seed::derive(&[STREAM_INIT, cfg.seed]))?;
    let (train_idx, val_idx) = split(data, cfg.validation_fraction, cfg.seed);
    let mut adam = Adam::new(net.flat_params().len());
    let mut shuffle_rng = seed::rng(&[STREAM_SHUFFLE, cfg.seed]);

    // batch statistics on a throwaway copy so running stats stay untouched
    let initial_loss = {
        let mut probe = net.clone();
        let mut total = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk);
            let z = probe.logits_train(x)?;
            total += cross_entropy(&z, &labels).0 * chunk.len() as f64;
        }
        total / train_idx.len() as f64
    };

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Network<f32>)> = None;
    let mut stale = 0;
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.batch(chunk);
            let z = net.logits_train(x)?;
            let (loss, grad) = cross_entropy(&z, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch + 1,
                    loss,
                });
            }
            total += loss * chunk.len() as f64;
            net.zero_grads();
            net.backward(grad);
            adam.update(&mut net, cfg, lr);
        }
        let train_loss = total / order.len() as f64;

        let (val_loss, val_accuracy) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(&net, data, &val_idx, cfg.batch_size)?;
            (Some(l), Some(a))
        };
        epochs.push(EpochStats {
            epoch,
            learning_rate: lr,
            train_loss,
            val_loss,
            val_accuracy,
        });

        let score = val_loss.unwrap_or(train_loss);
        match &best {
            Some((b, _, _)) if score >= *b => stale += 1,
            _ => {
                best = Some((score, epoch, net.clone()));
                stale = 0;
            }
        }
        if cfg.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }

    let (_, best_epoch, net) = best.expect("at least one epoch ran");
    let database = CfoDatabase::from_estimates(
        data.labels.iter().copied().zip(data.cfos.iter().copied()),
        DEFAULT_LAMBDA,
    )?;
    Ok(Trained {
        model: Model::from_parts(net, data.classes.clone())?,
        database,
        report: TrainReport {
            initial_loss,
            epochs,
            best_epoch,
            train_count: train_idx.len(),
            val_count: val_idx.len(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(1), 3e-4);
        assert_eq!(cfg.learning_rate(10), 3e-4);
        assert!((cfg.learning_rate(11) - 9e-5).abs() < 1e-18);
        assert!((cfg.learning_rate(21) - 2.7e-5).abs() < 1e-18);
    }

    fn toy_set(classes: &[u32], per_class: usize) -> TrainingSet {
        let mut set = TrainingSet::new([1, 8, 8], classes.to_vec());
        let mut rng = seed::rng(&[1]);
        use rand_distr::{Distribution, Normal};
        let noise = Normal::new(0.0, 0.3).unwrap();
        for &c in classes {
            for _ in 0..per_class {
                let x: Vec<f32> = (0..64)
                    .map(|i| (if i % 3 == c as usize % 3 { 1.0 } else { -1.0 }) + noise.sample(&mut rng) as f32)
                    .collect();
                set.push(&x, c, c as f64 * 1000.0).unwrap();
            }
        }
        set
    }

    #[test]
    fn dataset_errors() {
        let spec = CnnSpec::spectrogram_with(8, 8, 1, [2, 2, 2]);
        let one = toy_set(&[1], 10);
        assert!(matches!(
            train(&spec, &TrainConfig::default(), &one),
            Err(Error::Dataset(_))
        ));
        let mut missing = toy_set(&[1, 2], 10);
        missing.classes.push(3);
        let spec = CnnSpec::spectrogram_with(8, 8, 3, [2, 2, 2]);
        assert!(matches!(
            train(&spec, &TrainConfig::default(), &missing),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let set = toy_set(&[1, 2, 3], 20);
        let (train, val) = split(&set, 0.1, 4);
        assert_eq!(train.len() + val.len(), 60);
        assert_eq!(val.len(), 6);
        assert!(train.iter().all(|i| !val.contains(i)));
    }

    #[test]
    fn learns_toy_problem_and_populates_database() {
        let set = toy_set(&[1, 2, 3], 40);
        let spec = CnnSpec::spectrogram_with(8, 8, 3, [4, 4, 4]);
        let cfg = TrainConfig {
            initial_lr: 1e-2,
            epochs: 20,
            ..TrainConfig::default()
        };
        let out = train(&spec, &cfg, &set).unwrap();
        assert!(out.report.epochs[0].train_loss < out.report.initial_loss);
        assert!(out.report.final_val_accuracy().unwrap() > 0.9);
        assert_eq!(out.database.references.len(), 3);
        assert_eq!(out.database.references[&2], 2000.0);
    }

    #[test]
    fn training_is_deterministic() {
        let set = toy_set(&[1, 2], 20);
        let spec = CnnSpec::spectrogram_with(8, 8, 2, [2, 2, 2]);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train(&spec, &cfg, &set).unwrap();
        let b = train(&spec, &cfg, &set).unwrap();
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn divergence_is_reported() {
        let mut set = toy_set(&[1, 2], 8);
        set.inputs[0] = f32::NAN;
        let spec = CnnSpec::spectrogram_with(8, 8, 2, [2, 2, 2]);
        let cfg = TrainConfig {
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&spec, &cfg, &set),
            Err(Error::Divergence { epoch: 1, .. })
        ));
    }

    #[test]
    fn zeroed_dense_gives_uniform_output() {
        let spec = CnnSpec::spectrogram_with(8, 8, 4, [2, 2, 2]);
        let mut net = Network::<f32>::new(&spec, 0).unwrap();
        for layer in net.layers_mut() {
            if let super::super::network::Layer::Dense(d) = layer {
                d.weight.fill(0.0);
                d.bias.fill(0.0);
            }
        }
        let model = Model::from_parts(net, vec![1, 2, 3, 4]).unwrap();
        let input = Matrix {
            rows: 8,
            cols: 8,
            data: (0..64).map(|v| v as f64).collect(),
        };
        let (label, probs) = model.predict_cnn(&input).unwrap();
        assert_eq!(label, 1);
        for p in probs.probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
        let wrong = Matrix {
            rows: 8,
            cols: 5,
            data: vec![0.0; 40],
        };
        assert!(matches!(model.forward(&wrong), Err(Error::Shape { .. })));
    }
}
