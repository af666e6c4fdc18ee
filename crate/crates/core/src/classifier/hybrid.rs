//! Softmax outputs, the per-device CFO database and CFO-gated decisions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default gating threshold in Hz.
pub const DEFAULT_LAMBDA: f64 = 200.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxOutput {
    pub probs: Vec<f64>,
}

impl SoftmaxOutput {
    pub fn from_logits(z: &[f64]) -> Self {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        Self {
            probs: exp.into_iter().map(|e| e / sum).collect(),
        }
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Reference CFO per device plus the gating threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfoDatabase {
    pub references: BTreeMap<u32, f64>,
    pub lambda: f64,
}

impl CfoDatabase {
    pub fn new(references: BTreeMap<u32, f64>, lambda: f64) -> Result<Self> {
        let db = Self { references, lambda };
        db.validate()?;
        Ok(db)
    }

    /// Per-device mean of the given `(device, cfo)` estimates.
    pub fn from_estimates(estimates: impl IntoIterator<Item = (u32, f64)>, lambda: f64) -> Result<Self> {
        let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for (device, cfo) in estimates {
            let e = sums.entry(device).or_insert((0.0, 0));
            e.0 += cfo;
            e.1 += 1;
        }
        let references = sums.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect();
        Self::new(references, lambda)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be > 0 Hz, got {}", self.lambda)));
        }
        if let Some((d, _)) = self.references.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Config(format!("reference CFO for device {d} is not finite")));
        }
        Ok(())
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        self.lambda = lambda;
        self.validate()?;
        Ok(self)
    }

    /// Zeroes every probability whose device reference lies farther than
    /// `lambda` from `dut_cfo`. `classes[k]` names the device behind `probs[k]`.
    pub fn gate(&self, classes: &[u32], probs: &[f64], dut_cfo: f64) -> Result<Vec<f64>> {
        classes
            .iter()
            .zip(probs)
            .map(|(device, &p)| {
                let reference = self
                    .references
                    .get(device)
                    .ok_or(Error::DatabaseIntegrity(*device))?;
                Ok(if (dut_cfo - reference).abs() > self.lambda { 0.0 } else { p })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridDecision {
    pub label: u32,
    pub probs: SoftmaxOutput,
    /// Probabilities after gating, not renormalized.
    pub calibrated: Vec<f64>,
    /// Every class was gated out; `label` is the ungated argmax.
    pub out_of_database: bool,
}

/// Applies the CFO gate to a softmax output over `classes`.
pub fn decide_hybrid(classes: &[u32], probs: SoftmaxOutput, dut_cfo: f64, db: &CfoDatabase) -> Result<HybridDecision> {
    let calibrated = db.gate(classes, &probs.probs, dut_cfo)?;
    let out_of_database = calibrated.iter().all(|&p| p == 0.0);
    let index = if out_of_database { probs.argmax() } else { argmax(&calibrated) };
    Ok(HybridDecision {
        label: classes[index],
        probs,
        calibrated,
        out_of_database,
    })
}
