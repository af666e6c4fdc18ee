//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 7
//!
//! [radio]
//! sf = 7
//! bw = 125000.0
//!
//! [devices]
//! count = 10            # drawn from [devices.ranges], or list [[devices.profile]]
//!
//! [capture]
//! sessions = 4
//! packets_per_session = 2000
//! interval = 0.3
//! snr_db = 30.0
//!
//! [train]
//! representation = "spectrogram"
//! compensate = true
//! train_count = 1000
//!
//! [optimizer]
//! epochs = 30
//!
//! [eval]
//! classifier = "hybrid"
//! lambda = 500.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::{ClassifierKind, EvalOptions, Selection};
use crate::classifier::TrainConfig;
use crate::devsim::{CaptureSchedule, DeviceProfile, ProfileRanges};
use crate::error::{Error, Result};
use crate::phy::LoRaParams;
use crate::repr::ReprKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub sf: u32,
    pub bw: f64,
    pub fc: f64,
    pub ts: f64,
    pub n_preambles: usize,
}

impl Default for RadioConfig {
    fn default() -> Self {
        let p = LoRaParams::default();
        Self {
            sf: p.sf,
            bw: p.bw,
            fc: p.fc,
            ts: p.ts,
            n_preambles: p.n_preambles,
        }
    }
}

impl RadioConfig {
    pub fn params(&self) -> Result<LoRaParams> {
        LoRaParams::new(self.sf, self.bw, self.fc, self.ts, self.n_preambles)
            .map_err(|e| Error::Config(format!("radio: {}", strip_config(e))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DevicesConfig {
    /// Number of devices drawn from `ranges`; ignored when `profile` is given.
    pub count: usize,
    pub ranges: ProfileRanges,
    pub profile: Vec<DeviceProfile>,
}

impl Default for DevicesConfig {
    fn default() -> Self {
        Self {
            count: 10,
            ranges: ProfileRanges::default(),
            profile: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub representation: ReprKind,
    pub compensate: bool,
    /// Packets per device taken from the start of each training session.
    pub train_count: usize,
    pub sessions: Vec<u32>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            representation: ReprKind::Spectrogram,
            compensate: true,
            train_count: 1000,
            sessions: vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub classifier: ClassifierKind,
    /// CFO gate in Hz; absent means the checkpoint's stored threshold.
    pub lambda: Option<f64>,
    /// Test sessions; defaults to the training sessions.
    pub sessions: Option<Vec<u32>>,
    /// First test packet per device; defaults to `train_count` when the
    /// test sessions are the training sessions, else 0.
    pub start: Option<usize>,
    pub count: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            classifier: ClassifierKind::Hybrid,
            lambda: None,
            sessions: None,
            start: None,
            count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub radio: RadioConfig,
    pub devices: DevicesConfig,
    pub capture: CaptureSchedule,
    pub train: TrainSection,
    pub optimizer: TrainConfig,
    pub eval: EvalSection,
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(text, e.span())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let params = self.radio.params()?;
        if self.devices.profile.is_empty() && self.devices.count < 2 {
            return Err(Error::Config(format!(
                "devices.count must be at least 2, got {}",
                self.devices.count
            )));
        }
        if !self.devices.profile.is_empty() && self.devices.profile.len() < 2 {
            return Err(Error::Config("devices.profile must list at least 2 devices".into()));
        }
        for p in &self.devices.profile {
            p.validate(params.fc)
                .map_err(|e| Error::Config(format!("devices.profile: {}", strip_config(e))))?;
        }
        self.capture.validate()?;
        if self.train.train_count == 0 {
            return Err(Error::Config("train.train_count must be at least 1".into()));
        }
        if self.train.sessions.is_empty() {
            return Err(Error::Config("train.sessions must name at least one session".into()));
        }
        for &s in &self.train.sessions {
            if s == 0 || s > self.capture.sessions {
                return Err(Error::Config(format!(
                    "train.sessions: session {s} is outside 1..={}",
                    self.capture.sessions
                )));
            }
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::Config(format!("optimizer: {}", strip_config(e))))?;
        if let Some(l) = self.eval.lambda {
            if !(l > 0.0) {
                return Err(Error::Config(format!("eval.lambda must be positive, got {l}")));
            }
        }
        Ok(())
    }

    /// Explicit profiles, or `devices.count` draws from the ranges.
    pub fn profiles(&self) -> Result<Vec<DeviceProfile>> {
        if !self.devices.profile.is_empty() {
            return Ok(self.devices.profile.clone());
        }
        let params = self.radio.params()?;
        Ok(self.devices.ranges.sample_population(self.devices.count, params.fc, self.seed))
    }

    pub fn train_selection(&self) -> Selection {
        Selection::head(self.train.sessions.clone(), self.train.train_count)
    }

    pub fn test_selection(&self) -> Selection {
        let sessions = self.eval.sessions.clone().unwrap_or_else(|| self.train.sessions.clone());
        let start = self.eval.start.unwrap_or(if sessions == self.train.sessions {
            self.train.train_count
        } else {
            0
        });
        Selection::new(sessions, start, self.eval.count)
    }

    pub fn eval_options(&self) -> EvalOptions {
        let mut opts = EvalOptions::new(self.test_selection());
        opts.classifier = self.eval.classifier;
        opts.lambda = self.eval.lambda;
        opts
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
