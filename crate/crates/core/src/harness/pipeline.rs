//! Train and evaluate classifiers over a packet source.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetManifest, PacketSource, RecordMeta};
use super::report::{CfoStats, EvalReport};
use crate::classifier::{decide_hybrid, train, CfoDatabase, CnnSpec, Model, TrainConfig, TrainReport, TrainingSet};
use crate::error::{Error, Result};
use crate::phy::{ComplexSignal, LoRaParams};
use crate::receiver::{receive, CfoEstimate};
use crate::repr::{represent, Matrix, ReprConfig, ReprKind};

/// Packets `start .. start + count` of every device in each listed session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub sessions: Vec<u32>,
    pub start: usize,
    /// `None` runs to the end of the session.
    pub count: Option<usize>,
}

impl Selection {
    pub fn new(sessions: Vec<u32>, start: usize, count: Option<usize>) -> Self {
        let mut sessions = sessions;
        sessions.sort_unstable();
        sessions.dedup();
        Self { sessions, start, count }
    }

    /// The first `count` packets of each device in `sessions`.
    pub fn head(sessions: Vec<u32>, count: usize) -> Self {
        Self::new(sessions, 0, Some(count))
    }

    /// Everything from packet `start` on.
    pub fn tail(sessions: Vec<u32>, start: usize) -> Self {
        Self::new(sessions, start, None)
    }

    fn end(&self) -> usize {
        self.count.map_or(usize::MAX, |c| self.start.saturating_add(c))
    }

    pub fn contains(&self, meta: &RecordMeta) -> bool {
        let i = meta.packet_index as usize;
        self.sessions.contains(&meta.session_index) && i >= self.start && i < self.end()
    }

    pub fn indices(&self, manifest: &DatasetManifest) -> Vec<usize> {
        manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, m)| self.contains(m))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn overlaps(&self, other: &Selection) -> bool {
        self.sessions.iter().any(|s| other.sessions.contains(s))
            && self.start < other.end()
            && other.start < self.end()
    }

    /// Checks that every device has exactly `count` packets selected, if bounded.
    pub fn check_against(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.sessions.is_empty() {
            return Err(Error::Dataset("selection names no sessions".into()));
        }
        if let Some(&s) = self.sessions.iter().find(|&&s| s == 0 || s > manifest.schedule.sessions) {
            return Err(Error::Dataset(format!(
                "session {s} is not in the dataset (sessions 1..={})",
                manifest.schedule.sessions
            )));
        }
        let available = manifest.schedule.packets_per_session;
        if self.end() != usize::MAX && self.end() > available || self.start >= available {
            return Err(Error::Dataset(format!(
                "selection {self} needs more than the {available} packets per session in the dataset"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sessions: Vec<String> = self.sessions.iter().map(|s| s.to_string()).collect();
        match self.count {
            Some(c) => write!(f, "sessions [{}] packets {}..{}", sessions.join(","), self.start, self.start + c),
            None => write!(f, "sessions [{}] packets {}..end", sessions.join(","), self.start),
        }
    }
}

/// How raw packets become network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontEnd {
    pub params: LoRaParams,
    pub kind: ReprKind,
    pub repr: ReprConfig,
    pub compensate: bool,
}

impl FrontEnd {
    pub fn new(params: LoRaParams, kind: ReprKind, compensate: bool) -> Result<Self> {
        Ok(Self {
            params,
            kind,
            repr: ReprConfig::new(params.preamble_len()?),
            compensate,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let (h, w) = self.repr.shape(self.kind);
        [1, h, w]
    }

    /// The default network for this front end.
    pub fn default_spec(&self, classes: usize) -> CnnSpec {
        match self.kind {
            ReprKind::Iq | ReprKind::Fft => CnnSpec::iq(self.repr.n_samples, classes),
            ReprKind::Spectrogram => {
                let (rows, cols) = self.repr.shape(ReprKind::Spectrogram);
                CnnSpec::spectrogram(rows, cols, classes)
            }
        }
    }

    /// Receiver chain followed by the representation.
    pub fn extract(&self, signal: &ComplexSignal) -> Result<(Matrix, CfoEstimate)> {
        let rx = receive(signal, &self.params, self.compensate)?;
        Ok((represent(&rx.signal, self.kind, &self.repr)?, rx.cfo))
    }
}

/// The trained model with everything needed to reproduce its inputs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub database: CfoDatabase,
    pub front_end: FrontEnd,
    pub train_selection: Selection,
    pub dataset_seed: u64,
    pub dataset_digest: [u8; 32],
}

/// Builds the training set for `selection`, labelled by true device.
pub fn collect(source: &dyn PacketSource, front_end: &FrontEnd, selection: &Selection) -> Result<TrainingSet> {
    let manifest = source.manifest();
    if manifest.params != front_end.params {
        return Err(Error::Config("dataset radio parameters differ from the front end's".into()));
    }
    selection.check_against(manifest)?;
    let mut set = TrainingSet::new(front_end.input_shape(), manifest.device_ids());
    for i in selection.indices(manifest) {
        let meta = &manifest.records[i];
        let (m, cfo) = front_end.extract(&source.load(i)?)?;
        set.push_matrix(&m, meta.true_device, cfo.total)?;
    }
    Ok(set)
}

/// Trains a classifier on `selection` of `source`.
pub fn train_checkpoint(
    source: &dyn PacketSource,
    front_end: FrontEnd,
    spec: Option<CnnSpec>,
    selection: Selection,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    let set = collect(source, &front_end, &selection)?;
    let spec = spec.unwrap_or_else(|| front_end.default_spec(set.classes().len()));
    let trained = train(&spec, cfg, &set)?;
    let manifest = source.manifest();
    Ok((
        Checkpoint {
            model: trained.model,
            database: trained.database,
            front_end,
            train_selection: selection,
            dataset_seed: manifest.master_seed,
            dataset_digest: manifest.profiles_digest(),
        },
        trained.report,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Cnn,
    Hybrid,
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Cnn => "cnn",
            ClassifierKind::Hybrid => "hybrid",
        })
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(ClassifierKind::Cnn),
            "hybrid" => Ok(ClassifierKind::Hybrid),
            other => Err(Error::Config(format!("unknown classifier '{other}' (expected cnn or hybrid)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub classifier: ClassifierKind,
    /// Overrides the checkpoint's threshold.
    pub lambda: Option<f64>,
    pub selection: Selection,
    /// Compensation mode requested for the test packets; must match training.
    pub compensate: Option<bool>,
    pub allow_overlap: bool,
}

impl EvalOptions {
    pub fn new(selection: Selection) -> Self {
        Self {
            classifier: ClassifierKind::Hybrid,
            lambda: None,
            selection,
            compensate: None,
            allow_overlap: false,
        }
    }
}

const EVAL_BATCH: usize = 32;

/// Classifies every selected packet with both the CNN and the hybrid rule.
pub fn evaluate(ckpt: &Checkpoint, source: &dyn PacketSource, opts: &EvalOptions) -> Result<EvalReport> {
    let manifest = source.manifest();
    let fe = &ckpt.front_end;
    if let Some(c) = opts.compensate {
        if c != fe.compensate {
            return Err(Error::ModeMismatch(format!(
                "checkpoint was trained {} CFO compensation but evaluation asked for {}",
                if fe.compensate { "with" } else { "without" },
                if c { "compensation" } else { "none" }
            )));
        }
    }
    if manifest.params != fe.params {
        return Err(Error::Config("dataset radio parameters differ from the checkpoint's".into()));
    }
    opts.selection.check_against(manifest)?;
    let same_dataset = manifest.master_seed == ckpt.dataset_seed && manifest.profiles_digest() == ckpt.dataset_digest;
    if same_dataset && !opts.allow_overlap && opts.selection.overlaps(&ckpt.train_selection) {
        return Err(Error::Dataset(format!(
            "test selection ({}) overlaps the training selection ({}); pass --allow-overlap to proceed",
            opts.selection, ckpt.train_selection
        )));
    }
    let classes = ckpt.model.classes().to_vec();
    for id in manifest.device_ids() {
        if classes.binary_search(&id).is_err() {
            return Err(Error::Dataset(format!("dataset device {id} is unknown to the checkpoint")));
        }
    }
    let db = match opts.lambda {
        Some(l) => ckpt.database.clone().with_lambda(l)?,
        None => ckpt.database.clone(),
    };
    for &c in &classes {
        if !db.references.contains_key(&c) {
            return Err(Error::DatabaseIntegrity(c));
        }
    }

    let mut report = EvalReport::new(
        fe.kind,
        fe.compensate,
        opts.classifier,
        db.lambda,
        classes.clone(),
        ckpt.train_selection.clone(),
        opts.selection.clone(),
    );
    let mut cfo: BTreeMap<(u32, u32), CfoStats> = BTreeMap::new();
    let indices = opts.selection.indices(manifest);
    let input_len: usize = fe.input_shape().iter().product();
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut inputs = Vec::with_capacity(chunk.len() * input_len);
        let mut estimates = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let (m, est) = fe.extract(&source.load(i)?)?;
            inputs.extend(m.data.iter().map(|&v| v as f32));
            estimates.push(est);
        }
        let outputs = ckpt.model.forward_batch(&inputs, chunk.len())?;
        for ((&i, probs), est) in chunk.iter().zip(outputs).zip(estimates) {
            let meta = &manifest.records[i];
            let cnn = classes[probs.argmax()];
            let hybrid = decide_hybrid(&classes, probs, est.total, &db)?;
            report.record(meta.true_device, cnn, hybrid.label, hybrid.out_of_database);
            cfo.entry((meta.true_device, meta.session_index))
                .or_default()
                .push(est.total, meta.true_cfo);
        }
    }
    report.cfo = cfo;
    Ok(report)
}
