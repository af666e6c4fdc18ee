//! Python bindings for `lora-rffi`.
//!
//! Signals cross the boundary as lists of Python `complex`, representations
//! as nested lists of floats.

use std::collections::BTreeMap;
use std::path::PathBuf;

use num_complex::Complex64;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lora_rffi::devsim::{self, EmissionContext};
use lora_rffi::harness::{self, ClassifierKind, Config, DatasetFile, FrontEnd, PacketSource, Selection, SyntheticSource};
use lora_rffi::repr::ReprKind;
use lora_rffi::{phy, receiver, ComplexSignal, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for lora_rffi::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().py()
}

fn signal(samples: Vec<Complex64>, params: &lora_rffi::LoRaParams) -> PyResult<ComplexSignal> {
    ComplexSignal::new(samples, params.ts).py()
}

/// Radio configuration shared by transmitter and receiver.
#[pyclass(name = "LoRaParams", module = "lora_rffi", from_py_object)]
#[derive(Clone)]
struct PyLoRaParams(lora_rffi::LoRaParams);

#[pymethods]
impl PyLoRaParams {
    #[new]
    #[pyo3(signature = (sf=7, bw=125e3, fc=868e6, ts=1e-6, n_preambles=8))]
    fn new(sf: u32, bw: f64, fc: f64, ts: f64, n_preambles: usize) -> PyResult<Self> {
        Ok(Self(lora_rffi::LoRaParams::new(sf, bw, fc, ts, n_preambles).py()?))
    }

    #[getter]
    fn sf(&self) -> u32 {
        self.0.sf
    }

    #[getter]
    fn bw(&self) -> f64 {
        self.0.bw
    }

    #[getter]
    fn fc(&self) -> f64 {
        self.0.fc
    }

    #[getter]
    fn ts(&self) -> f64 {
        self.0.ts
    }

    #[getter]
    fn n_preambles(&self) -> usize {
        self.0.n_preambles
    }

    /// Samples per basic chirp.
    fn symbol_length(&self) -> PyResult<usize> {
        phy::symbol_length(&self.0).py()
    }

    fn preamble_len(&self) -> PyResult<usize> {
        self.0.preamble_len().py()
    }

    fn __repr__(&self) -> String {
        let p = &self.0;
        format!(
            "LoRaParams(sf={}, bw={}, fc={}, ts={}, n_preambles={})",
            p.sf, p.bw, p.fc, p.ts, p.n_preambles
        )
    }
}

/// Hardware fingerprint of one simulated transmitter.
#[pyclass(name = "DeviceProfile", module = "lora_rffi", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PyDeviceProfile {
    device_id: u32,
    cfo_base: f64,
    cfo_warmup_amp: f64,
    cfo_warmup_tau: f64,
    cfo_day_sigma: f64,
    cfo_jitter_sigma: f64,
    iq_gain_mismatch: f64,
    iq_phase_error: f64,
    pa_a1: f64,
    pa_a3: f64,
}

impl From<devsim::DeviceProfile> for PyDeviceProfile {
    fn from(p: devsim::DeviceProfile) -> Self {
        Self {
            device_id: p.device_id,
            cfo_base: p.cfo_base,
            cfo_warmup_amp: p.cfo_warmup_amp,
            cfo_warmup_tau: p.cfo_warmup_tau,
            cfo_day_sigma: p.cfo_day_sigma,
            cfo_jitter_sigma: p.cfo_jitter_sigma,
            iq_gain_mismatch: p.iq_gain_mismatch,
            iq_phase_error: p.iq_phase_error,
            pa_a1: p.pa_a1,
            pa_a3: p.pa_a3,
        }
    }
}

impl PyDeviceProfile {
    fn inner(&self) -> devsim::DeviceProfile {
        devsim::DeviceProfile {
            device_id: self.device_id,
            cfo_base: self.cfo_base,
            cfo_warmup_amp: self.cfo_warmup_amp,
            cfo_warmup_tau: self.cfo_warmup_tau,
            cfo_day_sigma: self.cfo_day_sigma,
            cfo_jitter_sigma: self.cfo_jitter_sigma,
            iq_gain_mismatch: self.iq_gain_mismatch,
            iq_phase_error: self.iq_phase_error,
            pa_a1: self.pa_a1,
            pa_a3: self.pa_a3,
        }
    }
}

#[pymethods]
impl PyDeviceProfile {
    /// Unspecified fields take the impairment-free values.
    #[new]
    #[pyo3(signature = (
        device_id, cfo_base=0.0, cfo_warmup_amp=0.0, cfo_warmup_tau=1.0, cfo_day_sigma=0.0,
        cfo_jitter_sigma=0.0, iq_gain_mismatch=1.0, iq_phase_error=0.0, pa_a1=1.0, pa_a3=0.0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        device_id: u32,
        cfo_base: f64,
        cfo_warmup_amp: f64,
        cfo_warmup_tau: f64,
        cfo_day_sigma: f64,
        cfo_jitter_sigma: f64,
        iq_gain_mismatch: f64,
        iq_phase_error: f64,
        pa_a1: f64,
        pa_a3: f64,
    ) -> Self {
        Self {
            device_id,
            cfo_base,
            cfo_warmup_amp,
            cfo_warmup_tau,
            cfo_day_sigma,
            cfo_jitter_sigma,
            iq_gain_mismatch,
            iq_phase_error,
            pa_a1,
            pa_a3,
        }
    }

    /// `count` devices drawn from the default parameter ranges.
    #[staticmethod]
    #[pyo3(signature = (count, seed, fc=868e6))]
    fn population(count: usize, seed: u64, fc: f64) -> Vec<Self> {
        devsim::ProfileRanges::default()
            .sample_population(count, fc, seed)
            .into_iter()
            .map(Self::from)
            .collect()
    }

    /// Session offset added to the CFO of every packet in `session`.
    fn day_offset(&self, session: u32) -> f64 {
        self.inner().day_offset(session)
    }

    fn __repr__(&self) -> String {
        format!("DeviceProfile(device_id={}, cfo_base={:.1})", self.device_id, self.cfo_base)
    }
}

/// The ideal preamble: `n_preambles` repeated up-chirps.
#[pyfunction]
#[pyo3(signature = (params, amplitude=1.0))]
fn preamble(params: &PyLoRaParams, amplitude: f64) -> PyResult<Vec<Complex64>> {
    Ok(phy::preamble_sequence(&params.0, amplitude).py()?.into_samples())
}

/// Synthesizes one packet; returns `(samples, true_cfo)`.
#[pyfunction]
#[pyo3(signature = (params, profile, session=1, elapsed=0.0, snr_db=f64::INFINITY, seed=0, lead=0))]
fn emit_packet(
    params: &PyLoRaParams,
    profile: &PyDeviceProfile,
    session: u32,
    elapsed: f64,
    snr_db: f64,
    seed: u64,
    lead: usize,
) -> PyResult<(Vec<Complex64>, f64)> {
    let ctx = EmissionContext {
        session_index: session,
        elapsed,
        snr_db,
        rng_seed: seed,
    };
    let rec = devsim::emit_packet_padded(&params.0, &profile.inner(), &ctx, lead).py()?;
    Ok((rec.signal.into_samples(), rec.true_cfo))
}

/// Sync, CFO estimation and normalization of one capture.
///
/// Returns a dict with `offset`, `confidence`, `coarse`, `fine`, `cfo`
/// (their sum) and the preamble `samples`.
#[pyfunction]
#[pyo3(signature = (samples, params, compensate=true))]
fn receive<'py>(
    py: Python<'py>,
    samples: Vec<Complex64>,
    params: &PyLoRaParams,
    compensate: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let rx = receiver::receive(&signal(samples, &params.0)?, &params.0, compensate).py()?;
    let d = PyDict::new(py);
    d.set_item("offset", rx.sync.offset)?;
    d.set_item("confidence", rx.sync.confidence)?;
    d.set_item("coarse", rx.cfo.coarse)?;
    d.set_item("fine", rx.cfo.fine)?;
    d.set_item("cfo", rx.cfo.total)?;
    d.set_item("samples", rx.signal.into_samples())?;
    Ok(d)
}

/// Receiver chain plus representation; returns `(matrix, cfo)`.
#[pyfunction]
#[pyo3(signature = (samples, params, representation="spectrogram", compensate=true))]
fn extract(
    samples: Vec<Complex64>,
    params: &PyLoRaParams,
    representation: &str,
    compensate: bool,
) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let fe = FrontEnd::new(params.0, parse::<ReprKind>(representation)?, compensate).py()?;
    let (m, cfo) = fe.extract(&signal(samples, &params.0)?).py()?;
    let rows = (0..m.rows).map(|r| m.row(r).to_vec()).collect();
    Ok((rows, cfo.total))
}

/// Writes a simulated dataset described by a TOML configuration.
///
/// Returns the number of bytes written.
#[pyfunction]
#[pyo3(signature = (out, config=None, seed=None, force=false))]
fn generate(out: PathBuf, config: Option<PathBuf>, seed: Option<u64>, force: bool) -> PyResult<u64> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let source = SyntheticSource::plan(cfg.radio.params().py()?, cfg.profiles().py()?, cfg.capture, cfg.seed).py()?;
    harness::write_dataset(&out, &source, force).py()
}

fn load_config(path: Option<PathBuf>) -> PyResult<Config> {
    match path {
        Some(p) => Config::load(p).py(),
        None => Ok(Config::default()),
    }
}

/// Trains a classifier on a dataset and saves the checkpoint.
///
/// Returns the per-epoch statistics as dicts.
#[pyfunction]
#[pyo3(signature = (dataset, out, config=None, representation=None, compensate=None, force=false))]
fn train<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    representation: Option<&str>,
    compensate: Option<bool>,
    force: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = load_config(config)?;
    let data = DatasetFile::open(&dataset).py()?;
    let kind = match representation {
        Some(r) => parse(r)?,
        None => cfg.train.representation,
    };
    let fe = FrontEnd::new(data.manifest().params, kind, compensate.unwrap_or(cfg.train.compensate)).py()?;
    let (ckpt, report) = py
        .detach(|| harness::train_checkpoint(&data, fe, None, cfg.train_selection(), &cfg.optimizer))
        .py()?;
    ckpt.save(&out, force).py()?;
    report
        .epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("learning_rate", e.learning_rate)?;
            d.set_item("train_loss", e.train_loss)?;
            d.set_item("val_loss", e.val_loss)?;
            d.set_item("val_accuracy", e.val_accuracy)?;
            Ok(d)
        })
        .collect()
}

/// Outcome of classifying a test selection.
#[pyclass(name = "EvalReport", module = "lora_rffi")]
struct PyEvalReport(harness::EvalReport);

#[pymethods]
impl PyEvalReport {
    /// Accuracy of the classifier the report was requested for.
    #[getter]
    fn accuracy(&self) -> f64 {
        self.0.accuracy()
    }

    #[getter]
    fn cnn_accuracy(&self) -> f64 {
        self.0.cnn_accuracy()
    }

    #[getter]
    fn hybrid_accuracy(&self) -> f64 {
        self.0.hybrid_accuracy()
    }

    #[getter]
    fn total(&self) -> u64 {
        self.0.total
    }

    #[getter]
    fn out_of_database(&self) -> u64 {
        self.0.out_of_database
    }

    #[getter]
    fn devices(&self) -> Vec<u32> {
        self.0.devices.clone()
    }

    /// `confusion[true][predicted]`, indexed like `devices`.
    #[getter]
    fn confusion(&self) -> Vec<Vec<u64>> {
        self.0.confusion.clone()
    }

    fn device_accuracy(&self) -> BTreeMap<u32, f64> {
        self.0.device_accuracy().into_iter().collect()
    }

    fn to_text(&self) -> String {
        self.0.to_text(harness::report::timestamp())
    }

    fn to_csv(&self) -> String {
        self.0.to_csv(harness::report::timestamp())
    }
}

/// A trained model with its CFO database and front end.
#[pyclass(name = "Checkpoint", module = "lora_rffi")]
struct PyCheckpoint(harness::Checkpoint);

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(harness::Checkpoint::load(path).py()?))
    }

    #[pyo3(signature = (path, force=false))]
    fn save(&self, path: PathBuf, force: bool) -> PyResult<()> {
        self.0.save(path, force).py()
    }

    #[getter]
    fn classes(&self) -> Vec<u32> {
        self.0.model.classes().to_vec()
    }

    #[getter]
    fn representation(&self) -> String {
        self.0.front_end.kind.to_string()
    }

    #[getter]
    fn compensated(&self) -> bool {
        self.0.front_end.compensate
    }

    #[getter]
    fn params(&self) -> PyLoRaParams {
        PyLoRaParams(self.0.front_end.params)
    }

    /// Reference CFO per device, Hz.
    #[getter]
    fn references(&self) -> BTreeMap<u32, f64> {
        self.0.database.references.clone()
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.0.database.lambda
    }

    /// Classifies one capture.
    ///
    /// Returns a dict with the CNN and hybrid labels, the softmax output,
    /// the gated probabilities, the estimated CFO and the out-of-database flag.
    #[pyo3(signature = (samples, lambda_=None))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        samples: Vec<Complex64>,
        lambda_: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let fe = &self.0.front_end;
        let (m, cfo) = fe.extract(&signal(samples, &fe.params)?).py()?;
        let db = match lambda_ {
            Some(l) => self.0.database.clone().with_lambda(l).py()?,
            None => self.0.database.clone(),
        };
        let model = &self.0.model;
        let decision = model.predict_hybrid(&m, cfo.total, &db).py()?;
        let d = PyDict::new(py);
        d.set_item("cnn", model.classes()[decision.probs.argmax()])?;
        d.set_item("hybrid", decision.label)?;
        d.set_item("cfo", cfo.total)?;
        d.set_item("out_of_database", decision.out_of_database)?;
        d.set_item("probs", decision.probs.probs)?;
        d.set_item("calibrated", decision.calibrated)?;
        Ok(d)
    }

    /// Evaluates on a dataset file.
    ///
    /// Unspecified selection parts follow the training selection, as on the
    /// command line.
    #[pyo3(signature = (dataset, sessions=None, start=None, count=None, classifier="hybrid", lambda_=None, allow_overlap=false))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: PathBuf,
        sessions: Option<Vec<u32>>,
        start: Option<usize>,
        count: Option<usize>,
        classifier: &str,
        lambda_: Option<f64>,
        allow_overlap: bool,
    ) -> PyResult<PyEvalReport> {
        let data = DatasetFile::open(&dataset).py()?;
        let train_sel = &self.0.train_selection;
        let sessions = sessions.unwrap_or_else(|| train_sel.sessions.clone());
        let start = start.unwrap_or(if sessions == train_sel.sessions {
            train_sel.start + train_sel.count.unwrap_or(0)
        } else {
            0
        });
        let mut opts = harness::EvalOptions::new(Selection::new(sessions, start, count));
        opts.classifier = parse::<ClassifierKind>(classifier)?;
        opts.lambda = lambda_;
        opts.allow_overlap = allow_overlap;
        let report = py.detach(|| harness::evaluate(&self.0, &data, &opts)).py()?;
        Ok(PyEvalReport(report))
    }
}

#[pymodule(name = "lora_rffi")]
fn lora_rffi_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLoRaParams>()?;
    m.add_class::<PyDeviceProfile>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyEvalReport>()?;
    m.add_function(wrap_pyfunction!(preamble, m)?)?;
    m.add_function(wrap_pyfunction!(emit_packet, m)?)?;
    m.add_function(wrap_pyfunction!(receive, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
