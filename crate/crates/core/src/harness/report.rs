//! Evaluation and CFO reports, rendered as text and CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use super::dataset::PacketSource;
use super::pipeline::{ClassifierKind, Selection};
use crate::error::Result;
use crate::receiver::receive;
use crate::repr::ReprKind;

/// Running statistics of estimated vs true CFO.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CfoStats {
    pub count: usize,
    sum_est: f64,
    sum_est_sq: f64,
    sum_true: f64,
    sum_err_sq: f64,
    max_abs_err: f64,
}

impl CfoStats {
    pub fn push(&mut self, estimate: f64, truth: f64) {
        let err = estimate - truth;
        self.count += 1;
        self.sum_est += estimate;
        self.sum_est_sq += estimate * estimate;
        self.sum_true += truth;
        self.sum_err_sq += err * err;
        self.max_abs_err = self.max_abs_err.max(err.abs());
    }

    pub fn mean_estimate(&self) -> f64 {
        self.sum_est / self.count as f64
    }

    pub fn std_estimate(&self) -> f64 {
        let m = self.mean_estimate();
        (self.sum_est_sq / self.count as f64 - m * m).max(0.0).sqrt()
    }

    pub fn mean_true(&self) -> f64 {
        self.sum_true / self.count as f64
    }

    pub fn rms_error(&self) -> f64 {
        (self.sum_err_sq / self.count as f64).sqrt()
    }

    pub fn max_abs_error(&self) -> f64 {
        self.max_abs_err
    }
}

/// Seconds since the Unix epoch, for report header lines.
pub fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub representation: ReprKind,
    pub compensated: bool,
    /// Classifier behind `confusion`.
    pub classifier: ClassifierKind,
    pub lambda: f64,
    pub devices: Vec<u32>,
    /// `confusion[true][predicted]`, indexed like `devices`.
    pub confusion: Vec<Vec<u64>>,
    pub cnn_correct: u64,
    pub hybrid_correct: u64,
    pub out_of_database: u64,
    pub total: u64,
    /// Keyed by `(device, session)`.
    pub cfo: BTreeMap<(u32, u32), CfoStats>,
    pub train_selection: Selection,
    pub test_selection: Selection,
}

impl EvalReport {
    pub fn new(
        representation: ReprKind,
        compensated: bool,
        classifier: ClassifierKind,
        lambda: f64,
        devices: Vec<u32>,
        train_selection: Selection,
        test_selection: Selection,
    ) -> Self {
        let k = devices.len();
        Self {
            representation,
            compensated,
            classifier,
            lambda,
            devices,
            confusion: vec![vec![0; k]; k],
            cnn_correct: 0,
            hybrid_correct: 0,
            out_of_database: 0,
            total: 0,
            cfo: BTreeMap::new(),
            train_selection,
            test_selection,
        }
    }

    fn index(&self, device: u32) -> usize {
        self.devices
            .binary_search(&device)
            .expect("device validated against the checkpoint")
    }

    pub fn record(&mut self, truth: u32, cnn: u32, hybrid: u32, out_of_database: bool) {
        self.total += 1;
        self.cnn_correct += (cnn == truth) as u64;
        self.hybrid_correct += (hybrid == truth) as u64;
        self.out_of_database += out_of_database as u64;
        let predicted = match self.classifier {
            ClassifierKind::Cnn => cnn,
            ClassifierKind::Hybrid => hybrid,
        };
        let (t, p) = (self.index(truth), self.index(predicted));
        self.confusion[t][p] += 1;
    }

    fn ratio(n: u64, d: u64) -> f64 {
        if d == 0 {
            0.0
        } else {
            n as f64 / d as f64
        }
    }

    /// Accuracy of the selected classifier, `trace(confusion) / total`.
    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.devices.len()).map(|i| self.confusion[i][i]).sum();
        Self::ratio(trace, self.total)
    }

    pub fn cnn_accuracy(&self) -> f64 {
        Self::ratio(self.cnn_correct, self.total)
    }

    pub fn hybrid_accuracy(&self) -> f64 {
        Self::ratio(self.hybrid_correct, self.total)
    }

    pub fn device_accuracy(&self) -> Vec<(u32, f64)> {
        self.devices
            .iter()
            .enumerate()
            .map(|(i, &d)| (d, Self::ratio(self.confusion[i][i], self.confusion[i].iter().sum())))
            .collect()
    }

    /// Human-readable report. Only the first line varies between identical runs.
    pub fn to_text(&self, timestamp: u64) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# lora-rffi evaluation report, generated at unix time {timestamp}");
        let _ = writeln!(s, "representation: {}", self.representation);
        let _ = writeln!(s, "cfo compensation: {}", if self.compensated { "on" } else { "off" });
        let _ = writeln!(s, "classifier: {}", self.classifier);
        let _ = writeln!(s, "lambda: {} Hz", self.lambda);
        let _ = writeln!(s, "train selection: {}", self.train_selection);
        let _ = writeln!(s, "test selection: {}", self.test_selection);
        let _ = writeln!(s, "test packets: {}", self.total);
        let _ = writeln!(s, "accuracy: {:.4}", self.accuracy());
        let _ = writeln!(s, "cnn-only accuracy: {:.4}", self.cnn_accuracy());
        let _ = writeln!(s, "hybrid accuracy: {:.4}", self.hybrid_accuracy());
        let _ = writeln!(s, "out-of-database packets: {}", self.out_of_database);
        let _ = writeln!(s);
        let _ = writeln!(s, "confusion matrix (rows = true device, columns = predicted):");
        let width = self
            .confusion
            .iter()
            .flatten()
            .map(|v| v.to_string().len())
            .chain(self.devices.iter().map(|d| d.to_string().len()))
            .max()
            .unwrap_or(1)
            + 1;
        let _ = write!(s, "{:>w$}", "", w = width);
        for d in &self.devices {
            let _ = write!(s, "{d:>width$}");
        }
        let _ = writeln!(s);
        for (i, d) in self.devices.iter().enumerate() {
            let _ = write!(s, "{d:>width$}");
            for v in &self.confusion[i] {
                let _ = write!(s, "{v:>width$}");
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "per-device accuracy:");
        for (d, a) in self.device_accuracy() {
            let _ = writeln!(s, "  device {d}: {a:.4}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "cfo per device and session (Hz): mean estimate, std, mean true, rms error");
        for ((d, session), c) in &self.cfo {
            let _ = writeln!(
                s,
                "  device {d} session {session}: {:.2} {:.2} {:.2} {:.3}",
                c.mean_estimate(),
                c.std_estimate(),
                c.mean_true(),
                c.rms_error()
            );
        }
        s
    }

    /// Long-format table: `metric,device,session,predicted,value`.
    pub fn to_csv(&self, timestamp: u64) -> String {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        let mut row = |metric: &str, device: String, session: String, predicted: String, value: String| {
            w.write_record([metric, &device, &session, &predicted, &value])
                .expect("writing to memory");
        };
        let none = String::new;
        row("metric", "device".into(), "session".into(), "predicted".into(), "value".into());
        let scalars = [
            ("representation", self.representation.to_string()),
            ("compensated", self.compensated.to_string()),
            ("classifier", self.classifier.to_string()),
            ("lambda_hz", self.lambda.to_string()),
            ("train_selection", self.train_selection.to_string()),
            ("test_selection", self.test_selection.to_string()),
            ("test_packets", self.total.to_string()),
            ("accuracy", self.accuracy().to_string()),
            ("cnn_accuracy", self.cnn_accuracy().to_string()),
            ("hybrid_accuracy", self.hybrid_accuracy().to_string()),
            ("out_of_database", self.out_of_database.to_string()),
        ];
        for (metric, value) in scalars {
            row(metric, none(), none(), none(), value);
        }
        for (i, d) in self.devices.iter().enumerate() {
            for (j, p) in self.devices.iter().enumerate() {
                row("confusion", d.to_string(), none(), p.to_string(), self.confusion[i][j].to_string());
            }
        }
        for (d, a) in self.device_accuracy() {
            row("device_accuracy", d.to_string(), none(), none(), a.to_string());
        }
        for ((d, session), c) in &self.cfo {
            let stats = [
                ("cfo_mean_estimate_hz", c.mean_estimate()),
                ("cfo_std_estimate_hz", c.std_estimate()),
                ("cfo_mean_true_hz", c.mean_true()),
                ("cfo_rms_error_hz", c.rms_error()),
            ];
            for (metric, v) in stats {
                row(metric, d.to_string(), session.to_string(), none(), v.to_string());
            }
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 fields");
        format!("# lora-rffi evaluation report, generated at unix time {timestamp}\n{body}")
    }
}

/// One packet's CFO estimate next to the truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfoSample {
    pub device: u32,
    pub session: u32,
    pub packet_index: u32,
    pub elapsed: f64,
    pub true_cfo: f64,
    pub coarse: f64,
    pub fine: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfoReport {
    pub samples: Vec<CfoSample>,
    pub sessions: BTreeMap<(u32, u32), CfoStats>,
    pub overall: CfoStats,
}

/// Runs the estimator over every packet of `source`.
pub fn cfo_report(source: &dyn PacketSource) -> Result<CfoReport> {
    let manifest = source.manifest();
    let mut samples = Vec::with_capacity(manifest.records.len());
    let mut sessions: BTreeMap<(u32, u32), CfoStats> = BTreeMap::new();
    let mut overall = CfoStats::default();
    for (i, meta) in manifest.records.iter().enumerate() {
        let rx = receive(&source.load(i)?, &manifest.params, false)?;
        samples.push(CfoSample {
            device: meta.true_device,
            session: meta.session_index,
            packet_index: meta.packet_index,
            elapsed: meta.elapsed,
            true_cfo: meta.true_cfo,
            coarse: rx.cfo.coarse,
            fine: rx.cfo.fine,
            total: rx.cfo.total,
        });
        sessions
            .entry((meta.true_device, meta.session_index))
            .or_default()
            .push(rx.cfo.total, meta.true_cfo);
        overall.push(rx.cfo.total, meta.true_cfo);
    }
    Ok(CfoReport {
        samples,
        sessions,
        overall,
    })
}

impl CfoReport {
    /// Per-packet time series.
    pub fn series_csv(&self) -> String {
        let mut s = String::from("device,session,packet,elapsed_s,true_cfo_hz,coarse_hz,fine_hz,estimate_hz,error_hz\n");
        for p in &self.samples {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                p.device,
                p.session,
                p.packet_index,
                p.elapsed,
                p.true_cfo,
                p.coarse,
                p.fine,
                p.total,
                p.total - p.true_cfo
            );
        }
        s
    }

    /// Per-device, per-session means.
    pub fn sessions_csv(&self) -> String {
        let mut s = String::from("device,session,packets,mean_estimate_hz,std_estimate_hz,mean_true_hz,rms_error_hz,max_abs_error_hz\n");
        for ((d, session), c) in &self.sessions {
            let _ = writeln!(
                s,
                "{d},{session},{},{},{},{},{},{}",
                c.count,
                c.mean_estimate(),
                c.std_estimate(),
                c.mean_true(),
                c.rms_error(),
                c.max_abs_error()
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "packets: {}\nrms estimation error: {:.3} Hz\nmax estimation error: {:.3} Hz\n",
            self.overall.count,
            self.overall.rms_error(),
            self.overall.max_abs_error()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        EvalReport::new(
            ReprKind::Spectrogram,
            true,
            ClassifierKind::Hybrid,
            200.0,
            vec![1, 2, 5],
            Selection::head(vec![1], 10),
            Selection::tail(vec![1], 10),
        )
    }

    #[test]
    fn accuracy_is_trace_over_total() {
        let mut r = report();
        r.record(1, 1, 1, false);
        r.record(1, 2, 1, false);
        r.record(2, 2, 5, false);
        r.record(5, 5, 5, true);
        assert_eq!(r.total, 4);
        assert!((r.accuracy() - 3.0 / 4.0).abs() < 1e-12);
        assert!((r.cnn_accuracy() - 3.0 / 4.0).abs() < 1e-12);
        assert_eq!(r.confusion[1], vec![0, 0, 1]);
        assert_eq!(r.confusion[0].iter().sum::<u64>(), 2);
        assert_eq!(r.out_of_database, 1);
    }

    #[test]
    fn rendering_differs_only_in_header() {
        let mut r = report();
        r.record(1, 1, 1, false);
        let (a, b) = (r.to_text(1), r.to_text(2));
        assert_ne!(a, b);
        assert_eq!(a.lines().skip(1).collect::<Vec<_>>(), b.lines().skip(1).collect::<Vec<_>>());
        let (a, b) = (r.to_csv(1), r.to_csv(2));
        assert_eq!(a.lines().skip(1).collect::<Vec<_>>(), b.lines().skip(1).collect::<Vec<_>>());
    }

    #[test]
    fn csv_parses_with_five_columns() {
        let mut r = EvalReport::new(
            ReprKind::Spectrogram,
            true,
            ClassifierKind::Hybrid,
            200.0,
            vec![1, 2],
            Selection::head(vec![1, 2], 10),
            Selection::tail(vec![3, 4], 10),
        );
        r.record(1, 1, 1, false);
        r.record(2, 1, 2, false);
        let text = r.to_csv(0);
        let body = text.split_once('\n').unwrap().1;
        let mut rd = csv::Reader::from_reader(body.as_bytes());
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert!(rows.iter().all(|row| row.len() == 5));
        let find = |metric: &str| rows.iter().find(|row| &row[0] == metric).unwrap()[4].to_string();
        assert_eq!(find("test_selection"), Selection::tail(vec![3, 4], 10).to_string());
        assert_eq!(find("cnn_accuracy").parse::<f64>().unwrap(), 0.5);
        assert_eq!(find("hybrid_accuracy").parse::<f64>().unwrap(), 1.0);
        let confusion: u64 = rows
            .iter()
            .filter(|row| &row[0] == "confusion" && &row[1] == "2")
            .map(|row| row[4].parse::<u64>().unwrap())
            .sum();
        assert_eq!(confusion, 1);
    }

    #[test]
    fn cfo_stats() {
        let mut c = CfoStats::default();
        c.push(10.0, 8.0);
        c.push(20.0, 24.0);
        assert_eq!(c.mean_estimate(), 15.0);
        assert_eq!(c.std_estimate(), 5.0);
        assert_eq!(c.mean_true(), 16.0);
        assert!((c.rms_error() - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(c.max_abs_error(), 4.0);
    }
}
