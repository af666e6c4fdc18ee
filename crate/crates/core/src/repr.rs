//! CNN input representations of a compensated, normalized preamble.
//!
//! All frequency axes are DC-centered: for a length-`M` transform, row
//! `M/2` is DC and row `i` holds bin `i - M/2`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phy::ComplexSignal;

/// Floor added before taking the logarithm of spectrogram power.
pub const LOG_FLOOR: f64 = 1e-12;

pub const DEFAULT_WINDOW_LEN: usize = 256;
pub const DEFAULT_HOP: usize = 128;

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Shifts to zero mean and unit variance. Constant matrices are left as is.
    pub fn standardize(&mut self) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var > 0.0 {
            let inv = 1.0 / var.sqrt();
            self.data.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
    }
}

/// Real parts in row 0, imaginary parts in row 1.
#[derive(Debug, Clone, PartialEq)]
pub struct IqMatrix(pub Matrix);

/// DC-centered DFT split into real (row 0) and imaginary (row 1) parts.
#[derive(Debug, Clone, PartialEq)]
pub struct FftMatrix(pub Matrix);

/// `M` DC-centered frequency rows by `C` time columns of `10*log10(|STFT|^2 + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramMatrix(pub Matrix);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReprKind {
    Iq,
    Fft,
    Spectrogram,
}

impl ReprKind {
    pub const ALL: [ReprKind; 3] = [ReprKind::Iq, ReprKind::Fft, ReprKind::Spectrogram];

    pub fn code(self) -> u8 {
        match self {
            ReprKind::Iq => 0,
            ReprKind::Fft => 1,
            ReprKind::Spectrogram => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for ReprKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReprKind::Iq => "iq",
            ReprKind::Fft => "fft",
            ReprKind::Spectrogram => "spectrogram",
        })
    }
}

impl FromStr for ReprKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iq" => Ok(ReprKind::Iq),
            "fft" => Ok(ReprKind::Fft),
            "spectrogram" | "stft" => Ok(ReprKind::Spectrogram),
            other => Err(Error::Config(format!(
                "unknown representation '{other}' (expected iq, fft or spectrogram)"
            ))),
        }
    }
}

/// Input geometry shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReprConfig {
    /// Samples per preamble section, `n_preambles * L`.
    pub n_samples: usize,
    pub window_len: usize,
    pub hop: usize,
}

impl ReprConfig {
    pub fn new(n_samples: usize) -> Self {
        Self {
            n_samples,
            window_len: DEFAULT_WINDOW_LEN,
            hop: DEFAULT_HOP,
        }
    }

    pub fn spectrogram_columns(&self) -> usize {
        spectrogram_columns(self.n_samples, self.window_len, self.hop)
    }

    /// `(rows, cols)` of the matrix produced for `kind`.
    pub fn shape(&self, kind: ReprKind) -> (usize, usize) {
        match kind {
            ReprKind::Iq | ReprKind::Fft => (2, self.n_samples),
            ReprKind::Spectrogram => (self.window_len, self.spectrogram_columns()),
        }
    }
}

pub fn spectrogram_columns(n: usize, window_len: usize, hop: usize) -> usize {
    if window_len > n || hop == 0 {
        0
    } else {
        (n - window_len) / hop + 1
    }
}

fn check_len(signal: &ComplexSignal, n: usize) -> Result<()> {
    if signal.len() != n {
        return Err(Error::shape(format!("{n} samples"), format!("{} samples", signal.len())));
    }
    Ok(())
}

pub fn to_iq(signal: &ComplexSignal, n: usize) -> Result<IqMatrix> {
    check_len(signal, n)?;
    let mut m = Matrix::zeros(2, n);
    for (i, s) in signal.samples().iter().enumerate() {
        m.data[i] = s.re;
        m.data[n + i] = s.im;
    }
    Ok(IqMatrix(m))
}

/// Index map of the DC-centering rotation: centered slot `i` holds bin
/// `(i + n - n/2) mod n`.
fn centered_source(i: usize, n: usize) -> usize {
    (i + n - n / 2) % n
}

fn plan(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

/// Unnormalized forward DFT with the DC bin moved to the middle.
pub fn centered_dft(samples: &[Complex64]) -> Vec<Complex64> {
    let n = samples.len();
    let mut buf = samples.to_vec();
    plan(n).process(&mut buf);
    (0..n).map(|i| buf[centered_source(i, n)]).collect()
}

pub fn to_fft(signal: &ComplexSignal, n: usize) -> Result<FftMatrix> {
    check_len(signal, n)?;
    let spectrum = centered_dft(signal.samples());
    let mut m = Matrix::zeros(2, n);
    for (i, s) in spectrum.iter().enumerate() {
        m.data[i] = s.re;
        m.data[n + i] = s.im;
    }
    Ok(FftMatrix(m))
}

/// `|STFT|^2` with a rectangular window: `window_len` DC-centered rows,
/// one column per hop. Trailing samples that do not fill a window are dropped.
pub fn stft_power(signal: &ComplexSignal, window_len: usize, hop: usize) -> Result<Matrix> {
    if window_len == 0 || hop == 0 {
        return Err(Error::Config("window_len and hop must be positive".into()));
    }
    if window_len > signal.len() {
        return Err(Error::shape(
            format!("at least {window_len} samples"),
            format!("{} samples", signal.len()),
        ));
    }
    let cols = spectrogram_columns(signal.len(), window_len, hop);
    let fft = plan(window_len);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    let mut out = Matrix::zeros(window_len, cols);
    for col in 0..cols {
        buf.copy_from_slice(&signal.samples()[col * hop..col * hop + window_len]);
        fft.process_with_scratch(&mut buf, &mut scratch);
        for row in 0..window_len {
            out.data[row * cols + col] = buf[centered_source(row, window_len)].norm_sqr();
        }
    }
    Ok(out)
}

/// Log-compressed spectrogram, `10*log10(|STFT|^2 + 1e-12)`.
pub fn to_spectrogram(
    signal: &ComplexSignal,
    window_len: usize,
    hop: usize,
) -> Result<SpectrogramMatrix> {
    let mut m = stft_power(signal, window_len, hop)?;
    m.data
        .iter_mut()
        .for_each(|v| *v = 10.0 * (*v + LOG_FLOOR).log10());
    Ok(SpectrogramMatrix(m))
}

/// Builds the network input of the requested kind. Spectrograms are
/// additionally standardized to zero mean and unit variance.
pub fn represent(signal: &ComplexSignal, kind: ReprKind, cfg: &ReprConfig) -> Result<Matrix> {
    match kind {
        ReprKind::Iq => Ok(to_iq(signal, cfg.n_samples)?.0),
        ReprKind::Fft => Ok(to_fft(signal, cfg.n_samples)?.0),
        ReprKind::Spectrogram => {
            check_len(signal, cfg.n_samples)?;
            let mut m = to_spectrogram(signal, cfg.window_len, cfg.hop)?.0;
            m.standardize();
            Ok(m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devsim::{apply_impairments, DeviceProfile};
    use crate::phy::{basic_chirp, preamble_sequence, LoRaParams};
    use std::f64::consts::PI;

    /// O(N^2) DFT by definition, DC-centered.
    fn dft_oracle(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        let half = n / 2;
        (0..n)
            .map(|i| {
                let k = (i + n - half) % n;
                x.iter()
                    .enumerate()
                    .map(|(t, v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * t % n) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    fn random_signal(n: usize, seed: u64) -> ComplexSignal {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        ComplexSignal::new(samples, 1e-6).unwrap()
    }

    fn sig(samples: Vec<Complex64>) -> ComplexSignal {
        ComplexSignal::new(samples, 1e-6).unwrap()
    }

    #[test]
    fn iq_layout() {
        let s = sig(vec![Complex64::new(1.0, 2.0), Complex64::new(3.0, -4.0)]);
        let m = to_iq(&s, 2).unwrap().0;
        assert_eq!(m.data, vec![1.0, 3.0, 2.0, -4.0]);
        let real = sig(vec![Complex64::new(5.0, 0.0); 4]);
        assert!(to_iq(&real, 4).unwrap().0.row(1).iter().all(|&v| v == 0.0));
        assert!(matches!(to_iq(&real, 5), Err(Error::Shape { .. })));
    }

    #[test]
    fn iq_round_trip() {
        let s = random_signal(64, 1);
        let m = to_iq(&s, 64).unwrap().0;
        let back: Vec<Complex64> = (0..64).map(|i| Complex64::new(m.get(0, i), m.get(1, i))).collect();
        assert_eq!(back, s.samples());
    }

    #[test]
    fn fft_of_constant() {
        let m = to_fft(&sig(vec![Complex64::new(1.0, 0.0); 4]), 4).unwrap().0;
        assert_eq!(m.shape(), (2, 4));
        for i in 0..4 {
            let mag = m.get(0, i).hypot(m.get(1, i));
            if i == 2 {
                assert!((mag - 4.0).abs() < 1e-12);
            } else {
                assert!(mag < 1e-12);
            }
        }
    }

    #[test]
    fn fft_parseval() {
        let s = random_signal(1000, 2);
        let m = to_fft(&s, 1000).unwrap().0;
        let freq: f64 = m.data.iter().map(|v| v * v).sum();
        let time: f64 = s.samples().iter().map(|v| v.norm_sqr()).sum();
        assert!((freq - 1000.0 * time).abs() / freq < 1e-9);
    }

    #[test]
    fn fft_of_tone() {
        let n = 64;
        let tone = sig((0..n)
            .map(|t| Complex64::from_polar(1.0, 2.0 * PI * 5.0 * t as f64 / n as f64) / n as f64)
            .collect());
        let m = to_fft(&tone, n).unwrap().0;
        for i in 0..n {
            let mag = m.get(0, i).hypot(m.get(1, i));
            if i == n / 2 + 5 {
                assert!((mag - 1.0).abs() < 1e-9);
            } else {
                assert!(mag < 1e-9, "bin {i}: {mag}");
            }
        }
    }

    #[test]
    fn fft_matches_oracle() {
        for n in [1, 2, 7, 64, 100, 255, 512] {
            let s = random_signal(n, n as u64);
            let got = centered_dft(s.samples());
            let want = dft_oracle(s.samples());
            let scale = want.iter().map(|v| v.norm()).fold(0.0, f64::max);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).norm() <= 1e-9 * scale, "n={n}");
            }
        }
    }

    #[test]
    fn spectrogram_matches_oracle() {
        for (n, m, r) in [(512, 64, 32), (300, 32, 7), (256, 256, 128), (97, 16, 16)] {
            let s = random_signal(n, 7 + n as u64);
            let got = stft_power(&s, m, r).unwrap();
            assert_eq!(got.shape(), (m, spectrogram_columns(n, m, r)));
            for col in 0..got.cols {
                let want = dft_oracle(&s.samples()[col * r..col * r + m]);
                for row in 0..m {
                    let w = want[row].norm_sqr();
                    let g = got.get(row, col);
                    assert!((g - w).abs() <= 1e-9 * w.max(1e-3), "{n},{m},{r} ({row},{col}): {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn spectrogram_shape_for_eight_preambles() {
        let params = LoRaParams::default();
        let pre = preamble_sequence(&params, 1.0).unwrap();
        let cfg = ReprConfig::new(pre.len());
        assert_eq!(cfg.shape(ReprKind::Spectrogram), (256, 63));
        assert_eq!(to_spectrogram(&pre, 256, 128).unwrap().0.shape(), (256, 63));
        assert_eq!(represent(&pre, ReprKind::Spectrogram, &cfg).unwrap().shape(), (256, 63));
        assert_eq!(represent(&pre, ReprKind::Iq, &cfg).unwrap().shape(), (2, 8192));
        assert_eq!(represent(&pre, ReprKind::Fft, &cfg).unwrap().shape(), (2, 8192));
    }

    #[test]
    fn spectrogram_ridge_follows_chirp() {
        let params = LoRaParams::default();
        let chirp = basic_chirp(&params, 1.0).unwrap();
        let (m, r) = (128, 32);
        let spec = to_spectrogram(&chirp, m, r).unwrap().0;
        let bin_hz = 1.0 / (m as f64 * params.ts);
        for col in 0..spec.cols {
            let argmax = (0..m)
                .max_by(|&a, &b| spec.get(a, col).total_cmp(&spec.get(b, col)))
                .unwrap();
            let centre_t = (col * r) as f64 * params.ts + (m as f64 - 1.0) / 2.0 * params.ts;
            let expected = -params.bw / 2.0 + params.chirp_rate() * centre_t;
            let got = (argmax as f64 - (m / 2) as f64) * bin_hz;
            assert!((got - expected).abs() <= bin_hz, "col {col}: {got} vs {expected}");
        }
    }

    #[test]
    fn zero_signal_hits_log_floor() {
        let zero = sig(vec![Complex64::new(0.0, 0.0); 512]);
        let spec = to_spectrogram(&zero, 256, 128).unwrap().0;
        let floor = 10.0 * LOG_FLOOR.log10();
        assert!(spec.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn spectrogram_rejects_short_signal() {
        let s = random_signal(100, 3);
        assert!(matches!(to_spectrogram(&s, 256, 128), Err(Error::Shape { .. })));
    }

    #[test]
    fn repr_kind_parses() {
        assert_eq!("iq".parse::<ReprKind>().unwrap(), ReprKind::Iq);
        assert_eq!("FFT".parse::<ReprKind>().unwrap(), ReprKind::Fft);
        assert_eq!("spectrogram".parse::<ReprKind>().unwrap(), ReprKind::Spectrogram);
        assert!(matches!("wavelet".parse::<ReprKind>(), Err(Error::Config(_))));
        for k in ReprKind::ALL {
            assert_eq!(ReprKind::from_code(k.code()), Some(k));
            assert_eq!(k.to_string().parse::<ReprKind>().unwrap(), k);
        }
    }

    #[test]
    fn time_shift_moves_one_column() {
        let params = LoRaParams::default();
        let profile = DeviceProfile {
            iq_gain_mismatch: 1.1,
            pa_a3: -0.1,
            ..DeviceProfile::identity(1)
        };
        let long = apply_impairments(&preamble_sequence(&params, 1.0).unwrap(), &profile, 700.0);
        let (m, r) = (256, 128);
        let a = stft_power(&long.slice(0..4096).unwrap(), m, r).unwrap();
        let b = stft_power(&long.slice(r..r + 4096).unwrap(), m, r).unwrap();
        for col in 0..a.cols - 1 {
            for row in 0..m {
                let (x, y) = (a.get(row, col + 1), b.get(row, col));
                assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn bin_offset_rotates_rows() {
        let params = LoRaParams::default();
        let (m, r) = (256, 128);
        let bin_hz = 1.0 / (m as f64 * params.ts);
        let base = preamble_sequence(&LoRaParams { n_preambles: 2, ..params }, 1.0).unwrap();
        let a = stft_power(&base, m, r).unwrap();
        for k in [1usize, 3, 17] {
            let shifted = apply_impairments(&base, &DeviceProfile::identity(1), k as f64 * bin_hz);
            let b = stft_power(&shifted, m, r).unwrap();
            for col in 0..a.cols {
                for row in 0..m {
                    let x = a.get(row, col);
                    let y = b.get((row + k) % m, col);
                    assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "k={k}");
                }
            }
        }
    }

    #[test]
    fn standardize_contract() {
        let s = random_signal(8192, 5);
        let m = represent(&s, ReprKind::Spectrogram, &ReprConfig::new(8192)).unwrap();
        let n = m.data.len() as f64;
        let mean = m.data.iter().sum::<f64>() / n;
        let var = m.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn power_is_non_negative(seed in any::<u64>(), n in 64usize..600, m in 1usize..64, r in 1usize..40) {
                let s = random_signal(n, seed);
                let p = stft_power(&s, m, r).unwrap();
                prop_assert!(p.data.iter().all(|&v| v >= 0.0));
                prop_assert_eq!(p.cols, (n - m) / r + 1);
            }
        }
    }
}
