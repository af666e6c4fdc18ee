//! Ideal LoRa baseband waveforms.
//!
//! A basic up-chirp sweeps linearly from `-B/2` to `+B/2` over one symbol
//! of duration `T = 2^SF / B`:
//!
//! ```text
//! u(t)  = A * exp(j * (-pi*B*t + pi*(B/T)*t^2))
//! f(t)  = -B/2 + (B/T) * t
//! ```
//!
//! The preamble is a run of identical basic chirps, the same for every
//! device and every packet, which is why it is the only part of the packet
//! the fingerprinting chain looks at.

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radio configuration shared by transmitter and receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoRaParams {
    /// Spreading factor, 7..=12.
    pub sf: u32,
    /// Bandwidth in Hz.
    pub bw: f64,
    /// Carrier frequency in Hz.
    pub fc: f64,
    /// Sample interval in seconds.
    pub ts: f64,
    /// Number of repeated basic chirps in the preamble.
    pub n_preambles: usize,
}

impl Default for LoRaParams {
    /// SF7, 125 kHz, 868 MHz, 1 MS/s (8x oversampling), eight preambles.
    fn default() -> Self {
        Self {
            sf: 7,
            bw: 125e3,
            fc: 868e6,
            ts: 1e-6,
            n_preambles: 8,
        }
    }
}

impl LoRaParams {
    pub fn new(sf: u32, bw: f64, fc: f64, ts: f64, n_preambles: usize) -> Result<Self> {
        let params = Self {
            sf,
            bw,
            fc,
            ts,
            n_preambles,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(7..=12).contains(&self.sf) {
            return Err(Error::Config(format!(
                "sf must lie in 7..=12, got {}",
                self.sf
            )));
        }
        if !(self.bw.is_finite() && self.bw > 0.0) {
            return Err(Error::Config(format!("bw must be positive, got {}", self.bw)));
        }
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return Err(Error::Config(format!("ts must be positive, got {}", self.ts)));
        }
        if !(self.fc.is_finite() && self.fc > 0.0) {
            return Err(Error::Config(format!("fc must be positive, got {}", self.fc)));
        }
        // 1/ts >= bw, with a little slack for decimal sample intervals
        if self.bw * self.ts > 1.0 + 1e-9 {
            return Err(Error::Config(format!(
                "sample rate 1/ts = {} Hz is below the bandwidth {} Hz",
                1.0 / self.ts,
                self.bw
            )));
        }
        if self.n_preambles < 2 {
            return Err(Error::Config(format!(
                "n_preambles must be at least 2, got {}",
                self.n_preambles
            )));
        }
        symbol_length(self).map(|_| ())
    }

    /// Symbol duration `T = 2^SF / B` in seconds.
    pub fn symbol_duration(&self) -> f64 {
        (1u64 << self.sf) as f64 / self.bw
    }

    /// Chirp rate `B / T` in Hz per second.
    pub fn chirp_rate(&self) -> f64 {
        self.bw / self.symbol_duration()
    }

    /// Total preamble length in samples.
    pub fn preamble_len(&self) -> Result<usize> {
        Ok(self.n_preambles * symbol_length(self)?)
    }

    /// Half-width of the range the repeated-symbol estimator can resolve,
    /// `B / 2^(SF+1)`.
    pub fn fine_cfo_limit(&self) -> f64 {
        self.bw / (1u64 << (self.sf + 1)) as f64
    }
}

/// Samples per symbol, `L = 2^SF / (B * ts)`. Fails unless `L` is an integer.
pub fn symbol_length(params: &LoRaParams) -> Result<usize> {
    let exact = (1u64 << params.sf) as f64 / (params.bw * params.ts);
    let rounded = exact.round();
    if !exact.is_finite() || rounded < 1.0 || (exact - rounded).abs() > 1e-9 * exact {
        return Err(Error::Config(format!(
            "symbol length 2^sf/(bw*ts) is not a positive integer for (sf={}, bw={}, ts={}): {}",
            params.sf, params.bw, params.ts, exact
        )));
    }
    Ok(rounded as usize)
}

/// A finite run of complex baseband samples taken every `ts` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSignal {
    samples: Vec<Complex64>,
    ts: f64,
}

impl ComplexSignal {
    pub fn new(samples: Vec<Complex64>, ts: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Degenerate("signal has no samples".into()));
        }
        if !(ts.is_finite() && ts > 0.0) {
            return Err(Error::Config(format!("sample interval must be positive, got {ts}")));
        }
        if let Some(index) = samples.iter().position(|s| !(s.re.is_finite() && s.im.is_finite())) {
            return Err(Error::Degenerate(format!("non-finite sample at index {index}")));
        }
        Ok(Self { samples, ts })
    }

    /// Wraps samples that are known to be valid.
    pub(crate) fn from_parts(samples: Vec<Complex64>, ts: f64) -> Self {
        debug_assert!(!samples.is_empty() && ts > 0.0);
        Self { samples, ts }
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copies out a sub-range of samples.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.samples.len() || range.start >= range.end {
            return Err(Error::TooShort {
                needed: range.end,
                got: self.samples.len(),
            });
        }
        Ok(Self::from_parts(self.samples[range].to_vec(), self.ts))
    }

    /// Mean of `|x[n]|^2`.
    pub fn mean_power(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }
}

/// One ideal up-chirp of `L` samples with amplitude `amplitude`.
pub fn basic_chirp(params: &LoRaParams, amplitude: f64) -> Result<ComplexSignal> {
    params.validate()?;
    let len = symbol_length(params)?;
    let rate = params.chirp_rate();
    let samples = (0..len)
        .map(|n| {
            let t = n as f64 * params.ts;
            let phase = -PI * params.bw * t + PI * rate * t * t;
            Complex64::from_polar(amplitude, phase)
        })
        .collect();
    Ok(ComplexSignal::from_parts(samples, params.ts))
}

/// `n_preambles` back-to-back copies of [`basic_chirp`].
pub fn preamble_sequence(params: &LoRaParams, amplitude: f64) -> Result<ComplexSignal> {
    let chirp = basic_chirp(params, amplitude)?;
    let samples = chirp.samples().repeat(params.n_preambles);
    Ok(ComplexSignal::from_parts(samples, params.ts))
}

/// Phase-difference frequency discriminator,
/// `f[n] = angle(x[n+1] * conj(x[n])) / (2*pi*ts)`.
///
/// Returns `len - 1` values in `[-1/(2ts), 1/(2ts))`. Note that `f[n]`
/// measures the frequency at the half-sample point `(n + 1/2) * ts`.
pub fn instantaneous_frequency(signal: &ComplexSignal) -> Result<Vec<f64>> {
    let samples = signal.samples();
    if samples.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: samples.len(),
        });
    }
    if let Some(index) = samples.iter().position(|s| s.norm_sqr() == 0.0) {
        return Err(Error::UndefinedPhase { index });
    }
    let scale = 1.0 / (2.0 * PI * signal.ts());
    Ok(samples
        .windows(2)
        .map(|w| {
            let mut angle = (w[1] * w[0].conj()).arg();
            if angle >= PI {
                angle = -PI;
            }
            angle * scale
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(sf: u32, ts: f64) -> LoRaParams {
        LoRaParams {
            sf,
            ts,
            ..LoRaParams::default()
        }
    }

    #[test]
    fn symbol_length_examples() {
        assert_eq!(symbol_length(&params(7, 1e-6)).unwrap(), 1024);
        assert_eq!(symbol_length(&params(7, 8e-6)).unwrap(), 128);
        let err = symbol_length(&params(7, 3e-6)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sf=7") && msg.contains("ts=0.000003"), "{msg}");
    }

    #[test]
    fn validation_rejects_bad_params() {
        assert!(LoRaParams::new(6, 125e3, 868e6, 1e-6, 8).is_err());
        assert!(LoRaParams::new(13, 125e3, 868e6, 1e-6, 8).is_err());
        assert!(LoRaParams::new(7, 125e3, 868e6, 1e-6, 1).is_err());
        // undersampled
        assert!(LoRaParams::new(7, 125e3, 868e6, 16e-6, 8).is_err());
        assert!(LoRaParams::new(7, -1.0, 868e6, 1e-6, 8).is_err());
        assert!(LoRaParams::new(7, 125e3, 868e6, 8e-6, 2).is_ok());
    }

    #[test]
    fn chirp_starts_at_amplitude_with_zero_phase() {
        let chirp = basic_chirp(&LoRaParams::default(), 1.0).unwrap();
        assert_eq!(chirp.samples()[0], Complex64::new(1.0, 0.0));
        assert_eq!(chirp.len(), 1024);
    }

    #[test]
    fn chirp_has_constant_modulus() {
        for amplitude in [1.0, 0.25, 3.5] {
            let chirp = basic_chirp(&params(9, 1e-6), amplitude).unwrap();
            for s in chirp.samples() {
                assert!(((s.norm() - amplitude) / amplitude).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chirp_frequency_follows_ramp() {
        let p = LoRaParams::default();
        let chirp = basic_chirp(&p, 1.0).unwrap();
        let freq = instantaneous_frequency(&chirp).unwrap();
        let len = symbol_length(&p).unwrap() as f64;
        let half_bin = p.bw / (2.0 * len);
        for (n, f) in freq.iter().enumerate() {
            // analytic ramp at the sample instant and at the half-sample point
            let at_sample = -p.bw / 2.0 + p.chirp_rate() * n as f64 * p.ts;
            let at_mid = -p.bw / 2.0 + p.chirp_rate() * (n as f64 + 0.5) * p.ts;
            assert!((f - at_sample).abs() <= half_bin * (1.0 + 1e-6));
            assert!((f - at_mid).abs() < 1e-6, "n={n}: {f} vs {at_mid}");
        }
        assert!(freq[0] < -p.bw / 2.0 + p.bw / len);
        assert!(freq[freq.len() - 1] > p.bw / 2.0 - 2.0 * p.bw / len);
    }

    #[test]
    fn preamble_repeats_chirp() {
        let p = LoRaParams::default();
        let pre = preamble_sequence(&p, 1.0).unwrap();
        assert_eq!(pre.len(), 8192);
        let chirp = basic_chirp(&p, 1.0).unwrap();
        for k in 0..p.n_preambles {
            assert_eq!(&pre.samples()[k * 1024..(k + 1) * 1024], chirp.samples());
        }

        let two = LoRaParams {
            n_preambles: 2,
            ..p
        };
        let pre = preamble_sequence(&two, 1.0).unwrap();
        assert_eq!(pre.len(), 2048);
        assert_eq!(pre.samples()[..1024], pre.samples()[1024..]);
    }

    #[test]
    fn tone_frequency() {
        let ts = 1e-6;
        let samples = (0..500)
            .map(|n| Complex64::from_polar(1.0, 2.0 * PI * 1000.0 * n as f64 * ts))
            .collect();
        let tone = ComplexSignal::new(samples, ts).unwrap();
        for f in instantaneous_frequency(&tone).unwrap() {
            assert!((f - 1000.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_signal_has_zero_frequency() {
        let sig = ComplexSignal::new(vec![Complex64::new(1.0, 0.0); 16], 1e-6).unwrap();
        assert!(instantaneous_frequency(&sig).unwrap().iter().all(|&f| f == 0.0));
    }

    #[test]
    fn zero_sample_has_undefined_phase() {
        let mut samples = vec![Complex64::new(1.0, 0.0); 8];
        samples[5] = Complex64::new(0.0, 0.0);
        let sig = ComplexSignal::new(samples, 1e-6).unwrap();
        assert!(matches!(
            instantaneous_frequency(&sig),
            Err(Error::UndefinedPhase { index: 5 })
        ));
        let single = ComplexSignal::new(vec![Complex64::new(1.0, 0.0)], 1e-6).unwrap();
        assert!(instantaneous_frequency(&single).is_err());
    }

    #[test]
    fn frequency_range_is_half_open() {
        // alternating sign is exactly the Nyquist rate
        let samples = (0..6)
            .map(|n| Complex64::new(if n % 2 == 0 { 1.0 } else { -1.0 }, 0.0))
            .collect();
        let sig = ComplexSignal::new(samples, 1e-6).unwrap();
        for f in instantaneous_frequency(&sig).unwrap() {
            assert_eq!(f, -0.5e6);
        }
    }

    #[test]
    fn signal_rejects_non_finite() {
        assert!(ComplexSignal::new(vec![], 1e-6).is_err());
        assert!(ComplexSignal::new(vec![Complex64::new(f64::NAN, 0.0)], 1e-6).is_err());
        assert!(ComplexSignal::new(vec![Complex64::new(1.0, 0.0)], 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn symbol_length_doubles_with_sf(sf in 7u32..12, oversample in 1u32..=8) {
                let ts = 1.0 / (125e3 * oversample as f64);
                let lo = symbol_length(&params(sf, ts)).unwrap();
                let hi = symbol_length(&params(sf + 1, ts)).unwrap();
                prop_assert_eq!(hi, 2 * lo);
            }

            #[test]
            fn chirp_modulus_is_amplitude(sf in 7u32..=10, oversample in 1u32..=4, amplitude in 0.01f64..10.0) {
                let ts = 1.0 / (125e3 * oversample as f64);
                let chirp = basic_chirp(&params(sf, ts), amplitude).unwrap();
                for s in chirp.samples() {
                    prop_assert!(((s.norm() - amplitude) / amplitude).abs() < 1e-12);
                }
            }
        }
    }
}
