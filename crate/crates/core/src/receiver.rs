//! Receiver front end: packet synchronization, two-stage CFO estimation and
//! compensation, and RMS normalization.
//!
//! The coarse stage averages the instantaneous frequency over whole preamble
//! symbols; since the chirp ramp is symmetric the mean is the offset plus a
//! known constant. The fine stage measures the phase rotation between
//! consecutive (identical) preamble symbols, which is exact but only
//! resolves offsets below `B / 2^(SF+1)`, hence the coarse stage first.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phy::{basic_chirp, instantaneous_frequency, symbol_length, ComplexSignal, LoRaParams};

/// Default floor on normalized correlation for a packet to count as detected.
pub const DEFAULT_SYNC_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfoEstimate {
    pub coarse: f64,
    pub fine: f64,
    pub total: f64,
}

impl CfoEstimate {
    pub fn new(coarse: f64, fine: f64) -> Self {
        Self {
            coarse,
            fine,
            total: coarse + fine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncResult {
    /// Index of the first preamble sample.
    pub offset: usize,
    /// Normalized correlation at `offset`, in `[0, 1]`.
    pub confidence: f64,
}

/// Locates the preamble with the default detection floor.
pub fn synchronize(signal: &ComplexSignal, params: &LoRaParams) -> Result<SyncResult> {
    synchronize_with_floor(signal, params, DEFAULT_SYNC_FLOOR)
}

/// Zero-padding factor of the frequency search in [`synchronize_with_floor`].
const SYNC_OVERSAMPLE: usize = 4;
/// Upper bound on the grid's magnitude loss at a 4x zero-padding.
const SCALLOP_MARGIN: f64 = 0.05;

fn dtft_magnitude(x: &[Complex64], cycles_per_sample: f64) -> f64 {
    let step = Complex64::from_polar(1.0, -2.0 * PI * cycles_per_sample);
    let mut phasor = Complex64::new(1.0, 0.0);
    let mut acc = Complex64::new(0.0, 0.0);
    for (n, v) in x.iter().enumerate() {
        // re-anchor to keep the recurrence from drifting
        if n % 256 == 0 {
            phasor = Complex64::from_polar(1.0, -2.0 * PI * cycles_per_sample * n as f64);
        }
        acc += v * phasor;
        phasor *= step;
    }
    acc.norm()
}

/// Golden-section search for the DTFT magnitude peak within `center ± half_width`.
fn refine_tone(x: &[Complex64], center: f64, half_width: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (center - half_width, center + half_width);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (dtft_magnitude(x, c), dtft_magnitude(x, d));
    for _ in 0..30 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = dtft_magnitude(x, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = dtft_magnitude(x, d);
        }
    }
    fc.max(fd)
}

/// Full search for the preamble start. At each candidate offset the window
/// is correlated with one ideal chirp shifted to every frequency on a grid
/// (dechirp, zero-pad, FFT) and the largest normalized magnitude is kept, so
/// neither detection nor timing depends on the carrier offset. Ties resolve
/// to the earliest offset.
pub fn synchronize_with_floor(
    signal: &ComplexSignal,
    params: &LoRaParams,
    floor: f64,
) -> Result<SyncResult> {
    let reference = basic_chirp(params, 1.0)?;
    let reference = reference.samples();
    let len = reference.len();
    let needed = params.preamble_len()?;
    let x = signal.samples();
    if x.len() < needed {
        return Err(Error::TooShort {
            needed,
            got: x.len(),
        });
    }
    let ref_energy: f64 = reference.iter().map(|r| r.norm_sqr()).sum();
    let last = x.len() - needed;

    let size = (len * SYNC_OVERSAMPLE).next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(size);
    let mut buf = vec![Complex64::new(0.0, 0.0); size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut dechirped = vec![Complex64::new(0.0, 0.0); len];

    let mut window_energy: f64 = x[..len].iter().map(|s| s.norm_sqr()).sum();
    let mut best = SyncResult {
        offset: 0,
        confidence: -1.0,
    };
    for offset in 0..=last {
        if offset > 0 {
            window_energy += x[offset + len - 1].norm_sqr() - x[offset - 1].norm_sqr();
            // re-anchor the running sum now and then
            if offset % 4096 == 0 {
                window_energy = x[offset..offset + len].iter().map(|s| s.norm_sqr()).sum();
            }
        }
        let denom = (window_energy.max(0.0) * ref_energy).sqrt();
        if denom <= 0.0 {
            continue;
        }
        for (d, (s, r)) in dechirped.iter_mut().zip(x[offset..offset + len].iter().zip(reference)) {
            *d = s * r.conj();
        }
        buf[..len].copy_from_slice(&dechirped);
        buf[len..].fill(Complex64::new(0.0, 0.0));
        fft.process_with_scratch(&mut buf, &mut scratch);
        let (bin, peak) = buf
            .iter()
            .enumerate()
            .map(|(k, v)| (k, v.norm_sqr()))
            .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        // the grid can miss the peak by a few percent; refine plausible winners
        if peak.sqrt() / denom < best.confidence - SCALLOP_MARGIN {
            continue;
        }
        let peak = refine_tone(&dechirped, bin as f64 / size as f64, 1.0 / size as f64).max(peak.sqrt());
        let confidence = (peak / denom).min(1.0);
        if confidence > best.confidence {
            best = SyncResult { offset, confidence };
        }
    }
    if best.confidence < floor {
        return Err(Error::NoPacket {
            confidence: best.confidence,
            floor,
        });
    }
    Ok(best)
}

fn whole_symbols(signal: &ComplexSignal, params: &LoRaParams, min: usize) -> Result<(usize, usize)> {
    let len = symbol_length(params)?;
    let count = signal.len() / len;
    if count < min {
        return Err(Error::TooShort {
            needed: min * len,
            got: signal.len(),
        });
    }
    Ok((len, count))
}

/// Mean of the discriminator output over one ideal chirp; the value the
/// coarse estimator reads when there is no offset.
fn ideal_ramp_mean(params: &LoRaParams, len: usize) -> f64 {
    // f[n] samples the ramp at (n + 1/2) ts for n = 0..L-2
    -params.bw / 2.0 + params.chirp_rate() * params.ts * (len as f64 - 1.0) / 2.0
}

/// Coarse CFO from the mean instantaneous frequency of whole preamble symbols.
pub fn coarse_cfo(preambles: &ComplexSignal, params: &LoRaParams) -> Result<f64> {
    let (len, count) = whole_symbols(preambles, params, 1)?;
    let mut acc = 0.0;
    for k in 0..count {
        let symbol = preambles.slice(k * len..(k + 1) * len)?;
        let freq = instantaneous_frequency(&symbol)?;
        acc += freq.iter().sum::<f64>() / freq.len() as f64;
    }
    Ok(acc / count as f64 - ideal_ramp_mean(params, len))
}

/// Rotates `signal` by `exp(-j 2 pi f n ts)`.
pub fn compensate(signal: &ComplexSignal, f: f64) -> ComplexSignal {
    if f == 0.0 {
        return signal.clone();
    }
    let step = -2.0 * PI * f * signal.ts();
    let samples = signal
        .samples()
        .iter()
        .enumerate()
        .map(|(n, s)| s * Complex64::from_polar(1.0, step * n as f64))
        .collect();
    ComplexSignal::from_parts(samples, signal.ts())
}

/// Fine CFO from the phase rotation between consecutive preamble symbols,
/// summed over every adjacent pair.
pub fn fine_cfo(preambles: &ComplexSignal, params: &LoRaParams) -> Result<f64> {
    let (len, count) = whole_symbols(preambles, params, 2)?;
    let x = preambles.samples();
    let mut corr = Complex64::new(0.0, 0.0);
    for k in 0..count - 1 {
        let a = &x[k * len..(k + 1) * len];
        let b = &x[(k + 1) * len..(k + 2) * len];
        corr += a.iter().zip(b).map(|(p, q)| p * q.conj()).sum::<Complex64>();
    }
    Ok(-corr.arg() / (2.0 * PI * params.ts * len as f64))
}

/// Coarse estimate, coarse compensation, fine estimate, fine compensation.
pub fn estimate_and_compensate(
    signal: &ComplexSignal,
    params: &LoRaParams,
) -> Result<(ComplexSignal, CfoEstimate)> {
    let coarse = coarse_cfo(signal, params)?;
    let coarse_fixed = compensate(signal, coarse);
    let fine = fine_cfo(&coarse_fixed, params)?;
    Ok((compensate(&coarse_fixed, fine), CfoEstimate::new(coarse, fine)))
}

/// Scales `signal` to unit RMS amplitude.
pub fn normalize(signal: &ComplexSignal) -> Result<ComplexSignal> {
    let rms = signal.mean_power().sqrt();
    if rms == 0.0 {
        return Err(Error::Degenerate("cannot normalize an all-zero signal".into()));
    }
    let samples = signal.samples().iter().map(|s| s / rms).collect();
    Ok(ComplexSignal::from_parts(samples, signal.ts()))
}

/// Output of the full receiver chain for one packet.
#[derive(Debug, Clone)]
pub struct ReceivedPreamble {
    /// Normalized preamble, CFO-compensated or not.
    pub signal: ComplexSignal,
    pub cfo: CfoEstimate,
    pub sync: SyncResult,
}

/// Sync, CFO estimation (always), optional compensation, normalization.
pub fn receive(signal: &ComplexSignal, params: &LoRaParams, apply_compensation: bool) -> Result<ReceivedPreamble> {
    let sync = synchronize(signal, params)?;
    let preamble = signal.slice(sync.offset..sync.offset + params.preamble_len()?)?;
    let (compensated, cfo) = estimate_and_compensate(&preamble, params)?;
    let chosen = if apply_compensation { compensated } else { preamble };
    Ok(ReceivedPreamble {
        signal: normalize(&chosen)?,
        cfo,
        sync,
    })
}
