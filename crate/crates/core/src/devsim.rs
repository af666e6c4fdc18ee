//! Virtual LoRa transmitters.
//!
//! Every device carries a fixed impairment profile (IQ imbalance, a
//! third-order memoryless amplifier) and a drifting carrier frequency
//! offset. The CFO trajectory has three parts: a per-device mean, an
//! exponentially decaying warm-up excess after power-on, and Gaussian
//! per-session and per-packet terms.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phy::{preamble_sequence, ComplexSignal, LoRaParams};
use crate::seed;

/// Crystal tolerance of a typical LoRa board.
pub const OSCILLATOR_TOLERANCE_PPM: f64 = 10.0;

/// Random terms are truncated at this many standard deviations.
const TRUNCATION_SIGMAS: f64 = 5.0;

const STREAM_DAY: u64 = 0xd0;
const STREAM_JITTER: u64 = 0x1e;
const STREAM_NOISE: u64 = 0x40;

/// Largest `|cfo_base|` allowed at carrier `fc`.
pub fn max_cfo(fc: f64) -> f64 {
    OSCILLATOR_TOLERANCE_PPM * 1e-6 * fc
}

/// Hardware fingerprint of one simulated transmitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: u32,
    /// Long-term mean CFO, Hz.
    pub cfo_base: f64,
    /// Excess CFO right after power-on, Hz.
    pub cfo_warmup_amp: f64,
    /// Warm-up decay constant, seconds.
    pub cfo_warmup_tau: f64,
    /// Standard deviation of the per-session offset, Hz.
    pub cfo_day_sigma: f64,
    /// Standard deviation of the per-packet jitter, Hz.
    pub cfo_jitter_sigma: f64,
    pub iq_gain_mismatch: f64,
    /// Quadrature skew, radians.
    pub iq_phase_error: f64,
    pub pa_a1: f64,
    pub pa_a3: f64,
}

impl DeviceProfile {
    /// A device with no impairments and a constant zero CFO.
    pub fn identity(device_id: u32) -> Self {
        Self {
            device_id,
            cfo_base: 0.0,
            cfo_warmup_amp: 0.0,
            cfo_warmup_tau: 1.0,
            cfo_day_sigma: 0.0,
            cfo_jitter_sigma: 0.0,
            iq_gain_mismatch: 1.0,
            iq_phase_error: 0.0,
            pa_a1: 1.0,
            pa_a3: 0.0,
        }
    }

    pub fn validate(&self, fc: f64) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("device {}: {msg}", self.device_id)));
        let limit = max_cfo(fc);
        if !(self.cfo_base.abs() <= limit) {
            return fail(format!(
                "|cfo_base| = {} Hz exceeds {OSCILLATOR_TOLERANCE_PPM} ppm of fc ({limit} Hz)",
                self.cfo_base.abs()
            ));
        }
        if !(self.cfo_warmup_tau > 0.0) {
            return fail(format!("cfo_warmup_tau must be positive, got {}", self.cfo_warmup_tau));
        }
        if !self.cfo_warmup_amp.is_finite() {
            return fail("cfo_warmup_amp must be finite".into());
        }
        if !(self.cfo_day_sigma >= 0.0 && self.cfo_day_sigma.is_finite()) {
            return fail(format!("cfo_day_sigma must be >= 0, got {}", self.cfo_day_sigma));
        }
        if !(self.cfo_jitter_sigma >= 0.0 && self.cfo_jitter_sigma.is_finite()) {
            return fail(format!("cfo_jitter_sigma must be >= 0, got {}", self.cfo_jitter_sigma));
        }
        if !(self.pa_a1 > 0.0 && self.pa_a1.is_finite()) {
            return fail(format!("pa_a1 must be positive, got {}", self.pa_a1));
        }
        if !(self.iq_gain_mismatch > 0.5 && self.iq_gain_mismatch < 2.0) {
            return fail(format!(
                "iq_gain_mismatch must lie in (0.5, 2), got {}",
                self.iq_gain_mismatch
            ));
        }
        if !(self.iq_phase_error.is_finite() && self.pa_a3.is_finite()) {
            return fail("impairment coefficients must be finite".into());
        }
        Ok(())
    }

    /// `cfo_base + warm-up excess` at `elapsed` seconds, without random terms.
    pub fn deterministic_cfo(&self, elapsed: f64) -> f64 {
        self.cfo_base + self.cfo_warmup_amp * (-elapsed / self.cfo_warmup_tau).exp()
    }

    /// Per-session offset, a deterministic function of `(device_id, session_index)`.
    pub fn day_offset(&self, session_index: u32) -> f64 {
        let mut rng = seed::rng(&[STREAM_DAY, self.device_id as u64, session_index as u64]);
        truncated_normal(&mut rng, self.cfo_day_sigma)
    }
}

/// Ranges used when drawing random device populations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileRanges {
    /// `cfo_base` is uniform in `±cfo_base_max`; `None` means the full 10 ppm.
    pub cfo_base_max: Option<f64>,
    pub warmup_amp: (f64, f64),
    pub warmup_tau: (f64, f64),
    pub day_sigma: f64,
    pub jitter_sigma: f64,
    /// `iq_gain_mismatch` is `1 + U(-g, g)`.
    pub iq_gain_spread: f64,
    /// `iq_phase_error` is `U(-p, p)`.
    pub iq_phase_spread: f64,
    pub pa_a1: (f64, f64),
    pub pa_a3: (f64, f64),
}

impl Default for ProfileRanges {
    fn default() -> Self {
        Self {
            cfo_base_max: None,
            warmup_amp: (100.0, 500.0),
            warmup_tau: (200.0, 600.0),
            day_sigma: 100.0,
            jitter_sigma: 10.0,
            iq_gain_spread: 0.15,
            iq_phase_spread: 0.15,
            pa_a1: (0.8, 1.2),
            pa_a3: (-0.3, -0.02),
        }
    }
}

impl ProfileRanges {
    /// Draws one device.
    pub fn sample<R: Rng + ?Sized>(&self, device_id: u32, fc: f64, rng: &mut R) -> DeviceProfile {
        let cfo_max = self.cfo_base_max.unwrap_or_else(|| max_cfo(fc)).min(max_cfo(fc));
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        DeviceProfile {
            device_id,
            cfo_base: uniform(rng, (-cfo_max, cfo_max)),
            cfo_warmup_amp: uniform(rng, self.warmup_amp),
            cfo_warmup_tau: uniform(rng, self.warmup_tau),
            cfo_day_sigma: self.day_sigma,
            cfo_jitter_sigma: self.jitter_sigma,
            iq_gain_mismatch: 1.0 + uniform(rng, (-self.iq_gain_spread, self.iq_gain_spread)),
            iq_phase_error: uniform(rng, (-self.iq_phase_spread, self.iq_phase_spread)),
            pa_a1: uniform(rng, self.pa_a1),
            pa_a3: uniform(rng, self.pa_a3),
        }
    }

    /// Draws devices `1..=count` from a master seed.
    pub fn sample_population(&self, count: usize, fc: f64, master_seed: u64) -> Vec<DeviceProfile> {
        (1..=count as u32)
            .map(|id| {
                let mut rng = seed::rng(&[master_seed, 0x9f, id as u64]);
                self.sample(id, fc, &mut rng)
            })
            .collect()
    }
}

/// When and how a packet is captured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionContext {
    /// Capture session ("day"), 1-based.
    pub session_index: u32,
    /// Seconds since the device powered on.
    pub elapsed: f64,
    /// Channel SNR in dB; `+inf` disables noise.
    pub snr_db: f64,
    pub rng_seed: u64,
}

/// One received packet with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub signal: ComplexSignal,
    pub true_device: u32,
    pub true_cfo: f64,
    pub context: EmissionContext,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= TRUNCATION_SIGMAS {
            return sigma * z;
        }
    }
}

/// CFO of `profile` for a packet captured in `context`, in Hz.
///
/// The session and jitter draws are truncated at five standard deviations,
/// so `|cfo - cfo_base - warmup| <= 5 * (day_sigma + jitter_sigma)`.
pub fn cfo_at(profile: &DeviceProfile, context: &EmissionContext) -> f64 {
    let mut jitter_rng = seed::rng(&[STREAM_JITTER, context.rng_seed]);
    profile.deterministic_cfo(context.elapsed)
        + profile.day_offset(context.session_index)
        + truncated_normal(&mut jitter_rng, profile.cfo_jitter_sigma)
}

/// Applies IQ imbalance, the amplifier model, and a frequency offset, in that order.
pub fn apply_impairments(clean: &ComplexSignal, profile: &DeviceProfile, cfo: f64) -> ComplexSignal {
    let (sin_phi, cos_phi) = profile.iq_phase_error.sin_cos();
    let step = 2.0 * PI * cfo * clean.ts();
    let samples = clean
        .samples()
        .iter()
        .enumerate()
        .map(|(n, x)| {
            let y = Complex64::new(
                x.re * profile.iq_gain_mismatch,
                x.im * cos_phi + x.re * sin_phi,
            );
            let z = y * profile.pa_a1 + y * (profile.pa_a3 * y.norm_sqr());
            z * Complex64::from_polar(1.0, step * n as f64)
        })
        .collect();
    ComplexSignal::from_parts(samples, clean.ts())
}

/// Synthesizes one received packet, already aligned to the preamble start.
pub fn emit_packet(
    params: &LoRaParams,
    profile: &DeviceProfile,
    context: &EmissionContext,
) -> Result<PacketRecord> {
    emit_packet_padded(params, profile, context, 0)
}

/// Like [`emit_packet`] but preceded by `lead` noise-only samples.
///
/// The oscillator phase at capture time is `2*pi*cfo*elapsed`, so packets
/// arrive with a carrier phase that varies from packet to packet unless the
/// CFO is zero.
pub fn emit_packet_padded(
    params: &LoRaParams,
    profile: &DeviceProfile,
    context: &EmissionContext,
    lead: usize,
) -> Result<PacketRecord> {
    if !(context.elapsed >= 0.0) {
        return Err(Error::Config(format!("elapsed must be >= 0, got {}", context.elapsed)));
    }
    let clean = preamble_sequence(params, 1.0)?;
    let cfo = cfo_at(profile, context);
    let mut impaired = apply_impairments(&clean, profile, cfo);

    let cycles = (cfo * context.elapsed).rem_euclid(1.0);
    if cycles != 0.0 {
        let rotation = Complex64::from_polar(1.0, 2.0 * PI * cycles);
        let samples = impaired.samples().iter().map(|s| s * rotation).collect();
        impaired = ComplexSignal::from_parts(samples, params.ts);
    }

    let signal_power = impaired.mean_power();
    if lead > 0 {
        let mut samples = vec![Complex64::new(0.0, 0.0); lead];
        samples.extend_from_slice(impaired.samples());
        impaired = ComplexSignal::from_parts(samples, params.ts);
    }

    let signal = if context.snr_db == f64::INFINITY {
        impaired
    } else {
        let mut rng = seed::rng(&[STREAM_NOISE, context.rng_seed]);
        let noise_power = signal_power / 10f64.powf(context.snr_db / 10.0);
        let normal = Normal::new(0.0, (noise_power / 2.0).sqrt())
            .map_err(|e| Error::Config(format!("snr_db {}: {e}", context.snr_db)))?;
        let samples = impaired
            .samples()
            .iter()
            .map(|s| s + Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect();
        ComplexSignal::from_parts(samples, params.ts)
    };

    Ok(PacketRecord {
        signal,
        true_device: profile.device_id,
        true_cfo: cfo,
        context: *context,
    })
}

/// Capture plan: every device transmits `packets_per_session` packets in each
/// of `sessions` sessions, one every `interval` seconds from power-on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureSchedule {
    pub sessions: u32,
    pub packets_per_session: usize,
    /// Seconds between packets.
    pub interval: f64,
    pub snr_db: f64,
    /// Noise-only samples in front of each packet.
    pub lead_padding: usize,
}

impl Default for CaptureSchedule {
    fn default() -> Self {
        Self {
            sessions: 1,
            packets_per_session: 100,
            interval: 1.0,
            snr_db: 30.0,
            lead_padding: 0,
        }
    }
}

impl CaptureSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.sessions == 0 {
            return Err(Error::Config("capture.sessions must be at least 1".into()));
        }
        if self.packets_per_session == 0 {
            return Err(Error::Config("capture.packets_per_session must be at least 1".into()));
        }
        if !(self.interval >= 0.0 && self.interval.is_finite()) {
            return Err(Error::Config(format!(
                "capture.interval must be a non-negative number, got {}",
                self.interval
            )));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("capture.snr_db is invalid: {}", self.snr_db)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phy::{instantaneous_frequency, symbol_length};

    fn ctx(session: u32, elapsed: f64, seed: u64) -> EmissionContext {
        EmissionContext {
            session_index: session,
            elapsed,
            snr_db: f64::INFINITY,
            rng_seed: seed,
        }
    }

    fn drifting() -> DeviceProfile {
        DeviceProfile {
            cfo_base: 2500.0,
            cfo_warmup_amp: 300.0,
            cfo_warmup_tau: 400.0,
            cfo_day_sigma: 100.0,
            cfo_jitter_sigma: 10.0,
            ..DeviceProfile::identity(3)
        }
    }

    #[test]
    fn static_cfo_is_exactly_base() {
        let profile = DeviceProfile {
            cfo_base: -1234.5,
            ..DeviceProfile::identity(1)
        };
        for seed in 0..20 {
            assert_eq!(cfo_at(&profile, &ctx(seed as u32 + 1, seed as f64 * 7.0, seed)), -1234.5);
        }
    }

    #[test]
    fn warmup_vanishes_at_infinity() {
        let profile = DeviceProfile {
            cfo_jitter_sigma: 0.0,
            ..drifting()
        };
        let settled = cfo_at(&profile, &ctx(2, f64::INFINITY, 9));
        assert_eq!(settled, profile.cfo_base + profile.day_offset(2));
    }

    #[test]
    fn warmup_residual_after_twenty_minutes() {
        let profile = drifting();
        let diff = cfo_at(&profile, &ctx(1, 1200.0, 5)) - cfo_at(&profile, &ctx(1, f64::INFINITY, 5));
        assert!((diff - 300.0 * (-3.0f64).exp()).abs() < 1e-9);
        assert!((diff - 14.936).abs() < 1e-3);
    }

    #[test]
    fn warmup_is_monotone_without_jitter() {
        let profile = DeviceProfile {
            cfo_jitter_sigma: 0.0,
            ..drifting()
        };
        let series: Vec<f64> = (0..200)
            .map(|i| cfo_at(&profile, &ctx(1, i as f64 * 10.0, i)))
            .collect();
        assert!(series.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn day_offset_depends_on_session_and_device() {
        let profile = drifting();
        assert_eq!(profile.day_offset(1), profile.day_offset(1));
        assert_ne!(profile.day_offset(1), profile.day_offset(2));
        let other = DeviceProfile {
            device_id: 4,
            ..profile
        };
        assert_ne!(profile.day_offset(1), other.day_offset(1));
    }

    #[test]
    fn cfo_stays_inside_envelope() {
        let profile = DeviceProfile {
            cfo_base: max_cfo(868e6),
            cfo_warmup_amp: 0.0,
            ..drifting()
        };
        let bound = max_cfo(868e6) + 5.0 * (profile.cfo_day_sigma + profile.cfo_jitter_sigma);
        for i in 0..2000 {
            let cfo = cfo_at(&profile, &ctx(i % 50 + 1, 1e6, i as u64));
            assert!(cfo.abs() <= bound);
        }
    }

    #[test]
    fn identity_impairments_are_exact() {
        let params = LoRaParams::default();
        let clean = preamble_sequence(&params, 1.0).unwrap();
        let out = apply_impairments(&clean, &DeviceProfile::identity(1), 0.0);
        assert_eq!(out, clean);
    }

    #[test]
    fn frequency_offset_shifts_instantaneous_frequency() {
        let params = LoRaParams::default();
        let clean = preamble_sequence(&params, 1.0).unwrap();
        let out = apply_impairments(&clean, &DeviceProfile::identity(1), 1000.0);
        let f_in = instantaneous_frequency(&clean).unwrap();
        let f_out = instantaneous_frequency(&out).unwrap();
        for (a, b) in f_in.iter().zip(&f_out) {
            assert!((b - a - 1000.0).abs() < 1e-6);
        }
    }

    #[test]
    fn amplifier_compresses_unit_modulus() {
        let params = LoRaParams::default();
        let clean = preamble_sequence(&params, 1.0).unwrap();
        let profile = DeviceProfile {
            pa_a3: -0.05,
            ..DeviceProfile::identity(1)
        };
        let out = apply_impairments(&clean, &profile, 0.0);
        for s in out.samples() {
            assert!((s.norm() - 0.95).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_identity_packet_is_ideal_preamble() {
        let params = LoRaParams::default();
        let record = emit_packet(&params, &DeviceProfile::identity(7), &ctx(1, 12.0, 3)).unwrap();
        assert_eq!(record.signal, preamble_sequence(&params, 1.0).unwrap());
        assert_eq!(record.true_device, 7);
        assert_eq!(record.true_cfo, 0.0);
    }

    #[test]
    fn same_seed_same_packet() {
        let params = LoRaParams::default();
        let profile = drifting();
        let c = EmissionContext {
            snr_db: 20.0,
            ..ctx(2, 33.0, 77)
        };
        let a = emit_packet(&params, &profile, &c).unwrap();
        let b = emit_packet(&params, &profile, &c).unwrap();
        assert_eq!(a, b);
        let c2 = EmissionContext { rng_seed: 78, ..c };
        assert_ne!(a.signal, emit_packet(&params, &profile, &c2).unwrap().signal);
    }

    #[test]
    fn padding_prepends_silence() {
        let params = LoRaParams::default();
        let record =
            emit_packet_padded(&params, &DeviceProfile::identity(1), &ctx(1, 0.0, 1), 37).unwrap();
        let len = params.preamble_len().unwrap();
        assert_eq!(record.signal.len(), len + 37);
        assert!(record.signal.samples()[..37].iter().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn measured_snr_matches_request() {
        // critically sampled, two-symbol packets keep the 10k-packet average cheap
        let params = LoRaParams {
            ts: 8e-6,
            n_preambles: 2,
            ..LoRaParams::default()
        };
        assert_eq!(symbol_length(&params).unwrap(), 128);
        let profile = DeviceProfile {
            iq_gain_mismatch: 1.05,
            iq_phase_error: 0.03,
            pa_a3: -0.08,
            ..DeviceProfile::identity(1)
        };
        let noiseless = emit_packet(&params, &profile, &ctx(1, 0.0, 0)).unwrap().signal;
        for snr_db in [0.0, 10.0, 30.0] {
            let (mut signal_energy, mut noise_energy) = (0.0, 0.0);
            for seed in 0..10_000u64 {
                let c = EmissionContext {
                    snr_db,
                    ..ctx(1, 0.0, seed)
                };
                let noisy = emit_packet(&params, &profile, &c).unwrap().signal;
                for (y, x) in noisy.samples().iter().zip(noiseless.samples()) {
                    signal_energy += x.norm_sqr();
                    noise_energy += (y - x).norm_sqr();
                }
            }
            let measured = 10.0 * (signal_energy / noise_energy).log10();
            assert!((measured - snr_db).abs() < 0.2, "requested {snr_db}, measured {measured}");
        }
    }

    #[test]
    fn profile_validation() {
        let fc = 868e6;
        assert!(DeviceProfile::identity(1).validate(fc).is_ok());
        let bad = [
            DeviceProfile {
                cfo_base: 9000.0,
                ..DeviceProfile::identity(1)
            },
            DeviceProfile {
                cfo_warmup_tau: 0.0,
                ..DeviceProfile::identity(1)
            },
            DeviceProfile {
                cfo_day_sigma: -1.0,
                ..DeviceProfile::identity(1)
            },
            DeviceProfile {
                pa_a1: 0.0,
                ..DeviceProfile::identity(1)
            },
            DeviceProfile {
                iq_gain_mismatch: 2.0,
                ..DeviceProfile::identity(1)
            },
        ];
        for p in bad {
            assert!(p.validate(fc).is_err(), "{p:?}");
        }
    }

    #[test]
    fn population_is_valid_and_reproducible() {
        let ranges = ProfileRanges::default();
        let a = ranges.sample_population(20, 868e6, 11);
        let b = ranges.sample_population(20, 868e6, 11);
        assert_eq!(a, b);
        assert_ne!(a, ranges.sample_population(20, 868e6, 12));
        for (i, p) in a.iter().enumerate() {
            assert_eq!(p.device_id, i as u32 + 1);
            p.validate(868e6).unwrap();
        }
    }
}
