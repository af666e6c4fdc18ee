//! Packet datasets: the on-disk container and an equivalent in-memory source.
//!
//! # Container layout (version 1)
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header
//!   [u8; 8]  magic "LORARFDS"
//!   u16      format version (1)
//!   u16      reserved, 0
//!   u32      sf
//!   f64      bw            Hz
//!   f64      fc            Hz
//!   f64      ts            s
//!   u32      n_preambles
//!   u64      master seed
//!   [u8; 32] SHA-256 of the profile table below
//!   u32      device count D
//!   D x profile table entry (76 bytes)
//!     u32 device_id, f64 cfo_base, f64 cfo_warmup_amp, f64 cfo_warmup_tau,
//!     f64 cfo_day_sigma, f64 cfo_jitter_sigma, f64 iq_gain_mismatch,
//!     f64 iq_phase_error, f64 pa_a1, f64 pa_a3
//!   u32      sessions
//!   u64      packets per session
//!   f64      interval      s
//!   f64      snr_db
//!   u64      lead padding  samples
//!   u64      samples per record S
//!   u64      record count R
//! record index, R x 56 bytes
//!   u32 true_device, u32 session_index, u32 packet_index, u32 reserved (0),
//!   f64 elapsed, f64 snr_db, f64 true_cfo, u64 rng_seed,
//!   u64 absolute byte offset of the record's blob
//! blobs, R x (S x 8 bytes)
//!   S interleaved (f32 I, f32 Q) pairs
//! ```
//!
//! Records are ordered by session, then device, then packet.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use num_complex::Complex64;
use sha2::{Digest, Sha256};

use super::binio::{Reader, Writer};
use crate::devsim::{cfo_at, emit_packet_padded, CaptureSchedule, DeviceProfile, EmissionContext};
use crate::error::{Error, Result};
use crate::phy::{ComplexSignal, LoRaParams};
use crate::seed;

pub const DATASET_MAGIC: [u8; 8] = *b"LORARFDS";
pub const DATASET_VERSION: u16 = 1;
const PROFILE_BYTES: usize = 4 + 9 * 8;
const RECORD_BYTES: u64 = 56;

const STREAM_RECORD: u64 = 0x7ec0;

/// Per-packet metadata kept in the record index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordMeta {
    pub true_device: u32,
    pub session_index: u32,
    /// Position within the device's session, from 0.
    pub packet_index: u32,
    pub elapsed: f64,
    pub snr_db: f64,
    pub true_cfo: f64,
    pub rng_seed: u64,
}

impl RecordMeta {
    pub fn context(&self) -> EmissionContext {
        EmissionContext {
            session_index: self.session_index,
            elapsed: self.elapsed,
            snr_db: self.snr_db,
            rng_seed: self.rng_seed,
        }
    }
}

/// Everything except the sample blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub params: LoRaParams,
    pub master_seed: u64,
    pub profiles: Vec<DeviceProfile>,
    pub schedule: CaptureSchedule,
    pub samples_per_record: usize,
    pub records: Vec<RecordMeta>,
}

fn encode_profiles(profiles: &[DeviceProfile]) -> Vec<u8> {
    let mut w = Writer::new(Vec::with_capacity(profiles.len() * PROFILE_BYTES));
    for p in profiles {
        let _ = w.u32(p.device_id);
        for v in [
            p.cfo_base,
            p.cfo_warmup_amp,
            p.cfo_warmup_tau,
            p.cfo_day_sigma,
            p.cfo_jitter_sigma,
            p.iq_gain_mismatch,
            p.iq_phase_error,
            p.pa_a1,
            p.pa_a3,
        ] {
            let _ = w.f64(v);
        }
    }
    w.into_inner()
}

pub(crate) fn write_params<W: Write>(w: &mut Writer<W>, p: &LoRaParams) -> std::io::Result<()> {
    w.u32(p.sf)?;
    w.f64(p.bw)?;
    w.f64(p.fc)?;
    w.f64(p.ts)?;
    w.u32(p.n_preambles as u32)
}

pub(crate) fn read_params<R: Read>(r: &mut Reader<R>) -> std::io::Result<LoRaParams> {
    Ok(LoRaParams {
        sf: r.u32()?,
        bw: r.f64()?,
        fc: r.f64()?,
        ts: r.f64()?,
        n_preambles: r.u32()? as usize,
    })
}

impl DatasetManifest {
    /// Lays out every record of a capture without synthesizing samples.
    pub fn plan(
        params: LoRaParams,
        profiles: Vec<DeviceProfile>,
        schedule: CaptureSchedule,
        master_seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        schedule.validate()?;
        if profiles.is_empty() {
            return Err(Error::Config("devices: at least one device is required".into()));
        }
        let mut ids: Vec<u32> = profiles.iter().map(|p| p.device_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("devices: device ids must be unique".into()));
        }
        for p in &profiles {
            p.validate(params.fc)?;
        }
        if u32::try_from(schedule.packets_per_session).is_err() {
            return Err(Error::Config("capture.packets_per_session is too large".into()));
        }

        let mut records = Vec::with_capacity(schedule.sessions as usize * profiles.len() * schedule.packets_per_session);
        for session in 1..=schedule.sessions {
            for profile in &profiles {
                for i in 0..schedule.packets_per_session {
                    let rng_seed = seed::derive(&[
                        STREAM_RECORD,
                        master_seed,
                        session as u64,
                        profile.device_id as u64,
                        i as u64,
                    ]);
                    let context = EmissionContext {
                        session_index: session,
                        elapsed: i as f64 * schedule.interval,
                        snr_db: schedule.snr_db,
                        rng_seed,
                    };
                    records.push(RecordMeta {
                        true_device: profile.device_id,
                        session_index: session,
                        packet_index: i as u32,
                        elapsed: context.elapsed,
                        snr_db: context.snr_db,
                        true_cfo: cfo_at(profile, &context),
                        rng_seed,
                    });
                }
            }
        }
        Ok(Self {
            samples_per_record: params.preamble_len()? + schedule.lead_padding,
            params,
            master_seed,
            profiles,
            schedule,
            records,
        })
    }

    pub fn profiles_digest(&self) -> [u8; 32] {
        Sha256::digest(encode_profiles(&self.profiles)).into()
    }

    pub fn profile(&self, device_id: u32) -> Option<&DeviceProfile> {
        self.profiles.iter().find(|p| p.device_id == device_id)
    }

    pub fn device_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.profiles.iter().map(|p| p.device_id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn header_len(&self) -> u64 {
        8 + 2 + 2 + 32 + 8 + 32 + 4 + (self.profiles.len() * PROFILE_BYTES) as u64 + 4 + 8 + 8 + 8 + 8 + 8 + 8
    }

    pub fn blob_len(&self) -> u64 {
        self.samples_per_record as u64 * 8
    }

    pub fn blob_offset(&self, index: usize) -> u64 {
        self.header_len() + self.records.len() as u64 * RECORD_BYTES + index as u64 * self.blob_len()
    }

    pub fn file_len(&self) -> u64 {
        self.blob_offset(self.records.len())
    }

    fn write_header<W: Write>(&self, w: &mut Writer<W>) -> std::io::Result<()> {
        w.bytes(&DATASET_MAGIC)?;
        w.u16(DATASET_VERSION)?;
        w.u16(0)?;
        write_params(w, &self.params)?;
        w.u64(self.master_seed)?;
        w.bytes(&self.profiles_digest())?;
        w.u32(self.profiles.len() as u32)?;
        w.bytes(&encode_profiles(&self.profiles))?;
        w.u32(self.schedule.sessions)?;
        w.usize(self.schedule.packets_per_session)?;
        w.f64(self.schedule.interval)?;
        w.f64(self.schedule.snr_db)?;
        w.usize(self.schedule.lead_padding)?;
        w.usize(self.samples_per_record)?;
        w.usize(self.records.len())?;
        for (i, r) in self.records.iter().enumerate() {
            w.u32(r.true_device)?;
            w.u32(r.session_index)?;
            w.u32(r.packet_index)?;
            w.u32(0)?;
            w.f64(r.elapsed)?;
            w.f64(r.snr_db)?;
            w.f64(r.true_cfo)?;
            w.u64(r.rng_seed)?;
            w.u64(self.blob_offset(i))?;
        }
        Ok(())
    }

    fn read_header<R: Read>(r: &mut Reader<R>, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let io = |e: std::io::Error| Error::io(path, e);
        if r.array::<8>().map_err(io)? != DATASET_MAGIC {
            return Err(bad("not a dataset container (bad magic)".into()));
        }
        let version = r.u16().map_err(io)?;
        if version != DATASET_VERSION {
            return Err(bad(format!(
                "unsupported format version {version} (expected {DATASET_VERSION})"
            )));
        }
        r.u16().map_err(io)?;
        let params = read_params(r).map_err(io)?;
        let master_seed = r.u64().map_err(io)?;
        let digest = r.array::<32>().map_err(io)?;
        let count = r.u32().map_err(io)? as usize;
        let mut profiles = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            profiles.push(DeviceProfile {
                device_id: r.u32().map_err(io)?,
                cfo_base: r.f64().map_err(io)?,
                cfo_warmup_amp: r.f64().map_err(io)?,
                cfo_warmup_tau: r.f64().map_err(io)?,
                cfo_day_sigma: r.f64().map_err(io)?,
                cfo_jitter_sigma: r.f64().map_err(io)?,
                iq_gain_mismatch: r.f64().map_err(io)?,
                iq_phase_error: r.f64().map_err(io)?,
                pa_a1: r.f64().map_err(io)?,
                pa_a3: r.f64().map_err(io)?,
            });
        }
        let schedule = CaptureSchedule {
            sessions: r.u32().map_err(io)?,
            packets_per_session: r.usize().map_err(io)?,
            interval: r.f64().map_err(io)?,
            snr_db: r.f64().map_err(io)?,
            lead_padding: r.usize().map_err(io)?,
        };
        let samples_per_record = r.usize().map_err(io)?;
        let record_count = r.usize().map_err(io)?;
        let mut manifest = Self {
            params,
            master_seed,
            profiles,
            schedule,
            samples_per_record,
            records: Vec::new(),
        };
        if manifest.profiles_digest() != digest {
            return Err(bad("profile table does not match its digest".into()));
        }
        let expected = params
            .preamble_len()
            .map_err(|e| bad(e.to_string()))?
            + schedule.lead_padding;
        if samples_per_record != expected {
            return Err(bad(format!(
                "records hold {samples_per_record} samples but the parameters imply {expected}"
            )));
        }
        manifest.records.reserve(record_count.min(1 << 24));
        for i in 0..record_count {
            let meta = RecordMeta {
                true_device: r.u32().map_err(io)?,
                session_index: r.u32().map_err(io)?,
                packet_index: {
                    let p = r.u32().map_err(io)?;
                    r.u32().map_err(io)?;
                    p
                },
                elapsed: r.f64().map_err(io)?,
                snr_db: r.f64().map_err(io)?,
                true_cfo: r.f64().map_err(io)?,
                rng_seed: r.u64().map_err(io)?,
            };
            let offset = r.u64().map_err(io)?;
            manifest.records.push(meta);
            // offsets are checked once the record count is known
            if offset != manifest.header_len() + record_count as u64 * RECORD_BYTES + i as u64 * manifest.blob_len() {
                return Err(bad(format!("record {i} has blob offset {offset}, which breaks the layout")));
            }
        }
        Ok(manifest)
    }
}

/// Random access to the packets of a dataset.
pub trait PacketSource {
    fn manifest(&self) -> &DatasetManifest;

    /// The received samples of record `index`.
    fn load(&self, index: usize) -> Result<ComplexSignal>;
}

/// Regenerates packets on demand; yields exactly what the container stores.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    manifest: DatasetManifest,
}

impl SyntheticSource {
    pub fn new(manifest: DatasetManifest) -> Self {
        Self { manifest }
    }

    pub fn plan(
        params: LoRaParams,
        profiles: Vec<DeviceProfile>,
        schedule: CaptureSchedule,
        master_seed: u64,
    ) -> Result<Self> {
        Ok(Self::new(DatasetManifest::plan(params, profiles, schedule, master_seed)?))
    }
}

/// Rounds to the stored single precision.
fn quantize(signal: &ComplexSignal) -> ComplexSignal {
    let samples = signal
        .samples()
        .iter()
        .map(|s| Complex64::new(s.re as f32 as f64, s.im as f32 as f64))
        .collect();
    ComplexSignal::from_parts(samples, signal.ts())
}

impl PacketSource for SyntheticSource {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load(&self, index: usize) -> Result<ComplexSignal> {
        let m = &self.manifest;
        let meta = m
            .records
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("record {index} out of range")))?;
        let profile = m
            .profile(meta.true_device)
            .ok_or_else(|| Error::Dataset(format!("record {index} names unknown device {}", meta.true_device)))?;
        let packet = emit_packet_padded(&m.params, profile, &meta.context(), m.schedule.lead_padding)?;
        Ok(quantize(&packet.signal))
    }
}

/// A container on disk. Blobs are read lazily.
#[derive(Debug)]
pub struct DatasetFile {
    path: PathBuf,
    manifest: DatasetManifest,
    file: Mutex<File>,
}

impl DatasetFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut reader = Reader::new(BufReader::new(file));
        let manifest = DatasetManifest::read_header(&mut reader, path)?;
        if len != manifest.file_len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "file is {len} bytes but the index describes {} bytes",
                    manifest.file_len()
                ),
            });
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            manifest,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl PacketSource for DatasetFile {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load(&self, index: usize) -> Result<ComplexSignal> {
        let m = &self.manifest;
        if index >= m.records.len() {
            return Err(Error::Dataset(format!("record {index} out of range")));
        }
        let mut buf = vec![0u8; m.blob_len() as usize];
        {
            let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
            file.seek(SeekFrom::Start(m.blob_offset(index)))
                .and_then(|_| file.read_exact(&mut buf))
                .map_err(|e| Error::io(&self.path, e))?;
        }
        let samples = buf
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        Ok(ComplexSignal::from_parts(samples, m.params.ts))
    }
}

/// Writes every record of `source` to `path`; returns the byte count.
pub fn write_dataset(path: impl AsRef<Path>, source: &dyn PacketSource, force: bool) -> Result<u64> {
    let path = path.as_ref();
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    let m = source.manifest();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = Writer::new(BufWriter::new(file));
    m.write_header(&mut w).map_err(|e| Error::io(path, e))?;
    for i in 0..m.records.len() {
        let signal = source.load(i)?;
        if signal.len() != m.samples_per_record {
            return Err(Error::shape(m.samples_per_record, signal.len()));
        }
        for s in signal.samples() {
            w.f32(s.re as f32).map_err(|e| Error::io(path, e))?;
            w.f32(s.im as f32).map_err(|e| Error::io(path, e))?;
        }
    }
    w.into_inner().flush().map_err(|e| Error::io(path, e))?;
    Ok(m.file_len())
}
