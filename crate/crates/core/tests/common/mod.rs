#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lora_rffi::classifier::{CfoDatabase, CnnSpec, Model, Network};
use lora_rffi::devsim::{CaptureSchedule, DeviceProfile};
use lora_rffi::harness::{write_dataset, Checkpoint, DatasetFile, FrontEnd, Selection, SyntheticSource};
use lora_rffi::repr::ReprKind;
use lora_rffi::LoRaParams;

/// Set to regenerate the files under `tests/golden`.
pub const REGENERATE_ENV: &str = "LORA_RFFI_REGENERATE_GOLDEN";

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub fn golden_params() -> LoRaParams {
    LoRaParams {
        n_preambles: 2,
        ..LoRaParams::default()
    }
}

pub fn golden_profiles() -> Vec<DeviceProfile> {
    vec![
        DeviceProfile {
            device_id: 1,
            cfo_base: 2500.0,
            cfo_warmup_amp: 300.0,
            cfo_warmup_tau: 400.0,
            cfo_day_sigma: 50.0,
            cfo_jitter_sigma: 10.0,
            iq_gain_mismatch: 1.05,
            iq_phase_error: 0.03,
            pa_a1: 1.0,
            pa_a3: -0.05,
        },
        DeviceProfile {
            device_id: 2,
            cfo_base: -4100.0,
            cfo_warmup_amp: 150.0,
            cfo_warmup_tau: 250.0,
            cfo_day_sigma: 50.0,
            cfo_jitter_sigma: 10.0,
            iq_gain_mismatch: 0.97,
            iq_phase_error: -0.02,
            pa_a1: 0.9,
            pa_a3: -0.1,
        },
    ]
}

pub fn golden_source() -> SyntheticSource {
    let schedule = CaptureSchedule {
        sessions: 2,
        packets_per_session: 2,
        interval: 1.0,
        snr_db: 30.0,
        lead_padding: 16,
    };
    SyntheticSource::plan(golden_params(), golden_profiles(), schedule, 20240611).unwrap()
}

/// An untrained but fully populated checkpoint; no floating-point training
/// is involved, so its bytes depend only on the seeded initializer.
pub fn golden_checkpoint() -> Checkpoint {
    let params = golden_params();
    let front_end = FrontEnd::new(params, ReprKind::Spectrogram, true).unwrap();
    let [_, rows, cols] = front_end.input_shape();
    let spec = CnnSpec::spectrogram_with(rows, cols, 2, [2, 2, 2]);
    let net = Network::<f32>::new(&spec, 99).unwrap();
    let model = Model::from_parts(net, vec![1, 2]).unwrap();
    let database = CfoDatabase::new(BTreeMap::from([(1, 2512.25), (2, -4093.5)]), 200.0).unwrap();
    let source = golden_source();
    let manifest = lora_rffi::harness::PacketSource::manifest(&source);
    Checkpoint {
        model,
        database,
        front_end,
        train_selection: Selection::head(vec![1], 1),
        dataset_seed: manifest.master_seed,
        dataset_digest: manifest.profiles_digest(),
    }
}

pub fn regenerating() -> bool {
    std::env::var_os(REGENERATE_ENV).is_some()
}

/// Compares freshly produced bytes with the stored golden file and checks
/// that the stored file re-serializes to itself. Returns a description of
/// the first failure.
pub fn check_dataset_golden(scratch: &Path) -> Result<(), String> {
    let golden = golden_dir().join("dataset_v1.lrfd");
    let fresh = scratch.join("fresh.lrfd");
    write_dataset(&fresh, &golden_source(), true).map_err(|e| e.to_string())?;
    if regenerating() {
        fs::create_dir_all(golden_dir()).map_err(|e| e.to_string())?;
        fs::copy(&fresh, &golden).map_err(|e| e.to_string())?;
    }
    let stored = fs::read(&golden).map_err(|e| format!("{}: {e}", golden.display()))?;
    let reread = scratch.join("reread.lrfd");
    let file = DatasetFile::open(&golden).map_err(|e| e.to_string())?;
    write_dataset(&reread, &file, true).map_err(|e| e.to_string())?;
    if fs::read(&reread).map_err(|e| e.to_string())? != stored {
        return Err("stored dataset does not re-serialize to itself".into());
    }
    if fs::read(&fresh).map_err(|e| e.to_string())? != stored {
        return Err("freshly generated dataset differs from the stored golden file".into());
    }
    Ok(())
}

pub fn check_checkpoint_golden() -> Result<(), String> {
    let golden = golden_dir().join("checkpoint_v1.lrfc");
    let fresh = golden_checkpoint().to_bytes();
    if regenerating() {
        fs::create_dir_all(golden_dir()).map_err(|e| e.to_string())?;
        fs::write(&golden, &fresh).map_err(|e| e.to_string())?;
    }
    let stored = fs::read(&golden).map_err(|e| format!("{}: {e}", golden.display()))?;
    let loaded = Checkpoint::load(&golden).map_err(|e| e.to_string())?;
    if loaded.to_bytes() != stored {
        return Err("stored checkpoint does not re-serialize to itself".into());
    }
    if fresh != stored {
        return Err("freshly built checkpoint differs from the stored golden file".into());
    }
    Ok(())
}
