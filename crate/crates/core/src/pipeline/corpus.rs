//! Synthetic labelled corpora with known modulation signatures.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{validate_split, Manifest, Record, Split};
use crate::config::SynthConfig;
use crate::dsp::synth::{synthesize, ModulationSpec};
use crate::dsp::wav::write_wav;
use crate::error::{Error, Result};

/// Peak level of written files; keeps 16-bit quantization away from clipping.
pub const PEAK: f64 = 0.9;

/// Ground truth of one generated recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub path: String,
    pub label: String,
    pub track_id: String,
    pub mod_hz: f64,
    pub snr_db: f64,
}

/// Everything needed to synthesize one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Planned {
    pub record: Record,
    pub spec: ModulationSpec,
    pub snr_db: f64,
    pub seed: u64,
}

/// Draws per-recording parameters and splits. Splits are made per class so
/// each split sees every class; each recording is its own track.
pub fn plan(cfg: &SynthConfig, audio_dir: &Path) -> Result<Vec<Planned>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for class in &cfg.classes {
        let n = class.recordings;
        let n_test = (n as f64 * cfg.test_fraction).round() as usize;
        let n_val = ((n - n_test) as f64 * cfg.val_fraction).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut split = vec![Split::Train; n];
        for (k, &i) in order.iter().enumerate() {
            if k < n_test {
                split[i] = Split::Test;
            } else if k < n_test + n_val {
                split[i] = Split::Val;
            }
        }
        for (i, split) in split.into_iter().enumerate() {
            let track_id = format!("{}-{i:03}", class.name);
            let jitter = if cfg.mod_hz_jitter > 0.0 {
                rng.random_range(-cfg.mod_hz_jitter..=cfg.mod_hz_jitter)
            } else {
                0.0
            };
            let snr_db = if cfg.snr_db[1] > cfg.snr_db[0] {
                rng.random_range(cfg.snr_db[0]..=cfg.snr_db[1])
            } else {
                cfg.snr_db[0]
            };
            let mut spec = ModulationSpec {
                amplitude: 1.0,
                depth: class.depth,
                carrier: class.carrier.clone(),
                mod_hz: class.mod_hz * (1.0 + jitter),
                harmonics: class.harmonic_terms(),
                duration_s: cfg.duration_s,
                noise_floor: 0.0,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            };
            spec.noise_floor = spec.noise_floor_for_snr(snr_db);
            spec.validate(cfg.sample_rate)?;
            out.push(Planned {
                record: Record {
                    path: audio_dir.join(format!("{track_id}.wav")),
                    label: class.name.clone(),
                    track_id,
                    split,
                },
                spec,
                snr_db,
                seed: rng.random(),
            });
        }
    }
    Ok(out)
}

/// Writes WAV files under `<manifest dir>/audio`, the manifest itself and a
/// `truth.csv` sidecar next to it.
pub fn generate(cfg: &SynthConfig, manifest_path: &Path) -> Result<Manifest> {
    let root = manifest_path.parent().unwrap_or(Path::new("")).to_path_buf();
    let audio = root.join("audio");
    fs::create_dir_all(&audio).map_err(|e| Error::file(&audio, e))?;
    let planned = plan(cfg, &audio)?;
    planned.par_iter().try_for_each(|p| -> Result<()> {
        let w = synthesize(&p.spec, cfg.sample_rate, p.seed, &p.record.track_id)?;
        let peak = w.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let k = if peak > 0.0 { PEAK / peak } else { 1.0 };
        let scaled = w.with_samples(w.samples.iter().map(|v| v * k).collect());
        write_wav(&p.record.path, &scaled).map_err(|e| Error::file(&p.record.path, e))
    })?;
    let manifest = Manifest::new(planned.iter().map(|p| p.record.clone()).collect())?;
    validate_split(&manifest)?;
    manifest.save(manifest_path)?;
    let truth_path = truth_path(manifest_path);
    let mut w = csv::Writer::from_path(&truth_path).map_err(|e| Error::file(&truth_path, e))?;
    for p in &planned {
        w.serialize(TruthRow {
            path: relative(&p.record.path, &root),
            label: p.record.label.clone(),
            track_id: p.record.track_id.clone(),
            mod_hz: p.spec.mod_hz,
            snr_db: p.snr_db,
        })?;
    }
    w.flush()?;
    Ok(manifest)
}

pub fn truth_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_file_name("truth.csv")
}

pub fn load_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::file(path, e))).collect()
}

fn relative(p: &Path, root: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_is_deterministic_and_leak_free() {
        let cfg = SynthConfig::default();
        let a = plan(&cfg, Path::new("x")).unwrap();
        assert_eq!(a, plan(&cfg, Path::new("x")).unwrap());
        assert_eq!(a.len(), 180);
        let m = Manifest::new(a.iter().map(|p| p.record.clone()).collect()).unwrap();
        validate_split(&m).unwrap();
        assert_eq!(m.count(Split::Test), 36);
        assert_eq!(m.count(Split::Val), 21);
    }
}
