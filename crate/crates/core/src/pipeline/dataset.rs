//! Per-segment features with an on-disk cache.
//!
//! Each recording is band-passed once, cut into windows, and every window is
//! normalized before feature extraction. Results are cached under
//! `<cache>/<kind>-<settings hash>/<file hash>/<window>.dnt`, so a rerun with
//! the same audio and settings reads instead of recomputing.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use demonet_tensor::io::{load_tensor, save_tensor};
use demonet_tensor::Tensor;
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::manifest::{Manifest, Record, Split};
use super::segments::SegmentIndex;
use crate::config::Config;
use crate::demon::{demon2d, DemonParams};
use crate::dsp::wav::read_wav;
use crate::dsp::{bandpass, normalize, Waveform};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, SpectrogramExtractor, SpectrogramParams, LOG_EPS};

/// Which feature families to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wanted {
    pub spectrogram: Option<FeatureKind>,
    pub demon: bool,
}

impl Wanted {
    /// The configured spectrogram plus DEMON spectra, as training needs.
    pub fn training(cfg: &Config) -> Self {
        Self {
            spectrogram: Some(cfg.features.kind),
            demon: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentFeatures {
    pub record: usize,
    pub window: usize,
    pub label: usize,
    pub split: Split,
    /// Frames × bins, as extracted (amplitude for STFT, log for Mel/CQT).
    pub spectrogram: Option<Array2<f64>>,
    /// Sub-bands × modulation bins.
    pub demon: Option<Array2<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub files_read: usize,
    pub files_written: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub records: Vec<Record>,
    /// Windows per record.
    pub n_windows: Vec<usize>,
    pub segments: Vec<SegmentFeatures>,
    pub spectrogram_kind: Option<FeatureKind>,
    pub mod_bin_hz: f64,
    pub cache: CacheStats,
    /// Records that could not be processed, with the reason.
    pub errors: Vec<(PathBuf, String)>,
}

#[derive(Serialize)]
struct SpecKey<'a> {
    params: String,
    segment: (f64, f64),
    sample_rate: u32,
    _v: &'a str,
}

fn settings_hash(kind: &str, params: String, cfg: &Config, sample_rate: u32) -> String {
    let key = SpecKey {
        params,
        segment: (cfg.dsp.segment_s, cfg.dsp.segment_hop_s),
        sample_rate,
        _v: "1",
    };
    let bytes = serde_json::to_vec(&key).expect("key serializes");
    format!("{kind}-{}", &hex::encode(Sha256::digest(&bytes))[..16])
}

fn spec_settings(p: &SpectrogramParams) -> String {
    format!("{p:?}")
}

fn demon_settings(p: &DemonParams) -> String {
    serde_json::to_string(p).expect("params serialize")
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes))[..16].to_string())
}

fn to_tensor(a: &Array2<f64>) -> Tensor {
    let (r, c) = a.dim();
    Tensor::new([r, c], a.iter().copied().collect()).expect("consistent shape")
}

fn from_tensor(t: Tensor) -> Result<Array2<f64>> {
    let [r, c] = t.dims2("cache")?;
    Ok(Array2::from_shape_vec((r, c), t.into_data()).expect("consistent shape"))
}

fn write_atomic(path: &Path, a: &Array2<f64>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    save_tensor(&tmp, &to_tensor(a)).map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// Normalized windows of a recording after the dataset band-pass.
pub fn prepared_windows(w: &Waveform, cfg: &Config) -> Result<(SegmentIndex, Vec<Waveform>)> {
    let (lo, hi) = cfg.passband();
    let banded = bandpass(w, lo, hi.min(w.nyquist()))?;
    let idx = SegmentIndex::new(w.len(), w.sample_rate, cfg.dsp.segment_s, cfg.dsp.segment_hop_s)?;
    let windows = idx
        .windows
        .iter()
        .map(|win| normalize(&banded.slice(win.start, win.len)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((idx, windows))
}

struct Family<'a> {
    dir: PathBuf,
    compute: Box<dyn Fn(&Waveform) -> Result<Array2<f64>> + Sync + 'a>,
}

/// Loads every window's features from the cache or computes and stores them.
fn family_features(
    fam: &Family,
    hash: &str,
    n_windows: usize,
    windows: &mut Option<Vec<Waveform>>,
    load: &dyn Fn() -> Result<Vec<Waveform>>,
    stats: (&AtomicUsize, &AtomicUsize),
) -> Result<Vec<Array2<f64>>> {
    let dir = fam.dir.join(hash);
    let paths: Vec<PathBuf> = (0..n_windows).map(|k| dir.join(format!("{k:04}.dnt"))).collect();
    if paths.iter().all(|p| p.exists()) {
        let out = paths
            .iter()
            .map(|p| from_tensor(load_tensor(p).map_err(|e| Error::file(p, e))?))
            .collect::<Result<Vec<_>>>()?;
        stats.0.fetch_add(paths.len(), Ordering::Relaxed);
        return Ok(out);
    }
    if windows.is_none() {
        *windows = Some(load()?);
    }
    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    let mut out = Vec::with_capacity(n_windows);
    for (w, p) in windows.as_ref().expect("loaded").iter().zip(&paths) {
        let a = (fam.compute)(w)?;
        write_atomic(p, &a)?;
        stats.1.fetch_add(1, Ordering::Relaxed);
        out.push(a);
    }
    Ok(out)
}

impl Dataset {
    /// Features for every record of `manifest`. Records that fail are
    /// listed in [`Dataset::errors`]; the rest are kept.
    pub fn build(manifest: &Manifest, cfg: &Config, want: Wanted) -> Result<Self> {
        let cache = cfg.io.cache_dir.clone();
        let dp = cfg.demon_params();
        let read = AtomicUsize::new(0);
        let written = AtomicUsize::new(0);
        let results: Vec<Result<(usize, Vec<SegmentFeatures>)>> = manifest
            .records
            .par_iter()
            .enumerate()
            .map(|(ri, rec)| {
                let label = manifest
                    .label_index(&rec.label)
                    .ok_or_else(|| Error::file(&rec.path, format!("unknown label {}", rec.label)))?;
                let (n_samples, sr) = {
                    let r = hound::WavReader::open(&rec.path).map_err(|e| Error::file(&rec.path, e))?;
                    (r.duration() as usize, r.spec().sample_rate)
                };
                let n_windows =
                    SegmentIndex::new(n_samples, sr, cfg.dsp.segment_s, cfg.dsp.segment_hop_s)?.len();
                let hash = file_hash(&rec.path)?;
                let load = || -> Result<Vec<Waveform>> {
                    let w = read_wav(&rec.path)?;
                    Ok(prepared_windows(&w, cfg)?.1)
                };
                let mut windows = None;
                let spectrograms = match want.spectrogram {
                    Some(kind) => {
                        let params = SpectrogramParams {
                            kind,
                            ..cfg.spectrogram_params()
                        };
                        let dir = cache.join(settings_hash(&kind.to_string(), spec_settings(&params), cfg, sr));
                        let ex = SpectrogramExtractor::new(params, sr)?;
                        let fam = Family {
                            dir,
                            compute: Box::new(move |w: &Waveform| Ok(ex.extract(w)?.values)),
                        };
                        Some(family_features(&fam, &hash, n_windows, &mut windows, &load, (&read, &written))?)
                    }
                    None => None,
                };
                let demons = if want.demon {
                    let dp = dp.clone();
                    let fam = Family {
                        dir: cache.join(settings_hash("demon", demon_settings(&dp), cfg, sr)),
                        compute: Box::new(move |w: &Waveform| Ok(demon2d(w, &dp)?.values)),
                    };
                    Some(family_features(&fam, &hash, n_windows, &mut windows, &load, (&read, &written))?)
                } else {
                    None
                };
                let segs = (0..n_windows)
                    .map(|k| SegmentFeatures {
                        record: ri,
                        window: k,
                        label,
                        split: rec.split,
                        spectrogram: spectrograms.as_ref().map(|s| s[k].clone()),
                        demon: demons.as_ref().map(|d| d[k].clone()),
                    })
                    .collect();
                Ok((n_windows, segs))
            })
            .collect();
        let mut n_windows = Vec::with_capacity(results.len());
        let mut segments = Vec::new();
        let mut errors = Vec::new();
        for (rec, r) in manifest.records.iter().zip(results) {
            match r {
                Ok((n, s)) => {
                    n_windows.push(n);
                    segments.extend(s);
                }
                Err(e) => {
                    log::error!("{}: {e}", rec.path.display());
                    n_windows.push(0);
                    errors.push((rec.path.clone(), e.to_string()));
                }
            }
        }
        Ok(Self {
            classes: manifest.classes.clone(),
            records: manifest.records.clone(),
            n_windows,
            segments,
            spectrogram_kind: want.spectrogram,
            mod_bin_hz: dp.mod_bin_hz(),
            cache: CacheStats {
                files_read: read.into_inner(),
                files_written: written.into_inner(),
            },
            errors,
        })
    }

    /// Fails on the first record that could not be processed.
    pub fn require_complete(self) -> Result<Self> {
        match self.errors.first() {
            Some((p, e)) => Err(Error::file(p, e)),
            None => Ok(self),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.segments.len()).filter(|&i| self.segments[i].split == split).collect()
    }

    /// Segment indices of one record, in window order.
    pub fn record_segments(&self, record: usize) -> Vec<usize> {
        (0..self.segments.len()).filter(|&i| self.segments[i].record == record).collect()
    }

    /// Classifier input for a segment: the spectrogram, with STFT amplitudes
    /// moved to the log domain like the other kinds.
    pub fn classifier_input(&self, i: usize) -> Result<Array2<f64>> {
        let s = self.segments[i]
            .spectrogram
            .as_ref()
            .ok_or_else(|| crate::error::invalid("dataset", "spectrograms were not extracted"))?;
        Ok(match self.spectrogram_kind {
            Some(FeatureKind::Stft) => s.mapv(|v| (v + LOG_EPS).ln()),
            _ => s.clone(),
        })
    }

    pub fn demon(&self, i: usize) -> Result<&Array2<f64>> {
        self.segments[i]
            .demon
            .as_ref()
            .ok_or_else(|| crate::error::invalid("dataset", "DEMON spectra were not extracted"))
    }
}
