//! TOML run configuration. Every section has defaults; unknown keys are
//! rejected, and [`Config::validate`] runs before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::demon::DemonParams;
use crate::dsp::synth::{Carrier, Harmonic};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, SpectrogramParams};
use crate::model::{DemonetConfig, VaeConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub io: IoConfig,
    pub dsp: DspConfig,
    pub features: FeaturesConfig,
    pub demon: DemonConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub manifest: PathBuf,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            manifest: "data/manifest.csv".into(),
            cache_dir: "cache".into(),
            out_dir: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    /// Band kept before any feature extraction, Hz.
    pub passband: [f64; 2],
    pub frame_len_ms: f64,
    pub shift_ms: f64,
    pub segment_s: f64,
    pub segment_hop_s: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            passband: [10.0, 8000.0],
            frame_len_ms: 50.0,
            shift_ms: 25.0,
            segment_s: 30.0,
            segment_hop_s: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesConfig {
    pub kind: FeatureKind,
    pub n_mels: usize,
    pub cqt: CqtConfig,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        Self {
            kind: FeatureKind::Cqt,
            n_mels: 300,
            cqt: CqtConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CqtConfig {
    /// Bins per octave.
    pub b: u32,
    pub hop_ms: f64,
    /// Lowest center frequency; the passband's lower edge when absent.
    pub f_min: Option<f64>,
}

impl Default for CqtConfig {
    fn default() -> Self {
        Self {
            b: 30,
            hop_ms: 33.34375,
            f_min: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemonConfig {
    pub interval_hz: f64,
    pub lowpass_cutoff_hz: f64,
    pub fir_taps: usize,
    pub passes: usize,
    pub mod_f_max_hz: f64,
    pub n_mod_bins: usize,
    /// Upper limit on the number of sub-bands; 0 keeps all of them.
    pub max_subbands: usize,
}

impl Default for DemonConfig {
    fn default() -> Self {
        let d = DemonParams::default();
        Self {
            interval_hz: d.interval_hz,
            lowpass_cutoff_hz: d.lowpass_cutoff_hz,
            fir_taps: d.fir_taps,
            passes: d.passes,
            mod_f_max_hz: d.mod_f_max_hz,
            n_mod_bins: d.n_mod_bins,
            max_subbands: d.n_subbands_cap.unwrap_or(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_experts: usize,
    /// Taken from the manifest's class list when absent.
    pub n_classes: Option<usize>,
    pub alpha: f64,
    pub widths: [usize; 4],
    pub vae_hidden: usize,
    pub vae_latent: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_experts: 5,
            n_classes: None,
            alpha: 1e-2,
            widths: [64, 128, 256, 512],
            vae_hidden: 64,
            vae_latent: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Stage-1 epochs.
    pub vae_epochs: usize,
    pub warmup: usize,
    pub batch: usize,
    pub seeds: Vec<u64>,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
    /// Cross-temporal pairs drawn per training recording per Stage-1 epoch.
    pub pairs_per_recording: usize,
    /// Share of training tracks held out for validation when the manifest
    /// has no `val` split.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            weight_decay: 1e-3,
            epochs: 200,
            vae_epochs: 200,
            warmup: 5,
            batch: 16,
            seeds: vec![123, 3407],
            patience: 20,
            pairs_per_recording: 4,
            val_fraction: 0.15,
        }
    }
}

/// Synthetic corpus description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub sample_rate: u32,
    pub duration_s: f64,
    /// Per-recording SNR drawn uniformly from this range, dB.
    pub snr_db: [f64; 2],
    /// Relative spread of each recording's shaft rate around its class value.
    pub mod_hz_jitter: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub classes: Vec<SynthClass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    pub name: String,
    pub recordings: usize,
    pub carrier: Carrier,
    pub mod_hz: f64,
    /// Relative depths of envelope harmonics 1, 2, ...
    pub harmonics: Vec<f64>,
    pub depth: f64,
}

impl SynthClass {
    pub fn harmonic_terms(&self) -> Vec<Harmonic> {
        self.harmonics
            .iter()
            .enumerate()
            .map(|(i, &depth)| Harmonic {
                multiple: i as u32 + 1,
                depth,
            })
            .collect()
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        let class = |name: &str, lo: f64, hi: f64, mod_hz: f64, harmonics: Vec<f64>| SynthClass {
            name: name.into(),
            recordings: 60,
            carrier: Carrier::Broadband { lo_hz: lo, hi_hz: hi },
            mod_hz,
            harmonics,
            depth: 0.5,
        };
        Self {
            seed: 7,
            sample_rate: 4000,
            duration_s: 90.0,
            snr_db: [0.0, 10.0],
            mod_hz_jitter: 0.03,
            test_fraction: 0.2,
            val_fraction: 0.15,
            classes: vec![
                class("cargo", 100.0, 700.0, 4.0, vec![1.0, 0.6, 0.4]),
                class("tanker", 400.0, 1200.0, 7.0, vec![1.0, 0.6, 0.4, 0.3]),
                class("tug", 800.0, 1800.0, 11.0, vec![1.0, 0.6, 0.4, 0.3, 0.2]),
            ],
        }
    }
}

impl SynthConfig {
    /// Class-imbalanced variant: 120 cargo recordings against 20 of each
    /// other class, 60 s each.
    pub fn skewed() -> Self {
        let mut s = Self {
            seed: 11,
            duration_s: 60.0,
            ..Self::default()
        };
        for c in &mut s.classes {
            c.recordings = if c.name == "cargo" { 120 } else { 20 };
        }
        s
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => cfg_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn passband(&self) -> (f64, f64) {
        (self.dsp.passband[0], self.dsp.passband[1])
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dsp;
        let [lo, hi] = d.passband;
        if !(lo >= 0.0 && lo < hi) {
            return Err(cfg_err(format!("dsp.passband {lo}..{hi} must satisfy 0 <= lo < hi")));
        }
        for (k, v) in [
            ("dsp.frame_len_ms", d.frame_len_ms),
            ("dsp.shift_ms", d.shift_ms),
            ("dsp.segment_s", d.segment_s),
            ("dsp.segment_hop_s", d.segment_hop_s),
            ("features.cqt.hop_ms", self.features.cqt.hop_ms),
            ("demon.interval_hz", self.demon.interval_hz),
            ("demon.lowpass_cutoff_hz", self.demon.lowpass_cutoff_hz),
            ("demon.mod_f_max_hz", self.demon.mod_f_max_hz),
            ("train.lr", self.train.lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(cfg_err(format!("{k} must be positive, got {v}")));
            }
        }
        if self.features.n_mels == 0 || self.features.cqt.b == 0 {
            return Err(cfg_err("features.n_mels and features.cqt.b must be positive"));
        }
        if let Some(f) = self.features.cqt.f_min {
            if !(f > 0.0 && f < hi) {
                return Err(cfg_err(format!("features.cqt.f_min {f} must lie in (0, {hi})")));
            }
        }
        let dm = &self.demon;
        if dm.n_mod_bins < 2 || dm.fir_taps < 2 || dm.passes == 0 {
            return Err(cfg_err("demon.n_mod_bins and demon.fir_taps need >= 2, demon.passes >= 1"));
        }
        let m = &self.model;
        if m.n_experts == 0 || m.n_classes == Some(0) || m.widths.contains(&0) || m.vae_hidden == 0 || m.vae_latent == 0 {
            return Err(cfg_err("model sizes must be positive"));
        }
        if !(m.alpha >= 0.0) {
            return Err(cfg_err(format!("model.alpha {} must be >= 0", m.alpha)));
        }
        let t = &self.train;
        if t.epochs == 0 || t.vae_epochs == 0 || t.batch == 0 || t.pairs_per_recording == 0 {
            return Err(cfg_err("train.epochs, vae_epochs, batch and pairs_per_recording must be positive"));
        }
        if t.warmup >= t.epochs.min(t.vae_epochs) {
            return Err(cfg_err("train.warmup must be shorter than the epoch budgets"));
        }
        if !(t.weight_decay >= 0.0) || !(0.0..1.0).contains(&t.val_fraction) {
            return Err(cfg_err("train.weight_decay must be >= 0 and val_fraction in [0, 1)"));
        }
        if t.seeds.is_empty() {
            return Err(cfg_err("train.seeds must not be empty"));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
            let nyq = s.sample_rate as f64 / 2.0;
            if hi > nyq {
                return Err(cfg_err(format!("dsp.passband upper edge {hi} above synth Nyquist {nyq}")));
            }
        }
        Ok(())
    }

    pub fn spectrogram_params(&self) -> SpectrogramParams {
        SpectrogramParams {
            kind: self.features.kind,
            passband: self.passband(),
            frame_len_ms: self.dsp.frame_len_ms,
            shift_ms: self.dsp.shift_ms,
            n_mels: self.features.n_mels,
            cqt_b: self.features.cqt.b,
            cqt_hop_ms: self.features.cqt.hop_ms,
            cqt_f_min: self.features.cqt.f_min,
        }
    }

    pub fn demon_params(&self) -> DemonParams {
        let d = &self.demon;
        DemonParams {
            passband: self.passband(),
            interval_hz: d.interval_hz,
            lowpass_cutoff_hz: d.lowpass_cutoff_hz,
            fir_taps: d.fir_taps,
            passes: d.passes,
            mod_f_max_hz: d.mod_f_max_hz,
            n_mod_bins: d.n_mod_bins,
            n_subbands_cap: (d.max_subbands > 0).then_some(d.max_subbands),
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            hidden: self.model.vae_hidden,
            latent: self.model.vae_latent,
        }
    }

    pub fn demonet_config(&self, n_classes: usize) -> DemonetConfig {
        DemonetConfig {
            n_mod_bins: self.demon.n_mod_bins,
            n_experts: self.model.n_experts,
            n_classes: self.model.n_classes.unwrap_or(n_classes),
            widths: self.model.widths,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || !(self.duration_s > 0.0) {
            return Err(cfg_err("synth.sample_rate and synth.duration_s must be positive"));
        }
        if !(self.snr_db[0] <= self.snr_db[1]) || !(0.0..1.0).contains(&self.mod_hz_jitter) {
            return Err(cfg_err("synth.snr_db must be [lo, hi] and mod_hz_jitter in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(cfg_err("synth.test_fraction and val_fraction must lie in [0, 1)"));
        }
        if self.classes.is_empty() {
            return Err(cfg_err("synth.classes must not be empty"));
        }
        for c in &self.classes {
            if c.name.is_empty() || c.recordings == 0 || c.harmonics.is_empty() {
                return Err(cfg_err(format!("synth class `{}` needs a name, recordings and harmonics", c.name)));
            }
            if !(c.mod_hz > 0.0) || !(0.0..=1.0).contains(&c.depth) {
                return Err(cfg_err(format!("synth class `{}`: mod_hz > 0 and depth in [0, 1]", c.name)));
            }
        }
        let mut names: Vec<_> = self.classes.iter().map(|c| &c.name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.classes.len() {
            return Err(cfg_err("synth class names must be unique"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = Config {
            synth: Some(SynthConfig::default()),
            dsp: DspConfig {
                passband: [20.0, 1980.0],
                ..DspConfig::default()
            },
            ..Config::default()
        };
        cfg.validate().unwrap();
        let back = Config::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = Config::from_toml("[train]\nlr = 1e-3\nmomentum = 0.9\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("momentum"), "{err}");
        let err = Config::from_toml("[model]\nalpha = -1.0\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
