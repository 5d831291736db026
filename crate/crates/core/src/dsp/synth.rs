//! Amplitude-modulated noise with known shaft and blade signatures.
//!
//! The deterministic part is `A·(1 + m·Σ r_h·sin(h·(Ω·t + φ)))·c(t)`, where the
//! carrier `c` is either a cosine or band-limited Gaussian noise scaled to the
//! power of a unit cosine. White noise of standard deviation `noise_floor` is
//! added on top.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{bandpass, Waveform};
use crate::error::{invalid, Result};

const CARRIER_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Carrier {
    Tone { hz: f64 },
    Broadband { lo_hz: f64, hi_hz: f64 },
}

/// One envelope harmonic: `multiple · Ω` with relative depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub multiple: u32,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationSpec {
    pub amplitude: f64,
    pub depth: f64,
    pub carrier: Carrier,
    pub mod_hz: f64,
    /// Envelope terms; the plain single-tone envelope is `[{1, 1.0}]`.
    pub harmonics: Vec<Harmonic>,
    pub duration_s: f64,
    pub noise_floor: f64,
    /// Phase of the modulation at t = 0, radians.
    #[serde(default)]
    pub phase: f64,
}

impl ModulationSpec {
    /// Single-harmonic tone-carrier spec without noise.
    pub fn tone(carrier_hz: f64, mod_hz: f64, depth: f64, duration_s: f64) -> Self {
        Self {
            amplitude: 1.0,
            depth,
            carrier: Carrier::Tone { hz: carrier_hz },
            mod_hz,
            harmonics: vec![Harmonic {
                multiple: 1,
                depth: 1.0,
            }],
            duration_s,
            noise_floor: 0.0,
            phase: 0.0,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyq = sample_rate as f64 / 2.0;
        let fail = |msg: String| Err(invalid("synthesize", msg));
        if sample_rate == 0 {
            return fail("sample rate must be positive".into());
        }
        if !(self.amplitude > 0.0) {
            return fail(format!("amplitude {} must be positive", self.amplitude));
        }
        if !(0.0..=1.0).contains(&self.depth) {
            return fail(format!("depth {} outside [0, 1]", self.depth));
        }
        if !(self.mod_hz >= 0.0 && self.duration_s > 0.0 && self.noise_floor >= 0.0) {
            return fail("mod_hz, noise_floor must be >= 0 and duration > 0".into());
        }
        match self.carrier {
            Carrier::Tone { hz } if !(hz > 0.0 && hz < nyq) => {
                fail(format!("carrier {hz} Hz must lie in (0, {nyq}) Hz"))
            }
            Carrier::Broadband { lo_hz, hi_hz } if !(0.0 <= lo_hz && lo_hz < hi_hz && hi_hz <= nyq) => {
                fail(format!("broadband carrier {lo_hz}..{hi_hz} Hz must lie within [0, {nyq}] Hz"))
            }
            _ => Ok(()),
        }
    }

    /// Mean power of the noiseless signal.
    pub fn clean_power(&self) -> f64 {
        let mod_power: f64 = self.harmonics.iter().map(|h| h.depth * h.depth).sum::<f64>() / 2.0;
        0.5 * self.amplitude * self.amplitude * (1.0 + self.depth * self.depth * mod_power)
    }

    /// Noise standard deviation giving `snr_db` against [`Self::clean_power`].
    pub fn noise_floor_for_snr(&self, snr_db: f64) -> f64 {
        (self.clean_power() / 10f64.powf(snr_db / 10.0)).sqrt()
    }

    /// Envelope factor `1 + m·Σ r_h·sin(h·Ω·t + h·φ)` at time `t`.
    pub fn envelope_at(&self, t: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * self.mod_hz;
        let s: f64 = self
            .harmonics
            .iter()
            .map(|h| h.depth * (h.multiple as f64 * (w * t + self.phase)).sin())
            .sum();
        1.0 + self.depth * s
    }
}

/// Deterministic in `(spec, sample_rate, seed)`.
pub fn synthesize(spec: &ModulationSpec, sample_rate: u32, seed: u64, track_id: &str) -> Result<Waveform> {
    spec.validate(sample_rate)?;
    let sr = sample_rate as f64;
    let n = (spec.duration_s * sr).round() as usize;
    if n < 2 {
        return Err(invalid("synthesize", "duration shorter than two samples"));
    }
    let carrier: Vec<f64> = match spec.carrier {
        Carrier::Tone { hz } => {
            let w = 2.0 * std::f64::consts::PI * hz / sr;
            (0..n).map(|i| (w * i as f64).cos()).collect()
        }
        Carrier::Broadband { lo_hz, hi_hz } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(CARRIER_STREAM);
            let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let band = bandpass(&Waveform::new(white, sample_rate, track_id)?, lo_hz, hi_hz)?;
            let rms = band.rms();
            if !(rms > 0.0) {
                return Err(invalid("synthesize", "broadband carrier has no energy"));
            }
            let k = std::f64::consts::FRAC_1_SQRT_2 / rms;
            band.samples.into_iter().map(|v| v * k).collect()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    let samples = carrier
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let clean = spec.amplitude * spec.envelope_at(i as f64 / sr) * c;
            let z: f64 = StandardNormal.sample(&mut rng);
            clean + spec.noise_floor * z
        })
        .collect();
    Waveform::new(samples, sample_rate, track_id)
}
