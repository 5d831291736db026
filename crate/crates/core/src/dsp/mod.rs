//! Waveforms, band-pass filtering, normalization, framing and windowing.

mod filter;
pub mod synth;
pub mod wav;

pub use filter::{default_padlen, Band, Sos, BUTTER_ORDER};

use ndarray::Array2;

use crate::error::{invalid, Result};

/// Mono signal with its sample rate and the recording it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub track_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32, track_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("waveform", "no samples"));
        }
        if sample_rate == 0 {
            return Err(invalid("waveform", "sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid("waveform", "non-finite sample"));
        }
        Ok(Self {
            samples,
            sample_rate,
            track_id: track_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    /// Same recording, different samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
            track_id: self.track_id.clone(),
        }
    }

    /// Samples `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() || len == 0 {
            return Err(invalid(
                "slice",
                format!("{start}+{len} outside {} samples", self.samples.len()),
            ));
        }
        Ok(self.with_samples(self.samples[start..start + len].to_vec()))
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Zero-phase Butterworth band-pass between `lo_hz` and `hi_hz`.
///
/// `lo_hz = 0` degenerates to a low-pass and `hi_hz` at Nyquist to a
/// high-pass; the full band returns the input unchanged.
pub fn bandpass(w: &Waveform, lo_hz: f64, hi_hz: f64) -> Result<Waveform> {
    let nyq = w.nyquist();
    if !(lo_hz.is_finite() && hi_hz.is_finite() && 0.0 <= lo_hz && lo_hz < hi_hz && hi_hz <= nyq) {
        return Err(invalid(
            "bandpass",
            format!("need 0 <= lo < hi <= {nyq}, got {lo_hz}..{hi_hz}"),
        ));
    }
    let band = match (lo_hz == 0.0, hi_hz == nyq) {
        (true, true) => return Ok(w.clone()),
        (true, false) => Band::Lowpass(hi_hz),
        (false, true) => Band::Highpass(lo_hz),
        (false, false) => Band::Bandpass(lo_hz, hi_hz),
    };
    let sr = w.sample_rate as f64;
    let sos = Sos::butterworth(BUTTER_ORDER, band, sr)?;
    let width = match band {
        Band::Lowpass(f) => f,
        Band::Highpass(f) => nyq - f,
        Band::Bandpass(lo, hi) => (hi - lo).min(lo),
    };
    let padlen = default_padlen(BUTTER_ORDER, sr, width);
    Ok(w.with_samples(sos.filtfilt(&w.samples, padlen)))
}

/// Zero mean, unit population variance.
pub fn normalize(w: &Waveform) -> Result<Waveform> {
    if w.samples.len() < 2 {
        return Err(invalid("normalize", "need at least two samples"));
    }
    let n = w.samples.len() as f64;
    let mean = w.samples.iter().sum::<f64>() / n;
    let var = w.samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(invalid("normalize", "signal has zero variance"));
    }
    let inv = 1.0 / var.sqrt();
    Ok(w.with_samples(w.samples.iter().map(|v| (v - mean) * inv).collect()))
}

/// Overlapping frames of one signal, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    pub frames: Array2<f64>,
    pub frame_len_ms: f64,
    pub shift_ms: f64,
    pub sample_rate: u32,
}

impl FrameMatrix {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn frame_len(&self) -> usize {
        self.frames.ncols()
    }

    /// Start time of each frame in seconds.
    pub fn frame_times(&self) -> Vec<f64> {
        let shift = self.shift_ms / 1000.0;
        (0..self.n_frames())
            .map(|i| frame_start(i, shift * self.sample_rate as f64) as f64 / self.sample_rate as f64)
            .collect()
    }
}

/// Frame length in samples for a duration in milliseconds.
pub fn frame_len_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

// Guards `i · shift` against landing a hair below an integer.
const FRAME_EPS: f64 = 1e-9;

fn frame_start(i: usize, shift: f64) -> usize {
    (i as f64 * shift + FRAME_EPS).floor() as usize
}

/// Number of whole frames of `frame_len` samples, `shift` samples apart
/// (possibly fractional), in a signal of `n` samples.
pub fn frame_count(n: usize, frame_len: usize, shift: f64) -> usize {
    if frame_len == 0 || frame_len > n || shift <= 0.0 {
        return 0;
    }
    ((n - frame_len) as f64 / shift + FRAME_EPS).floor() as usize + 1
}

/// Splits a signal into frames; a trailing partial frame is dropped. A
/// fractional shift is honoured by flooring each frame's start sample.
pub fn frame(w: &Waveform, frame_len_ms: f64, shift_ms: f64) -> Result<FrameMatrix> {
    if !(frame_len_ms > 0.0 && shift_ms > 0.0) {
        return Err(invalid("frame", "frame length and shift must be positive"));
    }
    let len = frame_len_samples(frame_len_ms, w.sample_rate);
    let shift = shift_ms * w.sample_rate as f64 / 1000.0;
    if len == 0 {
        return Err(invalid("frame", "frame shorter than one sample"));
    }
    if len > w.samples.len() {
        return Err(invalid(
            "frame",
            format!("signal of {} samples is shorter than one {len}-sample frame", w.samples.len()),
        ));
    }
    let n = frame_count(w.samples.len(), len, shift);
    let mut frames = Array2::zeros((n, len));
    for (i, mut row) in frames.outer_iter_mut().enumerate() {
        let s = frame_start(i, shift);
        row.assign(&ndarray::ArrayView1::from(&w.samples[s..s + len]));
    }
    Ok(FrameMatrix {
        frames,
        frame_len_ms,
        shift_ms,
        sample_rate: w.sample_rate,
    })
}

/// Periodic Hann window: `0.5 − 0.5·cos(2πi/N)`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn hann_window(frames: &FrameMatrix) -> FrameMatrix {
    let win = ndarray::Array1::from(hann(frames.frame_len()));
    let mut out = frames.clone();
    for mut row in out.frames.outer_iter_mut() {
        row *= &win;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(samples: Vec<f64>, sr: u32) -> Waveform {
        Waveform::new(samples, sr, "t").unwrap()
    }

    #[test]
    fn normalize_hand_computed() {
        let out = normalize(&wave(vec![1.0, 2.0, 3.0], 10)).unwrap();
        let k = (1.5f64).sqrt();
        for (a, b) in out.samples.iter().zip([-k, 0.0, k]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(normalize(&wave(vec![0.0; 8], 10)).is_err());
    }

    #[test]
    fn normalize_is_idempotent() {
        let once = normalize(&wave(vec![0.3, -1.0, 2.5, 0.0, 7.0], 10)).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_counts_match_reference_dimensions() {
        for sr in [32000, 17067] {
            let n = 30 * sr as usize;
            let len = frame_len_samples(50.0, sr);
            assert_eq!(frame_count(n, len, 25.0 * sr as f64 / 1000.0), 1199, "sr {sr}");
        }
        let w = wave(vec![1.0; 400], 8000);
        assert_eq!(frame(&w, 50.0, 25.0).unwrap().n_frames(), 1);
        assert!(frame(&wave(vec![1.0; 399], 8000), 50.0, 25.0).is_err());
    }

    #[test]
    fn hann_endpoints_and_midpoint() {
        let h = hann(16);
        assert_eq!(h[0], 0.0);
        assert!((h[8] - 1.0).abs() < 1e-15);
        let frames = frame(&wave(vec![1.0; 16], 320), 50.0, 25.0).unwrap();
        let windowed = hann_window(&frames);
        assert_eq!(windowed.frames.row(0).to_vec(), h);
    }

    #[test]
    fn lowpass_degenerate_band_keeps_dc() {
        let w = wave(vec![2.0; 2000], 4000);
        let out = bandpass(&w, 0.0, 500.0).unwrap();
        assert!(out.samples.iter().all(|v| (v - 2.0).abs() < 1e-9));
        assert_eq!(bandpass(&w, 0.0, 2000.0).unwrap(), w);
        assert!(bandpass(&w, 300.0, 2500.0).is_err());
    }
}
