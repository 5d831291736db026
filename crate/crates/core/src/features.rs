//! STFT amplitude, log-Mel and log-CQT spectrograms.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::{self, FrameMatrix, Waveform};
use crate::error::{invalid, Error, Result};

/// Floor added before every log compression.
pub const LOG_EPS: f64 = 1e-10;

// Tolerance for bin-edge comparisons in Hz.
const HZ_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Stft,
    Mel,
    Cqt,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Stft => "stft",
            FeatureKind::Mel => "mel",
            FeatureKind::Cqt => "cqt",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stft" => Ok(FeatureKind::Stft),
            "mel" => Ok(FeatureKind::Mel),
            "cqt" => Ok(FeatureKind::Cqt),
            _ => Err(Error::Config(format!("unknown feature kind `{s}` (stft, mel, cqt)"))),
        }
    }
}

/// Frames × bins matrix with axis metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f64>,
    pub kind: FeatureKind,
    pub bin_freqs: Vec<f64>,
    pub frame_times: Vec<f64>,
}

impl Spectrogram {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Computes one-sided amplitude spectra of equally long frames.
#[derive(Clone)]
pub struct AmplitudeSpectrum {
    fft: Arc<dyn Fft<f64>>,
    len: usize,
}

impl fmt::Debug for AmplitudeSpectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AmplitudeSpectrum").field("len", &self.len).finish()
    }
}

impl AmplitudeSpectrum {
    pub fn new(len: usize) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(len),
            len,
        }
    }

    /// `|X[k]|` for `k = 0..=len/2`.
    pub fn compute(&self, frame: &[f64], buf: &mut Vec<Complex64>) -> Vec<f64> {
        buf.clear();
        buf.extend(frame.iter().map(|&v| Complex64::new(v, 0.0)));
        self.fft.process(buf);
        buf[..self.len / 2 + 1].iter().map(|c| c.norm()).collect()
    }
}

/// Frequencies of the FFT bins of a `frame_len`-sample frame.
pub fn rfft_freqs(frame_len: usize, sample_rate: u32) -> Vec<f64> {
    (0..=frame_len / 2)
        .map(|k| k as f64 * sample_rate as f64 / frame_len as f64)
        .collect()
}

/// Indices of the bins whose centers lie in `[lo, hi]`.
pub fn passband_bins(freqs: &[f64], passband: (f64, f64)) -> Vec<usize> {
    freqs
        .iter()
        .enumerate()
        .filter(|(_, &f)| f >= passband.0 - HZ_TOL && f <= passband.1 + HZ_TOL)
        .map(|(i, _)| i)
        .collect()
}

/// Per-frame FFT magnitudes restricted to the passband. Frames should
/// already be windowed.
pub fn stft_amplitude(frames: &FrameMatrix, passband: (f64, f64)) -> Result<Spectrogram> {
    let freqs = rfft_freqs(frames.frame_len(), frames.sample_rate);
    let keep = passband_bins(&freqs, passband);
    if keep.is_empty() {
        return Err(invalid("stft", format!("no bins inside {passband:?} Hz")));
    }
    let amp = AmplitudeSpectrum::new(frames.frame_len());
    let mut buf = Vec::with_capacity(frames.frame_len());
    let mut values = Array2::zeros((frames.n_frames(), keep.len()));
    for (row, mut out) in frames.frames.outer_iter().zip(values.outer_iter_mut()) {
        let spec = amp.compute(row.as_slice().expect("standard layout"), &mut buf);
        for (o, &k) in out.iter_mut().zip(&keep) {
            *o = spec[k];
        }
    }
    Ok(Spectrogram {
        values,
        kind: FeatureKind::Stft,
        bin_freqs: keep.iter().map(|&k| freqs[k]).collect(),
        frame_times: frames.frame_times(),
    })
}

/// HTK Mel scale, `2595·log10(1 + f/700)`.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the Mel axis between the passband
/// edges, over the STFT bins kept for that passband.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterBank {
    /// [n_mels × n_bins], each row peaking at 1.
    pub weights: Array2<f64>,
    pub center_hz: Vec<f64>,
}

impl MelFilterBank {
    /// Filters narrower than the bin spacing are widened to one bin on each
    /// side of their center so every filter covers at least one bin.
    pub fn new(n_mels: usize, sample_rate: u32, frame_len: usize, passband: (f64, f64)) -> Result<Self> {
        if n_mels < 2 {
            return Err(invalid("mel_filterbank", "need at least two filters"));
        }
        let all = rfft_freqs(frame_len, sample_rate);
        let bins: Vec<f64> = passband_bins(&all, passband).into_iter().map(|k| all[k]).collect();
        if bins.len() < 3 {
            return Err(invalid(
                "mel_filterbank",
                format!("passband {passband:?} holds {} bins, need at least 3", bins.len()),
            ));
        }
        let df = sample_rate as f64 / frame_len as f64;
        let (m_lo, m_hi) = (hz_to_mel(passband.0), hz_to_mel(passband.1));
        let points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = Array2::zeros((n_mels, bins.len()));
        for (m, mut row) in weights.outer_iter_mut().enumerate() {
            let c = points[m + 1];
            let left = (c - points[m]).max(df);
            let right = (points[m + 2] - c).max(df);
            for (w, &f) in row.iter_mut().zip(&bins) {
                *w = if f <= c {
                    (1.0 - (c - f) / left).max(0.0)
                } else {
                    (1.0 - (f - c) / right).max(0.0)
                };
            }
            let peak = row.fold(0.0f64, |a, &b| a.max(b));
            row /= peak;
        }
        Ok(Self {
            weights,
            center_hz: points[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }
}

/// `log(fb · |X| + ε)` per frame.
pub fn mel_spectrogram(stft: &Spectrogram, fb: &MelFilterBank) -> Result<Spectrogram> {
    if stft.kind != FeatureKind::Stft {
        return Err(invalid("mel_spectrogram", "input must be an STFT amplitude spectrogram"));
    }
    if stft.values.ncols() != fb.weights.ncols() {
        return Err(invalid(
            "mel_spectrogram",
            format!("{} STFT bins vs {} filterbank bins", stft.values.ncols(), fb.weights.ncols()),
        ));
    }
    let values = stft.values.dot(&fb.weights.t()).mapv(|v| (v + LOG_EPS).ln());
    Ok(Spectrogram {
        values,
        kind: FeatureKind::Mel,
        bin_freqs: fb.center_hz.clone(),
        frame_times: stft.frame_times.clone(),
    })
}

/// Constant-Q filterbank applied to per-frame amplitude spectra.
#[derive(Clone, Debug, PartialEq)]
pub struct CqtKernel {
    pub b: u32,
    pub f_min: f64,
    pub f_max: f64,
    pub q: f64,
    pub center_freqs: Vec<f64>,
    /// Nominal bandwidth `f_k / Q` of each filter.
    pub bandwidths: Vec<f64>,
    /// [K × (frame_len/2 + 1)], each row summing to 1.
    pub kernel: Array2<f64>,
    pub frame_len: usize,
    pub sample_rate: u32,
}

/// Number of CQT bins: `⌈b·log2(f_max/f_min)⌉ − 1`, so every center lies
/// strictly below `f_max`.
pub fn cqt_bin_count(b: u32, f_min: f64, f_max: f64) -> usize {
    let octaves = (f_max / f_min).log2();
    ((b as f64 * octaves - 1e-9).ceil() as usize).saturating_sub(1).max(1)
}

impl CqtKernel {
    /// Filters are triangles over the FFT bins centered on `f_k = 2^{k/b}·f_min`
    /// with half-width `max(f_k/Q, Δf)`, `Q = 1/(2^{1/b} − 1)`.
    pub fn new(b: u32, f_min: f64, f_max: f64, sample_rate: u32, frame_len: usize) -> Result<Self> {
        let nyq = sample_rate as f64 / 2.0;
        if b == 0 || !(f_min > 0.0 && f_min < f_max) {
            return Err(invalid("cqt", format!("need b > 0 and 0 < f_min < f_max, got b={b}, {f_min}..{f_max}")));
        }
        if f_max > nyq + HZ_TOL {
            return Err(invalid("cqt", format!("f_max {f_max} Hz above Nyquist {nyq} Hz")));
        }
        if frame_len < 2 {
            return Err(invalid("cqt", "frame too short"));
        }
        let k = cqt_bin_count(b, f_min, f_max);
        let q = 1.0 / (2f64.powf(1.0 / b as f64) - 1.0);
        let center_freqs: Vec<f64> = (0..k).map(|i| f_min * 2f64.powf(i as f64 / b as f64)).collect();
        let bandwidths: Vec<f64> = center_freqs.iter().map(|f| f / q).collect();
        let freqs = rfft_freqs(frame_len, sample_rate);
        let df = sample_rate as f64 / frame_len as f64;
        let mut kernel = Array2::zeros((k, freqs.len()));
        for (i, mut row) in kernel.outer_iter_mut().enumerate() {
            let hw = bandwidths[i].max(df);
            for (w, &f) in row.iter_mut().zip(&freqs) {
                *w = (1.0 - (f - center_freqs[i]).abs() / hw).max(0.0);
            }
            let s = row.sum();
            row /= s;
        }
        Ok(Self {
            b,
            f_min,
            f_max,
            q,
            center_freqs,
            bandwidths,
            kernel,
            frame_len,
            sample_rate,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.center_freqs.len()
    }
}

/// `log(kernel · |X| + ε)` per windowed frame.
pub fn cqt_spectrogram(frames: &FrameMatrix, kernel: &CqtKernel) -> Result<Spectrogram> {
    if frames.frame_len() != kernel.frame_len || frames.sample_rate != kernel.sample_rate {
        return Err(invalid(
            "cqt",
            format!(
                "frames of {} samples at {} Hz vs kernel for {} at {} Hz",
                frames.frame_len(),
                frames.sample_rate,
                kernel.frame_len,
                kernel.sample_rate
            ),
        ));
    }
    let amp = AmplitudeSpectrum::new(frames.frame_len());
    let mut buf = Vec::with_capacity(frames.frame_len());
    let mut spectra = Array2::zeros((frames.n_frames(), frames.frame_len() / 2 + 1));
    for (row, mut out) in frames.frames.outer_iter().zip(spectra.outer_iter_mut()) {
        let s = amp.compute(row.as_slice().expect("standard layout"), &mut buf);
        out.assign(&ndarray::Array1::from(s));
    }
    let values = spectra.dot(&kernel.kernel.t()).mapv(|v| (v + LOG_EPS).ln());
    Ok(Spectrogram {
        values,
        kind: FeatureKind::Cqt,
        bin_freqs: kernel.center_freqs.clone(),
        frame_times: frames.frame_times(),
    })
}

/// Settings shared by the spectrogram extractors.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramParams {
    pub kind: FeatureKind,
    pub passband: (f64, f64),
    pub frame_len_ms: f64,
    pub shift_ms: f64,
    pub n_mels: usize,
    pub cqt_b: u32,
    pub cqt_hop_ms: f64,
    /// Lowest CQT center; the passband's lower edge when `None`.
    pub cqt_f_min: Option<f64>,
}

/// Prepared extractor for one sample rate: filterbanks are built once.
#[derive(Clone, Debug)]
pub struct SpectrogramExtractor {
    pub params: SpectrogramParams,
    pub sample_rate: u32,
    mel: Option<MelFilterBank>,
    cqt: Option<CqtKernel>,
}

impl SpectrogramExtractor {
    pub fn new(params: SpectrogramParams, sample_rate: u32) -> Result<Self> {
        let frame_len = dsp::frame_len_samples(params.frame_len_ms, sample_rate);
        let mel = match params.kind {
            FeatureKind::Mel => Some(MelFilterBank::new(params.n_mels, sample_rate, frame_len, params.passband)?),
            _ => None,
        };
        let cqt = match params.kind {
            FeatureKind::Cqt => Some(CqtKernel::new(
                params.cqt_b,
                params.cqt_f_min.unwrap_or(params.passband.0),
                params.passband.1,
                sample_rate,
                frame_len,
            )?),
            _ => None,
        };
        Ok(Self {
            params,
            sample_rate,
            mel,
            cqt,
        })
    }

    /// Spectrogram of an already band-passed, normalized signal.
    pub fn extract(&self, w: &Waveform) -> Result<Spectrogram> {
        if w.sample_rate != self.sample_rate {
            return Err(invalid(
                "extract",
                format!("signal at {} Hz, extractor built for {} Hz", w.sample_rate, self.sample_rate),
            ));
        }
        let p = &self.params;
        match p.kind {
            FeatureKind::Stft | FeatureKind::Mel => {
                let frames = dsp::hann_window(&dsp::frame(w, p.frame_len_ms, p.shift_ms)?);
                let stft = stft_amplitude(&frames, p.passband)?;
                match &self.mel {
                    Some(fb) => mel_spectrogram(&stft, fb),
                    None => Ok(stft),
                }
            }
            FeatureKind::Cqt => {
                let frames = dsp::hann_window(&dsp::frame(w, p.frame_len_ms, p.cqt_hop_ms)?);
                cqt_spectrogram(&frames, self.cqt.as_ref().expect("built for cqt"))
            }
        }
    }

    /// (frames, bins) produced for a signal of `n_samples`.
    pub fn output_shape(&self, n_samples: usize) -> (usize, usize) {
        let p = &self.params;
        let len = dsp::frame_len_samples(p.frame_len_ms, self.sample_rate);
        let sr = self.sample_rate as f64;
        match p.kind {
            FeatureKind::Stft => (
                dsp::frame_count(n_samples, len, p.shift_ms * sr / 1000.0),
                passband_bins(&rfft_freqs(len, self.sample_rate), p.passband).len(),
            ),
            FeatureKind::Mel => (dsp::frame_count(n_samples, len, p.shift_ms * sr / 1000.0), p.n_mels),
            FeatureKind::Cqt => (
                dsp::frame_count(n_samples, len, p.cqt_hop_ms * sr / 1000.0),
                self.cqt.as_ref().map_or(0, CqtKernel::n_bins),
            ),
        }
    }
}

/// Mean over frames of each bin; handy for summaries.
pub fn mean_spectrum(s: &Spectrogram) -> Vec<f64> {
    s.values.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_reference_points() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        for f in [10.0, 440.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-6 * f);
        }
    }

    #[test]
    fn cqt_reference_values() {
        let k = CqtKernel::new(30, 10.0, 8000.0, 32000, 1600).unwrap();
        assert_eq!(k.n_bins(), 289);
        assert_eq!(k.center_freqs[0], 10.0);
        assert!((k.center_freqs[30] - 20.0).abs() < 1e-9);
        assert!((k.q - 42.78).abs() < 0.01);
        assert_eq!(cqt_bin_count(30, 10.0, 2000.0), 229);
        assert_eq!(cqt_bin_count(30, 10.0, 26367.0), 340);
        assert!(CqtKernel::new(30, 10.0, 17000.0, 32000, 1600).is_err());
    }

    #[test]
    fn stft_bins_for_reference_passband() {
        let freqs = rfft_freqs(1600, 32000);
        assert_eq!(passband_bins(&freqs, (10.0, 8000.0)).len(), 400);
    }

    #[test]
    fn mel_filters_peak_at_one_and_tile_the_span() {
        let fb = MelFilterBank::new(300, 32000, 1600, (10.0, 8000.0)).unwrap();
        assert_eq!(fb.weights.dim(), (300, 400));
        for row in fb.weights.outer_iter() {
            assert!((row.fold(0.0f64, |a, &b| a.max(b)) - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
            // Single contiguous support.
            let nz: Vec<usize> = row.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, _)| i).collect();
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
        }
        // Every bin strictly inside the span is covered.
        let total = fb.weights.sum_axis(Axis(0));
        assert!(total.iter().take(399).all(|&t| t > 0.0));
        assert!(MelFilterBank::new(1, 32000, 1600, (10.0, 8000.0)).is_err());
        assert!(MelFilterBank::new(40, 32000, 1600, (10.0, 45.0)).is_err());
    }
}
