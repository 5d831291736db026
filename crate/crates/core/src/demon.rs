//! DEMON spectra: sub-band splitting, envelope demodulation and modulation
//! spectra of the squared envelope.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{bandpass, Waveform};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonParams {
    pub passband: (f64, f64),
    pub interval_hz: f64,
    pub lowpass_cutoff_hz: f64,
    pub fir_taps: usize,
    /// Forward-backward passes of the envelope low-pass.
    pub passes: usize,
    pub mod_f_max_hz: f64,
    pub n_mod_bins: usize,
    pub n_subbands_cap: Option<usize>,
}

impl Default for DemonParams {
    fn default() -> Self {
        Self {
            passband: (10.0, 8000.0),
            interval_hz: 250.0,
            lowpass_cutoff_hz: 100.0,
            fir_taps: 1024,
            passes: 2,
            mod_f_max_hz: 100.0,
            n_mod_bins: 1172,
            n_subbands_cap: Some(28),
        }
    }
}

impl DemonParams {
    /// Spacing of the output modulation bins.
    pub fn mod_bin_hz(&self) -> f64 {
        self.mod_f_max_hz / (self.n_mod_bins - 1) as f64
    }

    pub fn n_subbands(&self) -> Result<usize> {
        Ok(subband_edges(self.passband, self.interval_hz, self.n_subbands_cap)?.len())
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyq = sample_rate as f64 / 2.0;
        if self.n_mod_bins < 2 {
            return Err(invalid("demon", "need at least two modulation bins"));
        }
        if !(self.mod_f_max_hz > 0.0 && self.lowpass_cutoff_hz > 0.0 && self.lowpass_cutoff_hz < nyq) {
            return Err(invalid("demon", "mod_f_max and low-pass cutoff must be positive and below Nyquist"));
        }
        if 2.5 * self.mod_f_max_hz > sample_rate as f64 {
            return Err(invalid("demon", "mod_f_max too high for the sample rate"));
        }
        if self.fir_taps < 2 || self.passes == 0 {
            return Err(invalid("demon", "FIR needs at least two taps and one pass"));
        }
        if self.passband.1 > nyq {
            return Err(invalid("demon", format!("passband above Nyquist {nyq} Hz")));
        }
        self.n_subbands().map(|_| ())
    }
}

/// Sub-bands × modulation bins.
#[derive(Clone, Debug, PartialEq)]
pub struct DemonSpectrum2D {
    pub values: Array2<f64>,
    pub subband_edges: Vec<(f64, f64)>,
    pub mod_bin_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemonSpectrum1D {
    pub values: Vec<f64>,
    pub mod_bin_hz: f64,
}

/// Consecutive `interval`-wide bands from the passband's lower edge; the
/// count is `⌊(hi − lo)/interval⌋`, optionally capped.
pub fn subband_edges(passband: (f64, f64), interval: f64, cap: Option<usize>) -> Result<Vec<(f64, f64)>> {
    let (lo, hi) = passband;
    if !(interval > 0.0 && 0.0 <= lo && lo < hi) {
        return Err(invalid("subband_split", format!("invalid passband {passband:?} / interval {interval}")));
    }
    let mut n = ((hi - lo) / interval + 1e-9).floor() as usize;
    if let Some(c) = cap {
        n = n.min(c);
    }
    if n == 0 {
        return Err(invalid("subband_split", format!("passband {passband:?} narrower than {interval} Hz")));
    }
    Ok((0..n)
        .map(|i| (lo + i as f64 * interval, lo + (i + 1) as f64 * interval))
        .collect())
}

pub fn subband_split(w: &Waveform, interval: f64, passband: (f64, f64), cap: Option<usize>) -> Result<Vec<Waveform>> {
    subband_edges(passband, interval, cap)?
        .into_iter()
        .map(|(lo, hi)| bandpass(w, lo, hi))
        .collect()
}

/// Hamming-windowed sinc low-pass with unit DC gain.
pub fn lowpass_fir(taps: usize, cutoff_hz: f64, sample_rate: u32) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate as f64;
    let mid = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * t).sin() / (std::f64::consts::PI * t)
            };
            let win = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (taps - 1) as f64).cos();
            sinc * win
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

fn convolve_full(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// The zero-phase kernel equivalent to `passes` forward-backward runs of
/// `h`: `(h ⋆ h_rev)^{*passes}`, centered.
pub fn zero_phase_kernel(h: &[f64], passes: usize) -> Vec<f64> {
    let rev: Vec<f64> = h.iter().rev().copied().collect();
    let once = convolve_full(h, &rev);
    let mut k = once.clone();
    for _ in 1..passes {
        k = fft_convolve(&k, &once);
    }
    k
}

fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len() + b.len() - 1;
    let size = n.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut fa: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fa.resize(size, Complex64::default());
    let mut fb: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fb.resize(size, Complex64::default());
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..n].iter().map(|c| c.re / size as f64).collect()
}

/// Index into `0..n` under mirror reflection without edge repetition.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// A centered odd-length kernel applied by FFT convolution with
/// mirror-padded edges, for signals of one fixed length.
///
/// Since the kernel is real, two signals share one complex transform: one
/// rides in the real part, the other in the imaginary part.
struct CenteredFilter {
    spectrum: Vec<Complex64>,
    half: usize,
    len: usize,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl CenteredFilter {
    fn new(kernel: &[f64], len: usize) -> Self {
        let half = kernel.len() / 2;
        let size = (len + 2 * half + kernel.len() - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let mut spectrum: Vec<Complex64> = kernel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        spectrum.resize(size, Complex64::default());
        fwd.process(&mut spectrum);
        let scale = 1.0 / size as f64;
        spectrum.iter_mut().for_each(|c| *c *= scale);
        Self {
            spectrum,
            half,
            len,
            fwd,
            inv,
        }
    }

    /// Filters `a` and, if given, `b` (both of the configured length).
    fn apply(&self, a: &[f64], b: Option<&[f64]>) -> (Vec<f64>, Option<Vec<f64>>) {
        let (c, n) = (self.half, self.len);
        let mut buf = vec![Complex64::default(); self.spectrum.len()];
        for (i, slot) in buf.iter_mut().take(n + 2 * c).enumerate() {
            let k = reflect(i as isize - c as isize, n);
            *slot = Complex64::new(a[k], b.map_or(0.0, |b| b[k]));
        }
        self.fwd.process(&mut buf);
        for (x, k) in buf.iter_mut().zip(&self.spectrum) {
            *x *= k;
        }
        self.inv.process(&mut buf);
        let out = &buf[2 * c..2 * c + n];
        (
            out.iter().map(|v| v.re).collect(),
            b.map(|_| out.iter().map(|v| v.im).collect()),
        )
    }
}

/// `|x|` low-passed by a zero-phase Hamming FIR.
pub fn envelope_demodulate(sub: &Waveform, params: &DemonParams) -> Result<Waveform> {
    if sub.len() < params.fir_taps {
        return Err(invalid(
            "envelope",
            format!("{} samples is shorter than the {}-tap filter", sub.len(), params.fir_taps),
        ));
    }
    let h = lowpass_fir(params.fir_taps, params.lowpass_cutoff_hz, sub.sample_rate);
    let kernel = zero_phase_kernel(&h, params.passes);
    let rect: Vec<f64> = sub.samples.iter().map(|v| v.abs()).collect();
    let (env, _) = CenteredFilter::new(&kernel, rect.len()).apply(&rect, None);
    Ok(sub.with_samples(env))
}

/// Decimation factor bringing the envelope to about `2.5 · mod_f_max`.
pub fn decimation(sample_rate: u32, mod_f_max: f64) -> usize {
    ((sample_rate as f64 / (2.5 * mod_f_max)).floor() as usize).max(1)
}

/// Magnitude spectrum of `envelope²` on `n_mod_bins` bins spaced
/// `mod_f_max/(n_mod_bins − 1)` apart, starting at DC.
///
/// The squared envelope is block-averaged down to the modulation rate, its
/// FFT magnitude divided by the block count, and native FFT bins are averaged
/// into the output bins they fall in.
pub fn modulation_spectrum(envelope: &Waveform, params: &DemonParams) -> Result<Vec<f64>> {
    let d = decimation(envelope.sample_rate, params.mod_f_max_hz);
    let blocks = envelope.len() / d;
    if blocks < 2 {
        return Err(invalid("modulation_spectrum", "envelope too short"));
    }
    let mod_sr = envelope.sample_rate as f64 / d as f64;
    let step = params.mod_bin_hz();
    let nfft = blocks.max((mod_sr / step).ceil() as usize);
    let mut buf: Vec<Complex64> = envelope.samples[..blocks * d]
        .chunks(d)
        .map(|c| Complex64::new(c.iter().map(|v| v * v).sum::<f64>() / d as f64, 0.0))
        .collect();
    buf.resize(nfft, Complex64::default());
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let native = mod_sr / nfft as f64;
    let mut sums = vec![0.0; params.n_mod_bins];
    let mut counts = vec![0usize; params.n_mod_bins];
    for (j, c) in buf.iter().enumerate().take(nfft / 2 + 1) {
        let k = (j as f64 * native / step + 0.5).floor() as usize;
        if k < params.n_mod_bins {
            sums[k] += c.norm() / blocks as f64;
            counts[k] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect())
}

/// Stacked modulation spectra of every sub-band.
pub fn demon2d(w: &Waveform, params: &DemonParams) -> Result<DemonSpectrum2D> {
    params.validate(w.sample_rate)?;
    let edges = subband_edges(params.passband, params.interval_hz, params.n_subbands_cap)?;
    let h = lowpass_fir(params.fir_taps, params.lowpass_cutoff_hz, w.sample_rate);
    let kernel = zero_phase_kernel(&h, params.passes);
    if w.len() < params.fir_taps {
        return Err(invalid("demon2d", "signal shorter than the envelope filter"));
    }
    let filter = CenteredFilter::new(&kernel, w.len());
    let rows = edges
        .par_chunks(2)
        .map(|pair| {
            let rect = pair
                .iter()
                .map(|&(lo, hi)| Ok(bandpass(w, lo, hi)?.samples.iter().map(|v| v.abs()).collect()))
                .collect::<Result<Vec<Vec<f64>>>>()?;
            let (e0, e1) = filter.apply(&rect[0], rect.get(1).map(Vec::as_slice));
            std::iter::once(e0)
                .chain(e1)
                .map(|env| modulation_spectrum(&w.with_samples(env), params))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let mut values = Array2::zeros((rows.len(), params.n_mod_bins));
    for (mut out, row) in values.outer_iter_mut().zip(rows) {
        out.assign(&ndarray::Array1::from(row));
    }
    Ok(DemonSpectrum2D {
        values,
        subband_edges: edges,
        mod_bin_hz: params.mod_bin_hz(),
    })
}

/// Sum over the sub-band axis.
pub fn demon1d(d: &DemonSpectrum2D) -> DemonSpectrum1D {
    DemonSpectrum1D {
        values: d.values.sum_axis(Axis(0)).to_vec(),
        mod_bin_hz: d.mod_bin_hz,
    }
}

/// Number of harmonics scored by [`find_fundamental`].
pub const HARMONICS_SCORED: usize = 5;

/// Modulation frequency in `[f_lo, f_hi]` maximizing `Σ_h S'[h·k]/h` over
/// the first [`HARMONICS_SCORED`] harmonics, where `S'` is the spectrum
/// minus its median non-DC bin, clipped at zero. Without the floor removal
/// the noise under extra harmonics pulls the estimate to a subharmonic.
/// DC is never a candidate and ties resolve to the lowest bin.
pub fn find_fundamental(d: &DemonSpectrum1D, f_lo: f64, f_hi: f64) -> Result<f64> {
    let step = d.mod_bin_hz;
    if f_lo < step - 1e-12 {
        return Err(invalid("find_fundamental", format!("f_lo {f_lo} below the first bin at {step} Hz")));
    }
    let k_lo = (f_lo / step - 1e-9).ceil() as usize;
    let k_hi = ((f_hi / step + 1e-9).floor() as usize).min(d.values.len().saturating_sub(1));
    if k_lo == 0 || k_lo > k_hi {
        return Err(invalid("find_fundamental", format!("empty search range {f_lo}..{f_hi} Hz")));
    }
    let mut rest = d.values[1..].to_vec();
    rest.sort_by(f64::total_cmp);
    let floor = rest[rest.len() / 2];
    let s: Vec<f64> = d.values.iter().map(|v| (v - floor).max(0.0)).collect();
    let mut best = (f64::NEG_INFINITY, k_lo);
    for k in k_lo..=k_hi {
        let score: f64 = (1..=HARMONICS_SCORED)
            .take_while(|h| h * k < s.len())
            .map(|h| s[h * k] / h as f64)
            .sum();
        if score > best.0 {
            best = (score, k);
        }
    }
    Ok(best.1 as f64 * step)
}
