//! Butterworth IIR design as second-order sections and zero-phase
//! forward-backward filtering.

use rustfft::num_complex::Complex64;

use crate::error::{invalid, Result};

/// Filter order used by [`bandpass`](super::bandpass).
pub const BUTTER_ORDER: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Band {
    Lowpass(f64),
    Highpass(f64),
    Bandpass(f64, f64),
}

/// Cascade of biquads, each `[b0, b1, b2, a1, a2]` with `a0 = 1`.
#[derive(Clone, Debug)]
pub struct Sos {
    sections: Vec<[f64; 5]>,
}

impl Sos {
    pub fn sections(&self) -> &[[f64; 5]] {
        &self.sections
    }

    /// Complex response at normalized angular frequency `w` (radians/sample).
    pub fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |acc, s| {
            let num = s[0] + z1 * s[1] + z2 * s[2];
            let den = 1.0 + z1 * s[3] + z2 * s[4];
            acc * num / den
        })
    }

    /// Butterworth design by bilinear transform with pre-warped edges.
    /// Gain is unity at DC (low-pass), Nyquist (high-pass) or the band
    /// center (band-pass).
    pub fn butterworth(order: usize, band: Band, sample_rate: f64) -> Result<Self> {
        let nyq = sample_rate / 2.0;
        let edge_ok = |f: f64| f.is_finite() && f > 0.0 && f < nyq;
        let ok = order > 0
            && match band {
                Band::Lowpass(f) | Band::Highpass(f) => edge_ok(f),
                Band::Bandpass(lo, hi) => edge_ok(lo) && edge_ok(hi) && lo < hi,
            };
        if !ok {
            return Err(invalid(
                "butterworth",
                format!("invalid band {band:?} at {sample_rate} Hz, order {order}"),
            ));
        }
        let fs2 = 2.0 * sample_rate;
        let warp = |f: f64| fs2 * (std::f64::consts::PI * f / sample_rate).tan();
        let proto: Vec<Complex64> = (0..order)
            .map(|k| {
                let theta = std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
                Complex64::from_polar(1.0, theta)
            })
            .collect();

        // Analog poles, then digital zeros as positions on the real axis.
        let (poles, zeros, w_ref): (Vec<Complex64>, Vec<f64>, f64) = match band {
            Band::Lowpass(f) => {
                let wc = warp(f);
                (proto.iter().map(|p| p * wc).collect(), vec![-1.0; order], 0.0)
            }
            Band::Highpass(f) => {
                let wc = warp(f);
                (
                    proto.iter().map(|p| wc / p).collect(),
                    vec![1.0; order],
                    std::f64::consts::PI,
                )
            }
            Band::Bandpass(lo, hi) => {
                let (w1, w2) = (warp(lo), warp(hi));
                let (w0, bw) = ((w1 * w2).sqrt(), w2 - w1);
                let mut poles = Vec::with_capacity(2 * order);
                for p in &proto {
                    let a = p * (bw / 2.0);
                    let d = (a * a - w0 * w0).sqrt();
                    poles.push(a + d);
                    poles.push(a - d);
                }
                let zeros = (0..2 * order)
                    .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
                    .collect();
                (poles, zeros, 2.0 * (w0 / fs2).atan())
            }
        };
        let digital: Vec<Complex64> = poles.iter().map(|s| (fs2 + s) / (fs2 - s)).collect();

        let tol = 1e-10;
        let mut pairs: Vec<[f64; 2]> = Vec::new();
        let mut real: Vec<f64> = Vec::new();
        for p in &digital {
            if p.im > tol {
                pairs.push([-2.0 * p.re, p.norm_sqr()]);
            } else if p.im.abs() <= tol {
                real.push(p.re);
            }
        }
        real.sort_by(|a, b| a.total_cmp(b));
        let mut denoms: Vec<([f64; 2], usize)> = pairs.into_iter().map(|a| (a, 2)).collect();
        for chunk in real.chunks(2) {
            match chunk {
                [a, b] => denoms.push(([-(a + b), a * b], 2)),
                [a] => denoms.push(([-a, 0.0], 1)),
                _ => unreachable!(),
            }
        }
        let mut zi = zeros.into_iter();
        let mut sections = Vec::with_capacity(denoms.len());
        for (a, n) in denoms {
            let b = if n == 2 {
                let (z1, z2) = (zi.next().unwrap_or(0.0), zi.next().unwrap_or(0.0));
                [1.0, -(z1 + z2), z1 * z2]
            } else {
                [1.0, -zi.next().unwrap_or(0.0), 0.0]
            };
            sections.push([b[0], b[1], b[2], a[0], a[1]]);
        }
        let mut sos = Sos { sections };
        let g = sos.response(w_ref).norm();
        if !(g.is_finite() && g > 0.0) {
            return Err(invalid("butterworth", "degenerate design"));
        }
        for v in &mut sos.sections[0][..3] {
            *v /= g;
        }
        Ok(sos)
    }

    /// Per-section state giving a steady-state response to a unit step.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let dc = (s[0] + s[1] + s[2]) / (1.0 + s[3] + s[4]);
                let y = dc * scale;
                let z2 = s[2] * scale - s[4] * y;
                let z1 = y - s[0] * scale;
                scale = y;
                [z1, z2]
            })
            .collect()
    }

    /// Causal filtering in transposed direct form II from state `zi · x0`.
    fn run(&self, x: &mut [f64], zi: &[[f64; 2]]) {
        let x0 = x.first().copied().unwrap_or(0.0);
        let mut z: Vec<[f64; 2]> = zi.iter().map(|z| [z[0] * x0, z[1] * x0]).collect();
        // Sample-major order lets consecutive sections overlap in the pipeline.
        for v in x.iter_mut() {
            let mut xin = *v;
            for (s, z) in self.sections.iter().zip(z.iter_mut()) {
                let y = s[0] * xin + z[0];
                z[0] = s[1] * xin - s[3] * y + z[1];
                z[1] = s[2] * xin - s[4] * y;
                xin = y;
            }
            *v = xin;
        }
    }

    /// Zero-phase filtering: forward and backward passes over an
    /// odd-reflection padded copy, with steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64], padlen: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = padlen.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let zi = self.step_state();
        self.run(&mut ext, &zi);
        ext.reverse();
        self.run(&mut ext, &zi);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Padding for [`Sos::filtfilt`]: enough to cover the impulse response of a
/// filter whose narrowest transition is `bandwidth_hz` wide.
pub fn default_padlen(order: usize, sample_rate: f64, bandwidth_hz: f64) -> usize {
    let by_order = 3 * (2 * order + 1);
    let by_band = (6.0 * sample_rate / bandwidth_hz.max(1e-9)).round() as usize;
    by_order.max(by_band)
}
