//! Fixed-length analysis windows and cross-temporal pair sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One window in samples, `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

/// Windows of one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentIndex {
    pub sample_rate: u32,
    pub windows: Vec<Window>,
}

impl SegmentIndex {
    /// All whole `segment_s`-long windows, `hop_s` apart, of a recording of
    /// `n_samples`. A recording shorter than one window gets none.
    pub fn new(n_samples: usize, sample_rate: u32, segment_s: f64, hop_s: f64) -> Result<Self> {
        let sr = sample_rate as f64;
        let len = (segment_s * sr).round() as usize;
        let hop = (hop_s * sr).round() as usize;
        if len == 0 || hop == 0 {
            return Err(invalid("segments", "segment and hop must span at least one sample"));
        }
        let count = if n_samples < len { 0 } else { (n_samples - len) / hop + 1 };
        Ok(Self {
            sample_rate,
            windows: (0..count).map(|k| Window { start: k * hop, len }).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// (start_s, end_s) of each window.
    pub fn times(&self) -> Vec<(f64, f64)> {
        let sr = self.sample_rate as f64;
        self.windows
            .iter()
            .map(|w| (w.start as f64 / sr, (w.start + w.len) as f64 / sr))
            .collect()
    }
}

/// A cross-temporal pair of window indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    /// Only one window exists, so it was paired with itself.
    pub degenerate: bool,
}

/// Two distinct windows of the same recording, uniform over unordered pairs
/// and in random order. A single-window recording pairs the window with
/// itself and logs a warning.
pub fn sample_cross_temporal_pair<R: Rng + ?Sized>(n_windows: usize, rng: &mut R) -> Result<Pair> {
    match n_windows {
        0 => Err(invalid("cross_temporal_pair", "recording is shorter than one segment")),
        1 => {
            log::warn!("single-window recording: pairing the window with itself");
            Ok(Pair {
                a: 0,
                b: 0,
                degenerate: true,
            })
        }
        n => {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            Ok(Pair {
                a,
                b,
                degenerate: false,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ninety_seconds_gives_five_windows() {
        let idx = SegmentIndex::new(90 * 4000, 4000, 30.0, 15.0).unwrap();
        assert_eq!(idx.len(), 5);
        assert_eq!(idx.times()[4], (60.0, 90.0));
        assert!(SegmentIndex::new(29 * 4000, 4000, 30.0, 15.0).unwrap().is_empty());
    }

    #[test]
    fn two_windows_are_both_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 2];
        for _ in 0..50 {
            let p = sample_cross_temporal_pair(2, &mut rng).unwrap();
            assert_ne!(p.a, p.b);
            seen[p.a] = true;
        }
        assert_eq!(seen, [true, true]);
        assert!(sample_cross_temporal_pair(1, &mut rng).unwrap().degenerate);
        assert!(sample_cross_temporal_pair(0, &mut rng).is_err());
    }
}
