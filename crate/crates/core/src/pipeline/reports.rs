//! Evaluation summaries and their CSV forms.

use std::path::Path;

use serde::Serialize;

use super::dataset::Dataset;
use super::manifest::Split;
use super::train::{raw_demon1d, reconstructed_demon1d, Predictions, VaeInputs};
use crate::error::{invalid, Error, Result};
use crate::model::Vae;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CosineRow {
    pub track_id: String,
    pub label: String,
    pub split: Split,
    pub pairs: usize,
    /// Mean cosine similarity between windows of the raw 1-D DEMON spectra.
    pub raw: f64,
    /// The same for the VAE reconstructions.
    pub reconstructed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CosineReport {
    pub rows: Vec<CosineRow>,
}

impl CosineReport {
    /// Means over recordings of (raw, reconstructed).
    pub fn means(&self) -> (f64, f64) {
        let n = self.rows.len().max(1) as f64;
        (
            self.rows.iter().map(|r| r.raw).sum::<f64>() / n,
            self.rows.iter().map(|r| r.reconstructed).sum::<f64>() / n,
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

/// Window-to-window consistency of the 1-D DEMON spectra of each recording
/// with at least three windows in `splits`, over all window pairs.
pub fn cosine_similarity_report(ds: &Dataset, vae: &mut Vae, splits: &[Split]) -> Result<CosineReport> {
    let inputs = VaeInputs::new(ds)?;
    let mut rows = Vec::new();
    for (r, rec) in ds.records.iter().enumerate() {
        if !splits.contains(&rec.split) || ds.n_windows[r] < 3 {
            continue;
        }
        let segs = ds.record_segments(r);
        let raw: Vec<Vec<f64>> = segs.iter().map(|&i| raw_demon1d(ds, i)).collect::<Result<_>>()?;
        let rec_spec = reconstructed_demon1d(vae, &inputs, &segs)?;
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0);
        for a in 0..segs.len() {
            for b in a + 1..segs.len() {
                sr += cosine(&raw[a], &raw[b]);
                sc += cosine(&rec_spec[a], &rec_spec[b]);
                n += 1;
            }
        }
        rows.push(CosineRow {
            track_id: rec.track_id.clone(),
            label: rec.label.clone(),
            split: rec.split,
            pairs: n,
            raw: sr / n as f64,
            reconstructed: sc / n as f64,
        });
    }
    if rows.is_empty() {
        return Err(invalid("cosine_similarity_report", "no recording has three or more windows"));
    }
    Ok(CosineReport { rows })
}

/// Fraction of each class's segments sent to each expert.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingReport {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl RoutingReport {
    pub fn new(classes: &[String], n_experts: usize, p: &Predictions) -> Self {
        let mut counts = vec![vec![0; n_experts]; classes.len()];
        for (&l, &e) in p.labels.iter().zip(&p.experts) {
            counts[l][e] += 1;
        }
        Self {
            classes: classes.to_vec(),
            counts,
        }
    }

    pub fn fractions(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n = row.iter().sum::<usize>().max(1) as f64;
                row.iter().map(|&c| c as f64 / n).collect()
            })
            .collect()
    }

    /// Segments per expert over all classes.
    pub fn expert_totals(&self) -> Vec<usize> {
        let n = self.counts.first().map_or(0, |r| r.len());
        (0..n).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.counts.first().map_or(0, |r| r.len());
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
        let mut head = vec!["class".to_string()];
        head.extend((0..n).map(|j| format!("expert{j}")));
        w.write_record(&head)?;
        for (c, row) in self.classes.iter().zip(self.fractions()) {
            let mut rec = vec![c.clone()];
            rec.extend(row.iter().map(|f| format!("{f:.4}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest over smallest expert load; infinite when an expert got nothing.
pub fn load_ratio(counts: &[usize]) -> f64 {
    let hi = counts.iter().copied().max().unwrap_or(0);
    match counts.iter().copied().min().unwrap_or(0) {
        0 => f64::INFINITY,
        lo => hi as f64 / lo as f64,
    }
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(classes: &[String], p: &Predictions) -> Self {
        let k = classes.len();
        let mut counts = vec![vec![0; k]; k];
        for (&l, &q) in p.labels.iter().zip(&p.predicted) {
            counts[l][q] += 1;
        }
        Self {
            classes: classes.to_vec(),
            counts,
        }
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        let diag: usize = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total.max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
        let mut head = vec!["true\\pred".to_string()];
        head.extend(self.classes.iter().cloned());
        w.write_record(&head)?;
        for (c, row) in self.classes.iter().zip(&self.counts) {
            let mut rec = vec![c.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Test accuracy over several seeds, summarized as mean ± half-range.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSweep {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub spread: f64,
}

impl SeedSweep {
    pub fn new(seeds: Vec<u64>, accuracies: Vec<f64>) -> Result<Self> {
        if seeds.is_empty() || seeds.len() != accuracies.len() {
            return Err(invalid("seed_sweep", "need one accuracy per seed"));
        }
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        let hi = accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(Self {
            seeds,
            accuracies,
            mean,
            spread: (hi - lo) / 2.0,
        })
    }

    /// Percentages, e.g. `81.53±0.42`.
    pub fn summary(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.spread)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
        w.write_record(["seed", "accuracy"])?;
        for (s, a) in self.seeds.iter().zip(&self.accuracies) {
            w.write_record([s.to_string(), format!("{a:.6}")])?;
        }
        w.write_record(["summary".to_string(), self.summary()])?;
        w.flush()?;
        Ok(())
    }
}

/// Runs `f` per seed and summarizes the accuracies it returns.
pub fn seed_sweep(seeds: &[u64], mut f: impl FnMut(u64) -> Result<f64>) -> Result<SeedSweep> {
    let acc = seeds.iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
    SeedSweep::new(seeds.to_vec(), acc)
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_uses_half_range() {
        let s = SeedSweep::new(vec![1, 2, 3], vec![0.80, 0.84, 0.82]).unwrap();
        assert!((s.mean - 0.82).abs() < 1e-12);
        assert!((s.spread - 0.02).abs() < 1e-12);
        assert_eq!(s.summary(), "82.00±2.00");
    }

    #[test]
    fn load_ratio_of_an_idle_expert_is_infinite() {
        assert_eq!(load_ratio(&[4, 2, 8]), 4.0);
        assert!(load_ratio(&[4, 0, 8]).is_infinite());
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
