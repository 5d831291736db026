//! Stage 1 trains the cross-temporal VAE on pairs of windows from the same
//! recording; Stage 2 freezes it and trains the routed classifier.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use demonet_tensor::nn::Session;
use demonet_tensor::{AdamW, AdamWConfig, Tensor, WarmupCosine};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::manifest::Split;
use super::segments::sample_cross_temporal_pair;
use crate::config::Config;
use crate::error::{invalid, Error, Result};
use crate::model::checkpoint::{save_demonet, save_vae, SaveInfo};
use crate::model::vae::latent_shape;
use crate::model::{reparameterize, total_loss, vae_loss, Demonet, RoutingOutput, Vae};

const PAIR_STREAM: u64 = 11;
const VAL_PAIR_STREAM: u64 = 12;
const NOISE_STREAM: u64 = 13;
const SHUFFLE_STREAM: u64 = 14;

/// Batch size used for evaluation passes.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vae,
    Demonet,
}

/// One line of a training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub stage: Stage,
    pub seed: u64,
    pub epoch: usize,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    /// Mean training loss over samples.
    pub loss: f64,
    pub recon_loss: Option<f64>,
    pub kl_loss: Option<f64>,
    pub task_loss: Option<f64>,
    pub balance_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub expert_counts: Option<Vec<usize>>,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    /// One JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::file(path, e)))
            .collect::<Result<_>>()?;
        Ok(Self { epochs })
    }

    pub fn last(&self) -> Option<&EpochReport> {
        self.epochs.last()
    }
}

/// Maps `a` to [−1, 1] by min-max scaling; returns the values and (min, max).
pub fn to_unit_range(a: &Array2<f64>) -> (Vec<f64>, (f64, f64)) {
    let lo = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let v = if span > 0.0 {
        a.iter().map(|x| 2.0 * (x - lo) / span - 1.0).collect()
    } else {
        vec![0.0; a.len()]
    };
    (v, (lo, hi))
}

/// Inverse of [`to_unit_range`].
pub fn from_unit_range(v: &[f64], (lo, hi): (f64, f64)) -> Vec<f64> {
    v.iter().map(|x| (x + 1.0) / 2.0 * (hi - lo) + lo).collect()
}

fn stack(rows: &[&[f64]], tail: &[usize]) -> Result<Tensor> {
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(tail);
    let mut data = Vec::with_capacity(rows.len() * tail.iter().product::<usize>());
    for r in rows {
        data.extend_from_slice(r);
    }
    Ok(Tensor::new(shape, data)?)
}

fn diverged(epoch: usize, batch: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Tensor(source) => Error::Diverged { epoch, batch, source },
        other => other,
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn demon_shape(ds: &Dataset) -> Result<(usize, usize)> {
    if ds.segments.is_empty() {
        return Err(invalid("train", "dataset has no segments"));
    }
    Ok(ds.demon(0)?.dim())
}

fn records_with_windows(ds: &Dataset, split: Split) -> Vec<usize> {
    (0..ds.records.len())
        .filter(|&r| ds.records[r].split == split && ds.n_windows[r] > 0)
        .collect()
}

/// Normalized DEMON spectra of every segment, ready for the VAE.
pub struct VaeInputs {
    pub shape: (usize, usize),
    pub values: Vec<Vec<f64>>,
    pub ranges: Vec<(f64, f64)>,
}

impl VaeInputs {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let shape = demon_shape(ds)?;
        let mut values = Vec::with_capacity(ds.segments.len());
        let mut ranges = Vec::with_capacity(ds.segments.len());
        for i in 0..ds.segments.len() {
            let d = ds.demon(i)?;
            if d.dim() != shape {
                return Err(invalid("train", format!("DEMON shapes differ: {:?} vs {shape:?}", d.dim())));
            }
            let (v, r) = to_unit_range(d);
            values.push(v);
            ranges.push(r);
        }
        Ok(Self { shape, values, ranges })
    }

    fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.values[i].as_slice()).collect();
        stack(&rows, &[1, self.shape.0, self.shape.1])
    }
}

/// Cross-temporal pairs as segment indices; `per_record` draws per record.
fn draw_pairs(ds: &Dataset, records: &[usize], per_record: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for &r in records {
        let segs = ds.record_segments(r);
        for _ in 0..per_record {
            let p = sample_cross_temporal_pair(segs.len(), rng)?;
            out.push((segs[p.a], segs[p.b]));
        }
    }
    Ok(out)
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64, weight: usize) {
        self.sum += v * weight as f64;
        self.n += weight;
    }

    fn get(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum / self.n as f64
        }
    }
}

pub struct Stage1Output {
    pub vae: Vae,
    pub report: TrainReport,
    pub best_epoch: usize,
}

fn optimizer(cfg: &Config) -> AdamW {
    AdamW::new(AdamWConfig {
        weight_decay: cfg.train.weight_decay,
        ..AdamWConfig::default()
    })
}

/// Minimizes reconstruction of window B from window A plus the KL term.
/// The lowest validation loss (training loss without a validation split)
/// selects the returned model; if `ckpt` is given it is written there at
/// every improvement.
pub fn train_stage1(ds: &Dataset, cfg: &Config, seed: u64, ckpt: Option<&Path>) -> Result<Stage1Output> {
    let inputs = VaeInputs::new(ds)?;
    let (s_dim, m_dim) = inputs.shape;
    if latent_shape(s_dim, m_dim).is_none() {
        return Err(Error::Config(format!(
            "a {s_dim}×{m_dim} DEMON spectrum does not fit the VAE; n_mod_bins must be a multiple of 4 and both sides large enough"
        )));
    }
    let train = records_with_windows(ds, Split::Train);
    if train.is_empty() {
        return Err(invalid("train_stage1", "no training recordings with a full window"));
    }
    let val = records_with_windows(ds, Split::Val);
    let val_pairs = draw_pairs(ds, &val, cfg.train.pairs_per_recording, &mut rng(seed, VAL_PAIR_STREAM))?;
    let t = &cfg.train;
    let sched = WarmupCosine::new(t.lr, t.warmup as f64, t.vae_epochs as f64)?;
    let mut vae = Vae::new(cfg.vae_config(), seed)?;
    let mut opt = optimizer(cfg);
    let mut pair_rng = rng(seed, PAIR_STREAM);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, usize, demonet_tensor::ParamStore)> = None;
    for epoch in 0..t.vae_epochs {
        let mut pairs = draw_pairs(ds, &train, t.pairs_per_recording, &mut pair_rng)?;
        pairs.shuffle(&mut pair_rng);
        let n_batches = pairs.len().div_ceil(t.batch);
        let (mut total, mut recon, mut kl) = (Mean::default(), Mean::default(), Mean::default());
        for (bi, chunk) in pairs.chunks(t.batch).enumerate() {
            let lr = sched.lr_at(epoch as f64 + bi as f64 / n_batches as f64)?;
            let a: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let b: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let mut step = || -> Result<(f64, f64, f64)> {
                let (x, y) = (inputs.batch(&a)?, inputs.batch(&b)?);
                let mut s = Session::train(&mut vae.store);
                let xv = s.input(x)?;
                let yv = s.input(y)?;
                let lat = vae.net.encode(&mut s, xv)?;
                let noise_seed = seed ^ ((epoch as u64) << 32 | bi as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let mut noise = rng(noise_seed, NOISE_STREAM);
                let z = reparameterize(&mut s.tape, lat, rand::Rng::random(&mut noise))?;
                let out = vae.net.decode(&mut s, z)?;
                let (loss, parts) = vae_loss(&mut s.tape, yv, out, lat)?;
                let grads = s.tape.backward(loss)?;
                let lv = s.tape.value(loss).item()?;
                drop(s);
                opt.step(&mut vae.store, &grads, lr)?;
                Ok((lv, parts.recon, parts.kl))
            };
            let (l, r, k) = step().map_err(diverged(epoch, bi))?;
            total.add(l, chunk.len());
            recon.add(r, chunk.len());
            kl.add(k, chunk.len());
        }
        let val_loss = if val_pairs.is_empty() {
            None
        } else {
            Some(vae_eval_loss(&mut vae, &inputs, &val_pairs)?)
        };
        let score = val_loss.unwrap_or(total.get());
        let lr0 = sched.lr_at(epoch as f64)?;
        report.epochs.push(EpochReport {
            stage: Stage::Vae,
            seed,
            epoch,
            lr: lr0,
            loss: total.get(),
            recon_loss: Some(recon.get()),
            kl_loss: Some(kl.get()),
            task_loss: None,
            balance_loss: None,
            val_loss,
            val_accuracy: None,
            expert_counts: None,
            samples: total.n,
        });
        log::info!("vae seed {seed} epoch {epoch}: loss {:.5} val {:?}", total.get(), val_loss);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            if let Some(dir) = ckpt {
                save_vae(
                    dir,
                    &vae,
                    &SaveInfo {
                        seed,
                        epoch: Some(epoch),
                        extra: serde_json::json!({ "demon_shape": [s_dim, m_dim], "val_loss": val_loss }),
                        optimizer: Some((&opt, t.lr)),
                    },
                )?;
            }
            best = Some((score, epoch, vae.store.clone()));
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    vae.store = store;
    Ok(Stage1Output {
        vae,
        report,
        best_epoch,
    })
}

/// Deterministic loss (z = μ, running statistics) over fixed pairs.
pub fn vae_eval_loss(vae: &mut Vae, inputs: &VaeInputs, pairs: &[(usize, usize)]) -> Result<f64> {
    let mut m = Mean::default();
    for chunk in pairs.chunks(EVAL_BATCH) {
        let a: Vec<usize> = chunk.iter().map(|p| p.0).collect();
        let b: Vec<usize> = chunk.iter().map(|p| p.1).collect();
        let mut s = Session::eval(&mut vae.store);
        let xv = s.input(inputs.batch(&a)?)?;
        let yv = s.input(inputs.batch(&b)?)?;
        let lat = vae.net.encode(&mut s, xv)?;
        let out = vae.net.decode(&mut s, lat.mu)?;
        let (loss, _) = vae_loss(&mut s.tape, yv, out, lat)?;
        m.add(s.tape.value(loss).item()?, chunk.len());
    }
    Ok(m.get())
}

/// 1-D DEMON spectrum (sum over sub-bands) of segment `i`.
pub fn raw_demon1d(ds: &Dataset, i: usize) -> Result<Vec<f64>> {
    Ok(ds.demon(i)?.sum_axis(Axis(0)).to_vec())
}

/// 1-D DEMON spectra of the frozen VAE's reconstructions (z = μ), mapped back
/// to the original scale, for the segments `idx`.
pub fn reconstructed_demon1d(vae: &mut Vae, inputs: &VaeInputs, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    let (s_dim, m_dim) = inputs.shape;
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let rec = vae.reconstruct_eval(&inputs.batch(chunk)?)?;
        for (k, &i) in chunk.iter().enumerate() {
            let unit = &rec.data()[k * s_dim * m_dim..(k + 1) * s_dim * m_dim];
            let back = from_unit_range(unit, inputs.ranges[i]);
            let mut row = vec![0.0; m_dim];
            for band in back.chunks(m_dim) {
                for (r, v) in row.iter_mut().zip(band) {
                    *r += v;
                }
            }
            out.push(row);
        }
    }
    Ok(out)
}

/// Per-segment model inputs for Stage 2 and evaluation.
pub struct ClassifierInputs {
    pub spec_shape: (usize, usize),
    pub spectrograms: Vec<Vec<f64>>,
    /// Reconstructed 1-D DEMON spectra (before scaling).
    pub routing: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ClassifierInputs {
    pub fn new(ds: &Dataset, vae: &mut Vae) -> Result<Self> {
        let vin = VaeInputs::new(ds)?;
        let all: Vec<usize> = (0..ds.segments.len()).collect();
        let routing = reconstructed_demon1d(vae, &vin, &all)?;
        let mut spectrograms = Vec::with_capacity(all.len());
        let mut spec_shape = None;
        for &i in &all {
            let s = ds.classifier_input(i)?;
            if *spec_shape.get_or_insert(s.dim()) != s.dim() {
                return Err(invalid("train", "spectrogram shapes differ between segments"));
            }
            spectrograms.push(s.iter().copied().collect());
        }
        Ok(Self {
            spec_shape: spec_shape.ok_or_else(|| invalid("train", "dataset has no segments"))?,
            spectrograms,
            routing,
            labels: ds.segments.iter().map(|s| s.label).collect(),
        })
    }

    fn batch(&self, model: &Demonet, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.spectrograms[i].as_slice()).collect();
        let x = stack(&rows, &[1, self.spec_shape.0, self.spec_shape.1])?;
        let r: Vec<Vec<f64>> = idx.iter().map(|&i| self.routing[i].clone()).collect();
        Ok((x, model.scale_inputs(&r)?))
    }
}

/// Predictions for a set of segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub indices: Vec<usize>,
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
    pub experts: Vec<usize>,
    /// Mean cross-entropy of the logits against the labels.
    pub loss: f64,
}

impl Predictions {
    pub fn accuracy(&self) -> f64 {
        if self.indices.is_empty() {
            return f64::NAN;
        }
        let ok = self.predicted.iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        ok as f64 / self.indices.len() as f64
    }
}

/// Eval-mode predictions (running statistics, no sampling noise).
pub fn predict(model: &mut Demonet, inputs: &ClassifierInputs, idx: &[usize]) -> Result<Predictions> {
    let mut out = Predictions {
        indices: idx.to_vec(),
        predicted: Vec::with_capacity(idx.len()),
        labels: idx.iter().map(|&i| inputs.labels[i]).collect(),
        experts: Vec::with_capacity(idx.len()),
        loss: 0.0,
    };
    let mut ce = Mean::default();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, r) = inputs.batch(model, chunk)?;
        let (logits, routing) = model.predict(&x, &r)?;
        let c = logits.shape()[1];
        for (row, &i) in logits.data().chunks(c).zip(chunk) {
            out.predicted.push(crate::model::demonet::argmax(row));
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            ce.add(lse - row[inputs.labels[i]], 1);
        }
        out.experts.extend(routing.selected);
    }
    out.loss = ce.get();
    Ok(out)
}

pub struct Stage2Output {
    pub model: Demonet,
    pub inputs: ClassifierInputs,
    pub report: TrainReport,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
}

/// One optimizer step of Stage 2 on the segments `idx`; returns the loss,
/// its parts and the routing decisions.
pub fn stage2_step(
    model: &mut Demonet,
    opt: &mut AdamW,
    inputs: &ClassifierInputs,
    idx: &[usize],
    alpha: f64,
    lr: f64,
) -> Result<(f64, crate::model::LossParts, RoutingOutput)> {
    let (x, r) = inputs.batch(model, idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| inputs.labels[i]).collect();
    let mut s = Session::train(&mut model.store);
    let rv = s.input(r)?;
    let (probs, routing) = model.net.route(&mut s, rv)?;
    let xv = s.input(x)?;
    let logits = model.net.forward(&mut s, xv, &routing.selected)?;
    let (loss, parts) = total_loss(&mut s.tape, logits, &labels, probs, &routing, alpha)?;
    let grads = s.tape.backward(loss)?;
    let lv = s.tape.value(loss).item()?;
    drop(s);
    opt.step(&mut model.store, &grads, lr)?;
    Ok((lv, parts, routing))
}

/// Trains the routed classifier with the VAE frozen. The best validation
/// accuracy selects the returned model; training stops after
/// `train.patience` epochs without improvement.
pub fn train_stage2(ds: &Dataset, vae: &mut Vae, cfg: &Config, seed: u64, ckpt: Option<&Path>) -> Result<Stage2Output> {
    let vae_print = vae.store.fingerprint_all();
    let inputs = ClassifierInputs::new(ds, vae)?;
    let train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(invalid("train_stage2", "no training segments"));
    }
    let val = ds.indices(Split::Val);
    let test_tracks: BTreeSet<&str> = ds
        .records
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| r.track_id.as_str())
        .collect();
    let n_classes = ds.classes.len();
    let mcfg = cfg.demonet_config(n_classes);
    if mcfg.n_mod_bins != inputs.routing[0].len() {
        return Err(Error::Config(format!(
            "router expects {} bins, spectra have {}",
            mcfg.n_mod_bins,
            inputs.routing[0].len()
        )));
    }
    let mut model = Demonet::new(mcfg, seed)?;
    let train_rows: Vec<Vec<f64>> = train.iter().map(|&i| inputs.routing[i].clone()).collect();
    model.fit_input_scaling(&train_rows)?;
    let t = &cfg.train;
    let sched = WarmupCosine::new(t.lr, t.warmup as f64, t.epochs as f64)?;
    let mut opt = optimizer(cfg);
    let mut shuffle = rng(seed, SHUFFLE_STREAM);
    let mut report = TrainReport::default();
    let mut best: Option<((f64, f64), usize, demonet_tensor::ParamStore)> = None;
    let mut order = train.clone();
    for epoch in 0..t.epochs {
        order.shuffle(&mut shuffle);
        let n_batches = order.len().div_ceil(t.batch);
        let (mut total, mut task, mut bal) = (Mean::default(), Mean::default(), Mean::default());
        let mut counts = vec![0usize; model.net.cfg.n_experts];
        for (bi, chunk) in order.chunks(t.batch).enumerate() {
            let leaked: Vec<String> = chunk
                .iter()
                .map(|&i| ds.records[ds.segments[i].record].track_id.clone())
                .filter(|tr| test_tracks.contains(tr.as_str()))
                .collect();
            if !leaked.is_empty() {
                return Err(Error::Leakage(leaked));
            }
            let lr = sched.lr_at(epoch as f64 + bi as f64 / n_batches as f64)?;
            let (l, parts, routing) =
                stage2_step(&mut model, &mut opt, &inputs, chunk, cfg.model.alpha, lr).map_err(diverged(epoch, bi))?;
            total.add(l, chunk.len());
            task.add(parts.task, chunk.len());
            bal.add(parts.balance, chunk.len());
            for (c, k) in counts.iter_mut().zip(&routing.counts) {
                *c += k;
            }
        }
        let val_pred = if val.is_empty() {
            None
        } else {
            Some(predict(&mut model, &inputs, &val)?)
        };
        let val_acc = val_pred.as_ref().map(Predictions::accuracy);
        let val_loss = val_pred.as_ref().map(|p| p.loss);
        report.epochs.push(EpochReport {
            stage: Stage::Demonet,
            seed,
            epoch,
            lr: sched.lr_at(epoch as f64)?,
            loss: total.get(),
            recon_loss: None,
            kl_loss: None,
            task_loss: Some(task.get()),
            balance_loss: Some(bal.get()),
            val_loss,
            val_accuracy: val_acc,
            expert_counts: Some(counts.clone()),
            samples: total.n,
        });
        log::info!(
            "demonet seed {seed} epoch {epoch}: loss {:.5} val acc {val_acc:?} experts {counts:?}",
            total.get()
        );
        // Higher validation accuracy wins, then lower validation loss;
        // without a validation split the training loss decides.
        let score = match (val_acc, val_loss) {
            (Some(a), Some(l)) => (a, -l),
            _ => (0.0, -total.get()),
        };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            if let Some(dir) = ckpt {
                save_demonet(
                    dir,
                    &model,
                    (vae, &SaveInfo { seed, ..Default::default() }),
                    &SaveInfo {
                        seed,
                        epoch: Some(epoch),
                        extra: serde_json::json!({ "classes": ds.classes, "val_accuracy": val_acc }),
                        optimizer: Some((&opt, t.lr)),
                    },
                )?;
            }
            best = Some((score, epoch, model.store.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= t.patience {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }
    if vae.store.fingerprint_all() != vae_print {
        return Err(invalid("train_stage2", "frozen VAE was modified"));
    }
    let (score, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(Stage2Output {
        model,
        inputs,
        report,
        best_epoch,
        best_val_accuracy: (!val.is_empty()).then_some(score.0),
    })
}
