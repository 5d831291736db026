//! Checkpoint directories: `manifest.json` naming every stored entry, one
//! DNT1 tensor file per entry, and optionally the optimizer moments.
//!
//! ```text
//! ckpt/
//!   manifest.json
//!   tensors/000.dnt ...
//!   optim/000.m.dnt, optim/000.v.dnt ...
//!   vae/            (DEMONet checkpoints embed their frozen VAE)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use demonet_tensor::io::{load_tensor, save_tensor};
use demonet_tensor::{AdamW, AdamWConfig, EntryKind, Moments, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::demonet::{Demonet, DemonetConfig};
use super::vae::{Vae, VaeConfig};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "demonet-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRecord {
    pub name: String,
    pub step: u64,
    pub m: String,
    pub v: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: Vec<MomentRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// `vae` or `demonet`.
    pub kind: String,
    pub seed: u64,
    pub epoch: Option<usize>,
    /// Model hyperparameters.
    pub model: serde_json::Value,
    /// Anything the pipeline needs to reuse the model (feature settings,
    /// class names).
    pub extra: serde_json::Value,
    pub entries: Vec<EntryRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

/// What gets written besides the parameters.
#[derive(Clone, Debug, Default)]
pub struct SaveInfo<'a> {
    pub seed: u64,
    pub epoch: Option<usize>,
    pub extra: serde_json::Value,
    pub optimizer: Option<(&'a AdamW, f64)>,
}

fn write_store(dir: &Path, kind: &str, model: serde_json::Value, store: &ParamStore, info: &SaveInfo) -> Result<()> {
    fs::create_dir_all(dir.join("tensors"))?;
    let mut entries = Vec::new();
    for (i, id) in store.ids().enumerate() {
        let file = format!("tensors/{i:03}.dnt");
        save_tensor(dir.join(&file), store.get(id))?;
        entries.push(EntryRecord {
            name: store.name(id).to_string(),
            trainable: store.kind(id) == EntryKind::Trainable,
            shape: store.get(id).shape().to_vec(),
            file,
        });
    }
    let optimizer = match info.optimizer {
        Some((opt, lr_max)) => {
            fs::create_dir_all(dir.join("optim"))?;
            let mut moments = Vec::new();
            for (id, mo) in opt.state() {
                let shape = store.get(id).shape().to_vec();
                let (m, v) = (
                    format!("optim/{:03}.m.dnt", id.index()),
                    format!("optim/{:03}.v.dnt", id.index()),
                );
                save_tensor(dir.join(&m), &Tensor::new(shape.clone(), mo.m.clone())?)?;
                save_tensor(dir.join(&v), &Tensor::new(shape, mo.v.clone())?)?;
                moments.push(MomentRecord {
                    name: store.name(id).to_string(),
                    step: mo.step,
                    m,
                    v,
                });
            }
            let c = opt.cfg;
            Some(OptimizerRecord {
                lr_max,
                weight_decay: c.weight_decay,
                beta1: c.beta1,
                beta2: c.beta2,
                eps: c.eps,
                moments,
            })
        }
        None => None,
    };
    let manifest = Manifest {
        format: FORMAT.into(),
        kind: kind.into(),
        seed: info.seed,
        epoch: info.epoch,
        model,
        extra: info.extra.clone(),
        entries,
        optimizer,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::file(&path, e))?;
    if m.format != FORMAT {
        return Err(Error::file(&path, format!("unknown checkpoint format `{}`", m.format)));
    }
    Ok(m)
}

fn fill_store(dir: &Path, manifest: &Manifest, store: &mut ParamStore) -> Result<()> {
    if manifest.entries.len() != store.len() {
        return Err(Error::file(
            dir,
            format!("{} stored entries, model has {}", manifest.entries.len(), store.len()),
        ));
    }
    for e in &manifest.entries {
        let id = store
            .id(&e.name)
            .ok_or_else(|| Error::file(dir, format!("unknown entry `{}`", e.name)))?;
        let t = load_tensor(dir.join(&e.file)).map_err(|err| Error::file(dir.join(&e.file), err))?;
        store.set(id, t).map_err(|err| Error::file(dir.join(&e.file), err))?;
    }
    Ok(())
}

/// Optimizer restored from a manifest, for resuming training.
pub fn load_optimizer(dir: &Path, manifest: &Manifest, store: &ParamStore) -> Result<Option<AdamW>> {
    let Some(rec) = &manifest.optimizer else {
        return Ok(None);
    };
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: rec.weight_decay,
        beta1: rec.beta1,
        beta2: rec.beta2,
        eps: rec.eps,
    });
    for mr in &rec.moments {
        let id = store
            .id(&mr.name)
            .ok_or_else(|| Error::file(dir, format!("moments for unknown entry `{}`", mr.name)))?;
        let m = load_tensor(dir.join(&mr.m))?.into_data();
        let v = load_tensor(dir.join(&mr.v))?.into_data();
        opt.set_moments(id, Moments { m, v, step: mr.step });
    }
    Ok(Some(opt))
}

pub fn save_vae(dir: &Path, vae: &Vae, info: &SaveInfo) -> Result<()> {
    write_store(dir, "vae", serde_json::to_value(vae.net.cfg)?, &vae.store, info)
}

pub fn load_vae(dir: &Path) -> Result<(Vae, Manifest)> {
    let m = read_manifest(dir)?;
    if m.kind != "vae" {
        return Err(Error::file(dir, format!("expected a vae checkpoint, found `{}`", m.kind)));
    }
    let cfg: VaeConfig = serde_json::from_value(m.model.clone()).map_err(|e| Error::file(dir, e))?;
    let mut vae = Vae::new(cfg, m.seed)?;
    fill_store(dir, &m, &mut vae.store)?;
    Ok((vae, m))
}

/// Writes the classifier and a copy of its frozen VAE under `vae/`.
pub fn save_demonet(dir: &Path, model: &Demonet, vae: (&Vae, &SaveInfo), info: &SaveInfo) -> Result<()> {
    write_store(dir, "demonet", serde_json::to_value(&model.net.cfg)?, &model.store, info)?;
    save_vae(&dir.join("vae"), vae.0, vae.1)
}

pub fn load_demonet(dir: &Path) -> Result<(Demonet, Manifest, Vae, Manifest)> {
    let m = read_manifest(dir)?;
    if m.kind != "demonet" {
        return Err(Error::file(dir, format!("expected a demonet checkpoint, found `{}`", m.kind)));
    }
    let cfg: DemonetConfig = serde_json::from_value(m.model.clone()).map_err(|e| Error::file(dir, e))?;
    let mut model = Demonet::new(cfg, m.seed)?;
    fill_store(dir, &m, &mut model.store)?;
    let (vae, vm) = load_vae(&dir.join("vae"))?;
    Ok((model, m, vae, vm))
}

/// Path of the embedded VAE inside a DEMONet checkpoint.
pub fn embedded_vae(dir: &Path) -> PathBuf {
    dir.join("vae")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vae_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vae = Vae::new(VaeConfig { hidden: 4, latent: 2 }, 9).unwrap();
        save_vae(dir.path(), &vae, &SaveInfo { seed: 9, ..Default::default() }).unwrap();
        let (back, m) = load_vae(dir.path()).unwrap();
        assert_eq!(m.kind, "vae");
        assert_eq!(back.store.fingerprint_all(), vae.store.fingerprint_all());
    }
}
