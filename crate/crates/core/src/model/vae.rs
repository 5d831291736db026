//! Convolutional VAE over 2-D DEMON spectra.
//!
//! Encoder: four convolutions (k4 s2 p1, k4 s2 p1, k5 s1 p0, k3 s1 p0), each
//! followed by batch norm, ReLU after the first three. The last conv emits
//! `2 · latent` channels that are split into mean and log-variance. The
//! decoder mirrors it with transposed convolutions and ends in Tanh.

use demonet_tensor::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Session};
use demonet_tensor::{Conv2dConfig, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    /// Channels of the three hidden convolutions.
    pub hidden: usize,
    /// Channels of each of mean and log-variance.
    pub latent: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 128,
        }
    }
}

const ENC: [(usize, usize, usize); 4] = [(4, 2, 1), (4, 2, 1), (5, 1, 0), (3, 1, 0)];

/// Latent spatial size for an `s × m` input, if the chain fits and the
/// decoder maps it back to exactly `s × m`.
pub fn latent_shape(s: usize, m: usize) -> Option<(usize, usize)> {
    let mut hw = (s, m);
    for &(k, st, p) in &ENC {
        hw = (
            Conv2dConfig::conv_out(hw.0, k, st, p)?,
            Conv2dConfig::conv_out(hw.1, k, st, p)?,
        );
    }
    let mut back = hw;
    for &(k, st, p) in ENC.iter().rev() {
        back = (
            Conv2dConfig::transpose_out(back.0, k, st, p)?,
            Conv2dConfig::transpose_out(back.1, k, st, p)?,
        );
    }
    (back == (s, m)).then_some(hw)
}

/// Layer definitions; values live in the owning [`Vae`]'s store.
#[derive(Clone, Debug)]
pub struct VaeNet {
    pub cfg: VaeConfig,
    enc: Vec<(Conv2d, BatchNorm2d)>,
    dec: Vec<(ConvTranspose2d, Option<BatchNorm2d>)>,
}

/// Mean and log-variance handles on a tape, each [B, latent, H′, W′].
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub logvar: Var,
}

/// Detached latent statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mu: Tensor,
    pub logvar: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLossParts {
    pub recon: f64,
    pub kl: f64,
}

pub struct Vae {
    pub store: ParamStore,
    pub net: VaeNet,
}

impl Vae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 || cfg.latent == 0 {
            return Err(invalid("vae", "hidden and latent widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [1, cfg.hidden, cfg.hidden, cfg.hidden, 2 * cfg.latent];
        let mut enc = Vec::new();
        for (i, &(k, st, p)) in ENC.iter().enumerate() {
            let name = format!("encoder.{i}");
            let conv = Conv2d::new(
                &mut store,
                &format!("{name}.conv"),
                widths[i],
                widths[i + 1],
                Conv2dConfig::square(k, st, p),
                true,
                &mut rng,
            )?;
            let bn = BatchNorm2d::new(&mut store, &format!("{name}.bn"), widths[i + 1])?;
            enc.push((conv, bn));
        }
        let widths = [cfg.latent, cfg.hidden, cfg.hidden, cfg.hidden, 1];
        let mut dec = Vec::new();
        for (i, &(k, st, p)) in ENC.iter().rev().enumerate() {
            let name = format!("decoder.{i}");
            let conv = ConvTranspose2d::new(
                &mut store,
                &format!("{name}.conv"),
                widths[i],
                widths[i + 1],
                Conv2dConfig::square(k, st, p),
                true,
                &mut rng,
            )?;
            let bn = if i < 3 {
                Some(BatchNorm2d::new(&mut store, &format!("{name}.bn"), widths[i + 1])?)
            } else {
                None
            };
            dec.push((conv, bn));
        }
        Ok(Self {
            store,
            net: VaeNet { cfg, enc, dec },
        })
    }

    /// Eval-mode encoding of a [B, 1, S, M] batch.
    pub fn encode_eval(&mut self, x: &Tensor) -> Result<LatentStats> {
        let mut s = Session::eval(&mut self.store);
        let xv = s.input(x.clone())?;
        let lat = self.net.encode(&mut s, xv)?;
        Ok(LatentStats {
            mu: s.tape.value(lat.mu).clone(),
            logvar: s.tape.value(lat.logvar).clone(),
        })
    }

    /// Eval-mode decoding of a latent batch.
    pub fn decode_eval(&mut self, z: &Tensor) -> Result<Tensor> {
        let mut s = Session::eval(&mut self.store);
        let zv = s.input(z.clone())?;
        let out = self.net.decode(&mut s, zv)?;
        Ok(s.tape.value(out).clone())
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct_eval(&mut self, x: &Tensor) -> Result<Tensor> {
        let stats = self.encode_eval(x)?;
        self.decode_eval(&stats.mu)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.store.trainable()
    }
}

impl VaeNet {
    pub fn encode(&self, s: &mut Session, x: Var) -> Result<LatentVars> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(invalid("encode", format!("expected [B, 1, S, M], got {shape:?}")));
        }
        if latent_shape(shape[2], shape[3]).is_none() {
            return Err(invalid(
                "encode",
                format!("{}×{} spectrum does not fit the encoder chain", shape[2], shape[3]),
            ));
        }
        let mut h = x;
        for (i, (conv, bn)) in self.enc.iter().enumerate() {
            h = conv.forward(s, h)?;
            h = bn.forward(s, h)?;
            if i < self.enc.len() - 1 {
                h = s.tape.relu(h)?;
            }
        }
        let parts = s.tape.chunk(h, 1, 2)?;
        Ok(LatentVars {
            mu: parts[0],
            logvar: parts[1],
        })
    }

    pub fn decode(&self, s: &mut Session, z: Var) -> Result<Var> {
        let shape = s.tape.shape(z);
        if shape.len() != 4 || shape[1] != self.cfg.latent {
            return Err(invalid(
                "decode",
                format!("expected [B, {}, H, W], got {shape:?}", self.cfg.latent),
            ));
        }
        let mut h = z;
        for (conv, bn) in &self.dec {
            h = conv.forward(s, h)?;
            h = match bn {
                Some(bn) => {
                    let y = bn.forward(s, h)?;
                    s.tape.relu(y)?
                }
                None => s.tape.tanh(h)?,
            };
        }
        Ok(h)
    }
}

/// `z = μ + exp(logvar/2)·ε` with ε drawn from a generator seeded by `seed`.
pub fn reparameterize(tape: &mut Tape, lat: LatentVars, seed: u64) -> Result<Var> {
    let shape = tape.shape(lat.mu).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    reparameterize_with(tape, lat, Tensor::new(shape, eps)?)
}

/// Reparameterization with explicit noise.
pub fn reparameterize_with(tape: &mut Tape, lat: LatentVars, eps: Tensor) -> Result<Var> {
    let half = tape.scale(lat.logvar, 0.5)?;
    let sd = tape.exp(half)?;
    let noise = tape.mul_const(sd, eps)?;
    Ok(tape.add(lat.mu, noise)?)
}

/// Reconstruction MSE plus `½ · mean over batch of Σ(μ² + e^logvar − logvar − 1)`.
pub fn vae_loss(tape: &mut Tape, target: Var, recon: Var, lat: LatentVars) -> Result<(Var, VaeLossParts)> {
    if tape.shape(target) != tape.shape(recon) {
        return Err(invalid(
            "vae_loss",
            format!("target {:?} vs reconstruction {:?}", tape.shape(target), tape.shape(recon)),
        ));
    }
    let batch = tape.shape(lat.mu)[0] as f64;
    let rec = tape.mse(recon, target)?;
    let kl = kl_term(tape, lat)?;
    let kl = tape.scale(kl, 0.5 / batch)?;
    let parts = VaeLossParts {
        recon: tape.value(rec).item()?,
        kl: tape.value(kl).item()?,
    };
    Ok((tape.add(rec, kl)?, parts))
}

fn kl_term(tape: &mut Tape, lat: LatentVars) -> Result<Var> {
    let mu2 = tape.square(lat.mu)?;
    let var = tape.exp(lat.logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, lat.logvar)?;
    let c = tape.add_scalar(b, -1.0)?;
    Ok(tape.sum(c)?)
}
