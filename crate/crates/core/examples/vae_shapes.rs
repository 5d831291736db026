//! Shape chain of the cross-temporal VAE and one training step on a pair of
//! random sub-band spectra.
//!
//! cargo run --release --example vae_shapes -- [hidden] [latent]

use demonet::model::vae::latent_shape;
use demonet::model::{reparameterize, vae_loss, Vae, VaeConfig};
use demonet_tensor::nn::Session;
use demonet_tensor::{AdamW, AdamWConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> demonet::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cfg = VaeConfig {
        hidden: args.first().copied().unwrap_or(64),
        latent: args.get(1).copied().unwrap_or(128),
    };
    for (s, m) in [(28, 1172), (28, 128), (28, 100)] {
        match latent_shape(s, m) {
            Some((h, w)) => println!("{s}×{m} -> latent {}×{h}×{w}", cfg.latent),
            None => println!("{s}×{m} does not survive the encoder/decoder chain"),
        }
    }

    let mut vae = Vae::new(cfg, 0)?;
    println!("{} trainable parameters", vae.store.num_trainable());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn([1, 1, 28, 1172], 0.3, &mut rng).map(f64::tanh);
    let y = Tensor::randn([1, 1, 28, 1172], 0.3, &mut rng).map(f64::tanh);
    let stats = vae.encode_eval(&x)?;
    println!("mu {:?}, logvar {:?}", stats.mu.shape(), stats.logvar.shape());
    println!("decoded {:?}", vae.decode_eval(&stats.mu)?.shape());

    // Encode one window, reconstruct the other.
    let mut opt = AdamW::new(AdamWConfig::default());
    for step in 0..3 {
        let mut s = Session::train(&mut vae.store);
        let xv = s.input(x.clone())?;
        let yv = s.input(y.clone())?;
        let lat = vae.net.encode(&mut s, xv)?;
        let z = reparameterize(&mut s.tape, lat, step)?;
        let out = vae.net.decode(&mut s, z)?;
        let (loss, parts) = vae_loss(&mut s.tape, yv, out, lat)?;
        let grads = s.tape.backward(loss)?;
        drop(s);
        opt.step(&mut vae.store, &grads, 1e-3)?;
        println!("step {step}: recon {:.5} kl {:.5}", parts.recon, parts.kl);
    }
    Ok(())
}
