//! Saves a classifier checkpoint (with its frozen VAE and optimizer state),
//! loads it back and checks the predictions agree bit for bit.
//!
//! cargo run --release --example checkpoint_round_trip -- [dir]

use std::path::PathBuf;

use demonet::model::checkpoint::{load_demonet, load_optimizer, read_manifest, save_demonet, SaveInfo};
use demonet::model::{Demonet, DemonetConfig, Vae, VaeConfig};
use demonet_tensor::nn::Session;
use demonet_tensor::{AdamW, AdamWConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> demonet::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("demonet-ckpt"));
    let vae = Vae::new(VaeConfig { hidden: 8, latent: 8 }, 1)?;
    let cfg = DemonetConfig {
        widths: [8, 16, 32, 64],
        ..DemonetConfig::new(128, 5, 3)
    };
    let mut model = Demonet::new(cfg, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let routing: Vec<Vec<f64>> = (0..16)
        .map(|_| Tensor::randn([128], 1.0, &mut rng).map(f64::abs).into_data())
        .collect();
    model.fit_input_scaling(&routing)?;

    // One step so the optimizer has moments worth saving.
    let x = Tensor::randn([4, 1, 59, 32], 1.0, &mut rng);
    let r = model.scale_inputs(&routing[..4])?;
    let mut opt = AdamW::new(AdamWConfig::default());
    {
        let mut s = Session::train(&mut model.store);
        let rv = s.input(r.clone())?;
        let (_, route) = model.net.route(&mut s, rv)?;
        let xv = s.input(x.clone())?;
        let logits = model.net.forward(&mut s, xv, &route.selected)?;
        let loss = s.tape.cross_entropy(logits, &[0, 1, 2, 0])?;
        let grads = s.tape.backward(loss)?;
        drop(s);
        let n = opt.step(&mut model.store, &grads, 1e-3)?;
        println!("updated {n} tensors (experts used: {:?})", route.counts);
    }

    let vae_info = SaveInfo { seed: 1, ..SaveInfo::default() };
    let info = SaveInfo {
        seed: 2,
        epoch: Some(0),
        extra: serde_json::json!({ "classes": ["cargo", "tanker", "tug"] }),
        optimizer: Some((&opt, 1e-3)),
    };
    save_demonet(&dir, &model, (&vae, &vae_info), &info)?;
    let m = read_manifest(&dir)?;
    println!("{} entries written to {}", m.entries.len(), dir.display());

    let (mut back, manifest, back_vae, _) = load_demonet(&dir)?;
    let restored = load_optimizer(&dir, &manifest, &back.store)?;
    println!("optimizer restored: {}", restored.is_some());
    println!("classes {}", manifest.extra["classes"]);
    let same = back.predict(&x, &r)?.0 == model.predict(&x, &r)?.0;
    println!(
        "predictions identical: {same}; VAE identical: {}",
        back_vae.store.fingerprint_all() == vae.store.fingerprint_all()
    );
    Ok(())
}
