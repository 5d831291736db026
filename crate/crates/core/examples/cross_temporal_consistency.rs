//! Trains the cross-temporal VAE and compares how similar the 1-D DEMON
//! spectra of different windows of one recording are, before and after
//! reconstruction.
//!
//! cargo run --release --example cross_temporal_consistency -- [work_dir] [seeds...]

use std::path::PathBuf;

use demonet::config::Config;
use demonet::pipeline::corpus::generate;
use demonet::pipeline::reports::{cosine, cosine_similarity_report};
use demonet::pipeline::train::{raw_demon1d, reconstructed_demon1d, VaeInputs};
use demonet::pipeline::{train_stage1, Dataset, Manifest, Split, Wanted};

fn main() -> demonet::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "target/desk".into()));
    let mut seeds: Vec<u64> = args.filter_map(|s| s.parse().ok()).collect();
    if seeds.is_empty() {
        seeds = vec![123, 3407];
    }
    let mut cfg = Config::from_toml(include_str!("../configs/desk.toml"))?;
    cfg.io.manifest = work.join("data/manifest.csv");
    cfg.io.cache_dir = work.join("cache");
    let manifest = if cfg.io.manifest.exists() {
        Manifest::load(&cfg.io.manifest)?
    } else {
        generate(cfg.synth.as_ref().expect("synth section"), &cfg.io.manifest)?
    };
    let ds = Dataset::build(&manifest, &cfg, Wanted { spectrogram: None, demon: true })?.require_complete()?;
    for seed in seeds {
        let mut vae = train_stage1(&ds, &cfg, seed, None)?.vae;
        let report = cosine_similarity_report(&ds, &mut vae, &[Split::Test])?;
        let (raw, rec) = report.means();
        println!(
            "seed {seed}: {} test recordings, mean cosine raw {raw:.4} -> reconstructed {rec:.4}",
            report.rows.len()
        );
        for row in report.rows.iter().take(3) {
            println!("  {:<12} {:.4} -> {:.4}", row.track_id, row.raw, row.reconstructed);
        }
        // First test window of each class: a VAE that ignored its input
        // would make these identical too.
        let firsts: Vec<usize> = (0..ds.classes.len())
            .filter_map(|c| {
                ds.indices(Split::Test)
                    .into_iter()
                    .find(|&i| ds.segments[i].label == c)
            })
            .collect();
        let recon = reconstructed_demon1d(&mut vae, &VaeInputs::new(&ds)?, &firsts)?;
        for a in 0..firsts.len() {
            for b in a + 1..firsts.len() {
                println!(
                    "  {} vs {}: raw {:.4}, reconstructed {:.4}",
                    ds.classes[a],
                    ds.classes[b],
                    cosine(&raw_demon1d(&ds, firsts[a])?, &raw_demon1d(&ds, firsts[b])?),
                    cosine(&recon[a], &recon[b])
                );
            }
        }
    }
    Ok(())
}
