//! Expert loads with and without the balance term on a class-skewed corpus.
//! Without it the router receives no gradient and keeps its initial
//! assignment, which sends nearly every positive spectrum to one expert.
//!
//! cargo run --release --example balance_ablation -- [work_dir] [seed]

use std::path::PathBuf;

use demonet::config::{Config, SynthConfig};
use demonet::pipeline::corpus::generate;
use demonet::pipeline::reports::load_ratio;
use demonet::pipeline::{train_stage1, train_stage2, Dataset, Manifest, Wanted};

fn main() -> demonet::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "target/skewed".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(123);
    let mut cfg = Config::from_toml(include_str!("../configs/desk.toml"))?;
    cfg.io.manifest = work.join("data/manifest.csv");
    cfg.io.cache_dir = work.join("cache");
    cfg.train.epochs = 30;
    cfg.train.patience = 30;
    let manifest = if cfg.io.manifest.exists() {
        Manifest::load(&cfg.io.manifest)?
    } else {
        generate(&SynthConfig::skewed(), &cfg.io.manifest)?
    };
    let ds = Dataset::build(&manifest, &cfg, Wanted::training(&cfg))?.require_complete()?;
    let mut vae = train_stage1(&ds, &cfg, seed, None)?.vae;
    for alpha in [0.0, 1e-2] {
        cfg.model.alpha = alpha;
        let out = train_stage2(&ds, &mut vae, &cfg, seed, None)?;
        let last = out.report.last().expect("30 epochs");
        let counts = last.expert_counts.clone().unwrap_or_default();
        println!(
            "alpha {alpha:<5} epoch {}: loads {counts:?}, max/min {:.2}",
            last.epoch,
            load_ratio(&counts)
        );
    }
    Ok(())
}
