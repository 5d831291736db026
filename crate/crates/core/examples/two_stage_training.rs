//! Full desk-scale run: synthesize the corpus, extract features, train the
//! VAE, train the routed classifier and score the test split.
//!
//! cargo run --release --example two_stage_training -- [work_dir] [seed]

use std::path::PathBuf;
use std::time::Instant;

use demonet::config::Config;
use demonet::pipeline::corpus::generate;
use demonet::pipeline::reports::{Confusion, RoutingReport};
use demonet::pipeline::train::predict;
use demonet::pipeline::{train_stage1, train_stage2, Dataset, Manifest, Split, Wanted};

fn main() -> demonet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "target/desk".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(123);
    let mut cfg = Config::from_toml(include_str!("../configs/desk.toml"))?;
    cfg.io.manifest = work.join("data/manifest.csv");
    cfg.io.cache_dir = work.join("cache");
    cfg.io.out_dir = work.join("out");

    let t = Instant::now();
    let manifest = if cfg.io.manifest.exists() {
        Manifest::load(&cfg.io.manifest)?
    } else {
        generate(cfg.synth.as_ref().expect("desk config has a synth section"), &cfg.io.manifest)?
    };
    println!("corpus: {} recordings ({:.1?})", manifest.records.len(), t.elapsed());

    let t = Instant::now();
    let ds = Dataset::build(&manifest, &cfg, Wanted::training(&cfg))?.require_complete()?;
    println!(
        "features: {} segments, cache {:?} ({:.1?})",
        ds.segments.len(),
        ds.cache,
        t.elapsed()
    );

    let t = Instant::now();
    let s1 = train_stage1(&ds, &cfg, seed, None)?;
    println!("stage 1: best epoch {} ({:.1?})", s1.best_epoch, t.elapsed());

    let t = Instant::now();
    let mut vae = s1.vae;
    let mut s2 = train_stage2(&ds, &mut vae, &cfg, seed, None)?;
    println!(
        "stage 2: best epoch {}, val acc {:?} ({:.1?})",
        s2.best_epoch,
        s2.best_val_accuracy,
        t.elapsed()
    );

    let p = predict(&mut s2.model, &s2.inputs, &ds.indices(Split::Test))?;
    let conf = Confusion::new(&ds.classes, &p);
    println!("test accuracy {:.4}", conf.accuracy());
    for (c, row) in ds.classes.iter().zip(&conf.counts) {
        println!("  {c:>8} {row:?}");
    }
    let routing = RoutingReport::new(&ds.classes, cfg.model.n_experts, &p);
    println!("routing (class × expert):");
    for (c, row) in ds.classes.iter().zip(routing.fractions()) {
        let cells: Vec<String> = row.iter().map(|f| format!("{f:.2}")).collect();
        println!("  {c:>8} {}", cells.join(" "));
    }
    Ok(())
}
