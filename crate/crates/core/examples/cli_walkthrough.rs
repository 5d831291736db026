//! Drives the command-line interface in-process over a small corpus:
//! synth, extract, train, eval and both reports.
//!
//! cargo run --release --example cli_walkthrough -- [work_dir]
//!
//! The same steps from a shell:
//!
//!   demonet synth   --config small.toml
//!   demonet extract --config small.toml
//!   demonet train   --config small.toml --seeds 1
//!   demonet eval    --config small.toml --checkpoint out/demonet-seed1
//!   demonet report  --config small.toml --kind routing --checkpoint out/demonet-seed1

use std::path::PathBuf;

use demonet::cli::main_with_args;
use demonet::config::Config;

fn main() {
    let work = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/cli-walkthrough"));
    std::fs::create_dir_all(&work).expect("work dir");

    let mut cfg = Config::from_toml(include_str!("../configs/desk.toml")).expect("desk config");
    cfg.io.manifest = work.join("data/manifest.csv");
    cfg.io.cache_dir = work.join("cache");
    cfg.io.out_dir = work.join("out");
    cfg.train.epochs = 8;
    cfg.train.vae_epochs = 5;
    let synth = cfg.synth.as_mut().expect("synth section");
    synth.duration_s = 60.0;
    for c in &mut synth.classes {
        c.recordings = 12;
    }
    let config = work.join("small.toml");
    std::fs::write(&config, cfg.to_toml()).expect("write config");
    let c = config.to_str().expect("utf-8 path");
    let ckpt = work.join("out/demonet-seed1");
    let k = ckpt.to_str().expect("utf-8 path");

    let steps: [&[&str]; 6] = [
        &["synth"],
        &["extract"],
        &["train", "--seeds", "1"],
        &["eval", "--checkpoint", k],
        &["report", "--kind", "routing", "--checkpoint", k],
        &["report", "--kind", "cosine", "--checkpoint", k],
    ];
    for step in steps {
        let mut args = vec!["demonet"];
        args.extend_from_slice(step);
        args.extend(["--config", c]);
        println!("$ {}", args.join(" "));
        let code = main_with_args(&args);
        if code != 0 {
            eprintln!("exit code {code}");
            std::process::exit(code);
        }
    }
    // Without a checkpoint, eval is a configuration error.
    println!("eval without --checkpoint exits with {}", main_with_args(["demonet", "eval", "--config", c]));
    let routing = std::fs::read_to_string(work.join("out/report-routing.csv")).expect("routing report");
    print!("{routing}");
}
