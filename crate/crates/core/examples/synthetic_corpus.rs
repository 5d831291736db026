//! Writes the synthetic three-class corpus (WAV files, manifest, truth
//! sidecar) and checks each recording's shaft rate against its 1-D DEMON
//! spectrum.
//!
//! cargo run --release --example synthetic_corpus -- [work_dir] [recordings_per_class]

use std::path::PathBuf;

use demonet::config::{Config, SynthConfig};
use demonet::demon::{demon1d, demon2d, find_fundamental};
use demonet::dsp::wav::read_wav;
use demonet::pipeline::corpus::{generate, load_truth, truth_path};
use demonet::pipeline::Split;

fn main() -> demonet::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "target/corpus".into()));
    let per_class: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut synth = SynthConfig::default();
    for c in &mut synth.classes {
        c.recordings = per_class;
    }
    let manifest_path = work.join("manifest.csv");
    let m = generate(&synth, &manifest_path)?;
    println!(
        "{} recordings in {} classes: train {}, val {}, test {}",
        m.records.len(),
        m.classes.len(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test)
    );

    let cfg = Config::from_toml(include_str!("../configs/desk.toml"))?;
    let params = cfg.demon_params();
    let truth = load_truth(&truth_path(&manifest_path))?;
    let mut hits = 0;
    for row in &truth {
        let w = read_wav(work.join(&row.path))?;
        let d1 = demon1d(&demon2d(&w, &params)?);
        let f = find_fundamental(&d1, 1.0, 30.0)?;
        let ok = (f - row.mod_hz).abs() <= d1.mod_bin_hz;
        hits += ok as usize;
        println!(
            "{:<12} {:<7} snr {:>5.1} dB  shaft {:>6.3} Hz  found {:>6.3} Hz {}",
            row.track_id,
            row.label,
            row.snr_db,
            row.mod_hz,
            f,
            if ok { "" } else { "(miss)" }
        );
    }
    println!("{hits}/{} within one modulation bin", truth.len());
    Ok(())
}
