//! Spectrogram and DEMON feature shapes for a 30 s segment at the reference
//! 32 kHz settings and at the desk settings.
//!
//! cargo run --release --example feature_shapes

use std::time::Instant;

use demonet::config::Config;
use demonet::demon::{demon1d, demon2d, DemonParams};
use demonet::dsp::synth::{synthesize, Carrier, ModulationSpec};
use demonet::features::{mean_spectrum, FeatureKind, SpectrogramExtractor, SpectrogramParams};

fn main() -> demonet::Result<()> {
    let spec = |sr: u32| ModulationSpec {
        carrier: Carrier::Broadband { lo_hz: 100.0, hi_hz: (sr / 2) as f64 * 0.9 },
        ..ModulationSpec::tone(1.0, 7.0, 0.5, 30.0)
    };

    println!("reference, 32 kHz, 10-8000 Hz:");
    let w = synthesize(&spec(32000), 32000, 1, "ref")?;
    let base = SpectrogramParams {
        kind: FeatureKind::Stft,
        passband: (10.0, 8000.0),
        frame_len_ms: 50.0,
        shift_ms: 25.0,
        n_mels: 300,
        cqt_b: 30,
        cqt_hop_ms: 33.34375,
        cqt_f_min: None,
    };
    for kind in [FeatureKind::Stft, FeatureKind::Mel, FeatureKind::Cqt] {
        let t = Instant::now();
        let ex = SpectrogramExtractor::new(SpectrogramParams { kind, ..base.clone() }, 32000)?;
        let s = ex.extract(&w)?;
        println!("  {kind:<5} {:?} ({:.1?})", s.shape(), t.elapsed());
    }
    let t = Instant::now();
    let d = demon2d(&w, &DemonParams::default())?;
    println!("  demon {:?} ({:.1?})", d.values.dim(), t.elapsed());

    println!("desk, 4 kHz:");
    let cfg = Config::from_toml(include_str!("../configs/desk.toml"))?;
    let w = synthesize(&spec(4000), 4000, 1, "desk")?;
    let s = SpectrogramExtractor::new(cfg.spectrogram_params(), 4000)?.extract(&w)?;
    let profile = mean_spectrum(&s);
    let loudest = profile.iter().enumerate().fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    println!(
        "  {} {:?}, loudest band {:.0} Hz",
        s.kind,
        s.shape(),
        s.bin_freqs[loudest.0]
    );
    let d = demon2d(&w, &cfg.demon_params())?;
    let d1 = demon1d(&d);
    println!(
        "  demon {:?} over {} sub-bands of {} Hz, 1-D length {} at {:.3} Hz/bin",
        d.values.dim(),
        d.subband_edges.len(),
        cfg.demon.interval_hz,
        d1.values.len(),
        d1.mod_bin_hz
    );
    Ok(())
}
